#![allow(dead_code)]

use std::path::Path;

use serde_json::{json, Value};

/// A config small enough to train and attack in a few seconds.
pub fn tiny(root: &Path) -> Value {
    let fine = json!({ "epochs": 1, "batch_size": 8, "lr": 5e-3, "usage_target": 0.7 });
    json!({
        "seed": 0,
        "dataset": root.join("data"),
        "generate": { "classes": 3, "per_class": 20, "image_size": 8, "seed": 0 },
        "model": {
            "depth": 3, "embed_dim": 8, "heads": 2, "image_size": 8, "patch_size": 2,
            "num_classes": 3, "mlp_ratio": 2
        },
        "mechanism": { "ats_start_block": 1, "adavit_start_block": 1 },
        "checkpoints": {
            "backbone": root.join("ckpt/backbone.tslw"),
            "adavit": root.join("ckpt/adavit.tslw"),
            "avit": root.join("ckpt/avit.tslw")
        },
        "train": {
            "backbone": { "epochs": 2, "batch_size": 8, "lr": 5e-3 },
            "adavit": fine,
            "avit": fine
        },
        "attacks": [
            { "attack": { "iterations": 3, "batch_size": 4 } },
            { "attack": { "iterations": 3, "batch_size": 4, "variant": { "kind": "universal" } } }
        ],
        "baseline_attack": { "iterations": 2 },
        "defense": { "policy": "confidence", "holdout_size": 6 },
        "eval_images": 6,
        "universal_images": 8,
        "output_dir": root.join("run")
    })
}

pub fn write(root: &Path, cfg: &Value) -> std::path::PathBuf {
    let path = root.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Every file under `dir` with its bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}
