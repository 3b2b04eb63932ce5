use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tslab_core::CoreError;
use tslab_harness::experiment::{
    run_attack_stage, run_defend_stage, run_evaluate_stage, run_gen_data, run_report_stage, run_train, ExperimentConfig,
};
use tslab_harness::train::VictimKind;

#[derive(Parser, Debug)]
#[command(name = "tslab", version, about = "Token-sparsification attack lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` and clears `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; for gen-data, the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print results as JSON and errors as JSON on stderr.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the image dataset.
    GenData(Common),
    /// Train victims (all needed ones unless --victim is given).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        victim: Option<VictimArg>,
    },
    /// Craft every perturbation of the attack matrix.
    Attack(Common),
    /// Evaluate clean, baseline and attack rows.
    Evaluate(Common),
    /// Calibrate caps and evaluate defended inputs.
    Defend(Common),
    /// Summarize a finished run.
    Report(Common),
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum VictimArg {
    Backbone,
    Adavit,
    Avit,
}

impl From<VictimArg> for VictimKind {
    fn from(v: VictimArg) -> Self {
        match v {
            VictimArg::Backbone => VictimKind::Backbone,
            VictimArg::Adavit => VictimKind::AdaVit,
            VictimArg::Avit => VictimKind::AVit,
        }
    }
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    kind: &'a str,
    message: String,
}

fn load(common: &Common, gen: bool) -> Result<ExperimentConfig, CoreError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.seeds.clear();
    }
    if let Some(out) = &common.out {
        if gen {
            cfg.dataset.clone_from(out);
        } else {
            cfg.output_dir.clone_from(out);
        }
    }
    Ok(cfg)
}

fn print<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        println!("{}", text());
    }
}

fn run(cmd: Command) -> Result<(), (CoreError, bool)> {
    let json = match &cmd {
        Command::Train { common, .. } => common.json,
        Command::GenData(c) | Command::Attack(c) | Command::Evaluate(c) | Command::Defend(c) | Command::Report(c) => c.json,
    };
    let wrap = |e| (e, json);
    match cmd {
        Command::GenData(c) => {
            let cfg = load(&c, true).map_err(wrap)?;
            let m = run_gen_data(&cfg, None).map_err(wrap)?;
            let out = serde_json::json!({ "dataset": cfg.dataset, "records": m.records.len(), "classes": m.classes });
            print(json, &out, || format!("wrote {} records to {}", m.records.len(), cfg.dataset.display()));
        }
        Command::Train { common, victim } => {
            let cfg = load(&common, false).map_err(wrap)?;
            let log = run_train(&cfg, victim.map(Into::into), &mut |k, e| {
                if !json {
                    eprintln!(
                        "{k:?} epoch {}: loss {:.4} acc {:.3} tur {:.3}",
                        e.epoch, e.loss, e.train_accuracy, e.tur
                    );
                }
            })
            .map_err(wrap)?;
            print(json, &log, || {
                log.victims
                    .iter()
                    .map(|v| {
                        format!(
                            "{:?}: test accuracy {:.3}, TUR {:.3} -> {}",
                            v.victim,
                            v.test_accuracy,
                            v.test_tur,
                            v.checkpoint.display()
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        Command::Attack(c) => {
            let cfg = load(&c, false).map_err(wrap)?;
            let paths = run_attack_stage(&cfg, &mut |msg| {
                if !json {
                    eprintln!("attacking: {msg}");
                }
            })
            .map_err(wrap)?;
            print(json, &paths, || format!("wrote {} perturbations", paths.len()));
        }
        Command::Evaluate(c) => {
            let cfg = load(&c, false).map_err(wrap)?;
            let s = run_evaluate_stage(&cfg).map_err(wrap)?;
            print(json, &s, || {
                s.rows
                    .iter()
                    .map(|r| {
                        format!(
                            "{:<24} {:<8} acc {:.3} TUR {:.3} GFLOPs {:.4} preserved {:.3}",
                            r.row, r.mechanism, r.mean.accuracy, r.mean.tur, r.mean.gflops, r.mean.preservation_rate
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        Command::Defend(c) => {
            let cfg = load(&c, false).map_err(wrap)?;
            let d = run_defend_stage(&cfg).map_err(wrap)?;
            print(json, &d, || {
                let mut lines = Vec::new();
                for m in &d.mechanisms {
                    lines.push(format!(
                        "{}: clean acc {:.3} -> {:.3}, caps {:?}",
                        m.mechanism, m.clean_accuracy, m.defended_clean_accuracy, m.defense.caps
                    ));
                    for r in &m.rows {
                        lines.push(format!(
                            "  {:<22} FLOPs {:.0} -> {:.0} (clean {:.0})",
                            r.row, r.undefended_flops, r.defended_flops, m.clean_flops
                        ));
                    }
                }
                lines.join("\n")
            });
        }
        Command::Report(c) => {
            let cfg = load(&c, false).map_err(wrap)?;
            let r = run_report_stage(&cfg).map_err(wrap)?;
            // The report is JSON either way.
            print(true, &r, String::new);
        }
    }
    Ok(())
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, json)) => {
            let code = exit_code(&e);
            if json {
                let kind = if code == 1 { "validation" } else { "runtime" };
                let body = ErrorJson { error: kind, kind: error_kind(&e), message: e.to_string() };
                eprintln!("{}", serde_json::to_string(&body).expect("serializable"));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}

fn error_kind(e: &CoreError) -> &'static str {
    match e {
        CoreError::Autodiff(_) => "autodiff",
        CoreError::Config(_) => "config",
        CoreError::Dimension(_) => "dimension",
        CoreError::Format(_) => "format",
        CoreError::Io(_) => "io",
        CoreError::EmptyDataset(_) => "empty_dataset",
        CoreError::MechanismUnavailable(_) => "mechanism_unavailable",
        CoreError::Diverged(_) => "diverged",
    }
}
