//! Crafted perturbations and their binary artifact.
//!
//! Layout (little-endian): magic `TSLBPERT`, u32 version, u8 method, u8
//! variant, u8 mechanism bitmask (ats 1, adavit 2, avit 4), f64 epsilon, f64
//! lambda, u64 iterations, u64 seed, u32 class (`u32::MAX` = none), u32 patch
//! size, x, y, u32 rank plus u32 dims of each delta, u32 delta count, then per
//! delta a u64 image id (`u64::MAX` = shared) and f32 values, u32 curve
//! length plus f64 values, and finally the u32-prefixed resolved config JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tslab_autodiff::Tensor;

use super::config::Variant;
use crate::binio::*;
use crate::data::Sample;
use crate::error::{CoreError, Result};
use crate::sparsifiers::Mechanism;

const MAGIC: &[u8; 8] = b"TSLBPERT";
const VERSION: u32 = 1;
pub const SHARED: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Attack,
    Random,
    StandardPgd,
    Sponge,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Attack => "attack",
            Method::Random => "random",
            Method::StandardPgd => "standard_pgd",
            Method::Sponge => "sponge",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub method: Method,
    pub variant: Variant,
    pub epsilon: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
    pub mechanisms: Vec<Mechanism>,
    /// Image id each delta belongs to, or [`SHARED`].
    pub image_ids: Vec<u64>,
    /// Image-shaped deltas, or `[C, s, s]` patch pixels.
    pub deltas: Vec<Tensor<f32>>,
    /// Objective value per iteration (mean over images for per-image runs).
    pub curve: Vec<f64>,
    pub config_json: String,
}

impl Perturbation {
    /// A zero (no-op) perturbation shared by every image.
    pub fn zero(shape: &[usize]) -> Self {
        Perturbation {
            method: Method::Attack,
            variant: Variant::Universal,
            epsilon: 0.0,
            lambda: 0.0,
            iterations: 0,
            seed: 0,
            mechanisms: Vec::new(),
            image_ids: vec![SHARED],
            deltas: vec![Tensor::zeros(shape)],
            curve: Vec::new(),
            config_json: String::new(),
        }
    }

    pub fn delta_for(&self, id: u64) -> Result<&Tensor<f32>> {
        if self.image_ids.len() == 1 && self.image_ids[0] == SHARED {
            return Ok(&self.deltas[0]);
        }
        self.image_ids
            .iter()
            .position(|&i| i == id)
            .map(|p| &self.deltas[p])
            .ok_or_else(|| CoreError::Config(format!("perturbation has no delta for image {id}")))
    }

    /// The perturbed image, always inside `[0, 1]`.
    pub fn apply(&self, sample: &Sample) -> Result<Tensor<f32>> {
        let delta = self.delta_for(sample.id)?;
        apply_delta(&self.variant, &sample.image, delta)
    }

    pub fn max_abs(&self) -> f64 {
        self.deltas.iter().map(|d| d.max_abs() as f64).fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u8(
            w,
            match self.method {
                Method::Attack => 0,
                Method::Random => 1,
                Method::StandardPgd => 2,
                Method::Sponge => 3,
            },
        )?;
        let (vcode, class, patch) = match self.variant {
            Variant::Single => (0, u32::MAX, (0, 0, 0)),
            Variant::ClassUniversal { class } => (1, len32(class)?, (0, 0, 0)),
            Variant::Universal => (2, u32::MAX, (0, 0, 0)),
            Variant::Patch { size, x, y } => (3, u32::MAX, (len32(size)?, len32(x)?, len32(y)?)),
        };
        put_u8(w, vcode)?;
        put_u8(w, self.mechanisms.iter().fold(0, |m, k| m | k.bit()))?;
        put_f64(w, self.epsilon)?;
        put_f64(w, self.lambda)?;
        put_u64(w, self.iterations as u64)?;
        put_u64(w, self.seed)?;
        put_u32(w, class)?;
        put_u32(w, patch.0)?;
        put_u32(w, patch.1)?;
        put_u32(w, patch.2)?;
        let shape = self.deltas.first().map(|d| d.shape().to_vec()).unwrap_or_default();
        put_u32(w, len32(shape.len())?)?;
        for &d in &shape {
            put_u32(w, len32(d)?)?;
        }
        put_u32(w, len32(self.deltas.len())?)?;
        for (id, d) in self.image_ids.iter().zip(&self.deltas) {
            if d.shape() != shape.as_slice() {
                return Err(CoreError::Format("deltas differ in shape".into()));
            }
            put_u64(w, *id)?;
            put_f32s(w, d.data())?;
        }
        put_u32(w, len32(self.curve.len())?)?;
        for &c in &self.curve {
            put_f64(w, c)?;
        }
        put_bytes(w, self.config_json.as_bytes())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(CoreError::Format(format!("unsupported perturbation version {version}")));
        }
        let method = match get_u8(r)? {
            0 => Method::Attack,
            1 => Method::Random,
            2 => Method::StandardPgd,
            3 => Method::Sponge,
            m => return Err(CoreError::Format(format!("unknown method code {m}"))),
        };
        let vcode = get_u8(r)?;
        let bits = get_u8(r)?;
        let mechanisms = Mechanism::SPARSE.into_iter().filter(|m| bits & m.bit() != 0).collect();
        let epsilon = get_f64(r)?;
        let lambda = get_f64(r)?;
        let iterations = get_u64(r)? as usize;
        let seed = get_u64(r)?;
        let class = get_u32(r)?;
        let (size, x, y) = (get_u32(r)? as usize, get_u32(r)? as usize, get_u32(r)? as usize);
        let variant = match vcode {
            0 => Variant::Single,
            1 => Variant::ClassUniversal { class: class as usize },
            2 => Variant::Universal,
            3 => Variant::Patch { size, x, y },
            v => return Err(CoreError::Format(format!("unknown variant code {v}"))),
        };
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(CoreError::Format(format!("delta rank {rank} is implausible")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let count = get_u32(r)? as usize;
        let mut image_ids = Vec::with_capacity(count.min(1 << 16));
        let mut deltas = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            image_ids.push(get_u64(r)?);
            deltas.push(Tensor::new(shape.clone(), get_f32s(r, numel)?)?);
        }
        let clen = get_u32(r)? as usize;
        if clen > 1 << 26 {
            return Err(CoreError::Format(format!("curve of {clen} points is implausible")));
        }
        let curve = (0..clen).map(|_| get_f64(r)).collect::<Result<_>>()?;
        let config_json = String::from_utf8(get_bytes(r, 1 << 24)?)
            .map_err(|e| CoreError::Format(format!("config is not UTF-8: {e}")))?;
        Ok(Perturbation {
            method,
            variant,
            epsilon,
            lambda,
            iterations,
            seed,
            mechanisms,
            image_ids,
            deltas,
            curve,
            config_json,
        })
    }
}

/// `clip(x + delta)` for bounded variants, pixel replacement for patches.
pub fn apply_delta(variant: &Variant, x: &Tensor<f32>, delta: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut out = x.clone();
    match *variant {
        Variant::Patch { size, x: px, y: py } => {
            let s = x.shape();
            if s.len() != 3 || delta.shape() != [s[0], size, size] || px + size > s[2] || py + size > s[1] {
                return Err(CoreError::Dimension(format!("patch {:?} does not fit image {:?}", delta.shape(), s)));
            }
            let (h, w) = (s[1], s[2]);
            let data = out.data_mut();
            for c in 0..s[0] {
                for yy in 0..size {
                    for xx in 0..size {
                        let v = delta.data()[(c * size + yy) * size + xx];
                        data[(c * h + py + yy) * w + px + xx] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        _ => {
            if delta.shape() != x.shape() {
                return Err(CoreError::Dimension(format!("delta {:?} vs image {:?}", delta.shape(), x.shape())));
            }
            for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
                *o = (*o + d).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Perturbation {
        Perturbation {
            method: Method::Attack,
            variant: Variant::Patch { size: 2, x: 1, y: 0 },
            epsilon: 0.0627,
            lambda: 8e-4,
            iterations: 7,
            seed: 42,
            mechanisms: vec![Mechanism::Ats, Mechanism::AVit],
            image_ids: vec![SHARED],
            deltas: vec![Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()],
            curve: vec![1.0, 0.5],
            config_json: "{\"a\":1}".into(),
        }
    }

    #[test]
    fn roundtrip() {
        let p = sample();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(Perturbation::read(&mut buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        assert!(Perturbation::read(&mut &buf[..20]).is_err());
        buf[0] = b'X';
        assert!(Perturbation::read(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn patch_replaces_pixels() {
        let x = Tensor::new(vec![1, 3, 3], vec![0.5; 9]).unwrap();
        let out = apply_delta(&sample().variant, &x, &sample().deltas[0]).unwrap();
        assert_eq!(out.data(), &[0.5, 0.1, 0.2, 0.5, 0.3, 0.4, 0.5, 0.5, 0.5]);
    }
}
