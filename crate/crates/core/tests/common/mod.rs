#![allow(dead_code)]

pub mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emr_merge::checkpoint::write_checkpoint;
use emr_merge::{Checkpoint, DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use sha2::{Digest, Sha256};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug)]
pub enum Draw {
    Gaussian,
    /// Student-t with 3 degrees of freedom.
    HeavyTailed,
}

impl Draw {
    pub fn alternate(i: usize) -> Draw {
        if i % 2 == 0 {
            Draw::Gaussian
        } else {
            Draw::HeavyTailed
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Draw::Gaussian => "gaussian",
            Draw::HeavyTailed => "student-t(3)",
        }
    }

    pub fn sample(self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match self {
            Draw::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            Draw::HeavyTailed => {
                let t = StudentT::new(3.0).unwrap();
                (0..n).map(|_| t.sample(rng)).collect()
            }
        }
    }
}

/// Tensor names and shapes used by the synthetic models.
pub fn layout(d: usize) -> Vec<(String, Vec<usize>)> {
    // A 2-D weight, a bias, and a remainder tensor, totalling `d` elements.
    let rows = (d / 4).max(1) / 100;
    let weight = rows * 100;
    let bias = (d - weight).min(100);
    let rest = d - weight - bias;
    let mut out = Vec::new();
    if weight > 0 {
        out.push(("layer.weight".to_string(), vec![rows, 100]));
    }
    if bias > 0 {
        out.push(("layer.bias".to_string(), vec![bias]));
    }
    if rest > 0 {
        out.push(("head.weight".to_string(), vec![rest]));
    }
    out
}

pub fn f32_checkpoint(layout: &[(String, Vec<usize>)], values: &[f64]) -> Checkpoint {
    let mut c = Checkpoint::new();
    let mut offset = 0;
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let v = &values[offset..offset + n];
        offset += n;
        c.insert(name.clone(), Tensor::from_f64(DType::F32, shape.clone(), v).unwrap());
    }
    c
}

/// A base checkpoint and `n` finetuned F32 models whose task vectors are
/// drawn from `draw` with standard deviation `scale`.
pub fn family(seed: u64, n: usize, d: usize, draw: Draw, scale: f64) -> (Checkpoint, Vec<Checkpoint>) {
    let mut r = rng(seed);
    let lay = layout(d);
    let base: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let models = (0..n)
        .map(|_| {
            let tau = draw.sample(&mut r, d);
            let w: Vec<f64> = base.iter().zip(&tau).map(|(b, t)| b + scale * t).collect();
            f32_checkpoint(&lay, &w)
        })
        .collect();
    (f32_checkpoint(&lay, &base), models)
}

pub fn write(dir: &Path, name: &str, ckpt: &Checkpoint) -> PathBuf {
    let path = dir.join(name);
    write_checkpoint(ckpt, &path).unwrap();
    path
}

/// Writes models as `m0.safetensors`, `m1.safetensors`, ...
pub fn write_models(dir: &Path, models: &[Checkpoint]) -> Vec<PathBuf> {
    models
        .iter()
        .enumerate()
        .map(|(i, m)| write(dir, &format!("m{i}.safetensors"), m))
        .collect()
}

pub fn emr_command() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_emr"));
    cmd.env_remove("EMR_THREADS").env("RUST_LOG", "error");
    cmd
}

pub fn emr<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    emr_command().args(args).output().expect("run emr")
}

pub fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn ulps(a: f32, b: f32) -> u64 {
    fn key(x: f32) -> i64 {
        let bits = x.to_bits() as i32 as i64;
        if bits < 0 {
            i32::MIN as i64 - bits
        } else {
            bits
        }
    }
    (key(a) - key(b)).unsigned_abs()
}
