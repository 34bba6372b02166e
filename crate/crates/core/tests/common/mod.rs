//! Independent reference implementations and fixtures shared by the
//! integration tests. The oracles are deliberately naive scalar loops that
//! share no code with the library.

#![allow(dead_code)]

use facevox::data::{generate_synthetic, SyntheticSpec};
use facevox::training::TrainItem;
use rand::Rng;

pub type P3 = [f64; 3];

/// Dense max-composed Gaussian field, one full triple loop per landmark,
/// laid out x fastest.
pub fn oracle_encode(points: &[P3], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let [w, h, d] = dims;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let mut out = vec![0.0f64; w * h * d];
    for p in points {
        let mut field = vec![0.0f64; w * h * d];
        for k in 0..d {
            for j in 0..h {
                for i in 0..w {
                    let dx = i as f64 - p[0];
                    let dy = j as f64 - p[1];
                    let dz = k as f64 - p[2];
                    field[(k * h + j) * w + i] = norm * (-(dx * dx + dy * dy + dz * dz) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        for (o, f) in out.iter_mut().zip(&field) {
            if *f > *o {
                *o = *f;
            }
        }
    }
    out
}

pub fn oracle_sse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

pub fn oracle_gte(pred: &[P3], gt: &[P3], le: usize, re: usize) -> f64 {
    let mut total = 0.0;
    for n in 0..gt.len() {
        let mut s = 0.0;
        for a in 0..3 {
            s += (pred[n][a] - gt[n][a]) * (pred[n][a] - gt[n][a]);
        }
        total += s.sqrt();
    }
    let mut io = 0.0;
    for a in 0..3 {
        io += (gt[le][a] - gt[re][a]) * (gt[le][a] - gt[re][a]);
    }
    100.0 * (total / gt.len() as f64) / io.sqrt()
}

pub fn oracle_nme(pred: &[P3], gt: &[P3], bw: f64, bh: f64) -> f64 {
    let mut total = 0.0;
    for n in 0..gt.len() {
        let dx = pred[n][0] - gt[n][0];
        let dy = pred[n][1] - gt[n][1];
        total += (dx * dx + dy * dy).sqrt();
    }
    100.0 * (total / gt.len() as f64) / (bw * bh).sqrt()
}

pub fn oracle_ced(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|t| {
            let mut c = 0usize;
            for e in errors {
                if e <= t {
                    c += 1;
                }
            }
            c as f64 / errors.len() as f64
        })
        .collect()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<P3> {
    (0..n)
        .map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)])
        .collect()
}

/// Synthetic toy-preset training items in the 64x64 input frame.
pub fn toy_items(n: usize, seed: u64) -> Vec<TrainItem> {
    generate_synthetic(&SyntheticSpec::toy(n, seed))
        .unwrap()
        .iter()
        .map(|s| s.to_train_item((64, 64)).unwrap())
        .collect()
}
