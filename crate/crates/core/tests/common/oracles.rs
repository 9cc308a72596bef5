//! Reference implementations written independently of the library, used to
//! check its outputs.

#![allow(dead_code)]

use nalgebra::DMatrix;

/// Neumaier-compensated sum in the given order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Ties-Merging by the book: full sort per task for the trim, task-order
/// compensated sums for the elected sign and the disjoint mean.
pub fn ties_reference(vectors: &[Vec<f64>], keep: f64) -> Vec<f64> {
    let d = vectors[0].len();
    let k = {
        let x = keep * d as f64;
        let snapped = if (x - x.round()).abs() <= 1e-9 { x.round() } else { x.ceil() };
        (snapped as usize).clamp(1, d)
    };
    let trimmed: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
            let mut out = vec![0.0; d];
            for &i in &order[..k] {
                out[i] = v[i];
            }
            out
        })
        .collect();
    (0..d)
        .map(|i| {
            let total = compensated_sum(trimmed.iter().map(|t| t[i]));
            if total == 0.0 {
                return 0.0;
            }
            let agreeing: Vec<f64> = trimmed
                .iter()
                .map(|t| t[i])
                .filter(|&v| v != 0.0 && (v > 0.0) == (total > 0.0))
                .collect();
            if agreeing.is_empty() {
                0.0
            } else {
                compensated_sum(agreeing.iter().copied()) / agreeing.len() as f64
            }
        })
        .collect()
}

/// `argmin_W Σ_i ‖X_i Wᵀ − X_i W_iᵀ‖²` on the stacked activations, by SVD.
/// Weights are `[out, in]`.
pub fn regmean_lstsq(xs: &[DMatrix<f64>], ws: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = xs.iter().map(|x| x.nrows()).sum();
    let inputs = xs[0].ncols();
    let out = ws[0].nrows();
    let mut a = DMatrix::zeros(rows, inputs);
    let mut y = DMatrix::zeros(rows, out);
    let mut r = 0;
    for (x, w) in xs.iter().zip(ws) {
        a.view_mut((r, 0), (x.nrows(), inputs)).copy_from(x);
        y.view_mut((r, 0), (x.nrows(), out)).copy_from(&(x * w.transpose()));
        r += x.nrows();
    }
    a.svd(true, true).solve(&y, 1e-15).unwrap().transpose()
}

pub fn mean_f64(columns: &[Vec<f64>]) -> Vec<f64> {
    let n = columns.len() as f64;
    (0..columns[0].len())
        .map(|i| compensated_sum(columns.iter().map(|c| c[i])) / n)
        .collect()
}

pub fn fisher_f64(weights: &[Vec<f64>], fishers: &[Vec<f64>]) -> Vec<f64> {
    (0..weights[0].len())
        .map(|i| {
            let num = compensated_sum(weights.iter().zip(fishers).map(|(w, f)| w[i] * f[i]));
            let den = compensated_sum(fishers.iter().map(|f| f[i]));
            if den == 0.0 {
                compensated_sum(weights.iter().map(|w| w[i])) / weights.len() as f64
            } else {
                num / (den + 1e-12)
            }
        })
        .collect()
}

/// Σ_i ‖a_i − b_i‖², plain left-to-right accumulation.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Expected fraction of agreeing signs between one of `n` i.i.d. Gaussian
/// vectors and the sign of their sum.
pub fn sheppard_density(n: usize) -> f64 {
    0.5 + (1.0 / (n as f64).sqrt()).asin() / std::f64::consts::PI
}
