//! RegMean closed-form merge of linear layers.
//!
//! Weights are stored `[out, in]` and act as `y = W x`; the Gram matrix of a
//! layer is `[in, in]` and shares the layer's tensor name. The merged layer
//! minimises `Σ_i ‖X_i Wᵀ − X_i W_iᵀ‖²`, giving
//! `W = (Σ_i W_i G_i)(Σ_i G_i)⁻¹`.

use log::warn;
use nalgebra::DMatrix;

use super::weighted::build;
use crate::checkpoint::{validate_aligned, Checkpoint, ComputeDType};
use crate::error::{Error, Result};
use crate::numeric::rounded_sum;

pub fn regmean_merge(
    models: &[Checkpoint],
    grams: &[Checkpoint],
    a: f64,
    compute: ComputeDType,
) -> Result<Checkpoint> {
    let first = models
        .first()
        .ok_or_else(|| Error::alignment("at least one model is required"))?;
    validate_aligned(first, models)?;
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::config(format!(
            "RegMean off-diagonal multiplier must be in (0, 1], got {a}"
        )));
    }
    if grams.len() != models.len() {
        return Err(Error::alignment(format!(
            "{} Gram checkpoints supplied for {} models",
            grams.len(),
            models.len()
        )));
    }
    validate_aligned(&grams[0], grams)
        .map_err(|e| Error::alignment(format!("Gram matrices: {e}")))?;
    for (name, g) in grams[0].iter() {
        let w = first.get(name).ok_or_else(|| {
            Error::alignment(format!("Gram matrix `{name}` has no matching layer"))
        })?;
        let &[_, inputs] = w.shape() else {
            return Err(Error::alignment(format!(
                "layer `{name}` has shape {:?}; Gram matrices need 2-D [out, in] weights",
                w.shape()
            )));
        };
        if g.shape() != [inputs, inputs] {
            return Err(Error::alignment(format!(
                "Gram matrix `{name}` has shape {:?}, layer expects [{inputs}, {inputs}]",
                g.shape()
            )));
        }
    }

    let n = models.len() as f64;
    build(first, |name| {
        let ws: Vec<Vec<f64>> = models
            .iter()
            .map(|m| m.get(name).expect("aligned").values(compute))
            .collect();
        if grams[0].get(name).is_none() {
            let len = ws[0].len();
            return Ok((0..len)
                .map(|i| {
                    let column: Vec<f64> = ws.iter().map(|w| w[i]).collect();
                    rounded_sum(&column) / n
                })
                .collect());
        }
        let shape = first.get(name).expect("aligned").shape();
        let (out, inputs) = (shape[0], shape[1]);
        let gs = grams
            .iter()
            .enumerate()
            .map(|(idx, g)| {
                let values = g.get(name).expect("aligned").values(compute);
                let m = DMatrix::from_row_slice(inputs, inputs, &values);
                check_symmetric(&m, name, idx)?;
                Ok(scale_offdiag(m, a))
            })
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<DMatrix<f64>> =
            ws.iter().map(|w| DMatrix::from_row_slice(out, inputs, w)).collect();

        // Element-wise order-independent sums over models.
        let gram_sum = DMatrix::from_fn(inputs, inputs, |r, c| {
            let column: Vec<f64> = gs.iter().map(|g| g[(r, c)]).collect();
            rounded_sum(&column)
        });
        let products: Vec<DMatrix<f64>> = gs.iter().zip(&weights).map(|(g, w)| g * w.transpose()).collect();
        let rhs = DMatrix::from_fn(inputs, out, |r, c| {
            let column: Vec<f64> = products.iter().map(|p| p[(r, c)]).collect();
            rounded_sum(&column)
        });

        let merged_t = match solve_spd(gram_sum, rhs) {
            Some(x) => x,
            None => {
                warn!("Gram sum for `{name}` is singular; averaging the layer");
                let avg = DMatrix::from_fn(out, inputs, |r, c| {
                    let column: Vec<f64> = weights.iter().map(|w| w[(r, c)]).collect();
                    rounded_sum(&column) / n
                });
                avg.transpose()
            }
        };
        let merged = merged_t.transpose();
        Ok((0..out)
            .flat_map(|r| (0..inputs).map(move |c| (r, c)))
            .map(|(r, c)| merged[(r, c)])
            .collect())
    })
}

fn check_symmetric(m: &DMatrix<f64>, name: &str, idx: usize) -> Result<()> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let asym = (m - m.transpose()).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(asym <= 1e-6 * scale) {
        return Err(Error::alignment(format!(
            "Gram matrix `{name}` of model {idx} is not symmetric"
        )));
    }
    Ok(())
}

fn scale_offdiag(mut m: DMatrix<f64>, a: f64) -> DMatrix<f64> {
    if a != 1.0 {
        let dim = m.nrows();
        for r in 0..dim {
            for c in 0..dim {
                if r != c {
                    m[(r, c)] *= a;
                }
            }
        }
    }
    m
}

/// Solves `S X = B` for symmetric `S`: Cholesky, then Cholesky on
/// `S + δI` with `δ = 1e-8 · trace(S) / dim`, then LU.
fn solve_spd(s: DMatrix<f64>, b: DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = s.clone().cholesky() {
        return Some(chol.solve(&b));
    }
    let dim = s.nrows();
    let delta = 1e-8 * s.trace() / dim as f64;
    let mut ridge = s.clone();
    if delta > 0.0 {
        for i in 0..dim {
            ridge[(i, i)] += delta;
        }
        if let Some(chol) = ridge.clone().cholesky() {
            warn!("Gram sum not positive definite; added ridge {delta:e}");
            return Some(chol.solve(&b));
        }
    }
    let x = ridge.lu().solve(&b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{DType, Tensor};
    use rand::{Rng, SeedableRng};

    fn layer(out: usize, inputs: usize, values: &[f64]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("fc", Tensor::from_f64(DType::F64, vec![out, inputs], values).unwrap());
        c.insert("bias", Tensor::from_f64(DType::F64, vec![out], &vec![values[0]; out]).unwrap());
        c
    }

    fn gram(dim: usize, values: &[f64]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("fc", Tensor::from_f64(DType::F64, vec![dim, dim], values).unwrap());
        c
    }

    fn identity(dim: usize) -> Vec<f64> {
        (0..dim * dim).map(|i| if i / dim == i % dim { 1.0 } else { 0.0 }).collect()
    }

    fn get(c: &Checkpoint, name: &str) -> Vec<f64> {
        c.get(name).unwrap().to_f64_vec()
    }

    #[test]
    fn identity_grams_average() {
        let m1 = layer(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m2 = layer(2, 2, &[3.0, 0.0, -1.0, 2.0]);
        let g = gram(2, &identity(2));
        let out = regmean_merge(&[m1, m2], &[g.clone(), g], 1.0, ComputeDType::F64).unwrap();
        for (got, want) in get(&out, "fc").iter().zip([2.0, 1.0, 1.0, 3.0]) {
            assert!((got - want).abs() <= 4.0 * f64::EPSILON * want, "{got} vs {want}");
        }
        assert_eq!(get(&out, "bias"), vec![2.0, 2.0]);
    }

    /// Least squares on the stacked activations, solved by SVD.
    fn lstsq_oracle(xs: &[DMatrix<f64>], ws: &[DMatrix<f64>]) -> DMatrix<f64> {
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
        a.svd(true, true).solve(&y, 1e-14).unwrap().transpose()
    }

    #[test]
    fn matches_least_squares() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (out, inputs) = (3, 3);
            let xs: Vec<DMatrix<f64>> = (0..2)
                .map(|_| DMatrix::from_fn(6, inputs, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let ws: Vec<DMatrix<f64>> = (0..2)
                .map(|_| DMatrix::from_fn(out, inputs, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let models: Vec<Checkpoint> = ws
                .iter()
                .map(|w| layer(out, inputs, w.transpose().as_slice()))
                .collect();
            let grams: Vec<Checkpoint> = xs
                .iter()
                .map(|x| gram(inputs, (x.transpose() * x).as_slice()))
                .collect();
            let merged = regmean_merge(&models, &grams, 1.0, ComputeDType::F64).unwrap();
            let expected = lstsq_oracle(&xs, &ws);
            let got = DMatrix::from_row_slice(out, inputs, &get(&merged, "fc"));
            let rel = (&got - &expected).norm() / expected.norm();
            assert!(rel < 1e-8, "{rel}");
        }
    }

    #[test]
    fn offdiag_multiplier_irrelevant_for_diagonal_grams() {
        let m1 = layer(1, 2, &[1.0, 2.0]);
        let m2 = layer(1, 2, &[3.0, -2.0]);
        let g1 = gram(2, &[2.0, 0.0, 0.0, 1.0]);
        let g2 = gram(2, &[1.0, 0.0, 0.0, 3.0]);
        let models = [m1, m2];
        let grams = [g1, g2];
        let full = regmean_merge(&models, &grams, 1.0, ComputeDType::F64).unwrap();
        let scaled = regmean_merge(&models, &grams, 0.9, ComputeDType::F64).unwrap();
        assert_eq!(full, scaled);
        // Per-input weighted mean: (2·1 + 1·3)/3, (1·2 + 3·(−2))/4.
        let fc = get(&full, "fc");
        assert!((fc[0] - 5.0 / 3.0).abs() < 1e-12 && (fc[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn offdiag_multiplier_changes_full_grams() {
        let m1 = layer(1, 2, &[1.0, 2.0]);
        let m2 = layer(1, 2, &[3.0, -2.0]);
        let grams = [gram(2, &[2.0, 1.0, 1.0, 1.0]), gram(2, &[1.0, -0.5, -0.5, 3.0])];
        let models = [m1, m2];
        let full = regmean_merge(&models, &grams, 1.0, ComputeDType::F64).unwrap();
        let scaled = regmean_merge(&models, &grams, 0.5, ComputeDType::F64).unwrap();
        assert_ne!(get(&full, "fc"), get(&scaled, "fc"));
    }

    #[test]
    fn singular_gram_uses_ridge() {
        let m1 = layer(1, 2, &[1.0, 2.0]);
        let m2 = layer(1, 2, &[3.0, 4.0]);
        let g = gram(2, &[1.0, 1.0, 1.0, 1.0]);
        let out = regmean_merge(&[m1, m2], &[g.clone(), g], 1.0, ComputeDType::F64).unwrap();
        assert!(get(&out, "fc").iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let m = layer(2, 2, &[1.0; 4]);
        let bad = gram(3, &identity(3));
        let err = regmean_merge(&[m.clone()], &[bad], 1.0, ComputeDType::F64).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let asym = gram(2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(regmean_merge(&[m.clone()], &[asym], 1.0, ComputeDType::F64).is_err());
        let mut stray = Checkpoint::new();
        stray.insert("other", Tensor::from_f64(DType::F64, vec![2, 2], &identity(2)).unwrap());
        assert!(regmean_merge(&[m.clone()], &[stray], 1.0, ComputeDType::F64).is_err());
        let g = gram(2, &identity(2));
        assert_eq!(
            regmean_merge(&[m], &[g], 0.0, ComputeDType::F64).unwrap_err().exit_code(),
            2
        );
    }
}
