use rayon::prelude::*;

use crate::checkpoint::{encode, validate_aligned, Checkpoint, ComputeDType, Tensor};
use crate::error::{Error, Result};
use crate::numeric::{fill, rounded_sum};

/// Added to the Fisher denominator.
pub const FISHER_EPS: f64 = 1e-12;

/// Element-wise mean of the models, written in the first model's dtypes.
pub fn weight_average(models: &[Checkpoint], compute: ComputeDType) -> Result<Checkpoint> {
    let first = models
        .first()
        .ok_or_else(|| Error::alignment("at least one model is required"))?;
    validate_aligned(first, models)?;
    let n = models.len() as f64;
    build(first, |name| {
        let cols: Vec<Vec<f64>> = models.iter().map(|m| m.get(name).unwrap().values(compute)).collect();
        let mut out = vec![0.0; cols[0].len()];
        fill(&mut out, |i| {
            let column: Vec<f64> = cols.iter().map(|c| c[i]).collect();
            rounded_sum(&column) / n
        });
        Ok(out)
    })
}

/// `Σ F_i W_i / (Σ F_i + ε)` per element, plain mean where every `F_i` is 0.
pub fn fisher_merge(
    models: &[Checkpoint],
    fishers: &[Checkpoint],
    compute: ComputeDType,
) -> Result<Checkpoint> {
    let first = models
        .first()
        .ok_or_else(|| Error::alignment("at least one model is required"))?;
    validate_aligned(first, models)?;
    if fishers.len() != models.len() {
        return Err(Error::alignment(format!(
            "{} Fisher checkpoints supplied for {} models",
            fishers.len(),
            models.len()
        )));
    }
    validate_aligned(first, fishers)
        .map_err(|e| Error::alignment(format!("Fisher weights: {e}")))?;
    let n = models.len() as f64;
    build(first, |name| {
        let w: Vec<Vec<f64>> = models.iter().map(|m| m.get(name).unwrap().values(compute)).collect();
        let f: Vec<Vec<f64>> = fishers.iter().map(|m| m.get(name).unwrap().values(compute)).collect();
        for (idx, fv) in f.iter().enumerate() {
            if let Some(bad) = fv.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::config(format!(
                    "Fisher checkpoint {idx} tensor `{name}` has invalid weight {bad}"
                )));
            }
        }
        let mut out = vec![0.0; w[0].len()];
        fill(&mut out, |i| {
            let weights: Vec<f64> = f.iter().map(|c| c[i]).collect();
            let products: Vec<f64> = f.iter().zip(&w).map(|(f, w)| f[i] * w[i]).collect();
            let total = rounded_sum(&weights);
            if total == 0.0 {
                let column: Vec<f64> = w.iter().map(|c| c[i]).collect();
                rounded_sum(&column) / n
            } else {
                rounded_sum(&products) / (total + FISHER_EPS)
            }
        });
        Ok(out)
    })
}

/// Builds a checkpoint shaped like `template` from per-tensor f64 values.
pub(crate) fn build<F>(template: &Checkpoint, values: F) -> Result<Checkpoint>
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync + Send,
{
    let tensors = template
        .tensors()
        .par_iter()
        .map(|(name, t)| {
            let v = values(name)?;
            let tensor = Tensor::new(t.dtype(), t.shape().to_vec(), encode(t.dtype(), &v))?;
            Ok((name.clone(), tensor))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Checkpoint::new();
    for (name, t) in tensors {
        out.insert(name, t);
    }
    Ok(out)
}
