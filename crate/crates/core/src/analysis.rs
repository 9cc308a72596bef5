//! Weight-space diagnostics for merged results.
//!
//! Comparisons are made between task vectors (weights minus the base) by
//! default, or between raw weights when the report functions are given the
//! flattened base. Vectors are flattened in canonical tensor order.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emr::EmrBundle;
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, sum_terms};
use crate::store::{separate_f32_bytes, BundleSizes};
use crate::task_vector::{TaskVector, TaskVectorSet};

/// Version of the serialized [`MergeReport`] layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::alignment(format!(
            "vectors have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Fraction of positions where `a` and `b` have strictly opposite signs.
/// Zeros conflict with nothing. Empty inputs give 0.
pub fn sign_conflict_ratio(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let conflicts = a
        .par_iter()
        .zip(b)
        .filter(|(&x, &y)| (x > 0.0 && y < 0.0) || (x < 0.0 && y > 0.0))
        .count();
    Ok(conflicts as f64 / a.len() as f64)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(squared_distance(a, b)?.sqrt())
}

fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(sum_terms(a.len(), |i| {
        let d = a[i] - b[i];
        d * d
    }))
}

/// `⟨a, b⟩ / (‖a‖ ‖b‖)`; 0 (with a warning) when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    let dot = sum_terms(a.len(), |i| a[i] * b[i]);
    let na = sum_terms(a.len(), |i| a[i] * a[i]).sqrt();
    let nb = sum_terms(b.len(), |i| b[i] * b[i]).sqrt();
    if na == 0.0 || nb == 0.0 {
        warn!("cosine similarity with a zero vector is undefined; reporting 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean squared distances from each task vector to the unified vector,
/// its masked form, and its masked-and-rescaled form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub dis: f64,
    pub dis_mask: f64,
    pub dis_mask_rescale: f64,
}

pub fn distance_suite(set: &TaskVectorSet, bundle: &EmrBundle) -> Result<Distances> {
    check_tasks(set, bundle)?;
    let unified = bundle.unified.as_task_vector().flatten_concat();
    let per_task = set
        .vectors()
        .par_iter()
        .map(|tau| {
            let m = bundle.modulator(tau.label())?;
            let t = tau.flatten_concat();
            let masked = masked(&unified, m.mask.values().flat_map(|p| p.to_bools()));
            let rescaled = bundle.reconstruct_task(tau.label())?.flatten_concat();
            Ok([
                squared_distance(&t, &unified)?,
                squared_distance(&t, &masked)?,
                squared_distance(&t, &rescaled)?,
            ])
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    let n = per_task.len() as f64;
    let mean = |k: usize| pairwise_sum(&per_task.iter().map(|r| r[k]).collect::<Vec<_>>()) / n;
    Ok(Distances {
        dis: mean(0),
        dis_mask: mean(1),
        dis_mask_rescale: mean(2),
    })
}

fn masked(values: &[f64], bits: impl Iterator<Item = bool>) -> Vec<f64> {
    values
        .iter()
        .zip(bits)
        .map(|(&v, keep)| if keep { v } else { 0.0 })
        .collect()
}

fn check_tasks(set: &TaskVectorSet, bundle: &EmrBundle) -> Result<()> {
    let mut ours = set.labels();
    let mut theirs = bundle.task_labels();
    ours.sort();
    theirs.sort();
    if ours != theirs {
        return Err(Error::config(format!(
            "task vectors {ours:?} do not match bundle tasks {theirs:?}"
        )));
    }
    if set.schema().iter().map(|s| (&s.name, &s.shape)).ne(bundle.schema.iter().map(|s| (&s.name, &s.shape))) {
        return Err(Error::alignment("task vectors and bundle have different tensors"));
    }
    Ok(())
}

/// Fraction of set bits in the named task's mask.
pub fn mask_density(bundle: &EmrBundle, task: &str) -> Result<f64> {
    Ok(bundle.modulator(task)?.mask_density())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub sign_conflict_ratio: f64,
    pub l2_distance: f64,
    pub cosine_similarity: f64,
    pub mask_density: Option<f64>,
    pub rescaler: Option<f64>,
}

/// Arithmetic means of the per-task metrics; `None` when there are no tasks
/// (or, for the EMR-only fields, no task carries the value).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub sign_conflict_ratio: Option<f64>,
    pub l2_distance: Option<f64>,
    pub cosine_similarity: Option<f64>,
    pub mask_density: Option<f64>,
    pub rescaler: Option<f64>,
}

impl AggregateMetrics {
    pub fn from_tasks(tasks: &[TaskMetrics]) -> Self {
        fn mean(values: Vec<f64>) -> Option<f64> {
            (!values.is_empty()).then(|| pairwise_sum(&values) / values.len() as f64)
        }
        AggregateMetrics {
            sign_conflict_ratio: mean(tasks.iter().map(|t| t.sign_conflict_ratio).collect()),
            l2_distance: mean(tasks.iter().map(|t| t.l2_distance).collect()),
            cosine_similarity: mean(tasks.iter().map(|t| t.cosine_similarity).collect()),
            mask_density: mean(tasks.iter().filter_map(|t| t.mask_density).collect()),
            rescaler: mean(tasks.iter().filter_map(|t| t.rescaler).collect()),
        }
    }
}

/// Byte accounting of a bundle against storing every task vector in F32.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub header_bytes: u64,
    pub unified_bytes: u64,
    pub mask_bytes: u64,
    pub rescaler_bytes: u64,
    pub total_bytes: u64,
    pub separate_f32_bytes: u64,
    /// `separate_f32_bytes / (mask_bytes + rescaler_bytes)`.
    pub modulator_compression: f64,
}

impl StorageReport {
    pub fn new(sizes: &BundleSizes, tasks: usize, d: usize) -> Self {
        let separate = separate_f32_bytes(tasks, d);
        let modulator = sizes.modulator_bytes();
        StorageReport {
            header_bytes: sizes.header_bytes,
            unified_bytes: sizes.unified_bytes,
            mask_bytes: sizes.mask_bytes,
            rescaler_bytes: sizes.rescaler_bytes,
            total_bytes: sizes.total_bytes,
            separate_f32_bytes: separate,
            modulator_compression: if modulator == 0 {
                0.0
            } else {
                separate as f64 / modulator as f64
            },
        }
    }
}

/// What the per-task metrics compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Merged and per-task task vectors.
    #[default]
    TaskVectors,
    /// Merged and finetuned weights, i.e. both sides offset by the base.
    Weights,
}

impl FromStr for Comparison {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task-vectors" | "task_vectors" => Ok(Comparison::TaskVectors),
            "weights" => Ok(Comparison::Weights),
            other => Err(Error::config(format!(
                "unknown comparison `{other}` (expected task-vectors or weights)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub schema_version: u32,
    pub method: String,
    #[serde(default)]
    pub comparison: Comparison,
    /// Elements per task vector.
    pub d: usize,
    pub tasks: Vec<TaskMetrics>,
    pub aggregate: AggregateMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Distances>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageReport>,
}

impl MergeReport {
    pub fn new(method: impl Into<String>, d: usize, tasks: Vec<TaskMetrics>) -> Self {
        let aggregate = AggregateMetrics::from_tasks(&tasks);
        MergeReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.into(),
            comparison: Comparison::TaskVectors,
            d,
            tasks,
            aggregate,
            distances: None,
            storage: None,
        }
    }
}

fn compare(task: &TaskVector, merged: &[f64], base: Option<&[f64]>) -> Result<TaskMetrics> {
    let mut t = task.flatten_concat();
    let offset;
    let merged = match base {
        Some(b) => {
            check_len(&t, b)?;
            t.iter_mut().zip(b).for_each(|(x, b)| *x += b);
            offset = merged.iter().zip(b).map(|(x, b)| x + b).collect::<Vec<_>>();
            &offset[..]
        }
        None => merged,
    };
    Ok(TaskMetrics {
        task: task.label().to_string(),
        sign_conflict_ratio: sign_conflict_ratio(merged, &t)?,
        l2_distance: l2_distance(merged, &t)?,
        cosine_similarity: cosine_similarity(merged, &t)?,
        mask_density: None,
        rescaler: None,
    })
}

fn comparison_for(base: Option<&[f64]>) -> Comparison {
    if base.is_some() {
        Comparison::Weights
    } else {
        Comparison::TaskVectors
    }
}

/// Compares one merged task vector against every task vector of the set.
/// With `base` (flattened base weights) the metrics are taken on weights.
pub fn report_for_merged(
    set: &TaskVectorSet,
    merged: &TaskVector,
    method: &str,
    base: Option<&[f64]>,
) -> Result<MergeReport> {
    let flat = merged.flatten_concat();
    if flat.len() != set.d() {
        return Err(Error::alignment(format!(
            "merged vector has {} elements, task vectors have {}",
            flat.len(),
            set.d()
        )));
    }
    let tasks = set
        .vectors()
        .par_iter()
        .map(|t| compare(t, &flat, base))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MergeReport::new(method, set.d(), tasks);
    report.comparison = comparison_for(base);
    Ok(report)
}

/// Compares each task's reconstruction against its task vector and adds
/// mask, rescaler, distance and optional storage figures. The distance
/// figures are always on task vectors.
pub fn report_for_bundle(
    set: &TaskVectorSet,
    bundle: &EmrBundle,
    sizes: Option<&BundleSizes>,
    base: Option<&[f64]>,
) -> Result<MergeReport> {
    check_tasks(set, bundle)?;
    let tasks = set
        .vectors()
        .par_iter()
        .map(|t| {
            let m = bundle.modulator(t.label())?;
            let recon = bundle.reconstruct_task(t.label())?.flatten_concat();
            let mut metrics = compare(t, &recon, base)?;
            metrics.mask_density = Some(m.mask_density());
            metrics.rescaler = Some(m.rescaler);
            Ok(metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MergeReport::new("emr", set.d(), tasks);
    report.comparison = comparison_for(base);
    report.distances = Some(distance_suite(set, bundle)?);
    report.storage = sizes.map(|s| StorageReport::new(s, bundle.modulators.len(), bundle.d()));
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Serializes the report. JSON is pretty-printed with a trailing newline;
/// CSV has one row per task followed by an `aggregate` row.
pub fn render_report(report: &MergeReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| Error::format("report", e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => render_csv(report),
    }
}

fn render_csv(report: &MergeReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("report", e.to_string());
    w.write_record([
        "task",
        "sign_conflict_ratio",
        "l2_distance",
        "cosine_similarity",
        "mask_density",
        "rescaler",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in &report.tasks {
        w.write_record([
            t.task.clone(),
            t.sign_conflict_ratio.to_string(),
            t.l2_distance.to_string(),
            t.cosine_similarity.to_string(),
            opt(t.mask_density),
            opt(t.rescaler),
        ])
        .map_err(err)?;
    }
    let a = &report.aggregate;
    w.write_record([
        "aggregate".to_string(),
        opt(a.sign_conflict_ratio),
        opt(a.l2_distance),
        opt(a.cosine_similarity),
        opt(a.mask_density),
        opt(a.rescaler),
    ])
    .map_err(err)?;
    let bytes = w.into_inner().map_err(|e| Error::format("report", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn emit_report(report: &MergeReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
