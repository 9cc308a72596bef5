use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;

use super::config::JobConfig;
use super::{in_pool, thread_count, AnalyzeArgs, ApplyArgs, InspectArgs, MergeArgs};
use crate::analysis::{
    emit_report, render_report, report_for_bundle, report_for_merged, Comparison, MergeReport,
    ReportFormat, StorageReport,
};
use crate::baselines::{
    dare_preprocess_set, fisher_merge, regmean_merge, sum_task_vectors, ties_merged_vector,
    weight_average, DareConfig, MergeConfig, Method, DARE_RNG_NAME,
};
use crate::checkpoint::{read_checkpoint, validate_aligned, write_checkpoint, Checkpoint, ComputeDType};
use crate::emr::{emr_merge, EmrOptions, RescalerScope};
use crate::error::{Error, Result};
use crate::store::{inspect_sizes, load_bundle, save_bundle};
use crate::task_vector::{apply_task_vector, compute_task_vector, TaskVectorSet};

/// A merge job with flags and job-file values combined.
#[derive(Debug)]
struct MergeJob {
    config: MergeConfig,
    base: Option<PathBuf>,
    models: Vec<PathBuf>,
    fishers: Vec<PathBuf>,
    grams: Vec<PathBuf>,
    out: PathBuf,
    report: Option<PathBuf>,
    format: ReportFormat,
    compute: ComputeDType,
    rescaler_scope: RescalerScope,
}

fn resolve(args: &MergeArgs, job: JobConfig) -> Result<MergeJob> {
    let method = args
        .method
        .or(job.method)
        .ok_or_else(|| Error::config("--method is required"))?;
    let mut config = MergeConfig::new(method);
    if let Some(v) = args.lambda.or(job.lambda) {
        config.lambda = v;
    }
    if let Some(v) = args.keep.or(job.ties_keep_fraction) {
        config.ties_keep_fraction = v;
    }
    if let Some(v) = args.ties_granularity.or(job.ties_granularity) {
        config.ties_granularity = v;
    }
    if let Some(v) = args.regmean_a.or(job.regmean_offdiag) {
        config.regmean_offdiag = v;
    }
    let drop_prob = args.dare_p.or(job.dare.as_ref().map(|d| d.drop_prob));
    if let Some(drop_prob) = drop_prob {
        let seed = args
            .seed
            .or(job.dare.as_ref().and_then(|d| d.seed))
            .or(job.seed)
            .unwrap_or(0);
        config.dare = Some(DareConfig { drop_prob, seed });
    }
    config.validate()?;

    let pick = |flag: &Vec<PathBuf>, file: Vec<PathBuf>| if flag.is_empty() { file } else { flag.clone() };
    let models = pick(&args.models, job.models);
    let fishers = pick(&args.fishers, job.fishers);
    let grams = pick(&args.grams, job.grams);
    let rescaler_scope = if args.per_tensor_rescaler {
        RescalerScope::PerTensor
    } else {
        job.rescaler_scope.unwrap_or_default()
    };
    let resolved = MergeJob {
        config,
        base: args.base.clone().or(job.base),
        models,
        fishers,
        grams,
        out: args
            .out
            .clone()
            .or(job.out)
            .ok_or_else(|| Error::config("--out is required"))?,
        report: args.report.clone().or(job.report),
        format: args.format.or(job.report_format).unwrap_or_default(),
        compute: args.compute_dtype.or(job.compute_dtype).unwrap_or_default(),
        rescaler_scope,
    };
    resolved.check()?;
    Ok(resolved)
}

impl MergeJob {
    /// Argument consistency and input existence, before anything is loaded.
    fn check(&self) -> Result<()> {
        let method = self.config.method;
        if self.models.is_empty() {
            return Err(Error::config("at least one model is required (--models)"));
        }
        if self.base.is_none() && (method.uses_task_vectors() || self.report.is_some()) {
            return Err(Error::config(format!(
                "--base is required for method `{method}`{}",
                if method.uses_task_vectors() { "" } else { " with --report" }
            )));
        }
        let per_model = |name: &str, paths: &[PathBuf], wanted: bool| -> Result<()> {
            match (wanted, paths.len()) {
                (true, n) if n != self.models.len() => Err(Error::config(format!(
                    "method `{method}` needs one {name} file per model ({} models, {n} files)",
                    self.models.len()
                ))),
                (false, n) if n > 0 => Err(Error::config(format!(
                    "{name} files are only used by method `{}`",
                    if name == "Fisher" { "fisher" } else { "regmean" }
                ))),
                _ => Ok(()),
            }
        };
        per_model("Fisher", &self.fishers, method == Method::Fisher)?;
        per_model("Gram", &self.grams, method == Method::Regmean)?;
        if self.rescaler_scope == RescalerScope::PerTensor && method != Method::Emr {
            return Err(Error::config("per-tensor rescalers apply to method `emr` only"));
        }
        task_labels(&self.models)?;
        for path in self
            .base
            .iter()
            .chain(&self.models)
            .chain(&self.fishers)
            .chain(&self.grams)
        {
            require_file(path)?;
        }
        require_parent(&self.out)?;
        if let Some(r) = &self.report {
            require_parent(r)?;
        }
        Ok(())
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let c = &self.config;
        let mut m = BTreeMap::new();
        m.insert("method".to_string(), c.method.to_string());
        m.insert("compute_dtype".to_string(), format!("{:?}", self.compute).to_lowercase());
        match c.method {
            Method::TaskArithmetic => {
                m.insert("lambda".into(), c.lambda.to_string());
            }
            Method::Ties => {
                m.insert("lambda".into(), c.lambda.to_string());
                m.insert("ties_keep_fraction".into(), c.ties_keep_fraction.to_string());
                m.insert("ties_granularity".into(), c.ties_granularity.as_str().into());
            }
            Method::Regmean => {
                m.insert("regmean_offdiag".into(), c.regmean_offdiag.to_string());
            }
            Method::Emr => {
                if self.rescaler_scope == RescalerScope::PerTensor {
                    m.insert("rescaler_scope".into(), "per_tensor".into());
                }
            }
            Method::Average | Method::Fisher => {}
        }
        if let Some(d) = &c.dare {
            m.insert("dare_drop_prob".into(), d.drop_prob.to_string());
            m.insert("dare_seed".into(), d.seed.to_string());
            m.insert("dare_rng".into(), DARE_RNG_NAME.into());
        }
        m
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, io::Error::new(io::ErrorKind::NotFound, "no such file")))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::io(
            dir,
            io::Error::new(io::ErrorKind::NotFound, "output directory does not exist"),
        )),
        _ => Ok(()),
    }
}

/// Task labels are the model file stems and must be unique.
pub(crate) fn task_labels(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::config(format!("cannot derive a task label from {}", p.display())))?;
            if !seen.insert(label.clone()) {
                return Err(Error::config(format!(
                    "duplicate task label `{label}`; model file names must have distinct stems"
                )));
            }
            Ok(label)
        })
        .collect()
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.iter().map(read_checkpoint).collect()
}

fn labelled_models(paths: &[PathBuf]) -> Result<Vec<(String, Checkpoint)>> {
    Ok(task_labels(paths)?.into_iter().zip(read_all(paths)?).collect())
}

fn write_report(report: &MergeReport, path: Option<&Path>, format: ReportFormat) -> Result<()> {
    match path {
        Some(p) => {
            emit_report(report, p, format)?;
            info!("wrote report {}", p.display());
            Ok(())
        }
        None => {
            print!("{}", render_report(report, format)?);
            Ok(())
        }
    }
}

pub(super) fn merge(args: MergeArgs) -> Result<()> {
    let job_file = match &args.config {
        Some(p) => JobConfig::load(p)?,
        None => JobConfig::default(),
    };
    let threads = thread_count(args.threads, job_file.thread_count)?;
    let job = resolve(&args, job_file)?;
    in_pool(threads, || run_merge(&job))
}

fn run_merge(job: &MergeJob) -> Result<()> {
    let c = &job.config;
    let base = job.base.as_ref().map(read_checkpoint).transpose()?;
    let models = labelled_models(&job.models)?;

    if c.method.uses_task_vectors() {
        let base = base.expect("checked");
        let mut set = TaskVectorSet::from_checkpoints(&base, &models, job.compute)?;
        drop(models);
        if let Some(d) = &c.dare {
            set = dare_preprocess_set(&set, d.drop_prob, d.seed)?;
        }
        if c.method == Method::Emr {
            let options = EmrOptions {
                rescaler_scope: job.rescaler_scope,
            };
            let mut bundle = emr_merge(&set, &options)?;
            bundle.metadata = job.metadata();
            let sizes = save_bundle(&bundle, &job.out)?;
            println!(
                "wrote bundle {} ({} tasks, d = {}, {} bytes)",
                job.out.display(),
                bundle.modulators.len(),
                bundle.d(),
                sizes.total_bytes
            );
            if let Some(path) = &job.report {
                let report = report_for_bundle(&set, &bundle, Some(&sizes), None)?;
                write_report(&report, Some(path), job.format)?;
            }
            return Ok(());
        }
        let merged = match c.method {
            Method::TaskArithmetic => sum_task_vectors(&set, "task_arithmetic")?,
            Method::Ties => ties_merged_vector(&set, c.ties_keep_fraction, c.ties_granularity)?,
            _ => unreachable!("task-vector methods"),
        };
        let out = apply_task_vector(&base, &merged, c.lambda)?.with_metadata(job.metadata());
        write_checkpoint(&out, &job.out)?;
        println!("wrote {} checkpoint {}", c.method, job.out.display());
        if let Some(path) = &job.report {
            let report = report_for_merged(&set, &merged.scale(c.lambda), c.method.as_str(), None)?;
            write_report(&report, Some(path), job.format)?;
        }
        return Ok(());
    }

    let (labels, checkpoints): (Vec<String>, Vec<Checkpoint>) = models.into_iter().unzip();
    if let Some(base) = &base {
        validate_aligned(base, &checkpoints)?;
    }
    let out = match c.method {
        Method::Average => weight_average(&checkpoints, job.compute)?,
        Method::Fisher => fisher_merge(&checkpoints, &read_all(&job.fishers)?, job.compute)?,
        Method::Regmean => regmean_merge(
            &checkpoints,
            &read_all(&job.grams)?,
            c.regmean_offdiag,
            job.compute,
        )?,
        _ => unreachable!("weight-space methods"),
    }
    .with_metadata(job.metadata());
    write_checkpoint(&out, &job.out)?;
    println!("wrote {} checkpoint {}", c.method, job.out.display());
    if let (Some(path), Some(base)) = (&job.report, &base) {
        let models: Vec<(String, Checkpoint)> = labels.into_iter().zip(checkpoints).collect();
        let set = TaskVectorSet::from_checkpoints(base, &models, job.compute)?;
        let merged = compute_task_vector(&out, base, c.method.as_str(), job.compute)?;
        let report = report_for_merged(&set, &merged, c.method.as_str(), None)?;
        write_report(&report, Some(path), job.format)?;
    }
    Ok(())
}

pub(super) fn apply(args: ApplyArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    bundle.modulator(&args.task)?;
    let base = read_checkpoint(&args.base)?;
    let actual = base.fingerprint();
    if actual != bundle.base_fingerprint {
        if !args.no_fingerprint_check {
            return Err(Error::FingerprintMismatch {
                expected: bundle.base_fingerprint.clone(),
                actual,
            });
        }
        warn!(
            "base fingerprint {actual} differs from the bundle's {}; continuing as requested",
            bundle.base_fingerprint
        );
    }
    let tau = bundle.reconstruct_task(&args.task)?;
    let out = apply_task_vector(&base, &tau, 1.0)?;
    write_checkpoint(&out, &args.out)?;
    println!("wrote task `{}` to {}", args.task, args.out.display());
    Ok(())
}

pub(super) fn analyze(args: AnalyzeArgs) -> Result<()> {
    let compute = args.compute_dtype.unwrap_or_default();
    for p in std::iter::once(&args.base)
        .chain(&args.models)
        .chain(&args.merged)
        .chain(&args.bundle)
    {
        require_file(p)?;
    }
    let base = read_checkpoint(&args.base)?;
    let models = labelled_models(&args.models)?;
    let set = TaskVectorSet::from_checkpoints(&base, &models, compute)?;
    drop(models);
    let base_weights: Option<Vec<f64>> = (args.compare == Comparison::Weights)
        .then(|| base.iter().flat_map(|(_, t)| t.values(compute)).collect());
    let base_weights = base_weights.as_deref();

    let report = if let Some(path) = &args.bundle {
        let (bundle, sizes) = inspect_sizes(path)?;
        if bundle.base_fingerprint != set.base_fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: bundle.base_fingerprint.clone(),
                actual: set.base_fingerprint().to_string(),
            });
        }
        report_for_bundle(&set, &bundle, Some(&sizes), base_weights)?
    } else {
        let path = args.merged.as_ref().expect("clap requires --merged or --bundle");
        let merged = read_checkpoint(path)?;
        let method = merged
            .metadata()
            .get("method")
            .cloned()
            .unwrap_or_else(|| "merged".to_string());
        let tau = compute_task_vector(&merged, &base, method.clone(), compute)?;
        report_for_merged(&set, &tau, &method, base_weights)?
    };
    write_report(&report, args.report.as_deref(), args.format)
}

pub(super) fn inspect(args: InspectArgs) -> Result<()> {
    let (bundle, sizes) = inspect_sizes(&args.bundle)?;
    let storage = StorageReport::new(&sizes, bundle.modulators.len(), bundle.d());
    if args.json {
        let tasks: Vec<_> = bundle
            .modulators
            .iter()
            .map(|m| {
                json!({
                    "task": m.task_label,
                    "mask_density": m.mask_density(),
                    "rescaler": m.rescaler,
                })
            })
            .collect();
        let doc = json!({
            "base_fingerprint": bundle.base_fingerprint,
            "d": bundle.d(),
            "tasks": tasks,
            "storage": storage,
            "metadata": bundle.metadata,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
        return Ok(());
    }

    let width = bundle
        .modulators
        .iter()
        .map(|m| m.task_label.len())
        .max()
        .unwrap_or(0)
        .max(4);
    println!("bundle   {}", args.bundle.display());
    println!("base     {}", bundle.base_fingerprint);
    println!("tasks    {}", bundle.modulators.len());
    println!("d        {}", bundle.d());
    for (k, v) in &bundle.metadata {
        println!("meta     {k} = {v}");
    }
    println!();
    println!("{:<width$}  {:>12}  {:>14}", "task", "mask_density", "rescaler");
    for m in &bundle.modulators {
        println!(
            "{:<width$}  {:>12.6}  {:>14.8}",
            m.task_label,
            m.mask_density(),
            m.rescaler
        );
    }
    println!();
    println!("header bytes              {}", storage.header_bytes);
    println!("unified vector bytes      {}", storage.unified_bytes);
    println!("mask bytes                {}", storage.mask_bytes);
    println!("rescaler bytes            {}", storage.rescaler_bytes);
    println!("total bytes               {}", storage.total_bytes);
    println!("separate F32 task vectors {}", storage.separate_f32_bytes);
    println!("modulator compression     {:.2}x", storage.modulator_compression);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_from_stems() {
        let paths = [PathBuf::from("dir/a.safetensors"), PathBuf::from("b.st")];
        assert_eq!(task_labels(&paths).unwrap(), vec!["a", "b"]);
        let dup = [PathBuf::from("x/a.safetensors"), PathBuf::from("y/a.safetensors")];
        assert_eq!(task_labels(&dup).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn flags_override_job_file() {
        let job = JobConfig::from_json(
            r#"{"method":"task_arithmetic","lambda":0.5,"out":"o","models":["m"],"dare":{"drop_prob":0.3,"seed":4}}"#,
        )
        .unwrap();
        let args = MergeArgs {
            lambda: Some(0.7),
            ..Default::default()
        };
        let err = resolve(&args, job.clone()).unwrap_err();
        // The base is missing; the error still reports a config problem.
        assert_eq!(err.exit_code(), 2);

        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("base.safetensors");
        let m = dir.path().join("m.safetensors");
        std::fs::write(&base, b"").unwrap();
        std::fs::write(&m, b"").unwrap();
        let args = MergeArgs {
            lambda: Some(0.7),
            base: Some(base),
            models: vec![m],
            seed: Some(9),
            ..Default::default()
        };
        let resolved = resolve(&args, job).unwrap();
        assert_eq!(resolved.config.lambda, 0.7);
        assert_eq!(resolved.config.dare, Some(DareConfig { drop_prob: 0.3, seed: 9 }));
        assert_eq!(resolved.metadata()["dare_rng"], DARE_RNG_NAME);
    }

    #[test]
    fn method_specific_inputs() {
        let job = JobConfig::from_json(r#"{"method":"fisher","out":"o","models":["a","b"],"fishers":["f"]}"#)
            .unwrap();
        assert_eq!(resolve(&MergeArgs::default(), job).unwrap_err().exit_code(), 2);
        let job = JobConfig::from_json(r#"{"method":"average","out":"o","models":["a"],"grams":["g"]}"#)
            .unwrap();
        assert_eq!(resolve(&MergeArgs::default(), job).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_input_is_io_error() {
        let job = JobConfig::from_json(r#"{"method":"average","out":"o","models":["/nonexistent/a.safetensors"]}"#)
            .unwrap();
        assert_eq!(resolve(&MergeArgs::default(), job).unwrap_err().exit_code(), 4);
    }
}
