//! Job description files for `emr merge --config`.
//!
//! ```json
//! {
//!   "method": "ties",
//!   "base": "base.safetensors",
//!   "models": ["a.safetensors", "b.safetensors"],
//!   "out": "merged.safetensors",
//!   "lambda": 0.9,
//!   "ties_keep_fraction": 0.2,
//!   "dare": { "drop_prob": 0.5 },
//!   "seed": 7
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Command-line flags override any value given here.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::analysis::ReportFormat;
use crate::baselines::{Method, TrimGranularity};
use crate::checkpoint::ComputeDType;
use crate::emr::RescalerScope;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareSection {
    pub drop_prob: f64,
    /// Falls back to the job-level `seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub method: Option<Method>,
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<PathBuf>,
    #[serde(default)]
    pub fishers: Vec<PathBuf>,
    #[serde(default)]
    pub grams: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub report_format: Option<ReportFormat>,
    pub lambda: Option<f64>,
    pub ties_keep_fraction: Option<f64>,
    pub ties_granularity: Option<TrimGranularity>,
    pub dare: Option<DareSection>,
    pub regmean_offdiag: Option<f64>,
    pub rescaler_scope: Option<RescalerScope>,
    pub compute_dtype: Option<ComputeDType>,
    pub thread_count: Option<usize>,
    pub seed: Option<u64>,
}

impl JobConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("job config: {e}")))
    }

    /// Reads a job file and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut job = JobConfig::from_json(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        job.resolve_paths(dir);
        Ok(job)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in self
            .base
            .iter_mut()
            .chain(self.out.iter_mut())
            .chain(self.report.iter_mut())
            .chain(self.models.iter_mut())
            .chain(self.fishers.iter_mut())
            .chain(self.grams.iter_mut())
        {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_job() {
        let job = JobConfig::from_json(
            r#"{"method":"ties","base":"b","models":["m1","m2"],"out":"o","lambda":0.9,
                "ties_keep_fraction":0.2,"ties_granularity":"per_tensor",
                "dare":{"drop_prob":0.5},"compute_dtype":"f64","thread_count":2,"seed":3,
                "report":"r.csv","report_format":"csv","rescaler_scope":"per_tensor"}"#,
        )
        .unwrap();
        assert_eq!(job.method, Some(Method::Ties));
        assert_eq!(job.models.len(), 2);
        assert_eq!(job.ties_granularity, Some(TrimGranularity::PerTensor));
        assert_eq!(job.dare, Some(DareSection { drop_prob: 0.5, seed: None }));
        assert_eq!(job.compute_dtype, Some(ComputeDType::F64));
        assert_eq!(job.report_format, Some(ReportFormat::Csv));
        assert_eq!(job.rescaler_scope, Some(RescalerScope::PerTensor));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = JobConfig::from_json(r#"{"method":"emr","lamda":0.3}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("lamda"));
        let err = JobConfig::from_json(r#"{"dare":{"drop_prob":0.1,"sed":1}}"#).unwrap_err();
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn unknown_method_rejected() {
        assert!(JobConfig::from_json(r#"{"method":"adamerging"}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("job.json");
        fs::write(&path, r#"{"base":"b.safetensors","models":["/abs/m.safetensors"]}"#).unwrap();
        let job = JobConfig::load(&path).unwrap();
        assert_eq!(job.base.unwrap(), dir.path().join("b.safetensors"));
        assert_eq!(job.models[0], PathBuf::from("/abs/m.safetensors"));
    }
}
