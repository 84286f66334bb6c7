//! One-parameter sweeps over λ, τ or D.
//!
//! Each point is a full run in `<output_dir>/<param>-<value>` with every
//! other setting, the seed included, left unchanged. Points run in parallel
//! on up to `workers` threads and share nothing mutable. The sweep directory
//! gets `sweep.csv` in long form (`param_value,metric,epoch,value`) and
//! `comparison.csv` with the final evaluated row of each point.

use std::fs;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{ConfigError, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::run::{run_experiment, RunReport, METRIC_COLUMNS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Tau,
    Dim,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
            SweepParam::Dim => "dim",
        }
    }
}

impl FromStr for SweepParam {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "tau" => Ok(SweepParam::Tau),
            "dim" => Ok(SweepParam::Dim),
            _ => Err(ConfigError { line: None, key: None, message: format!("cannot sweep `{s}` (lambda, tau or dim)") }),
        }
    }
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: String,
    pub config: ExperimentConfig,
    pub outcome: CliResult<RunReport>,
}

impl SweepPoint {
    /// The report, complete or partial (diverged).
    pub fn report(&self) -> Option<&RunReport> {
        match &self.outcome {
            Ok(r) => Some(r),
            Err(CliError::Diverged { report, .. }) => Some(report),
            Err(_) => None,
        }
    }
}

/// Configurations of every sweep point, validated before anything runs.
pub fn sweep_configs(base: &ExperimentConfig, param: SweepParam, values: &[String]) -> CliResult<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(ConfigError { line: None, key: Some(param.key().into()), message: "sweep needs at least one value".into() }.into());
    }
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(param.key(), v.trim())?;
            cfg.output_dir = base.output_dir.join(format!("{}-{}", param.key(), v.trim()));
            Ok(cfg)
        })
        .collect()
}

pub fn sweep(base: &ExperimentConfig, param: SweepParam, values: &[String], workers: usize) -> CliResult<Vec<SweepPoint>> {
    let configs = sweep_configs(base, param, values)?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CliResult<RunReport>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let outcome = run_experiment(cfg);
                *slots[i].lock().expect("no panics while holding the slot") = Some(outcome);
            });
        }
    });
    let points: Vec<SweepPoint> = configs
        .into_iter()
        .zip(slots)
        .zip(values)
        .map(|((config, slot), value)| SweepPoint {
            value: value.trim().to_string(),
            config,
            outcome: slot.into_inner().expect("worker finished").expect("every point ran"),
        })
        .collect();
    write_tables(base, param, &points)?;
    Ok(points)
}

/// Long-form table: one line per (point, metric, epoch) with a value.
pub fn long_form_csv(points: &[SweepPoint]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param_value", "metric", "epoch", "value"])?;
    for p in points {
        let Some(report) = p.report() else { continue };
        for row in &report.rows {
            let values = [
                Some(row.base_loss),
                Some(row.dimcl_loss),
                Some(row.total_loss),
                row.feature_diversity,
                row.probe_acc,
                row.knn_acc,
            ];
            for (metric, v) in METRIC_COLUMNS[1..].iter().zip(values) {
                if let Some(v) = v {
                    w.write_record([p.value.clone(), metric.to_string(), row.epoch.to_string(), v.to_string()])?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::io("sweep.csv", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

/// Final evaluated row per point plus its status.
pub fn comparison_csv(param: SweepParam, points: &[SweepPoint]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![param.key(), "status"];
    header.extend(&METRIC_COLUMNS);
    w.write_record(&header)?;
    for p in points {
        let status = match &p.outcome {
            Ok(_) => "completed",
            Err(CliError::Diverged { .. }) => "diverged",
            Err(_) => "failed",
        };
        let mut rec = vec![p.value.clone(), status.to_string()];
        match p.report().and_then(RunReport::last_evaluation) {
            Some(r) => rec.extend([
                r.epoch.to_string(),
                r.base_loss.to_string(),
                r.dimcl_loss.to_string(),
                r.total_loss.to_string(),
                r.feature_diversity.map_or(String::new(), |v| v.to_string()),
                r.probe_acc.map_or(String::new(), |v| v.to_string()),
                r.knn_acc.map_or(String::new(), |v| v.to_string()),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len())),
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io("comparison.csv", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

fn write_tables(base: &ExperimentConfig, param: SweepParam, points: &[SweepPoint]) -> CliResult<()> {
    let dir = &base.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let long = dir.join("sweep.csv");
    fs::write(&long, long_form_csv(points)?).map_err(|e| CliError::io(&long, e))?;
    let cmp = dir.join("comparison.csv");
    fs::write(&cmp, comparison_csv(param, points)?).map_err(|e| CliError::io(&cmp, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_isolate_the_parameter() {
        let base = ExperimentConfig::default();
        let cfgs = sweep_configs(&base, SweepParam::Dim, &["64".into(), "256".into()]).unwrap();
        assert_eq!(cfgs[0].dim, 64);
        assert_eq!(cfgs[1].dim, 256);
        for c in &cfgs {
            let mut same = c.clone();
            same.dim = base.dim;
            same.output_dir = base.output_dir.clone();
            assert_eq!(same, base);
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = ExperimentConfig::default();
        assert!(sweep_configs(&base, SweepParam::Lambda, &[]).is_err());
        let e = sweep_configs(&base, SweepParam::Lambda, &["0.5".into(), "2".into()]).unwrap_err();
        assert!(e.to_string().contains("lambda out of [0,1]"));
        assert!("beta".parse::<SweepParam>().is_err());
    }
}
