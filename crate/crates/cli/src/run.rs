//! One training run: data, training loop, evaluation cadence and outputs.
//!
//! A run directory holds `metrics.csv`, `summary.json`, `config.txt` (the
//! full configuration document) and, when training completes,
//! `checkpoint.bin`.
//!
//! `metrics.csv` starts with the line `#dimcl-metrics-v1`, then a header row
//! `epoch,base_loss,dimcl_loss,total_loss,feature_diversity,probe_acc,knn_acc`
//! and one row per epoch. Row 0 is the untrained model. Its losses are
//! measured on the evaluation views. Later rows hold the mean of the epoch's
//! step losses. The evaluation columns are filled on evaluation epochs
//! (every `eval_every` epochs and the last one) and left empty otherwise.
//! Accuracies are percentages.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use dimcl::data::augment::Augmentation;
use dimcl::data::cifar::{load_cifar_split, CifarVariant, Split};
use dimcl::data::synth::{read_synth, synth_split};
use dimcl::data::{augment_batch, epoch_batches, Dataset, Layout};
use dimcl::frameworks::{
    save_checkpoint, Architecture, BackboneSpec, CosineWarmup, FrameworkOptions, FrameworkState, ViewEmbeddings,
};
use dimcl::losses::{combined_loss, LossMixConfig};
use dimcl::metrics::{feature_diversity, knn_accuracy, linear_probe, EmbeddingSet, ProbeConfig};
use dimcl::numcore::rng::streams;
use dimcl::numcore::{Matrix, Rng};

use crate::config::{BackboneKind, ConfigError, DatasetKind, ExperimentConfig, KEYS};
use crate::error::{CliError, CliResult};

pub const METRICS_SCHEMA: &str = "dimcl-metrics-v1";
pub const METRIC_COLUMNS: [&str; 7] =
    ["epoch", "base_loss", "dimcl_loss", "total_loss", "feature_diversity", "probe_acc", "knn_acc"];

/// Batch size at which `lr` is specified.
const LR_REFERENCE_BATCH: f64 = 256.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub base_loss: f64,
    pub dimcl_loss: f64,
    pub total_loss: f64,
    pub feature_diversity: Option<f64>,
    pub probe_acc: Option<f64>,
    pub knn_acc: Option<f64>,
}

impl EpochRow {
    pub fn is_evaluated(&self) -> bool {
        self.feature_diversity.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub config: ExperimentConfig,
    pub wall_clock_secs: f64,
    /// Step index at which training diverged, if it did.
    pub diverged_at: Option<usize>,
}

impl RunReport {
    pub fn final_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    pub fn last_evaluation(&self) -> Option<&EpochRow> {
        self.rows.iter().rev().find(|r| r.is_evaluated())
    }
}

/// Train/test data plus the matching augmentation.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub augmentation: Augmentation,
}

pub fn load_data(cfg: &ExperimentConfig) -> CliResult<RunData> {
    let path = || cfg.data_path.clone().ok_or_else(|| ConfigError {
        line: None,
        key: Some("data_path".into()),
        message: "data_path is required".into(),
    });
    let (train, test) = match cfg.dataset {
        DatasetKind::Synth => synth_split(
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_train_per_class,
            cfg.synth_test_per_class,
            cfg.synth_sigma,
            cfg.seed,
        )?,
        DatasetKind::SynthFile => {
            let p = path()?;
            let file = fs::File::open(&p).map_err(|e| CliError::io(&p, e))?;
            read_synth(std::io::BufReader::new(file))?.split_every(5)
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let variant = if cfg.dataset == DatasetKind::Cifar10 { CifarVariant::Cifar10 } else { CifarVariant::Cifar100 };
            let p = path()?;
            (load_cifar_split(&p, variant, Split::Train)?, load_cifar_split(&p, variant, Split::Test)?)
        }
    };
    let subset = |d: Dataset, n: usize| if n == 0 { d } else { d.take(n) };
    let (train, test) = (subset(train, cfg.train_subset), subset(test, cfg.test_subset));
    let augmentation = match train.layout() {
        Layout::Vector(_) => Augmentation::Noise { sigma: cfg.noise_sigma },
        Layout::Image(_) => {
            cfg.augment.validate()?;
            Augmentation::Image(cfg.augment)
        }
    };
    Ok(RunData { train, test, augmentation })
}

pub fn architecture(cfg: &ExperimentConfig, layout: Layout) -> CliResult<Architecture> {
    let backbone = match (cfg.backbone, layout) {
        (BackboneKind::Auto | BackboneKind::Mlp, Layout::Vector(input)) => {
            BackboneSpec::Mlp { input, hidden: cfg.mlp_hidden.clone() }
        }
        (BackboneKind::Auto | BackboneKind::Conv, Layout::Image(input)) => {
            BackboneSpec::Conv { input, channels: cfg.conv_channels.clone() }
        }
        (BackboneKind::Mlp, Layout::Image(shape)) => BackboneSpec::Mlp { input: shape.len(), hidden: cfg.mlp_hidden.clone() },
        (BackboneKind::Conv, Layout::Vector(_)) => {
            return Err(ConfigError { line: None, key: Some("backbone".into()), message: "conv backbone needs image data".into() }.into())
        }
    };
    Ok(Architecture { backbone, proj_hidden: cfg.proj_hidden, dim: cfg.dim, pred_hidden: cfg.pred_hidden })
}

/// Framework state exactly as a run with `cfg` initializes it.
pub fn initial_state(cfg: &ExperimentConfig, data: &RunData) -> CliResult<FrameworkState> {
    let mix = LossMixConfig::new(cfg.lambda, cfg.tau)?;
    let options = FrameworkOptions {
        base_tau: cfg.base_tau,
        negatives: cfg.negatives,
        center: cfg.center,
        dimcl_input: cfg.dimcl_input,
        ema_momentum: cfg.ema_momentum,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let arch = architecture(cfg, data.train.layout())?;
    Ok(FrameworkState::new(cfg.framework, &arch, mix, options, data.train.num_classes(), &Rng::new(cfg.seed))?)
}

/// The fixed pair of augmented views used for diversity measurement and
/// the epoch-0 losses, with their labels.
pub fn evaluation_views(cfg: &ExperimentConfig, data: &RunData) -> CliResult<(Matrix, Matrix, Vec<usize>)> {
    let eval = Rng::new(cfg.seed).split(streams::EVAL);
    let n = cfg.eval_samples.min(data.train.len());
    let mut idx = eval.split(0).permutation(data.train.len());
    idx.truncate(n);
    let (a, b) = augment_batch(&data.train, &idx, &data.augmentation, &eval.split(1))?;
    let labels = idx.iter().map(|&i| data.train.examples()[i].label).collect();
    Ok((a, b, labels))
}

struct Evaluation {
    views: ViewEmbeddings,
    diversity: f64,
    probe: f64,
    knn: f64,
}

fn evaluate(cfg: &ExperimentConfig, state: &FrameworkState, data: &RunData, views: &(Matrix, Matrix, Vec<usize>)) -> CliResult<Evaluation> {
    let embedded = state.forward_views(&views.0, &views.1)?;
    let diversity = feature_diversity(&embedded.ab)?.value();
    let train = EmbeddingSet::new(state.represent(&data.train.all_features(), cfg.eval_chunk)?, data.train.labels())?;
    let test = EmbeddingSet::new(state.represent(&data.test.all_features(), cfg.eval_chunk)?, data.test.labels())?;
    let knn = knn_accuracy(&train, &test, cfg.knn_k.min(train.len()))?;
    let probe_cfg = ProbeConfig {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        seed: Rng::new(cfg.seed).split(streams::PROBE).next_u64(),
        ..ProbeConfig::default()
    };
    let probe = linear_probe(&train, &test, &probe_cfg)?;
    Ok(Evaluation { views: embedded, diversity, probe, knn })
}

/// Trains and evaluates without touching the file system. Divergence
/// yields [`CliError::Diverged`] carrying the rows completed so far.
pub fn execute(cfg: &ExperimentConfig) -> CliResult<(RunReport, FrameworkState)> {
    cfg.validate()?;
    let started = Instant::now();
    let data = load_data(cfg)?;
    let mut state = initial_state(cfg, &data)?;
    let n = cfg.batch_size;
    let steps_per_epoch = data.train.len() / n;
    if steps_per_epoch == 0 {
        return Err(ConfigError {
            line: None,
            key: Some("batch_size".into()),
            message: format!("batch_size {n} exceeds the {} training examples", data.train.len()),
        }
        .into());
    }
    let schedule = CosineWarmup {
        base_lr: cfg.lr * n as f64 / LR_REFERENCE_BATCH,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let root = Rng::new(cfg.seed);
    let data_rng = root.split(streams::DATA);
    let aug_rng = root.split(streams::AUGMENT);
    let eval_views = evaluation_views(cfg, &data)?;

    let mut report = RunReport { rows: Vec::new(), config: cfg.clone(), wall_clock_secs: 0.0, diverged_at: None };
    let fail = |mut report: RunReport, step: usize, started: Instant| {
        report.diverged_at = Some(step);
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        CliError::Diverged { step, report: Box::new(report) }
    };

    let initial = evaluate(cfg, &state, &data, &eval_views)?;
    let base = state.base_loss(&initial.views, &eval_views.2)?;
    let dim = state.dimcl_value(&initial.views)?;
    let row = EpochRow {
        epoch: 0,
        base_loss: base,
        dimcl_loss: dim,
        total_loss: combined_loss(base, dim, &state.mix)?,
        feature_diversity: Some(initial.diversity),
        probe_acc: Some(initial.probe),
        knn_acc: Some(initial.knn),
    };
    if !row_is_finite(&row) {
        return Err(fail(report, 0, started));
    }
    report.rows.push(row);

    for epoch in 1..=cfg.epochs {
        let (mut base, mut dim, mut total) = (0.0, 0.0, 0.0);
        for batch in epoch_batches(data.train.len(), n, &data_rng, epoch) {
            let step = state.step;
            let rng = aug_rng.split(step as u64);
            match state.training_step(&data.train, &batch, &data.augmentation, &rng, schedule.lr(step)) {
                Ok(r) => {
                    base += r.base_loss;
                    dim += r.dimcl_loss;
                    total += r.total;
                }
                Err(dimcl::Error::Diverged { step }) => return Err(fail(report, step, started)),
                Err(e) => return Err(e.into()),
            }
        }
        let k = steps_per_epoch as f64;
        let mut row = EpochRow {
            epoch,
            base_loss: base / k,
            dimcl_loss: dim / k,
            total_loss: total / k,
            feature_diversity: None,
            probe_acc: None,
            knn_acc: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let e = evaluate(cfg, &state, &data, &eval_views)?;
            row.feature_diversity = Some(e.diversity);
            row.probe_acc = Some(e.probe);
            row.knn_acc = Some(e.knn);
        }
        if !row_is_finite(&row) {
            return Err(fail(report, state.step, started));
        }
        report.rows.push(row);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((report, state))
}

fn row_is_finite(r: &EpochRow) -> bool {
    [Some(r.base_loss), Some(r.dimcl_loss), Some(r.total_loss), r.feature_diversity, r.probe_acc, r.knn_acc]
        .into_iter()
        .flatten()
        .all(f64::is_finite)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// The metrics file contents for `rows`.
pub fn metrics_csv(rows: &[EpochRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.base_loss.to_string(),
            r.dimcl_loss.to_string(),
            r.total_loss.to_string(),
            opt(r.feature_diversity),
            opt(r.probe_acc),
            opt(r.knn_acc),
        ])?;
    }
    let body = w.into_inner().map_err(|e| CliError::io("metrics.csv", e.into_error()))?;
    Ok(format!("#{METRICS_SCHEMA}\n{}", String::from_utf8(body).expect("ascii")))
}

/// Parses a metrics file, checking the schema line, the header and that
/// every value is a finite number.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochRow>, String> {
    let (first, rest) = text.split_once('\n').ok_or("empty metrics file")?;
    if first != format!("#{METRICS_SCHEMA}") {
        return Err(format!("unexpected schema line `{first}`"));
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(METRIC_COLUMNS) {
        return Err(format!("unexpected header {header:?}"));
    }
    let num = |s: &str, required: bool| -> Result<Option<f64>, String> {
        if s.is_empty() && !required {
            return Ok(None);
        }
        let v: f64 = s.parse().map_err(|_| format!("bad number `{s}`"))?;
        if !v.is_finite() {
            return Err(format!("non-finite value `{s}`"));
        }
        Ok(Some(v))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push(EpochRow {
            epoch: rec[0].parse().map_err(|_| format!("bad epoch `{}`", &rec[0]))?,
            base_loss: num(&rec[1], true)?.unwrap(),
            dimcl_loss: num(&rec[2], true)?.unwrap(),
            total_loss: num(&rec[3], true)?.unwrap(),
            feature_diversity: num(&rec[4], false)?,
            probe_acc: num(&rec[5], false)?,
            knn_acc: num(&rec[6], false)?,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Summary<'a> {
    schema: &'static str,
    status: &'static str,
    diverged_at_step: Option<usize>,
    epochs_completed: usize,
    final_row: Option<&'a EpochRow>,
    last_evaluation: Option<&'a EpochRow>,
    wall_clock_secs: f64,
    config: BTreeMap<&'static str, String>,
}

pub fn summary_json(report: &RunReport) -> CliResult<String> {
    let summary = Summary {
        schema: METRICS_SCHEMA,
        status: if report.diverged_at.is_some() { "diverged" } else { "completed" },
        diverged_at_step: report.diverged_at,
        epochs_completed: report.rows.last().map_or(0, |r| r.epoch),
        final_row: report.final_row(),
        last_evaluation: report.last_evaluation(),
        wall_clock_secs: report.wall_clock_secs,
        config: KEYS.iter().map(|&k| (k, report.config.get(k).expect("listed key"))).collect(),
    };
    Ok(serde_json::to_string_pretty(&summary)? + "\n")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_outputs(report: &RunReport, state: Option<&FrameworkState>) -> CliResult<()> {
    let dir = &report.config.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join("metrics.csv"), metrics_csv(&report.rows)?)?;
    write(&dir.join("summary.json"), summary_json(report)?)?;
    write(&dir.join("config.txt"), report.config.to_document())?;
    if let Some(state) = state {
        write(&dir.join("checkpoint.bin"), save_checkpoint(state))?;
    }
    Ok(())
}

/// Runs `cfg` and writes its outputs; a diverged run still writes its
/// partial metrics and summary before returning the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<RunReport> {
    match execute(cfg) {
        Ok((report, state)) => {
            write_outputs(&report, Some(&state))?;
            Ok(report)
        }
        Err(CliError::Diverged { step, report }) => {
            write_outputs(&report, None)?;
            Err(CliError::Diverged { step, report })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            synth_classes: 2,
            synth_dim: 6,
            synth_train_per_class: 12,
            synth_test_per_class: 5,
            mlp_hidden: vec![8],
            proj_hidden: 8,
            dim: 4,
            pred_hidden: 4,
            batch_size: 8,
            epochs: 3,
            eval_every: 2,
            probe_epochs: 5,
            knn_k: 3,
            warmup_epochs: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cadence_and_row_count() {
        let (report, state) = execute(&tiny()).unwrap();
        let evaluated: Vec<usize> = report.rows.iter().filter(|r| r.is_evaluated()).map(|r| r.epoch).collect();
        assert_eq!(evaluated, vec![0, 2, 3]);
        assert_eq!(report.rows.len(), 4);
        assert_eq!(state.step, 9);
    }

    #[test]
    fn zero_epochs_gives_initial_row_only() {
        let (report, _) = execute(&ExperimentConfig { epochs: 0, ..tiny() }).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].epoch, 0);
        assert!(report.rows[0].is_evaluated());
    }

    #[test]
    fn csv_round_trip() {
        let (report, _) = execute(&tiny()).unwrap();
        let text = metrics_csv(&report.rows).unwrap();
        assert!(text.starts_with("#dimcl-metrics-v1\nepoch,base_loss,"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), report.rows);
        assert!(parse_metrics_csv("#other\nepoch\n").is_err());
    }

    #[test]
    fn oversized_batch_is_config_error() {
        let e = execute(&ExperimentConfig { batch_size: 100, ..tiny() }).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn divergence_writes_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { lr: 1e300, output_dir: dir.path().join("run"), ..tiny() };
        let e = run_experiment(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let text = fs::read_to_string(cfg.output_dir.join("metrics.csv")).unwrap();
        let rows = parse_metrics_csv(&text).unwrap();
        assert!(!rows.is_empty());
        let summary = fs::read_to_string(cfg.output_dir.join("summary.json")).unwrap();
        assert!(summary.contains("\"diverged\""));
        assert!(!cfg.output_dir.join("checkpoint.bin").exists());
    }
}
