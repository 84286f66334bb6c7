//! Experiment runner for dimensional contrastive learning: configuration
//! documents, training runs with periodic evaluation, parameter sweeps and
//! checkpoint evaluation.

pub mod config;
pub mod error;
pub mod run;
pub mod sweep;

use std::path::Path;

use serde::Serialize;

use dimcl::data::cifar::{load_cifar, load_cifar_split, CifarVariant, Split};
use dimcl::data::synth::{read_synth, SYNTH_MAGIC};
use dimcl::data::Dataset;
use dimcl::frameworks::load_checkpoint;
use dimcl::metrics::{knn_accuracy, linear_probe, EmbeddingSet, ProbeConfig};

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use run::{execute, run_experiment, EpochRow, RunReport};
pub use sweep::{sweep, SweepParam, SweepPoint};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub framework: String,
    pub train_examples: usize,
    pub test_examples: usize,
    pub knn_acc: f64,
    pub probe_acc: f64,
}

/// Train/test data for `eval`: a CIFAR directory gives its standard
/// splits; a single synthetic or CIFAR file is split with every fifth
/// example held out.
pub fn load_eval_data(path: &Path, variant: CifarVariant) -> CliResult<(Dataset, Dataset)> {
    if path.is_dir() {
        return Ok((load_cifar_split(path, variant, Split::Train)?, load_cifar_split(path, variant, Split::Test)?));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let data = if bytes.starts_with(SYNTH_MAGIC) { read_synth(bytes.as_slice())? } else { load_cifar(path, variant)? };
    Ok(data.split_every(5))
}

/// KNN and linear-probe accuracy of a checkpoint's backbone features.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Path,
    variant: CifarVariant,
    knn_k: usize,
    probe: &ProbeConfig,
    chunk: usize,
) -> CliResult<EvalSummary> {
    let bytes = std::fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let state = load_checkpoint(&bytes)?;
    let (train, test) = load_eval_data(dataset, variant)?;
    let embed = |d: &Dataset| -> CliResult<EmbeddingSet> {
        Ok(EmbeddingSet::new(state.represent(&d.all_features(), chunk)?, d.labels())?)
    };
    let (tr, te) = (embed(&train)?, embed(&test)?);
    Ok(EvalSummary {
        framework: state.kind.to_string(),
        train_examples: tr.len(),
        test_examples: te.len(),
        knn_acc: knn_accuracy(&tr, &te, knn_k.min(tr.len()))?,
        probe_acc: linear_probe(&tr, &te, probe)?,
    })
}
