//! Gaussian clusters around well-separated unit-sphere centers, and the
//! flat `DCLSYN1` binary format they are exchanged in.
//!
//! File layout (little-endian): magic `DCLSYN1`, then `u32` example count,
//! `u32` class count, `u32` dimension, then `count × dim` `f32` features in
//! row order, then `count` `i32` labels.

use std::io::{Read, Write};

use super::{Dataset, Example, Layout};
use crate::error::{Error, Result};
use crate::numcore::rng::streams;
use crate::numcore::Rng;

pub const SYNTH_MAGIC: &[u8; 7] = b"DCLSYN1";

const MIN_CENTER_DISTANCE: f64 = 0.5;
const MAX_ATTEMPTS: usize = 100_000;

fn draw_centers(classes: usize, dim: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::CannotSeparateCenters(MAX_ATTEMPTS));
        }
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let v: Vec<f64> = v.into_iter().map(|x| x / norm).collect();
        let far = centers.iter().all(|c| {
            c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= MIN_CENTER_DISTANCE
        });
        if far {
            centers.push(v);
        }
    }
    Ok(centers)
}

fn sample(centers: &[Vec<f64>], per_class: usize, sigma: f64, rng: &mut Rng) -> Vec<Example> {
    let mut out = Vec::with_capacity(centers.len() * per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            out.push(Example {
                features: c.iter().map(|x| x + sigma * rng.normal()).collect(),
                label,
                coarse_label: None,
            });
        }
    }
    out
}

fn check(classes: usize, dim: usize, sigma: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `classes × per_class` examples, grouped by class.
pub fn synth_clusters(classes: usize, dim: usize, per_class: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    Ok(synth_split(classes, dim, per_class, 0, sigma, seed)?.0)
}

/// Train and test sets sharing the same centers but drawn from disjoint
/// random streams.
pub fn synth_split(
    classes: usize,
    dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check(classes, dim, sigma)?;
    let root = Rng::new(seed);
    let centers = draw_centers(classes, dim, &mut root.split(streams::CENTERS))?;
    let train = sample(&centers, per_class_train, sigma, &mut root.split(streams::TRAIN_SAMPLES));
    let test = sample(&centers, per_class_test, sigma, &mut root.split(streams::TEST_SAMPLES));
    Ok((
        Dataset::new(Layout::Vector(dim), classes, train)?,
        Dataset::new(Layout::Vector(dim), classes, test)?,
    ))
}

pub fn write_synth(data: &Dataset, mut w: impl Write) -> Result<()> {
    let Layout::Vector(dim) = data.layout() else {
        return Err(Error::Format("synthetic format stores vector datasets only".into()));
    };
    let mut buf = Vec::with_capacity(19 + data.len() * (dim * 4 + 4));
    buf.extend_from_slice(SYNTH_MAGIC);
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(data.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for ex in data.examples() {
        for &v in &ex.features {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for ex in data.examples() {
        buf.extend_from_slice(&(ex.label as i32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_synth(mut r: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 19 || &bytes[..7] != SYNTH_MAGIC {
        return Err(Error::Format("missing DCLSYN1 header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (count, classes, dim) = (word(7), word(11), word(15));
    let expected = 19 + count * dim * 4 + count * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let feats = &bytes[19..19 + count * dim * 4];
    let labels = &bytes[19 + count * dim * 4..];
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let features = feats[i * dim * 4..(i + 1) * dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let label = i32::from_le_bytes(labels[i * 4..i * 4 + 4].try_into().unwrap());
        if label < 0 {
            return Err(Error::LabelOutOfRange { label: label as u32, offset: 19 + count * dim * 4 + i * 4 });
        }
        examples.push(Example { features, label: label as usize, coarse_label: None });
    }
    Dataset::new(Layout::Vector(dim), classes, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let d = synth_clusters(2, 5, 3, 0.1, 1).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.labels(), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn vanishing_noise_collapses_to_centers() {
        let d = synth_clusters(3, 4, 5, 1e-15, 2).unwrap();
        for chunk in d.examples().chunks(5) {
            for ex in chunk {
                for (a, b) in ex.features.iter().zip(&chunk[0].features) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            let norm = chunk[0].features.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(synth_clusters(3, 8, 4, 0.2, 9).unwrap(), synth_clusters(3, 8, 4, 0.2, 9).unwrap());
        assert_ne!(synth_clusters(3, 8, 4, 0.2, 9).unwrap(), synth_clusters(3, 8, 4, 0.2, 10).unwrap());
    }

    #[test]
    fn impossible_separation_errors() {
        // only two points on the 1-sphere are possible
        assert!(matches!(synth_clusters(3, 1, 1, 0.1, 0), Err(Error::CannotSeparateCenters(_))));
    }

    #[test]
    fn invalid_arguments() {
        assert!(synth_clusters(1, 4, 3, 0.1, 0).is_err());
        assert!(synth_clusters(2, 4, 3, 0.0, 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let d = synth_clusters(3, 4, 2, 0.3, 4).unwrap();
        let mut bytes = Vec::new();
        write_synth(&d, &mut bytes).unwrap();
        assert_eq!(&bytes[..7], b"DCLSYN1");
        assert_eq!(bytes.len(), 19 + 6 * 4 * 4 + 6 * 4);
        let back = read_synth(bytes.as_slice()).unwrap();
        assert_eq!(back.labels(), d.labels());
        let mut again = Vec::new();
        write_synth(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(read_synth(&bytes[..20]).is_err());
    }
}
