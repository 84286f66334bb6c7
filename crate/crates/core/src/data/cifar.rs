//! CIFAR binary format.
//!
//! CIFAR-10 records are `label (1 byte) + 3072 pixel bytes`; CIFAR-100
//! records are `coarse (1) + fine (1) + 3072`. Pixels are three 32×32
//! row-major planes, red then green then blue.

use std::path::Path;

use super::{Dataset, Example, Layout};
use crate::error::{Error, Result};
use crate::numcore::ImageShape;

const PIXELS: usize = 3 * 32 * 32;

pub const CIFAR_SHAPE: ImageShape = ImageShape { channels: 3, height: 32, width: 32 };

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + PIXELS,
            CifarVariant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Truncated { offset: bytes.len() / rec * rec, record: rec });
    }
    let mut examples = Vec::with_capacity(bytes.len() / rec);
    for (k, chunk) in bytes.chunks_exact(rec).enumerate() {
        let offset = k * rec;
        let (coarse, label, pixels) = match variant {
            CifarVariant::Cifar10 => (None, chunk[0] as usize, &chunk[1..]),
            CifarVariant::Cifar100 => {
                if chunk[0] >= 20 {
                    return Err(Error::LabelOutOfRange { label: chunk[0] as u32, offset });
                }
                (Some(chunk[0] as usize), chunk[1] as usize, &chunk[2..])
            }
        };
        if label >= variant.num_classes() {
            let at = if variant == CifarVariant::Cifar100 { offset + 1 } else { offset };
            return Err(Error::LabelOutOfRange { label: label as u32, offset: at });
        }
        examples.push(Example {
            features: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            label,
            coarse_label: coarse,
        });
    }
    Dataset::new(Layout::Image(CIFAR_SHAPE), variant.num_classes(), examples)
}

/// Parses one CIFAR binary file.
pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    parse_cifar(&std::fs::read(path)?, variant)
}

/// Loads the standard split files from an extracted `*-binary` directory
/// (`data_batch_{1..5}.bin` / `test_batch.bin`, or `train.bin` / `test.bin`).
pub fn load_cifar_split(dir: impl AsRef<Path>, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
        (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
        (CifarVariant::Cifar100, Split::Test) => vec!["test.bin".into()],
    };
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(std::fs::read(dir.join(f))?);
    }
    parse_cifar(&bytes, variant)
}

/// Serializes an image dataset back into CIFAR records.
pub fn write_cifar(data: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if data.layout() != Layout::Image(CIFAR_SHAPE) {
        return Err(Error::Format("dataset is not 3x32x32".into()));
    }
    let mut out = Vec::with_capacity(data.len() * variant.record_len());
    for ex in data.examples() {
        if variant == CifarVariant::Cifar100 {
            out.push(ex.coarse_label.unwrap_or(0) as u8);
        }
        if ex.label >= variant.num_classes() {
            return Err(Error::LabelOutOfRange { label: ex.label as u32, offset: out.len() });
        }
        out.push(ex.label as u8);
        out.extend(ex.features.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record10(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn single_cifar10_record() {
        let mut bytes = record10(7, 0);
        bytes[1] = 255;
        bytes[1 + 1024] = 51;
        let d = parse_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.examples()[0].label, 7);
        assert_eq!(d.examples()[0].features[0], 1.0);
        // green plane starts at 1024
        assert_eq!(d.examples()[0].features[1024], 0.2);
    }

    #[test]
    fn cifar100_fine_labels_at_format_offsets() {
        let mut bytes = vec![0u8; 2 * 3074];
        bytes[0] = 4;
        bytes[1] = 42;
        bytes[3074] = 19;
        bytes[3075] = 99;
        let d = parse_cifar(&bytes, CifarVariant::Cifar100).unwrap();
        assert_eq!(d.labels(), vec![42, 99]);
        assert_eq!(d.examples()[1].coarse_label, Some(19));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record10(1, 3);
        bytes.extend(record10(2, 3));
        bytes.truncate(3073 + 100);
        match parse_cifar(&bytes, CifarVariant::Cifar10) {
            Err(Error::Truncated { offset, record }) => assert_eq!((offset, record), (3073, 3073)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let bytes = record10(10, 0);
        assert!(matches!(
            parse_cifar(&bytes, CifarVariant::Cifar10),
            Err(Error::LabelOutOfRange { label: 10, offset: 0 })
        ));
        let mut bytes = vec![0u8; 3074];
        bytes[1] = 100;
        assert!(matches!(
            parse_cifar(&bytes, CifarVariant::Cifar100),
            Err(Error::LabelOutOfRange { label: 100, offset: 1 })
        ));
    }
}
