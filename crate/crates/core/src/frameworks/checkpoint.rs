//! Binary checkpoint of a [`FrameworkState`].
//!
//! Little-endian layout:
//!
//! ```text
//! "DCLCKPT1"
//! u8 framework kind, u8 backbone kind (0 mlp, 1 conv),
//! u8 negative logit (0 dot, 1 abs), u8 center, u8 dimcl input (0 projector, 1 predictor)
//! u32 channels, u32 height, u32 width            (zeros for mlp backbones)
//! f64 lambda, tau, base_tau, ema_momentum, momentum, weight_decay
//! u64 step
//! u32 tensor count, then per tensor: u8 group, u32 rows, u32 cols
//! f32 parameter blobs in tensor order (row-major)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Parameters are stored in single precision; optimizer velocity is not
//! stored. Re-saving a loaded checkpoint reproduces the file byte for byte.

use std::io::{Read, Write};

use super::{Backbone, ConvNet, Dense, DimclInput, Encoder, FrameworkKind, FrameworkOptions, FrameworkState, Mlp, Network, Sgd};
use crate::error::{Error, Result};
use crate::losses::{LossMixConfig, NegativeLogit};
use crate::numcore::{ImageShape, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCLCKPT1";

const GROUP_BACKBONE: u8 = 0;
const GROUP_PROJECTOR: u8 = 1;
const GROUP_PREDICTOR: u8 = 2;
const GROUP_TARGET_BACKBONE: u8 = 3;
const GROUP_TARGET_PROJECTOR: u8 = 4;
const GROUP_HEAD: u8 = 5;

fn kind_code(k: FrameworkKind) -> u8 {
    match k {
        FrameworkKind::SimClr => 0,
        FrameworkKind::Byol => 1,
        FrameworkKind::SimSiam => 2,
        FrameworkKind::Supervised => 3,
    }
}

fn push_encoder<'a>(tensors: &mut Vec<(u8, &'a Matrix)>, enc: &'a Encoder, backbone: u8, projector: u8) {
    tensors.extend(enc.backbone.params().into_iter().map(|p| (backbone, p)));
    tensors.extend(enc.projector.params().into_iter().map(|p| (projector, p)));
}

pub fn save_checkpoint(state: &FrameworkState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let (backbone_kind, shape) = match &state.encoder.backbone {
        Backbone::Mlp(_) => (0u8, ImageShape { channels: 0, height: 0, width: 0 }),
        Backbone::Conv(c) => (1u8, c.input),
    };
    let o = &state.options;
    out.extend([
        kind_code(state.kind),
        backbone_kind,
        (o.negatives == NegativeLogit::AbsDot) as u8,
        o.center as u8,
        (o.dimcl_input == DimclInput::Predictor) as u8,
    ]);
    for v in [shape.channels, shape.height, shape.width] {
        out.extend((v as u32).to_le_bytes());
    }
    for v in [state.mix.lambda(), state.mix.tau(), o.base_tau, o.ema_momentum, o.momentum, o.weight_decay] {
        out.extend(v.to_le_bytes());
    }
    out.extend((state.step as u64).to_le_bytes());

    let mut tensors = Vec::new();
    push_encoder(&mut tensors, &state.encoder, GROUP_BACKBONE, GROUP_PROJECTOR);
    if let Some(p) = &state.predictor {
        tensors.extend(p.params().into_iter().map(|m| (GROUP_PREDICTOR, m)));
    }
    if let Some(t) = &state.target {
        push_encoder(&mut tensors, t, GROUP_TARGET_BACKBONE, GROUP_TARGET_PROJECTOR);
    }
    if let Some(h) = &state.head {
        tensors.extend(h.params().into_iter().map(|m| (GROUP_HEAD, m)));
    }
    out.extend((tensors.len() as u32).to_le_bytes());
    for (group, m) in &tensors {
        out.push(*group);
        out.extend((m.rows() as u32).to_le_bytes());
        out.extend((m.cols() as u32).to_le_bytes());
    }
    for (_, m) in &tensors {
        for &v in m.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

pub fn write_checkpoint(state: &FrameworkState, mut w: impl Write) -> Result<()> {
    w.write_all(&save_checkpoint(state))?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<FrameworkState> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    load_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn flag(v: u8, what: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Format(format!("invalid {what} code {v}"))),
    }
}

fn pairs(tensors: Vec<Matrix>) -> Result<Vec<(Matrix, Matrix)>> {
    if tensors.len() % 2 != 0 {
        return Err(Error::Format("odd number of layer tensors".into()));
    }
    let mut it = tensors.into_iter();
    let mut out = Vec::new();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        out.push((w, b));
    }
    Ok(out)
}

/// Dense layers from `(weight, bias)` pairs; every layer activates when
/// `activate_last`, otherwise all but the last.
fn mlp(tensors: Vec<Matrix>, activate_last: bool) -> Result<Mlp> {
    let pairs = pairs(tensors)?;
    let n = pairs.len();
    let mut layers = Vec::with_capacity(n);
    let mut prev: Option<usize> = None;
    for (k, (weight, bias)) in pairs.into_iter().enumerate() {
        if bias.shape() != (1, weight.cols()) || prev.is_some_and(|p| p != weight.rows()) {
            return Err(Error::Format(format!("inconsistent dense layer shape {:?}", weight.shape())));
        }
        prev = Some(weight.cols());
        let act = k + 1 < n || activate_last;
        layers.push(Dense { weight, bias, batch_norm: act, relu: act });
    }
    if layers.is_empty() {
        return Err(Error::Format("empty network in checkpoint".into()));
    }
    Ok(Mlp { layers })
}

fn encoder(backbone_kind: u8, shape: ImageShape, backbone: Vec<Matrix>, projector: Vec<Matrix>) -> Result<Encoder> {
    let backbone = match backbone_kind {
        0 => Backbone::Mlp(mlp(backbone, true)?),
        _ => Backbone::Conv(ConvNet::from_params(shape, pairs(backbone)?)?),
    };
    let projector = mlp(projector, false)?;
    if projector.input_dim() != backbone.output_dim() {
        return Err(Error::Format("projector does not match backbone width".into()));
    }
    Ok(Encoder { backbone, projector })
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<FrameworkState> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing DCLCKPT1 header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut c = Cursor { bytes: body, at: 8 };
    let kind = match c.u8()? {
        0 => FrameworkKind::SimClr,
        1 => FrameworkKind::Byol,
        2 => FrameworkKind::SimSiam,
        3 => FrameworkKind::Supervised,
        v => return Err(Error::Format(format!("unknown framework code {v}"))),
    };
    let backbone_kind = c.u8()?;
    if backbone_kind > 1 {
        return Err(Error::Format(format!("unknown backbone code {backbone_kind}")));
    }
    let negatives = if flag(c.u8()?, "negative logit")? { NegativeLogit::AbsDot } else { NegativeLogit::Dot };
    let center = flag(c.u8()?, "center")?;
    let dimcl_input = if flag(c.u8()?, "dimcl input")? { DimclInput::Predictor } else { DimclInput::Projector };
    let shape = ImageShape { channels: c.u32()?, height: c.u32()?, width: c.u32()? };
    let (lambda, tau) = (c.f64()?, c.f64()?);
    let options = FrameworkOptions {
        base_tau: c.f64()?,
        negatives,
        center,
        dimcl_input,
        ema_momentum: c.f64()?,
        momentum: c.f64()?,
        weight_decay: c.f64()?,
    };
    options.validate()?;
    let mix = LossMixConfig::new(lambda, tau)?;
    let step = c.u64()? as usize;

    let count = c.u32()?;
    let mut heads = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        heads.push((c.u8()?, c.u32()?, c.u32()?));
    }
    let mut groups: [Vec<Matrix>; 6] = Default::default();
    for (group, rows, cols) in heads {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let slot = groups.get_mut(group as usize).ok_or_else(|| Error::Format(format!("unknown tensor group {group}")))?;
        slot.push(Matrix::from_vec(rows, cols, data)?);
    }
    if c.at != body.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", body.len() - c.at)));
    }
    let [backbone, projector, predictor, t_backbone, t_projector, head] = groups;

    let encoder = encoder(backbone_kind, shape, backbone, projector)?;
    let predictor = if kind.has_predictor() { Some(mlp(predictor, false)?) } else { None };
    let target = if kind.has_target() { Some(self::encoder(backbone_kind, shape, t_backbone, t_projector)?) } else { None };
    let head = if kind == FrameworkKind::Supervised {
        let mut layers = pairs(head)?;
        if layers.len() != 1 {
            return Err(Error::Format("supervised head must be a single layer".into()));
        }
        let (weight, bias) = layers.remove(0);
        Some(Dense { weight, bias, batch_norm: false, relu: false })
    } else {
        None
    };
    Ok(FrameworkState {
        kind,
        encoder,
        target,
        predictor,
        head,
        mix,
        options,
        optimizer: Sgd::new(options.momentum, options.weight_decay),
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Architecture, BackboneSpec};
    use super::*;
    use crate::numcore::Rng;

    fn make(kind: FrameworkKind, backbone: BackboneSpec) -> FrameworkState {
        let arch = Architecture { backbone, proj_hidden: 7, dim: 4, pred_hidden: 5 };
        let opts = FrameworkOptions { negatives: NegativeLogit::AbsDot, center: true, ..Default::default() };
        FrameworkState::new(kind, &arch, LossMixConfig::new(0.25, 0.2).unwrap(), opts, 3, &Rng::new(2)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let conv = BackboneSpec::Conv { input: ImageShape { channels: 3, height: 4, width: 4 }, channels: vec![2, 3] };
        let mlp = BackboneSpec::Mlp { input: 6, hidden: vec![5, 5] };
        for kind in FrameworkKind::ALL {
            for spec in [mlp.clone(), conv.clone()] {
                let s = make(kind, spec);
                let bytes = save_checkpoint(&s);
                assert_eq!(&bytes[..8], b"DCLCKPT1");
                let back = load_checkpoint(&bytes).unwrap();
                assert_eq!(save_checkpoint(&back), bytes);
                assert_eq!(back.kind, kind);
                assert_eq!(back.mix, s.mix);
                assert_eq!(back.options, s.options);
                for (a, b) in back.encoder.params().iter().zip(s.encoder.params()) {
                    assert_eq!(a.shape(), b.shape());
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert_eq!(*x, *y as f32 as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let s = make(FrameworkKind::Byol, BackboneSpec::Mlp { input: 6, hidden: vec![5] });
        let mut bytes = save_checkpoint(&s);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(load_checkpoint(&bytes), Err(Error::Checksum { .. })));
        assert!(load_checkpoint(b"NOTACKPT0000").is_err());
        let good = save_checkpoint(&s);
        assert!(load_checkpoint(&good[..good.len() - 9]).is_err());
    }
}
