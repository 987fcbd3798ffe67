//! Binary checkpoint encoding for [`MlpDrift`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDAS"            4 bytes magic
//! version           u32 = 1
//! D, L              u32, u32
//! n_layers          u32   dense layers
//! widths            u32 × (n_layers + 1), input width first
//! embed_dim         u32
//! activation        u8    0 = SiLU, 1 = identity
//! weights           f64 × ...
//! ```
//!
//! Weights are the normaliser (`shift`, `scale`, `out_scale`, `D` values
//! each) followed by the flat parameter vector, each matrix row-major.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::{Activation, Architecture, MlpDrift, Normalizer};

pub const MAGIC: &[u8; 4] = b"FDAS";
pub const VERSION: u32 = 1;

pub fn encode(model: &MlpDrift) -> Vec<u8> {
    let arch = model.arch();
    let widths = arch.widths();
    let norm = model.normalizer();
    let n_weights = 3 * arch.state_dim + model.params().len();
    let mut out = Vec::with_capacity(4 + 4 * (5 + widths.len()) + 1 + 8 * n_weights);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        arch.state_dim as u32,
        arch.cond_len as u32,
        arch.dense_layers() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in &widths {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(arch.embed_dim as u32).to_le_bytes());
    out.push(arch.activation.id());
    for v in norm
        .shift
        .iter()
        .chain(&norm.scale)
        .chain(&norm.out_scale)
        .chain(model.params())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(alloc::format!(
                    "truncated checkpoint: need {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("weight count overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<MlpDrift> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::Format("file too short for magic".into()))?
        != MAGIC
    {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(alloc::format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let l = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Format(alloc::format!("implausible layer count {n_layers}")));
    }
    let widths = (0..=n_layers)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let embed_dim = r.u32()? as usize;
    let act_id = r.take(1)?[0];
    let activation =
        Activation::from_id(act_id).ok_or_else(|| Error::Format(alloc::format!("unknown activation id {act_id}")))?;
    let hidden_width = if n_layers > 1 { widths[1] } else { 0 };
    let arch = Architecture {
        state_dim: d,
        cond_len: l,
        hidden_layers: n_layers - 1,
        hidden_width,
        embed_dim,
        activation,
    };
    arch.validate().map_err(|e| Error::Format(alloc::format!("{e}")))?;
    if arch.widths() != widths {
        return Err(Error::Format(alloc::format!(
            "layer widths {widths:?} inconsistent with D={d}, L={l}, embed_dim={embed_dim}"
        )));
    }
    let norm = Normalizer {
        shift: r.f64s(d)?,
        scale: r.f64s(d)?,
        out_scale: r.f64s(d)?,
    };
    let params = r.f64s(arch.param_count())?;
    if r.pos != bytes.len() {
        return Err(Error::Format(alloc::format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    MlpDrift::from_parts(arch, norm, params).map_err(|e| match e {
        Error::NonFinite(_) | Error::InvalidConfig(_) => Error::Format(alloc::format!("{e}")),
        other => other,
    })
}

/// Decodes and checks the result against the architecture a run expects.
pub fn decode_for(bytes: &[u8], expected: &Architecture) -> Result<MlpDrift> {
    let model = decode(bytes)?;
    model.check_compatible(expected)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn model(d: usize) -> MlpDrift {
        let arch = Architecture {
            state_dim: d,
            cond_len: 1,
            hidden_layers: 2,
            hidden_width: 8,
            embed_dim: 4,
            activation: Activation::Silu,
        };
        let mut m = MlpDrift::init(arch, Normalizer::identity(d), &mut RngStream::new(2).rng()).unwrap();
        m.params_mut()[3] = -0.0;
        let (_, b) = m.dense_layer_mut(2);
        b[0] = 1.0 / 3.0;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(3);
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.arch(), m.arch());
        let bits = |x: &MlpDrift| x.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back.normalizer(), m.normalizer());
    }

    #[test]
    fn header_fields() {
        let bytes = encode(&model(3));
        assert_eq!(&bytes[..4], b"FDAS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode(&model(3));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = encode(&model(3));
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let bytes = encode(&model(3));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Format(_))));
    }

    #[test]
    fn loading_into_other_system_is_a_shape_mismatch() {
        let lorenz = model(3);
        let dw = model(1);
        assert!(matches!(
            decode_for(&encode(&lorenz), dw.arch()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
