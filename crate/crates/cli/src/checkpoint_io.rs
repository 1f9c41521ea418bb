//! Checkpoint file format: versioned header (transformer config echo,
//! featurizer config, training-stage tag) followed by named tensor blocks,
//! little-endian f64.

use std::path::Path;

use crcrisk_core::featurizer::ExtractorConfig;
use crcrisk_core::linalg::Matrix;
use crcrisk_core::maskhit::{ModelParams, TransformerConfig};
use crcrisk_core::training::{Checkpoint, Stage};

use crate::error::{read_artifact, CliError, Result};

const MAGIC: &[u8; 4] = b"CRCK";
const VERSION: u32 = 1;

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = ckpt.params.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match ckpt.stage {
        Stage::Pretrained => 0,
        Stage::Intermediate => 1,
        Stage::Risk => 2,
    });
    out.extend_from_slice(&ckpt.extractor.seed.to_le_bytes());
    out.extend_from_slice(&(ckpt.extractor.out_dim as u32).to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.n_heads,
        cfg.model_dim,
        cfg.mlp_dim,
        cfg.feature_dim,
        cfg.max_slots,
        cfg.region_side,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.mask_ratio.to_le_bytes());
    let names = ckpt.params.names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, tensor) in names.iter().zip(ckpt.params.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CliError::Format("checkpoint: truncated".into()))?;
        self.pos += n;
        Ok(chunk)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CliError::Format("checkpoint: bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CliError::Format(format!(
            "checkpoint: version {version} unsupported (expected {VERSION})"
        )));
    }
    let stage = match c.u8()? {
        0 => Stage::Pretrained,
        1 => Stage::Intermediate,
        2 => Stage::Risk,
        other => return Err(CliError::Format(format!("checkpoint: bad stage tag {other}"))),
    };
    let extractor = ExtractorConfig { seed: c.u64()?, out_dim: c.u32()? as usize };
    let cfg = TransformerConfig {
        n_layers: c.u32()? as usize,
        n_heads: c.u32()? as usize,
        model_dim: c.u32()? as usize,
        mlp_dim: c.u32()? as usize,
        feature_dim: c.u32()? as usize,
        max_slots: c.u32()? as usize,
        region_side: c.u32()? as usize,
        mask_ratio: c.f64()?,
    };
    let mut params = ModelParams::init(cfg, 0).map_err(CliError::Core)?;
    let count = c.u32()? as usize;
    let expected = params.names();
    if count != expected.len() {
        return Err(CliError::Format(format!(
            "checkpoint: {count} tensors, expected {}",
            expected.len()
        )));
    }
    for expected_name in &expected {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CliError::Format("checkpoint: bad tensor name".into()))?;
        if name != expected_name {
            return Err(CliError::Format(format!(
                "checkpoint: tensor `{name}` out of order (expected `{expected_name}`)"
            )));
        }
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(c.f64()?);
        }
        params
            .set_tensor(name, Matrix::from_vec(rows, cols, data))
            .map_err(CliError::Core)?;
    }
    if c.pos != bytes.len() {
        return Err(CliError::Format("checkpoint: trailing bytes".into()));
    }
    Ok(Checkpoint { params, extractor, stage })
}

pub fn write(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&read_artifact(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 8,
            mlp_dim: 12,
            feature_dim: 6,
            max_slots: 9,
            region_side: 3,
            mask_ratio: 0.4,
        };
        Checkpoint {
            params: ModelParams::init(cfg, 7).unwrap(),
            extractor: ExtractorConfig { seed: 99, out_dim: 6 },
            stage: Stage::Intermediate,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ckpt = sample();
        let back = decode(&encode(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CliError::Format(_))));
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CliError::Format(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&sample()), encode(&sample()));
    }
}
