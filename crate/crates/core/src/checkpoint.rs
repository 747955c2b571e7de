//! Checkpoint container: a JSON config header followed by named f32 tensors.
//!
//! Layout (little-endian): magic `CHCK`, version u8, header length u32,
//! header JSON, tensor count u32, then per tensor in name order: name length
//! u16, name, trainable flag u8, rank u8, dims u32 each, values f32 each.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, FrozenModel};
use crate::error::{Error, Result};
use crate::saliency::{Saliency, SaliencyConfig};
use crate::strategy::TieringConfig;
use crate::tensor::{ParameterSet, Scalar, Tensor};
use crate::training::{ChordModel, Method};
use crate::wire::Reader;

const MAGIC: &[u8; 4] = b"CHCK";
const VERSION: u8 = 1;

/// Everything needed to rebuild a model apart from its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: BackboneConfig,
    pub saliency: SaliencyConfig,
    pub tiering: TieringConfig,
    pub method: Method,
    pub seed: u64,
    pub epochs_trained: usize,
    /// Hex sha256 of the frozen trunk.
    pub trunk_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn trunk_hash_hex<T: Scalar>(model: &FrozenModel<T>) -> String {
    hex(&model.trunk_hash())
}

fn write_set<T: Scalar>(out: &mut Vec<u8>, sets: &[&ParameterSet<T>]) -> Result<()> {
    let mut entries: Vec<(&str, &Tensor<T>, bool)> = sets.iter().flat_map(|s| s.iter()).collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t, trainable) in entries {
        if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Codec(format!(
                "tensor `{}` does not fit the container",
                name
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(trainable as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    Ok(())
}

/// Serialize a model; byte-identical for identical models.
pub fn to_bytes<T: Scalar>(
    model: &ChordModel<T>,
    method: &Method,
    seed: u64,
    epochs_trained: usize,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        backbone: model.backbone.config().clone(),
        saliency: model.saliency.config().clone(),
        tiering: model.tiering.clone(),
        method: method.clone(),
        seed,
        epochs_trained,
        trunk_hash: trunk_hash_hex(&model.backbone),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Codec(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    write_set(
        &mut out,
        &[
            model.backbone.trunk(),
            model.backbone.trainable(),
            model.saliency.params(),
        ],
    )?;
    Ok(out)
}

/// Parse a checkpoint and verify the stored trunk hash.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ChordModel<T>)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Codec("not a checkpoint (bad magic)".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Codec(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Codec(format!("checkpoint header: {}", e)))?;
    let count = r.u32()? as usize;
    let (mut trunk, mut trainable, mut hyper) = (
        ParameterSet::new(),
        ParameterSet::new(),
        ParameterSet::new(),
    );
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Codec("tensor name is not utf-8".into()))?
            .to_string();
        let flag = r.u8()?;
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        if numel * 4 > r.remaining() {
            return Err(Error::Codec(format!("tensor `{}` is truncated", name)));
        }
        let data: Vec<T> = (0..numel)
            .map(|_| r.f32().map(|v| T::from_f32(v).unwrap_or_else(T::nan)))
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data)?;
        if flag == 0 {
            trunk.insert(name, t, false);
        } else if name.starts_with("gru.") || name.starts_with("hyper.") {
            hyper.insert(name, t, true);
        } else {
            trainable.insert(name, t, true);
        }
    }
    r.finish()?;
    let backbone = FrozenModel::from_parts(header.backbone.clone(), trunk, trainable)?;
    if trunk_hash_hex(&backbone) != header.trunk_hash {
        return Err(Error::IncompatibleStrategy(
            "checkpoint trunk does not match its recorded hash".into(),
        ));
    }
    let saliency =
        Saliency::from_parts(header.saliency.clone(), backbone.registry().clone(), hyper)?;
    header.tiering.validate()?;
    let model = ChordModel {
        backbone,
        saliency,
        tiering: header.tiering.clone(),
    };
    Ok((header, model))
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &ChordModel<T>,
    method: &Method,
    seed: u64,
    epochs_trained: usize,
) -> Result<()> {
    let bytes = to_bytes(model, method, seed, epochs_trained)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ChordModel<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> ChordModel<f32> {
        let mut bb = BackboneConfig::caser(25);
        bb.embedding_dim = 8;
        bb.horizontal_filters = 2;
        bb.vertical_filters = 1;
        let sal = SaliencyConfig {
            profile_dim: 4,
            hidden: 5,
            rank: 2,
            window: 3,
        };
        ChordModel::build(&bb, &sal, &TieringConfig::default(), seed).unwrap()
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let m = model(4);
        let a = to_bytes(&m, &Method::Chord, 4, 2).unwrap();
        assert_eq!(a, to_bytes(&model(4), &Method::Chord, 4, 2).unwrap());
        let (h, back) = from_bytes::<f32>(&a).unwrap();
        assert_eq!(h.seed, 4);
        assert_eq!(h.epochs_trained, 2);
        assert_eq!(back.backbone.trunk_hash(), m.backbone.trunk_hash());
        assert_eq!(
            back.saliency.params().content_hash(),
            m.saliency.params().content_hash()
        );
        assert_eq!(
            back.backbone.trainable().content_hash(),
            m.backbone.trainable().content_hash()
        );
        assert!(!back.backbone.trunk().iter().any(|(_, _, t)| t));
        assert_eq!(to_bytes(&back, &Method::Chord, 4, 2).unwrap(), a);
    }

    #[test]
    fn tampered_trunk_is_incompatible() {
        let m = model(4);
        let mut bytes = to_bytes(&m, &Method::Chord, 4, 0).unwrap();
        let name = m.backbone.trunk().names().next().unwrap().to_string();
        let mut tag = (name.len() as u16).to_le_bytes().to_vec();
        tag.extend_from_slice(name.as_bytes());
        let pos = bytes
            .windows(tag.len())
            .position(|w| w == tag.as_slice())
            .unwrap()
            + tag.len();
        let rank = bytes[pos + 1] as usize;
        let value_at = pos + 2 + 4 * rank + 3;
        bytes[value_at] ^= 0x40;
        assert!(matches!(
            from_bytes::<f32>(&bytes),
            Err(Error::IncompatibleStrategy(_))
        ));
        assert!(matches!(
            from_bytes::<f32>(&bytes[..10]),
            Err(Error::Codec(_))
        ));
    }
}
