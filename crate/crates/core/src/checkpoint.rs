//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SKPR"
//! 4       4     format version (u32 LE) = 1
//! 8       4     header length N (u32 LE)
//! 12      4     CRC-32 (IEEE) of bytes 16.. (header and tensor data)
//! 16      N     header: UTF-8 JSON object, keys sorted
//! 16+N    ...   tensor data: f32 LE, row-major, in directory order
//! ```
//!
//! The header holds `config`, `prune` (per-stage lists of block prune
//! states), `frozen_stages`, and `tensors`: a list of
//! `{name, shape, offset, length}` sorted by name, with offsets relative to
//! the start of the tensor data and packed without gaps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockPruneState, Model, ModelConfig};
use crate::nn::Tensor;

pub const MAGIC: [u8; 4] = *b"SKPR";
pub const VERSION: u32 = 1;
pub const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    prune: Vec<Vec<BlockPruneState>>,
    frozen_stages: BTreeSet<usize>,
    tensors: Vec<TensorEntry>,
}

fn header_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .params()
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                length: 4 * t.numel(),
            };
            offset += e.length;
            e
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        prune: model.prune_states().to_vec(),
        frozen_stages: model.frozen_stages().clone(),
        tensors,
    };
    // Going through Value sorts every object's keys.
    Ok(serde_json::to_vec(&serde_json::to_value(&header)?)?)
}

/// Serializes `model`. Identical models give identical bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = header_bytes(model)?;
    let data_len: usize = 4 * model.count_params();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + data_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::format("header", "header exceeds 4 GiB"))?.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&header);
    for t in model.params().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[PREAMBLE_LEN..]);
    out[12..16].copy_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Bytes taken by everything except tensor data.
pub fn header_len(model: &Model) -> Result<usize> {
    Ok(PREAMBLE_LEN + header_bytes(model)?.len())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::format(
            "preamble",
            format!("truncated: {} of {PREAMBLE_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format("magic", format!("expected SKPR, found {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let hlen = u32_at(bytes, 8) as usize;
    let body = &bytes[PREAMBLE_LEN..];
    if body.len() < hlen {
        return Err(Error::format(
            "header",
            format!("truncated: {} of {hlen} bytes", body.len()),
        ));
    }
    let header: std::result::Result<Header, _> = serde_json::from_slice(&body[..hlen]);
    let data = &body[hlen..];
    if let Ok(h) = &header {
        let want: usize = h.tensors.iter().map(|e| e.length).sum();
        if data.len() != want {
            return Err(Error::format(
                "tensor data",
                format!("expected {want} bytes, found {}", data.len()),
            ));
        }
    }
    let stored = u32_at(bytes, 12);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            "checksum",
            format!("stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let header = header.map_err(|e| Error::format("header", e.to_string()))?;

    let mut params = BTreeMap::new();
    let mut expect_offset = 0;
    let mut last: Option<&str> = None;
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expect_offset || e.length != 4 * numel || last.is_some_and(|l| l >= e.name.as_str()) {
            return Err(Error::format("directory", format!("bad entry for {}", e.name)));
        }
        last = Some(&e.name);
        expect_offset += e.length;
        let values = data[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    Model::from_parts(header.config, params, header.prune, header.frozen_stages)
        .map_err(|e| Error::format("header", e.to_string()))
}

/// Writes the checkpoint and returns its byte length.
pub fn save(model: &Model, path: &Path) -> Result<usize> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockId;
    use crate::surgery;

    fn model(seed: u64) -> Model {
        Model::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(3);
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), m);
        assert_eq!(bytes, to_bytes(&m).unwrap());
    }

    #[test]
    fn pruned_and_frozen_models_round_trip() {
        let mut m = model(1);
        surgery::prune_heads(&mut m, BlockId::new(0, 0), &[0, 1]).unwrap();
        surgery::prune_heads(&mut m, BlockId::new(1, 1), &[2]).unwrap();
        surgery::prune_mlp(&mut m, BlockId::new(1, 0), &[0, 3], 64).unwrap();
        m.freeze_stage(0).unwrap();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.frozen_stages().contains(&0));
    }

    #[test]
    fn length_is_header_plus_four_bytes_per_param() {
        let m = model(0);
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(bytes.len(), header_len(&m).unwrap() + 4 * m.count_params());
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(header_len(&m).unwrap(), PREAMBLE_LEN + hlen);
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        let keys: Vec<&String> = header.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["config", "frozen_stages", "prune", "tensors"]);
    }

    fn section(bytes: &[u8]) -> &'static str {
        match from_bytes(bytes) {
            Err(Error::Format { section, .. }) => section,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files_name_the_section() {
        let bytes = to_bytes(&model(0)).unwrap();
        assert_eq!(section(&bytes[..10]), "preamble");
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(section(&b), "magic");
        let mut b = bytes.clone();
        b[4] = 9;
        assert_eq!(section(&b), "version");
        assert_eq!(section(&bytes[..100]), "header");
        assert_eq!(section(&bytes[..bytes.len() - 4]), "tensor data");
    }

    #[test]
    fn any_flipped_body_byte_is_detected() {
        let bytes = to_bytes(&model(0)).unwrap();
        let step = (bytes.len() - PREAMBLE_LEN) / 97;
        for at in (PREAMBLE_LEN..bytes.len()).step_by(step.max(1)) {
            let mut b = bytes.clone();
            b[at] ^= 0x10;
            assert!(from_bytes(&b).is_err(), "flip at {at} went unnoticed");
        }
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.skpr");
        let m = model(2);
        let n = save(&m, &path).unwrap();
        assert_eq!(n as u64, std::fs::metadata(&path).unwrap().len());
        assert_eq!(load(&path).unwrap(), m);
        assert!(matches!(load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
