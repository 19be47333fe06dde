//! Binary checkpoint layout:
//!
//! ```text
//! "FMRCKPT1"                      8-byte magic, last byte is the format version
//! u32 LE header length
//! UTF-8 header                    key=value lines: format_version, free metadata,
//!                                 then one `layer=<name> <in> <out> <activation>` per layer
//! f64 LE tensors                  per layer: W row-major (out x in), then b
//! u32 LE CRC32 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Activation, DenseLayer, NetError, ParamSet};
use crate::util::atomic_write;

pub const MAGIC: &[u8; 8] = b"FMRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters plus free-form architecture metadata stored in the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: BTreeMap<String, String>,
}

pub fn encode_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    let mut header = format!("format_version={FORMAT_VERSION}\n");
    for (k, v) in &checkpoint.meta {
        debug_assert!(!k.contains('=') && !k.contains('\n') && !v.contains('\n') && k != "layer");
        header.push_str(&format!("{k}={v}\n"));
    }
    for l in checkpoint.params.layers() {
        header.push_str(&format!(
            "layer={} {} {} {}\n",
            l.name,
            l.layer.inputs(),
            l.layer.outputs(),
            l.activation
        ));
    }
    let mut out = Vec::with_capacity(16 + header.len() + 8 * checkpoint.params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in checkpoint.params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn malformed(msg: impl Into<String>) -> NetError {
    NetError::Malformed(msg.into())
}

struct LayerDecl {
    name: String,
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

fn parse_layer(decl: &str) -> Result<LayerDecl, NetError> {
    let fields: Vec<&str> = decl.split_whitespace().collect();
    let [name, inputs, outputs, act] = fields.as_slice() else {
        return Err(malformed(format!("bad layer declaration '{decl}'")));
    };
    let dim = |s: &str| s.parse::<usize>().map_err(|_| malformed(format!("bad width '{s}'")));
    Ok(LayerDecl {
        name: name.to_string(),
        inputs: dim(inputs)?,
        outputs: dim(outputs)?,
        activation: act.parse().map_err(malformed)?,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NetError> {
    if bytes.len() < MAGIC.len() || bytes[..7] != MAGIC[..7] {
        return Err(NetError::BadMagic);
    }
    if bytes[7] != MAGIC[7] {
        return Err(NetError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[7..8]).into_owned(),
            expected: FORMAT_VERSION,
        });
    }
    let body = &bytes[MAGIC.len()..];
    if body.len() < 8 {
        return Err(NetError::ChecksumMismatch);
    }
    let header_len = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as usize;
    let header_bytes = body.get(4..4 + header_len).ok_or(NetError::ChecksumMismatch)?;
    let header = std::str::from_utf8(header_bytes).ok();

    // the version is reported even when the rest of the file no longer verifies
    if let Some(found) = header.and_then(|h| h.lines().find_map(|l| l.strip_prefix("format_version="))) {
        if found.trim() != FORMAT_VERSION.to_string() {
            return Err(NetError::VersionMismatch {
                found: found.trim().to_string(),
                expected: FORMAT_VERSION,
            });
        }
    }

    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(NetError::ChecksumMismatch);
    }
    let header = header.ok_or_else(|| malformed("header is not UTF-8"))?;

    let mut meta = BTreeMap::new();
    let mut decls = Vec::new();
    let mut version_seen = false;
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("header line without '=': '{line}'")))?;
        match key {
            "format_version" => version_seen = true,
            "layer" => decls.push(parse_layer(value)?),
            _ => {
                meta.insert(key.to_string(), value.to_string());
            }
        }
    }
    if !version_seen {
        return Err(malformed("header has no format_version"));
    }

    let mut data = &payload[MAGIC.len() + 4 + header_len..];
    let expected: usize = decls.iter().map(|d| d.outputs * (d.inputs + 1)).sum();
    if data.len() != 8 * expected {
        return Err(malformed(format!(
            "tensor section holds {} bytes, header declares {}",
            data.len(),
            8 * expected
        )));
    }
    let mut take = |n: usize| -> Vec<f64> {
        let (head, rest) = data.split_at(8 * n);
        data = rest;
        head.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut params = ParamSet::new();
    for d in decls {
        let w = DMatrix::from_row_slice(d.outputs, d.inputs, &take(d.outputs * d.inputs));
        let b = DVector::from_vec(take(d.outputs));
        params.push(&d.name, DenseLayer { w, b }, d.activation)?;
    }
    Ok(Checkpoint { params, meta })
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), NetError> {
    atomic_write(path, &encode_checkpoint(checkpoint)).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut rng = seeded_rng(8);
        let mut params = ParamSet::init_stack("enc", &[3, 7, 5], Activation::Relu, Activation::Identity, &mut rng);
        for l in params.layers_mut() {
            l.layer.b = DVector::from_fn(l.layer.outputs(), |_, _| rng.random_range(-1.0..1.0));
        }
        let mut dec = ParamSet::init_stack("dec", &[5, 4, 6], Activation::LeakyRelu(0.01), Activation::Identity, &mut rng);
        for l in dec.layers_mut() {
            params.push(&l.name, l.layer.clone(), l.activation).unwrap();
        }
        let mut meta = BTreeMap::new();
        meta.insert("feature_dim".to_string(), "5".to_string());
        Checkpoint { params, meta }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        let a: Vec<u64> = ckpt.params.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
    }

    #[test]
    fn truncation_never_yields_params() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 4, 8, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, NetError::ChecksumMismatch | NetError::BadMagic),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn flipped_payload_byte_fails_the_checksum() {
        let mut bytes = encode_checkpoint(&sample());
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes), Err(NetError::ChecksumMismatch)));
    }

    #[test]
    fn bumped_versions_are_reported() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[7] = b'2';
        assert!(matches!(decode_checkpoint(&bytes), Err(NetError::VersionMismatch { .. })));

        let mut bytes = encode_checkpoint(&sample());
        let at = bytes.windows(16).position(|w| w == b"format_version=1").unwrap() + 15;
        bytes[at] = b'2';
        assert!(matches!(decode_checkpoint(&bytes), Err(NetError::VersionMismatch { .. })));
    }

    #[test]
    fn foreign_files_have_bad_magic() {
        assert!(matches!(decode_checkpoint(b"PK\x03\x04 zip"), Err(NetError::BadMagic)));
    }
}
