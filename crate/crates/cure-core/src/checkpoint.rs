//! Checkpoint serialization.
//!
//! Layout: magic bytes `CUREckpt`, little-endian u32 version (1), u32 header
//! length, a UTF-8 text header describing the architecture, the per-layer
//! parameter blobs as little-endian IEEE-754 arrays in layer order (weights
//! then bias), and a trailing u32 CRC-32 of all preceding bytes.

use crate::error::{CureError, Result};
use crate::network::{ConvGeom, Layer, Network};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CUREckpt";
pub const VERSION: u32 = 1;

/// Element width of the stored parameter blobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

fn header_text(net: &Network, precision: Precision) -> String {
    let mut out = String::new();
    out.push_str("input");
    for d in net.input_shape() {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    out.push_str(&format!("classes {}\n", net.num_classes()));
    out.push_str(&format!("precision {}\n", precision.name()));
    for layer in net.layers() {
        match layer {
            Layer::Affine {
                in_dim, out_dim, ..
            } => out.push_str(&format!("affine {in_dim} {out_dim}\n")),
            Layer::Conv2d { geom, .. } => out.push_str(&format!(
                "conv2d {} {} {} {} {} {} {}\n",
                geom.in_channels,
                geom.in_h,
                geom.in_w,
                geom.out_channels,
                geom.kernel,
                geom.stride,
                geom.padding
            )),
            Layer::ReLU => out.push_str("relu\n"),
            Layer::Flatten => out.push_str("flatten\n"),
        }
    }
    out
}

fn parse_header(text: &str) -> Result<(Network, Precision)> {
    let mut input_shape: Option<Vec<usize>> = None;
    let mut classes: Option<usize> = None;
    let mut precision = Precision::F64;
    let mut layers = Vec::new();
    let parse_nums = |toks: &[&str], n: usize, line: &str| -> Result<Vec<usize>> {
        if toks.len() != n {
            return Err(CureError::HeaderParse(format!(
                "expected {n} fields in '{line}'"
            )));
        }
        toks.iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| CureError::HeaderParse(format!("bad integer '{t}' in '{line}'")))
            })
            .collect()
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "input" => {
                if toks.len() < 2 {
                    return Err(CureError::HeaderParse("empty input shape".to_string()));
                }
                input_shape = Some(parse_nums(&toks[1..], toks.len() - 1, line)?);
            }
            "classes" => classes = Some(parse_nums(&toks[1..], 1, line)?[0]),
            "precision" => {
                precision = match toks.get(1) {
                    Some(&"f64") => Precision::F64,
                    Some(&"f32") => Precision::F32,
                    other => {
                        return Err(CureError::HeaderParse(format!(
                            "unknown precision {other:?}"
                        )))
                    }
                };
            }
            "affine" => {
                let v = parse_nums(&toks[1..], 2, line)?;
                layers.push(Layer::affine(v[0], v[1]));
            }
            "conv2d" => {
                let v = parse_nums(&toks[1..], 7, line)?;
                layers.push(Layer::conv2d(ConvGeom {
                    in_channels: v[0],
                    in_h: v[1],
                    in_w: v[2],
                    out_channels: v[3],
                    kernel: v[4],
                    stride: v[5],
                    padding: v[6],
                }));
            }
            "relu" => layers.push(Layer::ReLU),
            "flatten" => layers.push(Layer::Flatten),
            other => {
                return Err(CureError::HeaderParse(format!("unknown layer '{other}'")));
            }
        }
    }
    let input_shape =
        input_shape.ok_or_else(|| CureError::HeaderParse("missing input shape".to_string()))?;
    let classes =
        classes.ok_or_else(|| CureError::HeaderParse("missing class count".to_string()))?;
    let net = Network::new(input_shape, layers, classes)?;
    Ok((net, precision))
}

fn encode_params(net: &Network, precision: Precision, out: &mut Vec<u8>) {
    for layer in net.layers() {
        let (weight, bias): (&[f64], &[f64]) = match layer {
            Layer::Affine { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => {
                (weight, bias)
            }
            _ => continue,
        };
        for v in weight.iter().chain(bias) {
            match precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
    }
}

/// Serialize a network in double precision.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    save_checkpoint_with(net, path, Precision::F64)
}

/// Serialize a network with an explicit storage precision.
pub fn save_checkpoint_with(net: &Network, path: &Path, precision: Precision) -> Result<()> {
    let bytes = encode(net, precision);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Encode a checkpoint into a byte buffer.
pub fn encode(net: &Network, precision: Precision) -> Vec<u8> {
    let header = header_text(net, precision);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    encode_params(net, precision, &mut out);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Load a checkpoint from disk.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Decode a checkpoint from a byte buffer.
pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 8 {
        return Err(CureError::Truncated("missing magic".to_string()));
    }
    if &bytes[..8] != MAGIC {
        return Err(CureError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CureError::Truncated("missing header fields".to_string()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CureError::VersionMismatch(version));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(CureError::Truncated("header shorter than declared".to_string()));
    }
    let header = std::str::from_utf8(&bytes[16..16 + header_len])
        .map_err(|e| CureError::HeaderParse(format!("header not UTF-8: {e}")))?;
    let (mut net, precision) = parse_header(header)?;
    let payload_len = net.param_count() * precision.width();
    let expected_total = 16 + header_len + payload_len + 4;
    if bytes.len() < expected_total {
        return Err(CureError::Truncated(format!(
            "expected {expected_total} bytes, found {}",
            bytes.len()
        )));
    }
    let crc_offset = expected_total - 4;
    let stored = u32::from_le_bytes(bytes[crc_offset..expected_total].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..crc_offset]);
    if stored != computed {
        return Err(CureError::CrcMismatch { stored, computed });
    }
    let mut cursor = 16 + header_len;
    for layer in net.layers_mut() {
        let (weight, bias) = crate::network::params_of_mut(layer);
        for v in weight.iter_mut().chain(bias.iter_mut()) {
            *v = match precision {
                Precision::F64 => {
                    let raw = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().expect("8"));
                    cursor += 8;
                    raw
                }
                Precision::F32 => {
                    let raw = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().expect("4"));
                    cursor += 4;
                    raw as f64
                }
            };
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InitScheme;

    fn sample_net() -> Network {
        Network::new(
            vec![1, 4, 4],
            vec![
                Layer::conv2d(ConvGeom {
                    in_channels: 1,
                    in_h: 4,
                    in_w: 4,
                    out_channels: 2,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                }),
                Layer::ReLU,
                Layer::Flatten,
                Layer::affine(8, 3),
            ],
            3,
        )
        .unwrap()
        .init(InitScheme::default(), 7)
    }

    #[test]
    fn roundtrip_is_identity() {
        let net = sample_net();
        let bytes = encode(&net, Precision::F64);
        let loaded = decode(&bytes).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn f32_roundtrip_is_identity_in_stored_precision() {
        let net = sample_net();
        let bytes = encode(&net, Precision::F32);
        let loaded = decode(&bytes).unwrap();
        // Saving the loaded network again must reproduce the same bytes.
        let bytes2 = encode(&loaded, Precision::F32);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupt_payload_byte_fails_crc() {
        let net = sample_net();
        let mut bytes = encode(&net, Precision::F64);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(decode(&bytes), Err(CureError::CrcMismatch { .. })));
    }

    #[test]
    fn wrong_magic_detected() {
        let net = sample_net();
        let mut bytes = encode(&net, Precision::F64);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CureError::BadMagic)));
    }

    #[test]
    fn wrong_version_detected() {
        let net = sample_net();
        let mut bytes = encode(&net, Precision::F64);
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(CureError::VersionMismatch(9))));
    }

    #[test]
    fn truncation_detected() {
        let net = sample_net();
        let bytes = encode(&net, Precision::F64);
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(cut), Err(CureError::Truncated(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net();
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(net, loaded);
    }
}
