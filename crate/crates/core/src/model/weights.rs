//! Named parameter store and the `SVW1` weight file.
//!
//! File layout (all text lines end in `\n`):
//!
//! ```text
//! SVW1
//! arch <key=value ...> | arch none
//! blob_bytes=<n> crc32=<8 hex digits> tensors=<count>
//! <name> f32 <d0>x<d1>x... <byte offset>      (one line per tensor, sorted by name)
//! end
//! <blob: little-endian f32 tensors, back to back in manifest order>
//! ```
//!
//! The CRC-32 (IEEE) covers the blob. Offsets must be contiguous and the
//! blob length must match the manifest exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::ArchitectureConfig;

pub const FORMAT_VERSION: &str = "SVW1";

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("i/o error on weight file: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown weight format version {0:?} (expected {FORMAT_VERSION})")]
    UnknownVersion(String),
    #[error("checksum mismatch: manifest says {expected:08x}, blob hashes to {found:08x}")]
    Checksum { expected: u32, found: u32 },
    #[error("missing layer {0}")]
    MissingLayer(String),
    #[error("unexpected layer {0}")]
    UnexpectedLayer(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed weight file: {0}")]
    Malformed(String),
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, WeightError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(WeightError::Malformed(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Immutable map from layer parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    config: Option<ArchitectureConfig>,
    params: BTreeMap<String, ParamTensor>,
}

impl ModelWeights {
    pub fn new(config: Option<ArchitectureConfig>, params: BTreeMap<String, ParamTensor>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> Option<&ArchitectureConfig> {
        self.config.as_ref()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, ParamTensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, ParamTensor> {
        &mut self.params
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ParamTensor) {
        self.params.insert(name.into(), t);
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape.clone()))
            .collect()
    }

    fn blob(&self) -> Vec<u8> {
        let n: usize = self.params.values().map(|t| t.data.len()).sum();
        let mut blob = Vec::with_capacity(n * 4);
        for t in self.params.values() {
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    /// CRC-32 of the serialized tensor blob.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.blob())
    }

    /// Checks that the store holds exactly `expected`, with matching shapes.
    pub fn validate_manifest(&self, expected: &[(String, Vec<usize>)]) -> Result<(), WeightError> {
        let mut wanted: BTreeMap<&str, &Vec<usize>> = BTreeMap::new();
        for (name, shape) in expected {
            wanted.insert(name, shape);
        }
        for (name, shape) in &wanted {
            match self.params.get(*name) {
                None => return Err(WeightError::MissingLayer(name.to_string())),
                Some(t) if &t.shape != *shape => {
                    return Err(WeightError::ShapeMismatch {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        found: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !wanted.contains_key(k.as_str())) {
            return Err(WeightError::UnexpectedLayer(extra.clone()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = self.blob();
        let mut out = Vec::with_capacity(blob.len() + 64 * (self.params.len() + 4));
        let arch = match &self.config {
            Some(c) => c.to_header(),
            None => "none".to_string(),
        };
        let mut header = format!(
            "{FORMAT_VERSION}\narch {arch}\nblob_bytes={} crc32={:08x} tensors={}\n",
            blob.len(),
            crc32fast::hash(&blob),
            self.params.len()
        );
        let mut offset = 0usize;
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name} f32 {} {offset}\n", dims.join("x")));
            offset += t.data.len() * 4;
        }
        header.push_str("end\n");
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightError> {
        let mut lines = HeaderLines { bytes, pos: 0 };
        let version = lines.next_line()?;
        if version != FORMAT_VERSION {
            return Err(WeightError::UnknownVersion(version.to_string()));
        }
        let arch_line = lines.next_line()?;
        let arch = arch_line
            .strip_prefix("arch ")
            .ok_or_else(|| malformed("missing arch line"))?;
        let config = if arch == "none" {
            None
        } else {
            Some(ArchitectureConfig::from_header(arch).map_err(WeightError::Malformed)?)
        };

        let summary = lines.next_line()?;
        let fields = parse_kv(summary)?;
        let blob_bytes = kv_usize(&fields, "blob_bytes")?;
        let count = kv_usize(&fields, "tensors")?;
        let crc_text = fields
            .get("crc32")
            .ok_or_else(|| malformed("missing crc32"))?;
        if crc_text.len() != 8 || !crc_text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(malformed("crc32 must be 8 lowercase hex digits"));
        }
        let expected_crc =
            u32::from_str_radix(crc_text, 16).map_err(|_| malformed("bad crc32 value"))?;

        let mut entries = Vec::with_capacity(count);
        let mut next_offset = 0usize;
        for _ in 0..count {
            let line = lines.next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 {
                return Err(malformed(&format!("bad manifest line {line:?}")));
            }
            let (name, dtype, dims, offset) = (parts[0], parts[1], parts[2], parts[3]);
            if dtype != "f32" {
                return Err(malformed(&format!("unsupported dtype {dtype:?} for {name}")));
            }
            let shape = dims
                .split('x')
                .map(parse_decimal)
                .collect::<Result<Vec<_>, _>>()?;
            let offset = parse_decimal(offset)?;
            if offset != next_offset {
                return Err(malformed(&format!(
                    "{name}: offset {offset} breaks contiguity (expected {next_offset})"
                )));
            }
            let n: usize = shape.iter().product();
            next_offset += n * 4;
            entries.push((name.to_string(), shape, offset));
        }
        if lines.next_line()? != "end" {
            return Err(malformed("manifest not terminated by 'end'"));
        }
        let blob = &bytes[lines.pos..];
        if blob.len() != blob_bytes || next_offset != blob_bytes {
            return Err(malformed(&format!(
                "blob is {} bytes, header says {blob_bytes}, manifest covers {next_offset}",
                blob.len()
            )));
        }
        let found_crc = crc32fast::hash(blob);
        if found_crc != expected_crc {
            return Err(WeightError::Checksum {
                expected: expected_crc,
                found: found_crc,
            });
        }

        let mut params = BTreeMap::new();
        let mut prev: Option<String> = None;
        for (name, shape, offset) in entries {
            if prev.as_ref().is_some_and(|p| p >= &name) {
                return Err(malformed(&format!("manifest not sorted or duplicate at {name}")));
            }
            let n: usize = shape.iter().product();
            let data = blob[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            prev = Some(name.clone());
            params.insert(name, ParamTensor { shape, data });
        }
        let weights = Self { config, params };
        if let Some(cfg) = &weights.config {
            weights.validate_manifest(&cfg.manifest())?;
        }
        Ok(weights)
    }
}

fn malformed(msg: &str) -> WeightError {
    WeightError::Malformed(msg.to_string())
}

/// Canonical decimal only, so every header has exactly one spelling.
fn parse_decimal(s: &str) -> Result<usize, WeightError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return Err(malformed(&format!("expected a decimal number, got {s:?}")));
    }
    s.parse().map_err(|_| malformed(&format!("number out of range: {s:?}")))
}

fn parse_kv(line: &str) -> Result<BTreeMap<&str, &str>, WeightError> {
    line.split(' ')
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| malformed(&format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

fn kv_usize(fields: &BTreeMap<&str, &str>, key: &str) -> Result<usize, WeightError> {
    parse_decimal(
        fields
            .get(key)
            .ok_or_else(|| malformed(&format!("missing {key}")))?,
    )
}

struct HeaderLines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderLines<'a> {
    fn next_line(&mut self) -> Result<&'a str, WeightError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(4096)
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("truncated header"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(line)
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<(), WeightError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&weights.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights, WeightError> {
    ModelWeights::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelWeights {
        let mut w = ModelWeights::default();
        w.insert("a.weight", ParamTensor::new(vec![2, 1, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 7.25]).unwrap());
        w.insert("a.bias", ParamTensor::new(vec![2], vec![0.5, f32::MIN_POSITIVE]).unwrap());
        w
    }

    #[test]
    fn bytes_round_trip() {
        let w = small();
        let back = ModelWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.checksum(), w.checksum());
        // -0.0 survives bit-exactly
        assert_eq!(back.get("a.weight").unwrap().data[4].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn version_and_checksum_errors_are_distinct() {
        let mut bytes = small().to_bytes();
        bytes[3] = b'2';
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(WeightError::UnknownVersion(_))));

        let mut bytes = small().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(WeightError::Checksum { .. })));
    }

    #[test]
    fn manifest_validation_names_layer() {
        let w = small();
        let mut expected = w.manifest();
        expected.push(("b.weight".into(), vec![1]));
        match w.validate_manifest(&expected) {
            Err(WeightError::MissingLayer(name)) => assert_eq!(name, "b.weight"),
            other => panic!("unexpected {other:?}"),
        }
        let expected = vec![("a.weight".to_string(), vec![2, 1, 3])];
        assert!(matches!(w.validate_manifest(&expected), Err(WeightError::UnexpectedLayer(n)) if n == "a.bias"));
        let expected = vec![
            ("a.weight".to_string(), vec![1, 2, 3]),
            ("a.bias".to_string(), vec![2]),
        ];
        assert!(matches!(w.validate_manifest(&expected), Err(WeightError::ShapeMismatch { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = small().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(ModelWeights::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
