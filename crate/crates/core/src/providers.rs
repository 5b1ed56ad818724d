//! Pluggable sources of per-item modality embeddings: a deterministic
//! hash-seeded mock and a file-backed table.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// The four supported modalities, in feature-block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModalityKind {
    Text,
    Image,
    Video,
    Audio,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] = [
        ModalityKind::Text,
        ModalityKind::Image,
        ModalityKind::Video,
        ModalityKind::Audio,
    ];

    pub fn index(self) -> usize {
        match self {
            ModalityKind::Text => 0,
            ModalityKind::Image => 1,
            ModalityKind::Video => 2,
            ModalityKind::Audio => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::Text => "text",
            ModalityKind::Image => "img",
            ModalityKind::Video => "video",
            ModalityKind::Audio => "audio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown modality '{s}'")))
    }
}

/// Source of fixed-dimension item embeddings. `None` means the modality is
/// missing for that item, which is distinct from a zero vector.
pub trait EmbeddingProvider {
    fn embedding(&self, item_id: &str, kind: ModalityKind) -> Option<Vec<f64>>;
    fn dim(&self, kind: ModalityKind) -> usize;
}

/// Per-modality embedding widths for a provider.
#[derive(Clone, Copy, Debug)]
pub struct ModalityDims {
    pub text: usize,
    pub img: usize,
    pub video: usize,
    pub audio: usize,
}

impl ModalityDims {
    pub fn get(&self, kind: ModalityKind) -> usize {
        match kind {
            ModalityKind::Text => self.text,
            ModalityKind::Image => self.img,
            ModalityKind::Video => self.video,
            ModalityKind::Audio => self.audio,
        }
    }
}

pub(crate) fn hash_str(seed: u64, s: &str) -> u64 {
    // FNV-1a folded with the seed; only has to be stable and well mixed.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic provider: the embedding for (item, kind) is a unit-normalized
/// Gaussian vector drawn from a generator seeded by a hash of the inputs.
#[derive(Debug)]
pub struct MockProvider {
    seed: u64,
    dims: ModalityDims,
}

impl MockProvider {
    pub fn new(seed: u64, dims: ModalityDims) -> Self {
        Self { seed, dims }
    }

    fn raw(&self, item_id: &str, kind: ModalityKind) -> Vec<f64> {
        let h = hash_str(self.seed, item_id).wrapping_add(0x9E37 * (kind.index() as u64 + 1));
        let mut rng = Rng::new(h);
        let d = self.dims.get(kind);
        (0..d).map(|_| rng.next_normal()).collect()
    }
}

/// Scale a vector to unit L2 norm. Zero vectors are left unchanged.
pub fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

impl EmbeddingProvider for MockProvider {
    fn embedding(&self, item_id: &str, kind: ModalityKind) -> Option<Vec<f64>> {
        let mut v = self.raw(item_id, kind);
        unit_normalize(&mut v);
        Some(v)
    }

    fn dim(&self, kind: ModalityKind) -> usize {
        self.dims.get(kind)
    }
}

/// Lookup provider backed by an embedding-table file. Each line is
/// `item_id<TAB>kind<TAB>v1,v2,...,vd`; absent entries are missing.
#[derive(Debug)]
pub struct FileProvider {
    table: HashMap<(String, ModalityKind), Vec<f64>>,
    dims: ModalityDims,
}

impl FileProvider {
    pub fn load(path: &Path, dims: ModalityDims) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let item = fields.next().filter(|s| !s.is_empty()).ok_or(Error::Parse {
                line: lineno,
                message: "missing item id".into(),
            })?;
            let kind_str = fields.next().ok_or(Error::Parse {
                line: lineno,
                message: "missing modality kind".into(),
            })?;
            let kind = ModalityKind::parse(kind_str).map_err(|_| Error::Parse {
                line: lineno,
                message: format!("unknown modality '{kind_str}'"),
            })?;
            let values_str = fields.next().ok_or(Error::Parse {
                line: lineno,
                message: "missing embedding values".into(),
            })?;
            if fields.next().is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "too many fields".into(),
                });
            }
            let values: Vec<f64> = values_str
                .split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("bad float '{v}'"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != dims.get(kind) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!(
                        "{} embedding has dimension {}, expected {}",
                        kind.as_str(),
                        values.len(),
                        dims.get(kind)
                    ),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: lineno,
                    message: "non-finite embedding value".into(),
                });
            }
            table.insert((item.to_string(), kind), values);
        }
        Ok(Self { table, dims })
    }

    /// Write a table in the same format this provider reads.
    pub fn write_table(
        path: &Path,
        rows: &[(String, ModalityKind, Vec<f64>)],
    ) -> Result<()> {
        let mut out = String::new();
        for (item, kind, values) in rows {
            let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{item}\t{}\t{}\n", kind.as_str(), joined.join(",")));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

impl EmbeddingProvider for FileProvider {
    fn embedding(&self, item_id: &str, kind: ModalityKind) -> Option<Vec<f64>> {
        self.table.get(&(item_id.to_string(), kind)).cloned()
    }

    fn dim(&self, kind: ModalityKind) -> usize {
        self.dims.get(kind)
    }
}
