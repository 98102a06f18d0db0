//! Binary proposal file.
//!
//! Little-endian layout: `"VMF1" | u32 version | u32 d | u64 count`, then per
//! image `u32 id_len | id | u32 P | u8 has_objectness | P×4 f32 boxes |
//! P×d f32 features | [P f32 objectness]`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::ProposalSet;
use crate::error::{Error, Result};
use crate::eval::BBox;

pub const MAGIC: [u8; 4] = *b"VMF1";
pub const FORMAT_VERSION: u32 = 1;

/// Write `sets` in file order. Values are stored as `f32`.
pub fn write_proposals(sets: &[ProposalSet], path: &Path) -> Result<()> {
    let d = sets.first().map_or(0, ProposalSet::dim);
    let mut seen = BTreeSet::new();
    for set in sets {
        if set.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: set.dim(),
            });
        }
        set.validate()?;
        if !seen.insert(set.image_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate image id `{}`",
                set.image_id
            )));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(sets.len() as u64).to_le_bytes())?;
    for set in sets {
        let id = set.image_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(set.len() as u32).to_le_bytes())?;
        w.write_all(&[set.objectness.is_some() as u8])?;
        let put = |w: &mut BufWriter<fs::File>, v: f64| w.write_all(&(v as f32).to_le_bytes());
        for b in &set.boxes {
            for &v in &b.0 {
                put(&mut w, v)?;
            }
        }
        for &v in set.features.iter() {
            put(&mut w, v)?;
        }
        if let Some(obj) = &set.objectness {
            for &v in obj {
                put(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all records, or only `image_ids` (returned in file order).
pub fn read_proposals(path: &Path, image_ids: Option<&[&str]>) -> Result<Vec<ProposalSet>> {
    let reader = ProposalReader::open(path)?;
    match image_ids {
        None => reader.ids().map(|id| reader.get(id)).collect(),
        Some(ids) => {
            for id in ids {
                if !reader.contains(id) {
                    return Err(Error::UnknownImage(id.to_string()));
                }
            }
            let wanted: BTreeSet<&str> = ids.iter().copied().collect();
            reader
                .ids()
                .filter(|id| wanted.contains(id))
                .map(|id| reader.get(id))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    offset: usize,
    count: usize,
    has_objectness: bool,
}

/// Proposal file held in memory with a per-image offset index; records are
/// decoded on access.
#[derive(Debug)]
pub struct ProposalReader {
    bytes: Vec<u8>,
    dim: usize,
    order: Vec<String>,
    entries: HashMap<String, Entry>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl ProposalReader {
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut c = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = c.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = c.u32("header")? as usize;
        let count = c.u64("header")?;
        if count > 0 && dim < 2 {
            return Err(Error::Validation(format!("feature dimension {dim} < 2")));
        }
        let mut order = Vec::new();
        let mut entries = HashMap::new();
        for k in 0..count {
            let what = format!("record {k}");
            let id_len = c.u32(&what)? as usize;
            let id = std::str::from_utf8(c.take(id_len, &what)?)
                .map_err(|_| Error::Validation(format!("{what}: image id is not UTF-8")))?
                .to_string();
            let p = c.u32(&what)? as usize;
            let has_objectness = match c.take(1, &what)?[0] {
                0 => false,
                1 => true,
                v => return Err(Error::Validation(format!("{what}: objectness flag {v}"))),
            };
            let floats = p
                .checked_mul(4 + dim + has_objectness as usize)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Truncated(what.clone()))?;
            let offset = c.pos;
            c.take(floats, &what)?;
            if entries
                .insert(
                    id.clone(),
                    Entry {
                        offset,
                        count: p,
                        has_objectness,
                    },
                )
                .is_some()
            {
                return Err(Error::Validation(format!("duplicate image id `{id}`")));
            }
            order.push(id);
        }
        if c.pos != bytes.len() {
            return Err(Error::Validation(format!(
                "{} trailing bytes",
                bytes.len() - c.pos
            )));
        }
        Ok(Self {
            bytes,
            dim,
            order,
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Image ids in file order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.contains_key(image_id)
    }

    /// Decode and validate one image's proposals.
    pub fn get(&self, image_id: &str) -> Result<ProposalSet> {
        let e = *self
            .entries
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let mut floats = self.bytes[e.offset..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
        let mut next = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
        let boxes = next(4 * e.count)
            .chunks_exact(4)
            .map(|b| BBox([b[0], b[1], b[2], b[3]]))
            .collect();
        let features = Array2::from_shape_vec((e.count, self.dim), next(e.count * self.dim))
            .expect("record length checked at open");
        let objectness = e.has_objectness.then(|| Array1::from(next(e.count)));
        ProposalSet::new(image_id, boxes, features, objectness)
    }
}
