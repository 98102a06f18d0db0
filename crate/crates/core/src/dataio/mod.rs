//! Dataset representation: proposal sets, image records, the class catalog,
//! and the synthetic planted-truth generator.

mod format;
mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;

pub use format::{read_proposals, write_proposals, ProposalReader, FORMAT_VERSION, MAGIC};
pub use synthetic::{
    generate_synthetic, FullImageContext, PlantedTruth, SyntheticWorld, SyntheticWorldSpec,
};

/// Tolerance on the ℓ2 norm of stored feature rows.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Proposals of one image. Row 0 is the full-image proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    /// `P × d`, unit rows.
    pub features: Array2<f64>,
    pub objectness: Option<Array1<f64>>,
}

impl ProposalSet {
    pub fn new(
        image_id: impl Into<String>,
        boxes: Vec<BBox>,
        features: Array2<f64>,
        objectness: Option<Array1<f64>>,
    ) -> Result<Self> {
        let set = Self {
            image_id: image_id.into(),
            boxes,
            features,
            objectness,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature(&self, j: usize) -> ArrayView1<'_, f64> {
        self.features.row(j)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.image_id;
        let p = self.boxes.len();
        if p == 0 {
            return Err(Error::Validation(format!("image `{id}` has no proposals")));
        }
        if self.features.nrows() != p {
            return Err(Error::Validation(format!(
                "image `{id}`: {p} boxes but {} feature rows",
                self.features.nrows()
            )));
        }
        for (j, b) in self.boxes.iter().enumerate() {
            if !b.is_valid() {
                return Err(Error::Validation(format!(
                    "image `{id}` proposal {j}: invalid box {:?}",
                    b.0
                )));
            }
        }
        for (j, row) in self.features.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::Validation(format!(
                    "image `{id}` row {j}: feature norm {norm} is not 1"
                )));
            }
        }
        if let Some(obj) = &self.objectness {
            if obj.len() != p {
                return Err(Error::Validation(format!(
                    "image `{id}`: {} objectness values for {p} proposals",
                    obj.len()
                )));
            }
            if let Some(j) = obj.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "image `{id}` proposal {j}: objectness {} outside [0, 1]",
                    obj[j]
                )));
            }
        }
        Ok(())
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Image-level annotation, one manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub labels: Vec<String>,
    #[serde(default)]
    pub gt: Vec<GtBox>,
}

impl ImageRecord {
    pub fn has_label(&self, class: &str) -> bool {
        self.labels.iter().any(|l| l == class)
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.image_id;
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Validation(format!(
                "image `{id}`: non-positive extent"
            )));
        }
        let unique: BTreeSet<&String> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            return Err(Error::Validation(format!("image `{id}`: duplicate labels")));
        }
        for g in &self.gt {
            if !self.has_label(&g.label) {
                return Err(Error::Validation(format!(
                    "image `{id}`: gt box of `{}` not among its labels",
                    g.label
                )));
            }
            g.bbox.validate()?;
        }
        Ok(())
    }
}

/// Records plus the base/novel class catalog.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub records: Vec<ImageRecord>,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl DatasetIndex {
    pub fn new(
        records: Vec<ImageRecord>,
        base_classes: Vec<String>,
        novel_classes: Vec<String>,
    ) -> Result<Self> {
        let base: BTreeSet<&String> = base_classes.iter().collect();
        if let Some(c) = novel_classes.iter().find(|c| base.contains(c)) {
            return Err(Error::Validation(format!(
                "class `{c}` is both base and novel"
            )));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if by_id.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate image id `{}`",
                    r.image_id
                )));
            }
        }
        Ok(Self {
            records,
            base_classes,
            novel_classes,
            by_id,
        })
    }

    pub fn get(&self, image_id: &str) -> Result<&ImageRecord> {
        self.by_id
            .get(image_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn is_base(&self, class: &str) -> bool {
        self.base_classes.iter().any(|c| c == class)
    }

    pub fn is_novel(&self, class: &str) -> bool {
        self.novel_classes.iter().any(|c| c == class)
    }
}

/// On-disk dataset descriptor. Paths are relative to the descriptor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub proposals: PathBuf,
    pub manifest: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_manifest(records: &[ImageRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Index plus every image's proposals, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    proposals: HashMap<String, ProposalSet>,
}

impl Dataset {
    /// Pair records with proposal sets; each record needs exactly one set
    /// whose first box is the full image.
    pub fn new(index: DatasetIndex, sets: Vec<ProposalSet>) -> Result<Self> {
        let mut proposals = HashMap::with_capacity(sets.len());
        let mut dim = None;
        for set in sets {
            let record = index.get(&set.image_id)?;
            if set.boxes[0] != record.full_box() {
                return Err(Error::Validation(format!(
                    "image `{}`: proposal 0 {:?} is not the full image",
                    set.image_id, set.boxes[0].0
                )));
            }
            match dim {
                None => dim = Some(set.dim()),
                Some(d) if d != set.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: set.dim(),
                    })
                }
                _ => {}
            }
            if proposals.insert(set.image_id.clone(), set).is_some() {
                return Err(Error::Validation("duplicate proposal set".into()));
            }
        }
        if let Some(r) = index
            .records
            .iter()
            .find(|r| !proposals.contains_key(&r.image_id))
        {
            return Err(Error::Validation(format!(
                "image `{}` has no proposals",
                r.image_id
            )));
        }
        Ok(Self { index, proposals })
    }

    /// Load a dataset from its JSON descriptor.
    pub fn load(descriptor: &Path) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_reader(BufReader::new(fs::File::open(descriptor)?))?;
        let base = descriptor.parent().unwrap_or_else(|| Path::new("."));
        let records = read_manifest(&base.join(&file.manifest))?;
        let index = DatasetIndex::new(records, file.base_classes, file.novel_classes)?;
        let sets = read_proposals(&base.join(&file.proposals), None)?;
        Self::new(index, sets)
    }

    /// Write descriptor, manifest and proposal file into `dir`; returns the
    /// descriptor path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let file = DatasetFile {
            base_classes: self.index.base_classes.clone(),
            novel_classes: self.index.novel_classes.clone(),
            proposals: PathBuf::from("proposals.vmf"),
            manifest: PathBuf::from("manifest.jsonl"),
        };
        write_manifest(&self.index.records, &dir.join(&file.manifest))?;
        let sets: Vec<ProposalSet> = self
            .index
            .records
            .iter()
            .map(|r| self.proposals[&r.image_id].clone())
            .collect();
        write_proposals(&sets, &dir.join(&file.proposals))?;
        let path = dir.join("dataset.json");
        fs::write(&path, serde_json::to_string_pretty(&file)?)?;
        Ok(path)
    }

    pub fn proposals(&self, image_id: &str) -> Result<&ProposalSet> {
        self.proposals
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.proposals.values().next().map_or(0, ProposalSet::dim)
    }
}
