//! Planted-truth synthetic world.
//!
//! Every image carries one class. Its positive proposals are vMF draws around
//! the class direction and share one canonical box; the rest are draws around
//! a global background direction placed on a disjoint grid of boxes. Proposal
//! 0 is the full image.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetIndex, GtBox, ImageRecord, ProposalSet};
use crate::directional::{normalize, sample_vmf, uniform_unit_vector, VmfParams};
use crate::error::{Error, Result};
use crate::eval::BBox;

/// What the full-image feature mixes with the mean of the positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullImageContext {
    /// A fresh uniform direction per image (scene context unrelated to any class).
    #[default]
    Uniform,
    /// The mean of the image's own background draws.
    BackgroundMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub d: usize,
    pub num_classes: usize,
    /// The first `num_base_classes` classes form the base split.
    pub num_base_classes: usize,
    pub kappa_class: f64,
    pub kappa_background: f64,
    /// Proposals per image, including the full image.
    pub proposals_per_image: usize,
    pub positives_per_image: usize,
    pub full_image_mix: f64,
    #[serde(default)]
    pub full_image_context: FullImageContext,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            d: 16,
            num_classes: 10,
            num_base_classes: 4,
            kappa_class: 50.0,
            kappa_background: 5.0,
            proposals_per_image: 20,
            positives_per_image: 1,
            full_image_mix: 0.6,
            full_image_context: FullImageContext::Uniform,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d < 2 {
            return bad(format!("d must be >= 2, got {}", self.d));
        }
        if self.num_classes == 0 || self.num_base_classes > self.num_classes {
            return bad(format!(
                "need num_classes >= 1 and num_base_classes <= num_classes, got {} / {}",
                self.num_classes, self.num_base_classes
            ));
        }
        for (name, k) in [
            ("kappa_class", self.kappa_class),
            ("kappa_background", self.kappa_background),
        ] {
            if !(k >= 0.0 && k.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {k}"));
            }
        }
        if self.positives_per_image == 0 || self.positives_per_image >= self.proposals_per_image {
            return bad(format!(
                "positives_per_image must be in [1, P), got {} with P = {}",
                self.positives_per_image, self.proposals_per_image
            ));
        }
        if !(0.0..=1.0).contains(&self.full_image_mix) {
            return bad(format!(
                "full_image_mix must be in [0, 1], got {}",
                self.full_image_mix
            ));
        }
        Ok(())
    }

    pub fn class_name(c: usize) -> String {
        format!("c{c:02}")
    }
}

/// Ground truth of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub spec: SyntheticWorldSpec,
    pub background_direction: Vec<f64>,
    pub class_directions: BTreeMap<String, Vec<f64>>,
    /// Positive proposal indices per image.
    pub positives: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dataset: Dataset,
    pub truth: PlantedTruth,
}

impl SyntheticWorld {
    /// Write the dataset plus `truth.json`; returns the descriptor path.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let descriptor = self.dataset.save(dir)?;
        let truth = dir.join("truth.json");
        fs::write(&truth, serde_json::to_string_pretty(&self.truth)?)?;
        Ok((descriptor, truth))
    }
}

const IMAGE_WIDTH: f64 = 1000.0;
const GRID_COLS: usize = 10;
const CELL: f64 = 70.0;
const TILE: f64 = 60.0;
const GRID_X0: f64 = 300.0;
const MARGIN: f64 = 40.0;

fn canonical_box() -> BBox {
    BBox::new(MARGIN, MARGIN, MARGIN + 200.0, MARGIN + 200.0)
}

fn background_box(k: usize) -> BBox {
    let (row, col) = ((k / GRID_COLS) as f64, (k % GRID_COLS) as f64);
    let x = GRID_X0 + CELL * col;
    let y = MARGIN + CELL * row;
    BBox::new(x, y, x + TILE, y + TILE)
}

fn image_height(num_background: usize) -> f64 {
    let rows = num_background.div_ceil(GRID_COLS) as f64;
    (MARGIN + CELL * rows).max(300.0)
}

/// Round to `f32` precision so the binary format stores values exactly.
fn to_f32_precision(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// Generate `images_per_class` images for each class.
pub fn generate_synthetic(
    spec: &SyntheticWorldSpec,
    images_per_class: usize,
) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d;
    let p = spec.proposals_per_image;
    let npos = spec.positives_per_image;
    let nbg = p - 1 - npos;

    let theta_bg = uniform_unit_vector(d, &mut rng);
    let bg = VmfParams::new(theta_bg.clone(), spec.kappa_background)?;
    let class_dirs: Vec<Array1<f64>> = (0..spec.num_classes)
        .map(|_| uniform_unit_vector(d, &mut rng))
        .collect();

    let height = image_height(p - 1);
    let mut records = Vec::new();
    let mut sets = Vec::new();
    let mut positives = BTreeMap::new();
    for (c, theta) in class_dirs.iter().enumerate() {
        let class = SyntheticWorldSpec::class_name(c);
        let fg = VmfParams::new(theta.clone(), spec.kappa_class)?;
        for i in 0..images_per_class {
            let image_id = format!("{class}_{i:04}");
            let mut pos_idx: Vec<usize> = sample(&mut rng, p - 1, npos)
                .into_iter()
                .map(|j| j + 1)
                .collect();
            pos_idx.sort_unstable();
            let pos = sample_vmf(&fg, npos, &mut rng);
            let neg = sample_vmf(&bg, nbg, &mut rng);

            let context = match spec.full_image_context {
                FullImageContext::Uniform => uniform_unit_vector(d, &mut rng),
                FullImageContext::BackgroundMean if nbg > 0 => neg.mean_axis(Axis(0)).unwrap(),
                FullImageContext::BackgroundMean => Array1::zeros(d),
            };
            let mix = spec.full_image_mix;
            let blend = pos.mean_axis(Axis(0)).unwrap() * mix + context * (1.0 - mix);
            let full = normalize(blend.view()).or_else(|_| normalize(theta.view()))?;

            let mut features = Array2::zeros((p, d));
            let mut boxes = Vec::with_capacity(p);
            features.row_mut(0).assign(&full);
            boxes.push(BBox::new(0.0, 0.0, IMAGE_WIDTH, height));
            let (mut next_pos, mut next_bg) = (0, 0);
            for j in 1..p {
                if pos_idx.contains(&j) {
                    features.row_mut(j).assign(&pos.row(next_pos));
                    boxes.push(canonical_box());
                    next_pos += 1;
                } else {
                    features.row_mut(j).assign(&neg.row(next_bg));
                    boxes.push(background_box(next_bg));
                    next_bg += 1;
                }
            }
            to_f32_precision(&mut features);

            sets.push(ProposalSet::new(image_id.clone(), boxes, features, None)?);
            records.push(ImageRecord {
                image_id: image_id.clone(),
                width: IMAGE_WIDTH,
                height,
                labels: vec![class.clone()],
                gt: vec![GtBox {
                    label: class.clone(),
                    bbox: canonical_box(),
                }],
            });
            positives.insert(image_id, pos_idx);
        }
    }

    let names: Vec<String> = (0..spec.num_classes)
        .map(SyntheticWorldSpec::class_name)
        .collect();
    let (base, novel) = names.split_at(spec.num_base_classes);
    let index = DatasetIndex::new(records, base.to_vec(), novel.to_vec())?;
    let truth = PlantedTruth {
        spec: spec.clone(),
        background_direction: theta_bg.to_vec(),
        class_directions: names
            .iter()
            .cloned()
            .zip(class_dirs.iter().map(|t| t.to_vec()))
            .collect(),
        positives,
    };
    Ok(SyntheticWorld {
        dataset: Dataset::new(index, sets)?,
        truth,
    })
}
