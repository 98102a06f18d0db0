//! MI-SVM knowledge-transfer baseline.
//!
//! A class-agnostic logistic objectness model is learned on base-class
//! proposals. For a target class, a linear SVM (squared hinge) alternates with
//! re-localization `argmax wᵀx + b + γ·O(x)` over each positive image, while
//! the hardest proposal of each negative image joins the negative pool.

use std::collections::BTreeSet;

use log::{debug, info};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::col::{argmax, sigmoid};
use crate::dataio::{Dataset, ProposalSet};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::eval::{iou_unchecked, Detection};
use crate::optim::{minimize, LbfgsConfig};
use crate::wsod::{detections_from_scores, negative_images, DetectConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub c_reg: f64,
}

impl LinearSvm {
    pub fn scores(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        if features.ncols() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                found: features.ncols(),
            });
        }
        Ok(features.dot(&ArrayView1::from(&self.w)) + self.b)
    }
}

/// Logistic objectness `O(x) = σ(w_oᵀx + b_o)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectnessScorer {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ObjectnessScorer {
    pub fn scores(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        if features.ncols() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                found: features.ncols(),
            });
        }
        Ok((features.dot(&ArrayView1::from(&self.w)) + self.b).mapv(sigmoid))
    }
}

/// Mean weighted squared hinge plus `c_reg‖w‖²/2`; `params = [w, b]`,
/// labels in {−1, +1}.
pub fn svm_objective(
    params: &Array1<f64>,
    x: ArrayView2<f64>,
    y: &[f64],
    weights: &[f64],
    c_reg: f64,
) -> (f64, Array1<f64>) {
    let d = x.ncols();
    let w = params.slice(s![..d]);
    let b = params[d];
    let total: f64 = weights.iter().sum();
    let mut f = 0.5 * c_reg * w.dot(&w);
    let mut grad = Array1::zeros(d + 1);
    grad.slice_mut(s![..d]).assign(&(&w * c_reg));
    for ((row, &yi), &si) in x.rows().into_iter().zip(y).zip(weights) {
        let margin = 1.0 - yi * (w.dot(&row) + b);
        if margin > 0.0 {
            f += si * margin * margin / total;
            let coef = -2.0 * si * margin * yi / total;
            grad.slice_mut(s![..d]).scaled_add(coef, &row);
            grad[d] += coef;
        }
    }
    (f, grad)
}

/// Train the SVM on weighted positives and a negative pool.
pub fn misvm_retrain(
    positives: ArrayView2<f64>,
    pos_weights: Option<&[f64]>,
    negatives: ArrayView2<f64>,
    c_reg: f64,
    warm: Option<&LinearSvm>,
    lbfgs: &LbfgsConfig,
) -> Result<LinearSvm> {
    if positives.nrows() == 0 || negatives.nrows() == 0 {
        return Err(Error::Validation(
            "SVM training needs at least one positive and one negative".into(),
        ));
    }
    if !(c_reg > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "c_reg must be > 0, got {c_reg}"
        )));
    }
    let d = positives.ncols();
    if negatives.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: negatives.ncols(),
        });
    }
    let x = ndarray::concatenate(ndarray::Axis(0), &[positives.view(), negatives.view()])
        .expect("same width");
    let mut y = vec![1.0; positives.nrows()];
    y.extend(std::iter::repeat_n(-1.0, negatives.nrows()));
    let mut weights = match pos_weights {
        Some(w) if w.len() == positives.nrows() => w.to_vec(),
        Some(w) => {
            return Err(Error::DimensionMismatch {
                expected: positives.nrows(),
                found: w.len(),
            })
        }
        None => vec![1.0; positives.nrows()],
    };
    weights.extend(std::iter::repeat_n(1.0, negatives.nrows()));
    let x0 = match warm {
        Some(m) if m.w.len() == d => {
            let mut p = Array1::from(m.w.clone()).to_vec();
            p.push(m.b);
            Array1::from(p)
        }
        _ => Array1::zeros(d + 1),
    };
    let report = minimize(
        |p| svm_objective(p, x.view(), &y, &weights, c_reg),
        x0,
        lbfgs,
    )?;
    debug!(
        "svm retrain: objective {:.6} after {} iterations",
        report.f, report.iterations
    );
    Ok(LinearSvm {
        w: report.x.slice(s![..d]).to_vec(),
        b: report.x[d],
        c_reg,
    })
}

/// Mean logistic loss plus `reg‖w‖²/2`; labels in {0, 1}.
pub fn logistic_objective(
    params: &Array1<f64>,
    x: ArrayView2<f64>,
    y: &[f64],
    reg: f64,
) -> (f64, Array1<f64>) {
    let d = x.ncols();
    let w = params.slice(s![..d]);
    let b = params[d];
    let n = x.nrows().max(1) as f64;
    let mut f = 0.5 * reg * w.dot(&w);
    let mut grad = Array1::zeros(d + 1);
    grad.slice_mut(s![..d]).assign(&(&w * reg));
    for (row, &yi) in x.rows().into_iter().zip(y) {
        let z = w.dot(&row) + b;
        // softplus(z) − y z
        let sp = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        f += (sp - yi * z) / n;
        let r = (sigmoid(z) - yi) / n;
        grad.slice_mut(s![..d]).scaled_add(r, &row);
        grad[d] += r;
    }
    (f, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectnessConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
    /// Ridge weight; keeps separable problems bounded.
    pub reg: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for ObjectnessConfig {
    fn default() -> Self {
        Self {
            iou_pos: 0.5,
            iou_neg: 0.3,
            reg: 1e-3,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// Fit the objectness model on base-class images: max-IoU ≥ `iou_pos` is
/// object, `< iou_neg` is background, the rest is ignored.
pub fn train_objectness(dataset: &Dataset, cfg: &ObjectnessConfig) -> Result<ObjectnessScorer> {
    if !(cfg.iou_neg <= cfg.iou_pos) {
        return Err(Error::InvalidConfig(
            "iou_neg must not exceed iou_pos".into(),
        ));
    }
    let d = dataset.dim();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for record in &dataset.index.records {
        if record.gt.is_empty() || !record.labels.iter().any(|l| dataset.index.is_base(l)) {
            continue;
        }
        let set = dataset.proposals(&record.image_id)?;
        for (j, b) in set.boxes.iter().enumerate() {
            let best = record
                .gt
                .iter()
                .map(|g| iou_unchecked(b, &g.bbox))
                .fold(0.0, f64::max);
            let label = if best >= cfg.iou_pos {
                1.0
            } else if best < cfg.iou_neg {
                0.0
            } else {
                continue;
            };
            rows.extend(set.feature(j).iter());
            y.push(label);
        }
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(Error::Validation(format!(
            "objectness labels are single-class ({n_pos} positive of {})",
            y.len()
        )));
    }
    let x = Array2::from_shape_vec((y.len(), d), rows).expect("rows have length d");
    let report = minimize(
        |p| logistic_objective(p, x.view(), &y, cfg.reg),
        Array1::zeros(d + 1),
        &cfg.lbfgs,
    )?;
    info!(
        "objectness: {n_pos} object / {} background proposals",
        y.len() - n_pos
    );
    Ok(ObjectnessScorer {
        w: report.x.slice(s![..d]).to_vec(),
        b: report.x[d],
    })
}

fn combined(svm_scores: &Array1<f64>, obj: &Array1<f64>, gamma: f64) -> Array1<f64> {
    svm_scores + &(obj * gamma)
}

/// `argmax_j wᵀx_j + b + γ O(x_j)`, lowest index on ties.
pub fn misvm_relocalize(
    svm: &LinearSvm,
    objectness: &ObjectnessScorer,
    gamma: f64,
    image: &ProposalSet,
) -> Result<usize> {
    let s = svm.scores(image.features.view())?;
    let o = objectness.scores(image.features.view())?;
    Ok(argmax(combined(&s, &o, gamma).view()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisvmConfig {
    pub gamma: f64,
    pub c_reg: f64,
    pub max_rounds: usize,
    pub lbfgs: LbfgsConfig,
}

impl Default for MisvmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            c_reg: 1.0,
            max_rounds: 10,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisvmResult {
    pub image_ids: Vec<String>,
    pub selections: Vec<usize>,
    pub svm: LinearSvm,
    pub rounds: usize,
    /// Selections repeated before the round cap.
    pub converged: bool,
    pub negative_pool_size: usize,
}

/// Alternate SVM re-training, hard-negative mining and re-localization,
/// starting from the full-image proposals.
pub fn run_misvm(
    positives: &[ProposalSet],
    negatives: &[ProposalSet],
    objectness: &ObjectnessScorer,
    cfg: &MisvmConfig,
) -> Result<MisvmResult> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Validation(
            "MI-SVM needs positive and negative images".into(),
        ));
    }
    if cfg.max_rounds == 0 {
        return Err(Error::InvalidConfig("max_rounds must be >= 1".into()));
    }
    let d = positives[0].dim();
    let obj: Vec<Array1<f64>> = positives
        .iter()
        .map(|p| objectness.scores(p.features.view()))
        .collect::<Result<_>>()?;

    let mut selections = vec![0usize; positives.len()];
    let mut pool_keys: BTreeSet<(usize, usize)> = (0..negatives.len()).map(|i| (i, 0)).collect();
    let mut pool: Vec<f64> = negatives
        .iter()
        .flat_map(|n| n.feature(0).to_vec())
        .collect();
    let mut svm: Option<LinearSvm> = None;
    let mut rounds = 0;
    let mut converged = false;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let pos = Array2::from_shape_fn((positives.len(), d), |(i, k)| {
            positives[i].features[[selections[i], k]]
        });
        let neg = Array2::from_shape_vec((pool_keys.len(), d), pool.clone())
            .expect("pool rows have length d");
        let model = misvm_retrain(
            pos.view(),
            None,
            neg.view(),
            cfg.c_reg,
            svm.as_ref(),
            &cfg.lbfgs,
        )?;

        for (i, n) in negatives.iter().enumerate() {
            let j = argmax(model.scores(n.features.view())?.view());
            if pool_keys.insert((i, j)) {
                pool.extend(n.feature(j).iter());
            }
        }
        let next: Vec<usize> = positives
            .iter()
            .zip(&obj)
            .map(|(p, o)| {
                Ok(argmax(
                    combined(&model.scores(p.features.view())?, o, cfg.gamma).view(),
                ))
            })
            .collect::<Result<_>>()?;
        svm = Some(model);
        if next == selections {
            converged = true;
            break;
        }
        selections = next;
    }
    Ok(MisvmResult {
        image_ids: positives.iter().map(|p| p.image_id.clone()).collect(),
        selections,
        svm: svm.expect("at least one round"),
        rounds,
        converged,
        negative_pool_size: pool_keys.len(),
    })
}

/// MI-SVM for one class of an episode, scoring the query images with the
/// final SVM. Negatives are the episode's extra negatives for the class when
/// present, otherwise the other classes' support images.
pub fn run_misvm_episode(
    dataset: &Dataset,
    episode: &Episode,
    class: &str,
    objectness: &ObjectnessScorer,
    cfg: &MisvmConfig,
    detect_cfg: &DetectConfig,
) -> Result<(MisvmResult, Vec<Detection>)> {
    let pos_ids = episode.support_of(class).ok_or_else(|| {
        Error::Validation(format!("class `{class}` is not a target of the episode"))
    })?;
    let neg_ids = match episode.negatives_of(class) {
        Some(ids) => ids.to_vec(),
        None => negative_images(dataset, episode, class)?,
    };
    let load = |ids: &[String]| -> Result<Vec<ProposalSet>> {
        ids.iter()
            .map(|id| dataset.proposals(id).cloned())
            .collect()
    };
    let result = run_misvm(&load(pos_ids)?, &load(&neg_ids)?, objectness, cfg)?;
    let mut detections = Vec::new();
    for id in &episode.query {
        let q = dataset.proposals(id)?;
        let scores = result.svm.scores(q.features.view())?;
        let mut dets =
            detections_from_scores(q, class, scores.as_slice().expect("contiguous"), detect_cfg)?;
        for det in &mut dets {
            det.episode = Some(episode.index);
        }
        detections.extend(dets);
    }
    Ok((result, detections))
}
