//! Few-shot weakly-supervised detection: COL pseudo-labels per class, a
//! cosine-similarity head per class, and class-wise detection on queries.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::background::BackgroundModel;
use crate::col::{run_col, sigmoid, ColConfig, ColResult};
use crate::dataio::{Dataset, ProposalSet};
use crate::directional::normalize;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::eval::{nms, Detection};
use crate::optim::{minimize, LbfgsConfig, LbfgsReport};

/// Per-class cosine head `s(x) = τ vᵀx / ‖v‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    #[serde(rename = "class")]
    pub class_id: String,
    pub v: Vec<f64>,
    pub tau: f64,
}

impl CosineClassifier {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Raw logits for every row of `features`.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: features.ncols(),
            });
        }
        let v = ArrayView1::from(&self.v);
        let norm = v.dot(&v).sqrt();
        Ok(features.dot(&v) * (self.tau / norm))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub class_id: String,
    /// `(image_id, proposal index)` of each positive.
    pub positives: Vec<(String, usize)>,
    pub positive_features: Array2<f64>,
    pub negative_features: Array2<f64>,
}

/// Top soft-label proposal of each positive image plus every proposal of
/// every negative image.
pub fn build_pseudo_labels(
    class_id: &str,
    col: &ColResult,
    positive_sets: &[ProposalSet],
    negative_sets: &[ProposalSet],
) -> Result<PseudoLabelSet> {
    if positive_sets.is_empty() {
        return Err(Error::Validation(format!(
            "class `{class_id}` has no positive images"
        )));
    }
    let ids: Vec<&str> = positive_sets.iter().map(|s| s.image_id.as_str()).collect();
    if col
        .image_ids
        .iter()
        .map(String::as_str)
        .ne(ids.iter().copied())
    {
        return Err(Error::Validation(format!(
            "COL result for `{class_id}` was run on different images"
        )));
    }
    let d = positive_sets[0].dim();
    let mut pos = Array2::zeros((positive_sets.len(), d));
    let mut positives = Vec::with_capacity(positive_sets.len());
    for (i, (set, &j)) in positive_sets.iter().zip(&col.top_index).enumerate() {
        pos.row_mut(i).assign(&set.feature(j));
        positives.push((set.image_id.clone(), j));
    }
    let neg_views: Vec<ArrayView2<f64>> = negative_sets.iter().map(|s| s.features.view()).collect();
    let negative_features = if neg_views.is_empty() {
        Array2::zeros((0, d))
    } else {
        ndarray::concatenate(Axis(0), &neg_views).map_err(|_| Error::DimensionMismatch {
            expected: d,
            found: 0,
        })?
    };
    if negative_features.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: negative_features.ncols(),
        });
    }
    Ok(PseudoLabelSet {
        class_id: class_id.to_string(),
        positives,
        positive_features: pos,
        negative_features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    /// Weight of the norm anchor `(‖v‖ − 1)² / 2`.
    pub l2_reg: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 20.0,
            l2_reg: 1e-3,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.l2_reg >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need tau > 0 and l2_reg >= 0, got {} / {}",
                self.tau, self.l2_reg
            )));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean sigmoid cross-entropy of the cosine head plus the norm anchor, and
/// its gradient in `v`.
///
/// The data term depends on `v` only through `v/‖v‖`, so a plain ridge
/// would have no minimizer; the anchor pins the scale instead.
pub fn classifier_objective(
    v: &Array1<f64>,
    positives: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    tau: f64,
    l2_reg: f64,
) -> (f64, Array1<f64>) {
    let norm = v.dot(v).sqrt();
    let n = (positives.nrows() + negatives.nrows()).max(1) as f64;
    let mut loss = 0.0;
    // accumulate Σ (σ(s) − y) x and Σ (σ(s) − y) vᵀx for the chain rule
    let mut gx = Array1::zeros(v.len());
    let mut gv = 0.0;
    for (features, y) in [(positives.view(), 1.0), (negatives.view(), 0.0)] {
        for x in features.rows() {
            let vx = v.dot(&x);
            let s = tau * vx / norm;
            loss += softplus(s) - y * s;
            let r = sigmoid(s) - y;
            gx.scaled_add(r, &x);
            gv += r * vx;
        }
    }
    let mut grad = (gx / norm - v * (gv / (norm * norm * norm))) * (tau / n);
    loss /= n;
    loss += 0.5 * l2_reg * (norm - 1.0) * (norm - 1.0);
    grad.scaled_add(l2_reg * (norm - 1.0) / norm, v);
    (loss, grad)
}

pub fn train_classifier(
    labels: &PseudoLabelSet,
    cfg: &TrainConfig,
) -> Result<(CosineClassifier, LbfgsReport)> {
    cfg.validate()?;
    let pos = labels.positive_features.view();
    if pos.nrows() == 0 {
        return Err(Error::Validation(format!(
            "class `{}` has no positives",
            labels.class_id
        )));
    }
    if labels.negative_features.nrows() == 0 {
        warn!(
            "class `{}` has no negatives; training on positives and the regularizer only",
            labels.class_id
        );
    }
    let mean = pos.mean_axis(Axis(0)).expect("nonempty");
    let v0 = normalize(mean.view()).unwrap_or_else(|_| pos.row(0).to_owned());
    let neg = labels.negative_features.view();
    let report = minimize(
        |v| classifier_objective(v, pos, neg, cfg.tau, cfg.l2_reg),
        v0,
        &cfg.lbfgs,
    )?;
    if !report.converged {
        log::debug!(
            "classifier `{}` stopped after {} iterations, |g| = {:.2e}",
            labels.class_id,
            report.iterations,
            report.grad_inf
        );
    }
    let clf = CosineClassifier {
        class_id: labels.class_id.clone(),
        v: report.x.to_vec(),
        tau: cfg.tau,
    };
    Ok((clf, report))
}

/// Post-processing of per-class query scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Class-wise greedy NMS threshold; `None` keeps every proposal.
    pub nms_iou: Option<f64>,
    /// Drop detections scoring below this probability.
    pub score_threshold: Option<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            nms_iou: Some(0.5),
            score_threshold: None,
        }
    }
}

/// Turn per-proposal probabilities of one class into detections.
pub fn detections_from_scores(
    query: &ProposalSet,
    class_id: &str,
    probs: &[f64],
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let keep: Vec<usize> = match cfg.nms_iou {
        Some(t) => nms(&query.boxes, probs, t)?,
        None => (0..probs.len()).collect(),
    };
    Ok(keep
        .into_iter()
        .filter(|&j| cfg.score_threshold.is_none_or(|t| probs[j] >= t))
        .map(|j| Detection {
            image_id: query.image_id.clone(),
            class_id: class_id.to_string(),
            bbox: query.boxes[j],
            score: probs[j],
            episode: None,
        })
        .collect())
}

/// Score every proposal of `query` with each classifier.
pub fn detect(
    classifiers: &[CosineClassifier],
    query: &ProposalSet,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for clf in classifiers {
        let probs: Vec<f64> = clf
            .logits(query.features.view())?
            .iter()
            .map(|&s| sigmoid(s))
            .collect();
        out.extend(detections_from_scores(query, &clf.class_id, &probs, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsodOutput {
    pub classifiers: Vec<CosineClassifier>,
    pub col_results: Vec<ColResult>,
    pub pseudo_labels: Vec<PseudoLabelSet>,
    pub detections: Vec<Detection>,
}

fn sets(dataset: &Dataset, ids: &[String]) -> Result<Vec<ProposalSet>> {
    ids.iter()
        .map(|id| dataset.proposals(id).cloned())
        .collect()
}

/// Negative images of `class`: support images of the episode whose labels
/// exclude it.
pub fn negative_images(dataset: &Dataset, episode: &Episode, class: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for shots in &episode.support {
        for id in &shots.images {
            if !dataset.index.get(id)?.has_label(class) && !out.contains(id) {
                out.push(id.clone());
            }
        }
    }
    Ok(out)
}

/// COL, pseudo-labelling and head training for every target class, then
/// detection on the episode's query images.
pub fn run_wsod(
    dataset: &Dataset,
    episode: &Episode,
    bg: &BackgroundModel,
    col_cfg: &ColConfig,
    train_cfg: &TrainConfig,
    detect_cfg: &DetectConfig,
) -> Result<WsodOutput> {
    let mut out = WsodOutput {
        classifiers: vec![],
        col_results: vec![],
        pseudo_labels: vec![],
        detections: vec![],
    };
    for shots in &episode.support {
        let pos = sets(dataset, &shots.images)?;
        let neg = sets(dataset, &negative_images(dataset, episode, &shots.class)?)?;
        let col = run_col(col_cfg, bg, &pos)?;
        let labels = build_pseudo_labels(&shots.class, &col, &pos, &neg)?;
        let (clf, _) = train_classifier(&labels, train_cfg)?;
        out.classifiers.push(clf);
        out.col_results.push(col);
        out.pseudo_labels.push(labels);
    }
    for id in &episode.query {
        let mut dets = detect(&out.classifiers, dataset.proposals(id)?, detect_cfg)?;
        for d in &mut dets {
            d.episode = Some(episode.index);
        }
        out.detections.extend(dets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BBox;
    use crate::optim::numeric_gradient;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_of(id: &str, rows: Array2<f64>) -> ProposalSet {
        let boxes = (0..rows.nrows())
            .map(|j| BBox::new(0.0, 0.0, 1.0 + j as f64, 1.0))
            .collect();
        ProposalSet::new(id, boxes, rows, None).unwrap()
    }

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0_f64..1.0));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    #[test]
    fn pseudo_label_counts() {
        // N=2, K=1, P=3
        let a = set_of("a", array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let b = set_of("b", array![[0.0, 1.0], [1.0, 0.0], [0.8, 0.6]]);
        let col = run_col(
            &ColConfig::default(),
            &BackgroundModel::Uniform,
            std::slice::from_ref(&a),
        )
        .unwrap();
        let labels = build_pseudo_labels("x", &col, &[a], &[b]).unwrap();
        assert_eq!(labels.positive_features.nrows(), 1);
        assert_eq!(labels.negative_features.nrows(), 3);
    }

    #[test]
    fn single_positive_stationary_at_itself() {
        let x = array![[0.6, 0.0, 0.8]];
        let labels = PseudoLabelSet {
            class_id: "c".into(),
            positives: vec![("a".into(), 0)],
            positive_features: x.clone(),
            negative_features: Array2::zeros((0, 3)),
        };
        let (clf, _) = train_classifier(&labels, &TrainConfig::default()).unwrap();
        let s = clf.logits(x.view()).unwrap()[0];
        assert!((s - 20.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pos = unit_rows(4, 6, &mut rng);
        let neg = unit_rows(9, 6, &mut rng);
        for _ in 0..20 {
            let v = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let (_, g) = classifier_objective(&v, pos.view(), neg.view(), 20.0, 0.1);
            let num = numeric_gradient(
                |v| classifier_objective(v, pos.view(), neg.view(), 20.0, 0.1).0,
                &v,
                1e-6,
            );
            for (a, b) in g.iter().zip(num.iter()) {
                assert!(
                    (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3),
                    "{a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn separable_instance_fully_classified() {
        // positives within 0.1 rad of e1, negatives at angle ≥ π/2 from e1: cosine margin ≥ 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 5;
        let mut pos = Array2::zeros((10, d));
        let mut neg = Array2::zeros((40, d));
        for mut r in pos.rows_mut() {
            let t: f64 = rng.gen_range(-0.1..0.1);
            r[0] = t.cos();
            r[1 + rng.gen_range(0..d - 1)] = t.sin();
        }
        for mut r in neg.rows_mut() {
            let mut v = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0_f64..1.0));
            v[0] = -v[0].abs();
            let n = v.dot(&v).sqrt();
            r.assign(&(v / n));
        }
        let labels = PseudoLabelSet {
            class_id: "c".into(),
            positives: vec![],
            positive_features: pos.clone(),
            negative_features: neg.clone(),
        };
        let (clf, _) = train_classifier(&labels, &TrainConfig::default()).unwrap();
        assert!(clf.logits(pos.view()).unwrap().iter().all(|&s| s > 0.0));
        assert!(clf.logits(neg.view()).unwrap().iter().all(|&s| s < 0.0));
    }

    #[test]
    fn detect_examples() {
        let q = set_of("q", array![[1.0, 0.0], [0.0, 1.0]]);
        let clf = CosineClassifier {
            class_id: "c".into(),
            v: vec![1.0, 0.0],
            tau: 20.0,
        };
        let dets = detect(
            std::slice::from_ref(&clf),
            &q,
            &DetectConfig {
                nms_iou: None,
                score_threshold: None,
            },
        )
        .unwrap();
        assert!((dets[0].score - sigmoid(20.0)).abs() < 1e-15);

        let same_box = ProposalSet::new(
            "q",
            vec![BBox::new(0.0, 0.0, 5.0, 5.0); 2],
            array![[0.6, 0.8], [0.8, 0.6]],
            None,
        )
        .unwrap();
        let dets = detect(
            std::slice::from_ref(&clf),
            &same_box,
            &DetectConfig::default(),
        )
        .unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - sigmoid(16.0)).abs() < 1e-12);

        let scaled = CosineClassifier {
            v: vec![5.0, 0.0],
            ..clf.clone()
        };
        let a = clf.logits(q.features.view()).unwrap();
        let b = scaled.logits(q.features.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-9));
    }

    #[test]
    fn classifier_json_shape() {
        let clf = CosineClassifier {
            class_id: "c".into(),
            v: vec![1.0, 2.0],
            tau: 20.0,
        };
        assert_eq!(
            serde_json::to_string(&clf).unwrap(),
            r#"{"class":"c","v":[1.0,2.0],"tau":20.0}"#
        );
    }
}
