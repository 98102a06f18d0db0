//! Box geometry and localization/detection metrics.
//!
//! IoU thresholds are inclusive everywhere: a match at exactly the threshold
//! counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::ImageRecord;
use crate::error::{Error, Result};

/// Axis-aligned box `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox([x_min, y_min, x_max, y_max])
    }

    pub fn x_min(&self) -> f64 {
        self.0[0]
    }
    pub fn y_min(&self) -> f64 {
        self.0[1]
    }
    pub fn x_max(&self) -> f64 {
        self.0[2]
    }
    pub fn y_max(&self) -> f64 {
        self.0[3]
    }

    pub fn area(&self) -> f64 {
        (self.x_max() - self.x_min()) * (self.y_max() - self.y_min())
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
            && self.x_min() < self.x_max()
            && self.y_min() < self.y_max()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(format!("degenerate box {:?}", self.0)))
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices sorted by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in rank order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: boxes.len(),
            found: scores.len(),
        });
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in ranked(scores) {
        if kept
            .iter()
            .all(|&k| iou_unchecked(&boxes[k], &boxes[i]) < iou_thresh)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// A scored box for one class on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "class")]
    pub class_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Episode the detection was produced in, when written by a benchmark run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
}

fn gt_boxes<'a>(record: &'a ImageRecord, class_id: &'a str) -> impl Iterator<Item = &'a BBox> + 'a {
    record
        .gt
        .iter()
        .filter(move |g| g.label == class_id)
        .map(|g| &g.bbox)
}

/// Percentage of images labelled with `class_id` whose top-scoring detection
/// of that class hits a ground-truth instance of the class.
///
/// Images without any detection of the class count as misses.
pub fn corloc(
    detections: &[Detection],
    gt: &[ImageRecord],
    class_id: &str,
    iou_thresh: f64,
) -> Result<f64> {
    let (hits, total) = corloc_counts(detections, gt, class_id, iou_thresh)?;
    if total == 0 {
        return Err(Error::Protocol(format!("no images labelled `{class_id}`")));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// `(hits, images)` behind [`corloc`]; images not labelled with the class
/// are skipped.
pub fn corloc_counts(
    detections: &[Detection],
    gt: &[ImageRecord],
    class_id: &str,
    iou_thresh: f64,
) -> Result<(usize, usize)> {
    let mut top: HashMap<&str, &Detection> = HashMap::new();
    for det in detections.iter().filter(|d| d.class_id == class_id) {
        let slot = top.entry(det.image_id.as_str()).or_insert(det);
        if det.score > slot.score {
            *slot = det;
        }
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for record in gt.iter().filter(|r| r.has_label(class_id)) {
        let mut boxes = gt_boxes(record, class_id).peekable();
        if boxes.peek().is_none() {
            return Err(Error::Protocol(format!(
                "image `{}` is labelled `{class_id}` but has no ground-truth box for it",
                record.image_id
            )));
        }
        total += 1;
        if let Some(det) = top.get(record.image_id.as_str()) {
            if boxes.any(|g| iou_unchecked(&det.bbox, g) >= iou_thresh) {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}

/// One selected box per image, independent of any predicted label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// CorLoc where a selection hits if it overlaps any ground-truth box of the
/// episode's common class.
pub fn class_agnostic_corloc(
    selections: &[Selection],
    gt: &[ImageRecord],
    class_id: &str,
    iou_thresh: f64,
) -> Result<f64> {
    if selections.is_empty() {
        return Err(Error::Protocol("no selections to evaluate".into()));
    }
    let by_id: HashMap<&str, &ImageRecord> = gt.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut hits = 0usize;
    for sel in selections {
        let record = by_id
            .get(sel.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(sel.image_id.clone()))?;
        let mut boxes = gt_boxes(record, class_id).peekable();
        if boxes.peek().is_none() {
            return Err(Error::Protocol(format!(
                "image `{}` has no ground-truth box of `{class_id}`",
                sel.image_id
            )));
        }
        if boxes.any(|g| iou_unchecked(&sel.bbox, g) >= iou_thresh) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / selections.len() as f64)
}

/// Half-width (in percentage points) of the normal-approximation 95%
/// binomial interval for a rate given in percent over `n` trials.
pub fn binomial_ci95(rate_percent: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = rate_percent / 100.0;
    100.0 * 1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Precision-recall interpolation used by [`average_precision`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, …, 1.
    ElevenPoint,
}

/// Mark each detection (in rank order) as true or false positive with
/// greedy single matching. Returns `(rank order, is_tp)` and the gt count.
fn match_detections(
    detections: &[Detection],
    gt: &[ImageRecord],
    class_id: &str,
    iou_thresh: f64,
) -> (Vec<bool>, usize) {
    let mut gt_by_image: HashMap<&str, Vec<(&BBox, bool)>> = HashMap::new();
    let mut n_gt = 0;
    for record in gt {
        let boxes: Vec<_> = gt_boxes(record, class_id).map(|b| (b, false)).collect();
        n_gt += boxes.len();
        gt_by_image.insert(record.image_id.as_str(), boxes);
    }
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut flags = Vec::with_capacity(detections.len());
    for i in ranked(&scores) {
        let det = &detections[i];
        let mut is_tp = false;
        if let Some(boxes) = gt_by_image.get_mut(det.image_id.as_str()) {
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, _)) in boxes.iter().enumerate() {
                let o = iou_unchecked(&det.bbox, g);
                if o >= iou_thresh && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            // the best-overlapping gt decides; if it is taken this is a duplicate
            if let Some((j, _)) = best {
                if !boxes[j].1 {
                    boxes[j].1 = true;
                    is_tp = true;
                }
            }
        }
        flags.push(is_tp);
    }
    (flags, n_gt)
}

/// Average precision of one class's detections against the ground truth in
/// `gt` (only the images listed there are considered).
///
/// Returns `None` when there are no ground-truth instances of the class.
pub fn average_precision(
    detections: &[Detection],
    gt: &[ImageRecord],
    class_id: &str,
    iou_thresh: f64,
    interp: ApInterpolation,
) -> Option<f64> {
    let dets: Vec<Detection> = detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .cloned()
        .collect();
    let (flags, n_gt) = match_detections(&dets, gt, class_id, iou_thresh);
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &flag) in flags.iter().enumerate() {
        tp += flag as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    Some(area_under_pr(&recall, &precision, interp))
}

fn area_under_pr(recall: &[f64], precision: &[f64], interp: ApInterpolation) -> f64 {
    // monotone envelope: precision at recall r is the max precision at any recall ≥ r
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interp {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                if *r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = *r;
                }
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            let mut ap = 0.0;
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(&envelope)
                    .filter(|(r, _)| **r >= t - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                ap += p / 11.0;
            }
            ap
        }
    }
}

/// Mean over the classes whose AP is defined.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Protocol(
            "mean AP needs at least one class with ground truth".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// One row of a per-class results table: class columns followed by the mean.
pub fn format_class_table(method: &str, values: &BTreeMap<String, f64>, mean: f64) -> String {
    let mut header = format!("{:<16}", "method");
    let mut row = format!("{method:<16}");
    for (name, v) in values {
        let width = name.len().max(6);
        let _ = write!(header, " {name:>width$}");
        let _ = write!(row, " {:>width$.1}", v);
    }
    let _ = write!(header, " {:>6}", "mean");
    let _ = write!(row, " {:>6.1}", mean);
    format!("{header}\n{row}\n")
}

/// Metrics for one episode's (or one pooled set of) query detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Mean CorLoc over classes that have at least one labelled image.
    pub corloc_mean: f64,
    pub map: Option<f64>,
    /// CorLoc trials (labelled image, class pairs) and hits over all classes.
    pub corloc_trials: usize,
    pub corloc_hits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub corloc: f64,
    /// `None` when the class has no ground-truth instance.
    pub ap: Option<f64>,
    pub images: usize,
}

/// Options shared by the episode and pooled evaluators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub interp: ApInterpolation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            interp: ApInterpolation::AllPoint,
        }
    }
}

/// Evaluate `detections` over the images in `records` for each of `classes`.
pub fn evaluate_detections(
    detections: &[Detection],
    records: &[ImageRecord],
    classes: &BTreeSet<String>,
    opts: EvalOptions,
) -> Result<EpisodeMetrics> {
    let mut per_class = BTreeMap::new();
    let mut aps = Vec::new();
    let mut hits = 0usize;
    let mut trials = 0usize;
    for class in classes {
        let dets: Vec<Detection> = detections
            .iter()
            .filter(|d| &d.class_id == class)
            .cloned()
            .collect();
        let ap = average_precision(&dets, records, class, opts.iou_thresh, opts.interp);
        if ap.is_none() {
            log::info!("class `{class}` has no ground truth here; AP excluded from the mean");
        }
        aps.push(ap);
        let (h, n) = corloc_counts(&dets, records, class, opts.iou_thresh)?;
        hits += h;
        trials += n;
        let cl = if n == 0 {
            0.0
        } else {
            100.0 * h as f64 / n as f64
        };
        per_class.insert(
            class.clone(),
            ClassMetrics {
                corloc: cl,
                ap,
                images: n,
            },
        );
    }
    let with_images: Vec<f64> = per_class
        .values()
        .filter(|m| m.images > 0)
        .map(|m| m.corloc)
        .collect();
    let corloc_mean = mean(&with_images).unwrap_or(0.0);
    let map = if aps.iter().any(Option::is_some) {
        Some(mean_ap(&aps)?)
    } else {
        None
    };
    Ok(EpisodeMetrics {
        per_class,
        corloc_mean,
        map,
        corloc_trials: trials,
        corloc_hits: hits,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// How per-episode results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metrics per episode, then the mean over episodes.
    #[default]
    EpisodeMean,
    /// All episodes' detections evaluated as one set.
    Pooled,
}

/// Per-class entry of a [`MetricsReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportClass {
    pub corloc: f64,
    pub ap: Option<f64>,
}

/// Aggregate metrics over a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ReportClass>,
    pub corloc_mean: f64,
    pub map: Option<f64>,
    pub n_episodes: usize,
    /// Half-width of the 95% interval on `corloc_mean`, in points.
    pub ci95: f64,
    pub aggregation: Aggregation,
}

impl MetricsReport {
    /// Mean of per-episode metrics; per-class values average over the
    /// episodes in which the class occurs.
    pub fn from_episodes(episodes: &[EpisodeMetrics]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Protocol("no episodes to aggregate".into()));
        }
        let mut corloc_by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut ap_by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ep in episodes {
            for (class, m) in &ep.per_class {
                if m.images > 0 {
                    corloc_by.entry(class.clone()).or_default().push(m.corloc);
                }
                let slot = ap_by.entry(class.clone()).or_default();
                if let Some(ap) = m.ap {
                    slot.push(ap);
                }
            }
        }
        let per_class = ap_by
            .iter()
            .map(|(class, aps)| {
                let corloc = corloc_by.get(class).and_then(|v| mean(v)).unwrap_or(0.0);
                (
                    class.clone(),
                    ReportClass {
                        corloc,
                        ap: mean(aps),
                    },
                )
            })
            .collect();
        let corloc_mean =
            mean(&episodes.iter().map(|e| e.corloc_mean).collect::<Vec<_>>()).unwrap_or(0.0);
        let maps: Vec<f64> = episodes.iter().filter_map(|e| e.map).collect();
        let trials: usize = episodes.iter().map(|e| e.corloc_trials).sum();
        Ok(Self {
            per_class,
            corloc_mean,
            map: mean(&maps),
            n_episodes: episodes.len(),
            ci95: binomial_ci95(corloc_mean, trials),
            aggregation: Aggregation::EpisodeMean,
        })
    }

    /// Evaluate all episodes' detections as one set. Image ids are keyed by
    /// episode so an image reused across episodes counts once per episode.
    pub fn pooled(
        episodes: &[(u64, Vec<Detection>, Vec<ImageRecord>)],
        opts: EvalOptions,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Protocol("no episodes to aggregate".into()));
        }
        let key = |ep: u64, id: &str| format!("{ep}/{id}");
        let mut dets = Vec::new();
        let mut records = Vec::new();
        let mut classes = BTreeSet::new();
        for (ep, d, r) in episodes {
            dets.extend(d.iter().map(|x| Detection {
                image_id: key(*ep, &x.image_id),
                ..x.clone()
            }));
            for rec in r {
                classes.extend(rec.labels.iter().cloned());
                records.push(ImageRecord {
                    image_id: key(*ep, &rec.image_id),
                    ..rec.clone()
                });
            }
        }
        let m = evaluate_detections(&dets, &records, &classes, opts)?;
        Ok(Self {
            per_class: m
                .per_class
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ReportClass {
                            corloc: v.corloc,
                            ap: v.ap,
                        },
                    )
                })
                .collect(),
            corloc_mean: m.corloc_mean,
            map: m.map,
            n_episodes: episodes.len(),
            ci95: binomial_ci95(m.corloc_mean, m.corloc_trials),
            aggregation: Aggregation::Pooled,
        })
    }

    /// One-line summary in "value ± half-width" form.
    pub fn summary_line(&self, method: &str) -> String {
        let map = self
            .map
            .map_or("n/a".to_string(), |m| format!("{:.1}", 100.0 * m));
        format!(
            "{method}: CorLoc {:.1} ± {:.1}  mAP {map}  ({} episodes)",
            self.corloc_mean, self.ci95, self.n_episodes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::GtBox;
    use approx::assert_relative_eq;

    fn record(id: &str, label: &str, boxes: &[BBox]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 100.0,
            height: 100.0,
            labels: vec![label.into()],
            gt: boxes
                .iter()
                .map(|b| GtBox {
                    label: label.into(),
                    bbox: *b,
                })
                .collect(),
        }
    }

    fn det(id: &str, class: &str, b: BBox, score: f64) -> Detection {
        Detection {
            image_id: id.into(),
            class_id: class.into(),
            bbox: b,
            score,
            episode: None,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_relative_eq!(
            iou(&a, &BBox::new(5.0, 5.0, 15.0, 15.0)).unwrap(),
            1.0 / 7.0,
            epsilon = 1e-15
        );
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 5.0)).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.9, 0.8], 0.5).unwrap(), vec![0]);
        // A–B and B–C at 0.6; A–C cannot be 0 (Jaccard distance is a metric),
        // the closest realizable chain has A–C = 1/3 < 0.5.
        let a = BBox::new(0.0, 0.0, 8.0, 10.0);
        let b = BBox::new(2.0, 0.0, 10.0, 10.0);
        let c = BBox::new(4.0, 0.0, 12.0, 10.0);
        assert_relative_eq!(iou(&a, &b).unwrap(), 0.6, epsilon = 1e-12);
        assert_relative_eq!(iou(&b, &c).unwrap(), 0.6, epsilon = 1e-12);
        assert_relative_eq!(iou(&a, &c).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(nms(&[a, b, c], &[0.9, 0.8, 0.7], 0.5).unwrap(), vec![0, 2]);
        assert!(nms(&[a], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn corloc_counts_hits() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
        let gt = vec![
            record("a", "cat", &[g]),
            record("b", "cat", &[g]),
            record("c", "cat", &[g]),
        ];
        let dets = vec![
            det("a", "cat", g, 0.9),
            det("a", "cat", miss, 0.1),
            det("b", "cat", g, 0.5),
            det("c", "cat", miss, 0.7),
            det("c", "cat", g, 0.6),
        ];
        assert_relative_eq!(
            corloc(&dets, &gt, "cat", 0.5).unwrap(),
            200.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn corloc_threshold_is_inclusive() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let half = BBox::new(0.0, 0.0, 10.0, 5.0); // IoU exactly 0.5
        let gt = vec![record("a", "cat", &[g])];
        assert_eq!(
            corloc(&[det("a", "cat", half, 1.0)], &gt, "cat", 0.5).unwrap(),
            100.0
        );
    }

    #[test]
    fn corloc_rejects_label_without_box() {
        let gt = vec![record("a", "cat", &[])];
        assert!(matches!(
            corloc(&[], &gt, "cat", 0.5),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn class_agnostic_corloc_example() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
        let gt: Vec<_> = (0..8)
            .map(|i| record(&format!("i{i}"), "dog", &[g]))
            .collect();
        let sels: Vec<_> = (0..8)
            .map(|i| Selection {
                image_id: format!("i{i}"),
                bbox: if i < 6 { g } else { miss },
            })
            .collect();
        assert_eq!(class_agnostic_corloc(&sels, &gt, "dog", 0.5).unwrap(), 75.0);
        // same number through the class-aware path when one class is present
        let dets: Vec<_> = sels
            .iter()
            .map(|s| det(&s.image_id, "dog", s.bbox, 1.0))
            .collect();
        assert_eq!(corloc(&dets, &gt, "dog", 0.5).unwrap(), 75.0);
    }

    #[test]
    fn ap_examples() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
        let gt = vec![record("a", "cat", &[g])];
        let ap = |dets: &[Detection]| {
            average_precision(dets, &gt, "cat", 0.5, ApInterpolation::AllPoint)
        };
        assert_eq!(ap(&[det("a", "cat", g, 0.9)]), Some(1.0));
        assert_relative_eq!(
            ap(&[det("a", "cat", miss, 0.9), det("a", "cat", g, 0.8)]).unwrap(),
            0.5
        );
        // duplicate on the same gt: second is a false positive, AP stays 1
        assert_eq!(
            ap(&[det("a", "cat", g, 0.9), det("a", "cat", g, 0.8)]),
            Some(1.0)
        );
        let (flags, _) = match_detections(
            &[det("a", "cat", g, 0.9), det("a", "cat", g, 0.8)],
            &gt,
            "cat",
            0.5,
        );
        assert_eq!(flags, vec![true, false]);
        assert_eq!(
            average_precision(
                &[],
                &[record("a", "dog", &[g])],
                "cat",
                0.5,
                ApInterpolation::AllPoint
            ),
            None
        );
    }

    #[test]
    fn eleven_point_interpolation() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
        let gt = vec![record("a", "cat", &[g])];
        let dets = [det("a", "cat", miss, 0.9), det("a", "cat", g, 0.8)];
        let ap = average_precision(&dets, &gt, "cat", 0.5, ApInterpolation::ElevenPoint).unwrap();
        assert_relative_eq!(ap, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[Some(0.3)]).unwrap(), 0.3);
        assert_eq!(mean_ap(&[Some(0.4), None]).unwrap(), 0.4);
        assert!(mean_ap(&[None]).is_err());
    }

    #[test]
    fn class_table_layout() {
        let mut v = BTreeMap::new();
        v.insert("aero".to_string(), 62.7);
        v.insert("bike".to_string(), 42.1);
        let t = format_class_table("vmf-mil", &v, 52.4);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("method") && lines[0].ends_with("mean"));
        assert!(
            lines[1].contains("62.7") && lines[1].contains("42.1") && lines[1].ends_with("52.4")
        );
    }
}
