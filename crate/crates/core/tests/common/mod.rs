//! Instance generators and brute-force reference implementations.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use vmfmil::background::BackgroundModel;
use vmfmil::dataio::{GtBox, ImageRecord, ProposalSet};
use vmfmil::directional::{uniform_unit_vector, VmfParams};
use vmfmil::eval::{BBox, Detection};

pub fn unit_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for mut row in m.rows_mut() {
        row.assign(&uniform_unit_vector(d, rng));
    }
    m
}

pub fn set_of(id: &str, features: Array2<f64>) -> ProposalSet {
    let boxes = (0..features.nrows())
        .map(|j| BBox::new(0.0, 0.0, 1.0 + j as f64, 1.0))
        .collect();
    ProposalSet::new(id, boxes, features, None).unwrap()
}

/// `m` images of `p` unit-norm proposals in dimension `d`.
pub fn random_sets<R: Rng>(m: usize, p: usize, d: usize, rng: &mut R) -> Vec<ProposalSet> {
    (0..m)
        .map(|i| set_of(&format!("i{i}"), unit_rows(p, d, rng)))
        .collect()
}

pub fn random_vmf_background<R: Rng>(d: usize, rng: &mut R) -> BackgroundModel {
    let kappa = rng.gen_range(0.0..10.0);
    BackgroundModel::Vmf(VmfParams::new(uniform_unit_vector(d, rng), kappa).unwrap())
}

pub fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Box with integer corners inside `[0, size]²`.
pub fn int_box<R: Rng>(size: i32, rng: &mut R) -> BBox {
    let (x0, x1) = ordered(size, rng);
    let (y0, y1) = ordered(size, rng);
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

fn ordered<R: Rng>(size: i32, rng: &mut R) -> (i32, i32) {
    let a = rng.gen_range(0..size);
    let b = rng.gen_range(a + 1..=size);
    (a, b)
}

/// IoU of integer boxes by counting unit cells.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let cells = |bb: &BBox| -> std::collections::HashSet<(i64, i64)> {
        let mut s = std::collections::HashSet::new();
        for x in bb.x_min() as i64..bb.x_max() as i64 {
            for y in bb.y_min() as i64..bb.y_max() as i64 {
                s.insert((x, y));
            }
        }
        s
    };
    let (ca, cb) = (cells(a), cells(b));
    let inter = ca.intersection(&cb).count() as f64;
    let union = ca.union(&cb).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending score, lower index first on ties.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Greedy NMS output is the unique set where a box is kept iff no kept box
/// of higher rank overlaps it at `thresh` or more.
pub fn nms_fixed_point_holds(boxes: &[BBox], scores: &[f64], thresh: f64, kept: &[usize]) -> bool {
    let order = rank(scores);
    let pos: Vec<usize> = {
        let mut p = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            p[i] = r;
        }
        p
    };
    (0..boxes.len()).all(|i| {
        let blocked = kept
            .iter()
            .any(|&k| pos[k] < pos[i] && raster_iou(&boxes[k], &boxes[i]) >= thresh);
        kept.contains(&i) != blocked
    })
}

pub fn record(id: &str, label: &str, boxes: &[BBox]) -> ImageRecord {
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

pub fn det(image: &str, class: &str, bbox: BBox, score: f64) -> Detection {
    Detection {
        image_id: image.into(),
        class_id: class.into(),
        bbox,
        score,
        episode: None,
    }
}

/// True-positive flags in rank order: each detection takes its
/// best-overlapping gt box if free, otherwise it is a false positive.
pub fn brute_tp_flags(
    dets: &[Detection],
    gt: &[ImageRecord],
    class: &str,
    t: f64,
) -> (Vec<bool>, usize) {
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|r| vec![false; r.gt.len()]).collect();
    let n_gt = gt
        .iter()
        .flat_map(|r| &r.gt)
        .filter(|g| g.label == class)
        .count();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut flags = vec![];
    for i in rank(&scores) {
        let d = &dets[i];
        let mut tp = false;
        if let Some(r) = gt.iter().position(|r| r.image_id == d.image_id) {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt[r].gt.iter().enumerate() {
                if g.label != class {
                    continue;
                }
                let o = raster_iou(&d.bbox, &g.bbox);
                if o >= t && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                if !taken[r][j] {
                    taken[r][j] = true;
                    tp = true;
                }
            }
        }
        flags.push(tp);
    }
    (flags, n_gt)
}

/// All-point AP as the sum over true positives of the best precision at
/// that rank or any later one, divided by the gt count.
pub fn brute_ap_all_point(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let prec: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            ap += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    Some(ap / n_gt as f64)
}

/// Mean over recall levels 0, 0.1, …, 1 of the best precision reaching
/// that recall.
pub fn brute_ap_eleven(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut pts = vec![];
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        ap += pts
            .iter()
            .filter(|(r, _)| *r >= t - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
            / 11.0;
    }
    Some(ap)
}

/// CorLoc in percent by scanning every detection of every labelled image.
pub fn brute_corloc(dets: &[Detection], gt: &[ImageRecord], class: &str, t: f64) -> f64 {
    let labelled: Vec<&ImageRecord> = gt
        .iter()
        .filter(|r| r.labels.iter().any(|l| l == class))
        .collect();
    if labelled.is_empty() {
        return 0.0;
    }
    let mut hits = 0;
    for r in &labelled {
        let mut top: Option<&Detection> = None;
        for d in dets
            .iter()
            .filter(|d| d.image_id == r.image_id && d.class_id == class)
        {
            if top.is_none_or(|b| d.score > b.score) {
                top = Some(d);
            }
        }
        if let Some(d) = top {
            if r.gt
                .iter()
                .any(|g| g.label == class && raster_iou(&d.bbox, &g.bbox) >= t)
            {
                hits += 1;
            }
        }
    }
    100.0 * hits as f64 / labelled.len() as f64
}

/// Random small detection problem: up to 3 images, up to 3 gt boxes and
/// up to 5 detections, integer boxes on a 6×6 grid.
pub fn random_detection_case<R: Rng>(rng: &mut R) -> (Vec<Detection>, Vec<ImageRecord>) {
    let n_img = rng.gen_range(1..=3);
    let mut gt = vec![];
    let mut n_boxes = 0;
    for i in 0..n_img {
        let k = if n_boxes < 3 {
            rng.gen_range(1..=(3 - n_boxes).min(2))
        } else {
            0
        };
        n_boxes += k;
        let boxes: Vec<BBox> = (0..k).map(|_| int_box(6, rng)).collect();
        let mut r = record(&format!("im{i}"), "cat", &boxes);
        if k == 0 {
            r.labels.clear();
        }
        gt.push(r);
    }
    let n_det = rng.gen_range(0..=5);
    let dets = (0..n_det)
        .map(|_| {
            let img = rng.gen_range(0..n_img);
            // coarse scores so ties occur
            let score = rng.gen_range(0..4) as f64 / 4.0;
            det(&format!("im{img}"), "cat", int_box(6, rng), score)
        })
        .collect();
    (dets, gt)
}
