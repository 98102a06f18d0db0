//! Unnormalized background score `u⁻` and its fitting on base classes.

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, ProposalSet};
use crate::directional::{fit_vmf, KappaRule, VmfParams};
use crate::error::{Error, Result};
use crate::eval::iou_unchecked;

/// Added inside the objectness logarithm so `obj = 1` stays finite.
pub const OBJECTNESS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BackgroundJson", into = "BackgroundJson")]
pub enum BackgroundModel {
    /// `log u⁻(x) = κ θᵀx`.
    Vmf(VmfParams),
    /// `log u⁻(x) = log(α (1 − obj(x)) + ε)`.
    Objectness { alpha: f64 },
    /// `log u⁻(x) = 0`.
    Uniform,
}

#[derive(Serialize, Deserialize)]
struct BackgroundJson {
    variant: String,
    theta: Option<Vec<f64>>,
    kappa: Option<f64>,
    alpha: Option<f64>,
}

impl TryFrom<BackgroundJson> for BackgroundModel {
    type Error = Error;

    fn try_from(j: BackgroundJson) -> Result<Self> {
        let model = match j.variant.as_str() {
            "vmf" => {
                let (Some(theta), Some(kappa)) = (j.theta, j.kappa) else {
                    return Err(Error::Validation(
                        "vmf background needs theta and kappa".into(),
                    ));
                };
                BackgroundModel::Vmf(VmfParams::new(Array1::from(theta), kappa)?)
            }
            "objectness" => BackgroundModel::Objectness {
                alpha: j
                    .alpha
                    .ok_or_else(|| Error::Validation("objectness background needs alpha".into()))?,
            },
            "uniform" => BackgroundModel::Uniform,
            other => {
                return Err(Error::Validation(format!(
                    "unknown background variant `{other}`"
                )))
            }
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<BackgroundModel> for BackgroundJson {
    fn from(m: BackgroundModel) -> Self {
        let mut j = BackgroundJson {
            variant: String::new(),
            theta: None,
            kappa: None,
            alpha: None,
        };
        match m {
            BackgroundModel::Vmf(p) => {
                j.variant = "vmf".into();
                j.theta = Some(p.theta.to_vec());
                j.kappa = Some(p.kappa);
            }
            BackgroundModel::Objectness { alpha } => {
                j.variant = "objectness".into();
                j.alpha = Some(alpha);
            }
            BackgroundModel::Uniform => j.variant = "uniform".into(),
        }
        j
    }
}

impl BackgroundModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackgroundModel::Vmf(p) => p.validate(),
            BackgroundModel::Objectness { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => Err(
                Error::InvalidConfig(format!("objectness alpha must be > 0, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    /// `log u⁻` for every proposal of `set`.
    pub fn log_scores(&self, set: &ProposalSet) -> Result<Array1<f64>> {
        match self {
            BackgroundModel::Vmf(p) => {
                if p.dim() != set.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: p.dim(),
                        found: set.dim(),
                    });
                }
                Ok(set.features.dot(&p.theta) * p.kappa)
            }
            BackgroundModel::Objectness { alpha } => {
                let obj = set.objectness.as_ref().ok_or_else(|| {
                    Error::Validation(format!("image `{}` has no objectness scores", set.image_id))
                })?;
                Ok(obj.mapv(|o| objectness_log_score(*alpha, o)))
            }
            BackgroundModel::Uniform => Ok(Array1::zeros(set.len())),
        }
    }
}

fn objectness_log_score(alpha: f64, obj: f64) -> f64 {
    (alpha * (1.0 - obj) + OBJECTNESS_EPS).ln()
}

/// `log u⁻(x)` for a single unit feature.
pub fn bg_log_score(
    model: &BackgroundModel,
    x: ArrayView1<f64>,
    objectness: Option<f64>,
) -> Result<f64> {
    match model {
        BackgroundModel::Vmf(p) => {
            if p.dim() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.dim(),
                    found: x.len(),
                });
            }
            Ok(p.kappa * p.theta.dot(&x))
        }
        BackgroundModel::Objectness { alpha } => match objectness {
            Some(o) if (0.0..=1.0).contains(&o) => Ok(objectness_log_score(*alpha, o)),
            Some(o) => Err(Error::Domain(format!("objectness {o} outside [0, 1]"))),
            None => Err(Error::Validation(
                "objectness background needs an objectness score".into(),
            )),
        },
        BackgroundModel::Uniform => Ok(0.0),
    }
}

/// Fitted background together with how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundFit {
    pub model: BackgroundModel,
    pub num_negatives: usize,
    pub num_images: usize,
    pub saturated: bool,
}

/// Fit a vMF to every base-image proposal whose best IoU with that image's
/// ground truth is below `iou_threshold`.
pub fn fit_background(
    dataset: &Dataset,
    iou_threshold: f64,
    kappa_rule: KappaRule,
    kappa_max: f64,
) -> Result<BackgroundFit> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidConfig(format!(
            "iou threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let d = dataset.dim();
    let mut rows: Vec<f64> = Vec::new();
    let mut num_images = 0;
    for record in &dataset.index.records {
        if !record.labels.iter().any(|l| dataset.index.is_base(l)) {
            continue;
        }
        if record.gt.is_empty() {
            warn!("base image `{}` has no gt boxes; skipped", record.image_id);
            continue;
        }
        num_images += 1;
        let set = dataset.proposals(&record.image_id)?;
        for (j, b) in set.boxes.iter().enumerate() {
            let best = record
                .gt
                .iter()
                .map(|g| iou_unchecked(b, &g.bbox))
                .fold(0.0, f64::max);
            if best < iou_threshold {
                rows.extend(set.feature(j).iter());
            }
        }
    }
    let n = rows.len() / d.max(1);
    if n == 0 {
        return Err(Error::NoNegatives {
            threshold: iou_threshold,
        });
    }
    let points = Array2::from_shape_vec((n, d), rows).expect("rows have length d");
    let fit = fit_vmf(points.view(), None, kappa_rule, kappa_max)?;
    info!(
        "background: {n} negatives from {num_images} base images, kappa={:.3}",
        fit.params.kappa
    );
    Ok(BackgroundFit {
        model: BackgroundModel::Vmf(fit.params),
        num_negatives: n,
        num_images,
        saturated: fit.saturated,
    })
}
