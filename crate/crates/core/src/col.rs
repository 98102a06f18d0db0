//! Common-object localization by EM over one latent positive proposal per
//! image.
//!
//! Each support image `i` contributes proposal features `F_i` (`P × d`). The
//! E-step turns logits `κθᵀF_ij − log u⁻(F_ij)` into soft labels `w_i`; the
//! M-step sets `θ = norm(Σ_i w_iᵀF_i)`. All likelihood arithmetic stays in
//! log space.

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::background::BackgroundModel;
use crate::dataio::ProposalSet;
use crate::directional::{
    estimate_kappa, normalize, tukey_transform, uniform_unit_vector, KappaEstimate, KappaRule,
    DEFAULT_KAPPA_MAX,
};
use crate::error::{Error, Result};

/// Lower clamp for data-driven κ updates.
pub const KAPPA_MIN: f64 = 1e-3;

/// Foreground likelihood family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColModel {
    Vmf,
    /// Isotropic Gaussian with fixed σ; θ is an unconstrained mean.
    Gaussian {
        sigma: f64,
    },
    /// Gaussian on Tukey-transformed features.
    TukeyGaussian {
        beta: f64,
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Normalized sum of full-image features.
    Prototypical,
    /// Uniform random direction from the given seed.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColConfig {
    /// `None` keeps κ fixed at the initial value; `Constant(v)` fixes it at
    /// `v`; any estimator re-fits κ after every M-step.
    pub kappa_rule: Option<KappaRule>,
    /// Initial κ; `None` means `0.1·d`.
    pub kappa_init: Option<f64>,
    pub kappa_max: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub lambda: f64,
    pub model: ColModel,
    pub init: InitStrategy,
}

impl Default for ColConfig {
    fn default() -> Self {
        Self {
            kappa_rule: None,
            kappa_init: None,
            kappa_max: DEFAULT_KAPPA_MAX,
            max_iters: 8,
            convergence_tol: 1e-6,
            lambda: 1.0,
            model: ColModel::Vmf,
            init: InitStrategy::Prototypical,
        }
    }
}

impl ColConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if let Some(rule) = &self.kappa_rule {
            rule.validate()?;
        }
        if let Some(k) = self.kappa_init {
            if !(k >= 0.0 && k.is_finite()) {
                return bad(format!("kappa_init must be finite and >= 0, got {k}"));
            }
        }
        if !(self.kappa_max > KAPPA_MIN) {
            return bad(format!("kappa_max must exceed {KAPPA_MIN}"));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be >= 0".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        match self.model {
            ColModel::Gaussian { sigma } | ColModel::TukeyGaussian { sigma, .. }
                if !(sigma > 0.0) =>
            {
                bad(format!("sigma must be > 0, got {sigma}"))
            }
            _ => Ok(()),
        }
    }

    /// κ used at the first E-step for dimension `d`.
    pub fn initial_kappa(&self, d: usize) -> f64 {
        match self.kappa_rule {
            Some(KappaRule::Constant(v)) => v,
            _ => self.kappa_init.unwrap_or(0.1 * d as f64),
        }
    }

    fn updates_kappa(&self) -> bool {
        matches!(self.kappa_rule, Some(rule) if !matches!(rule, KappaRule::Constant(_)))
    }
}

/// Output of [`run_col`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColResult {
    pub image_ids: Vec<String>,
    pub theta: Vec<f64>,
    pub kappa_final: f64,
    pub soft_labels: Vec<Vec<f64>>,
    pub top_index: Vec<usize>,
    /// Marginal log-likelihood at the initial θ and after every M-step.
    pub loglik_trace: Vec<f64>,
    pub theta_trace: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl ColResult {
    pub fn theta(&self) -> Array1<f64> {
        Array1::from(self.theta.clone())
    }
}

/// Features and background scores for one image, in model space.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Array2<f64>,
    pub bg: Array1<f64>,
}

impl Prepared {
    pub fn new(model: &ColModel, bg: &BackgroundModel, set: &ProposalSet) -> Result<Self> {
        let features = match model {
            ColModel::TukeyGaussian { beta, .. } => tukey_transform(set.features.view(), *beta)?,
            _ => set.features.clone(),
        };
        Ok(Self {
            features,
            bg: bg.log_scores(set)?,
        })
    }
}

fn prepare_all(
    model: &ColModel,
    bg: &BackgroundModel,
    sets: &[ProposalSet],
) -> Result<Vec<Prepared>> {
    if sets.is_empty() {
        return Err(Error::Validation("support set is empty".into()));
    }
    let d = sets[0].dim();
    if let Some(s) = sets.iter().find(|s| s.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: s.dim(),
        });
    }
    sets.iter().map(|s| Prepared::new(model, bg, s)).collect()
}

/// Per-proposal logits `o_ij` under `model`.
pub fn logits(
    model: &ColModel,
    theta: ArrayView1<f64>,
    kappa: f64,
    features: ArrayView2<f64>,
    bg: ArrayView1<f64>,
) -> Array1<f64> {
    match model {
        ColModel::Vmf => features.dot(&theta) * kappa - bg,
        ColModel::Gaussian { sigma } | ColModel::TukeyGaussian { sigma, .. } => {
            let scale = 0.5 / (sigma * sigma);
            let mut out = Array1::zeros(features.nrows());
            for (o, (row, b)) in out
                .iter_mut()
                .zip(features.rows().into_iter().zip(bg.iter()))
            {
                let sq: f64 = row
                    .iter()
                    .zip(theta.iter())
                    .map(|(x, t)| (x - t) * (x - t))
                    .sum();
                *o = -scale * sq - b;
            }
            out
        }
    }
}

pub fn logsumexp(v: ArrayView1<f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Soft labels of one image under the vMF model.
pub fn e_step(
    theta: ArrayView1<f64>,
    kappa: f64,
    bg: &BackgroundModel,
    set: &ProposalSet,
) -> Result<Array1<f64>> {
    if theta.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            found: theta.len(),
        });
    }
    let bg_scores = bg.log_scores(set)?;
    Ok(softmax(
        logits(
            &ColModel::Vmf,
            theta,
            kappa,
            set.features.view(),
            bg_scores.view(),
        )
        .view(),
    ))
}

/// Soft labels under any model, on prepared inputs.
pub fn e_step_prepared(
    model: &ColModel,
    theta: ArrayView1<f64>,
    kappa: f64,
    image: &Prepared,
) -> Array1<f64> {
    softmax(logits(model, theta, kappa, image.features.view(), image.bg.view()).view())
}

/// `Σ_i w_iᵀ F_i`.
fn weighted_resultant(
    weights: &[Array1<f64>],
    features: &[ArrayView2<f64>],
) -> Result<Array1<f64>> {
    if weights.len() != features.len() || weights.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            found: weights.len(),
        });
    }
    let mut r = Array1::zeros(features[0].ncols());
    for (w, f) in weights.iter().zip(features) {
        if w.len() != f.nrows() {
            return Err(Error::DimensionMismatch {
                expected: f.nrows(),
                found: w.len(),
            });
        }
        r += &w.dot(f);
    }
    Ok(r)
}

/// θ update: vMF projects the weighted resultant onto the sphere, the
/// Gaussian variants take the plain mean.
pub fn m_step(
    weights: &[Array1<f64>],
    features: &[ArrayView2<f64>],
    model: &ColModel,
) -> Result<Array1<f64>> {
    let r = weighted_resultant(weights, features)?;
    match model {
        ColModel::Vmf => normalize(r.view()),
        _ => Ok(r / weights.len() as f64),
    }
}

/// Re-fit κ from the weighted resultant, clamped to `[KAPPA_MIN, kappa_max]`.
pub fn update_kappa(
    weights: &[Array1<f64>],
    features: &[ArrayView2<f64>],
    rule: KappaRule,
    kappa_max: f64,
) -> Result<KappaEstimate> {
    if let KappaRule::Constant(_) = rule {
        return Err(Error::InvalidConfig(
            "update_kappa needs a data-driven rule".into(),
        ));
    }
    let r = weighted_resultant(weights, features)?;
    let rbar = r.dot(&r).sqrt() / weights.len() as f64;
    let est = estimate_kappa(rbar.min(1.0), features[0].ncols(), rule, kappa_max)?;
    Ok(KappaEstimate {
        kappa: est.kappa.clamp(KAPPA_MIN, kappa_max),
        saturated: est.saturated,
    })
}

/// Starting θ from prepared images.
pub fn init_direction_prepared(images: &[Prepared], init: InitStrategy) -> Result<Array1<f64>> {
    let d = images
        .first()
        .ok_or_else(|| Error::Validation("support set is empty".into()))?
        .features
        .ncols();
    match init {
        InitStrategy::Prototypical => {
            let mut sum = Array1::zeros(d);
            for im in images {
                sum += &im.features.row(0);
            }
            normalize(sum.view())
        }
        InitStrategy::Random { seed } => {
            Ok(uniform_unit_vector(d, &mut ChaCha8Rng::seed_from_u64(seed)))
        }
    }
}

pub fn init_direction(sets: &[ProposalSet], init: InitStrategy) -> Result<Array1<f64>> {
    let images = prepare_all(&ColModel::Vmf, &BackgroundModel::Uniform, sets)?;
    init_direction_prepared(&images, init)
}

/// `Σ_i logsumexp_j o_ij`: the marginal log-likelihood up to an additive
/// constant that depends only on the data and κ.
pub fn marginal_log_likelihood_prepared(
    model: &ColModel,
    theta: ArrayView1<f64>,
    kappa: f64,
    images: &[Prepared],
) -> f64 {
    images
        .iter()
        .map(|im| logsumexp(logits(model, theta, kappa, im.features.view(), im.bg.view()).view()))
        .sum()
}

pub fn marginal_log_likelihood(
    theta: ArrayView1<f64>,
    kappa: f64,
    bg: &BackgroundModel,
    sets: &[ProposalSet],
) -> Result<f64> {
    let images = prepare_all(&ColModel::Vmf, bg, sets)?;
    if theta.len() != sets[0].dim() {
        return Err(Error::DimensionMismatch {
            expected: sets[0].dim(),
            found: theta.len(),
        });
    }
    Ok(marginal_log_likelihood_prepared(
        &ColModel::Vmf,
        theta,
        kappa,
        &images,
    ))
}

/// Run EM on a support set whose images all contain the common class.
pub fn run_col(
    config: &ColConfig,
    bg: &BackgroundModel,
    support: &[ProposalSet],
) -> Result<ColResult> {
    config.validate()?;
    let images = prepare_all(&config.model, bg, support)?;
    let d = images[0].features.ncols();
    let feats: Vec<ArrayView2<f64>> = images.iter().map(|im| im.features.view()).collect();
    let model = &config.model;

    let mut theta = init_direction_prepared(&images, config.init)?;
    let mut kappa = config.initial_kappa(d);
    let mut loglik_trace = vec![marginal_log_likelihood_prepared(
        model,
        theta.view(),
        kappa,
        &images,
    )];
    let mut theta_trace = vec![theta.to_vec()];
    let mut iterations = 0;
    for t in 0..config.max_iters {
        let w: Vec<Array1<f64>> = images
            .iter()
            .map(|im| e_step_prepared(model, theta.view(), kappa, im))
            .collect();
        let next = m_step(&w, &feats, model)?;
        if config.updates_kappa() {
            kappa = update_kappa(&w, &feats, config.kappa_rule.unwrap(), config.kappa_max)?.kappa;
        }
        let delta = (&next - &theta).mapv(|v| v * v).sum().sqrt();
        theta = next;
        iterations = t + 1;
        loglik_trace.push(marginal_log_likelihood_prepared(
            model,
            theta.view(),
            kappa,
            &images,
        ));
        theta_trace.push(theta.to_vec());
        debug!(
            "col iter {iterations}: |dtheta|={delta:.3e} loglik={:.6}",
            loglik_trace.last().unwrap()
        );
        if delta < config.convergence_tol {
            break;
        }
    }

    let soft: Vec<Array1<f64>> = images
        .iter()
        .map(|im| e_step_prepared(model, theta.view(), kappa, im))
        .collect();
    Ok(ColResult {
        image_ids: support.iter().map(|s| s.image_id.clone()).collect(),
        theta: theta.to_vec(),
        kappa_final: kappa,
        top_index: soft.iter().map(|w| argmax(w.view())).collect(),
        soft_labels: soft.into_iter().map(|w| w.to_vec()).collect(),
        loglik_trace,
        theta_trace,
        iterations,
    })
}

/// Foreground logits and probabilities for query proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    /// `κθᵀx − log u⁻(x)`.
    pub logits: Array1<f64>,
    /// `σ(logit − ln λ)`.
    pub probs: Array1<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn score_query(
    theta: ArrayView1<f64>,
    kappa: f64,
    bg: &BackgroundModel,
    lambda: f64,
    query: &ProposalSet,
) -> Result<QueryScores> {
    score_query_with(&ColModel::Vmf, theta, kappa, bg, lambda, query)
}

/// [`score_query`] under any model.
pub fn score_query_with(
    model: &ColModel,
    theta: ArrayView1<f64>,
    kappa: f64,
    bg: &BackgroundModel,
    lambda: f64,
    query: &ProposalSet,
) -> Result<QueryScores> {
    if theta.len() != query.dim() {
        return Err(Error::DimensionMismatch {
            expected: query.dim(),
            found: theta.len(),
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be > 0, got {lambda}"
        )));
    }
    let image = Prepared::new(model, bg, query)?;
    let logits = logits(model, theta, kappa, image.features.view(), image.bg.view());
    let shift = lambda.ln();
    let probs = logits.mapv(|l| sigmoid(l - shift));
    Ok(QueryScores { logits, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directional::VmfParams;
    use crate::eval::BBox;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn assert_vec_close(a: &Array1<f64>, b: &Array1<f64>) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    fn set_of(id: &str, rows: Array2<f64>) -> ProposalSet {
        let boxes = (0..rows.nrows())
            .map(|j| BBox::new(0.0, 0.0, 1.0 + j as f64, 1.0))
            .collect();
        ProposalSet::new(id, boxes, rows, None).unwrap()
    }

    #[test]
    fn prototypical_init_examples() {
        let a = set_of("a", array![[1.0, 0.0], [0.0, 1.0]]);
        let b = set_of("b", array![[0.0, 1.0], [1.0, 0.0]]);
        let t = init_direction(&[a.clone(), b], InitStrategy::Prototypical).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_vec_close(&t, &array![h, h]);
        assert_eq!(
            init_direction(std::slice::from_ref(&a), InitStrategy::Prototypical).unwrap(),
            array![1.0, 0.0]
        );
        let anti = set_of("c", array![[-1.0, 0.0]]);
        assert!(matches!(
            init_direction(&[a, anti], InitStrategy::Prototypical),
            Err(Error::DegenerateResultant { .. })
        ));
    }

    #[test]
    fn random_init_is_seeded() {
        let a = set_of("a", array![[1.0, 0.0, 0.0]]);
        let t1 =
            init_direction(std::slice::from_ref(&a), InitStrategy::Random { seed: 3 }).unwrap();
        let t2 = init_direction(&[a], InitStrategy::Random { seed: 3 }).unwrap();
        assert_eq!(t1, t2);
        assert_relative_eq!(t1.dot(&t1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn e_step_examples() {
        let s = set_of("a", array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.0]]);
        let w = e_step(array![1.0, 0.0].view(), 0.0, &BackgroundModel::Uniform, &s).unwrap();
        assert_vec_close(&w, &Array1::from_elem(4, 0.25));
        let w = softmax(array![2.0_f64.ln(), 0.0].view());
        assert_vec_close(&w, &array![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn m_step_examples() {
        let f1 = array![[1.0, 0.0], [0.0, 1.0]];
        let f2 = array![[0.0, 1.0], [1.0, 0.0]];
        let w = vec![array![1.0, 0.0], array![1.0, 0.0]];
        let feats = [f1.view(), f2.view()];
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_vec_close(&m_step(&w, &feats, &ColModel::Vmf).unwrap(), &array![h, h]);
        assert_vec_close(
            &m_step(&w, &feats, &ColModel::Gaussian { sigma: 0.1 }).unwrap(),
            &array![0.5, 0.5],
        );
        let same = array![[0.6, 0.8], [0.6, 0.8]];
        let w = vec![array![0.3, 0.7]];
        assert_vec_close(
            &m_step(&w, &[same.view()], &ColModel::Vmf).unwrap(),
            &array![0.6, 0.8],
        );
    }

    #[test]
    fn update_kappa_examples() {
        // r̄ = 1: every image puts all mass on the same vector
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let w = vec![array![1.0, 0.0]; 3];
        let feats = vec![f.view(); 3];
        let est = update_kappa(&w, &feats, KappaRule::OrderInf, 1e6).unwrap();
        assert!(est.saturated);
        assert_eq!(est.kappa, 1e6);

        // d = 512, one image, one-hot on a vector whose weight mixes to r̄ = 0.07
        let mut rows = Array2::zeros((2, 512));
        rows[[0, 0]] = 1.0;
        rows[[1, 1]] = 1.0;
        let w = vec![array![0.07, 0.0]];
        let est = update_kappa(&w, &[rows.view()], KappaRule::Order0, 1e6).unwrap();
        assert_relative_eq!(est.kappa, 35.84, epsilon = 1e-10);

        let w = vec![array![0.3, 0.7]];
        let est = update_kappa(&w, &[rows.view()], KappaRule::Exact, 1e6).unwrap();
        let rbar = (0.09f64 + 0.49).sqrt();
        assert!((crate::directional::bessel_ratio(512, est.kappa).unwrap() - rbar).abs() <= 1e-8);
    }

    #[test]
    fn marginal_log_likelihood_examples() {
        let s = set_of("a", array![[1.0, 0.0]]);
        let v = marginal_log_likelihood(
            array![1.0, 0.0].view(),
            3.5,
            &BackgroundModel::Uniform,
            &[s],
        )
        .unwrap();
        assert_relative_eq!(v, 3.5, epsilon = 1e-15);
    }

    #[test]
    fn query_score_examples() {
        // κ=10, θᵀx = 0.9, log u⁻ = −2 → logit 11
        let q = set_of("q", array![[0.9, (1.0f64 - 0.81).sqrt()]]);
        let bg = BackgroundModel::Vmf(VmfParams::new(array![-1.0, 0.0], 2.0 / 0.9).unwrap());
        let s = score_query(array![1.0, 0.0].view(), 10.0, &bg, 1.0, &q).unwrap();
        assert_relative_eq!(s.logits[0], 11.0, epsilon = 1e-12);
        assert_relative_eq!(s.probs[0], 0.999_983_298_578_152_5, epsilon = 1e-12);
    }

    #[test]
    fn t0_returns_prototype_and_single_e_step() {
        let a = set_of("a", array![[0.6, 0.8], [1.0, 0.0]]);
        let b = set_of("b", array![[0.8, 0.6], [0.0, 1.0]]);
        let cfg = ColConfig {
            max_iters: 0,
            kappa_init: Some(2.0),
            ..Default::default()
        };
        let r = run_col(&cfg, &BackgroundModel::Uniform, &[a.clone(), b.clone()]).unwrap();
        let proto = init_direction(&[a.clone(), b], InitStrategy::Prototypical).unwrap();
        assert_eq!(r.theta(), proto);
        assert_eq!(r.iterations, 0);
        assert_eq!(
            r.soft_labels[0],
            e_step(proto.view(), 2.0, &BackgroundModel::Uniform, &a)
                .unwrap()
                .to_vec()
        );
    }

    #[test]
    fn result_json_round_trip() {
        let a = set_of("a", array![[0.6, 0.8], [1.0, 0.0]]);
        let r = run_col(&ColConfig::default(), &BackgroundModel::Uniform, &[a]).unwrap();
        let back: ColResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn config_validation() {
        assert!(ColConfig {
            lambda: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ColConfig {
            model: ColModel::Gaussian { sigma: 0.0 },
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(ColConfig::default().initial_kappa(16), 1.6);
        let c = ColConfig {
            kappa_rule: Some(KappaRule::Constant(50.0)),
            ..Default::default()
        };
        assert_eq!(c.initial_kappa(16), 50.0);
    }
}
