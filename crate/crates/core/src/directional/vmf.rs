use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bessel::{log_bessel_i, log_bessel_i_scaled};
use super::kappa::{estimate_kappa, KappaRule};
use crate::error::{Error, Result};

/// Resultant norms below this leave the mean direction undefined.
pub const DEGENERATE_NORM: f64 = 1e-12;

const THETA_NORM_TOL: f64 = 1e-10;

pub(crate) fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidConfig(format!(
            "dimension must be >= 2, got {d}"
        )));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Domain(format!(
            "kappa must be finite and >= 0, got {kappa}"
        )));
    }
    Ok(())
}

/// `log Z(κ)` with `Z(κ) = (2π)^{d/2} I_{d/2−1}(κ) / κ^{d/2−1}`.
///
/// At `κ = 0` this is the log surface area of `S^{d−1}`.
pub fn log_normalizer(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_kappa(kappa)?;
    let half = d as f64 / 2.0;
    Ok(half * (2.0 * PI).ln() + log_bessel_i_scaled(half - 1.0, kappa))
}

/// Log surface area of the unit sphere `S^{d−1}`.
pub fn log_sphere_area(d: usize) -> Result<f64> {
    log_normalizer(d, 0.0)
}

/// `A_d(κ) = I_{d/2}(κ) / I_{d/2−1}(κ)`, the expected resultant length.
pub fn bessel_ratio(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_kappa(kappa)?;
    Ok(bessel_ratio_unchecked(d, kappa))
}

pub(crate) fn bessel_ratio_unchecked(d: usize, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let nu = d as f64 / 2.0 - 1.0;
    if kappa <= 1.0 {
        // scaled form keeps tiny arguments exact
        kappa * (log_bessel_i_scaled(nu + 1.0, kappa) - log_bessel_i_scaled(nu, kappa)).exp()
    } else {
        (log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa)).exp()
    }
}

/// Mean direction and concentration of a von Mises-Fisher distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub theta: Array1<f64>,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(theta: Array1<f64>, kappa: f64) -> Result<Self> {
        let params = Self { theta, kappa };
        params.validate()?;
        Ok(params)
    }

    /// Normalizes `direction` before constructing.
    pub fn from_direction(direction: ArrayView1<f64>, kappa: f64) -> Result<Self> {
        Self::new(normalize(direction)?, kappa)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.theta.len())?;
        check_kappa(self.kappa)?;
        let norm = self.theta.dot(&self.theta).sqrt();
        if (norm - 1.0).abs() > THETA_NORM_TOL {
            return Err(Error::Validation(format!(
                "mean direction has norm {norm}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Weighted resultant of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultantSummary {
    pub resultant: Array1<f64>,
    /// `‖r‖ / Σw`
    pub rbar: f64,
    /// `Σw`; the point count when unweighted.
    pub count: f64,
}

impl ResultantSummary {
    pub fn from_points(points: ArrayView2<f64>, weights: Option<&[f64]>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::Validation("need at least one point".into()));
        }
        let (resultant, count) = match weights {
            None => (points.sum_axis(Axis(0)), n as f64),
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: w.len(),
                    });
                }
                if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return Err(Error::Validation(
                        "weights must be finite and nonnegative".into(),
                    ));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Validation("weights are all zero".into()));
                }
                let mut r = Array1::zeros(points.ncols());
                for (row, &wi) in points.outer_iter().zip(w) {
                    r.scaled_add(wi, &row);
                }
                (r, total)
            }
        };
        Ok(Self::from_resultant(resultant, count))
    }

    pub fn from_resultant(resultant: Array1<f64>, count: f64) -> Self {
        let rbar = resultant.dot(&resultant).sqrt() / count;
        Self {
            resultant,
            rbar,
            count,
        }
    }
}

/// Result of a maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct VmfFit {
    pub params: VmfParams,
    pub summary: ResultantSummary,
    pub saturated: bool,
}

/// Fit mean direction `r/‖r‖` and concentration from `rule` applied to `r̄`.
pub fn fit_vmf(
    points: ArrayView2<f64>,
    weights: Option<&[f64]>,
    rule: KappaRule,
    kappa_max: f64,
) -> Result<VmfFit> {
    let d = points.ncols();
    check_dim(d)?;
    let summary = ResultantSummary::from_points(points, weights)?;
    let theta = normalize(summary.resultant.view())?;
    let est = estimate_kappa(summary.rbar, d, rule, kappa_max)?;
    Ok(VmfFit {
        params: VmfParams {
            theta,
            kappa: est.kappa,
        },
        summary,
        saturated: est.saturated,
    })
}

/// `κ θᵀx − log Z(κ)`
pub fn vmf_log_density(params: &VmfParams, x: ArrayView1<f64>) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: x.len(),
        });
    }
    Ok(params.kappa * params.theta.dot(&x) - log_normalizer(params.dim(), params.kappa)?)
}

/// ℓ2-normalize, failing on vectors shorter than [`DEGENERATE_NORM`].
pub fn normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(Error::DegenerateResultant { norm });
    }
    Ok(&v / norm)
}

/// Uniform draw from `S^{d−1}` via normalized standard normals.
pub fn uniform_unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Draw `n` points from vMF(θ, κ) by Wood's rejection scheme.
///
/// The tangent component is uniform on the orthogonal sphere; a Householder
/// reflection then maps the north pole `e₁` onto `θ`.
pub fn sample_vmf<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Array2<f64> {
    let d = params.dim();
    let dm1 = (d - 1) as f64;
    let kappa = params.kappa;

    // b = (−2κ + √(4κ² + (d−1)²)) / (d−1), rearranged to avoid cancellation
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let one_minus_x0 = 2.0 * b / (1.0 + b);
    let x0 = (1.0 - b) / (1.0 + b);
    let log_one_minus_x0_sq = (4.0 * b / ((1.0 + b) * (1.0 + b))).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("beta shape parameters are positive");

    let mut out = Array2::zeros((n, d));
    for mut row in out.outer_iter_mut() {
        let (w, one_minus_w) = loop {
            let z: f64 = beta.sample(rng);
            let denom = 1.0 - (1.0 - b) * z;
            let one_minus_w = 2.0 * b * z / denom;
            let w = (1.0 - (1.0 + b) * z) / denom;
            let one_minus_x0w = one_minus_x0 + x0 * one_minus_w;
            let log_u = rng.gen::<f64>().ln();
            let lhs = kappa * (one_minus_x0 - one_minus_w)
                + dm1 * (one_minus_x0w.ln() - log_one_minus_x0_sq);
            if lhs >= log_u {
                break (w, one_minus_w);
            }
        };
        let tangent = uniform_unit_vector(d - 1, rng);
        let s = (one_minus_w * (1.0 + w)).max(0.0).sqrt();
        row[0] = w;
        for (dst, &t) in row.iter_mut().skip(1).zip(tangent.iter()) {
            *dst = s * t;
        }
    }
    reflect_north_pole_onto(&mut out, params.theta.view());
    out
}

fn reflect_north_pole_onto(points: &mut Array2<f64>, theta: ArrayView1<f64>) {
    let mut u = theta.mapv(|t| -t);
    u[0] += 1.0;
    let norm = u.dot(&u).sqrt();
    if norm < 1e-14 {
        return;
    }
    u /= norm;
    for mut row in points.outer_iter_mut() {
        let proj = 2.0 * row.dot(&u);
        row.scaled_add(-proj, &u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizer_closed_form_d3() {
        // Z = 4π sinh κ / κ
        assert_relative_eq!(
            log_normalizer(3, 1.0).unwrap(),
            2.692_463_608_540_486_4,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            log_normalizer(2, 0.0).unwrap(),
            (2.0 * PI).ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            log_normalizer(3, 0.0).unwrap(),
            (4.0 * PI).ln(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn normalizer_high_dimension_reference() {
        // mpmath, 50 digits
        assert_relative_eq!(
            log_normalizer(100, 700.0).unwrap(),
            464.981_092_269_837_5,
            max_relative = 1e-10
        );
    }

    #[test]
    fn bessel_ratio_reference_values() {
        assert_relative_eq!(
            bessel_ratio(3, 2.0).unwrap(),
            0.537_314_720_727_548,
            max_relative = 1e-12
        );
        let a = bessel_ratio(512, 51.2).unwrap();
        assert!(a > 0.0 && a < 0.1);
        assert_relative_eq!(a, 0.099_023_183_061_928_46, max_relative = 1e-10);
        assert_eq!(bessel_ratio(7, 0.0).unwrap(), 0.0);
        // small-argument limit κ/d
        assert_relative_eq!(bessel_ratio(10, 1e-9).unwrap(), 1e-10, max_relative = 1e-8);
    }

    #[test]
    fn density_at_mode_d3() {
        let p = VmfParams::new(array![0.0, 0.0, 1.0], 1.0).unwrap();
        let v = vmf_log_density(&p, array![0.0, 0.0, 1.0].view()).unwrap();
        assert_relative_eq!(v, 1.0 - 2.692_463_608_540_486_4, max_relative = 1e-12);
        let flat = VmfParams::new(array![1.0, 0.0], 0.0).unwrap();
        let v = vmf_log_density(&flat, array![0.6, 0.8].view()).unwrap();
        assert_relative_eq!(v, -(2.0 * PI).ln(), max_relative = 1e-14);
        assert!(vmf_log_density(&flat, array![1.0, 0.0, 0.0].view()).is_err());
    }

    #[test]
    fn fit_all_identical_points_saturates() {
        let pts = Array2::from_shape_fn((5, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let fit = fit_vmf(pts.view(), None, KappaRule::Exact, 1e6).unwrap();
        assert_relative_eq!(fit.params.theta[0], 1.0);
        assert_relative_eq!(fit.summary.rbar, 1.0);
        assert_eq!(fit.params.kappa, 1e6);
        assert!(fit.saturated);
    }

    #[test]
    fn fit_antipodal_is_degenerate() {
        let pts = array![[1.0, 0.0], [-1.0, 0.0]];
        let err = fit_vmf(pts.view(), None, KappaRule::Order0, 1e6).unwrap_err();
        assert!(matches!(err, Error::DegenerateResultant { .. }));
        let err = fit_vmf(pts.view(), Some(&[0.0, 0.0]), KappaRule::Order0, 1e6).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn sampling_is_deterministic_and_unit_norm() {
        let p = VmfParams::from_direction(array![1.0, 2.0, -1.0, 0.5].view(), 7.0).unwrap();
        let a = sample_vmf(&p, 50, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_vmf(&p, 50, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        for row in a.outer_iter() {
            assert_relative_eq!(row.dot(&row), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_extreme_concentration_hugs_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = uniform_unit_vector(16, &mut rng);
        let p = VmfParams::new(theta, 1e6).unwrap();
        let xs = sample_vmf(&p, 200, &mut rng);
        for row in xs.outer_iter() {
            let angle = row.dot(&p.theta).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-2, "angle {angle}");
        }
    }
}
