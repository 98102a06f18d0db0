//! Concentration estimation from the mean resultant length.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::vmf::{bessel_ratio_unchecked, check_dim};
use crate::error::{Error, Result};

/// Upper cap applied to every concentration estimate.
pub const DEFAULT_KAPPA_MAX: f64 = 1e6;

const RBAR_SLACK: f64 = 1e-12;

/// How the concentration is obtained from a resultant summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum KappaRule {
    /// Fixed concentration, ignores the data.
    Constant(f64),
    /// `d r̄`
    Order0,
    /// `d r̄ (1 + r̄²)`
    Order1,
    /// `d r̄ (1 + r̄² + r̄⁴)`
    Order2,
    /// `d r̄ (1 + r̄² + r̄⁴ + r̄⁶)`
    Order3,
    /// `d r̄ / (1 − r̄²)`
    OrderInf,
    /// `A_d⁻¹(r̄)` by safeguarded Newton iteration.
    Exact,
}

impl KappaRule {
    /// Every data-driven rule, in increasing-estimate order.
    pub const ESTIMATORS: [KappaRule; 6] = [
        KappaRule::Order0,
        KappaRule::Order1,
        KappaRule::Order2,
        KappaRule::Order3,
        KappaRule::OrderInf,
        KappaRule::Exact,
    ];

    pub fn validate(&self) -> Result<()> {
        match *self {
            KappaRule::Constant(v) if !(v >= 0.0 && v.is_finite()) => Err(Error::InvalidConfig(
                format!("constant kappa must be finite and >= 0, got {v}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KappaRule::Constant(_) => "constant",
            KappaRule::Order0 => "order0",
            KappaRule::Order1 => "order1",
            KappaRule::Order2 => "order2",
            KappaRule::Order3 => "order3",
            KappaRule::OrderInf => "order_inf",
            KappaRule::Exact => "exact",
        }
    }
}

impl fmt::Display for KappaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KappaRule::Constant(v) => write!(f, "constant:{v}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for KappaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let rule = match lower.as_str() {
            "order0" => KappaRule::Order0,
            "order1" => KappaRule::Order1,
            "order2" => KappaRule::Order2,
            "order3" => KappaRule::Order3,
            "order_inf" | "orderinf" | "order-inf" => KappaRule::OrderInf,
            "exact" => KappaRule::Exact,
            other => match other.strip_prefix("constant:") {
                Some(v) => KappaRule::Constant(v.parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad constant kappa `{v}`"))
                })?),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown kappa rule `{s}` (expected constant:<v>, order0..order3, order_inf, exact)"
                    )))
                }
            },
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// Outcome of a concentration estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaEstimate {
    pub kappa: f64,
    /// The estimate hit `kappa_max` (or `r̄ ≥ 1` for a divergent rule).
    pub saturated: bool,
}

/// Estimate κ for mean resultant length `rbar` in dimension `d`.
///
/// `rbar` may exceed 1 by at most 1e-12 (rounding); it is then clamped.
/// Divergent rules at `r̄ ≥ 1` saturate at `kappa_max` instead of failing.
pub fn estimate_kappa(
    rbar: f64,
    d: usize,
    rule: KappaRule,
    kappa_max: f64,
) -> Result<KappaEstimate> {
    check_dim(d)?;
    rule.validate()?;
    if !(kappa_max > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "kappa_max must be > 0, got {kappa_max}"
        )));
    }
    if !(0.0..=1.0 + RBAR_SLACK).contains(&rbar) {
        return Err(Error::Domain(format!(
            "mean resultant length {rbar} outside [0, 1]"
        )));
    }
    let r = rbar.min(1.0);
    let dr = d as f64 * r;
    let r2 = r * r;
    let raw = match rule {
        KappaRule::Constant(v) => v,
        KappaRule::Order0 => dr,
        KappaRule::Order1 => dr * (1.0 + r2),
        KappaRule::Order2 => dr * (1.0 + r2 * (1.0 + r2)),
        KappaRule::Order3 => dr * (1.0 + r2 * (1.0 + r2 * (1.0 + r2))),
        KappaRule::OrderInf => {
            if r >= 1.0 {
                f64::INFINITY
            } else {
                dr / (1.0 - r2)
            }
        }
        KappaRule::Exact => return Ok(invert_bessel_ratio(d, r, kappa_max)),
    };
    let est = cap(raw, kappa_max);
    if est.saturated {
        warn!("kappa estimate ({rule}) saturated at {kappa_max} for rbar={rbar}");
    }
    Ok(est)
}

fn cap(kappa: f64, kappa_max: f64) -> KappaEstimate {
    if kappa >= kappa_max {
        KappaEstimate {
            kappa: kappa_max,
            saturated: true,
        }
    } else {
        KappaEstimate {
            kappa,
            saturated: false,
        }
    }
}

/// Solve `A_d(κ) = r̄` on `[0, kappa_max]`.
///
/// Newton steps use `A_d′(κ) = 1 − A_d² − (d−1)A_d/κ`; any step leaving the
/// current bracket is replaced by bisection.
pub(crate) fn invert_bessel_ratio(d: usize, rbar: f64, kappa_max: f64) -> KappaEstimate {
    if rbar <= 0.0 {
        return KappaEstimate {
            kappa: 0.0,
            saturated: false,
        };
    }
    let saturated = KappaEstimate {
        kappa: kappa_max,
        saturated: true,
    };
    if rbar >= 1.0 || bessel_ratio_unchecked(d, kappa_max) <= rbar {
        warn!("exact kappa inversion saturated at {kappa_max} for rbar={rbar}");
        return saturated;
    }

    let df = d as f64;
    let (mut lo, mut hi) = (0.0_f64, kappa_max);
    let mut kappa =
        (rbar * (df - rbar * rbar) / (1.0 - rbar * rbar)).clamp(f64::MIN_POSITIVE, kappa_max * 0.5);
    let mut best = (f64::INFINITY, kappa);
    for _ in 0..300 {
        let a = bessel_ratio_unchecked(d, kappa);
        let resid = a - rbar;
        if resid.abs() < best.0 {
            best = (resid.abs(), kappa);
        }
        if resid.abs() <= 1e-15 {
            break;
        }
        if resid > 0.0 {
            hi = kappa;
        } else {
            lo = kappa;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let slope = 1.0 - a * a - (df - 1.0) * a / kappa;
        let newton = kappa - resid / slope;
        kappa = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    KappaEstimate {
        kappa: best.1,
        saturated: false,
    }
}
