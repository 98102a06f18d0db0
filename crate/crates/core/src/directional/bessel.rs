//! Logarithm of the modified Bessel function of the first kind.
//!
//! `log I_ν(x)` is evaluated without ever forming `I_ν(x)` itself, so the
//! result stays finite for orders in the thousands and arguments up to the
//! concentration cap. Three regimes are used:
//!
//! * ascending power series for small arguments and low orders,
//! * Hankel's large-argument expansion for low orders and large arguments,
//! * Debye's uniform asymptotic expansion for orders `ν ≥ 10`.
//!
//! The Debye polynomials `u_k(t)` are generated once from their recurrence
//! rather than transcribed, which keeps all fourteen terms exact to rounding.

use std::f64::consts::PI;
use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

const DEBYE_MIN_ORDER: f64 = 10.0;
const SERIES_MAX_ARG: f64 = 60.0;
const DEBYE_TERMS: usize = 14;
const REL_EPS: f64 = 1e-17;

/// `ln I_ν(x)` for `ν ≥ 0`, `x ≥ 0`.
///
/// Returns `-inf` for `x = 0, ν > 0` and `0` for `x = 0, ν = 0`. Inputs
/// outside the domain yield `NaN`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    if !(nu >= 0.0) || !(x >= 0.0) {
        return f64::NAN;
    }
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    if nu >= DEBYE_MIN_ORDER {
        log_debye(nu, x)
    } else if x <= SERIES_MAX_ARG {
        log_series(nu, x)
    } else {
        log_hankel(nu, x)
    }
}

/// `ln I_ν(x) − ν ln x`, which stays finite as `x → 0`.
///
/// This is the quantity needed by the vMF normalizer; computing it directly
/// in the series regime avoids cancelling two large logarithms.
pub fn log_bessel_i_scaled(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return -nu * std::f64::consts::LN_2 - ln_gamma(nu + 1.0);
    }
    if nu < DEBYE_MIN_ORDER && x <= SERIES_MAX_ARG {
        return -nu * std::f64::consts::LN_2 - ln_gamma(nu + 1.0) + series_sum(nu, x).ln();
    }
    log_bessel_i(nu, x) - nu * x.ln()
}

/// `Σ_k (x²/4)^k / (k! (ν+1)_k)`; all terms positive.
fn series_sum(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (nu + k));
        sum += term;
        if term <= sum * REL_EPS || k > 10_000.0 {
            break;
        }
    }
    sum
}

fn log_series(nu: f64, x: f64) -> f64 {
    nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + series_sum(nu, x).ln()
}

fn log_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut k = 1.0_f64;
    loop {
        let odd = 2.0 * k - 1.0;
        let next = -term * (mu - odd * odd) / (k * 8.0 * x);
        if next.abs() >= term.abs() || next.abs() <= sum.abs() * REL_EPS {
            if next.abs() < term.abs() {
                sum += next;
            }
            break;
        }
        sum += next;
        term = next;
        k += 1.0;
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

fn log_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let root = z.hypot(1.0);
    let t = root.recip();
    let eta = root + (z / (1.0 + root)).ln();

    let polys = debye_polynomials();
    let mut sum = 1.0;
    let mut nu_pow = 1.0;
    for poly in polys.iter().skip(1) {
        nu_pow *= nu;
        let term = horner(poly, t) / nu_pow;
        sum += term;
        if term.abs() <= REL_EPS * sum.abs() {
            break;
        }
    }
    nu * eta - 0.5 * (2.0 * PI * nu).ln() - 0.5 * root.ln() + sum.ln()
}

fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Coefficients (ascending powers of `t`) of `u_0 … u_{DEBYE_TERMS}` from
/// `u_{k+1}(t) = ½ t²(1−t²) u_k'(t) + ⅛ ∫₀ᵗ (1−5s²) u_k(s) ds`.
fn debye_polynomials() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut out = vec![vec![1.0]];
        for _ in 0..DEBYE_TERMS {
            let u = out.last().unwrap();
            let degree = u.len() - 1;
            let mut next = vec![0.0; degree + 4];
            // ½ t²(1−t²) u'(t)
            for i in 1..=degree {
                let di = i as f64 * u[i];
                next[i + 1] += 0.5 * di;
                next[i + 3] -= 0.5 * di;
            }
            // ⅛ ∫₀ᵗ (1−5s²) u(s) ds
            for (i, &c) in u.iter().enumerate() {
                next[i + 1] += c / (8.0 * (i as f64 + 1.0));
                next[i + 3] -= 5.0 * c / (8.0 * (i as f64 + 3.0));
            }
            out.push(next);
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn debye_polynomials_match_tabulated_low_orders() {
        let p = debye_polynomials();
        // u1 = (3t − 5t³)/24
        assert_relative_eq!(p[1][1], 3.0 / 24.0, epsilon = 1e-16);
        assert_relative_eq!(p[1][3], -5.0 / 24.0, epsilon = 1e-16);
        // u2 = (81t² − 462t⁴ + 385t⁶)/1152
        assert_relative_eq!(p[2][2], 81.0 / 1152.0, epsilon = 1e-16);
        assert_relative_eq!(p[2][4], -462.0 / 1152.0, epsilon = 1e-16);
        assert_relative_eq!(p[2][6], 385.0 / 1152.0, epsilon = 1e-16);
        // u3 = (30375t³ − 369603t⁵ + 765765t⁷ − 425425t⁹)/414720
        assert_relative_eq!(p[3][3], 30375.0 / 414720.0, max_relative = 1e-14);
        assert_relative_eq!(p[3][9], -425425.0 / 414720.0, max_relative = 1e-14);
    }

    #[test]
    fn half_integer_orders_match_closed_forms() {
        // I_{1/2}(x) = sqrt(2/(πx)) sinh x
        for &x in &[1e-3, 0.1, 1.0, 10.0, 59.0, 61.0, 100.0, 700.0] {
            let exact = (2.0 / (PI * x)).sqrt().ln() + x + (-(-2.0 * x).exp()).ln_1p()
                - std::f64::consts::LN_2;
            assert_relative_eq!(
                log_bessel_i(0.5, x),
                exact,
                max_relative = 1e-13,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn integer_order_reference_values() {
        // Reference values from 50-digit arithmetic (mpmath).
        let cases = [
            (0.0, 1.0, 0.235_914_358_507_178_65_f64),
            (1.0, 1.0, -0.570_647_987_490_831_3),
            (0.0, 100.0, 96.779_732_689_942_58),
            (12.0, 5.0, -8.518_877_595_776_598),
            (49.0, 700.0, 694.090_175_366_497_1),
            (10.0, 0.5, -28.961_675_710_436_746),
            (10.0, 5.0, -5.386_046_582_393_019),
            (10.0, 30.0, 25.705_719_808_142_33),
            (10.0, 60.0, 56.197_596_075_812),
            (255.0, 51.2, -332.303_636_060_554_8),
            (255.0, 1e5, 99_992.999_473_534_86),
            (2047.0, 1e5, 99_972.374_181_735_1),
            (2047.0, 3.0, -12_734.338_178_454_746),
        ];
        for (nu, x, expected) in cases {
            assert_relative_eq!(log_bessel_i(nu, x), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn regimes_agree_at_boundaries() {
        for &nu in &[0.0, 0.5, 3.0, 9.5] {
            let a = log_series(nu, SERIES_MAX_ARG);
            let b = log_hankel(nu, SERIES_MAX_ARG);
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
        for &x in &[0.5_f64, 5.0, 30.0, 200.0] {
            let a = log_series(DEBYE_MIN_ORDER, x.min(SERIES_MAX_ARG));
            let b = log_debye(DEBYE_MIN_ORDER, x.min(SERIES_MAX_ARG));
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_argument_and_domain() {
        assert_eq!(log_bessel_i(0.0, 0.0), 0.0);
        assert_eq!(log_bessel_i(2.0, 0.0), f64::NEG_INFINITY);
        assert!(log_bessel_i(-1.0, 1.0).is_nan());
        assert!(log_bessel_i(1.0, -1.0).is_nan());
    }
}
