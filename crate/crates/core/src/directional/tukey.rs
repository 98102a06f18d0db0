use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Offset inside the logarithm used when `beta == 0`.
pub const TUKEY_LOG_EPS: f64 = 1e-6;

/// Tukey's ladder of powers applied elementwise, then each row rescaled to
/// unit ℓ2 norm.
///
/// `beta != 0` raises entries to `beta`; `beta == 0` takes `ln(x + ε)`.
/// Fractional powers and the log branch require nonnegative input.
pub fn tukey_transform(raw: ArrayView2<f64>, beta: f64) -> Result<Array2<f64>> {
    if !beta.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "tukey beta must be finite, got {beta}"
        )));
    }
    let integral = beta.fract() == 0.0 && beta != 0.0;
    if !integral {
        if let Some(((i, j), v)) = raw.indexed_iter().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::Domain(format!(
                "tukey transform with beta={beta} needs nonnegative input; entry ({i}, {j}) is {v}"
            )));
        }
    }
    let mut out = if beta == 0.0 {
        raw.mapv(|x| (x + TUKEY_LOG_EPS).ln())
    } else if integral {
        raw.mapv(|x| x.powi(beta as i32))
    } else {
        raw.mapv(|x| x.powf(beta))
    };
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain(format!(
                "row {i} has norm {norm} after tukey transform"
            )));
        }
        row /= norm;
    }
    Ok(out)
}
