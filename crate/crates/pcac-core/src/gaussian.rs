//! Normal-distribution helpers built on `libm` so results are identical on
//! every platform.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Probability masses below this are treated as this value.
pub const MASS_FLOOR: f64 = 1e-300;

/// Standard normal CDF.
pub fn cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal upper tail `1 - cdf(z)`.
pub fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

pub fn pdf(z: f64) -> f64 {
    libm::exp(-0.5 * z * z) / (2.0 * PI).sqrt()
}

/// Mass of `N(mu, sigma^2)` on the unit bin `[center - 1/2, center + 1/2]`.
///
/// The difference is taken on whichever tail keeps both terms small, so bins
/// far from the mean keep their relative precision.
pub fn bin_mass(center: f64, mu: f64, sigma: f64) -> f64 {
    let lo = (center - 0.5 - mu) / sigma;
    let hi = (center + 0.5 - mu) / sigma;
    interval_mass(lo, hi)
}

fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo + hi > 0.0 {
        upper_tail(lo) - upper_tail(hi)
    } else {
        cdf(hi) - cdf(lo)
    }
}

/// Unit-bin mass and its partial derivatives with respect to
/// `(center, mu, sigma)`.
pub fn bin_mass_with_grad(center: f64, mu: f64, sigma: f64) -> (f64, [f64; 3]) {
    let lo = (center - 0.5 - mu) / sigma;
    let hi = (center + 0.5 - mu) / sigma;
    let mass = interval_mass(lo, hi);
    let (plo, phi) = (pdf(lo), pdf(hi));
    let d_center = (phi - plo) / sigma;
    let d_sigma = (plo * lo - phi * hi) / sigma;
    (mass, [d_center, -d_center, d_sigma])
}

/// `-log2` of the unit-bin mass and its gradient, with the mass floored at
/// [`MASS_FLOOR`] (zero gradient below the floor).
pub fn bin_bits_with_grad(center: f64, mu: f64, sigma: f64) -> (f64, [f64; 3]) {
    let (mass, d) = bin_mass_with_grad(center, mu, sigma);
    if mass <= MASS_FLOOR {
        return (-MASS_FLOOR.log2(), [0.0; 3]);
    }
    let scale = -1.0 / (mass * std::f64::consts::LN_2);
    (-mass.log2(), d.map(|v| v * scale))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_bin_of_standard_normal() {
        // erf(0.5 / sqrt 2)
        assert!((bin_mass(0.0, 0.0, 1.0) - 0.382_924_922_548_026).abs() < 1e-12);
    }

    #[test]
    fn far_tail_keeps_precision() {
        let m = bin_mass(30.0, 0.0, 1.0);
        assert!(m > 0.0 && m < 1e-190);
        assert_eq!(bin_mass(30.0, 0.0, 1.0), bin_mass(-30.0, 0.0, 1.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-6;
        for &(c, mu, s) in &[(0.3, -0.2, 0.7), (2.0, 0.1, 0.4), (-1.0, 0.5, 3.0)] {
            let (_, g) = bin_bits_with_grad(c, mu, s);
            let f = |c: f64, mu: f64, s: f64| bin_bits_with_grad(c, mu, s).0;
            let fd = [
                (f(c + h, mu, s) - f(c - h, mu, s)) / (2.0 * h),
                (f(c, mu + h, s) - f(c, mu - h, s)) / (2.0 * h),
                (f(c, mu, s + h) - f(c, mu, s - h)) / (2.0 * h),
            ];
            for k in 0..3 {
                assert!((g[k] - fd[k]).abs() < 1e-6 * (1.0 + fd[k].abs()), "{k}: {g:?} {fd:?}");
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
