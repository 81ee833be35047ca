//! Closed-form densities and modes shared by both inference engines.
//!
//! Everything here is a pure function; the log variants exist because the
//! factor indicator expectations multiply `p` densities together and underflow
//! in linear space.

use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

/// Three-parameter-beta density on `(0,1)`.
///
/// `a = b = 1/2`, `phi = 1` recovers the horseshoe-inducing Beta(1/2,1/2).
pub fn tpb_pdf(x: f64, a: f64, b: f64, phi: f64) -> Result<f64> {
    ln_tpb_pdf(x, a, b, phi).map(f64::exp)
}

pub fn ln_tpb_pdf(x: f64, a: f64, b: f64, phi: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("tpb_pdf requires x in (0,1), got {x}")));
    }
    check_positive("a", a)?;
    check_positive("b", b)?;
    check_positive("phi", phi)?;
    Ok(ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + b * phi.ln()
        + (b - 1.0) * x.ln()
        + (a - 1.0) * (1.0 - x).ln()
        - (a + b) * (1.0 + (phi - 1.0) * x).ln())
}

/// Inverse-beta (beta-prime) density on `(0, inf)`.
pub fn inv_beta_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    ln_inv_beta_pdf(x, alpha, beta).map(f64::exp)
}

pub fn ln_inv_beta_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("inv_beta_pdf requires x > 0, got {x}")));
    }
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    Ok((alpha - 1.0) * x.ln() - (alpha + beta) * x.ln_1p() - ln_beta(alpha, beta))
}

/// Mode of the generalized inverse Gaussian density
/// `f(x) ∝ x^(order-1) exp(-rate2*x/2 - quad/(2x))` on `(0, inf)`.
///
/// Returns the unique stationary point of the log-density,
/// `((order-1) + sqrt((order-1)^2 + rate2*quad)) / rate2`; this is 0 when
/// `order <= 1` and `quad = 0`. Parameterized by the exponent pair so the
/// element-level and factor-level variance updates can both reuse it.
pub fn gig_mode(order: f64, rate2: f64, quad: f64) -> Result<f64> {
    if rate2 <= 0.0 {
        return Err(Error::Domain(format!("gig_mode requires rate2 > 0, got {rate2}")));
    }
    if quad < 0.0 {
        return Err(Error::Domain(format!("gig_mode requires quad >= 0, got {quad}")));
    }
    let m = order - 1.0;
    Ok(((m * m + rate2 * quad).sqrt() + m) / rate2)
}

/// `ln N(x | 0, var)`.
pub fn ln_normal_pdf(x: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
}

/// `ln Ga(x | shape, rate)`.
pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be strictly positive, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Simpson quadrature on a fixed grid; accurate enough for 1e-8 checks on
    // the smooth integrands used here.
    fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn tpb_uniform_special_case() {
        assert_relative_eq!(tpb_pdf(0.3, 1.0, 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tpb_phi_one_is_beta_b_a() {
        // phi = 1 collapses the fourth factor; note the swapped argument order.
        assert_relative_eq!(
            tpb_pdf(0.5, 0.5, 0.5, 1.0).unwrap(),
            2.0 / std::f64::consts::PI,
            epsilon = 1e-12
        );
        let beta_half = |x: f64| {
            ((-0.5) * x.ln() + (-0.5) * (1.0 - x).ln()).exp() / std::f64::consts::PI
        };
        for i in 1..40 {
            let x = i as f64 / 40.0;
            assert_relative_eq!(
                tpb_pdf(x, 0.5, 0.5, 1.0).unwrap(),
                beta_half(x),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn tpb_integrates_to_one() {
        // Endpoint-singular at a,b < 1; integrate the transformed variable
        // x = sin^2(t) which removes both singularities for a,b >= 1/2.
        let f = |t: f64| {
            let x = t.sin().powi(2);
            let jac = 2.0 * t.sin() * t.cos();
            tpb_pdf(x, 0.5, 0.5, 3.0).unwrap() * jac
        };
        // The cut at t = 1e-6 keeps 1 - sin^2(t) well away from rounding to
        // zero; the removed endpoint mass is restored analytically from the
        // leading-order tail behavior x^(b-1) near 0 and (1-x)^(a-1) near 1.
        let (a, b, phi) = (0.5f64, 0.5f64, 3.0f64);
        let cut = 1e-6f64;
        let eps = cut.sin().powi(2);
        let norm = 1.0 / std::f64::consts::PI; // Gamma(a+b)/(Gamma(a)Gamma(b))
        let lower_tail = norm * phi.powf(b) * eps.powf(b) / b;
        let upper_tail = norm * phi.powf(b) * phi.powf(-(a + b)) * eps.powf(a) / a;
        let total = simpson(f, cut, std::f64::consts::FRAC_PI_2 - cut, 40_000)
            + lower_tail
            + upper_tail;
        assert_relative_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn inv_beta_at_one() {
        assert_relative_eq!(inv_beta_pdf(1.0, 1.0, 1.0).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn inv_beta_change_of_variables() {
        // f(x) = Beta(x/(1+x); alpha, beta) * (1+x)^-2
        let (x, alpha, beta) = (0.7, 0.5, 2.0);
        let u: f64 = x / (1.0 + x);
        let beta_pdf = ((alpha - 1.0) * u.ln() + (beta - 1.0) * (1.0 - u).ln()
            - ln_beta(alpha, beta))
        .exp();
        let expect = beta_pdf / ((1.0 + x) * (1.0 + x));
        assert_relative_eq!(inv_beta_pdf(x, alpha, beta).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn inv_beta_integrates_to_one() {
        // Map (0, inf) to (0,1) via x = u/(1-u).
        let f = |u: f64| {
            let x = u / (1.0 - u);
            inv_beta_pdf(x, 2.0, 3.0).unwrap() / ((1.0 - u) * (1.0 - u))
        };
        let total = simpson(f, 1e-10, 1.0 - 1e-10, 40_000);
        assert_relative_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn gig_mode_zero_cases() {
        assert_eq!(gig_mode(0.0, 4.0, 0.0).unwrap(), 0.0);
        assert!(gig_mode(1.5, 0.0, 1.0).is_err());
    }

    // Grid search plus golden-section refinement of the GIG log-density.
    fn numeric_gig_mode(order: f64, rate2: f64, quad: f64) -> f64 {
        let logf = |x: f64| (order - 1.0) * x.ln() - rate2 * x / 2.0 - quad / (2.0 * x);
        let mut best = (1e-6, logf(1e-6));
        let mut x = 1e-6;
        while x < 100.0 {
            let v = logf(x);
            if v > best.1 {
                best = (x, v);
            }
            x *= 1.001;
        }
        let (mut lo, mut hi) = (best.0 / 1.01, best.0 * 1.01);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if logf(m1) < logf(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        (lo + hi) / 2.0
    }

    #[test]
    fn gig_mode_matches_numeric_maximization() {
        for &(order, rate2, quad) in
            &[(1.5, 2.0, 2.0), (0.0, 4.0, 1.0), (-0.5, 1.0, 3.0), (2.0, 0.5, 0.25)]
        {
            let analytic = gig_mode(order, rate2, quad).unwrap();
            let numeric = numeric_gig_mode(order, rate2, quad);
            assert_relative_eq!(analytic, numeric, epsilon = 1e-5);
        }
        // Frozen from the numeric oracle: (0.5 + sqrt(4.25)) / 2.
        assert_relative_eq!(gig_mode(1.5, 2.0, 2.0).unwrap(), 1.2807764064044151, epsilon = 1e-12);
    }

    #[test]
    fn gig_mode_is_argmax() {
        for &(order, rate2, quad) in &[(1.5, 2.0, 2.0), (0.3, 1.0, 0.7), (3.0, 5.0, 0.0)] {
            let m = gig_mode(order, rate2, quad).unwrap();
            if m == 0.0 {
                continue;
            }
            let logf = |x: f64| (order - 1.0) * x.ln() - rate2 * x / 2.0 - quad / (2.0 * x);
            assert!(logf(m) >= logf(m * 1.001));
            assert!(logf(m) >= logf(m * 0.999));
        }
    }
}
