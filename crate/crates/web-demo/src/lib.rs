//! Browser demo bindings: three interactive operations over the core engine,
//! each returning a JSON payload the static page renders onto canvases.
//!
//! The functions are thin wrappers around pure helpers so the crate also
//! compiles and tests on the host toolchain.

use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use facmix::densities::tpb_pdf;
use facmix::em::fit_em;
use facmix::simgen::{gen_dataset, SimConfig};
use facmix::stability::{dense_stability, sparse_stability};
use facmix::types::Hyperparameters;

#[derive(Serialize)]
struct Curve {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn tpb_curve_impl(a: f64, b: f64, phi: f64, points: usize) -> Result<Curve, String> {
    if points < 2 {
        return Err("need at least 2 points".into());
    }
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    for i in 0..points {
        let x = (i as f64 + 0.5) / points as f64;
        xs.push(x);
        ys.push(tpb_pdf(x, a, b, phi).map_err(|e| e.to_string())?);
    }
    Ok(Curve { xs, ys })
}

/// Density of the three-parameter-beta shrinkage weight on a midpoint grid.
#[wasm_bindgen]
pub fn tpb_curve(a: f64, b: f64, phi: f64, points: usize) -> Result<String, JsValue> {
    let curve = tpb_curve_impl(a, b, phi, points).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&curve).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Serialize)]
struct FitDemo {
    truth: Vec<Vec<f64>>,
    fitted: Vec<Vec<f64>>,
    r_s: f64,
    factors: usize,
    iterations: usize,
    converged: bool,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn demo_config(seed: u64, n: usize, p: usize, k_sparse: usize, noise_sd: f64) -> SimConfig {
    SimConfig {
        n,
        p,
        k_sparse,
        k_dense: 0,
        cluster_min: (p / 8).max(2),
        cluster_max: (p / 4).max(3),
        noise_sd,
        seed,
    }
}

fn simulate_and_fit_impl(
    seed: u64,
    n: usize,
    p: usize,
    k_sparse: usize,
    noise_sd: f64,
) -> Result<FitDemo, String> {
    if n > 300 || p > 300 || k_sparse > 10 {
        return Err("demo sizes are capped at n,p <= 300 and 10 factors".into());
    }
    let config = demo_config(seed, n, p, k_sparse, noise_sd);
    let (y, truth) = gen_dataset(&config).map_err(|e| e.to_string())?;
    let hyper = Hyperparameters {
        k_init: (2 * k_sparse + 2).min(12),
        max_iters: 400,
        ..Hyperparameters::default()
    };
    let report = fit_em(&y, &hyper, seed).map_err(|e| e.to_string())?;
    let r_s = sparse_stability(&truth.lambda, &report.factor_state.lambda)
        .map_err(|e| e.to_string())?
        .r_s;
    Ok(FitDemo {
        truth: matrix_rows(&truth.lambda),
        fitted: matrix_rows(&report.factor_state.lambda),
        r_s,
        factors: report.factor_state.lambda.nrows(),
        iterations: report.iterations,
        converged: report.converged,
    })
}

/// Simulate a sparse data set, fit it with EM, and return both loading
/// matrices plus the recovery score for heatmap rendering.
#[wasm_bindgen]
pub fn simulate_and_fit(
    seed: u64,
    n: usize,
    p: usize,
    k_sparse: usize,
    noise_sd: f64,
) -> Result<String, JsValue> {
    let demo = simulate_and_fit_impl(seed, n, p, k_sparse, noise_sd)
        .map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&demo).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Serialize)]
struct StabilityDemo {
    r_s: f64,
    r_d: f64,
    factors_a: usize,
    factors_b: usize,
}

fn stability_pair_impl(seed_data: u64, seed_a: u64, seed_b: u64) -> Result<StabilityDemo, String> {
    let config = demo_config(seed_data, 100, 60, 4, 1.0);
    let (y, _) = gen_dataset(&config).map_err(|e| e.to_string())?;
    let hyper =
        Hyperparameters { k_init: 10, max_iters: 400, ..Hyperparameters::default() };
    let fit_a = fit_em(&y, &hyper, seed_a).map_err(|e| e.to_string())?;
    let fit_b = fit_em(&y, &hyper, seed_b).map_err(|e| e.to_string())?;
    let la = &fit_a.factor_state.lambda;
    let lb = &fit_b.factor_state.lambda;
    Ok(StabilityDemo {
        r_s: sparse_stability(la, lb).map_err(|e| e.to_string())?.r_s,
        r_d: dense_stability(la, lb).map_err(|e| e.to_string())?.r_d,
        factors_a: la.nrows(),
        factors_b: lb.nrows(),
    })
}

/// Fit the same simulated data from two EM starting seeds and report how
/// stable the recovered factors are under both statistics.
#[wasm_bindgen]
pub fn stability_pair(seed_data: u64, seed_a: u64, seed_b: u64) -> Result<String, JsValue> {
    let demo =
        stability_pair_impl(seed_data, seed_a, seed_b).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&demo).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tpb_curve_integrates_to_one() {
        let c = tpb_curve_impl(0.5, 0.5, 1.0, 2000).unwrap();
        let mass: f64 = c.ys.iter().sum::<f64>() / 2000.0;
        assert!((mass - 1.0).abs() < 0.01, "midpoint mass {mass}");
        assert!(tpb_curve_impl(0.5, 0.5, 1.0, 1).is_err());
    }

    #[test]
    fn fit_demo_recovers_planted_factors() {
        let demo = simulate_and_fit_impl(3, 120, 80, 3, 0.7).unwrap();
        assert!(demo.factors >= 3);
        assert!(demo.r_s > 0.7, "r_s {}", demo.r_s);
        assert_eq!(demo.truth.len(), 3);
        assert!(simulate_and_fit_impl(3, 1000, 80, 3, 0.7).is_err());
    }

    #[test]
    fn stability_demo_same_seed_is_maximally_stable() {
        // Identical fits: the dense statistic is exactly 0, and the sparse
        // statistic is as high as the recovered factors' mutual correlations
        // allow (a self-comparison scores below 1 when rows overlap).
        let same = stability_pair_impl(1, 2, 2).unwrap();
        assert!(same.r_d <= 1e-20, "r_d {}", same.r_d);
        assert_eq!(same.factors_a, same.factors_b);
        let diff = stability_pair_impl(1, 2, 3).unwrap();
        assert!(same.r_s >= diff.r_s - 1e-12);
        assert!(diff.r_s > 0.5, "different starts still overlap, r_s {}", diff.r_s);
    }
}
