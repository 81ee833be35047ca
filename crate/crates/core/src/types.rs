//! Domain types shared by both inference engines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape/rate constants of the shrinkage hierarchy plus fitting controls.
///
/// The defaults recapitulate the horseshoe at all three levels
/// (`a = b = c = d = e = f = 0.5`, `nu = 1`) with a uniform prior on the
/// sparse/dense mixing proportion (`alpha = beta = 1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_init: usize,
    /// Element-level cutoff below which a loading counts as zero.
    pub zero_threshold: f64,
    /// Sparse-classification cutoff on the factor indicator probability.
    pub z_cutoff: f64,
    /// Iterations the nonzero count must hold steady to declare convergence.
    pub stable_window: usize,
    pub max_iters: usize,
    pub psi_floor: f64,
    /// Include the E-step covariance contribution in the residual variance
    /// update instead of the plain first-moment residual. Off by default.
    pub psi_second_moment: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            a: 0.5,
            b: 0.5,
            c: 0.5,
            d: 0.5,
            e: 0.5,
            f: 0.5,
            nu: 1.0,
            alpha: 1.0,
            beta: 1.0,
            k_init: 50,
            zero_threshold: 1e-10,
            z_cutoff: 0.5,
            stable_window: 20,
            max_iters: 2000,
            psi_floor: 1e-8,
            psi_second_moment: false,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("f", self.f),
            ("nu", self.nu),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("zero_threshold", self.zero_threshold),
            ("psi_floor", self.psi_floor),
        ];
        for (name, v) in shapes {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be strictly positive, got {v}")));
            }
        }
        if !(self.z_cutoff > 0.0 && self.z_cutoff < 1.0) {
            return Err(Error::Config(format!(
                "z_cutoff must lie in (0,1), got {}",
                self.z_cutoff
            )));
        }
        if self.k_init == 0 || self.stable_window == 0 || self.max_iters == 0 {
            return Err(Error::Config(
                "k_init, stable_window and max_iters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// An `n x p` observation matrix (samples by features).
#[derive(Debug, Clone)]
pub struct DataMatrix {
    pub values: DMatrix<f64>,
    pub row_labels: Option<Vec<String>>,
    pub col_labels: Option<Vec<String>>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2x2 data, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("data matrix contains non-finite entries".into()));
        }
        Ok(DataMatrix { values, row_labels: None, col_labels: None })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// The fitted triple: factors, loadings, and idiosyncratic variances.
#[derive(Debug, Clone)]
pub struct FactorState {
    /// `n x K` latent factor matrix.
    pub x: DMatrix<f64>,
    /// `K x p` loading matrix.
    pub lambda: DMatrix<f64>,
    /// Length-`p` diagonal of the residual covariance.
    pub psi: DVector<f64>,
}

impl FactorState {
    pub fn k(&self) -> usize {
        self.lambda.nrows()
    }
}

/// Every parameter of the shrinkage hierarchy and the mixture.
#[derive(Debug, Clone)]
pub struct ShrinkageState {
    /// `K x p` element-level variances.
    pub theta: DMatrix<f64>,
    /// `K x p` element-level rates.
    pub delta: DMatrix<f64>,
    /// Length-`K` factor-level variances.
    pub phi: DVector<f64>,
    /// Length-`K` factor-level rates.
    pub tau: DVector<f64>,
    /// Global shrinkage scale.
    pub eta: f64,
    /// Rate of the global scale.
    pub gamma: f64,
    /// Length-`K` sparse responsibilities, `rho_k = P(Z_k = 1)`.
    pub rho: DVector<f64>,
    /// Geometric mean `<ln pi>` of the sparse mixing weight.
    pub ln_pi: f64,
    /// Geometric mean `<ln(1 - pi)>`.
    pub ln_one_minus_pi: f64,
}

impl ShrinkageState {
    /// Neutral overdispersed start: unit scales, even mixture odds.
    pub fn neutral(k: usize, p: usize) -> Self {
        ShrinkageState {
            theta: DMatrix::from_element(k, p, 1.0),
            delta: DMatrix::from_element(k, p, 1.0),
            phi: DVector::from_element(k, 1.0),
            tau: DVector::from_element(k, 1.0),
            eta: 1.0,
            gamma: 1.0,
            rho: DVector::from_element(k, 0.5),
            ln_pi: 0.5f64.ln(),
            ln_one_minus_pi: 0.5f64.ln(),
        }
    }
}

/// Ground truth retained by the simulation generator for stability scoring.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// `n x K_s` sparse-factor matrix.
    pub x: DMatrix<f64>,
    /// `K_s x p` sparse loading matrix.
    pub lambda: DMatrix<f64>,
    /// `n x K_d` dense-factor matrix.
    pub f: DMatrix<f64>,
    /// `K_d x p` dense loading matrix.
    pub omega: DMatrix<f64>,
    /// `n x p` noise matrix actually added.
    pub noise: DMatrix<f64>,
    pub noise_sd: f64,
    /// Planted support size per sparse factor row.
    pub support_sizes: Vec<usize>,
}
