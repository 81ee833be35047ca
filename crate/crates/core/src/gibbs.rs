//! Gibbs sampler over the full conditionals of the mixture model.
//!
//! The chain keeps the element-level scale pair (theta, delta) present under
//! both mixture branches: when a factor is dense its element scales are
//! refreshed from their priors and the loading variance is the factor-level
//! scale. This augmentation leaves the marginal law of the loadings unchanged
//! while making every scan step an exact conditional of one coherent joint,
//! which is what the joint-correctness tests check.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma as GammaDist, Normal};

use crate::densities::ln_normal_pdf;
use crate::types::{DataMatrix, Hyperparameters};
use crate::{Error, Result};

/// Floor/ceiling applied to variance-role draws before they re-enter the scan.
const SCALE_FLOOR: f64 = 1e-12;
const SCALE_CEIL: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct GibbsConfig {
    pub n_iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        if self.burn_in >= self.n_iters {
            return Err(Error::Config("burn_in must be smaller than n_iters".into()));
        }
        if (self.n_iters - self.burn_in) / self.thin == 0 {
            return Err(Error::Config("no draws would be retained".into()));
        }
        Ok(())
    }
}

/// Posterior means and variances per parameter block, plus scalar traces.
#[derive(Debug, Clone)]
pub struct ChainSummary {
    pub mean_x: DMatrix<f64>,
    pub var_x: DMatrix<f64>,
    pub mean_lambda: DMatrix<f64>,
    pub var_lambda: DMatrix<f64>,
    pub mean_theta: DMatrix<f64>,
    pub mean_delta: DMatrix<f64>,
    pub mean_phi: DVector<f64>,
    pub var_phi: DVector<f64>,
    pub mean_tau: DVector<f64>,
    pub mean_psi: DVector<f64>,
    pub mean_eta: f64,
    pub var_eta: f64,
    pub mean_gamma: f64,
    pub mean_pi: f64,
    /// Fraction of retained draws in which each factor was sparse.
    pub z_frequency: DVector<f64>,
    pub retained: usize,
    /// Number of draws clamped at the configured floors/ceilings.
    pub clamp_events: u64,
    pub trace_eta: Vec<f64>,
    pub trace_gamma: Vec<f64>,
    pub trace_pi: Vec<f64>,
}

/// One draw from the generalized inverse Gaussian density
/// `f(x) ∝ x^(order-1) exp(-(rate2*x + quad/x)/2)`.
///
/// Rejection sampling in `t = ln x`, where the density is always log-concave;
/// the envelope is flat around the mode with tangent-line exponential tails.
/// `quad = 0` reduces to a gamma draw.
pub fn sample_gig<R: Rng>(order: f64, rate2: f64, quad: f64, rng: &mut R) -> Result<f64> {
    if rate2 <= 0.0 {
        return Err(Error::Domain(format!("sample_gig requires rate2 > 0, got {rate2}")));
    }
    if quad < 0.0 {
        return Err(Error::Domain(format!("sample_gig requires quad >= 0, got {quad}")));
    }
    if quad == 0.0 {
        if order <= 0.0 {
            return Err(Error::Domain(
                "sample_gig with quad = 0 requires a positive order".into(),
            ));
        }
        let g = GammaDist::new(order, 2.0 / rate2).expect("valid gamma");
        return Ok(g.sample(rng));
    }

    // log-density of T = ln X (Jacobian absorbed): h(t) = order*t - (rate2 e^t + quad e^-t)/2
    let h = |t: f64| order * t - 0.5 * (rate2 * t.exp() + quad * (-t).exp());
    let dh = |t: f64| order - 0.5 * (rate2 * t.exp() - quad * (-t).exp());
    let x_mode = (order + (order * order + rate2 * quad).sqrt()) / rate2;
    let t_mode = x_mode.ln();
    let h_mode = h(t_mode);

    // Bracket the points where h drops by one unit on each side.
    let drop = 1.0;
    let find_drop = |dir: f64| {
        let mut step = 1.0;
        let mut outer = t_mode + dir * step;
        while h(outer) > h_mode - drop {
            step *= 2.0;
            outer = t_mode + dir * step;
            if step > 1e8 {
                break;
            }
        }
        let mut lo = t_mode;
        let mut hi = outer;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > h_mode - drop {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let t_left = find_drop(-1.0);
    let t_right = find_drop(1.0);
    let slope_left = dh(t_left); // positive
    let slope_right = -dh(t_right); // positive

    // Envelope in units of exp(h - h_mode): flat 1 on [t_left, t_right],
    // exponential tails matching the tangents at the drop points.
    let g_left = h(t_left) - h_mode; // = -drop up to bisection error
    let g_right = h(t_right) - h_mode;
    let area_mid = t_right - t_left;
    let area_left = (g_left).exp() / slope_left;
    let area_right = (g_right).exp() / slope_right;
    let total = area_mid + area_left + area_right;

    loop {
        let u: f64 = rng.random::<f64>() * total;
        let (t, env) = if u < area_mid {
            (t_left + u, 0.0)
        } else if u < area_mid + area_left {
            // left tail: density ∝ exp(slope_left * (t - t_left) + g_left), t < t_left
            let v: f64 = rng.random();
            let t = t_left + v.ln() / slope_left;
            (t, g_left + slope_left * (t - t_left))
        } else {
            let v: f64 = rng.random();
            let t = t_right - v.ln() / slope_right;
            (t, g_right - slope_right * (t - t_right))
        };
        let accept = (h(t) - h_mode - env).exp();
        if rng.random::<f64>() < accept {
            return Ok(t.exp());
        }
    }
}

/// Draw the latent factor matrix from its multivariate normal conditional.
pub fn sample_x<R: Rng>(
    y: &DataMatrix,
    lambda: &DMatrix<f64>,
    psi: &DVector<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (n, p) = (y.nrows(), y.ncols());
    let k = lambda.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let mut lam_w = lambda.clone();
    for j in 0..p {
        let w = 1.0 / psi[j];
        for kk in 0..k {
            lam_w[(kk, j)] *= w;
        }
    }
    let mut precision = &lam_w * lambda.transpose();
    for kk in 0..k {
        precision[(kk, kk)] += 1.0;
    }
    let chol = Cholesky::new(precision).ok_or_else(|| {
        Error::Singular("sample_x: factor precision matrix is not positive definite".into())
    })?;
    let cov = chol.inverse();
    let mean = &y.values * lam_w.transpose() * &cov;
    // x_i = mean_i + L^-T z with precision = L L^T
    let l_t = chol.l().transpose();
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut x = mean;
    for i in 0..n {
        let z = DVector::from_iterator(k, (0..k).map(|_| std_normal.sample(rng)));
        let u = l_t
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Singular("sample_x: triangular solve failed".into()))?;
        for kk in 0..k {
            x[(i, kk)] += u[kk];
        }
    }
    Ok(x)
}

/// Bernoulli draws from per-factor log odds, computed through the logistic in
/// a saturating way.
pub fn sample_z<R: Rng>(log_odds: &DVector<f64>, rng: &mut R) -> Vec<bool> {
    log_odds
        .iter()
        .map(|&lo| {
            let rho = if lo >= 0.0 {
                1.0 / (1.0 + (-lo).exp())
            } else {
                let e = lo.exp();
                e / (1.0 + e)
            };
            rng.random::<f64>() < rho
        })
        .collect()
}

/// Coordinate-wise normal draws for the loading matrix. The second argument of
/// the printed conditional is the precision; the draw uses its reciprocal.
#[allow(clippy::too_many_arguments)]
pub fn sample_lambda<R: Rng>(
    y: &DataMatrix,
    x: &DMatrix<f64>,
    psi: &DVector<f64>,
    theta: &DMatrix<f64>,
    phi: &DVector<f64>,
    z: &[bool],
    lambda_init: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let p = y.ncols();
    let k = lambda_init.nrows();
    let mut lambda = lambda_init.clone();
    let gram = x.transpose() * x; // K x K
    let cross = x.transpose() * &y.values; // K x p
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    for kk in 0..k {
        let coupled = gram.row(kk) * &lambda; // 1 x p, fresh values
        let sx2 = gram[(kk, kk)];
        for j in 0..p {
            let inv_psi = 1.0 / psi[j];
            let prior_var = if z[kk] { theta[(kk, j)] } else { phi[kk] };
            let num = inv_psi * (cross[(kk, j)] - (coupled[j] - sx2 * lambda[(kk, j)]));
            let prec = inv_psi * sx2 + 1.0 / prior_var;
            let var = 1.0 / prec;
            lambda[(kk, j)] = num * var + var.sqrt() * std_normal.sample(rng);
        }
    }
    lambda
}

/// Mutable scale-parameter block for one scan.
pub struct ScaleState {
    pub theta: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub phi: DVector<f64>,
    pub tau: DVector<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub pi: f64,
    pub psi: DVector<f64>,
}

fn clamp_scale(v: f64, clamps: &mut u64) -> f64 {
    if v < SCALE_FLOOR {
        *clamps += 1;
        SCALE_FLOOR
    } else if v > SCALE_CEIL {
        *clamps += 1;
        SCALE_CEIL
    } else {
        v
    }
}

fn gamma_draw<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    GammaDist::new(shape, 1.0 / rate).expect("valid gamma").sample(rng)
}

/// One systematic-scan draw of every scale parameter, the mixing weight, and
/// the residual variances from their conditionals.
#[allow(clippy::too_many_arguments)]
pub fn sample_scales<R: Rng>(
    y: &DataMatrix,
    x: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    z: &[bool],
    state: &mut ScaleState,
    hyper: &Hyperparameters,
    update_psi: bool,
    clamps: &mut u64,
    rng: &mut R,
) -> Result<()> {
    let (n, p) = (y.nrows(), y.ncols());
    let k = lambda.nrows();

    for kk in 0..k {
        for j in 0..p {
            let l = lambda[(kk, j)];
            let th = if z[kk] {
                let quad = (l * l).max(1e-300);
                sample_gig(hyper.a - 0.5, 2.0 * state.delta[(kk, j)], quad, rng)?
            } else {
                gamma_draw(hyper.a, state.delta[(kk, j)], rng)
            };
            state.theta[(kk, j)] = clamp_scale(th, clamps);
        }
    }
    for kk in 0..k {
        for j in 0..p {
            let d = gamma_draw(hyper.a + hyper.b, state.theta[(kk, j)] + state.phi[kk], rng);
            state.delta[(kk, j)] = clamp_scale(d, clamps);
        }
    }
    for kk in 0..k {
        let sum_delta: f64 = state.delta.row(kk).iter().sum();
        let ph = if z[kk] {
            gamma_draw(p as f64 * hyper.b + hyper.c, sum_delta + state.tau[kk], rng)
        } else {
            let omega: f64 = lambda.row(kk).iter().map(|&l| l * l).sum();
            sample_gig(
                p as f64 * hyper.b + hyper.c - 0.5 * p as f64,
                2.0 * (sum_delta + state.tau[kk]),
                omega.max(1e-300),
                rng,
            )?
        };
        state.phi[kk] = clamp_scale(ph, clamps);
    }
    for kk in 0..k {
        let t = gamma_draw(hyper.c + hyper.d, state.phi[kk] + state.eta, rng);
        state.tau[kk] = clamp_scale(t, clamps);
    }
    let tau_sum: f64 = state.tau.iter().sum();
    state.eta = clamp_scale(
        gamma_draw(k as f64 * hyper.d + hyper.e, state.gamma + tau_sum, rng),
        clamps,
    );
    state.gamma =
        clamp_scale(gamma_draw(hyper.e + hyper.f, state.eta + hyper.nu, rng), clamps);

    let n_sparse = z.iter().filter(|&&b| b).count() as f64;
    let beta = BetaDist::new(hyper.alpha + n_sparse, hyper.beta + k as f64 - n_sparse)
        .expect("valid beta");
    state.pi = beta.sample(rng).clamp(1e-12, 1.0 - 1e-12);

    if update_psi {
        let recon = x * lambda;
        let shape = (n as f64 / 2.0 - 1.0).max(1e-2);
        for j in 0..p {
            let mut resid = 0.0;
            for i in 0..n {
                let r = y.values[(i, j)] - recon[(i, j)];
                resid += r * r;
            }
            let scale = (resid / 2.0).max(hyper.psi_floor);
            // inverse gamma via reciprocal of a gamma draw
            let g = gamma_draw(shape, 1.0, rng);
            state.psi[j] = (scale / g).max(hyper.psi_floor);
        }
    }
    Ok(())
}

/// Log odds of each factor being sparse given the loadings and scales.
///
/// Under the always-present augmentation the element-scale priors are common
/// to both branches and cancel; only the loading likelihoods and the mixing
/// weight remain.
pub fn sparse_log_odds(
    lambda: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    phi: &DVector<f64>,
    pi: f64,
) -> DVector<f64> {
    let k = lambda.nrows();
    let mut out = DVector::zeros(k);
    for kk in 0..k {
        let mut acc = (pi / (1.0 - pi)).ln();
        for j in 0..lambda.ncols() {
            let l = lambda[(kk, j)];
            acc += ln_normal_pdf(l, theta[(kk, j)]) - ln_normal_pdf(l, phi[kk]);
        }
        out[kk] = acc;
    }
    out
}

struct RunningMoments {
    count: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl RunningMoments {
    fn new(len: usize) -> Self {
        RunningMoments { count: 0.0, sum: vec![0.0; len], sum_sq: vec![0.0; len] }
    }
    fn push(&mut self, values: impl Iterator<Item = f64>) {
        self.count += 1.0;
        for (i, v) in values.enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
    }
    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count).collect()
    }
    fn var(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, ss)| (ss / self.count - (s / self.count).powi(2)).max(0.0))
            .collect()
    }
}

/// Run one chain of the systematic-scan Gibbs sampler.
pub fn run_gibbs(
    y: &DataMatrix,
    hyper: &Hyperparameters,
    config: &GibbsConfig,
) -> Result<ChainSummary> {
    hyper.validate()?;
    config.validate()?;
    let (n, p) = (y.nrows(), y.ncols());
    let k = hyper.k_init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut clamps: u64 = 0;

    // Data-scaled random start, mirroring the EM initialization.
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let mut lambda = DMatrix::zeros(k, p);
    let mut psi = DVector::zeros(p);
    for j in 0..p {
        let col = y.values.column(j);
        let mean = col.sum() / n as f64;
        let var =
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).max(hyper.psi_floor);
        psi[j] = var;
        for kk in 0..k {
            lambda[(kk, j)] = normal.sample(&mut rng) * var.sqrt();
        }
    }
    let mut scales = ScaleState {
        theta: DMatrix::from_element(k, p, 1.0),
        delta: DMatrix::from_element(k, p, 1.0),
        phi: DVector::from_element(k, 1.0),
        tau: DVector::from_element(k, 1.0),
        eta: 1.0,
        gamma: 1.0,
        pi: 0.5,
        psi,
    };
    let mut mom_x = RunningMoments::new(n * k);
    let mut mom_lambda = RunningMoments::new(k * p);
    let mut mom_theta = RunningMoments::new(k * p);
    let mut mom_delta = RunningMoments::new(k * p);
    let mut mom_phi = RunningMoments::new(k);
    let mut mom_tau = RunningMoments::new(k);
    let mut mom_psi = RunningMoments::new(p);
    let mut mom_scalar = RunningMoments::new(3); // eta, gamma, pi
    let mut z_freq = vec![0.0f64; k];
    let mut retained = 0usize;
    let mut trace_eta = Vec::new();
    let mut trace_gamma = Vec::new();
    let mut trace_pi = Vec::new();

    for iter in 0..config.n_iters {
        let x = sample_x(y, &lambda, &scales.psi, &mut rng)?;
        let odds = sparse_log_odds(&lambda, &scales.theta, &scales.phi, scales.pi);
        let z = sample_z(&odds, &mut rng);
        lambda = sample_lambda(
            y,
            &x,
            &scales.psi,
            &scales.theta,
            &scales.phi,
            &z,
            &lambda,
            &mut rng,
        );
        sample_scales(y, &x, &lambda, &z, &mut scales, hyper, true, &mut clamps, &mut rng)?;

        if iter >= config.burn_in && (iter - config.burn_in) % config.thin == 0 {
            retained += 1;
            mom_x.push(x.iter().copied());
            mom_lambda.push(lambda.iter().copied());
            mom_theta.push(scales.theta.iter().copied());
            mom_delta.push(scales.delta.iter().copied());
            mom_phi.push(scales.phi.iter().copied());
            mom_tau.push(scales.tau.iter().copied());
            mom_psi.push(scales.psi.iter().copied());
            mom_scalar.push([scales.eta, scales.gamma, scales.pi].into_iter());
            for (kk, &zk) in z.iter().enumerate() {
                if zk {
                    z_freq[kk] += 1.0;
                }
            }
            trace_eta.push(scales.eta);
            trace_gamma.push(scales.gamma);
            trace_pi.push(scales.pi);
        }
    }

    let rf = retained as f64;
    let scalar_mean = mom_scalar.mean();
    let scalar_var = mom_scalar.var();
    Ok(ChainSummary {
        mean_x: DMatrix::from_iterator(n, k, column_major(n, k, &mom_x.mean())),
        var_x: DMatrix::from_iterator(n, k, column_major(n, k, &mom_x.var())),
        mean_lambda: DMatrix::from_iterator(k, p, column_major(k, p, &mom_lambda.mean())),
        var_lambda: DMatrix::from_iterator(k, p, column_major(k, p, &mom_lambda.var())),
        mean_theta: DMatrix::from_iterator(k, p, column_major(k, p, &mom_theta.mean())),
        mean_delta: DMatrix::from_iterator(k, p, column_major(k, p, &mom_delta.mean())),
        mean_phi: DVector::from_vec(mom_phi.mean()),
        var_phi: DVector::from_vec(mom_phi.var()),
        mean_tau: DVector::from_vec(mom_tau.mean()),
        mean_psi: DVector::from_vec(mom_psi.mean()),
        mean_eta: scalar_mean[0],
        var_eta: scalar_var[0],
        mean_gamma: scalar_mean[1],
        mean_pi: scalar_mean[2],
        z_frequency: DVector::from_iterator(k, z_freq.iter().map(|c| c / rf)),
        retained,
        clamp_events: clamps,
        trace_eta,
        trace_gamma,
        trace_pi,
    })
}

// RunningMoments iterates matrices in nalgebra's column-major order; rebuild
// with the same convention.
fn column_major(_nrows: usize, _ncols: usize, flat: &[f64]) -> impl Iterator<Item = f64> + '_ {
    flat.iter().copied()
}
