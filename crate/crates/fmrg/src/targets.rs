//! Analytic target distributions and their exact flow velocities.
//!
//! All targets use the linear interpolant I_t = (1 - t) x0 + t x1 with
//! x0 ~ N(0, I). Writing C_t(sigma) = (1 - t)^2 + t^2 sigma^2, the isotropic
//! Gaussian target N(mu1, sigma1^2 I) has velocity
//!
//!   b_t(x) = mu1 + (C_dot_t / 2 C_t) (x - t mu1),
//!
//! and a full-covariance component N(m, S) generalizes this to
//!
//!   b_t(x) = m + (t S - (1 - t) I) Sigma_t^{-1} (x - t m),   Sigma_t = (1 - t)^2 I + t^2 S,
//!
//! which reduces to the scalar form when S = sigma^2 I. Mixtures combine the
//! per-component velocities with posterior responsibilities computed in log
//! space. Quadratic-reward tilts exp(lambda r) stay in the Gaussian/mixture
//! family and are available in closed form.

use crate::dynamics::Velocity;
use crate::rng::CounterRng;
use crate::{Error, Matrix, Result, State};
use nalgebra::Cholesky;

/// Scalar coefficients attached to a noise-to-target bridge with width sigma1:
/// C_t, its derivative, and the flow-map gain M_t = sigma1 / sqrt(C_t).
#[derive(Clone, Copy, Debug)]
pub struct AuxiliaryCoefficients {
    pub sigma1: f64,
}

impl AuxiliaryCoefficients {
    pub fn new(sigma1: f64) -> Self {
        assert!(sigma1 > 0.0, "sigma1 must be positive");
        AuxiliaryCoefficients { sigma1 }
    }

    /// C_t = (1 - t)^2 + t^2 sigma1^2; C_0 = 1, C_1 = sigma1^2.
    #[inline]
    pub fn c(&self, t: f64) -> f64 {
        let u = 1.0 - t;
        u * u + t * t * self.sigma1 * self.sigma1
    }

    /// dC/dt = -2 (1 - t) + 2 t sigma1^2.
    #[inline]
    pub fn c_dot(&self, t: f64) -> f64 {
        -2.0 * (1.0 - t) + 2.0 * t * self.sigma1 * self.sigma1
    }

    /// M_t = sigma1 / sqrt(C_t); the t -> 1 flow-map gain. M_1 = 1.
    #[inline]
    pub fn m(&self, t: f64) -> f64 {
        self.sigma1 / self.c(t).sqrt()
    }

    /// Velocity slope C_dot / (2 C).
    #[inline]
    pub fn drift_rate(&self, t: f64) -> f64 {
        0.5 * self.c_dot(t) / self.c(t)
    }
}

/// Isotropic Gaussian target N(mu1, sigma1^2 I).
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    pub mu1: State,
    pub sigma1: f64,
}

impl GaussianTarget {
    pub fn new(mu1: State, sigma1: f64) -> Result<Self> {
        if !(sigma1 > 0.0) {
            return Err(Error::config("gaussian target: sigma1 must be positive"));
        }
        Ok(GaussianTarget { mu1, sigma1 })
    }

    pub fn scalar(mu1: f64, sigma1: f64) -> Result<Self> {
        GaussianTarget::new(State::from_element(1, mu1), sigma1)
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }

    pub fn coefficients(&self) -> AuxiliaryCoefficients {
        AuxiliaryCoefficients::new(self.sigma1)
    }

    pub fn log_density(&self, x: &State) -> f64 {
        let d = self.dim() as f64;
        let s2 = self.sigma1 * self.sigma1;
        let dev = x - &self.mu1;
        -0.5 * (d * (std::f64::consts::TAU * s2).ln() + dev.norm_squared() / s2)
    }
}

/// One full-covariance mixture component.
#[derive(Clone, Debug)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: State,
    pub cov: Matrix,
    /// Lower Cholesky factor of `cov`, for sampling and the t = 1 density.
    chol_l: Matrix,
}

/// Gaussian mixture target with full covariances.
#[derive(Clone, Debug)]
pub struct GaussianMixtureTarget {
    components: Vec<MixtureComponent>,
    dim: usize,
    mean: State,
}

impl GaussianMixtureTarget {
    /// Build from (weight, mean, covariance) triples. Weights must be
    /// positive and are normalized to sum to one; covariances must be
    /// symmetric positive definite.
    pub fn new(parts: Vec<(f64, State, Matrix)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        let dim = parts[0].1.len();
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if !(total > 0.0) || parts.iter().any(|p| !(p.0 > 0.0)) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let mut components = Vec::with_capacity(parts.len());
        for (w, mean, cov) in parts {
            if mean.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::config("mixture component shapes disagree"));
            }
            let asym = (&cov - cov.transpose()).abs().max();
            if asym > 1e-10 {
                return Err(Error::config(format!(
                    "component covariance not symmetric (max asymmetry {asym:.2e})"
                )));
            }
            let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
                Error::config("component covariance is not positive definite")
            })?;
            components.push(MixtureComponent {
                weight: w / total,
                mean,
                cov,
                chol_l: chol.l(),
            });
        }
        let mut mean = State::zeros(dim);
        for c in &components {
            mean.axpy(c.weight, &c.mean, 1.0);
        }
        Ok(GaussianMixtureTarget { components, dim, mean })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Mixture mean Sum_i w_i m_i.
    pub fn mean(&self) -> &State {
        &self.mean
    }

    pub fn log_density(&self, x: &State) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                c.weight.ln() + gaussian_log_density(x, &c.mean, &c.chol_l)
            })
            .collect();
        log_sum_exp(&logs)
    }
}

/// Near-degenerate Gaussian concentrated on an affine subspace: covariance
/// sigma_par^2 U U^T + sigma_perp^2 (I - U U^T) with U a d x k orthonormal
/// basis and sigma_perp << sigma_par.
#[derive(Clone, Debug)]
pub struct DegenerateGaussianTarget {
    pub mu1: State,
    /// Orthonormal basis of the "manifold" directions, one column per direction.
    pub basis: Matrix,
    pub sigma_par: f64,
    pub sigma_perp: f64,
}

/// Default off-subspace width used when a config omits it.
pub const DEFAULT_SIGMA_PERP: f64 = 1e-3;

impl DegenerateGaussianTarget {
    pub fn new(mu1: State, basis: Matrix, sigma_par: f64, sigma_perp: f64) -> Result<Self> {
        let d = mu1.len();
        let k = basis.ncols();
        if basis.nrows() != d || k == 0 || k >= d {
            return Err(Error::config(
                "degenerate target: basis must be d x k with 0 < k < d",
            ));
        }
        let gram = basis.transpose() * &basis;
        let dev = (&gram - Matrix::identity(k, k)).abs().max();
        if dev > 1e-10 {
            return Err(Error::config(format!(
                "degenerate target: basis not orthonormal (max deviation {dev:.2e})"
            )));
        }
        if !(sigma_perp > 0.0) || !(sigma_par > sigma_perp) {
            return Err(Error::config(
                "degenerate target: need 0 < sigma_perp < sigma_par",
            ));
        }
        Ok(DegenerateGaussianTarget { mu1, basis, sigma_par, sigma_perp })
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }

    pub fn covariance(&self) -> Matrix {
        let d = self.dim();
        let p_par = &self.basis * self.basis.transpose();
        let sp2 = self.sigma_par * self.sigma_par;
        let sq2 = self.sigma_perp * self.sigma_perp;
        &p_par * (sp2 - sq2) + Matrix::identity(d, d) * sq2
    }

    pub fn log_density(&self, x: &State) -> f64 {
        let d = self.dim() as f64;
        let k = self.basis.ncols() as f64;
        let dev = x - &self.mu1;
        let par = self.basis.transpose() * &dev;
        let par_sq = par.norm_squared();
        let perp_sq = dev.norm_squared() - par_sq;
        let sp2 = self.sigma_par * self.sigma_par;
        let sq2 = self.sigma_perp * self.sigma_perp;
        -0.5 * (d * std::f64::consts::TAU.ln()
            + k * sp2.ln()
            + (d - k) * sq2.ln()
            + par_sq / sp2
            + perp_sq / sq2)
    }
}

/// Any supported target, as configured at runtime.
#[derive(Clone, Debug)]
pub enum Target {
    Gaussian(GaussianTarget),
    Mixture(GaussianMixtureTarget),
    Degenerate(DegenerateGaussianTarget),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Gaussian(g) => g.dim(),
            Target::Mixture(m) => m.dim(),
            Target::Degenerate(d) => d.dim(),
        }
    }

    pub fn velocity(&self) -> TargetVelocity {
        match self {
            Target::Gaussian(g) => TargetVelocity::Gaussian(gaussian_velocity(g)),
            Target::Mixture(m) => TargetVelocity::Mixture(gmm_velocity(m)),
            Target::Degenerate(d) => TargetVelocity::Degenerate(degenerate_velocity(d)),
        }
    }

    pub fn log_density(&self, x: &State) -> f64 {
        match self {
            Target::Gaussian(g) => g.log_density(x),
            Target::Mixture(m) => m.log_density(x),
            Target::Degenerate(d) => d.log_density(x),
        }
    }

    pub fn mean(&self) -> State {
        match self {
            Target::Gaussian(g) => g.mu1.clone(),
            Target::Mixture(m) => m.mean().clone(),
            Target::Degenerate(d) => d.mu1.clone(),
        }
    }

    /// Tilt by exp(lambda r) with quadratic reward r(x) = -||x - a||^2.
    /// Closed form; the family is preserved.
    pub fn tilt_quadratic(&self, lambda: f64, a: &State) -> Result<Target> {
        match self {
            Target::Gaussian(g) => {
                let (mean, var) = tilt_closed_form_gaussian(g, lambda, a)?;
                Ok(Target::Gaussian(GaussianTarget::new(mean, var.sqrt())?))
            }
            Target::Mixture(m) => Ok(Target::Mixture(tilt_closed_form_gmm(m, lambda, a)?)),
            Target::Degenerate(d) => {
                // The tilt acts per subspace: each width contracts like the
                // scalar law and the mean shrinks toward a within each block.
                let sp2 = d.sigma_par * d.sigma_par;
                let sq2 = d.sigma_perp * d.sigma_perp;
                let (gp, gq) = (1.0 + 2.0 * lambda * sp2, 1.0 + 2.0 * lambda * sq2);
                if gp <= 0.0 || gq <= 0.0 {
                    return Err(Error::numerics("tilt: lambda too negative for target"));
                }
                let par = &d.basis * (d.basis.transpose() * (&d.mu1 + &(a * (2.0 * lambda * sp2))));
                let perp_src = &d.mu1 + &(a * (2.0 * lambda * sq2));
                let perp = &perp_src - &d.basis * (d.basis.transpose() * &perp_src);
                let mean = par / gp + perp / gq;
                Ok(Target::Degenerate(DegenerateGaussianTarget::new(
                    mean,
                    d.basis.clone(),
                    (sp2 / gp).sqrt(),
                    (sq2 / gq).sqrt(),
                )?))
            }
        }
    }
}

/// Draw `n` exact samples; sample i is a pure function of (seed, i), so the
/// result is independent of call order and thread schedule.
pub fn sample_target(target: &Target, n: usize, seed: u64) -> Vec<State> {
    (0..n)
        .map(|i| sample_target_one(target, &mut CounterRng::stream(seed, i as u64)))
        .collect()
}

/// Single draw from a caller-provided stream.
pub fn sample_target_one(target: &Target, rng: &mut CounterRng) -> State {
    match target {
        Target::Gaussian(g) => {
            let mut x = rng.normal_vector(g.dim());
            x *= g.sigma1;
            x += &g.mu1;
            x
        }
        Target::Mixture(m) => {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = m.components().len() - 1;
            for (i, c) in m.components().iter().enumerate() {
                acc += c.weight;
                if u <= acc {
                    pick = i;
                    break;
                }
            }
            let c = &m.components()[pick];
            let z = rng.normal_vector(m.dim());
            &c.mean + &c.chol_l * z
        }
        Target::Degenerate(d) => {
            let z = rng.normal_vector(d.dim());
            let par = &d.basis * (d.basis.transpose() * &z);
            let perp = &z - &par;
            &d.mu1 + par * d.sigma_par + perp * d.sigma_perp
        }
    }
}

/// Velocity of the configured target's bridge.
#[derive(Clone, Debug)]
pub enum TargetVelocity {
    Gaussian(GaussianVelocity),
    Mixture(MixtureVelocity),
    Degenerate(DegenerateVelocity),
}

impl Velocity for TargetVelocity {
    fn dim(&self) -> usize {
        match self {
            TargetVelocity::Gaussian(v) => v.dim(),
            TargetVelocity::Mixture(v) => v.dim(),
            TargetVelocity::Degenerate(v) => v.dim(),
        }
    }
    fn eval_into(&self, t: f64, x: &State, out: &mut State) {
        match self {
            TargetVelocity::Gaussian(v) => v.eval_into(t, x, out),
            TargetVelocity::Mixture(v) => v.eval_into(t, x, out),
            TargetVelocity::Degenerate(v) => v.eval_into(t, x, out),
        }
    }
    fn jacobian_into(&self, t: f64, x: &State, out: &mut Matrix) {
        match self {
            TargetVelocity::Gaussian(v) => v.jacobian_into(t, x, out),
            TargetVelocity::Mixture(v) => v.jacobian_into(t, x, out),
            TargetVelocity::Degenerate(v) => v.jacobian_into(t, x, out),
        }
    }
}

/// b_t(x) = mu1 + (C_dot/2C)(x - t mu1) for the isotropic Gaussian target.
pub fn gaussian_velocity(target: &GaussianTarget) -> GaussianVelocity {
    GaussianVelocity { mu1: target.mu1.clone(), coeffs: target.coefficients() }
}

#[derive(Clone, Debug)]
pub struct GaussianVelocity {
    mu1: State,
    coeffs: AuxiliaryCoefficients,
}

impl Velocity for GaussianVelocity {
    fn dim(&self) -> usize {
        self.mu1.len()
    }

    fn eval_into(&self, t: f64, x: &State, out: &mut State) {
        let r = self.coeffs.drift_rate(t);
        for j in 0..x.len() {
            let m = self.mu1[j];
            out[j] = m + r * (x[j] - t * m);
        }
    }

    fn jacobian_into(&self, t: f64, _x: &State, out: &mut Matrix) {
        let r = self.coeffs.drift_rate(t);
        out.fill(0.0);
        for j in 0..self.mu1.len() {
            out[(j, j)] = r;
        }
    }
}

/// Full-covariance mixture velocity with responsibility weighting.
pub fn gmm_velocity(target: &GaussianMixtureTarget) -> MixtureVelocity {
    MixtureVelocity {
        comps: target.components().to_vec(),
        dim: target.dim(),
        mean: target.mean().clone(),
    }
}

#[derive(Clone, Debug)]
pub struct MixtureVelocity {
    comps: Vec<MixtureComponent>,
    dim: usize,
    mean: State,
}

struct ComponentEval {
    log_post: f64,
    b: State,
    /// Sigma_t^{-1} (x - t m); negated, this is the component log-density gradient.
    sol: State,
    /// (t S - (1 - t) I) Sigma_t^{-1}, only built when the Jacobian is needed.
    d_mat: Option<Matrix>,
}

impl MixtureVelocity {
    /// Per-component velocity, responsibility, and solve at interior t.
    fn component_evals(&self, t: f64, x: &State, with_jacobian: bool) -> Vec<ComponentEval> {
        let d = self.dim;
        let u = 1.0 - t;
        let mut evals: Vec<ComponentEval> = self
            .comps
            .iter()
            .map(|c| {
                // Sigma_t = (1-t)^2 I + t^2 S
                let mut sig = &c.cov * (t * t);
                for j in 0..d {
                    sig[(j, j)] += u * u;
                }
                let chol = Cholesky::new(sig).unwrap_or_else(|| {
                    panic!("interpolant covariance lost positive definiteness at t = {t}")
                });
                let dev = x - &c.mean * t;
                let sol = chol.solve(&dev);
                let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let quad = dev.dot(&sol);
                let log_post = c.weight.ln()
                    - 0.5 * (d as f64 * std::f64::consts::TAU.ln() + logdet + quad);
                // b_i = m + t S sol - (1-t) sol
                let mut b = &c.cov * &sol;
                b *= t;
                b.axpy(-u, &sol, 1.0);
                b += &c.mean;
                let d_mat = with_jacobian.then(|| {
                    let inv = chol.inverse();
                    &c.cov * &inv * t - inv * u
                });
                ComponentEval { log_post, b, sol, d_mat }
            })
            .collect();
        // Normalize responsibilities in place (log-sum-exp).
        let lse = log_sum_exp(&evals.iter().map(|e| e.log_post).collect::<Vec<_>>());
        for e in &mut evals {
            e.log_post = (e.log_post - lse).exp();
        }
        evals
    }
}

impl Velocity for MixtureVelocity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, t: f64, x: &State, out: &mut State) {
        // Exact endpoint limits: at t = 0 the conditional mean of x1 - x0 given
        // x0 = x is E[x1] - x; at t = 1 it is x - E[x0] = x.
        if t == 0.0 {
            out.copy_from(&self.mean);
            *out -= x;
            return;
        }
        if t == 1.0 {
            out.copy_from(x);
            return;
        }
        let evals = self.component_evals(t, x, false);
        out.fill(0.0);
        for e in &evals {
            out.axpy(e.log_post, &e.b, 1.0);
        }
    }

    fn jacobian_into(&self, t: f64, x: &State, out: &mut Matrix) {
        if t == 0.0 || t == 1.0 {
            out.fill(0.0);
            let v = if t == 0.0 { -1.0 } else { 1.0 };
            for j in 0..self.dim {
                out[(j, j)] = v;
            }
            return;
        }
        let evals = self.component_evals(t, x, true);
        // grad b = Sum_i gamma_i [D_i + b_i (grad logpdf_i - avg)^T]
        let mut avg_grad = State::zeros(self.dim);
        for e in &evals {
            avg_grad.axpy(-e.log_post, &e.sol, 1.0);
        }
        out.fill(0.0);
        for e in &evals {
            let g = e.log_post;
            out.zip_apply(e.d_mat.as_ref().unwrap(), |o, d| *o += g * d);
            // rank-one term: b_i ((-sol_i) - avg)^T
            for c in 0..self.dim {
                let gc = -e.sol[c] - avg_grad[c];
                for r in 0..self.dim {
                    out[(r, c)] += g * e.b[r] * gc;
                }
            }
        }
    }
}

/// Subspace-decomposed velocity for the near-degenerate Gaussian: each block
/// follows the scalar law with its own width.
pub fn degenerate_velocity(target: &DegenerateGaussianTarget) -> DegenerateVelocity {
    DegenerateVelocity {
        mu1: target.mu1.clone(),
        basis: target.basis.clone(),
        par: AuxiliaryCoefficients::new(target.sigma_par),
        perp: AuxiliaryCoefficients::new(target.sigma_perp),
    }
}

#[derive(Clone, Debug)]
pub struct DegenerateVelocity {
    mu1: State,
    basis: Matrix,
    par: AuxiliaryCoefficients,
    perp: AuxiliaryCoefficients,
}

impl Velocity for DegenerateVelocity {
    fn dim(&self) -> usize {
        self.mu1.len()
    }

    fn eval_into(&self, t: f64, x: &State, out: &mut State) {
        let rp = self.par.drift_rate(t);
        let rq = self.perp.drift_rate(t);
        let dev = x - &self.mu1 * t;
        let par = &self.basis * (self.basis.transpose() * &dev);
        out.copy_from(&self.mu1);
        out.axpy(rq, &dev, 1.0);
        out.axpy(rp - rq, &par, 1.0);
    }

    fn jacobian_into(&self, t: f64, _x: &State, out: &mut Matrix) {
        let rp = self.par.drift_rate(t);
        let rq = self.perp.drift_rate(t);
        let p_par = &self.basis * self.basis.transpose();
        out.fill(0.0);
        for j in 0..self.dim() {
            out[(j, j)] = rq;
        }
        out.zip_apply(&p_par, |o, p| *o += (rp - rq) * p);
    }
}

/// Tilted law of an isotropic Gaussian under exp(lambda r), r = -||x - a||^2:
/// returns (mean, variance) with mean = (mu1 + 2 lambda sigma1^2 a) / (1 + 2 lambda sigma1^2)
/// and variance = sigma1^2 / (1 + 2 lambda sigma1^2).
pub fn tilt_closed_form_gaussian(
    target: &GaussianTarget,
    lambda: f64,
    a: &State,
) -> Result<(State, f64)> {
    assert_eq!(a.len(), target.dim(), "tilt anchor dimension mismatch");
    let s2 = target.sigma1 * target.sigma1;
    let gain = 1.0 + 2.0 * lambda * s2;
    if gain <= 0.0 {
        return Err(Error::numerics(format!(
            "tilt: 1 + 2 lambda sigma^2 = {gain:.3e} <= 0, tilted law not normalizable"
        )));
    }
    let mean = (&target.mu1 + a * (2.0 * lambda * s2)) / gain;
    Ok((mean, s2 / gain))
}

/// Tilted law of a full-covariance mixture under exp(lambda r): component i
/// gets covariance (S_i^{-1} + 2 lambda I)^{-1}, mean (I + 2 lambda S_i)^{-1}
/// (m_i + 2 lambda S_i a), and log-weight shifted by the Gaussian integral
/// -1/2 log det(I + 2 lambda S_i) - lambda (m_i - a)^T (I + 2 lambda S_i)^{-1} (m_i - a).
pub fn tilt_closed_form_gmm(
    target: &GaussianMixtureTarget,
    lambda: f64,
    a: &State,
) -> Result<GaussianMixtureTarget> {
    assert_eq!(a.len(), target.dim(), "tilt anchor dimension mismatch");
    let d = target.dim();
    let mut parts = Vec::with_capacity(target.components().len());
    let mut log_ws = Vec::with_capacity(target.components().len());
    for c in target.components() {
        let mut gain = &c.cov * (2.0 * lambda);
        for j in 0..d {
            gain[(j, j)] += 1.0;
        }
        let chol = Cholesky::new(gain).ok_or_else(|| {
            Error::numerics("tilt: I + 2 lambda S not positive definite")
        })?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let dev = &c.mean - a;
        let quad = dev.dot(&chol.solve(&dev));
        log_ws.push(c.weight.ln() - 0.5 * logdet - lambda * quad);

        let mean = chol.solve(&(&c.mean + &c.cov * a * (2.0 * lambda)));
        let cov_raw = &c.cov * chol.inverse();
        // Symmetrize against roundoff; S (I + 2 lambda S)^{-1} is symmetric exactly.
        let cov = (&cov_raw + cov_raw.transpose()) * 0.5;
        parts.push((mean, cov));
    }
    let lse = log_sum_exp(&log_ws);
    let triples = parts
        .into_iter()
        .zip(log_ws)
        .map(|((mean, cov), lw)| ((lw - lse).exp(), mean, cov))
        .collect();
    GaussianMixtureTarget::new(triples)
}

fn gaussian_log_density(x: &State, mean: &State, chol_l: &Matrix) -> f64 {
    let d = x.len() as f64;
    let dev = x - mean;
    // Solve L z = dev; quadratic form is ||z||^2.
    let z = chol_l
        .solve_lower_triangular(&dev)
        .expect("cholesky factor is nonsingular");
    let logdet = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d * std::f64::consts::TAU.ln() + logdet + z.norm_squared())
}

pub(crate) fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
