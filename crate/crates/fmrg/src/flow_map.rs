//! Two-time flow maps X_{s,t} of the probability-flow ODE and their
//! vector-Jacobian products.
//!
//! `AnalyticGaussianFlowMap` is the closed form for the isotropic Gaussian
//! bridge: X_{s,t}(x) = t mu1 + sqrt(C_t / C_s) (x - s mu1), whose Jacobian is
//! the scalar gain sqrt(C_t / C_s). `NumericFlowMap` integrates any velocity
//! with fixed-count RK4 substeps and provides the exact VJP of the
//! *discretized* map via the adjoint ODE da/dtau = -(grad b)^T a swept
//! backward over the stored forward nodes.

use crate::dynamics::Velocity;
use crate::targets::{AuxiliaryCoefficients, GaussianTarget};
use crate::{Error, Matrix, Result, State};

/// Deterministic transport from time s to time t along the flow.
pub trait FlowMap {
    fn dim(&self) -> usize;

    /// X_{s,t}(x).
    fn eval(&self, s: f64, t: f64, x: &State) -> Result<State>;

    /// Returns (X_{s,t}(x), (dX_{s,t}/dx)^T w).
    fn vjp(&self, s: f64, t: f64, x: &State, w: &State) -> Result<(State, State)>;

    /// Full Jacobian dX_{s,t}/dx.
    fn jacobian(&self, s: f64, t: f64, x: &State) -> Result<Matrix>;

    /// Allocation-free variant of `eval` for hot loops; the default delegates.
    fn eval_into(&self, s: f64, t: f64, x: &State, out: &mut State) -> Result<()> {
        out.copy_from(&self.eval(s, t, x)?);
        Ok(())
    }

    /// Allocation-free variant of `vjp`.
    fn vjp_into(
        &self,
        s: f64,
        t: f64,
        x: &State,
        w: &State,
        y_out: &mut State,
        a_out: &mut State,
    ) -> Result<()> {
        let (y, a) = self.vjp(s, t, x, w)?;
        y_out.copy_from(&y);
        a_out.copy_from(&a);
        Ok(())
    }

    /// Allocation-free variant of `jacobian`.
    fn jacobian_into(&self, s: f64, t: f64, x: &State, out: &mut Matrix) -> Result<()> {
        out.copy_from(&self.jacobian(s, t, x)?);
        Ok(())
    }
}

impl<M: FlowMap + ?Sized> FlowMap for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, s: f64, t: f64, x: &State) -> Result<State> {
        (**self).eval(s, t, x)
    }
    fn vjp(&self, s: f64, t: f64, x: &State, w: &State) -> Result<(State, State)> {
        (**self).vjp(s, t, x, w)
    }
    fn jacobian(&self, s: f64, t: f64, x: &State) -> Result<Matrix> {
        (**self).jacobian(s, t, x)
    }
    fn eval_into(&self, s: f64, t: f64, x: &State, out: &mut State) -> Result<()> {
        (**self).eval_into(s, t, x, out)
    }
    fn vjp_into(
        &self,
        s: f64,
        t: f64,
        x: &State,
        w: &State,
        y_out: &mut State,
        a_out: &mut State,
    ) -> Result<()> {
        (**self).vjp_into(s, t, x, w, y_out, a_out)
    }
    fn jacobian_into(&self, s: f64, t: f64, x: &State, out: &mut Matrix) -> Result<()> {
        (**self).jacobian_into(s, t, x, out)
    }
}

/// Closed-form flow map of the isotropic Gaussian bridge.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianFlowMap {
    mu1: State,
    coeffs: AuxiliaryCoefficients,
}

impl AnalyticGaussianFlowMap {
    pub fn new(target: &GaussianTarget) -> Self {
        AnalyticGaussianFlowMap { mu1: target.mu1.clone(), coeffs: target.coefficients() }
    }

    /// Scalar Jacobian gain sqrt(C_t / C_s).
    pub fn gain(&self, s: f64, t: f64) -> f64 {
        (self.coeffs.c(t) / self.coeffs.c(s)).sqrt()
    }

    pub fn coefficients(&self) -> AuxiliaryCoefficients {
        self.coeffs
    }

    pub fn mu1(&self) -> &State {
        &self.mu1
    }
}

impl FlowMap for AnalyticGaussianFlowMap {
    fn dim(&self) -> usize {
        self.mu1.len()
    }

    fn eval(&self, s: f64, t: f64, x: &State) -> Result<State> {
        let g = self.gain(s, t);
        let mut out = x - &self.mu1 * s;
        out *= g;
        out.axpy(t, &self.mu1, 1.0);
        Ok(out)
    }

    fn vjp(&self, s: f64, t: f64, x: &State, w: &State) -> Result<(State, State)> {
        let y = self.eval(s, t, x)?;
        Ok((y, w * self.gain(s, t)))
    }

    fn jacobian(&self, s: f64, t: f64, _x: &State) -> Result<Matrix> {
        Ok(Matrix::identity(self.dim(), self.dim()) * self.gain(s, t))
    }

    fn eval_into(&self, s: f64, t: f64, x: &State, out: &mut State) -> Result<()> {
        let g = self.gain(s, t);
        for (o, (&xi, &mi)) in out.iter_mut().zip(x.iter().zip(self.mu1.iter())) {
            *o = t * mi + g * (xi - s * mi);
        }
        Ok(())
    }

    fn vjp_into(
        &self,
        s: f64,
        t: f64,
        x: &State,
        w: &State,
        y_out: &mut State,
        a_out: &mut State,
    ) -> Result<()> {
        self.eval_into(s, t, x, y_out)?;
        a_out.copy_from(w);
        *a_out *= self.gain(s, t);
        Ok(())
    }

    fn jacobian_into(&self, s: f64, t: f64, _x: &State, out: &mut Matrix) -> Result<()> {
        out.fill(0.0);
        out.fill_diagonal(self.gain(s, t));
        Ok(())
    }
}

/// RK4-discretized flow map of an arbitrary velocity field.
#[derive(Clone, Debug)]
pub struct NumericFlowMap<V> {
    velocity: V,
    substeps: usize,
}

impl<V: Velocity> NumericFlowMap<V> {
    /// `substeps`: RK4 steps per `eval` call, independent of |t - s|.
    pub fn new(velocity: V, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::config("numeric flow map needs at least one substep"));
        }
        Ok(NumericFlowMap { velocity, substeps })
    }

    pub fn velocity(&self) -> &V {
        &self.velocity
    }

    /// Forward trajectory including both endpoints (substeps + 1 nodes).
    fn forward_nodes(&self, s: f64, t: f64, x: &State) -> Result<Vec<State>> {
        let mut nodes = Vec::with_capacity(self.substeps + 1);
        nodes.push(x.clone());
        let h = (t - s) / self.substeps as f64;
        for k in 0..self.substeps {
            let tau = s + k as f64 * h;
            let next = crate::dynamics::rk4_integrate(&self.velocity, tau, tau + h, &nodes[k], 1)?;
            nodes.push(next);
        }
        Ok(nodes)
    }
}

impl<V: Velocity> FlowMap for NumericFlowMap<V> {
    fn dim(&self) -> usize {
        self.velocity.dim()
    }

    fn eval(&self, s: f64, t: f64, x: &State) -> Result<State> {
        if s == t {
            return Ok(x.clone());
        }
        crate::dynamics::rk4_integrate(&self.velocity, s, t, x, self.substeps)
    }

    fn vjp(&self, s: f64, t: f64, x: &State, w: &State) -> Result<(State, State)> {
        if s == t {
            return Ok((x.clone(), w.clone()));
        }
        let nodes = self.forward_nodes(s, t, x)?;
        let h = (t - s) / self.substeps as f64;
        let d = self.dim();
        let mut a = w.clone();
        let mut jac = Matrix::zeros(d, d);
        let mut state = State::zeros(d);
        // Sweep substeps in reverse; within each, integrate the coupled
        // (state, adjoint) system backward with RK4, re-anchoring the state at
        // the stored forward node so errors do not compound across substeps.
        for k in (0..self.substeps).rev() {
            let t_hi = s + (k + 1) as f64 * h;
            state.copy_from(&nodes[k + 1]);
            rk4_adjoint_step(&self.velocity, t_hi, -h, &mut state, &mut a, &mut jac)?;
        }
        Ok((nodes[self.substeps].clone(), a))
    }

    fn jacobian(&self, s: f64, t: f64, x: &State) -> Result<Matrix> {
        let d = self.dim();
        let mut jac = Matrix::identity(d, d);
        if s == t {
            return Ok(jac);
        }
        let nodes = self.forward_nodes(s, t, x)?;
        let h = (t - s) / self.substeps as f64;
        let mut state = State::zeros(d);
        for (k, node) in nodes.iter().take(self.substeps).enumerate() {
            state.copy_from(node);
            rk4_variational_step(&self.velocity, s + k as f64 * h, h, &mut state, &mut jac)?;
        }
        Ok(jac)
    }
}

/// One RK4 step of d/dtau (x, a) = (b(tau, x), -(grad b)^T a), advancing from
/// tau by signed step h (h < 0 integrates backward).
fn rk4_adjoint_step<V: Velocity>(
    v: &V,
    tau: f64,
    h: f64,
    x: &mut State,
    a: &mut State,
    jac: &mut Matrix,
) -> Result<()> {
    let eval = |tt: f64, xx: &State, aa: &State, jac: &mut Matrix| -> (State, State) {
        let bx = v.eval(tt, xx);
        v.jacobian_into(tt, xx, jac);
        let ba = -(jac.transpose() * aa);
        (bx, ba)
    };
    let (k1x, k1a) = eval(tau, x, a, jac);
    let (k2x, k2a) = eval(
        tau + 0.5 * h,
        &(&*x + &k1x * (0.5 * h)),
        &(&*a + &k1a * (0.5 * h)),
        jac,
    );
    let (k3x, k3a) = eval(
        tau + 0.5 * h,
        &(&*x + &k2x * (0.5 * h)),
        &(&*a + &k2a * (0.5 * h)),
        jac,
    );
    let (k4x, k4a) = eval(tau + h, &(&*x + &k3x * h), &(&*a + &k3a * h), jac);
    let w = h / 6.0;
    x.axpy(w, &k1x, 1.0);
    x.axpy(2.0 * w, &k2x, 1.0);
    x.axpy(2.0 * w, &k3x, 1.0);
    x.axpy(w, &k4x, 1.0);
    a.axpy(w, &k1a, 1.0);
    a.axpy(2.0 * w, &k2a, 1.0);
    a.axpy(2.0 * w, &k3a, 1.0);
    a.axpy(w, &k4a, 1.0);
    if x.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "adjoint flow-map step", step: 0 });
    }
    Ok(())
}

/// One RK4 step of the coupled state/sensitivity system
/// d/dtau (x, J) = (b(tau, x), (grad b)(tau, x) J), J(s) = I.
fn rk4_variational_step<V: Velocity>(
    v: &V,
    tau: f64,
    h: f64,
    x: &mut State,
    jac: &mut Matrix,
) -> Result<()> {
    let d = v.dim();
    let mut grad = Matrix::zeros(d, d);
    let mut eval = |tt: f64, xx: &State, jj: &Matrix| -> (State, Matrix) {
        let bx = v.eval(tt, xx);
        v.jacobian_into(tt, xx, &mut grad);
        (bx, &grad * jj)
    };
    let (k1x, k1j) = eval(tau, x, jac);
    let (k2x, k2j) = eval(tau + 0.5 * h, &(&*x + &k1x * (0.5 * h)), &(&*jac + &k1j * (0.5 * h)));
    let (k3x, k3j) = eval(tau + 0.5 * h, &(&*x + &k2x * (0.5 * h)), &(&*jac + &k2j * (0.5 * h)));
    let (k4x, k4j) = eval(tau + h, &(&*x + &k3x * h), &(&*jac + &k3j * h));
    let w = h / 6.0;
    x.axpy(w, &k1x, 1.0);
    x.axpy(2.0 * w, &k2x, 1.0);
    x.axpy(2.0 * w, &k3x, 1.0);
    x.axpy(w, &k4x, 1.0);
    jac.zip_apply(&k1j, |j, k| *j += w * k);
    jac.zip_apply(&k2j, |j, k| *j += 2.0 * w * k);
    jac.zip_apply(&k3j, |j, k| *j += 2.0 * w * k);
    jac.zip_apply(&k4j, |j, k| *j += w * k);
    if x.iter().chain(jac.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "variational flow-map step", step: 0 });
    }
    Ok(())
}

/// Single-Euler-step flow map: X_{s,t}(x) = x + (t - s) b(s, x).
///
/// Deliberately crude; it is the approximant under which guidance signals
/// collapse onto the posterior-lookahead baselines, so the equivalence checks
/// depend on this exact form.
#[derive(Clone, Debug)]
pub struct EulerFlowMap<V> {
    velocity: V,
}

impl<V: Velocity> EulerFlowMap<V> {
    pub fn new(velocity: V) -> Self {
        EulerFlowMap { velocity }
    }
}

impl<V: Velocity> FlowMap for EulerFlowMap<V> {
    fn dim(&self) -> usize {
        self.velocity.dim()
    }

    fn eval(&self, s: f64, t: f64, x: &State) -> Result<State> {
        let mut out = self.velocity.eval(s, x);
        out *= t - s;
        out += x;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "euler flow-map step", step: 0 });
        }
        Ok(out)
    }

    fn vjp(&self, s: f64, t: f64, x: &State, w: &State) -> Result<(State, State)> {
        let y = self.eval(s, t, x)?;
        let grad = self.velocity.jacobian(s, x);
        let mut a = grad.transpose() * w;
        a *= t - s;
        a += w;
        Ok((y, a))
    }

    fn jacobian(&self, s: f64, t: f64, x: &State) -> Result<Matrix> {
        let mut jac = self.velocity.jacobian(s, x);
        jac *= t - s;
        for i in 0..jac.nrows() {
            jac[(i, i)] += 1.0;
        }
        Ok(jac)
    }
}

/// One-call step approximation that reuses a terminal-map evaluation:
/// X_{t,t_next}(x) ~ x + ((t_next - t) / (1 - t)) (X_{t,1}(x) - x).
/// The chord from x to its endpoint: exact at t_next = 1 and t_next = t,
/// off by the transport curvature in between.
pub fn linearized_step<M: FlowMap>(map: &M, t: f64, t_next: f64, x: &State) -> Result<State> {
    let terminal = map.eval(t, 1.0, x)?;
    Ok(linearized_step_from_terminal(t, t_next, x, &terminal))
}

/// Same, with the terminal evaluation X_{t,1}(x) supplied by the caller.
pub fn linearized_step_from_terminal(t: f64, t_next: f64, x: &State, terminal: &State) -> State {
    let frac = (t_next - t) / (1.0 - t);
    let mut out = terminal - x;
    out *= frac;
    out += x;
    out
}

/// Max over `points` of ||X_{t,u}(X_{s,t}(x)) - X_{s,u}(x)||: the two-time
/// composition law, which any true flow map must satisfy.
pub fn check_semigroup<M: FlowMap>(
    map: &M,
    s: f64,
    t: f64,
    u: f64,
    points: &[State],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in points {
        let composed = map.eval(t, u, &map.eval(s, t, x)?)?;
        let direct = map.eval(s, u, x)?;
        worst = worst.max((composed - direct).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::targets::{gaussian_velocity, gmm_velocity, GaussianMixtureTarget};

    fn scalar(v: f64) -> State {
        State::from_element(1, v)
    }

    fn gauss(mu: f64, sigma: f64) -> GaussianTarget {
        GaussianTarget::scalar(mu, sigma).unwrap()
    }

    #[test]
    fn analytic_map_full_interval_is_affine_in_x() {
        // sigma1 = 1: X_{0,1}(x) = mu1 + x.
        let map = AnalyticGaussianFlowMap::new(&gauss(2.0, 1.0));
        let y = map.eval(0.0, 1.0, &scalar(0.7)).unwrap();
        assert!((y[0] - 2.7).abs() < 1e-14);
        // General sigma: gain sqrt(C_1 / C_0) = sigma1.
        let map = AnalyticGaussianFlowMap::new(&gauss(0.0, 2.0));
        let y = map.eval(0.0, 1.0, &scalar(0.7)).unwrap();
        assert!((y[0] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn analytic_map_gain_at_half_time() {
        // sigma1 = 1, t = 0.5: C = 0.5, gain to terminal = sqrt(2).
        let map = AnalyticGaussianFlowMap::new(&gauss(0.0, 1.0));
        assert!((map.gain(0.5, 1.0) - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn numeric_map_matches_analytic_on_gaussian() {
        let tgt = gauss(1.5, 0.7);
        let analytic = AnalyticGaussianFlowMap::new(&tgt);
        let numeric = NumericFlowMap::new(gaussian_velocity(&tgt), 64).unwrap();
        for &(s, t) in &[(0.3, 0.9), (0.0, 1.0), (0.8, 0.2), (0.5, 0.5)] {
            let x = scalar(-0.4);
            let ya = analytic.eval(s, t, &x).unwrap();
            let yn = numeric.eval(s, t, &x).unwrap();
            assert!(
                (ya[0] - yn[0]).abs() < 1e-9,
                "({s},{t}): analytic {} vs rk4 {}",
                ya[0],
                yn[0]
            );
        }
    }

    #[test]
    fn semigroup_holds_for_analytic_and_numeric_maps() {
        let tgt = gauss(1.0, 2.0);
        let points: Vec<State> = (0..10)
            .map(|i| CounterRng::stream(3, i).normal_vector(1))
            .collect();
        let analytic = AnalyticGaussianFlowMap::new(&tgt);
        let dev = check_semigroup(&analytic, 0.1, 0.6, 0.95, &points).unwrap();
        assert!(dev < 1e-12, "analytic semigroup deviation {dev:.2e}");

        let numeric = NumericFlowMap::new(gaussian_velocity(&tgt), 64).unwrap();
        let dev = check_semigroup(&numeric, 0.1, 0.6, 0.95, &points).unwrap();
        assert!(dev < 1e-8, "numeric semigroup deviation {dev:.2e}");
    }

    #[test]
    fn analytic_vjp_scales_by_gain() {
        let map = AnalyticGaussianFlowMap::new(&gauss(0.0, 1.0));
        let (_, pulled) = map.vjp(0.5, 1.0, &scalar(0.3), &scalar(1.0)).unwrap();
        assert!((pulled[0] - 2.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn numeric_vjp_matches_finite_differences_on_mixture() {
        let m = GaussianMixtureTarget::new(vec![
            (
                0.5,
                State::from_vec(vec![-1.0, 0.5]),
                Matrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
            ),
            (
                0.5,
                State::from_vec(vec![1.0, -0.5]),
                Matrix::from_row_slice(2, 2, &[0.6, -0.2, -0.2, 0.5]),
            ),
        ])
        .unwrap();
        let map = NumericFlowMap::new(gmm_velocity(&m), 32).unwrap();
        let (s, t) = (0.2, 0.9);
        let x = State::from_vec(vec![0.3, -0.1]);
        let w = State::from_vec(vec![0.7, -1.3]);
        let (y, pulled) = map.vjp(s, t, &x, &w).unwrap();
        assert!((&y - map.eval(s, t, &x).unwrap()).abs().max() < 1e-13);

        // Finite-difference J^T w: entry j is w . (X(x + h e_j) - X(x - h e_j)) / 2h.
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = w.dot(
                &((map.eval(s, t, &xp).unwrap() - map.eval(s, t, &xm).unwrap()) / (2.0 * h)),
            );
            assert!(
                (pulled[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "component {j}: adjoint {} vs fd {fd}",
                pulled[j]
            );
        }
    }

    #[test]
    fn numeric_vjp_matches_analytic_gain_on_gaussian() {
        let tgt = gauss(0.5, 1.3);
        let analytic = AnalyticGaussianFlowMap::new(&tgt);
        let numeric = NumericFlowMap::new(gaussian_velocity(&tgt), 128).unwrap();
        let (s, t) = (0.4, 1.0);
        let (_, pulled) = numeric.vjp(s, t, &scalar(0.9), &scalar(1.0)).unwrap();
        assert!((pulled[0] - analytic.gain(s, t)).abs() < 1e-9);
    }

    #[test]
    fn identity_interval_returns_input() {
        let tgt = gauss(0.0, 1.0);
        let numeric = NumericFlowMap::new(gaussian_velocity(&tgt), 8).unwrap();
        let x = scalar(0.42);
        assert!((numeric.eval(0.3, 0.3, &x).unwrap()[0] - 0.42).abs() < 1e-15);
        let (y, a) = numeric.vjp(0.3, 0.3, &x, &scalar(2.0)).unwrap();
        assert!((y[0] - 0.42).abs() < 1e-15 && (a[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn linearized_step_is_exact_only_at_the_interval_ends() {
        let map = AnalyticGaussianFlowMap::new(&gauss(1.0, 0.5));
        let x = scalar(-0.6);
        let t = 0.4;
        // Jump straight to t = 1 reproduces the terminal map exactly.
        let jump = linearized_step(&map, t, 1.0, &x).unwrap();
        let exact = map.eval(t, 1.0, &x).unwrap();
        assert!((jump[0] - exact[0]).abs() < 1e-14);
        // Zero interval returns the input.
        let stay = linearized_step(&map, t, t, &x).unwrap();
        assert!((stay[0] - x[0]).abs() < 1e-15);
        // In between the chord misses the curved transport by a known gap:
        // sigma1 = 2, x = 1 from t = 0 gives endpoint 2, chord midpoint 1.5,
        // true midpoint sqrt(C_{1/2}) = sqrt(5)/2.
        let wide = AnalyticGaussianFlowMap::new(&gauss(0.0, 2.0));
        let chord = linearized_step(&wide, 0.0, 0.5, &scalar(1.0)).unwrap();
        assert!((chord[0] - 1.5).abs() < 1e-15);
        let truth = wide.eval(0.0, 0.5, &scalar(1.0)).unwrap();
        assert!((truth[0] - 1.25f64.sqrt()).abs() < 1e-14);
        let gap = chord[0] - truth[0];
        assert!((gap - 0.381_966_011_250_105_1).abs() < 1e-12, "chord gap {gap}");
    }

    #[test]
    fn zero_substeps_is_rejected() {
        let tgt = gauss(0.0, 1.0);
        assert!(NumericFlowMap::new(gaussian_velocity(&tgt), 0).is_err());
    }

    #[test]
    fn analytic_jacobian_is_gain_times_identity_and_eval_into_agrees() {
        let tgt = GaussianTarget::new(State::from_vec(vec![1.0, -2.0]), 0.8).unwrap();
        let map = AnalyticGaussianFlowMap::new(&tgt);
        let x = State::from_vec(vec![0.3, 0.9]);
        let jac = map.jacobian(0.2, 0.7, &x).unwrap();
        let g = map.gain(0.2, 0.7);
        assert!((jac[(0, 0)] - g).abs() < 1e-15 && jac[(0, 1)].abs() < 1e-15);
        let mut out = State::zeros(2);
        map.eval_into(0.2, 0.7, &x, &mut out).unwrap();
        assert!((out - map.eval(0.2, 0.7, &x).unwrap()).abs().max() < 1e-15);
    }

    #[test]
    fn numeric_jacobian_transpose_matches_vjp_on_mixture() {
        let m = two_component_mixture();
        let map = NumericFlowMap::new(gmm_velocity(&m), 32).unwrap();
        let (s, t) = (0.15, 0.85);
        let x = State::from_vec(vec![-0.2, 0.6]);
        let jac = map.jacobian(s, t, &x).unwrap();
        for w in [State::from_vec(vec![1.0, 0.0]), State::from_vec(vec![-0.3, 1.1])] {
            let (_, pulled) = map.vjp(s, t, &x, &w).unwrap();
            let jt_w = jac.transpose() * &w;
            assert!(
                (pulled - jt_w).abs().max() < 1e-8,
                "adjoint and variational sensitivities disagree"
            );
        }
    }

    #[test]
    fn euler_map_is_first_order_and_vjp_matches_jacobian() {
        let m = two_component_mixture();
        let map = EulerFlowMap::new(gmm_velocity(&m));
        let exact = NumericFlowMap::new(gmm_velocity(&m), 64).unwrap();
        let x = State::from_vec(vec![0.4, -0.7]);
        let err = |dt: f64| {
            let a = map.eval(0.3, 0.3 + dt, &x).unwrap();
            let b = exact.eval(0.3, 0.3 + dt, &x).unwrap();
            (a - b).norm()
        };
        let ratio = err(0.2) / err(0.1);
        assert!((3.0..5.0).contains(&ratio), "expected ~4x shrink, got {ratio}");

        let w = State::from_vec(vec![0.5, 2.0]);
        let (_, pulled) = map.vjp(0.3, 0.9, &x, &w).unwrap();
        let jt_w = map.jacobian(0.3, 0.9, &x).unwrap().transpose() * &w;
        assert!((pulled - jt_w).abs().max() < 1e-14);
    }

    fn two_component_mixture() -> GaussianMixtureTarget {
        GaussianMixtureTarget::new(vec![
            (
                0.6,
                State::from_vec(vec![-1.0, 0.5]),
                Matrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
            ),
            (
                0.4,
                State::from_vec(vec![1.2, -0.3]),
                Matrix::from_row_slice(2, 2, &[0.6, -0.2, -0.2, 0.5]),
            ),
        ])
        .unwrap()
    }
}
