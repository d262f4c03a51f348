//! Time grids, interpolant schedules, velocity fields, and ODE steppers.
//!
//! The generative flow runs on t in [0, 1] with state x_t transported by
//! dx/dt = b_t(x). Under a stochastic interpolant I_t = alpha_t x0 + beta_t x1
//! the velocity is the conditional expectation b_t(x) = E[dI_t/dt | I_t = x],
//! and the posterior mean of the data point recovers as
//!
//!   x1_hat(x) = (alpha_t b_t(x) - alpha_dot_t x) / (alpha_t beta_dot_t - alpha_dot_t beta_t).
//!
//! For the linear schedule (alpha = 1 - t, beta = t) that is exactly one Euler
//! step to t = 1: x + (1 - t) b_t(x).

use crate::{Error, Matrix, Result, State};

/// Partition 0 = t_0 < t_1 < ... < t_N = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` intervals (n_steps + 1 knots).
    pub fn uniform(n_steps: usize) -> Self {
        assert!(n_steps >= 1, "grid needs at least one interval");
        let knots = (0..=n_steps)
            .map(|k| k as f64 / n_steps as f64)
            .collect();
        TimeGrid { knots }
    }

    /// Grid from explicit knots; must start at 0, end at 1, strictly increase.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::config("grid needs at least two knots"));
        }
        if knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::config("grid must span [0, 1] exactly"));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("grid knots must strictly increase"));
        }
        Ok(TimeGrid { knots })
    }

    /// Copy of this grid with `t` inserted as a knot (no-op if a knot already
    /// sits within 1e-12 of `t`).
    pub fn with_knot(&self, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config(format!("knot {t} outside [0, 1]")));
        }
        if self.knots.iter().any(|&k| (k - t).abs() <= 1e-12) {
            return Ok(self.clone());
        }
        let mut knots = self.knots.clone();
        let pos = knots.partition_point(|&k| k < t);
        knots.insert(pos, t);
        TimeGrid::from_knots(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_steps(&self) -> usize {
        self.knots.len() - 1
    }

    /// Index of the knot equal to `t` (within 1e-12), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.knots.iter().position(|&k| (k - t).abs() <= 1e-12)
    }
}

/// Interpolant coefficient schedule alpha_t, beta_t and their derivatives.
///
/// Pinned boundary values: alpha_0 = 1, beta_0 = 0, alpha_1 = 0, beta_1 = 1.
#[derive(Clone, Copy, Debug)]
pub enum InterpolantSchedule {
    /// alpha = 1 - t, beta = t.
    Linear,
    /// User-supplied coefficients; boundary values are validated on construction.
    Custom {
        alpha: fn(f64) -> f64,
        alpha_dot: fn(f64) -> f64,
        beta: fn(f64) -> f64,
        beta_dot: fn(f64) -> f64,
    },
}

impl InterpolantSchedule {
    pub fn custom(
        alpha: fn(f64) -> f64,
        alpha_dot: fn(f64) -> f64,
        beta: fn(f64) -> f64,
        beta_dot: fn(f64) -> f64,
    ) -> Result<Self> {
        let ok = |v: f64, want: f64| (v - want).abs() <= 1e-12;
        if !(ok(alpha(0.0), 1.0) && ok(beta(0.0), 0.0) && ok(alpha(1.0), 0.0) && ok(beta(1.0), 1.0))
        {
            return Err(Error::config(
                "schedule must satisfy alpha(0)=1, beta(0)=0, alpha(1)=0, beta(1)=1",
            ));
        }
        Ok(InterpolantSchedule::Custom { alpha, alpha_dot, beta, beta_dot })
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => 1.0 - t,
            InterpolantSchedule::Custom { alpha, .. } => alpha(t),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => -1.0,
            InterpolantSchedule::Custom { alpha_dot, .. } => alpha_dot(t),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => t,
            InterpolantSchedule::Custom { beta, .. } => beta(t),
        }
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => 1.0,
            InterpolantSchedule::Custom { beta_dot, .. } => beta_dot(t),
        }
    }
}

/// A time-dependent velocity field b_t(x) with spatial Jacobian grad b_t(x).
pub trait Velocity {
    fn dim(&self) -> usize;

    /// Write b_t(x) into `out` (same length as `x`).
    fn eval_into(&self, t: f64, x: &State, out: &mut State);

    /// Write grad b_t(x) into `out` (d x d).
    fn jacobian_into(&self, t: f64, x: &State, out: &mut Matrix);

    fn eval(&self, t: f64, x: &State) -> State {
        let mut out = State::zeros(x.len());
        self.eval_into(t, x, &mut out);
        out
    }

    fn jacobian(&self, t: f64, x: &State) -> Matrix {
        let mut out = Matrix::zeros(x.len(), x.len());
        self.jacobian_into(t, x, &mut out);
        out
    }
}

impl<V: Velocity + ?Sized> Velocity for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, t: f64, x: &State, out: &mut State) {
        (**self).eval_into(t, x, out)
    }
    fn jacobian_into(&self, t: f64, x: &State, out: &mut Matrix) {
        (**self).jacobian_into(t, x, out)
    }
}

/// One explicit Euler step: x + dt * b_t(x).
pub fn euler_step<V: Velocity + ?Sized>(v: &V, t: f64, dt: f64, x: &State) -> State {
    let mut out = v.eval(t, x);
    out *= dt;
    out += x;
    out
}

/// Classic RK4 from time `s` to time `t` (either direction) in `n_steps`
/// equal substeps. Fails with the offending substep index if the state
/// leaves the finite range.
pub fn rk4_integrate<V: Velocity + ?Sized>(
    v: &V,
    s: f64,
    t: f64,
    x: &State,
    n_steps: usize,
) -> Result<State> {
    assert!(n_steps >= 1, "rk4 needs at least one substep");
    let mut state = x.clone();
    let mut ws = Rk4Workspace::new(x.len());
    let h = (t - s) / n_steps as f64;
    for k in 0..n_steps {
        let tk = s + h * k as f64;
        rk4_step_into(v, tk, h, &mut state, &mut ws);
        if !state.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite { context: "rk4_integrate", step: k });
        }
    }
    Ok(state)
}

/// Scratch buffers for repeated RK4 stepping without per-step allocation.
pub(crate) struct Rk4Workspace {
    k1: State,
    k2: State,
    k3: State,
    k4: State,
    xs: State,
}

impl Rk4Workspace {
    pub(crate) fn new(dim: usize) -> Self {
        Rk4Workspace {
            k1: State::zeros(dim),
            k2: State::zeros(dim),
            k3: State::zeros(dim),
            k4: State::zeros(dim),
            xs: State::zeros(dim),
        }
    }
}

/// Advance `state` in place by one RK4 step of size `h` starting at time `t`.
pub(crate) fn rk4_step_into<V: Velocity + ?Sized>(
    v: &V,
    t: f64,
    h: f64,
    state: &mut State,
    ws: &mut Rk4Workspace,
) {
    let half = 0.5 * h;
    v.eval_into(t, state, &mut ws.k1);

    ws.xs.copy_from(state);
    ws.xs.axpy(half, &ws.k1, 1.0);
    v.eval_into(t + half, &ws.xs, &mut ws.k2);

    ws.xs.copy_from(state);
    ws.xs.axpy(half, &ws.k2, 1.0);
    v.eval_into(t + half, &ws.xs, &mut ws.k3);

    ws.xs.copy_from(state);
    ws.xs.axpy(h, &ws.k3, 1.0);
    v.eval_into(t + h, &ws.xs, &mut ws.k4);

    let w = h / 6.0;
    state.axpy(w, &ws.k1, 1.0);
    state.axpy(2.0 * w, &ws.k2, 1.0);
    state.axpy(2.0 * w, &ws.k3, 1.0);
    state.axpy(w, &ws.k4, 1.0);
}

/// Posterior mean of the data point given the current state:
/// (alpha_t b_t(x) - alpha_dot_t x) / (alpha_t beta_dot_t - alpha_dot_t beta_t).
///
/// Errors when the schedule denominator degenerates. For the linear schedule
/// the result equals `euler_step(v, t, 1 - t, x)` to machine precision.
pub fn posterior_mean<V: Velocity + ?Sized>(
    v: &V,
    schedule: &InterpolantSchedule,
    t: f64,
    x: &State,
) -> Result<State> {
    let a = schedule.alpha(t);
    let ad = schedule.alpha_dot(t);
    let bd = schedule.beta_dot(t);
    let b = schedule.beta(t);
    let den = a * bd - ad * b;
    if den.abs() < 1e-14 {
        return Err(Error::numerics(format!(
            "posterior_mean: degenerate schedule denominator {den:.3e} at t = {t}"
        )));
    }
    let mut out = v.eval(t, x);
    out *= a;
    out.axpy(-ad, x, 1.0);
    out /= den;
    Ok(out)
}
