//! Reward-guided sampling by operator splitting: each grid interval first
//! advances with the flow map, then applies gradient sub-steps that pull the
//! predicted endpoint toward higher reward.

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::flow_map::{linearized_step_from_terminal, FlowMap};
use crate::reward::Reward;
use crate::rng::CounterRng;
use crate::{Matrix, State};

/// How the endpoint reward gradient is pulled back to the current time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceVariant {
    /// Pull back through the flow-map sensitivity (adjoint / full Jacobian).
    Jacobian,
    /// Use the endpoint gradient directly, skipping the pullback.
    Euclidean,
}

/// Per-knot guidance strength lambda_t.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrengthSchedule {
    /// lambda_t = eta at every knot; assumed by all closed-form predictions.
    Constant,
    /// lambda_t = eta * t * (1 - t_plus) with t_plus the next grid knot
    /// (clamped to 1 at the last knot, so the final update is unweighted).
    TimeWeighted,
    /// lambda_t = eta * dt, with the raw signal rescaled to the local
    /// transport speed |X_{t,1}(x) - x| / (1 - t), direction preserved.
    NormalizedStep,
    /// Knot updates disabled; only the t=0 seed-optimization phase (which
    /// always uses the plain constant eta) can act.
    Off,
}

#[derive(Clone, Debug)]
pub struct GuidanceConfig {
    pub variant: GuidanceVariant,
    pub eta: f64,
    pub schedule: StrengthSchedule,
    /// Gradient sub-steps per interval; they share one endpoint query through
    /// a local affine endpoint model, so the query count stays flat.
    pub n_opt: usize,
    pub grid: TimeGrid,
    /// Guidance acts on knots in (0, t_stop]; one unguided jump finishes.
    pub t_stop: f64,
    /// Reuse the endpoint query of each interval for the advance itself
    /// (linearized step): one flow-map query per guided step instead of two.
    pub reuse_endpoint: bool,
    pub warmup_k: usize,
    pub warmup_fraction: f64,
    pub renoise_c: f64,
    /// Grid knot indices (strictly inside (0,1), before t_stop) at which the
    /// state is decomposed and partially renoised before the next step.
    pub renoise_knots: Vec<usize>,
    /// Gradient updates applied to the initial state at t = 0.
    pub seed_opt_steps: usize,
}

impl GuidanceConfig {
    pub fn new(variant: GuidanceVariant, eta: f64, grid: TimeGrid) -> Self {
        GuidanceConfig {
            variant,
            eta,
            schedule: StrengthSchedule::Constant,
            n_opt: 1,
            grid,
            t_stop: 1.0,
            reuse_endpoint: false,
            warmup_k: 1,
            warmup_fraction: 0.5,
            renoise_c: 0.0,
            renoise_knots: Vec::new(),
            seed_opt_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_stop > 0.0 && self.t_stop <= 1.0) {
            return Err(Error::config("t_stop must lie in (0, 1]"));
        }
        if self.n_opt == 0 {
            return Err(Error::config("n_opt must be at least 1"));
        }
        if self.warmup_k == 0 {
            return Err(Error::config("warmup_k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.renoise_c) {
            return Err(Error::config("renoise_c must lie in [0, 1]"));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::config("eta must be finite and non-negative"));
        }
        let stop = self
            .stop_index()
            .ok_or_else(|| Error::config("t_stop must coincide with a grid knot"))?;
        if stop == 0 {
            return Err(Error::config("t_stop must leave at least one guided step"));
        }
        let knots = self.grid.knots();
        for &idx in &self.renoise_knots {
            if idx == 0 || idx >= stop || knots[idx] >= 1.0 {
                return Err(Error::config(
                    "renoise knots must lie strictly inside (0, t_stop)",
                ));
            }
        }
        Ok(())
    }

    /// Index of t_stop in the grid, if it is a knot.
    pub fn stop_index(&self) -> Option<usize> {
        self.grid.index_of(self.t_stop)
    }

    /// Number of guided operator-split steps.
    pub fn n_guided(&self) -> usize {
        self.stop_index().unwrap_or(0)
    }

    /// Strength lambda_t for the update applied at grid knot `j` closing an
    /// interval of width `dt`.
    fn strength_at_knot(&self, j: usize, dt: f64) -> f64 {
        let knots = self.grid.knots();
        match self.schedule {
            StrengthSchedule::Constant => self.eta,
            StrengthSchedule::TimeWeighted => {
                let t_plus = if j + 1 < knots.len() { knots[j + 1] } else { 1.0 };
                self.eta * knots[j] * (1.0 - t_plus)
            }
            StrengthSchedule::NormalizedStep => self.eta * dt,
            StrengthSchedule::Off => 0.0,
        }
    }

    fn normalizes(&self) -> bool {
        self.schedule == StrengthSchedule::NormalizedStep
    }

    /// Exact number of flow-map queries a plain guided run performs: one per
    /// step with endpoint reuse, two without, one terminal jump, one for the
    /// seed phase if enabled, and one extra per renoise knot.
    pub fn expected_nfe(&self) -> usize {
        let per_step = if self.reuse_endpoint { 1 } else { 2 };
        let renoise =
            if self.renoise_c > 0.0 { self.renoise_knots.len() } else { 0 };
        self.n_guided() * per_step
            + 1
            + usize::from(self.seed_opt_steps > 0)
            + renoise
    }
}

/// One guided trajectory, with enough bookkeeping to audit the cost model.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    /// Full grid knot vector.
    pub knot_times: Vec<f64>,
    /// Times actually visited: knots up to t_stop, then 1.0.
    pub times: Vec<f64>,
    /// States at the visited times; the last entry is the terminal state.
    pub states: Vec<State>,
    /// Guidance displacement applied at each grid knot (zeros where none).
    pub controls: Vec<State>,
    /// Flow-map queries performed (each distinct (s, t, x) anchor counts once,
    /// regardless of how many sensitivities are pulled at it).
    pub nfe: usize,
    /// Reward value/gradient queries performed.
    pub reward_evals: usize,
    pub terminal_reward: f64,
}

impl TrajectoryRecord {
    pub fn terminal(&self) -> &State {
        self.states.last().expect("record holds at least the initial state")
    }
}

/// Raw guidance direction at (t, x): the endpoint reward gradient, pulled back
/// through the flow-map sensitivity for the Jacobian variant. Strength scaling
/// is the caller's job.
pub fn greedy_guidance_signal<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    t: f64,
    x: &State,
    variant: GuidanceVariant,
) -> Result<State> {
    let endpoint = map.eval(t, 1.0, x)?;
    let grad = r.grad(&endpoint);
    match variant {
        GuidanceVariant::Euclidean => Ok(grad),
        GuidanceVariant::Jacobian => {
            let (_, pulled) = map.vjp(t, 1.0, x, &grad)?;
            Ok(pulled)
        }
    }
}

/// Local endpoint model anchored at one flow-map query: either the full
/// sensitivity E(x) = E0 + J (x - x0), or the identity surrogate
/// E(x) = E0 + (x - x0) used by the Euclidean variant.
enum EndpointModel<'a> {
    Affine(&'a Matrix),
    Identity,
}

/// Shared inner loop: `n` gradient sub-steps of size `step` against the
/// affine endpoint model. `x` enters at the anchor point and leaves updated;
/// `e` enters at the anchored endpoint and tracks the model. Returns the
/// number of reward evaluations.
#[allow(clippy::too_many_arguments)]
fn gradient_sub_steps<R: Reward>(
    r: &R,
    model: &EndpointModel,
    x: &mut State,
    e: &mut State,
    step: f64,
    n: usize,
    normalize_to: Option<f64>,
    grad: &mut State,
    u: &mut State,
) -> Result<usize> {
    for _ in 0..n {
        r.grad_into(e, grad);
        match model {
            EndpointModel::Affine(jac) => u.gemv_tr(1.0, jac, grad, 0.0),
            EndpointModel::Identity => u.copy_from(grad),
        }
        if let Some(mag) = normalize_to {
            let norm = u.norm();
            if norm > 0.0 {
                *u *= mag / norm;
            }
        }
        x.axpy(step, u, 1.0);
        match model {
            EndpointModel::Affine(jac) => e.gemv(step, jac, u, 1.0),
            EndpointModel::Identity => e.axpy(step, u, 1.0),
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "gradient sub-step", step: 0 });
    }
    Ok(n)
}

/// n_opt gradient sub-steps at time `t` (a grid knot), sharing one endpoint
/// query. The interval width comes from the grid: the knot's own interval, or
/// the first interval when t is the initial knot.
pub fn multi_gradient_update<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    t: f64,
    x: &State,
) -> Result<State> {
    let j = cfg
        .grid
        .index_of(t)
        .ok_or_else(|| Error::config("update time must be a grid knot"))?;
    let knots = cfg.grid.knots();
    let dt = if j == 0 { knots[1] - knots[0] } else { knots[j] - knots[j - 1] };
    let lambda = cfg.strength_at_knot(j, dt);
    apply_gradient_phase(map, r, cfg, t, dt, lambda, x.clone()).map(|(x, _, _)| x)
}

/// Advance across [t_k, t_next] with the flow map (linearized when reusing the
/// endpoint query), then apply the gradient phase at t_next.
pub fn operator_split_step<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    t_k: f64,
    t_next: f64,
    x: &State,
) -> Result<State> {
    if t_k >= t_next {
        return Err(Error::config("split step needs t_k < t_next"));
    }
    let dt = t_next - t_k;
    let lambda = match cfg.grid.index_of(t_next) {
        Some(j) => cfg.strength_at_knot(j, dt),
        None => match cfg.schedule {
            StrengthSchedule::Constant => cfg.eta,
            StrengthSchedule::TimeWeighted => cfg.eta * t_next * (1.0 - t_next),
            StrengthSchedule::NormalizedStep => cfg.eta * dt,
            StrengthSchedule::Off => 0.0,
        },
    };
    if cfg.reuse_endpoint {
        let e0 = map.eval(t_k, 1.0, x)?;
        let advanced = linearized_step_from_terminal(t_k, t_next, x, &e0);
        if lambda == 0.0 {
            return Ok(advanced);
        }
        finish_gradient_phase(map, r, cfg, t_k, x, advanced, e0, dt, lambda)
            .map(|(x, _)| x)
    } else {
        let advanced = map.eval(t_k, t_next, x)?;
        if lambda == 0.0 {
            return Ok(advanced);
        }
        apply_gradient_phase(map, r, cfg, t_next, dt, lambda, advanced)
            .map(|(x, _, _)| x)
    }
}

/// Gradient phase with a fresh endpoint query anchored at (t, x).
/// Returns (new state, nfe, reward evals).
fn apply_gradient_phase<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    t: f64,
    dt: f64,
    lambda: f64,
    mut x: State,
) -> Result<(State, usize, usize)> {
    let mut e = map.eval(t, 1.0, &x)?;
    let step = dt / cfg.n_opt as f64 * lambda;
    let normalize_to = normalization_magnitude(cfg, t, &x, &e);
    let mut grad = State::zeros(x.len());
    let mut u = State::zeros(x.len());
    let evals = match cfg.variant {
        GuidanceVariant::Euclidean => gradient_sub_steps(
            r,
            &EndpointModel::Identity,
            &mut x,
            &mut e,
            step,
            cfg.n_opt,
            normalize_to,
            &mut grad,
            &mut u,
        )?,
        GuidanceVariant::Jacobian => {
            let jac = map.jacobian(t, 1.0, &x)?;
            gradient_sub_steps(
                r,
                &EndpointModel::Affine(&jac),
                &mut x,
                &mut e,
                step,
                cfg.n_opt,
                normalize_to,
                &mut grad,
                &mut u,
            )?
        }
    };
    Ok((x, 1, evals))
}

/// Gradient phase that reuses an endpoint query anchored at (t_anchor, x_pre):
/// by the composition law the advanced state shares the same endpoint, and the
/// sensitivity is pulled back from the anchor time.
#[allow(clippy::too_many_arguments)]
fn finish_gradient_phase<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    t_anchor: f64,
    x_pre: &State,
    mut x: State,
    mut e: State,
    dt: f64,
    lambda: f64,
) -> Result<(State, usize)> {
    let step = dt / cfg.n_opt as f64 * lambda;
    let normalize_to = normalization_magnitude(cfg, t_anchor, x_pre, &e);
    let mut grad = State::zeros(x.len());
    let mut u = State::zeros(x.len());
    let evals = match cfg.variant {
        GuidanceVariant::Euclidean => gradient_sub_steps(
            r,
            &EndpointModel::Identity,
            &mut x,
            &mut e,
            step,
            cfg.n_opt,
            normalize_to,
            &mut grad,
            &mut u,
        )?,
        GuidanceVariant::Jacobian => {
            let jac = map.jacobian(t_anchor, 1.0, x_pre)?;
            gradient_sub_steps(
                r,
                &EndpointModel::Affine(&jac),
                &mut x,
                &mut e,
                step,
                cfg.n_opt,
                normalize_to,
                &mut grad,
                &mut u,
            )?
        }
    };
    Ok((x, evals))
}

/// Reference magnitude for the normalized-step schedule: the mean transport
/// speed over the remaining horizon, measured at the anchor. Falls back to no
/// rescale (None) when the horizon has collapsed.
fn normalization_magnitude(
    cfg: &GuidanceConfig,
    t_anchor: f64,
    x_anchor: &State,
    endpoint: &State,
) -> Option<f64> {
    if !cfg.normalizes() || 1.0 - t_anchor < 1e-12 {
        return None;
    }
    Some((endpoint - x_anchor).norm() / (1.0 - t_anchor))
}

/// Decompose the state into its implied noise/endpoint pair using the mean
/// remaining transport velocity, remix the noise part with fresh noise, and
/// recompose.
pub fn stochastic_renoise<M: FlowMap>(
    map: &M,
    t: f64,
    x: &State,
    c: f64,
    noise: &State,
) -> Result<State> {
    let terminal = map.eval(t, 1.0, x)?;
    Ok(renoise_from_terminal(t, x, c, noise, &terminal))
}

/// Same, with the endpoint X_{t,1}(x) supplied by the caller.
pub fn renoise_from_terminal(
    t: f64,
    x: &State,
    c: f64,
    noise: &State,
    terminal: &State,
) -> State {
    // v = (x_hat_1 - x) / (1 - t); x_hat_0 = x - t v; x_tilde_0 mixes in the
    // fresh noise; recompose on the straight line between x_tilde_0 and
    // x_hat_1 = terminal.
    let v = (terminal - x) / (1.0 - t);
    let mut x0 = x.clone();
    x0.axpy(-t, &v, 1.0);
    x0 *= 1.0 - c;
    x0.axpy(c, noise, 1.0);
    x0 *= 1.0 - t;
    x0.axpy(t, terminal, 1.0);
    x0
}

/// Plain guided run; renoising (if configured) draws from a fixed stream.
pub fn run_guided_trajectory<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    x0: &State,
) -> Result<TrajectoryRecord> {
    let mut rng = CounterRng::stream(0, 0);
    run_guided_trajectory_with_noise(map, r, cfg, x0, &mut rng)
}

/// Guided run with caller-controlled noise (per-particle streams).
pub fn run_guided_trajectory_with_noise<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    x0: &State,
    rng: &mut CounterRng,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let mut walker = Walker::new(map, r, cfg, x0.clone(), true);
    walker.seed_phase()?;
    let stop = cfg.stop_index().expect("validated");
    for k in 0..stop {
        walker.advance_knot(k, rng)?;
    }
    let record = walker.finish()?;
    assert_eq!(
        record.nfe,
        cfg.expected_nfe(),
        "flow-map query count departed from the cost model"
    );
    Ok(record)
}

/// Lean variant for large ensembles: terminal state, terminal reward, NFE.
pub fn run_guided_terminal<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    x0: &State,
    rng: &mut CounterRng,
) -> Result<(State, f64, usize)> {
    let mut walker = Walker::new(map, r, cfg, x0.clone(), false);
    walker.seed_phase()?;
    let stop = cfg.stop_index().ok_or_else(|| Error::config("t_stop off grid"))?;
    for k in 0..stop {
        walker.advance_knot(k, rng)?;
    }
    let record = walker.finish()?;
    let reward = record.terminal_reward;
    let nfe = record.nfe;
    let mut states = record.states;
    Ok((states.pop().expect("terminal state"), reward, nfe))
}

/// Run `warmup_k` particles through the head of the schedule, keep the one
/// whose endpoint lookahead scores best (ties to the lowest index), and only
/// continue that one. Seeds index per-particle noise streams; the initial
/// states are standard normal draws from those streams.
pub fn warmup_select<M: FlowMap, R: Reward>(
    map: &M,
    r: &R,
    cfg: &GuidanceConfig,
    seeds: &[u64],
) -> Result<(usize, TrajectoryRecord)> {
    cfg.validate()?;
    if seeds.len() != cfg.warmup_k {
        return Err(Error::config("warmup needs exactly warmup_k seeds"));
    }
    let dim = map.dim();
    let stop = cfg.stop_index().expect("validated");
    let mut rngs: Vec<CounterRng> =
        seeds.iter().map(|&s| CounterRng::stream(s, 0)).collect();
    if cfg.warmup_k == 1 {
        let x0 = rngs[0].normal_vector(dim);
        let rec = {
            let mut walker = Walker::new(map, r, cfg, x0, true);
            walker.seed_phase()?;
            for k in 0..stop {
                walker.advance_knot(k, &mut rngs[0])?;
            }
            walker.finish()?
        };
        return Ok((0, rec));
    }

    let head = (cfg.warmup_fraction * stop as f64).ceil() as usize;
    let head = head.min(stop);
    let mut walkers = Vec::with_capacity(cfg.warmup_k);
    for rng in rngs.iter_mut() {
        let x0 = rng.normal_vector(dim);
        let mut walker = Walker::new(map, r, cfg, x0, true);
        walker.seed_phase()?;
        for k in 0..head {
            walker.advance_knot(k, rng)?;
        }
        walkers.push(walker);
    }
    // Score each particle by the reward of its endpoint lookahead.
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut extra_nfe = 0usize;
    let mut extra_evals = 0usize;
    for (i, walker) in walkers.iter().enumerate() {
        let lookahead = map.eval(walker.t(), 1.0, &walker.x)?;
        extra_nfe += 1;
        extra_evals += 1;
        let score = r.value(&lookahead);
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    // Fold the cost of the losing heads into the winner's accounting.
    for (i, walker) in walkers.iter().enumerate() {
        if i != best {
            extra_nfe += walker.nfe;
            extra_evals += walker.reward_evals;
        }
    }
    let mut winner = walkers.swap_remove(best);
    winner.nfe += extra_nfe;
    winner.reward_evals += extra_evals;
    for k in head..stop {
        winner.advance_knot(k, &mut rngs[best])?;
    }
    Ok((best, winner.finish()?))
}

/// Stepper shared by the trajectory runners: owns the state, the cost
/// counters, and the scratch buffers for the allocation-sensitive path.
struct Walker<'a, M: FlowMap, R: Reward> {
    map: &'a M,
    r: &'a R,
    cfg: &'a GuidanceConfig,
    x: State,
    knot: usize,
    nfe: usize,
    reward_evals: usize,
    // scratch
    e: State,
    xt: State,
    grad: State,
    u: State,
    jac: Matrix,
    // recording (empty when disabled)
    record: bool,
    times: Vec<f64>,
    states: Vec<State>,
    controls: Vec<State>,
}

impl<'a, M: FlowMap, R: Reward> Walker<'a, M, R> {
    fn new(map: &'a M, r: &'a R, cfg: &'a GuidanceConfig, x0: State, record: bool) -> Self {
        let d = x0.len();
        let n_knots = cfg.grid.knots().len();
        let (times, states, controls) = if record {
            (
                Vec::with_capacity(n_knots + 1),
                Vec::with_capacity(n_knots + 1),
                vec![State::zeros(d); n_knots],
            )
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        Walker {
            map,
            r,
            cfg,
            x: x0,
            knot: 0,
            nfe: 0,
            reward_evals: 0,
            e: State::zeros(d),
            xt: State::zeros(d),
            grad: State::zeros(d),
            u: State::zeros(d),
            jac: Matrix::zeros(d, d),
            record,
            times,
            states,
            controls,
        }
    }

    fn t(&self) -> f64 {
        self.cfg.grid.knots()[self.knot]
    }

    /// Gradient updates on the initial state; always the Jacobian pullback
    /// with the plain constant strength eta, since schedules parameterize the
    /// in-trajectory updates.
    fn seed_phase(&mut self) -> Result<()> {
        if self.cfg.seed_opt_steps > 0 {
            let knots = self.cfg.grid.knots();
            let dt = knots[1] - knots[0];
            let n = self.cfg.seed_opt_steps;
            let step = dt / n as f64 * self.cfg.eta;
            let before = if self.record { Some(self.x.clone()) } else { None };
            self.anchor_queries(0.0, true)?;
            let evals = gradient_sub_steps(
                self.r,
                &EndpointModel::Affine(&self.jac),
                &mut self.x,
                &mut self.e,
                step,
                n,
                None,
                &mut self.grad,
                &mut self.u,
            )?;
            self.reward_evals += evals;
            if let Some(before) = before {
                self.controls[0] = &self.x - before;
            }
        }
        if self.record {
            self.times.push(self.t());
            self.states.push(self.x.clone());
        }
        Ok(())
    }

    /// Populate (e, jac) at the anchor (t, x) with a single flow-map query;
    /// the sensitivity and the endpoint share the anchor, so this counts once.
    fn anchor_queries(&mut self, t: f64, jacobian_variant: bool) -> Result<()> {
        if jacobian_variant {
            self.map.jacobian_into(t, 1.0, &self.x, &mut self.jac)?;
        }
        self.map.eval_into(t, 1.0, &self.x, &mut self.e)?;
        self.nfe += 1;
        Ok(())
    }

    /// One operator-split step across interval [knots[k], knots[k+1]],
    /// preceded by renoising when configured at knot k.
    fn advance_knot(&mut self, k: usize, rng: &mut CounterRng) -> Result<()> {
        debug_assert_eq!(k, self.knot);
        let knots = self.cfg.grid.knots();
        let (t, t_next) = (knots[k], knots[k + 1]);
        let dt = t_next - t;
        let lambda = self.cfg.strength_at_knot(k + 1, dt);
        let jacobian_variant = self.cfg.variant == GuidanceVariant::Jacobian;
        let n = self.cfg.n_opt;
        let step = dt / n as f64 * lambda;

        if self.cfg.renoise_c > 0.0 && self.cfg.renoise_knots.contains(&k) {
            self.map.eval_into(t, 1.0, &self.x, &mut self.e)?;
            self.nfe += 1;
            let noise = rng.normal_vector(self.x.len());
            let renoised = renoise_from_terminal(t, &self.x, self.cfg.renoise_c, &noise, &self.e);
            self.x = renoised;
        }

        if self.cfg.reuse_endpoint {
            // One query at (t, x): endpoint and sensitivity anchor.
            self.anchor_queries(t, jacobian_variant)?;
            // Linearized advance toward the shared endpoint.
            let frac = dt / (1.0 - t);
            self.xt.copy_from(&self.e);
            self.xt -= &self.x;
            self.xt *= frac;
            self.xt += &self.x;
            std::mem::swap(&mut self.x, &mut self.xt);
            // By the composition law the advanced state keeps endpoint e.
            let normalize_to = if self.cfg.normalizes() {
                Some((&self.e - &self.xt).norm() / (1.0 - t))
            } else {
                None
            };
            let before = if self.record { Some(self.x.clone()) } else { None };
            let model = if jacobian_variant {
                EndpointModel::Affine(&self.jac)
            } else {
                EndpointModel::Identity
            };
            let evals = gradient_sub_steps(
                self.r,
                &model,
                &mut self.x,
                &mut self.e,
                step,
                n,
                normalize_to,
                &mut self.grad,
                &mut self.u,
            )?;
            self.reward_evals += evals;
            if let Some(before) = before {
                self.controls[k + 1] = &self.x - before;
            }
        } else {
            // Exact advance, then a fresh anchor at (t_next, x_tilde).
            self.map.eval_into(t, t_next, &self.x, &mut self.xt)?;
            self.nfe += 1;
            std::mem::swap(&mut self.x, &mut self.xt);
            self.anchor_queries(t_next, jacobian_variant)?;
            let normalize_to = if self.cfg.normalizes() && 1.0 - t_next > 1e-12 {
                Some((&self.e - &self.x).norm() / (1.0 - t_next))
            } else {
                None
            };
            let before = if self.record { Some(self.x.clone()) } else { None };
            let model = if jacobian_variant {
                EndpointModel::Affine(&self.jac)
            } else {
                EndpointModel::Identity
            };
            let evals = gradient_sub_steps(
                self.r,
                &model,
                &mut self.x,
                &mut self.e,
                step,
                n,
                normalize_to,
                &mut self.grad,
                &mut self.u,
            )?;
            self.reward_evals += evals;
            if let Some(before) = before {
                self.controls[k + 1] = &self.x - before;
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "guided step", step: k });
        }
        self.knot = k + 1;
        if self.record {
            self.times.push(t_next);
            self.states.push(self.x.clone());
        }
        Ok(())
    }

    /// Unguided jump X_{t_stop,1} and terminal reward.
    fn finish(mut self) -> Result<TrajectoryRecord> {
        let t = self.t();
        self.map.eval_into(t, 1.0, &self.x, &mut self.e)?;
        self.nfe += 1;
        std::mem::swap(&mut self.x, &mut self.e);
        let terminal_reward = self.r.value(&self.x);
        self.reward_evals += 1;
        if self.record {
            if t < 1.0 {
                self.times.push(1.0);
                self.states.push(self.x.clone());
            } else {
                // The jump from t = 1 is the identity; keep one terminal entry.
                *self.states.last_mut().expect("recorded") = self.x.clone();
            }
        } else {
            self.times.push(1.0);
            self.states.push(self.x.clone());
        }
        Ok(TrajectoryRecord {
            knot_times: self.cfg.grid.knots().to_vec(),
            times: self.times,
            states: self.states,
            controls: self.controls,
            nfe: self.nfe,
            reward_evals: self.reward_evals,
            terminal_reward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_map::{AnalyticGaussianFlowMap, NumericFlowMap};
    use crate::reward::QuadraticReward;
    use crate::targets::{gmm_velocity, GaussianMixtureTarget, GaussianTarget};
    use std::f64::consts::PI;

    fn scalar(v: f64) -> State {
        State::from_element(1, v)
    }

    fn gauss_map(mu: f64, sigma: f64) -> AnalyticGaussianFlowMap {
        AnalyticGaussianFlowMap::new(&GaussianTarget::scalar(mu, sigma).unwrap())
    }

    fn quad(a: f64) -> QuadraticReward {
        QuadraticReward::new(scalar(a))
    }

    fn base_cfg(variant: GuidanceVariant, eta: f64, n_steps: usize) -> GuidanceConfig {
        GuidanceConfig::new(variant, eta, TimeGrid::uniform(n_steps))
    }

    #[test]
    fn signal_vanishes_when_endpoint_gradient_vanishes() {
        let map = gauss_map(0.0, 2.0);
        let r = quad(1.0);
        // Pick x with X_{t,1}(x) = 1: x = t mu + (a - t mu)/gain.
        let t = 0.4;
        let x = scalar(1.0 / map.gain(t, 1.0));
        let u = greedy_guidance_signal(&map, &r, t, &x, GuidanceVariant::Jacobian).unwrap();
        assert!(u[0].abs() < 1e-12);
    }

    #[test]
    fn signal_matches_hand_computed_gaussian_case() {
        // sigma1 = 2, mu1 = 0, anchor 1: at t = 0, x = 0 the endpoint is 0,
        // the reward gradient is 2, and the pullback gain is 2, so the
        // Jacobian-variant signal is 4 and the Euclidean one is 2.
        let map = gauss_map(0.0, 2.0);
        let r = quad(1.0);
        let uj =
            greedy_guidance_signal(&map, &r, 0.0, &scalar(0.0), GuidanceVariant::Jacobian)
                .unwrap();
        let ue =
            greedy_guidance_signal(&map, &r, 0.0, &scalar(0.0), GuidanceVariant::Euclidean)
                .unwrap();
        assert!((uj[0] - 4.0).abs() < 1e-13);
        assert!((ue[0] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn variants_coincide_at_terminal_time() {
        let map = gauss_map(0.5, 1.7);
        let r = quad(-0.3);
        let x = scalar(0.9);
        let uj = greedy_guidance_signal(&map, &r, 1.0, &x, GuidanceVariant::Jacobian).unwrap();
        let ue = greedy_guidance_signal(&map, &r, 1.0, &x, GuidanceVariant::Euclidean).unwrap();
        assert!((uj[0] - ue[0]).abs() < 1e-14);
        assert!((uj[0] - r.grad(&x)[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_strength_split_step_is_pure_transport() {
        let map = gauss_map(1.0, 0.5);
        let r = quad(2.0);
        let cfg = base_cfg(GuidanceVariant::Jacobian, 0.0, 10);
        let x = scalar(-0.4);
        let stepped = operator_split_step(&map, &r, &cfg, 0.3, 0.4, &x).unwrap();
        let pure = map.eval(0.3, 0.4, &x).unwrap();
        assert!((stepped[0] - pure[0]).abs() < 1e-15);
    }

    #[test]
    fn single_substep_matches_explicit_formula() {
        // x_next = x_tilde + dt * lambda * u(t_next, x_tilde).
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.7, 10);
        cfg.n_opt = 1;
        let (t, t_next) = (0.3, 0.4);
        let x = scalar(0.2);
        let stepped = operator_split_step(&map, &r, &cfg, t, t_next, &x).unwrap();
        let xt = map.eval(t, t_next, &x).unwrap();
        let u = greedy_guidance_signal(&map, &r, t_next, &xt, GuidanceVariant::Jacobian).unwrap();
        let expected = xt[0] + (t_next - t) * cfg.eta * u[0];
        assert!((stepped[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn reused_terminal_step_is_endpoint_lookahead() {
        let map = gauss_map(0.3, 1.2);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.0, 4);
        cfg.reuse_endpoint = true;
        let x = scalar(0.5);
        let stepped = operator_split_step(&map, &r, &cfg, 0.75, 1.0, &x).unwrap();
        let lookahead = map.eval(0.75, 1.0, &x).unwrap();
        assert!((stepped[0] - lookahead[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_strength_update_is_identity_for_any_n_opt() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        for n in [1, 3, 7] {
            let mut cfg = base_cfg(GuidanceVariant::Euclidean, 0.0, 10);
            cfg.n_opt = n;
            let x = scalar(0.31);
            let out = multi_gradient_update(&map, &r, &cfg, 0.5, &x).unwrap();
            assert_eq!(out[0], x[0]);
        }
    }

    #[test]
    fn repeated_euclidean_updates_drive_endpoint_to_anchor() {
        // Damped ascent on the endpoint reward: the fixed point x* satisfies
        // grad r(X_{t,1}(x*)) = 0, i.e. the lookahead hits the anchor.
        let map = gauss_map(0.0, 0.8);
        let r = quad(1.3);
        let mut cfg = base_cfg(GuidanceVariant::Euclidean, 0.4, 10);
        cfg.n_opt = 2;
        let t = 0.5;
        let mut x = scalar(-0.7);
        for _ in 0..4000 {
            let next = multi_gradient_update(&map, &r, &cfg, t, &x).unwrap();
            let moved = (next[0] - x[0]).abs();
            x = next;
            if moved < 1e-14 {
                break;
            }
        }
        let endpoint = map.eval(t, 1.0, &x).unwrap();
        assert!(
            (endpoint[0] - 1.3).abs() < 1e-6,
            "fixed-point lookahead {} should sit at the anchor",
            endpoint[0]
        );
    }

    #[test]
    fn multi_substep_jacobian_update_matches_hand_iteration() {
        let map = gauss_map(0.5, 2.0);
        let r = quad(-1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.6, 8);
        cfg.n_opt = 4;
        let t = 0.25; // knot 2 of 8
        let x = scalar(0.9);
        let out = multi_gradient_update(&map, &r, &cfg, t, &x).unwrap();

        let g = map.gain(t, 1.0);
        let dt = 1.0 / 8.0;
        let step = dt / 4.0 * cfg.eta;
        let mut xi = x[0];
        let mut e = map.eval(t, 1.0, &x).unwrap()[0];
        for _ in 0..4 {
            let u = g * (-2.0) * (e - (-1.0));
            xi += step * u;
            e += step * g * u;
        }
        assert!((out[0] - xi).abs() < 1e-14);
    }

    #[test]
    fn unguided_run_reproduces_flow_map_and_cost_model() {
        let map = gauss_map(1.0, 0.5);
        let r = quad(0.0);
        let cfg = base_cfg(GuidanceVariant::Jacobian, 0.0, 20);
        let x0 = scalar(0.8);
        let rec = run_guided_trajectory(&map, &r, &cfg, &x0).unwrap();
        let direct = map.eval(0.0, 1.0, &x0).unwrap();
        assert!((rec.terminal()[0] - direct[0]).abs() < 1e-12);
        assert_eq!(rec.nfe, 2 * 20 + 1);
        assert_eq!(rec.times.len(), rec.states.len());
        assert!((rec.terminal_reward - r.value(&direct)).abs() < 1e-12);
    }

    #[test]
    fn endpoint_reuse_halves_the_query_count() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.5, 16);
        cfg.reuse_endpoint = true;
        cfg.n_opt = 3;
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(0.2)).unwrap();
        assert_eq!(rec.nfe, 16 + 1);
        let mut cfg2 = cfg.clone();
        cfg2.reuse_endpoint = false;
        let rec2 = run_guided_trajectory(&map, &r, &cfg2, &scalar(0.2)).unwrap();
        assert_eq!(rec2.nfe, 2 * 16 + 1);
    }

    #[test]
    fn seed_phase_adds_one_query_and_moves_the_start() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.5, 10);
        cfg.seed_opt_steps = 3;
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(0.0)).unwrap();
        assert_eq!(rec.nfe, 2 * 10 + 1 + 1);
        assert!(rec.controls[0].norm() > 0.0, "seed phase should act at t = 0");
    }

    #[test]
    fn controls_vanish_beyond_the_stop_time() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.8, 10);
        cfg.t_stop = 0.5;
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(0.1)).unwrap();
        for (j, t) in rec.knot_times.iter().enumerate() {
            if *t > 0.5 {
                assert_eq!(rec.controls[j].norm(), 0.0, "control at knot {t}");
            }
        }
        // Guided knots up to the stop time carry nonzero controls.
        assert!(rec.controls[3].norm() > 0.0);
        assert_eq!(rec.nfe, 2 * 5 + 1);
    }

    #[test]
    fn early_stop_tail_is_exactly_the_unguided_flow() {
        let map = gauss_map(0.4, 1.5);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.6, 8);
        cfg.t_stop = 0.75;
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(-0.3)).unwrap();
        let stop_state = &rec.states[rec.times.iter().position(|&t| t == 0.75).unwrap()];
        let replay = map.eval(0.75, 1.0, stop_state).unwrap();
        assert!((replay[0] - rec.terminal()[0]).abs() < 1e-10);
    }

    #[test]
    fn refinement_converges_to_the_closed_form_guided_solution() {
        // Constant strength, single sub-step: terminal states form a Cauchy
        // sequence converging to the exact solution of the greedy guidance
        // ODE, which maps x0 affinely with shrink factor exp(-pi lambda s1).
        let (mu1, sigma1, a, lambda, x0) = (0.5, 1.0, 1.0, 0.3, 0.7);
        let map = gauss_map(mu1, sigma1);
        let r = quad(a);
        let mut terminals = Vec::new();
        for n in [25usize, 50, 100, 200, 400] {
            let cfg = base_cfg(GuidanceVariant::Jacobian, lambda, n);
            let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(x0)).unwrap();
            terminals.push(rec.terminal()[0]);
        }
        let diffs: Vec<f64> =
            terminals.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        for pair in diffs.windows(2) {
            assert!(pair[1] < pair[0], "Cauchy differences should shrink: {diffs:?}");
        }
        let shrink = (-PI * lambda * sigma1).exp();
        let exact = a + (mu1 - a) * shrink + sigma1 * shrink * x0;
        let gap = (terminals.last().unwrap() - exact).abs();
        assert!(gap <= 1e-3, "finest grid gap {gap:.2e}");
    }

    #[test]
    fn time_weighted_schedule_silences_the_final_update() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Euclidean, 0.9, 6);
        cfg.schedule = StrengthSchedule::TimeWeighted;
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(0.4)).unwrap();
        let last = rec.controls.last().unwrap();
        assert_eq!(last.norm(), 0.0, "weight t (1 - t_plus) vanishes at t = 1");
        // Interior knots are still guided.
        assert!(rec.controls[3].norm() > 0.0);
    }

    #[test]
    fn normalized_schedule_preserves_the_update_direction() {
        // The rescaled update must be a positive multiple of the raw signal.
        let map = gauss_map(0.7, 1.4);
        let r = quad(2.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.5, 8);
        cfg.schedule = StrengthSchedule::NormalizedStep;
        cfg.n_opt = 1;
        let (t, t_next) = (0.25, 0.375);
        let x = scalar(0.1);
        let stepped = operator_split_step(&map, &r, &cfg, t, t_next, &x).unwrap();
        let xt = map.eval(t, t_next, &x).unwrap();
        let raw = greedy_guidance_signal(&map, &r, t_next, &xt, GuidanceVariant::Jacobian)
            .unwrap();
        let applied = stepped[0] - xt[0];
        assert!(applied * raw[0] > 0.0, "direction flipped");
        // Magnitude: (dt * lambda_t) * |v| with lambda_t = eta dt.
        let dt = t_next - t;
        let e = map.eval(t_next, 1.0, &xt).unwrap();
        let v = (e[0] - xt[0]).abs() / (1.0 - t_next);
        let expected = dt * (cfg.eta * dt) * v * raw[0].signum();
        assert!((applied - expected).abs() < 1e-12);
    }

    #[test]
    fn off_schedule_leaves_only_the_seed_phase() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.5, 8);
        cfg.schedule = StrengthSchedule::Off;
        cfg.seed_opt_steps = 4;
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(0.3)).unwrap();
        assert!(rec.controls[0].norm() > 0.0);
        for c in &rec.controls[1..] {
            assert_eq!(c.norm(), 0.0);
        }
        // The post-seed trajectory is the plain flow from the shifted start.
        let start = &rec.states[0];
        let direct = map.eval(0.0, 1.0, start).unwrap();
        assert!((rec.terminal()[0] - direct[0]).abs() < 1e-12);
    }

    #[test]
    fn renoise_identity_and_full_mix_limits() {
        let map = gauss_map(1.0, 2.0);
        let t = 0.6;
        let x = scalar(0.4);
        let eps = scalar(0.25);
        let same = stochastic_renoise(&map, t, &x, 0.0, &eps).unwrap();
        assert!((same[0] - x[0]).abs() < 1e-14, "c = 0 must be the identity");

        let full = stochastic_renoise(&map, t, &x, 1.0, &eps).unwrap();
        let terminal = map.eval(t, 1.0, &x).unwrap();
        let expected = (1.0 - t) * eps[0] + t * terminal[0];
        assert!((full[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn renoise_matches_hand_evaluated_mix() {
        // sigma1 = 2, mu1 = 1, t = 0.6, x = 0.4: C_t = 1.6, gain = sqrt(2.5),
        // endpoint = 1 + sqrt(2.5) (0.4 - 0.6), v = (endpoint - x)/0.4, then
        // the three-formula recomposition with c = 0.3, eps = 0.25.
        let map = gauss_map(1.0, 2.0);
        let (t, c) = (0.6, 0.3);
        let x = scalar(0.4);
        let eps = scalar(0.25);
        let endpoint = 1.0 + 2.5f64.sqrt() * (0.4 - 0.6);
        let v = (endpoint - 0.4) / 0.4;
        let x0_hat = 0.4 - t * v;
        let x0_mix = (1.0 - c) * x0_hat + c * 0.25;
        let expected = (1.0 - t) * x0_mix + t * endpoint;
        let got = stochastic_renoise(&map, t, &x, c, &eps).unwrap();
        assert!((got[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn renoise_knots_cost_one_extra_query_each() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Euclidean, 0.4, 10);
        cfg.renoise_c = 0.5;
        cfg.renoise_knots = vec![4, 7];
        let rec = run_guided_trajectory(&map, &r, &cfg, &scalar(0.1)).unwrap();
        assert_eq!(rec.nfe, 2 * 10 + 1 + 2);
    }

    #[test]
    fn single_particle_warmup_is_the_plain_runner() {
        let map = gauss_map(0.0, 1.3);
        let r = quad(0.8);
        let mut cfg = base_cfg(GuidanceVariant::Jacobian, 0.5, 12);
        cfg.warmup_k = 1;
        let (idx, rec) = warmup_select(&map, &r, &cfg, &[42]).unwrap();
        assert_eq!(idx, 0);
        let mut rng = CounterRng::stream(42, 0);
        let x0 = rng.normal_vector(1);
        let direct =
            run_guided_trajectory_with_noise(&map, &r, &cfg, &x0, &mut rng).unwrap();
        assert_eq!(rec.nfe, direct.nfe);
        assert_eq!(rec.terminal()[0], direct.terminal()[0]);
    }

    #[test]
    fn identical_seeds_tie_break_to_the_lowest_index() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let mut cfg = base_cfg(GuidanceVariant::Euclidean, 0.5, 8);
        cfg.warmup_k = 3;
        let (idx, _) = warmup_select(&map, &r, &cfg, &[7, 7, 7]).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn warmup_selection_helps_on_a_bimodal_mixture() {
        // Reward centered on the +1.5 mode; picking the best of three heads
        // should beat a single particle on average over paired trials.
        let mixture = GaussianMixtureTarget::new(vec![
            (0.5, scalar(-1.5), Matrix::from_element(1, 1, 0.05)),
            (0.5, scalar(1.5), Matrix::from_element(1, 1, 0.05)),
        ])
        .unwrap();
        let map = NumericFlowMap::new(gmm_velocity(&mixture), 12).unwrap();
        let r = quad(1.5);
        let mut cfg = base_cfg(GuidanceVariant::Euclidean, 0.8, 12);
        cfg.warmup_k = 3;
        let trials: u64 = 200;
        let mut warm_sum = 0.0;
        let mut solo_sum = 0.0;
        for trial in 0..trials {
            let seeds: [u64; 3] = [3 * trial + 1, 3 * trial + 2, 3 * trial + 3];
            let (_, rec) = warmup_select(&map, &r, &cfg, &seeds).unwrap();
            warm_sum += rec.terminal_reward;
            // Paired single-particle run from the first seed.
            let mut solo_cfg = cfg.clone();
            solo_cfg.warmup_k = 1;
            let (_, solo) = warmup_select(&map, &r, &solo_cfg, &seeds[..1]).unwrap();
            solo_sum += solo.terminal_reward;
        }
        let (warm, solo) = (warm_sum / trials as f64, solo_sum / trials as f64);
        assert!(
            warm >= solo,
            "best-of-3 mean reward {warm:.3} vs single {solo:.3}"
        );
    }

    #[test]
    fn runaway_strength_reports_a_numerical_failure() {
        let map = gauss_map(0.0, 1.0);
        let r = quad(1.0);
        let cfg = base_cfg(GuidanceVariant::Jacobian, 1e300, 4);
        let err = run_guided_trajectory(&map, &r, &cfg, &scalar(0.5)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let grid = TimeGrid::uniform(10);
        let mut cfg = GuidanceConfig::new(GuidanceVariant::Jacobian, 0.5, grid);
        cfg.t_stop = 0.0;
        assert!(cfg.validate().is_err());
        cfg.t_stop = 0.37; // off-grid
        assert!(cfg.validate().is_err());
        cfg.t_stop = 1.0;
        cfg.n_opt = 0;
        assert!(cfg.validate().is_err());
        cfg.n_opt = 1;
        cfg.renoise_c = 0.2;
        cfg.renoise_knots = vec![0];
        assert!(cfg.validate().is_err());
        cfg.renoise_knots = vec![3];
        assert!(cfg.validate().is_ok());
    }
}
