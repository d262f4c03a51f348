//! Configuration-driven experiment drivers: Monte Carlo ensembles, strength
//! sweeps, early-stop studies, scaling-slope fits, exact-identity
//! verification, and the toy inverse problem, plus the CSV/JSON emission
//! they share.
//!
//! Determinism contract: every driver is a pure function of (config, seed).
//! Particles use counter-keyed streams indexed by particle number, and
//! aggregation runs in particle-index order, so results are bitwise
//! reproducible under any thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    dps_signal, flowdps_step, lqr_exact_control, run_baseline_terminal, tilt_sampler,
    BaselineMethod, ConstantVelocity, RiccatiSolution,
};
use crate::config::{ExperimentConfig, FlowMapKind, FlowMapSpec, MethodKind, ScheduleKind};
use crate::dynamics::{euler_step, posterior_mean, InterpolantSchedule, TimeGrid, Velocity};
use crate::error::{Error, Result};
use crate::flow_map::{
    check_semigroup, AnalyticGaussianFlowMap, EulerFlowMap, FlowMap, NumericFlowMap,
};
use crate::guidance::{
    greedy_guidance_signal, operator_split_step, run_guided_terminal, warmup_select,
    GuidanceConfig, GuidanceVariant,
};
use crate::reward::{LinearMeasurementReward, QuadraticReward, Reward, RewardFn};
use crate::rng::CounterRng;
use crate::targets::{
    gaussian_velocity, gmm_velocity, sample_target_one, GaussianMixtureTarget, GaussianTarget,
    Target, TargetVelocity,
};
use crate::theory::{self, GuidanceLaw, TerminalPrediction};
use crate::{Matrix, State};

/// Flow map selected by configuration; dispatch without boxing.
pub enum AnyFlowMap {
    Analytic(AnalyticGaussianFlowMap),
    Numeric(NumericFlowMap<TargetVelocity>),
    Euler(EulerFlowMap<TargetVelocity>),
}

impl FlowMap for AnyFlowMap {
    fn dim(&self) -> usize {
        match self {
            AnyFlowMap::Analytic(m) => m.dim(),
            AnyFlowMap::Numeric(m) => m.dim(),
            AnyFlowMap::Euler(m) => m.dim(),
        }
    }

    fn eval(&self, s: f64, t: f64, x: &State) -> Result<State> {
        match self {
            AnyFlowMap::Analytic(m) => m.eval(s, t, x),
            AnyFlowMap::Numeric(m) => m.eval(s, t, x),
            AnyFlowMap::Euler(m) => m.eval(s, t, x),
        }
    }

    fn vjp(&self, s: f64, t: f64, x: &State, w: &State) -> Result<(State, State)> {
        match self {
            AnyFlowMap::Analytic(m) => m.vjp(s, t, x, w),
            AnyFlowMap::Numeric(m) => m.vjp(s, t, x, w),
            AnyFlowMap::Euler(m) => m.vjp(s, t, x, w),
        }
    }

    fn jacobian(&self, s: f64, t: f64, x: &State) -> Result<Matrix> {
        match self {
            AnyFlowMap::Analytic(m) => m.jacobian(s, t, x),
            AnyFlowMap::Numeric(m) => m.jacobian(s, t, x),
            AnyFlowMap::Euler(m) => m.jacobian(s, t, x),
        }
    }

    fn eval_into(&self, s: f64, t: f64, x: &State, out: &mut State) -> Result<()> {
        match self {
            AnyFlowMap::Analytic(m) => m.eval_into(s, t, x, out),
            AnyFlowMap::Numeric(m) => m.eval_into(s, t, x, out),
            AnyFlowMap::Euler(m) => m.eval_into(s, t, x, out),
        }
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
        match self {
            AnyFlowMap::Analytic(m) => m.vjp_into(s, t, x, w, y_out, a_out),
            AnyFlowMap::Numeric(m) => m.vjp_into(s, t, x, w, y_out, a_out),
            AnyFlowMap::Euler(m) => m.vjp_into(s, t, x, w, y_out, a_out),
        }
    }

    fn jacobian_into(&self, s: f64, t: f64, x: &State, out: &mut Matrix) -> Result<()> {
        match self {
            AnyFlowMap::Analytic(m) => m.jacobian_into(s, t, x, out),
            AnyFlowMap::Numeric(m) => m.jacobian_into(s, t, x, out),
            AnyFlowMap::Euler(m) => m.jacobian_into(s, t, x, out),
        }
    }
}

pub fn build_flow_map(target: &Target, spec: &FlowMapSpec) -> Result<AnyFlowMap> {
    match spec.kind {
        FlowMapKind::Analytic => match target {
            Target::Gaussian(g) => Ok(AnyFlowMap::Analytic(AnalyticGaussianFlowMap::new(g))),
            _ => Err(Error::config(
                "analytic flow map exists only for the gaussian target; use kind = \"numeric\"",
            )),
        },
        FlowMapKind::Numeric => Ok(AnyFlowMap::Numeric(NumericFlowMap::new(
            target.velocity(),
            spec.substeps,
        )?)),
        FlowMapKind::Euler => Ok(AnyFlowMap::Euler(EulerFlowMap::new(target.velocity()))),
    }
}

/// Aggregated terminal statistics of one ensemble, with the closed-form
/// prediction columns when the theory oracle covers the configuration.
/// Means and variances refer to the first state coordinate (targets with
/// closed-form laws are isotropic).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub method: String,
    pub lambda: f64,
    pub t_stop: f64,
    pub n_steps: usize,
    pub n_opt: usize,
    pub reuse: bool,
    pub nfe: usize,
    pub emp_mean: f64,
    pub emp_mean_se: f64,
    pub emp_var: f64,
    pub emp_var_se: f64,
    pub emp_reward: f64,
    pub emp_reward_se: f64,
    pub pred_mean: Option<f64>,
    pub pred_var: Option<f64>,
    pub pred_reward: Option<f64>,
}

/// Evolve `ensemble.n_particles` independent trajectories of the configured
/// method and aggregate their terminal laws. Any trajectory failure aborts
/// with the particle index attached.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<EnsembleSummary> {
    cfg.validate()?;
    let target = cfg.target.build()?;
    let reward = cfg.reward.build(target.dim())?;
    let grid = cfg.grid.build()?;
    let n = cfg.ensemble.n_particles;
    let seed = cfg.ensemble.seed;
    let d = target.dim();
    let kind = cfg.method.kind;
    let prediction = closed_form_prediction(cfg, &target, &reward);

    if kind == MethodKind::Tilt {
        let RewardFn::Quadratic(q) = &reward else {
            return Err(Error::config("tilt sampling needs the quadratic reward"));
        };
        let samples = tilt_sampler(&target, q, cfg.method.lambda, n, seed)?;
        let rows: Vec<(f64, f64, usize)> =
            samples.iter().map(|x| (x[0], reward.value(x), 0)).collect();
        return summarize(cfg, &grid, rows, prediction);
    }

    let velocity = target.velocity();
    let map = build_flow_map(&target, &cfg.flow_map)?;

    let rows: Result<Vec<(f64, f64, usize)>> = if cfg.method.is_guided_map_method() {
        let gcfg = cfg.method.guidance_config(&grid)?;
        gcfg.validate()?;
        if gcfg.warmup_k > 1 {
            let k = gcfg.warmup_k;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let seeds: Vec<u64> = (0..k)
                        .map(|j| CounterRng::stream(seed, (i * k + j) as u64).next_u64())
                        .collect();
                    let (_, rec) = warmup_select(&map, &reward, &gcfg, &seeds)
                        .map_err(|e| particle_error(i, e))?;
                    Ok((rec.terminal()[0], rec.terminal_reward, rec.nfe))
                })
                .collect()
        } else {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = CounterRng::stream(seed, i as u64);
                    let x0 = rng.normal_vector(d);
                    let (x, rw, nfe) = run_guided_terminal(&map, &reward, &gcfg, &x0, &mut rng)
                        .map_err(|e| particle_error(i, e))?;
                    Ok((x[0], rw, nfe))
                })
                .collect()
        }
    } else {
        let method = baseline_method(cfg, &target, &reward)?;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = CounterRng::stream(seed, i as u64);
                let x0 = rng.normal_vector(d);
                let (x, rw, nfe) =
                    run_baseline_terminal(&method, &velocity, &map, &reward, &grid, &x0)
                        .map_err(|e| particle_error(i, e))?;
                Ok((x[0], rw, nfe))
            })
            .collect()
    };
    summarize(cfg, &grid, rows?, prediction)
}

fn particle_error(i: usize, e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Verify(_) | Error::Io(_) => e,
        other => Error::numerics(format!("particle {i}: {other}")),
    }
}

fn baseline_method(
    cfg: &ExperimentConfig,
    target: &Target,
    reward: &RewardFn,
) -> Result<BaselineMethod> {
    let lambda = cfg.method.lambda;
    Ok(match cfg.method.kind {
        MethodKind::Dps => BaselineMethod::Dps { lambda },
        MethodKind::Flowdps => BaselineMethod::FlowDps { eta: lambda },
        MethodKind::Flowchef => BaselineMethod::FlowChef { s_prime: lambda },
        MethodKind::Mpgd => BaselineMethod::Mpgd { c: lambda },
        MethodKind::SeedOpt => BaselineMethod::SeedOpt {
            steps: cfg.method.seed_opt_steps.max(1),
            eta: lambda,
        },
        MethodKind::Lqr => {
            let Target::Gaussian(g) = target else {
                return Err(Error::config("exact control needs the gaussian target"));
            };
            let RewardFn::Quadratic(q) = reward else {
                return Err(Error::config("exact control needs the quadratic reward"));
            };
            BaselineMethod::LqrExact {
                target: g.clone(),
                anchor: q.anchor.clone(),
                lambda,
            }
        }
        _ => return Err(Error::config("method runs on the guidance path")),
    })
}

/// The oracle prediction for this configuration, when one exists: isotropic
/// Gaussian target, quadratic reward, and a method whose terminal law is in
/// closed form (plain constant-strength schedules only).
pub fn closed_form_prediction(
    cfg: &ExperimentConfig,
    target: &Target,
    reward: &RewardFn,
) -> Option<TerminalPrediction> {
    let Target::Gaussian(g) = target else { return None };
    let RewardFn::Quadratic(q) = reward else { return None };
    let a = &q.anchor;
    let m = &cfg.method;
    match m.kind {
        MethodKind::Unguided => {
            let var = g.sigma1 * g.sigma1;
            Some(TerminalPrediction {
                mean: g.mu1.clone(),
                var,
                mean_reward: theory::mean_reward_gaussian(&g.mu1, var, a),
            })
        }
        MethodKind::Lqr => theory::predict_terminal(GuidanceLaw::ValueExact, g, m.lambda, a).ok(),
        MethodKind::Tilt => theory::predict_terminal(GuidanceLaw::Tilted, g, m.lambda, a).ok(),
        MethodKind::FmrgJ
            if m.schedule == ScheduleKind::Constant
                && m.renoise_knots.is_empty()
                && m.warmup_k == 1
                && m.seed_opt_steps == 0 =>
        {
            Some(theory::early_stop_prediction(g, m.lambda, a, m.t_stop))
        }
        _ => None,
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    grid: &TimeGrid,
    rows: Vec<(f64, f64, usize)>,
    prediction: Option<TerminalPrediction>,
) -> Result<EnsembleSummary> {
    let nfe = rows.first().map(|r| r.2).unwrap_or(0);
    if rows.iter().any(|r| r.2 != nfe) {
        return Err(Error::numerics("query count varies across particles"));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rewards: Vec<f64> = rows.iter().map(|r| r.1).collect();
    // States can stay representable while their squares overflow, so the
    // per-step finiteness guard does not cover the moments computed here.
    if xs.iter().chain(&rewards).any(|v| !v.is_finite())
        || !var_of(&xs).is_finite()
        || !var_of(&rewards).is_finite()
    {
        return Err(Error::numerics("ensemble statistics are not finite"));
    }
    Ok(EnsembleSummary {
        method: cfg.method.kind.label().to_string(),
        lambda: cfg.method.lambda,
        t_stop: cfg.method.t_stop,
        n_steps: grid.n_steps(),
        n_opt: cfg.method.n_opt,
        reuse: cfg.method.reuse_endpoint,
        nfe,
        emp_mean: mean_of(&xs),
        emp_mean_se: batch_se(&xs, &mean_of),
        emp_var: var_of(&xs),
        emp_var_se: batch_se(&xs, &var_of),
        emp_reward: mean_of(&rewards),
        emp_reward_se: batch_se(&rewards, &mean_of),
        pred_mean: prediction.as_ref().map(|p| p.mean[0]),
        pred_var: prediction.as_ref().map(|p| p.var),
        pred_reward: prediction.as_ref().map(|p| p.mean_reward),
    })
}

fn mean_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var_of(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean_of(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Standard error of `stat` over the ensemble by batch means: split into
/// (up to) 100 batches, evaluate the statistic per batch, and take the
/// spread of the batch values over sqrt(batches).
fn batch_se(xs: &[f64], stat: &dyn Fn(&[f64]) -> f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let b = xs.len().min(100);
    let m = xs.len() / b;
    let stats: Vec<f64> = (0..b).map(|k| stat(&xs[k * m..(k + 1) * m])).collect();
    (var_of(&stats) / b as f64).sqrt()
}

/// One summary per (method, lambda) pair of the sweep section.
pub fn lambda_sweep(cfg: &ExperimentConfig) -> Result<Vec<EnsembleSummary>> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep: config has no [sweep] section"))?;
    if sweep.lambdas.is_empty() {
        return Err(Error::config("sweep.lambdas must be nonempty"));
    }
    if sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::config("sweep.lambdas must be nonnegative"));
    }
    let methods = if sweep.methods.is_empty() {
        vec![cfg.method.kind]
    } else {
        sweep.methods.clone()
    };
    let mut out = Vec::with_capacity(methods.len() * sweep.lambdas.len());
    for kind in methods {
        for &lambda in &sweep.lambdas {
            let mut c = cfg.clone();
            c.sweep = None;
            c.method.kind = kind;
            c.method.lambda = lambda;
            out.push(run_ensemble(&c)?);
        }
    }
    Ok(out)
}

/// One summary per stop time, plus a final marker row at the matched stop
/// time t* where the early-stopped law meets the value-exact variance.
pub fn early_stop_study(cfg: &ExperimentConfig) -> Result<Vec<EnsembleSummary>> {
    let spec = cfg
        .early_stop
        .clone()
        .ok_or_else(|| Error::config("earlystop: config has no [early_stop] section"))?;
    if spec.t_stops.is_empty() {
        return Err(Error::config("early_stop.t_stops must be nonempty"));
    }
    if spec.t_stops.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::config("early_stop.t_stops must lie in (0, 1]"));
    }
    if !cfg.method.is_guided_map_method() {
        return Err(Error::config("early-stop study drives a map-guided method"));
    }
    let base_grid = cfg.grid.build()?;
    let mut out = Vec::with_capacity(spec.t_stops.len() + 1);
    let run_at = |t_stop: f64| -> Result<EnsembleSummary> {
        let grid = base_grid.with_knot(t_stop)?;
        let mut c = cfg.clone();
        c.early_stop = None;
        c.method.t_stop = t_stop;
        c.grid.knots = grid.knots().to_vec();
        run_ensemble(&c)
    };
    for &t_stop in &spec.t_stops {
        out.push(run_at(t_stop)?);
    }
    let Target::Gaussian(g) = cfg.target.build()? else {
        return Err(Error::config("matched stop time needs the gaussian closed form"));
    };
    let t_star = theory::solve_t_stop(g.sigma1, cfg.method.lambda)?;
    out.push(run_at(t_star)?);
    Ok(out)
}

/// Log-log fit of the greedy-vs-optimal control gap against strength, raw
/// and after subtracting the first value-correction gradient.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeReport {
    pub lambdas: Vec<f64>,
    pub gaps: Vec<f64>,
    pub corrected_gaps: Vec<f64>,
    pub raw_slope: f64,
    pub raw_stderr: f64,
    pub corrected_slope: f64,
    pub corrected_stderr: f64,
}

pub fn scaling_slope(cfg: &ExperimentConfig) -> Result<SlopeReport> {
    let spec = cfg.slope.clone().unwrap_or_default();
    if spec.points < 6 {
        return Err(Error::config("slope fit needs at least 6 strength points"));
    }
    if !(spec.lambda_min > 0.0 && spec.lambda_max > spec.lambda_min) {
        return Err(Error::config("slope needs 0 < lambda_min < lambda_max"));
    }
    let Target::Gaussian(g) = cfg.target.build()? else {
        return Err(Error::config("slope study needs the gaussian target"));
    };
    let RewardFn::Quadratic(q) = cfg.reward.build(g.dim())? else {
        return Err(Error::config("slope study needs the quadratic reward"));
    };
    let a = q.anchor.clone();
    let map = AnalyticGaussianFlowMap::new(&g);
    let t = spec.t;
    let x = State::from_element(g.dim(), spec.x);
    let signal = greedy_guidance_signal(&map, &q, t, &x, GuidanceVariant::Jacobian)?;
    let correction = theory::v1_gradient_quadrature(&g, &a, t, &x);
    let ratio = spec.lambda_max / spec.lambda_min;
    let mut lambdas = Vec::with_capacity(spec.points);
    let mut gaps = Vec::with_capacity(spec.points);
    let mut corrected_gaps = Vec::with_capacity(spec.points);
    for k in 0..spec.points {
        let frac = k as f64 / (spec.points - 1) as f64;
        let lam = spec.lambda_min * ratio.powf(frac);
        let u_star = lqr_exact_control(&g, &a, lam, t, &x);
        let gap = (&u_star - lam * &signal).norm();
        if gap < 1e-13 {
            return Err(Error::numerics(format!(
                "slope grid too small: gap {gap:.3e} at lambda {lam:.3e} is under float noise"
            )));
        }
        let corrected = (&u_star - lam * &signal - lam * lam * &correction).norm();
        lambdas.push(lam);
        gaps.push(gap);
        corrected_gaps.push(corrected);
    }
    let logs: Vec<f64> = lambdas.iter().map(|l| l.ln()).collect();
    let (raw_slope, raw_stderr) =
        fit_line(&logs, &gaps.iter().map(|v| v.ln()).collect::<Vec<_>>());
    let (corrected_slope, corrected_stderr) =
        fit_line(&logs, &corrected_gaps.iter().map(|v| v.ln()).collect::<Vec<_>>());
    Ok(SlopeReport {
        lambdas,
        gaps,
        corrected_gaps,
        raw_slope,
        raw_stderr,
        corrected_slope,
        corrected_stderr,
    })
}

/// Least-squares line fit: (slope, standard error of the slope).
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = mean_of(xs);
    let my = mean_of(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let stderr = if xs.len() > 2 { (ss_res / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, stderr)
}

/// Maximum residuals of the three exact reduction identities over randomized
/// probes (Gaussian and mixture drifts).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionReport {
    pub cases: usize,
    /// one-Euler-step endpoint substitution vs the lookahead drift signal
    pub signal_max: f64,
    /// weight-identified split step vs the lookahead descent step
    pub step_max: f64,
    /// posterior lookahead vs the Euler step on the linear schedule
    pub posterior_max: f64,
}

pub fn reduction_check(seed: u64) -> Result<ReductionReport> {
    let mut rng = CounterRng::stream(seed, 0);
    let mixture = GaussianMixtureTarget::new(vec![
        (0.6, State::from_element(1, -1.1), Matrix::from_element(1, 1, 0.49)),
        (0.4, State::from_element(1, 1.4), Matrix::from_element(1, 1, 0.81)),
    ])?;
    let mixture_velocity = gmm_velocity(&mixture);
    let cases = 50usize;
    let mut signal_max = 0.0f64;
    let mut step_max = 0.0f64;
    let mut posterior_max = 0.0f64;
    for case in 0..cases {
        let sigma = 0.5 + 1.5 * rng.uniform();
        let mu = -1.0 + 2.0 * rng.uniform();
        let t = 0.05 + 0.8 * rng.uniform();
        let dt = 0.01 + 0.09 * rng.uniform();
        let x = State::from_element(1, -2.0 + 4.0 * rng.uniform());
        let a = State::from_element(1, -2.0 + 4.0 * rng.uniform());
        let eta = 0.2 + 1.3 * rng.uniform();
        let r = QuadraticReward::new(a);
        let target = GaussianTarget::scalar(mu, sigma)?;
        let (s_res, w_res, p_res) =
            reduction_residuals(&gaussian_velocity(&target), &r, t, t + dt, &x, eta)?;
        signal_max = signal_max.max(s_res);
        step_max = step_max.max(w_res);
        posterior_max = posterior_max.max(p_res);
        if case % 5 == 0 {
            let (s_res, w_res, p_res) =
                reduction_residuals(&mixture_velocity, &r2_of(&x), t, t + dt, &x, eta)?;
            signal_max = signal_max.max(s_res);
            step_max = step_max.max(w_res);
            posterior_max = posterior_max.max(p_res);
        }
    }
    let report = ReductionReport { cases, signal_max, step_max, posterior_max };
    let tol = 1e-10;
    if signal_max > tol || step_max > tol || posterior_max > tol {
        return Err(Error::Verify(format!(
            "reduction identities violated: signal {signal_max:.3e}, step {step_max:.3e}, \
             posterior {posterior_max:.3e} (tolerance {tol:.0e})"
        )));
    }
    Ok(report)
}

fn r2_of(x: &State) -> QuadraticReward {
    QuadraticReward::new(State::from_element(1, x[0] + 0.9))
}

fn reduction_residuals<V: Velocity>(
    velocity: &V,
    r: &QuadraticReward,
    t: f64,
    t_next: f64,
    x: &State,
    eta: f64,
) -> Result<(f64, f64, f64)> {
    let dt = t_next - t;
    // (a) drift-signal identity under the one-step Euler endpoint.
    let euler_map = EulerFlowMap::new(velocity);
    let signal = greedy_guidance_signal(&euler_map, r, t, x, GuidanceVariant::Jacobian)?;
    let lambda = 0.8;
    let direct = dps_signal(velocity, r, t, x, lambda);
    let signal_res = (direct - lambda * signal).norm();
    // (b) step identity: frozen drift through the Euclidean split with the
    // identified (negated) weight.
    let frozen = EulerFlowMap::new(ConstantVelocity::new(velocity.eval(t, x)));
    let grid = TimeGrid::from_knots(vec![0.0, t, t_next, 1.0])?;
    let cfg = GuidanceConfig::new(
        GuidanceVariant::Euclidean,
        -(1.0 - t) * t_next * eta / dt,
        grid,
    );
    let split = operator_split_step(&frozen, r, &cfg, t, t_next, x)?;
    let step_res = (split - flowdps_step(velocity, r, t, t_next, x, eta)).norm();
    // (c) posterior lookahead vs the Euler step.
    let lookahead = posterior_mean(velocity, &InterpolantSchedule::Linear, t, x)?;
    let posterior_res = (lookahead - euler_step(velocity, t, 1.0 - t, x)).norm();
    Ok((signal_res, step_res, posterior_res))
}

/// One row of the toy inverse-problem report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InverseRow {
    pub method: String,
    pub nfe: usize,
    pub median_sq_error: f64,
    pub median_log_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InverseReport {
    /// The scalar observation y = (first coordinate of a held-out draw).
    pub observation: f64,
    pub rows: Vec<InverseRow>,
}

/// Head-to-head reconstruction study on a 2-D mixture: observe the first
/// coordinate of a held-out target draw, guide toward consistency, and
/// report per-method medians at a matched query budget.
pub fn toy_inverse_problem(cfg: &ExperimentConfig) -> Result<InverseReport> {
    let spec = cfg.inverse.clone().unwrap_or_default();
    let target = cfg.target.build()?;
    if !matches!(target, Target::Mixture(_)) || target.dim() != 2 {
        return Err(Error::config("inverse study needs a 2-D mixture target"));
    }
    if spec.n_particles == 0 || spec.n_steps == 0 {
        return Err(Error::config("inverse study needs particles and steps"));
    }
    let velocity = target.velocity();
    let map = NumericFlowMap::new(target.velocity(), cfg.flow_map.substeps)?;
    let seed = cfg.ensemble.seed;
    let known = sample_target_one(&target, &mut CounterRng::stream(seed, u64::MAX));
    let operator = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let y = State::from_element(1, known[0]);
    let reward = LinearMeasurementReward::new(operator, y.clone());

    let grid_map = TimeGrid::uniform(spec.n_steps);
    let grid_euler = TimeGrid::uniform(spec.n_steps + 1);
    let dt_euler = 1.0 / (spec.n_steps + 1) as f64;
    let n = spec.n_particles;

    let guided = |variant: GuidanceVariant, eta: f64| -> GuidanceConfig {
        let mut g = GuidanceConfig::new(variant, eta, grid_map.clone());
        g.reuse_endpoint = true;
        g
    };

    let mut rows = Vec::with_capacity(5);
    let mut push_map_row = |label: &str, gcfg: &GuidanceConfig| -> Result<()> {
        gcfg.validate()?;
        let outcomes: Result<Vec<(f64, f64, usize)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = CounterRng::stream(seed, i as u64);
                let x0 = rng.normal_vector(2);
                let (x, rw, nfe) = run_guided_terminal(&map, &reward, gcfg, &x0, &mut rng)
                    .map_err(|e| particle_error(i, e))?;
                Ok((-rw, target.log_density(&x), nfe))
            })
            .collect();
        rows.push(inverse_row(label, outcomes?)?);
        Ok(())
    };
    push_map_row("unguided", &guided(GuidanceVariant::Jacobian, 0.0))?;
    push_map_row("fmrg-e", &guided(GuidanceVariant::Euclidean, spec.lambda))?;
    push_map_row("fmrg-j", &guided(GuidanceVariant::Jacobian, spec.lambda))?;

    for (label, method) in [
        ("flowdps", BaselineMethod::FlowDps { eta: spec.lambda }),
        // Constant weight matched to the average magnitude of a split step.
        ("flowchef", BaselineMethod::FlowChef { s_prime: spec.lambda * dt_euler }),
    ] {
        let outcomes: Result<Vec<(f64, f64, usize)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = CounterRng::stream(seed, i as u64);
                let x0 = rng.normal_vector(2);
                let (x, rw, nfe) =
                    run_baseline_terminal(&method, &velocity, &map, &reward, &grid_euler, &x0)
                        .map_err(|e| particle_error(i, e))?;
                Ok((-rw, target.log_density(&x), nfe))
            })
            .collect();
        rows.push(inverse_row(label, outcomes?)?);
    }
    Ok(InverseReport { observation: y[0], rows })
}

fn inverse_row(label: &str, outcomes: Vec<(f64, f64, usize)>) -> Result<InverseRow> {
    let nfe = outcomes.first().map(|o| o.2).unwrap_or(0);
    if outcomes.iter().any(|o| o.2 != nfe) {
        return Err(Error::numerics("query count varies across particles"));
    }
    let mut errs: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let mut liks: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    Ok(InverseRow {
        method: label.to_string(),
        nfe,
        median_sq_error: median(&mut errs),
        median_log_density: median(&mut liks),
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Outcome of one named verification check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn of(name: &str, pass: bool, detail: String) -> Self {
        CheckOutcome { name: name.to_string(), pass, detail }
    }
}

/// The exact-identity and flow-axiom suite behind the `verify` subcommand.
/// Returns one outcome per check; callers decide how failures map to exits.
pub fn verify_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    match reduction_check(seed) {
        Ok(rep) => out.push(CheckOutcome::of(
            "reduction-identities",
            true,
            format!(
                "max residuals: signal {:.3e}, step {:.3e}, posterior {:.3e} over {} cases",
                rep.signal_max, rep.step_max, rep.posterior_max, rep.cases
            ),
        )),
        Err(Error::Verify(msg)) => {
            out.push(CheckOutcome::of("reduction-identities", false, msg))
        }
        Err(e) => return Err(e),
    }

    let mut rng = CounterRng::stream(seed, 1);
    let points: Vec<State> = (0..5).map(|_| rng.normal_vector(1)).collect();

    let g = GaussianTarget::scalar(0.3, 0.7)?;
    let analytic = AnalyticGaussianFlowMap::new(&g);
    let worst = check_semigroup(&analytic, 0.15, 0.55, 0.9, &points)?;
    out.push(CheckOutcome::of(
        "analytic-composition",
        worst <= 1e-10,
        format!("max composition residual {worst:.3e} (tolerance 1e-10)"),
    ));

    let mixture = GaussianMixtureTarget::new(vec![
        (0.5, State::from_element(1, -1.5), Matrix::from_element(1, 1, 0.25)),
        (0.5, State::from_element(1, 1.5), Matrix::from_element(1, 1, 0.25)),
    ])?;
    let numeric = NumericFlowMap::new(
        TargetVelocity::Mixture(gmm_velocity(&mixture)),
        400,
    )?;
    let worst = check_semigroup(&numeric, 0.1, 0.5, 0.95, &points)?;
    out.push(CheckOutcome::of(
        "numeric-composition",
        worst <= 1e-4,
        format!("max composition residual {worst:.3e} (tolerance 1e-4)"),
    ));

    let mut worst_pullback = 0.0f64;
    for x in &points {
        let jac = numeric.jacobian(0.2, 1.0, x)?;
        let w = State::from_element(1, 1.0);
        let (_, pulled) = numeric.vjp(0.2, 1.0, x, &w)?;
        worst_pullback = worst_pullback.max((jac.transpose() * w - pulled).norm());
    }
    out.push(CheckOutcome::of(
        "sensitivity-consistency",
        worst_pullback <= 1e-8,
        format!("max |J^T w - vjp| {worst_pullback:.3e} (tolerance 1e-8)"),
    ));

    let ric = RiccatiSolution::new(&g, &State::from_element(1, 1.0), 0.8)?;
    let mut worst_res = 0.0f64;
    let coeffs = g.coefficients();
    let h = 1e-5;
    let mut t = 0.0;
    while t <= 0.999 {
        let p_dot = (ric.p(t + h) - ric.p(t - h)) / (2.0 * h);
        let res = p_dot + (coeffs.c_dot(t) / coeffs.c(t)) * ric.p(t) - 0.8 * ric.p(t) * ric.p(t);
        worst_res = worst_res.max(res.abs());
        t += 0.0333;
    }
    out.push(CheckOutcome::of(
        "riccati-residual",
        worst_res <= 1e-8,
        format!("max finite-difference residual {worst_res:.3e} (tolerance 1e-8)"),
    ));

    Ok(out)
}

pub const CSV_HEADER: &str = "method,lambda,t_stop,n_steps,n_opt,reuse,nfe,emp_mean,\
emp_mean_se,emp_var,emp_var_se,emp_reward,emp_reward_se,pred_mean,pred_var,pred_reward";

/// Render summaries in the fixed column order. Optional prediction cells are
/// empty when no oracle applies. Formatting uses the shortest round-trip
/// float representation, so output is bitwise reproducible.
pub fn summaries_to_csv(rows: &[EnsembleSummary]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(128 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.lambda,
            r.t_stop,
            r.n_steps,
            r.n_opt,
            r.reuse,
            r.nfe,
            r.emp_mean,
            r.emp_mean_se,
            r.emp_var,
            r.emp_var_se,
            r.emp_reward,
            r.emp_reward_se,
            opt(r.pred_mean),
            opt(r.pred_var),
            opt(r.pred_reward),
        )
        .expect("string write");
    }
    s
}

pub fn write_csv(path: &std::path::Path, rows: &[EnsembleSummary]) -> Result<()> {
    std::fs::write(path, summaries_to_csv(rows))?;
    Ok(())
}

/// JSON run summary: the config echo, the source revision, the wall-clock
/// cost, and the per-assertion outcomes.
#[derive(Serialize)]
pub struct RunReport<'a> {
    pub config: &'a ExperimentConfig,
    pub git: String,
    pub wall_seconds: f64,
    pub checks: Vec<CheckOutcome>,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn report_to_json(report: &RunReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::numerics(format!("json encoding: {e}")))
}

/// Consistency checks a plain ensemble run can report: empirical moments
/// against the oracle columns, within wide Monte Carlo bands.
pub fn prediction_checks(summary: &EnsembleSummary) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if let (Some(pm), Some(pv)) = (summary.pred_mean, summary.pred_var) {
        let mean_band = 6.0 * summary.emp_mean_se.max(1e-12);
        out.push(CheckOutcome::of(
            "terminal-mean-vs-oracle",
            (summary.emp_mean - pm).abs() <= mean_band,
            format!(
                "empirical {} vs predicted {pm} (band {mean_band:.3e})",
                summary.emp_mean
            ),
        ));
        let var_band = (6.0 * summary.emp_var_se).max(0.03 * pv);
        out.push(CheckOutcome::of(
            "terminal-variance-vs-oracle",
            (summary.emp_var - pv).abs() <= var_band,
            format!(
                "empirical {} vs predicted {pv} (band {var_band:.3e})",
                summary.emp_var
            ),
        ));
    }
    out
}
