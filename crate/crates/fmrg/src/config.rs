//! Experiment configuration: a flat TOML file with dotted keys
//! (`target.sigma1 = 0.5`). Unknown keys are hard errors, and parse ->
//! serialize -> parse is the identity on the parsed value.

use serde::{Deserialize, Serialize};

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceVariant, StrengthSchedule};
use crate::reward::{LinearMeasurementReward, QuadraticReward, RewardFn};
use crate::targets::{
    DegenerateGaussianTarget, GaussianMixtureTarget, GaussianTarget, Target,
};
use crate::{Matrix, State};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default)]
    pub flow_map: FlowMapSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStopSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<SlopeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse: Option<InverseSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config write: {e}")))
    }

    /// Build every section eagerly so bad configs fail before any simulation.
    pub fn validate(&self) -> Result<()> {
        let target = self.target.build()?;
        let reward = self.reward.build(target.dim())?;
        let _ = reward;
        let grid = self.grid.build()?;
        if self.method.is_guided_map_method() {
            self.method.guidance_config(&grid)?.validate()?;
        }
        if self.ensemble.n_particles == 0 {
            return Err(Error::config("ensemble.n_particles must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Gaussian,
    Mixture,
    Degenerate,
}

/// One section describes any of the three target families; fields not used
/// by the selected kind keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub kind: TargetKind,
    #[serde(default = "default_mu1")]
    pub mu1: Vec<f64>,
    #[serde(default = "one")]
    pub sigma1: f64,
    /// Mixture components (weight, mean, covariance rows).
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    /// Columns of the on-manifold basis for the degenerate target.
    #[serde(default)]
    pub basis: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub sigma_par: f64,
    #[serde(default = "default_sigma_perp")]
    pub sigma_perp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target> {
        match self.kind {
            TargetKind::Gaussian => Ok(Target::Gaussian(GaussianTarget::new(
                State::from_vec(self.mu1.clone()),
                self.sigma1,
            )?)),
            TargetKind::Mixture => {
                if self.components.is_empty() {
                    return Err(Error::config("mixture target needs components"));
                }
                let parts = self
                    .components
                    .iter()
                    .map(|c| {
                        Ok((
                            c.weight,
                            State::from_vec(c.mean.clone()),
                            matrix_from_rows(&c.cov, "target.components.cov")?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Target::Mixture(GaussianMixtureTarget::new(parts)?))
            }
            TargetKind::Degenerate => {
                let d = self.mu1.len();
                if self.basis.is_empty() {
                    return Err(Error::config("degenerate target needs basis columns"));
                }
                let mut basis = Matrix::zeros(d, self.basis.len());
                for (j, col) in self.basis.iter().enumerate() {
                    if col.len() != d {
                        return Err(Error::config("target.basis column length mismatch"));
                    }
                    for (i, v) in col.iter().enumerate() {
                        basis[(i, j)] = *v;
                    }
                }
                Ok(Target::Degenerate(DegenerateGaussianTarget::new(
                    State::from_vec(self.mu1.clone()),
                    basis,
                    self.sigma_par,
                    self.sigma_perp,
                )?))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Quadratic,
    LinearMeasurement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    #[serde(default = "default_anchor")]
    pub anchor: Vec<f64>,
    /// Measurement operator rows (linear-measurement only).
    #[serde(default)]
    pub operator: Vec<Vec<f64>>,
    #[serde(default)]
    pub observation: Vec<f64>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            kind: RewardKind::Quadratic,
            anchor: default_anchor(),
            operator: Vec::new(),
            observation: Vec::new(),
        }
    }
}

impl RewardSpec {
    pub fn build(&self, dim: usize) -> Result<RewardFn> {
        match self.kind {
            RewardKind::Quadratic => {
                let mut anchor = self.anchor.clone();
                // A scalar anchor broadcasts over the state dimension.
                if anchor.len() == 1 && dim > 1 {
                    anchor = vec![anchor[0]; dim];
                }
                if anchor.len() != dim {
                    return Err(Error::config("reward.anchor dimension mismatch"));
                }
                Ok(RewardFn::Quadratic(QuadraticReward::new(State::from_vec(anchor))))
            }
            RewardKind::LinearMeasurement => {
                let operator = matrix_from_rows(&self.operator, "reward.operator")?;
                if operator.ncols() != dim {
                    return Err(Error::config("reward.operator column count mismatch"));
                }
                if self.observation.len() != operator.nrows() {
                    return Err(Error::config("reward.observation length mismatch"));
                }
                Ok(RewardFn::LinearMeasurement(LinearMeasurementReward::new(
                    operator,
                    State::from_vec(self.observation.clone()),
                )))
            }
        }
    }

    /// The quadratic anchor as a state vector, when this reward is quadratic.
    pub fn quadratic_anchor(&self, dim: usize) -> Option<State> {
        if self.kind != RewardKind::Quadratic {
            return None;
        }
        match self.build(dim) {
            Ok(RewardFn::Quadratic(q)) => Some(q.anchor),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    FmrgJ,
    FmrgE,
    Dps,
    Flowdps,
    Flowchef,
    Mpgd,
    SeedOpt,
    Lqr,
    Tilt,
    Unguided,
}

impl MethodKind {
    /// The CSV label; identical to the config spelling.
    pub fn label(&self) -> &'static str {
        match self {
            MethodKind::FmrgJ => "fmrg-j",
            MethodKind::FmrgE => "fmrg-e",
            MethodKind::Dps => "dps",
            MethodKind::Flowdps => "flowdps",
            MethodKind::Flowchef => "flowchef",
            MethodKind::Mpgd => "mpgd",
            MethodKind::SeedOpt => "seed-opt",
            MethodKind::Lqr => "lqr",
            MethodKind::Tilt => "tilt",
            MethodKind::Unguided => "unguided",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    TimeWeighted,
    StepNormalized,
    Off,
}

impl From<ScheduleKind> for StrengthSchedule {
    fn from(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Constant => StrengthSchedule::Constant,
            ScheduleKind::TimeWeighted => StrengthSchedule::TimeWeighted,
            ScheduleKind::StepNormalized => StrengthSchedule::NormalizedStep,
            ScheduleKind::Off => StrengthSchedule::Off,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Guidance strength: the lambda of map-based guidance and of the
    /// closed-form laws, or the step weight of the lookahead baselines.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default = "one_usize")]
    pub n_opt: usize,
    #[serde(default = "one")]
    pub t_stop: f64,
    #[serde(default)]
    pub reuse_endpoint: bool,
    #[serde(default = "one_usize")]
    pub warmup_k: usize,
    #[serde(default = "half")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub renoise_c: f64,
    #[serde(default)]
    pub renoise_knots: Vec<usize>,
    #[serde(default)]
    pub seed_opt_steps: usize,
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec {
            kind: MethodKind::Unguided,
            lambda: 0.0,
            schedule: default_schedule(),
            n_opt: 1,
            t_stop: 1.0,
            reuse_endpoint: false,
            warmup_k: 1,
            warmup_fraction: 0.5,
            renoise_c: 0.0,
            renoise_knots: Vec::new(),
            seed_opt_steps: 0,
        }
    }
}

impl MethodSpec {
    /// Methods that run through the flow-map guidance engine.
    pub fn is_guided_map_method(&self) -> bool {
        matches!(
            self.kind,
            MethodKind::FmrgJ | MethodKind::FmrgE | MethodKind::Unguided
        )
    }

    pub fn guidance_config(&self, grid: &TimeGrid) -> Result<GuidanceConfig> {
        let (variant, eta) = match self.kind {
            MethodKind::FmrgJ => (GuidanceVariant::Jacobian, self.lambda),
            MethodKind::FmrgE => (GuidanceVariant::Euclidean, self.lambda),
            MethodKind::Unguided => (GuidanceVariant::Jacobian, 0.0),
            _ => return Err(Error::config("method runs outside the guidance engine")),
        };
        let mut cfg = GuidanceConfig::new(variant, eta, grid.clone());
        cfg.schedule = self.schedule.into();
        cfg.n_opt = self.n_opt;
        cfg.t_stop = self.t_stop;
        cfg.reuse_endpoint = self.reuse_endpoint;
        cfg.warmup_k = self.warmup_k;
        cfg.warmup_fraction = self.warmup_fraction;
        cfg.renoise_c = self.renoise_c;
        cfg.renoise_knots = self.renoise_knots.clone();
        cfg.seed_opt_steps = self.seed_opt_steps;
        Ok(cfg)
    }

    /// Copy with a different strength, for sweeps.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut m = self.clone();
        m.lambda = lambda;
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMapKind {
    Analytic,
    Numeric,
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowMapSpec {
    pub kind: FlowMapKind,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

impl Default for FlowMapSpec {
    fn default() -> Self {
        FlowMapSpec { kind: FlowMapKind::Analytic, substeps: default_substeps() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    /// Explicit knots override n_steps when nonempty.
    #[serde(default)]
    pub knots: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n_steps: default_n_steps(), knots: Vec::new() }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        if !self.knots.is_empty() {
            return TimeGrid::from_knots(self.knots.clone());
        }
        if self.n_steps == 0 {
            return Err(Error::config("grid.n_steps must be positive"));
        }
        Ok(TimeGrid::uniform(self.n_steps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec { n_particles: default_particles(), seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub methods: Vec<MethodKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSpec {
    pub t_stops: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeSpec {
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_slope_points")]
    pub points: usize,
    #[serde(default = "default_probe_t")]
    pub t: f64,
    #[serde(default = "default_probe_x")]
    pub x: f64,
}

impl Default for SlopeSpec {
    fn default() -> Self {
        SlopeSpec {
            lambda_min: default_lambda_min(),
            lambda_max: default_lambda_max(),
            points: default_slope_points(),
            t: default_probe_t(),
            x: default_probe_x(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSpec {
    #[serde(default = "default_inverse_particles")]
    pub n_particles: usize,
    /// Interval count for the map-based methods; the lookahead baselines get
    /// one more Euler step so every row spends the same query budget.
    #[serde(default = "default_inverse_steps")]
    pub n_steps: usize,
    #[serde(default = "one")]
    pub lambda: f64,
}

impl Default for InverseSpec {
    fn default() -> Self {
        InverseSpec {
            n_particles: default_inverse_particles(),
            n_steps: default_inverse_steps(),
            lambda: 1.0,
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(Error::config(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::config(format!("{what}: ragged matrix rows")));
    }
    let mut m = Matrix::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn one_usize() -> usize {
    1
}
fn default_mu1() -> Vec<f64> {
    vec![0.0]
}
fn default_sigma_perp() -> f64 {
    1e-3
}
fn default_anchor() -> Vec<f64> {
    vec![1.0]
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Constant
}
fn default_substeps() -> usize {
    64
}
fn default_n_steps() -> usize {
    100
}
fn default_particles() -> usize {
    10_000
}
fn default_lambda_min() -> f64 {
    1e-3
}
fn default_lambda_max() -> f64 {
    1e-1
}
fn default_slope_points() -> usize {
    8
}
fn default_probe_t() -> f64 {
    0.3
}
fn default_probe_x() -> f64 {
    0.7
}
fn default_inverse_particles() -> usize {
    2000
}
fn default_inverse_steps() -> usize {
    5
}
