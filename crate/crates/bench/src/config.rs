//! Experiment configuration: a TOML file of top-level keys and one level of
//! dotted sections (`system.mass = 0.03`). `inf` denotes β = ∞.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use brdp::systems::{Discretization, QuadrotorParams, SlitGeometry};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    DoubleSlit,
    LqgQuadrotor,
    SvmpcQuadrotor,
}

impl ExperimentId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::DoubleSlit => "double-slit",
            ExperimentId::LqgQuadrotor => "lqg-quadrotor",
            ExperimentId::SvmpcQuadrotor => "svmpc-quadrotor",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "double-slit" => Ok(ExperimentId::DoubleSlit),
            "lqg-quadrotor" => Ok(ExperimentId::LqgQuadrotor),
            "svmpc-quadrotor" => Ok(ExperimentId::SvmpcQuadrotor),
            other => Err(ConfigError::Invalid(format!("unknown experiment id {other:?}"))),
        }
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Either an explicit list or `count` log-spaced values in `[min, max]`,
/// optionally followed by β = ∞.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaGrid {
    pub values: Option<Vec<f64>>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub count: Option<usize>,
    pub include_inf: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Diagonal {
    Scalar(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub q: Diagonal,
    pub r: Diagonal,
    pub q_f: Diagonal,
}

impl Default for CostSection {
    fn default() -> Self {
        Self { q: Diagonal::Scalar(1.0), r: Diagonal::Scalar(0.1), q_f: Diagonal::Scalar(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// Ridge added to the LQR-projected input covariance; defaults to 1e-6 for
    /// the linear experiment and 1e-8 for SV-MPC.
    pub ridge: Option<f64>,
    /// Per-step, per-axis standard deviation of the motion-planning prior.
    pub sd: f64,
    /// Correlation length (in steps) of the motion-planning prior; 0 is white.
    pub length_scale: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { ridge: None, sd: 0.03, length_scale: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub enabled: bool,
    /// Quantile of pilot Lipschitz levels used as `l_t`.
    pub level_quantile: f64,
    /// Quantile of observed `ρ(x, x̂)` reported as the certified region radius.
    pub radius_quantile: f64,
    pub pilot_trials: usize,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self { enabled: true, level_quantile: 0.999, radius_quantile: 0.999, pilot_trials: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSetting {
    Named(String),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvgdSection {
    pub particles: usize,
    pub iterations: usize,
    pub step: f64,
    pub bandwidth: BandwidthSetting,
    /// `identity`, `prior-whitening` or `local-laplace`.
    pub preconditioner: String,
    /// Settings of the β = ∞ gradient-descent baseline.
    pub argmin_iterations: usize,
    pub argmin_step: f64,
    pub argmin_preconditioner: String,
}

impl Default for SvgdSection {
    fn default() -> Self {
        Self {
            particles: 32,
            iterations: 100,
            step: 0.5,
            bandwidth: BandwidthSetting::Named("median".into()),
            preconditioner: "local-laplace".into(),
            argmin_iterations: 200,
            argmin_step: 0.5,
            argmin_preconditioner: "local-laplace".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    /// Steps between re-solves; defaults to 1 for the quadrotor and to the
    /// horizon (open loop) for the double slit.
    pub replan_every: Option<usize>,
    /// Importance samples per solve.
    pub samples: usize,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self { replan_every: None, samples: brdp::samplers::DEFAULT_IS_SAMPLES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub mass: f64,
    pub inertia: f64,
    pub gravity: f64,
    pub arm: f64,
    pub dt: f64,
    pub horizon: usize,
    pub discretization: Discretization,
    /// Per-coordinate estimator variance scaling `v`; system default if absent.
    pub estimator_scaling: Option<Vec<f64>>,
}

impl Default for SystemSection {
    fn default() -> Self {
        let q = QuadrotorParams::default();
        Self {
            mass: q.mass,
            inertia: q.inertia,
            gravity: q.gravity,
            arm: q.arm,
            dt: q.dt,
            horizon: q.horizon,
            discretization: Discretization::Rk4,
            estimator_scaling: None,
        }
    }
}

impl SystemSection {
    pub fn quadrotor(&self) -> QuadrotorParams {
        QuadrotorParams {
            mass: self.mass,
            inertia: self.inertia,
            gravity: self.gravity,
            arm: self.arm,
            dt: self.dt,
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub n_trials: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sigma2: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: BetaGrid,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub svgd: SvgdSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub slit: SlitGeometry,
    /// Trajectories written per cell.
    #[serde(default = "default_keep")]
    pub keep_trajectories: usize,
}

fn default_keep() -> usize {
    5
}

/// `count` log-spaced values from `min` to `max` inclusive.
pub fn log_space(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![min],
        n => {
            let (a, b) = (min.ln(), max.ln());
            (0..n)
                .map(|i| match i {
                    0 => min,
                    i if i == n - 1 => max,
                    i => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
                })
                .collect()
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    /// A config with every optional field at its default.
    pub fn defaults(experiment: ExperimentId, seed: u64, n_trials: usize) -> Self {
        Self {
            experiment,
            seed,
            n_trials,
            output: None,
            sigma2: None,
            beta: BetaGrid::default(),
            system: SystemSection::default(),
            cost: CostSection::default(),
            prior: PriorSection::default(),
            certify: CertifySection { enabled: experiment == ExperimentId::LqgQuadrotor, ..Default::default() },
            svgd: SvgdSection::default(),
            planner: PlannerSection::default(),
            slit: SlitGeometry::default(),
            keep_trajectories: default_keep(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        let betas = self.betas();
        if betas.is_empty() {
            return bad("the beta grid is empty".into());
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0)) {
            return bad(format!("beta values must be positive, got {b}"));
        }
        let sigmas = self.sigma2_values();
        if sigmas.is_empty() {
            return bad("the sigma2 list is empty".into());
        }
        if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return bad(format!("sigma2 values must be finite and nonnegative, got {s}"));
        }
        if let (Some(min), Some(max)) = (self.beta.min, self.beta.max) {
            if !(min > 0.0 && max >= min && max.is_finite()) {
                return bad(format!("beta range {min}:{max} must satisfy 0 < min <= max < inf"));
            }
        }
        let q = &self.system;
        if !(q.mass > 0.0 && q.inertia > 0.0 && q.dt > 0.0 && q.horizon > 0 && q.arm > 0.0) {
            return bad("mass, inertia, arm, dt and horizon must be positive".into());
        }
        if let Some(v) = &self.system.estimator_scaling {
            if v.iter().any(|x| !(*x >= 0.0)) {
                return bad("estimator scaling must be nonnegative".into());
            }
        }
        let p = &self.prior;
        if !(self.prior_ridge() >= 0.0 && p.sd > 0.0 && p.length_scale >= 0.0) {
            return bad("prior ridge and length_scale must be nonnegative and sd positive".into());
        }
        let c = &self.certify;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(c.level_quantile) && unit(c.radius_quantile)) {
            return bad("certify quantiles must lie in [0, 1]".into());
        }
        if c.enabled && c.pilot_trials == 0 {
            return bad("certify.pilot_trials must be positive".into());
        }
        let s = &self.svgd;
        if s.particles == 0 || s.iterations == 0 || !(s.step > 0.0) || s.argmin_iterations == 0 || !(s.argmin_step > 0.0) {
            return bad("svgd particles, iterations and steps must be positive".into());
        }
        self.svgd_bandwidth()?;
        parse_preconditioner(&s.preconditioner)?;
        parse_preconditioner(&s.argmin_preconditioner)?;
        if self.replan_every() == 0 || self.planner.samples < 2 {
            return bad("planner.replan_every must be >= 1 and planner.samples >= 2".into());
        }
        if self.experiment == ExperimentId::DoubleSlit {
            self.slit.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    /// Ascending grid; β = ∞ last when present.
    pub fn betas(&self) -> Vec<f64> {
        let g = &self.beta;
        let mut v = match &g.values {
            Some(v) => v.clone(),
            None => {
                let (min, max, count) = match self.experiment {
                    ExperimentId::LqgQuadrotor => (0.1, 1e3, 20),
                    ExperimentId::SvmpcQuadrotor => (0.1, 1e3, 10),
                    ExperimentId::DoubleSlit => (0.3, 30.0, 3),
                };
                log_space(g.min.unwrap_or(min), g.max.unwrap_or(max), g.count.unwrap_or(count))
            }
        };
        let default_inf = self.experiment != ExperimentId::DoubleSlit && g.values.is_none();
        if g.include_inf.unwrap_or(default_inf) && !v.contains(&f64::INFINITY) {
            v.push(f64::INFINITY);
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn replan_every(&self) -> usize {
        self.planner.replan_every.unwrap_or(match self.experiment {
            ExperimentId::DoubleSlit => self.slit.horizon,
            _ => 1,
        })
    }

    pub fn prior_ridge(&self) -> f64 {
        self.prior.ridge.unwrap_or(match self.experiment {
            ExperimentId::SvmpcQuadrotor => 1e-8,
            _ => 1e-6,
        })
    }

    pub fn sigma2_values(&self) -> Vec<f64> {
        let mut v = self.sigma2.clone().unwrap_or_else(|| match self.experiment {
            ExperimentId::DoubleSlit => vec![0.0],
            _ => vec![0.0, 0.2, 0.4],
        });
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn svgd_bandwidth(&self) -> Result<brdp::samplers::Bandwidth, ConfigError> {
        match &self.svgd.bandwidth {
            BandwidthSetting::Named(s) if s == "median" => Ok(brdp::samplers::Bandwidth::MedianHeuristic),
            BandwidthSetting::Fixed(h) if *h > 0.0 => Ok(brdp::samplers::Bandwidth::Fixed(*h)),
            other => Err(ConfigError::Invalid(format!("svgd.bandwidth must be \"median\" or a positive number, got {other:?}"))),
        }
    }
}

pub fn parse_preconditioner(s: &str) -> Result<brdp::samplers::Preconditioner, ConfigError> {
    match s {
        "identity" => Ok(brdp::samplers::Preconditioner::Identity),
        "prior-whitening" => Ok(brdp::samplers::Preconditioner::PriorWhitening),
        "local-laplace" => Ok(brdp::samplers::Preconditioner::LocalLaplace),
        other => Err(ConfigError::Invalid(format!("unknown preconditioner {other:?}"))),
    }
}

impl Diagonal {
    pub fn to_matrix(&self, n: usize) -> Result<nalgebra::DMatrix<f64>, ConfigError> {
        let diag = match self {
            Diagonal::Scalar(s) => vec![*s; n],
            Diagonal::List(v) if v.len() == n => v.clone(),
            Diagonal::List(v) => return Err(ConfigError::Invalid(format!("expected {n} diagonal entries, got {}", v.len()))),
        };
        Ok(nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_inf() {
        let cfg = ExperimentConfig::from_toml(
            r#"
experiment = "lqg-quadrotor"
seed = 3
n_trials = 10
sigma2 = [0.4, 0.0]
beta.values = [10.0, inf, 1.0]
system.mass = 0.05
cost.r = [0.2, 0.3]
"#,
        )
        .unwrap();
        assert_eq!(cfg.betas(), vec![1.0, 10.0, f64::INFINITY]);
        assert_eq!(cfg.sigma2_values(), vec![0.0, 0.4]);
        assert_eq!(cfg.system.mass, 0.05);
        assert_eq!(cfg.system.dt, 0.3);
        assert_eq!(cfg.cost.r.to_matrix(2).unwrap()[(1, 1)], 0.3);
    }

    #[test]
    fn default_grids() {
        let cfg = ExperimentConfig::defaults(ExperimentId::LqgQuadrotor, 0, 1);
        let b = cfg.betas();
        assert_eq!(b.len(), 21);
        assert_eq!(b[0], 0.1);
        assert_eq!(b[19], 1e3);
        assert!(b[20].is_infinite());
        assert_eq!(ExperimentConfig::defaults(ExperimentId::SvmpcQuadrotor, 0, 1).betas().len(), 11);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = "experiment = \"lqg-quadrotor\"\nseed = 1\n";
        assert!(ExperimentConfig::from_toml(&format!("{base}n_trials = 0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{base}n_trials = 2\nbeta.values = []\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{base}n_trials = 2\nsigma2 = [-1.0]\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{base}n_trials = 2\nsystem.bogus = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"nope\"\nseed = 1\nn_trials = 1\n").is_err());
        // the seed has no default
        assert!(ExperimentConfig::from_toml("experiment = \"double-slit\"\nn_trials = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"double-slit\"\nseed = 1\nn_trials = 1\nslit.narrow_half_width = -0.1\n").is_err());
    }

    #[test]
    fn log_space_endpoints_exact() {
        let v = log_space(0.1, 1e3, 5);
        assert_eq!(v[0], 0.1);
        assert_eq!(v[4], 1e3);
        assert!((v[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn shipped_configs_match_experiment_defaults() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        for (file, id) in [
            ("lqg-quadrotor.toml", ExperimentId::LqgQuadrotor),
            ("svmpc-quadrotor.toml", ExperimentId::SvmpcQuadrotor),
            ("double-slit.toml", ExperimentId::DoubleSlit),
        ] {
            let cfg = ExperimentConfig::load(&dir.join(file)).unwrap();
            let d = ExperimentConfig::defaults(id, cfg.seed, cfg.n_trials);
            assert_eq!(cfg.experiment, id);
            assert_eq!(cfg.prior_ridge(), d.prior_ridge(), "{file}");
            assert_eq!(cfg.svgd, d.svgd, "{file}");
            assert_eq!(cfg.prior.sd, d.prior.sd, "{file}");
            // the SV-MPC file narrows the grids to the acceptance cells
            if id != ExperimentId::SvmpcQuadrotor {
                assert_eq!(cfg.sigma2_values(), d.sigma2_values(), "{file}");
                assert_eq!(cfg.betas(), d.betas(), "{file}");
            }
        }
    }
}
