use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::TraceVariant;
use crate::error::{Error, Result};
use crate::qp::Fallback;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Planar agents swapping places across a circle.
    Collision,
    /// `dx = u dt + σ dW` kept above zero.
    Integrator1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    RcbfComplete,
    ZcbfComplete,
    RcbfIncomplete,
    ZcbfIncomplete,
    /// Nominal law only.
    BaselineLinear,
    /// Deterministic ZCBF row (no trace term, no shrink) at the EKF estimate.
    SimplifiedCbf,
}

impl ControllerMode {
    /// Whether the controller acts on the EKF estimate instead of the state.
    pub fn uses_estimate(self) -> bool {
        matches!(
            self,
            Self::RcbfIncomplete | Self::ZcbfIncomplete | Self::SimplifiedCbf
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::RcbfComplete => "rcbf_complete",
            Self::ZcbfComplete => "zcbf_complete",
            Self::RcbfIncomplete => "rcbf_incomplete",
            Self::ZcbfIncomplete => "zcbf_incomplete",
            Self::BaselineLinear => "baseline_linear",
            Self::SimplifiedCbf => "simplified_cbf",
        }
    }
}

/// Complete description of a campaign. Every output is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub n_agents: usize,
    /// Radius of the start circle.
    pub rho: f64,
    /// Safety distance `D_s`.
    pub d_s: f64,
    pub k1: f64,
    pub k2: f64,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub nu: f64,
    pub mode: ControllerMode,
    pub kappa: f64,
    /// Error radius; derived from `eps` and the calibrated `λ*` when absent.
    pub gamma: Option<f64>,
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub replicates: usize,
    /// Allowed dip below the boundary; `0.05·D_s` (collision) or `0.02` (integrator) when absent.
    pub tol_safety: Option<f64>,
    pub trace_variant: TraceVariant,
    pub fallback: Fallback,
    /// Integrator scenario only: start state.
    pub initial_state: f64,
    /// Integrator scenario only: constant nominal input.
    pub nominal_input: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Collision,
            n_agents: 10,
            rho: 150.0,
            d_s: 10.0,
            k1: 1.0,
            k2: 2.0,
            sigma_p: 1.0,
            sigma_v: 1.0,
            nu: 1.0,
            mode: ControllerMode::ZcbfComplete,
            kappa: 1.0,
            gamma: None,
            eps: 0.1,
            dt: 1e-3,
            horizon: 60.0,
            seed: 0,
            replicates: 50,
            tol_safety: None,
            trace_variant: TraceVariant::EstimatorNoise,
            fallback: Fallback::Relax,
            initial_state: 1.0,
            nominal_input: -2.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be nonnegative, got {v}")))
    }
}

impl ScenarioConfig {
    /// The 1-D calibration scenario with its usual settings.
    pub fn integrator_1d() -> Self {
        Self {
            scenario: ScenarioKind::Integrator1d,
            horizon: 10.0,
            replicates: 1000,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn tol_safety(&self) -> f64 {
        self.tol_safety.unwrap_or(match self.scenario {
            ScenarioKind::Collision => 0.05 * self.d_s,
            ScenarioKind::Integrator1d => 0.02,
        })
    }

    /// Distance subtracted from the recorded series to get the safety margin.
    pub fn safety_distance(&self) -> f64 {
        match self.scenario {
            ScenarioKind::Collision => self.d_s,
            ScenarioKind::Integrator1d => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("dt", self.dt)?;
        positive("horizon", self.horizon)?;
        nonnegative("sigma_p", self.sigma_p)?;
        nonnegative("sigma_v", self.sigma_v)?;
        positive("nu", self.nu)?;
        positive("kappa", self.kappa)?;
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if let Some(g) = self.gamma {
            nonnegative("gamma", g)?;
        }
        if let Some(t) = self.tol_safety {
            nonnegative("tol_safety", t)?;
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        crate::sde::step_count(self.horizon, self.dt)?;
        match self.scenario {
            ScenarioKind::Collision => {
                if self.n_agents < 2 {
                    return Err(Error::Config(format!(
                        "collision scenario needs at least 2 agents, got {}",
                        self.n_agents
                    )));
                }
                positive("rho", self.rho)?;
                positive("d_s", self.d_s)?;
                positive("k1", self.k1)?;
                positive("k2", self.k2)?;
                let spacing = 2.0 * self.rho * (std::f64::consts::PI / self.n_agents as f64).sin();
                if spacing <= self.d_s {
                    return Err(Error::Config(format!(
                        "agents start {spacing} apart, inside the safety distance {}",
                        self.d_s
                    )));
                }
            }
            ScenarioKind::Integrator1d => {
                if !self.initial_state.is_finite() || !self.nominal_input.is_finite() {
                    return Err(Error::Config("integrator start and input must be finite".into()));
                }
                if matches!(
                    self.mode,
                    ControllerMode::RcbfComplete | ControllerMode::RcbfIncomplete
                ) && self.initial_state <= 0.0
                {
                    return Err(Error::Config(
                        "reciprocal barrier needs a strictly safe start".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
