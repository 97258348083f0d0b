use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::collision::{build_collision_scenario, CollisionPolicy, CollisionScenario};
use super::config::{ScenarioConfig, ScenarioKind};
use super::integrator::{build_integrator_scenario, IntegratorScenario, ReplicatePolicy};
use super::stats::SafetyEstimate;
use crate::error::{Error, Result};
use crate::estimator::LambdaCalibration;
use crate::sde::{run_closed_loop, step_count, stream_rng};

impl ReplicatePolicy for CollisionPolicy<'_> {
    fn sup_error(&self) -> Option<f64> {
        CollisionPolicy::sup_error(self)
    }
}

#[derive(Debug, Clone)]
pub enum PreparedScenario {
    Collision(CollisionScenario),
    Integrator(IntegratorScenario),
}

/// A validated configuration with everything shared by its replicates.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ScenarioConfig,
    pub scenario: PreparedScenario,
    pub steps: usize,
    /// Present when the controller acts on the estimate.
    pub calibration: Option<LambdaCalibration>,
    /// Error radius used by the shrunk rows and the exceedance statistic.
    pub gamma: Option<f64>,
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    cfg.validate()?;
    let steps = step_count(cfg.horizon, cfg.dt)?;
    let scenario = match cfg.scenario {
        ScenarioKind::Collision => PreparedScenario::Collision(build_collision_scenario(cfg)?),
        ScenarioKind::Integrator1d => PreparedScenario::Integrator(build_integrator_scenario(cfg)?),
    };
    let (calibration, gamma) = if cfg.mode.uses_estimate() {
        let (cal, derived) = match &scenario {
            PreparedScenario::Collision(sc) => {
                let cal = sc.calibrate(cfg.dt)?;
                (cal, sc.gamma(&cal, cfg.eps)?)
            }
            PreparedScenario::Integrator(sc) => {
                let cal = sc.calibrate(cfg.dt)?;
                (cal, sc.gamma(&cal, cfg.eps)?)
            }
        };
        (Some(cal), Some(cfg.gamma.unwrap_or(derived)))
    } else {
        (None, None)
    };
    Ok(Prepared {
        cfg: cfg.clone(),
        scenario,
        steps,
        calibration,
        gamma,
    })
}

/// One sampled step, as handed to trajectory writers.
pub struct StepRecord<'a> {
    pub replicate: usize,
    pub step: usize,
    pub t: f64,
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    /// Smallest pairwise distance (collision) or the state (integrator).
    pub min_distance: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    /// `min_ij ‖p_i − p_j‖` (or `x` for the integrator) at every step the controller acted on.
    pub min_distance_series: Vec<f64>,
    /// Smallest true margin `h` over the run.
    pub min_margin: f64,
    pub violated: bool,
    /// Step at which the state left the finite range, if it did.
    pub blowup_step: Option<usize>,
    pub mean_dev: f64,
    pub max_dev: f64,
    pub infeasible_steps: usize,
    pub steps_run: usize,
    pub sup_estimation_error: Option<f64>,
}

pub fn run_replicate(
    prep: &Prepared,
    replicate: usize,
    mut record: Option<&mut dyn FnMut(&StepRecord<'_>)>,
) -> Result<ReplicateOutcome> {
    let cfg = &prep.cfg;
    let mut process_rng = stream_rng(cfg.seed, 2 * replicate as u64);
    let sensor_rng = stream_rng(cfg.seed, 2 * replicate as u64 + 1);
    let gamma = prep.gamma.unwrap_or(0.0);

    let (mut policy, system, x0, distance): (
        Box<dyn ReplicatePolicy + '_>,
        &dyn crate::sde::ControlAffineSystem,
        &DVector<f64>,
        Box<dyn Fn(&DVector<f64>) -> f64 + '_>,
    ) = match &prep.scenario {
        PreparedScenario::Collision(sc) => (
            Box::new(CollisionPolicy::new(sc, cfg, gamma, sensor_rng)?),
            &sc.system,
            &sc.x0,
            Box::new(move |x: &DVector<f64>| sc.min_distance(x)),
        ),
        PreparedScenario::Integrator(sc) => (
            sc.policy(cfg, gamma, sensor_rng)?,
            sc.system.as_ref(),
            &sc.x0,
            Box::new(|x: &DVector<f64>| x[0]),
        ),
    };

    let mut series = Vec::with_capacity(prep.steps);
    let mut dev_sum = 0.0;
    let mut max_dev = 0.0_f64;
    let mut infeasible_steps = 0;
    let run = run_closed_loop(
        system,
        policy.as_mut(),
        x0,
        prep.steps,
        cfg.dt,
        &mut process_rng,
        |sample| {
            let Some(action) = sample.action else {
                return;
            };
            let d = distance(sample.x);
            series.push(d);
            let dev = action
                .nominal
                .as_ref()
                .map_or(0.0, |nominal| (&action.u - nominal).norm());
            dev_sum += dev;
            max_dev = max_dev.max(dev);
            if !action.feasible {
                infeasible_steps += 1;
            }
            if let Some(rec) = record.as_mut() {
                rec(&StepRecord {
                    replicate,
                    step: sample.step,
                    t: sample.t,
                    x: sample.x,
                    u: &action.u,
                    min_distance: d,
                    feasible: action.feasible,
                });
            }
        },
    );
    let blowup_step = match run {
        Ok(_) => None,
        Err(Error::IntegrationBlowup { step, .. }) => Some(step),
        Err(err) => return Err(err),
    };
    let steps_run = series.len();
    let min_margin = series.iter().copied().fold(f64::INFINITY, f64::min) - cfg.safety_distance();
    let violated = blowup_step.is_some() || min_margin < -cfg.tol_safety();
    Ok(ReplicateOutcome {
        replicate,
        min_distance_series: series,
        min_margin,
        violated,
        blowup_step,
        mean_dev: if steps_run == 0 { 0.0 } else { dev_sum / steps_run as f64 },
        max_dev,
        infeasible_steps,
        steps_run,
        sup_estimation_error: policy.sup_error(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub config: ScenarioConfig,
    pub steps: usize,
    pub tol_safety: f64,
    pub lambda_star: Option<f64>,
    pub gamma: Option<f64>,
    pub replicates: Vec<ReplicateOutcome>,
    pub violation_count: usize,
    pub blowup_count: usize,
    pub safety: SafetyEstimate,
    /// Mean over replicates of the time-averaged `‖u − ū‖₂`.
    pub mean_dev: f64,
    pub max_dev: f64,
    /// Fraction of all controller steps whose QP was infeasible.
    pub infeasible_rate: f64,
    /// Fraction of replicates with `sup ‖x − x̂‖₂ > γ`.
    pub estimation_exceedance: Option<f64>,
    pub wallclock_s: Option<f64>,
}

impl CampaignReport {
    fn aggregate(prep: &Prepared, replicates: Vec<ReplicateOutcome>) -> Self {
        let cfg = &prep.cfg;
        let n = replicates.len();
        let violation_count = replicates.iter().filter(|r| r.violated).count();
        let blowup_count = replicates.iter().filter(|r| r.blowup_step.is_some()).count();
        let mean_dev = replicates.iter().map(|r| r.mean_dev).sum::<f64>() / n as f64;
        let max_dev = replicates.iter().map(|r| r.max_dev).fold(0.0, f64::max);
        let total_steps: usize = replicates.iter().map(|r| r.steps_run).sum();
        let infeasible: usize = replicates.iter().map(|r| r.infeasible_steps).sum();
        let estimation_exceedance = prep.gamma.filter(|_| cfg.mode.uses_estimate()).map(|g| {
            let exceed = replicates
                .iter()
                .filter(|r| r.sup_estimation_error.is_some_and(|e| e > g))
                .count();
            exceed as f64 / n as f64
        });
        Self {
            config: cfg.clone(),
            steps: prep.steps,
            tol_safety: cfg.tol_safety(),
            lambda_star: prep.calibration.map(|c| c.lambda_star),
            gamma: prep.gamma,
            violation_count,
            blowup_count,
            safety: SafetyEstimate::new(n - violation_count, n),
            mean_dev,
            max_dev,
            infeasible_rate: if total_steps == 0 {
                0.0
            } else {
                infeasible as f64 / total_steps as f64
            },
            estimation_exceedance,
            wallclock_s: None,
            replicates,
        }
    }
}

/// Runs every replicate (in parallel) and aggregates in replicate order.
pub fn run_campaign(cfg: &ScenarioConfig) -> Result<CampaignReport> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let outcomes = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(&prep, rep, None))
        .collect::<Result<Vec<_>>>()?;
    let mut report = CampaignReport::aggregate(&prep, outcomes);
    report.wallclock_s = Some(started.elapsed().as_secs_f64());
    Ok(report)
}

/// Safety fraction over `n` replicates of `cfg`.
pub fn estimate_safety_probability(cfg: &ScenarioConfig, n: usize) -> Result<SafetyEstimate> {
    if n == 0 {
        return Err(Error::Config("need at least one replicate".into()));
    }
    let cfg = ScenarioConfig {
        replicates: n,
        ..cfg.clone()
    };
    Ok(run_campaign(&cfg)?.safety)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::config::ControllerMode;

    fn quick_collision(mode: ControllerMode) -> ScenarioConfig {
        ScenarioConfig {
            n_agents: 4,
            horizon: 0.5,
            dt: 1e-2,
            replicates: 2,
            mode,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn same_config_same_report() {
        for mode in [ControllerMode::ZcbfComplete, ControllerMode::ZcbfIncomplete] {
            let cfg = quick_collision(mode);
            let mut a = run_campaign(&cfg).unwrap();
            let mut b = run_campaign(&cfg).unwrap();
            a.wallclock_s = None;
            b.wallclock_s = None;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn series_length_is_step_count() {
        let report = run_campaign(&quick_collision(ControllerMode::BaselineLinear)).unwrap();
        assert_eq!(report.steps, 50);
        for r in &report.replicates {
            assert_eq!(r.min_distance_series.len(), 50);
            assert_eq!(r.mean_dev, 0.0);
        }
    }

    #[test]
    fn deterministic_safe_integrator() {
        let cfg = ScenarioConfig {
            sigma_p: 0.0,
            replicates: 3,
            horizon: 2.0,
            ..ScenarioConfig::integrator_1d()
        };
        let est = estimate_safety_probability(&cfg, 3).unwrap();
        assert_eq!(est.fraction, 1.0);
    }

    #[test]
    fn replicates_use_distinct_streams() {
        let cfg = ScenarioConfig {
            replicates: 2,
            horizon: 0.1,
            mode: ControllerMode::BaselineLinear,
            ..ScenarioConfig::integrator_1d()
        };
        let report = run_campaign(&cfg).unwrap();
        assert_ne!(
            report.replicates[0].min_distance_series,
            report.replicates[1].min_distance_series
        );
    }

    #[test]
    fn estimate_modes_report_error_and_gamma() {
        let report = run_campaign(&quick_collision(ControllerMode::SimplifiedCbf)).unwrap();
        assert!(report.gamma.is_some());
        assert!(report.estimation_exceedance.is_some());
        assert!(report.replicates.iter().all(|r| r.sup_estimation_error.is_some()));
    }
}
