//! `dx = u dt + σ dW` with `h(x) = x`, a constant nominal input, and every
//! controller mode wired through the generic filter types.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::config::{ControllerMode, ScenarioConfig};
use crate::barrier::{AffineSafety, SafetyFunction};
use crate::controller::{CbfMode, OutputFeedback, SafetyFilter, Table1Source};
use crate::error::Result;
use crate::estimator::{
    calibrate_lambda_star_auto, gamma_lti, shrink, EkfState, LambdaCalibration, ObservationModel,
    ShrinkKind, KNOWN_STATE_COVARIANCE,
};
use crate::sde::{ControlAffineSystem, FnSystem, Policy};

#[derive(Debug, Clone)]
pub struct IntegratorScenario {
    pub system: Arc<FnSystem>,
    pub h: AffineSafety,
    pub x0: DVector<f64>,
    pub nominal_input: f64,
    pub obs: ObservationModel,
}

/// A policy that may carry an estimator.
pub trait ReplicatePolicy: Policy {
    /// `sup ‖x − x̂‖` so far, for estimate-based policies.
    fn sup_error(&self) -> Option<f64>;
}

impl ReplicatePolicy for SafetyFilter {
    fn sup_error(&self) -> Option<f64> {
        None
    }
}

impl ReplicatePolicy for OutputFeedback<SafetyFilter> {
    fn sup_error(&self) -> Option<f64> {
        Some(OutputFeedback::sup_error(self))
    }
}

pub fn build_integrator_scenario(cfg: &ScenarioConfig) -> Result<IntegratorScenario> {
    cfg.validate()?;
    let one = || DMatrix::from_element(1, 1, 1.0);
    Ok(IntegratorScenario {
        system: Arc::new(FnSystem::scalar_integrator(cfg.sigma_p)),
        h: AffineSafety::new(DVector::from_element(1, 1.0), 0.0),
        x0: DVector::from_element(1, cfg.initial_state),
        nominal_input: cfg.nominal_input,
        obs: ObservationModel::new(one(), one() * cfg.nu)?,
    })
}

impl IntegratorScenario {
    pub fn calibrate(&self, dt: f64) -> Result<LambdaCalibration> {
        let sigma = self.system.diffusion(&self.x0);
        let q = &sigma * sigma.transpose();
        let p0 = DMatrix::from_element(1, 1, KNOWN_STATE_COVARIANCE);
        calibrate_lambda_star_auto(&DMatrix::zeros(1, 1), &self.obs, &q, &p0, dt)
    }

    pub fn gamma(&self, cal: &LambdaCalibration, eps: f64) -> Result<f64> {
        gamma_lti(cal.lambda_star, 1, eps)
    }

    fn filter(&self, cfg: &ScenarioConfig, gamma: f64) -> Result<SafetyFilter> {
        let u = self.nominal_input;
        let nominal = Box::new(move |_: f64, _: &DVector<f64>| DVector::from_element(1, u));
        let sys: Arc<dyn ControlAffineSystem> = self.system.clone();
        let h: Arc<dyn SafetyFunction> = Arc::new(self.h.clone());
        let filter = SafetyFilter::new(nominal, cfg.fallback);
        let source = match cfg.mode {
            ControllerMode::BaselineLinear => return Ok(filter),
            ControllerMode::ZcbfComplete => Table1Source::complete(CbfMode::ZcbfComplete, sys, h),
            ControllerMode::RcbfComplete => Table1Source::complete(CbfMode::RcbfComplete, sys, h),
            ControllerMode::SimplifiedCbf => {
                let noiseless: Arc<dyn ControlAffineSystem> = Arc::new(FnSystem::scalar_integrator(0.0));
                Table1Source::complete(CbfMode::ZcbfComplete, noiseless, h)
            }
            ControllerMode::ZcbfIncomplete | ControllerMode::RcbfIncomplete => {
                let mode = if cfg.mode == ControllerMode::ZcbfIncomplete {
                    CbfMode::ZcbfIncomplete
                } else {
                    CbfMode::RcbfIncomplete
                };
                let kind = ShrinkKind::Affine { a: self.h.a.clone() };
                let hhat: Arc<dyn SafetyFunction> = Arc::new(shrink(self.h.clone(), &kind, gamma)?);
                Table1Source::incomplete(mode, sys, hhat, self.obs.clone(), gamma)
                    .with_trace(cfg.trace_variant)
            }
        };
        Ok(filter.with_source(Box::new(source.with_kappa(cfg.kappa))))
    }

    /// The closed-loop policy of one replicate.
    pub fn policy(
        &self,
        cfg: &ScenarioConfig,
        gamma: f64,
        sensor_rng: ChaCha8Rng,
    ) -> Result<Box<dyn ReplicatePolicy>> {
        let filter = self.filter(cfg, gamma)?;
        if !cfg.mode.uses_estimate() {
            return Ok(Box::new(filter));
        }
        let ekf = EkfState::known_initial_state(self.x0.clone(), &self.obs);
        Ok(Box::new(OutputFeedback::new(
            filter,
            self.system.clone(),
            self.obs.clone(),
            ekf,
            cfg.dt,
            sensor_rng,
        )?))
    }
}
