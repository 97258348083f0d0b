//! CSV and JSON outputs. Numbers use Rust's shortest round-trip formatting,
//! lines end in `\n`, and nothing time-dependent is written unless asked for,
//! so equal configurations give byte-identical files.

use std::io::Write;

use serde_json::{json, Value};

use super::campaign::{run_replicate, CampaignReport, Prepared, ReplicateOutcome, StepRecord};
use super::config::ScenarioKind;
use crate::barrier::{AGENT_INPUTS, AGENT_STATES};
use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: &str = "t,replicate,agent,px,py,vx,vy,ux,uy,h_min,feasible";
pub const REPORT_HEADER: &str =
    "replicate,min_distance,min_margin,violated,blowup_step,mean_dev,max_dev,infeasible_steps,steps,sup_estimation_error";

fn opt(v: Option<impl std::fmt::Display>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Runs one replicate and streams its trajectory, one row per agent and step.
pub fn write_trajectory_csv<W: Write>(
    prep: &Prepared,
    replicate: usize,
    out: &mut W,
) -> Result<ReplicateOutcome> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    let safety_distance = prep.cfg.safety_distance();
    let collision = prep.cfg.scenario == ScenarioKind::Collision;
    let mut failure: Option<std::io::Error> = None;
    let mut write_step = |rec: &StepRecord<'_>| {
        if failure.is_some() {
            return;
        }
        let h_min = rec.min_distance - safety_distance;
        let result = if collision {
            (0..rec.x.len() / AGENT_STATES).try_for_each(|k| {
                let (o, c) = (AGENT_STATES * k, AGENT_INPUTS * k);
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    rec.t,
                    rec.replicate,
                    k,
                    rec.x[o],
                    rec.x[o + 1],
                    rec.x[o + 2],
                    rec.x[o + 3],
                    rec.u[c],
                    rec.u[c + 1],
                    h_min,
                    rec.feasible
                )
            })
        } else {
            writeln!(
                out,
                "{},{},0,{},0,0,0,{},0,{},{}",
                rec.t, rec.replicate, rec.x[0], rec.u[0], h_min, rec.feasible
            )
        };
        if let Err(e) = result {
            failure = Some(e);
        }
    };
    let outcome = run_replicate(prep, replicate, Some(&mut write_step))?;
    if let Some(e) = failure {
        return Err(Error::from(e));
    }
    Ok(outcome)
}

pub fn write_report_csv<W: Write>(report: &CampaignReport, out: &mut W) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    let offset = report.config.safety_distance();
    for r in &report.replicates {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.replicate,
            r.min_margin + offset,
            r.min_margin,
            r.violated,
            opt(r.blowup_step),
            r.mean_dev,
            r.max_dev,
            r.infeasible_steps,
            r.steps_run,
            opt(r.sup_estimation_error)
        )?;
    }
    Ok(())
}

/// Per-step minimum distance of every replicate, long format.
pub fn write_series_csv<W: Write>(report: &CampaignReport, out: &mut W) -> Result<()> {
    writeln!(out, "t,replicate,min_distance")?;
    let dt = report.config.dt;
    for r in &report.replicates {
        for (k, d) in r.min_distance_series.iter().enumerate() {
            writeln!(out, "{},{},{}", k as f64 * dt, r.replicate, d)?;
        }
    }
    Ok(())
}

/// Summary document. `wallclock_s` is `null` unless `include_wallclock`.
pub fn summary_json(report: &CampaignReport, include_wallclock: bool) -> Value {
    let cfg = &report.config;
    json!({
        "config": cfg,
        "scenario": cfg.scenario,
        "mode": cfg.mode.label(),
        "information": if cfg.mode.uses_estimate() { "estimated" } else { "complete" },
        "steps": report.steps,
        "tol_safety": report.tol_safety,
        "lambda_star": report.lambda_star,
        "gamma": report.gamma,
        "replicates": report.replicates.len(),
        "violation_count": report.violation_count,
        "blowup_count": report.blowup_count,
        "safety_fraction": report.safety.fraction,
        "wilson_lo": report.safety.wilson_lo,
        "wilson_hi": report.safety.wilson_hi,
        "mean_dev": report.mean_dev,
        "max_dev": report.max_dev,
        "infeasible_rate": report.infeasible_rate,
        "estimation_exceedance": report.estimation_exceedance,
        "wallclock_s": if include_wallclock { report.wallclock_s } else { None },
    })
}

pub fn write_summary_json<W: Write>(
    report: &CampaignReport,
    include_wallclock: bool,
    out: &mut W,
) -> Result<()> {
    let text = serde_json::to_string_pretty(&summary_json(report, include_wallclock))?;
    writeln!(out, "{text}")?;
    Ok(())
}
