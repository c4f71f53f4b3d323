//! Re-runs an experiment across values of one parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::simulate::{run_experiment, SummaryTable};
use crate::risk::RiskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Epsilon,
    Horizon,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "horizon" | "N" | "n" => Ok(Self::Horizon),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub sample_size: usize,
    pub summary: SummaryTable,
    /// Mean per step, in milliseconds.
    pub solve_ms: f64,
    pub polytope_ms: f64,
}

/// Minimum repetitions per sweep point.
pub const MIN_SWEEP_REPETITIONS: usize = 10;

/// Applies one sweep value to a copy of `base`; the sample size is derived
/// again for every risk level.
pub fn configure(base: &ExperimentConfig, parameter: SweepParameter, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match parameter {
        SweepParameter::Epsilon => {
            let r = &base.planner.risk;
            cfg.planner.risk = RiskConfig::new(value, r.beta, r.support_limit, r.removal_budget)?;
        }
        SweepParameter::Horizon => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(Error::InvalidArgument(format!("horizon must be a positive integer, got {value}")));
            }
            cfg.planner.horizon = value as usize;
        }
    }
    cfg.repetitions = cfg.repetitions.max(MIN_SWEEP_REPETITIONS);
    cfg.validate()?;
    Ok(cfg)
}

pub fn sensitivity_sweep(parameter: SweepParameter, values: &[f64], base: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let cfg = configure(base, parameter, value)?;
            let out = run_experiment(&cfg)?;
            let steps: Vec<_> = out.runs.iter().flat_map(|r| &r.steps).collect();
            let n = steps.len().max(1) as f64;
            Ok(SweepRow {
                parameter,
                value,
                sample_size: cfg.planner.risk.sample_size,
                solve_ms: steps.iter().map(|s| s.timings.qp_us as f64).sum::<f64>() / n / 1000.0,
                polytope_ms: steps.iter().map(|s| s.timings.polytopes_us as f64).sum::<f64>() / n / 1000.0,
                summary: out.summary,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["parameter", "value", "sample_size", "solve_ms", "polytope_ms"];
    header.extend(SummaryTable::HEADER);
    w.write_record(&header)?;
    for r in rows {
        let name = match r.parameter {
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::Horizon => "horizon",
        };
        let mut line = vec![
            name.to_string(),
            r.value.to_string(),
            r.sample_size.to_string(),
            r.solve_ms.to_string(),
            r.polytope_ms.to_string(),
        ];
        line.extend(r.summary.fields());
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}
