use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{run, MethodConfig, RunConfig, RunStatus, Workspace};
use super::Pretrained;
use crate::aos::AosConfig;
use crate::error::{Error, Result};
use crate::metrics::{mean, weighted_awer};

/// Weight of the initial task against the new tasks when ranking.
pub const SELECTION_WEIGHT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub label: String,
    pub method: MethodConfig,
    /// `(2·err_T₀ + err_new) / 3`; infinite for failed runs.
    pub weighted_awer: f64,
    pub initial_task_error: f64,
    /// Mean final error over the stream tasks.
    pub new_task_error: f64,
    pub awer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: MethodConfig,
    /// Ascending by weighted AWER; ties keep grid order.
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// AOS candidates over the product `taus × lambdas × tau2s`, other settings from `base`.
pub fn aos_grid(base: &AosConfig, taus: &[f64], lambdas: &[f64], tau2s: &[f64]) -> Vec<MethodConfig> {
    let mut out = Vec::new();
    for &tau in taus {
        for &lambda in lambdas {
            for &tau2 in tau2s {
                out.push(MethodConfig::Aos(AosConfig {
                    tau,
                    lambda,
                    tau2,
                    ..base.clone()
                }));
            }
        }
    }
    out
}

/// Runs every candidate on the workspace's stream (normally the small test
/// experiment) and ranks them by weighted AWER. Runs execute in parallel;
/// the leaderboard does not depend on completion order.
pub fn sweep(base: &RunConfig, grid: &[MethodConfig], ws: &Workspace, theta0: &Pretrained) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty hyper-parameter grid".into()));
    }
    for m in grid {
        m.validate()?;
    }
    let t0 = ws.spec.initial.task_id;
    let stream_ids: Vec<usize> = ws.spec.stream_tasks.iter().map(|t| t.task_id).collect();
    let entries: Vec<LeaderboardEntry> = grid
        .par_iter()
        .map(|m| {
            let config = RunConfig {
                method: m.clone(),
                ..base.clone()
            };
            let record = run(&config, ws, theta0, None)?;
            let last = record.last().expect("step 0 is always evaluated");
            let complete = record.status == RunStatus::Completed;
            let e0 = last.per_task_error.get(&t0).copied().unwrap_or(1.0);
            let new = mean(stream_ids.iter().map(|t| last.per_task_error.get(t).copied().unwrap_or(1.0)));
            Ok(LeaderboardEntry {
                label: m.label(),
                method: m.clone(),
                weighted_awer: if complete {
                    weighted_awer(e0, new, SELECTION_WEIGHT)
                } else {
                    f64::INFINITY
                },
                initial_task_error: e0,
                new_task_error: new,
                awer: last.awer,
            })
        })
        .collect::<Result<_>>()?;
    let mut leaderboard = entries;
    leaderboard.sort_by(|a, b| a.weighted_awer.total_cmp(&b.weighted_awer));
    Ok(SweepResult {
        best: leaderboard[0].method.clone(),
        leaderboard,
    })
}
