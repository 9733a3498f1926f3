//! Run reports, the per-iteration timing model, the worker scaling table
//! and CSV exports of an inversion run.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{InversionState, IterationRecord, StopReason};
use crate::mesh_assembly::{Model, Problem};
use crate::rba::RationalApproximant;
use crate::shifted_solver::{checksum, ShiftedFactorCache, SolveCounters, SolverConfig};
use crate::synthetic_data::DataSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingFitStatus {
    Ok,
    /// All LSQR counts are equal; only the mean time is defined.
    SlopeUndefined,
    /// Fewer than three iterations.
    Insufficient,
}

/// `wall_ms = a + b * lsqr_iters` by ordinary least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub r2: Option<f64>,
    pub samples: usize,
    pub status: TimingFitStatus,
}

pub fn fit_timing_model(history: &[IterationRecord]) -> TimingModel {
    let pts: Vec<(f64, f64)> = history.iter().map(|r| (r.lsqr_iters as f64, r.wall_ms)).collect();
    fit_line(&pts)
}

pub fn fit_line(pts: &[(f64, f64)]) -> TimingModel {
    let n = pts.len();
    if n < 3 {
        return TimingModel {
            a: None,
            b: None,
            r2: None,
            samples: n,
            status: TimingFitStatus::Insufficient,
        };
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return TimingModel {
            a: Some(my),
            b: None,
            r2: None,
            samples: n,
            status: TimingFitStatus::SlopeUndefined,
        };
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    TimingModel {
        a: Some(a),
        b: Some(b),
        r2: Some(r2),
        samples: n,
        status: TimingFitStatus::Ok,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub workers: usize,
    pub factorize_ms: f64,
    pub solve_ms: f64,
    /// `T_1 / (W T_W)` on factorize plus solve time.
    pub efficiency: f64,
    /// Checksum of the pole fields `g_i`.
    pub checksum: u64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times the factorize-all and solve-all phases for each worker count.
/// The single-worker run is always measured and used as the reference.
/// Timings are the minimum over `repeats` runs.
pub fn scaling_benchmark(
    problem: &Problem,
    model: &Model,
    approx: &RationalApproximant,
    worker_counts: &[usize],
    repeats: usize,
) -> Result<Vec<ScalingRow>> {
    if worker_counts.contains(&0) {
        return Err(Error::InvalidInput("worker counts must be positive".into()));
    }
    let rhs: Vec<Vec<Complex64>> = (0..approx.pole_count())
        .map(|_| problem.source.iter().map(|&v| Complex64::new(v, 0.0)).collect())
        .collect();
    let measure = |workers: usize| -> Result<(f64, f64, u64)> {
        let (mut fbest, mut sbest, mut sum) = (f64::INFINITY, f64::INFINITY, 0);
        for _ in 0..repeats.max(1) {
            let mut cache = ShiftedFactorCache::new(SolverConfig {
                workers,
                ..SolverConfig::default()
            });
            let t = Instant::now();
            cache.factorize(problem, model, approx)?;
            fbest = fbest.min(ms(t));
            let t = Instant::now();
            let g = cache.solve_each(problem, model, &rhs, false)?;
            sbest = sbest.min(ms(t));
            sum = checksum(&g);
        }
        Ok((fbest, sbest, sum))
    };
    let (f1, s1, _) = measure(1)?;
    let t1 = f1 + s1;
    let mut rows = Vec::with_capacity(worker_counts.len());
    for &w in worker_counts {
        let (f, s, sum) = measure(w)?;
        let tw = f + s;
        rows.push(ScalingRow {
            workers: w,
            factorize_ms: f,
            solve_ms: s,
            efficiency: if w == 1 { 1.0 } else { t1 / (w as f64 * tw) },
            checksum: sum,
        });
    }
    Ok(rows)
}

/// Consolidated diagnostics of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub status: StopReason,
    pub iterations: usize,
    pub lambda0: f64,
    pub final_lambda: f64,
    pub final_phi: f64,
    pub final_chi2: f64,
    pub history: Vec<IterationRecord>,
    pub timing: TimingModel,
    pub counters: SolveCounters,
    pub pole_count: usize,
    #[serde(default)]
    pub scaling: Option<Vec<ScalingRow>>,
}

impl RunReport {
    /// `counters` should be the cache counters at snapshot time.
    pub fn from_state(state: &InversionState, counters: SolveCounters, pole_count: usize) -> Self {
        Self {
            status: state.status.clone(),
            iterations: state.iteration,
            lambda0: state.lambda0,
            final_lambda: state.lambda,
            final_phi: state.objective.phi,
            final_chi2: state.objective.chi2,
            history: state.history.clone(),
            timing: fit_timing_model(&state.history),
            counters,
            pole_count,
            scaling: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn convergence_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from(
        "iteration,phi,misfit,reg,chi2,lambda,eta,accepted,lsqr_iters,line_search_trials,cooled\n",
    );
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{}",
            r.iteration,
            r.phi,
            r.misfit,
            r.reg,
            r.chi2,
            r.lambda,
            r.eta,
            r.accepted,
            r.lsqr_iters,
            r.line_search_trials,
            r.cooled
        );
    }
    s
}

pub fn timing_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from(
        "iteration,wall_ms,lsqr_ms,lsqr_iters,factorizations,solves,transpose_solves\n",
    );
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{},{},{},{}",
            r.iteration,
            r.wall_ms,
            r.lsqr_ms,
            r.lsqr_iters,
            r.factorizations,
            r.solves,
            r.transpose_solves
        );
    }
    s
}

/// Rows are channels, columns receivers; values are `W_d (d_pred - d_obs)`.
pub fn residual_heatmap_csv(data: &DataSet, d_pred: &[f64]) -> Result<String> {
    let r = data.weighted_residual(d_pred)?;
    let nr = data.receivers.len();
    let mut s = String::from("time");
    for k in 0..nr {
        let _ = write!(s, ",r{k}");
    }
    s.push('\n');
    for (j, t) in data.times.iter().enumerate() {
        let _ = write!(s, "{t:e}");
        for v in &r[j * nr..(j + 1) * nr] {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Long format: one row per receiver and channel.
pub fn transients_csv(data: &DataSet, d_pred: &[f64]) -> Result<String> {
    if d_pred.len() != data.len() {
        return Err(Error::DimensionMismatch {
            what: "predicted data",
            expected: data.len(),
            got: d_pred.len(),
        });
    }
    let nr = data.receivers.len();
    let mut s = String::from("receiver,x,y,time,observed,predicted,sigma\n");
    for (k, rx) in data.receivers.iter().enumerate() {
        for (j, t) in data.times.iter().enumerate() {
            let i = j * nr + k;
            let _ = writeln!(
                s,
                "{k},{},{},{t:e},{:e},{:e},{:e}",
                rx[0], rx[1], data.d_obs[i], d_pred[i], data.sigma_d[i]
            );
        }
    }
    Ok(s)
}

/// Writes `state.json`, `convergence.csv`, `residual_heatmap.csv`,
/// `transients.csv`, `timing.csv` and `report.json` into `dir`.
pub fn write_rundir(
    dir: impl AsRef<Path>,
    data: &DataSet,
    state: &InversionState,
    report: &RunReport,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(state)?)?;
    std::fs::write(dir.join("convergence.csv"), convergence_csv(&state.history))?;
    std::fs::write(dir.join("timing.csv"), timing_csv(&state.history))?;
    std::fs::write(
        dir.join("residual_heatmap.csv"),
        residual_heatmap_csv(data, &state.d_pred)?,
    )?;
    std::fs::write(dir.join("transients.csv"), transients_csv(data, &state.d_pred)?)?;
    report.save(dir.join("report.json"))?;
    Ok(())
}

/// Rebuilds the report from a run directory, attaching `scaling.json` when present.
pub fn report_from_rundir(dir: impl AsRef<Path>) -> Result<RunReport> {
    let dir = dir.as_ref();
    let state: InversionState = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
    let mut report = match RunReport::load(dir.join("report.json")) {
        Ok(r) => r,
        Err(_) => RunReport::from_state(&state, state.counters, 0),
    };
    report.history = state.history.clone();
    report.timing = fit_timing_model(&state.history);
    let scaling = dir.join("scaling.json");
    if scaling.exists() {
        report.scaling = Some(serde_json::from_str(&std::fs::read_to_string(scaling)?)?);
    }
    Ok(report)
}
