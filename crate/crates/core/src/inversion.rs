//! Gauss-Newton inversion with an augmented LSQR update, Armijo
//! backtracking and piecewise-constant cooling of the regularization weight.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward_response, ForwardResult};
use crate::linalg::dot;
use crate::lsqr::{lsqr, LsqrConfig, LsqrStop};
use crate::mesh_assembly::{Model, Problem};
use crate::rba::RationalApproximant;
use crate::regularization::RegOperator;
use crate::sensitivity::{JacobianOperator, LinearOperator};
use crate::shifted_solver::{ShiftedFactorCache, SolveCounters};
use crate::synthetic_data::DataSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    /// Initial regularization weight; estimated from the data when absent.
    pub lambda0: Option<f64>,
    pub chi2_target: f64,
    pub max_gn: usize,
    pub lsqr: LsqrConfig,
    pub line_search: LineSearchConfig,
    /// Relative decrease of the objective below which the weight is halved.
    pub tol_outer: f64,
    /// Stop once `lambda < lambda_min_factor * lambda0`.
    pub lambda_min_factor: f64,
    /// Abort after this many consecutive accepted steps that raise the objective.
    pub divergence_window: usize,
    /// Seed of the random perturbation used by the default `lambda0`.
    pub perturb_seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lambda0: None,
            chi2_target: 1.0,
            max_gn: 30,
            lsqr: LsqrConfig::default(),
            line_search: LineSearchConfig::default(),
            tol_outer: 1e-3,
            lambda_min_factor: 2f64.powi(-20),
            divergence_window: 3,
            perturb_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchConfig {
    pub c1: f64,
    pub eta_min: f64,
    /// Try one quadratic-interpolation step after the first rejection.
    pub quadratic: bool,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            eta_min: 2f64.powi(-6),
            quadratic: false,
        }
    }
}

/// `|W_d (d_pred - d_obs)|^2 / n`.
pub fn chi_squared(data: &DataSet, d_pred: &[f64]) -> Result<f64> {
    let r = data.weighted_residual(d_pred)?;
    if r.is_empty() {
        return Err(Error::InvalidInput("empty data set".into()));
    }
    Ok(dot(&r, &r) / r.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// `1/2 |W_d (d - d_obs)|^2`.
    pub misfit: f64,
    /// `R(m)`.
    pub reg: f64,
    pub lambda: f64,
    pub phi: f64,
    pub chi2: f64,
}

impl Objective {
    pub fn evaluate(
        data: &DataSet,
        d_pred: &[f64],
        reg: &RegOperator,
        model: &Model,
        lambda: f64,
    ) -> Result<Self> {
        let r = data.weighted_residual(d_pred)?;
        let rr = dot(&r, &r);
        let reg_value = reg.value(model)?;
        Ok(Self::from_parts(0.5 * rr, reg_value, lambda, rr / r.len() as f64))
    }

    fn from_parts(misfit: f64, reg: f64, lambda: f64, chi2: f64) -> Self {
        Self {
            misfit,
            reg,
            lambda,
            phi: misfit + lambda * reg,
            chi2,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self::from_parts(self.misfit, self.reg, lambda, self.chi2)
    }
}

/// `[W_d J; sqrt(lambda) R]`.
pub struct AugmentedOperator<'a> {
    jacobian: &'a JacobianOperator<'a>,
    weights: &'a [f64],
    reg: &'a RegOperator,
    sqrt_lambda: f64,
}

impl<'a> AugmentedOperator<'a> {
    pub fn new(
        jacobian: &'a JacobianOperator<'a>,
        weights: &'a [f64],
        reg: &'a RegOperator,
        lambda: f64,
    ) -> Result<Self> {
        if weights.len() != jacobian.nrows() {
            return Err(Error::DimensionMismatch {
                what: "data weights",
                expected: jacobian.nrows(),
                got: weights.len(),
            });
        }
        if reg.dim() != jacobian.ncols() {
            return Err(Error::DimensionMismatch {
                what: "regularization operator",
                expected: jacobian.ncols(),
                got: reg.dim(),
            });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid regularization weight {lambda}")));
        }
        Ok(Self {
            jacobian,
            weights,
            reg,
            sqrt_lambda: lambda.sqrt(),
        })
    }
}

impl LinearOperator for AugmentedOperator<'_> {
    fn nrows(&self) -> usize {
        self.jacobian.nrows() + self.reg.dim()
    }

    fn ncols(&self) -> usize {
        self.jacobian.ncols()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.jacobian.jvp(v)?;
        y.iter_mut().zip(self.weights).for_each(|(y, w)| *y *= w);
        y.extend(self.reg.apply_sqrt(v).into_iter().map(|x| self.sqrt_lambda * x));
        Ok(y)
    }

    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        let nd = self.jacobian.nrows();
        if w.len() != self.nrows() {
            return Err(Error::DimensionMismatch {
                what: "augmented residual",
                expected: self.nrows(),
                got: w.len(),
            });
        }
        let wd: Vec<f64> = w[..nd].iter().zip(self.weights).map(|(a, b)| a * b).collect();
        let mut x = self.jacobian.vjp(&wd)?;
        for (x, r) in x.iter_mut().zip(self.reg.apply_sqrt_t(&w[nd..])) {
            *x += self.sqrt_lambda * r;
        }
        Ok(x)
    }
}

fn model_delta(model: &Model) -> Vec<f64> {
    model.m.iter().zip(&model.m_ref).map(|(a, b)| a - b).collect()
}

/// `grad phi = J^T W_d^2 (d - d_obs) + lambda L (m - m_ref)`.
pub fn gradient(
    jacobian: &JacobianOperator,
    reg: &RegOperator,
    data: &DataSet,
    model: &Model,
    d_pred: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let r = data.weighted_residual(d_pred)?;
    let w2r: Vec<f64> = r.iter().zip(&data.sigma_d).map(|(r, s)| r / s).collect();
    let mut g = jacobian.vjp(&w2r)?;
    let (_, lg) = reg.value_grad(model)?;
    g.iter_mut().zip(&lg).for_each(|(g, l)| *g += lambda * l);
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct GnStep {
    pub delta: Vec<f64>,
    pub lsqr_iters: usize,
    pub stop: LsqrStop,
}

/// Model update from the augmented least-squares problem.
pub fn gn_step(
    jacobian: &JacobianOperator,
    reg: &RegOperator,
    data: &DataSet,
    model: &Model,
    d_pred: &[f64],
    lambda: f64,
    cfg: &LsqrConfig,
) -> Result<GnStep> {
    let weights = data.weights();
    let op = AugmentedOperator::new(jacobian, &weights, reg, lambda)?;
    let mut b: Vec<f64> = data.weighted_residual(d_pred)?.iter().map(|r| -r).collect();
    let sl = lambda.sqrt();
    b.extend(reg.apply_sqrt(&model_delta(model)).into_iter().map(|x| -sl * x));
    let res = lsqr(&op, &b, cfg)?;
    Ok(GnStep {
        delta: res.x,
        lsqr_iters: res.iterations,
        stop: res.stop,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSearchResult {
    /// Accepted step, or the smallest step tried.
    pub eta: f64,
    pub accepted: bool,
    /// Objective at `eta`.
    pub phi: f64,
    /// Every `(eta, phi)` evaluated, in order.
    pub trials: Vec<(f64, f64)>,
}

/// Armijo backtracking from `eta = 1` by halving down to `eta_min`.
/// `slope` is `grad phi . delta`; `eval(eta)` returns `phi(m + eta delta)`.
pub fn line_search(
    phi0: f64,
    slope: f64,
    cfg: &LineSearchConfig,
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<LineSearchResult> {
    let armijo = |eta: f64, phi: f64| phi.is_finite() && phi <= phi0 + cfg.c1 * eta * slope;
    let mut trials = Vec::new();
    let mut eta = 1.0;
    let mut tried_quadratic = !cfg.quadratic;
    while eta >= cfg.eta_min {
        let phi = eval(eta)?;
        trials.push((eta, phi));
        if armijo(eta, phi) {
            return Ok(LineSearchResult {
                eta,
                accepted: true,
                phi,
                trials,
            });
        }
        if !tried_quadratic {
            tried_quadratic = true;
            // Minimizer of the parabola through phi0, slope and (eta, phi).
            let curv = phi - phi0 - slope * eta;
            if curv > 0.0 && slope < 0.0 {
                let q = (-slope * eta * eta / (2.0 * curv)).clamp(0.1 * eta, 0.5 * eta);
                if q >= cfg.eta_min && q != 0.5 * eta {
                    let pq = eval(q)?;
                    trials.push((q, pq));
                    if armijo(q, pq) {
                        return Ok(LineSearchResult {
                            eta: q,
                            accepted: true,
                            phi: pq,
                            trials,
                        });
                    }
                }
            }
        }
        eta *= 0.5;
    }
    let (eta, phi) = trials
        .iter()
        .copied()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap_or((cfg.eta_min, f64::NAN));
    Ok(LineSearchResult {
        eta,
        accepted: false,
        phi,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Weight used for this step.
    pub lambda: f64,
    /// Objective at the start of the step.
    pub phi_start: f64,
    /// Objective after the step (unchanged if rejected), at `lambda`.
    pub phi: f64,
    pub misfit: f64,
    pub reg: f64,
    pub chi2: f64,
    pub eta: f64,
    pub accepted: bool,
    /// `grad phi . delta`.
    pub slope: f64,
    pub step_norm: f64,
    pub line_search_trials: usize,
    pub lsqr_iters: usize,
    pub lsqr_stop: LsqrStop,
    /// The weight was halved after this step.
    pub cooled: bool,
    pub wall_ms: f64,
    pub lsqr_ms: f64,
    pub factorizations: u64,
    pub solves: u64,
    pub transpose_solves: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    MaxIterations,
    LambdaFloor,
    Diverged(String),
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionState {
    pub model: Model,
    pub lambda: f64,
    pub lambda0: f64,
    /// Completed Gauss-Newton iterations.
    pub iteration: usize,
    pub objective: Objective,
    pub history: Vec<IterationRecord>,
    pub status: StopReason,
    /// Totals over the whole run, including the initial forward solve.
    pub counters: SolveCounters,
    /// Predicted data at `model`.
    pub d_pred: Vec<f64>,
}

/// `|W_d (d(m_start) - d_obs)|^2 / max(1, 2 R(m_start + p))` with `p ~ N(0, I)`.
pub fn default_lambda0(
    data: &DataSet,
    d_start: &[f64],
    reg: &RegOperator,
    start: &Model,
    seed: u64,
) -> Result<f64> {
    let r = data.weighted_residual(d_start)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed: Vec<f64> = start
        .m
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + e
        })
        .collect();
    let two_r = 2.0 * reg.value(&start.with_m(perturbed))?;
    Ok(dot(&r, &r) / two_r.max(1.0))
}

struct Trial {
    model: Model,
    fwd: ForwardResult,
    objective: Objective,
}

/// Runs the Gauss-Newton loop from `start`. Errors raised after the first
/// forward solve end the run with [`StopReason::Failed`] and keep the history.
pub fn run_inversion(
    problem: &Problem,
    approx: &RationalApproximant,
    reg: &RegOperator,
    data: &DataSet,
    start: &Model,
    cache: &mut ShiftedFactorCache,
    cfg: &InversionConfig,
) -> Result<InversionState> {
    if start.len() != problem.parameter_count() {
        return Err(Error::DimensionMismatch {
            what: "starting model",
            expected: problem.parameter_count(),
            got: start.len(),
        });
    }
    let expected = approx.channels().len() * problem.receiver_count();
    if data.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "observed data",
            expected,
            got: data.len(),
        });
    }
    if !(cfg.line_search.eta_min > 0.0 && cfg.line_search.eta_min <= 1.0) {
        return Err(Error::InvalidInput("eta_min must lie in (0, 1]".into()));
    }
    let before = cache.counters();
    let fwd = forward_response(problem, start, approx, cache, false)?;
    let lambda0 = match cfg.lambda0 {
        Some(l) => l,
        None => default_lambda0(data, &fwd.data, reg, start, cfg.perturb_seed)?,
    };
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::InvalidInput(format!("initial weight must be positive, got {lambda0}")));
    }
    let objective = Objective::evaluate(data, &fwd.data, reg, start, lambda0)?;
    let mut state = InversionState {
        model: start.clone(),
        lambda: lambda0,
        lambda0,
        iteration: 0,
        objective,
        history: Vec::new(),
        status: StopReason::MaxIterations,
        counters: SolveCounters::default(),
        d_pred: fwd.data.clone(),
    };
    let mut fwd = fwd;
    let outcome = gauss_newton(problem, approx, reg, data, cache, cfg, &mut state, &mut fwd);
    state.status = match outcome {
        Ok(s) => s,
        Err(e) => StopReason::Failed(e.to_string()),
    };
    state.counters = cache.counters() - before;
    log::info!(
        "inversion stopped after {} iterations: {:?}, chi2 = {:.4}",
        state.iteration,
        state.status,
        state.objective.chi2
    );
    Ok(state)
}

#[allow(clippy::too_many_arguments)]
fn gauss_newton(
    problem: &Problem,
    approx: &RationalApproximant,
    reg: &RegOperator,
    data: &DataSet,
    cache: &mut ShiftedFactorCache,
    cfg: &InversionConfig,
    state: &mut InversionState,
    fwd: &mut ForwardResult,
) -> Result<StopReason> {
    let lambda_min = state.lambda0 * cfg.lambda_min_factor;
    let mut rising = 0usize;
    for nu in 1..=cfg.max_gn {
        if state.objective.chi2 <= cfg.chi2_target {
            return Ok(StopReason::TargetReached);
        }
        let clock = Instant::now();
        let counters0 = cache.counters();
        let lambda = state.lambda;
        if !cache.is_current(&state.model) {
            *fwd = forward_response(problem, &state.model, approx, cache, false)?;
        }

        let (step, slope, lsqr_ms) = {
            let jac = JacobianOperator::new(problem, &state.model, approx, cache, &fwd.pole_fields)?;
            let grad = gradient(&jac, reg, data, &state.model, &fwd.data, lambda)?;
            let t = Instant::now();
            let step = gn_step(&jac, reg, data, &state.model, &fwd.data, lambda, &cfg.lsqr)?;
            let lsqr_ms = t.elapsed().as_secs_f64() * 1e3;
            let slope = dot(&grad, &step.delta);
            (step, slope, lsqr_ms)
        };

        let phi_start = state.objective.phi;
        let mut last: Option<Trial> = None;
        let ls = line_search(phi_start, slope, &cfg.line_search, |eta| {
            let m: Vec<f64> = state
                .model
                .m
                .iter()
                .zip(&step.delta)
                .map(|(m, d)| m + eta * d)
                .collect();
            let model = state.model.with_m(m);
            let fwd = forward_response(problem, &model, approx, cache, false)?;
            let objective = Objective::evaluate(data, &fwd.data, reg, &model, lambda)?;
            let phi = objective.phi;
            last = Some(Trial {
                model,
                fwd,
                objective,
            });
            Ok(phi)
        })?;

        let mut cooled = true;
        let prev_phi = state.objective.phi;
        if ls.accepted {
            let trial = last.take().expect("accepted step was evaluated");
            state.model = trial.model;
            state.objective = trial.objective;
            state.d_pred = trial.fwd.data.clone();
            *fwd = trial.fwd;
            let decrease = (prev_phi - state.objective.phi) / prev_phi.abs().max(f64::MIN_POSITIVE);
            cooled = decrease < cfg.tol_outer;
        }
        let after = state.objective;
        let counters = cache.counters() - counters0;
        state.iteration = nu;
        state.history.push(IterationRecord {
            iteration: nu,
            lambda,
            phi_start,
            phi: after.phi,
            misfit: after.misfit,
            reg: after.reg,
            chi2: after.chi2,
            eta: ls.eta,
            accepted: ls.accepted,
            slope,
            step_norm: dot(&step.delta, &step.delta).sqrt(),
            line_search_trials: ls.trials.len(),
            lsqr_iters: step.lsqr_iters,
            lsqr_stop: step.stop,
            cooled,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            lsqr_ms,
            factorizations: counters.factorizations,
            solves: counters.solves,
            transpose_solves: counters.transpose_solves,
        });
        log::info!(
            "iteration {nu}: phi = {:.6e}, chi2 = {:.4}, lambda = {:.3e}, eta = {}, lsqr = {}",
            after.phi,
            after.chi2,
            lambda,
            ls.eta,
            step.lsqr_iters
        );

        if ls.accepted {
            rising = if after.phi > prev_phi { rising + 1 } else { 0 };
            if rising >= cfg.divergence_window.max(1) {
                return Ok(StopReason::Diverged(format!(
                    "objective increased over {rising} consecutive accepted steps"
                )));
            }
        }
        if cooled {
            state.lambda = 0.5 * lambda;
            state.objective = state.objective.with_lambda(state.lambda);
            if state.lambda < lambda_min {
                return Ok(StopReason::LambdaFloor);
            }
        }
    }
    Ok(if state.objective.chi2 <= cfg.chi2_target {
        StopReason::TargetReached
    } else {
        StopReason::MaxIterations
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsqr::DenseOperator;
    use crate::mesh_assembly::{build_problem, Anomaly, DomainSpec, Footprint, ProblemSpec};
    use crate::rba::{fit_common_pole, FitConfig, TimeChannels};
    use crate::regularization::build_reg;
    use crate::shifted_solver::SolverConfig;
    use crate::synthetic_data::{add_noise, NoiseSpec};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    struct Fixture {
        problem: Problem,
        truth: Model,
        background: Model,
        approx: RationalApproximant,
        reg: RegOperator,
    }

    fn fixture(cells: usize) -> Fixture {
        let spec = ProblemSpec {
            domain: DomainSpec {
                x: [-150.0, 150.0],
                y: Some([-150.0, 150.0]),
                cells: vec![cells, cells],
            },
            inv_mu: None,
            background_conductivity: 0.1,
            receivers: vec![vec![0.0, 0.0], vec![40.0, 10.0], vec![-30.0, 60.0], vec![10.0, -70.0]],
            receiver_grid: None,
            source: Footprint::Box {
                min: vec![-60.0, -60.0],
                max: vec![60.0, 60.0],
                amplitude: 1.0,
            },
            anomalies: vec![Anomaly {
                min: vec![-80.0, -80.0],
                max: vec![0.0, 0.0],
                conductivity: 1.0,
            }],
        };
        let problem = build_problem(&spec).unwrap();
        let grid = problem.grid.as_ref().unwrap();
        let truth = spec.true_model(grid);
        let background = spec.background_model(grid);
        let x_max = problem.spectral_upper_bound(&truth).unwrap().unwrap();
        let channels = TimeChannels::log_spaced(-6.0, -3.0, 6).unwrap();
        let cfg = FitConfig {
            log_points: 200,
            linear_points: 200,
            ..FitConfig::default()
        };
        let approx = fit_common_pole(&channels, [0.0, x_max], 8, &cfg).unwrap();
        let reg = build_reg(grid).unwrap();
        Fixture {
            problem,
            truth,
            background,
            approx,
            reg,
        }
    }

    fn cache() -> ShiftedFactorCache {
        ShiftedFactorCache::new(SolverConfig::default())
    }

    fn clean_data(fx: &Fixture, d: &[f64]) -> DataSet {
        let sigma = d.iter().map(|v| 0.03 * v.abs() + 1e-9).collect();
        DataSet::new(
            d.to_vec(),
            sigma,
            fx.approx.channels().times().to_vec(),
            fx.problem.receivers.clone(),
        )
        .unwrap()
    }

    fn forward(fx: &Fixture, m: &Model) -> Vec<f64> {
        forward_response(&fx.problem, m, &fx.approx, &mut cache(), false).unwrap().data
    }

    fn phi(fx: &Fixture, data: &DataSet, m: &Model, lambda: f64) -> f64 {
        Objective::evaluate(data, &forward(fx, m), &fx.reg, m, lambda).unwrap().phi
    }

    fn toy_data(d_obs: Vec<f64>, sigma: Vec<f64>) -> DataSet {
        DataSet::new(d_obs, sigma, vec![1.0], vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap()
    }

    #[test]
    fn chi_squared_examples() {
        let set = toy_data(vec![1.0, -2.0, 3.0], vec![0.5, 0.1, 2.0]);
        assert_eq!(chi_squared(&set, &set.d_obs).unwrap(), 0.0);
        let plus: Vec<f64> = set.d_obs.iter().zip(&set.sigma_d).map(|(d, s)| d + s).collect();
        assert!((chi_squared(&set, &plus).unwrap() - 1.0).abs() < 1e-15);
        let plus2: Vec<f64> = set.d_obs.iter().zip(&set.sigma_d).map(|(d, s)| d + 2.0 * s).collect();
        assert!((chi_squared(&set, &plus2).unwrap() - 4.0).abs() < 1e-14);
        assert!(chi_squared(&set, &[0.0; 2]).is_err());
    }

    #[test]
    fn quadratic_objective_accepts_full_newton_step() {
        // phi(eta) = (1 - eta)^2 along the Newton direction.
        let r = line_search(1.0, -2.0, &LineSearchConfig::default(), |eta| Ok((1.0 - eta) * (1.0 - eta))).unwrap();
        assert!(r.accepted);
        assert_eq!(r.eta, 1.0);
        assert_eq!(r.trials.len(), 1);
    }

    #[test]
    fn ascent_direction_is_rejected_at_floor() {
        let cfg = LineSearchConfig::default();
        let r = line_search(1.0, 0.5, &cfg, |eta| Ok(1.0 + eta)).unwrap();
        assert!(!r.accepted);
        assert_eq!(r.eta, cfg.eta_min);
        assert_eq!(r.trials.len(), 7);
        let etas: Vec<f64> = r.trials.iter().map(|t| t.0).collect();
        assert_eq!(etas, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625]);
    }

    #[test]
    fn halving_finds_first_armijo_step() {
        // phi(eta) = (1 - 4 eta)^2, minimum at 1/4.
        let r = line_search(1.0, -8.0, &LineSearchConfig::default(), |eta| Ok((1.0 - 4.0 * eta).powi(2))).unwrap();
        assert!(r.accepted);
        assert_eq!(r.eta, 0.25);
    }

    #[test]
    fn quadratic_candidate_must_pass_armijo() {
        let cfg = LineSearchConfig {
            quadratic: true,
            ..LineSearchConfig::default()
        };
        // Exact parabola: the interpolated minimizer 0.1 (clamped) is tried after eta = 1.
        let f = |eta: f64| Ok((1.0 - 10.0 * eta).powi(2));
        let r = line_search(1.0, -20.0, &cfg, f).unwrap();
        assert!(r.accepted);
        assert!((r.eta - 0.1).abs() < 1e-15);
        assert_eq!(r.trials.len(), 2);
        // Non-finite values never pass.
        let r = line_search(1.0, -1.0, &cfg, |_| Ok(f64::NAN)).unwrap();
        assert!(!r.accepted);
    }

    #[test]
    fn objective_with_lambda_recomputes_phi() {
        let o = Objective::from_parts(3.0, 2.0, 0.5, 1.0);
        assert_eq!(o.phi, 4.0);
        let h = o.with_lambda(0.25);
        assert_eq!(h.phi, 3.5);
        assert_eq!(h.misfit, 3.0);
    }

    #[test]
    fn augmented_operator_adjoint_and_dense_normal_equations() {
        let fx = fixture(3);
        let p = fx.problem.parameter_count();
        assert!(p <= 20);
        let model = fx.background.with_m(fx.background.m.iter().enumerate().map(|(k, v)| v + 0.1 * (k as f64).sin()).collect());
        let d_obs = forward(&fx, &fx.truth);
        let data = clean_data(&fx, &d_obs);
        let lambda = 0.7;
        let mut c = cache();
        let fwd = forward_response(&fx.problem, &model, &fx.approx, &mut c, false).unwrap();
        let jac = JacobianOperator::new(&fx.problem, &model, &fx.approx, &c, &fwd.pole_fields).unwrap();
        let weights = data.weights();
        let op = AugmentedOperator::new(&jac, &weights, &fx.reg, lambda).unwrap();
        let mism = crate::sensitivity::adjoint_test(&op, 5, 11).unwrap();
        assert!(mism < 1e-10, "{mism}");

        let tight = LsqrConfig {
            tol: 1e-15,
            max_iters: 500,
        };
        let step = gn_step(&jac, &fx.reg, &data, &model, &fwd.data, lambda, &tight).unwrap();

        // Dense oracle: (J^T W^2 J + lambda L) dm = J^T W^2 (d_obs - d) + lambda L (m_ref - m).
        let mut jd = DMatrix::zeros(jac.nrows(), p);
        for k in 0..p {
            let mut e = vec![0.0; p];
            e[k] = 1.0;
            jd.set_column(k, &DVector::from_vec(jac.jvp(&e).unwrap()));
        }
        let w2 = DMatrix::from_diagonal(&DVector::from_iterator(weights.len(), weights.iter().map(|w| w * w)));
        let l = DMatrix::from_fn(p, p, |i, j| fx.reg.l.get(i, j).copied().unwrap_or(0.0));
        let lhs = jd.transpose() * &w2 * &jd + &l * lambda;
        let resid = DVector::from_iterator(data.len(), data.d_obs.iter().zip(&fwd.data).map(|(o, d)| o - d));
        let mref_m = DVector::from_iterator(p, model.m_ref.iter().zip(&model.m).map(|(a, b)| a - b));
        let rhs = jd.transpose() * &w2 * resid + &l * mref_m * lambda;
        let want = lhs.lu().solve(&rhs).unwrap();
        let err = (DVector::from_vec(step.delta.clone()) - &want).norm() / want.norm();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_residual_at_reference_gives_zero_step() {
        let fx = fixture(4);
        let d = forward(&fx, &fx.background);
        let data = clean_data(&fx, &d);
        let mut c = cache();
        let fwd = forward_response(&fx.problem, &fx.background, &fx.approx, &mut c, false).unwrap();
        let jac = JacobianOperator::new(&fx.problem, &fx.background, &fx.approx, &c, &fwd.pole_fields).unwrap();
        let step = gn_step(&jac, &fx.reg, &data, &fx.background, &fwd.data, 1.0, &LsqrConfig::default()).unwrap();
        assert_eq!(step.stop, LsqrStop::ZeroRhs);
        assert!(step.delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heavy_regularization_points_back_to_reference() {
        let fx = fixture(4);
        let d_obs = forward(&fx, &fx.truth);
        let data = clean_data(&fx, &d_obs);
        let offset: Vec<f64> = fx.background.m.iter().enumerate().map(|(k, v)| v + 0.3 * ((k % 5) as f64 - 2.0)).collect();
        let model = fx.background.with_m(offset);
        let mut c = cache();
        let fwd = forward_response(&fx.problem, &model, &fx.approx, &mut c, false).unwrap();
        let jac = JacobianOperator::new(&fx.problem, &model, &fx.approx, &c, &fwd.pole_fields).unwrap();
        let cfg = LsqrConfig {
            tol: 1e-14,
            max_iters: 300,
        };
        let step = gn_step(&jac, &fx.reg, &data, &model, &fwd.data, 1e14, &cfg).unwrap();
        let back: Vec<f64> = model.m_ref.iter().zip(&model.m).map(|(a, b)| a - b).collect();
        let err = step.delta.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            / dot(&back, &back).sqrt();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let fx = fixture(4);
        let d_obs = forward(&fx, &fx.truth);
        let data = clean_data(&fx, &d_obs);
        let model = fx.background.clone();
        let lambda = 2.0;
        let mut c = cache();
        let fwd = forward_response(&fx.problem, &model, &fx.approx, &mut c, false).unwrap();
        let jac = JacobianOperator::new(&fx.problem, &model, &fx.approx, &c, &fwd.pole_fields).unwrap();
        let g = gradient(&jac, &fx.reg, &data, &model, &fwd.data, lambda).unwrap();
        let h = 1e-5;
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..model.len() {
            let mut plus = model.m.clone();
            let mut minus = model.m.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (phi(&fx, &data, &model.with_m(plus), lambda) - phi(&fx, &data, &model.with_m(minus), lambda)) / (2.0 * h);
            diff = diff.max((fd - g[k]).abs());
            scale = scale.max(g[k].abs());
        }
        assert!(diff <= 1e-4 * scale, "{diff} vs {scale}");
    }

    #[test]
    fn start_at_truth_with_clean_data_stops_immediately() {
        let fx = fixture(4);
        let d_obs = forward(&fx, &fx.truth);
        let data = clean_data(&fx, &d_obs);
        let mut c = cache();
        let start = Model {
            m: fx.truth.m.clone(),
            m_ref: fx.truth.m.clone(),
        };
        let st = run_inversion(&fx.problem, &fx.approx, &fx.reg, &data, &start, &mut c, &InversionConfig {
            lambda0: Some(1.0),
            ..InversionConfig::default()
        })
        .unwrap();
        assert_eq!(st.status, StopReason::TargetReached);
        assert_eq!(st.iteration, 0);
        assert!(st.objective.chi2 < 1e-20);
        assert_eq!(st.counters.factorizations, fx.approx.pole_count() as u64);
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let fx = fixture(4);
        let data = toy_data(vec![1.0; 3], vec![1.0; 3]);
        let mut c = cache();
        let cfg = InversionConfig::default();
        assert!(run_inversion(&fx.problem, &fx.approx, &fx.reg, &data, &fx.background, &mut c, &cfg).is_err());
        let d = forward(&fx, &fx.truth);
        let data = clean_data(&fx, &d);
        let short = Model::uniform(3, 0.1);
        assert!(run_inversion(&fx.problem, &fx.approx, &fx.reg, &data, &short, &mut c, &cfg).is_err());
        let bad = InversionConfig {
            lambda0: Some(-1.0),
            ..InversionConfig::default()
        };
        assert!(run_inversion(&fx.problem, &fx.approx, &fx.reg, &data, &fx.background, &mut c, &bad).is_err());
    }

    #[test]
    fn small_inversion_history_invariants() {
        let fx = fixture(6);
        let d_clean = forward(&fx, &fx.truth);
        let data = add_noise(
            &d_clean,
            fx.approx.channels().times().to_vec(),
            fx.problem.receivers.clone(),
            &NoiseSpec {
                eps_r: 0.03,
                eps_a: None,
                seed: 3,
            },
        )
        .unwrap();
        let mut c = cache();
        let cfg = InversionConfig {
            max_gn: 8,
            ..InversionConfig::default()
        };
        let st = run_inversion(&fx.problem, &fx.approx, &fx.reg, &data, &fx.background, &mut c, &cfg).unwrap();
        assert!(!matches!(st.status, StopReason::Failed(_) | StopReason::Diverged(_)), "{:?}", st.status);
        assert!(!st.history.is_empty());
        let chi0 = chi_squared(&data, &forward(&fx, &fx.background)).unwrap();
        assert!(st.objective.chi2 < chi0);
        let mut prev_lambda = f64::INFINITY;
        for rec in &st.history {
            // Piecewise-constant, non-increasing weight.
            assert!(rec.lambda <= prev_lambda);
            if rec.lambda < prev_lambda && prev_lambda.is_finite() {
                assert_eq!(rec.lambda, 0.5 * prev_lambda);
            }
            prev_lambda = rec.lambda;
            // Stored objective matches its parts.
            let phi = rec.misfit + rec.lambda * rec.reg;
            assert!((phi - rec.phi).abs() <= 1e-12 * phi.abs());
            if rec.accepted {
                assert!(rec.phi <= rec.phi_start + 1e-4 * rec.eta * rec.slope);
                assert!(rec.eta >= cfg.line_search.eta_min);
                assert_eq!(rec.eta.log2().fract(), 0.0);
            }
            // One factorization batch per trial model.
            assert_eq!(rec.factorizations % fx.approx.pole_count() as u64, 0);
        }
        // Final objective recomputed from scratch.
        let fresh = Objective::evaluate(&data, &forward(&fx, &st.model), &fx.reg, &st.model, st.lambda).unwrap();
        assert!((fresh.phi - st.objective.phi).abs() <= 1e-12 * fresh.phi);
        assert_eq!(st.d_pred, forward(&fx, &st.model));
    }

    #[test]
    fn dense_operator_is_a_linear_operator() {
        // Sanity check of the oracle wrapper used elsewhere.
        let a = DenseOperator(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(a.apply(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(a.apply_adjoint(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn line_search_accepts_only_armijo_steps(a in 0.1f64..50.0, b in -5.0f64..5.0, quadratic in any::<bool>()) {
            // phi(eta) = 1 - a eta + b eta^2 (slope -a).
            let cfg = LineSearchConfig { quadratic, ..LineSearchConfig::default() };
            let r = line_search(1.0, -a, &cfg, |eta| Ok(1.0 - a * eta + b * eta * eta)).unwrap();
            if r.accepted {
                prop_assert!(r.phi <= 1.0 - 1e-4 * r.eta * a);
                prop_assert!(r.eta >= cfg.eta_min && r.eta <= 1.0);
                prop_assert_eq!(r.trials.last().unwrap().0, r.eta);
            }
            prop_assert!(r.trials.iter().all(|t| t.0 >= cfg.eta_min));
        }
    }
}
