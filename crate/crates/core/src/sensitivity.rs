//! Matrix-free Jacobian of the data with respect to log-conductivity.
//!
//! With `g_i = A_i^{-1} f` and `G_i = dM/dm contracted with g_i`,
//!
//! ```text
//! J v      = 2 Re sum_i alpha_ij xi_i Q A_i^{-1} G_i v          (block j)
//! J^T w    = sum_i 2 Re( xi_i G_i^T A_i^{-T} y_i ),   y_i = sum_j alpha_ij Q^T w_j
//! ```
//!
//! Both directions cost one solve per pole; the channel sum is folded into
//! `y_i` before the transpose solve.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::forward_response;
use crate::linalg::{dot, norm2, spmv_c, spmv_t};
use crate::mesh_assembly::{MassDerivative, Model, Problem};
use crate::rba::RationalApproximant;
use crate::shifted_solver::ShiftedFactorCache;

/// A real linear map known through its action and the action of its
/// transpose.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>>;
}

pub struct JacobianOperator<'a> {
    problem: &'a Problem,
    model: &'a Model,
    approx: &'a RationalApproximant,
    cache: &'a ShiftedFactorCache,
    derivatives: Vec<MassDerivative>,
}

impl<'a> JacobianOperator<'a> {
    /// `pole_fields` must be the `g_i` of `model` (see
    /// [`crate::forward::ForwardResult::pole_fields`]) and `cache` must hold
    /// the factorizations of `model`.
    pub fn new(
        problem: &'a Problem,
        model: &'a Model,
        approx: &'a RationalApproximant,
        cache: &'a ShiftedFactorCache,
        pole_fields: &[Vec<Complex64>],
    ) -> Result<Self> {
        if !cache.is_current(model) || cache.pole_count() != approx.pole_count() {
            return Err(Error::CacheMiss { pole: 0 });
        }
        if pole_fields.len() != approx.pole_count() {
            return Err(Error::DimensionMismatch {
                what: "pole fields",
                expected: approx.pole_count(),
                got: pole_fields.len(),
            });
        }
        let derivatives = pole_fields
            .iter()
            .map(|g| problem.mass_derivative(model, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            problem,
            model,
            approx,
            cache,
            derivatives,
        })
    }

    fn receivers(&self) -> usize {
        self.problem.receiver_count()
    }

    fn channels(&self) -> usize {
        self.approx.channels().len()
    }

    fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::DimensionMismatch {
                what,
                expected,
                got,
            });
        }
        Ok(())
    }

    pub fn jvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        Self::check_len("model perturbation", self.ncols(), v.len())?;
        let rhs: Vec<Vec<Complex64>> = self.derivatives.iter().map(|g| g.mul_vec(v)).collect();
        let h = self.cache.solve_each(self.problem, self.model, &rhs, false)?;
        let qh: Vec<Vec<Complex64>> = h.iter().map(|h| spmv_c(&self.problem.observation, h)).collect();
        let nr = self.receivers();
        let mut out = vec![0.0; self.nrows()];
        for j in 0..self.channels() {
            let alpha = self.approx.channel_residues(j);
            for r in 0..nr {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, q) in qh.iter().enumerate() {
                    acc += alpha[i] * self.approx.poles()[i] * q[r];
                }
                out[j * nr + r] = 2.0 * acc.re;
            }
        }
        Ok(out)
    }

    fn accumulate(&self, z: &[Vec<Complex64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols()];
        for ((g, zi), xi) in self.derivatives.iter().zip(z).zip(self.approx.poles()) {
            for (o, v) in out.iter_mut().zip(g.tr_mul(zi)) {
                *o += 2.0 * (xi * v).re;
            }
        }
        out
    }

    fn adjoint_data(&self, w: &[f64]) -> Result<Vec<Vec<f64>>> {
        Self::check_len("data vector", self.nrows(), w.len())?;
        let nr = self.receivers();
        Ok((0..self.channels())
            .map(|j| spmv_t(&self.problem.observation, &w[j * nr..(j + 1) * nr]))
            .collect())
    }

    /// `J^T w` with one transpose solve per pole.
    pub fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        let qw = self.adjoint_data(w)?;
        let n = self.problem.dof_count();
        let y: Vec<Vec<Complex64>> = (0..self.approx.pole_count())
            .map(|i| {
                let mut yi = vec![Complex64::new(0.0, 0.0); n];
                for (j, q) in qw.iter().enumerate() {
                    let a = self.approx.channel_residues(j)[i];
                    for (s, v) in yi.iter_mut().zip(q) {
                        *s += a * v;
                    }
                }
                yi
            })
            .collect();
        let z = self.cache.solve_each(self.problem, self.model, &y, true)?;
        Ok(self.accumulate(&z))
    }

    /// `J^T w` with one transpose solve per pole and channel; test oracle.
    pub fn vjp_per_channel(&self, w: &[f64]) -> Result<Vec<f64>> {
        let qw = self.adjoint_data(w)?;
        let mut out = vec![0.0; self.ncols()];
        for (j, q) in qw.iter().enumerate() {
            let y: Vec<Vec<Complex64>> = self
                .approx
                .channel_residues(j)
                .iter()
                .map(|a| q.iter().map(|v| a * v).collect())
                .collect();
            let z = self.cache.solve_each(self.problem, self.model, &y, true)?;
            for (o, v) in out.iter_mut().zip(self.accumulate(&z)) {
                *o += v;
            }
        }
        Ok(out)
    }
}

impl LinearOperator for JacobianOperator<'_> {
    fn nrows(&self) -> usize {
        self.receivers() * self.channels()
    }

    fn ncols(&self) -> usize {
        self.problem.parameter_count()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.jvp(v)
    }

    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.vjp(w)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaylorReport {
    pub h: Vec<f64>,
    pub e0: Vec<f64>,
    pub e1: Vec<f64>,
    /// Points above the round-off floor, used for the slopes.
    pub asymptotic: Vec<bool>,
    pub slope0: Option<f64>,
    pub slope1: Option<f64>,
}

impl TaylorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,e0,e1,asymptotic\n");
        for k in 0..self.h.len() {
            s.push_str(&format!(
                "{:e},{:e},{:e},{}\n",
                self.h[k], self.e0[k], self.e1[k], self.asymptotic[k]
            ));
        }
        s
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Taylor remainders of a generic map `d` with directional derivative `jv`
/// along `direction`.
///
/// A point is on the round-off floor when `e1` is below `1e3 * eps * |d(m)|`
/// or stops shrinking at least like `h^1.5` relative to the previous point.
pub fn taylor_test_with(
    mut d: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    m: &[f64],
    jv: &[f64],
    direction: &[f64],
    h_values: &[f64],
) -> Result<TaylorReport> {
    if h_values.len() < 4 || h_values.windows(2).any(|w| !(w[1] < w[0])) || h_values[0] <= 0.0 {
        return Err(Error::InvalidInput(
            "need at least 4 decreasing positive step lengths".into(),
        ));
    }
    let d0 = d(m)?;
    let floor = 1e3 * f64::EPSILON * norm2(&d0);
    let mut e0 = Vec::with_capacity(h_values.len());
    let mut e1 = Vec::with_capacity(h_values.len());
    for &h in h_values {
        let mp: Vec<f64> = m.iter().zip(direction).map(|(a, b)| a + h * b).collect();
        let dh = d(&mp)?;
        let r0: Vec<f64> = dh.iter().zip(&d0).map(|(a, b)| a - b).collect();
        let r1: Vec<f64> = r0.iter().zip(jv).map(|(a, b)| a - h * b).collect();
        e0.push(norm2(&r0));
        e1.push(norm2(&r1));
    }
    let mut asymptotic = vec![false; h_values.len()];
    let mut alive = true;
    for k in 0..h_values.len() {
        if e1[k] <= floor {
            alive = false;
        }
        if k > 0 && alive {
            let expected = (h_values[k - 1] / h_values[k]).powf(1.5);
            if e1[k - 1] / e1[k] < expected {
                alive = false;
            }
        }
        asymptotic[k] = alive;
    }
    let pick = |e: &[f64]| -> (Vec<f64>, Vec<f64>) {
        h_values
            .iter()
            .zip(e)
            .zip(&asymptotic)
            .filter(|(_, a)| **a)
            .map(|((h, e), _)| (*h, *e))
            .unzip()
    };
    let (h0, y0) = pick(&e0);
    let (h1, y1) = pick(&e1);
    Ok(TaylorReport {
        h: h_values.to_vec(),
        e0,
        e1,
        asymptotic,
        slope0: loglog_slope(&h0, &y0),
        slope1: loglog_slope(&h1, &y1),
    })
}

/// Taylor test of the rational forward map. Each perturbed model costs one
/// factorization per pole in `cache`.
pub fn taylor_test(
    problem: &Problem,
    model: &Model,
    approx: &RationalApproximant,
    direction: &[f64],
    h_values: &[f64],
    cache: &mut ShiftedFactorCache,
) -> Result<TaylorReport> {
    let base = forward_response(problem, model, approx, cache, false)?;
    let jv = JacobianOperator::new(problem, model, approx, cache, &base.pole_fields)?.jvp(direction)?;
    taylor_test_with(
        |m| {
            let trial = model.with_m(m.to_vec());
            Ok(forward_response(problem, &trial, approx, cache, false)?.data)
        },
        &model.m,
        &jv,
        direction,
        h_values,
    )
}

/// `|<Jv, w> - <v, J^T w>| / max(|<Jv, w>|, |<v, J^T w>|)`.
pub fn adjoint_mismatch(op: &dyn LinearOperator, v: &[f64], w: &[f64]) -> Result<f64> {
    let a = dot(&op.apply(v)?, w);
    let b = dot(v, &op.apply_adjoint(w)?);
    let den = a.abs().max(b.abs());
    Ok(if den > 0.0 { (a - b).abs() / den } else { 0.0 })
}

/// Largest normalized adjoint mismatch over `trials` standard normal pairs
/// drawn from a seeded generator.
pub fn adjoint_test(op: &dyn LinearOperator, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v: Vec<f64> = (0..op.ncols()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..op.nrows()).map(|_| StandardNormal.sample(&mut rng)).collect();
        worst = worst.max(adjoint_mismatch(op, &v, &w)?);
    }
    Ok(worst)
}

/// Finite-difference step for oracle checks: `1e-6 * max(1, |m|_inf)`.
pub fn fd_step(m: &[f64]) -> f64 {
    1e-6 * m.iter().fold(1.0f64, |a, v| a.max(v.abs()))
}
