//! Transient responses `u(t_j) = exp(-t_j M^{-1} K) M^{-1} f` and data
//! `d_j = Q u(t_j)`.
//!
//! The production path evaluates the rational approximant with one shifted
//! solve per pole. Two reference integrators are kept for testing and cost
//! comparison: a dense generalized eigendecomposition and implicit Euler.

use std::collections::btree_map::{BTreeMap, Entry};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{csr_from_triplets, spmv, to_dense, BandCholesky};
use crate::mesh_assembly::{Model, Problem};
use crate::rba::{RationalApproximant, TimeChannels};
use crate::shifted_solver::{solve_all_poles, ShiftedFactorCache, SolveCounters};

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `fields[j]` is `u(t_j)`; only kept on request.
    pub fields: Option<Vec<Vec<f64>>>,
    /// Channel-major data: `data[j * M_r + r]`.
    pub data: Vec<f64>,
    pub times: Vec<f64>,
    /// Pole fields `g_i = A_i^{-1} f`, reused by the Jacobian.
    pub pole_fields: Vec<Vec<Complex64>>,
    /// Counter increments caused by this evaluation.
    pub counters: SolveCounters,
}

impl ForwardResult {
    pub fn channel(&self, j: usize) -> &[f64] {
        let r = self.data.len() / self.times.len().max(1);
        &self.data[j * r..(j + 1) * r]
    }
}

/// `2 Re sum_i alpha_ij g_i`, summed in ascending pole order.
pub fn combine_poles(approx: &RationalApproximant, g: &[Vec<Complex64>], j: usize) -> Vec<f64> {
    let n = g.first().map_or(0, |v| v.len());
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for (gi, a) in g.iter().zip(approx.channel_residues(j)) {
        for (s, v) in acc.iter_mut().zip(gi) {
            *s += a * v;
        }
    }
    acc.iter().map(|z| 2.0 * z.re).collect()
}

/// Evaluates all channels of `approx` at `model`.
pub fn forward_response(
    problem: &Problem,
    model: &Model,
    approx: &RationalApproximant,
    cache: &mut ShiftedFactorCache,
    retain_fields: bool,
) -> Result<ForwardResult> {
    let before = cache.counters();
    let g = solve_all_poles(problem, model, approx, &problem.source, cache)?;
    let kt = approx.channels().len();
    let mut data = Vec::with_capacity(kt * problem.receiver_count());
    let mut fields = retain_fields.then(|| Vec::with_capacity(kt));
    for j in 0..kt {
        let u = combine_poles(approx, &g, j);
        data.extend(spmv(&problem.observation, &u));
        if let Some(f) = fields.as_mut() {
            f.push(u);
        }
    }
    Ok(ForwardResult {
        fields,
        data,
        times: approx.channels().times().to_vec(),
        pole_fields: g,
        counters: cache.counters() - before,
    })
}

/// `M(m)^{-1} f` by a real banded Cholesky factorization.
pub fn initial_field(problem: &Problem, model: &Model) -> Result<Vec<f64>> {
    let m = problem.assemble_mass(model)?;
    Ok(BandCholesky::factor(&m)?.solve(&problem.source))
}

/// Exact responses from the generalized eigenproblem `K v = lambda M v`.
/// Rows are channels. `dense_limit` caps the number of unknowns.
pub fn dense_expm_oracle(
    problem: &Problem,
    model: &Model,
    times: &[f64],
    dense_limit: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = problem.dof_count();
    if n > dense_limit {
        return Err(Error::DenseLimit {
            n,
            limit: dense_limit,
        });
    }
    let k = to_dense(&problem.stiffness);
    let m = to_dense(&problem.assemble_mass(model)?);
    let l = m.cholesky().ok_or(Error::NotPositiveDefinite)?.l();
    let linv = l.try_inverse().ok_or(Error::NotPositiveDefinite)?;
    let c = &linv * k * linv.transpose();
    let eig = ((&c + c.transpose()) * 0.5).symmetric_eigen();
    // M-orthonormal eigenvectors.
    let v: DMatrix<f64> = linv.transpose() * eig.eigenvectors;
    let f = DVector::from_column_slice(&problem.source);
    let coef = v.transpose() * f;
    Ok(times
        .iter()
        .map(|&t| {
            let w = DVector::from_iterator(
                n,
                eig.eigenvalues
                    .iter()
                    .zip(coef.iter())
                    .map(|(lam, c)| (-lam * t).exp() * c),
            );
            (&v * w).as_slice().to_vec()
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EulerCounters {
    /// Factorizations of `M + dt K`, one per distinct step size.
    pub factorizations: u64,
    pub steps: u64,
    /// Factorizations of `M` for the initial field.
    pub mass_factorizations: u64,
}

#[derive(Debug, Clone)]
pub struct EulerResult {
    pub fields: Vec<Vec<f64>>,
    pub counters: EulerCounters,
}

/// Implicit Euler `(M + dt K) u^{n+1} = M u^n` from `u^0 = M^{-1} f`.
///
/// Gate `j` spans `(t_{j-1}, t_j]` with `t_0 = 0` and is covered by
/// `steps_per_gate` equal steps; every distinct step size is factorized once.
pub fn implicit_euler_reference(
    problem: &Problem,
    model: &Model,
    times: &TimeChannels,
    steps_per_gate: usize,
) -> Result<EulerResult> {
    if steps_per_gate == 0 {
        return Err(Error::InvalidInput("steps_per_gate must be positive".into()));
    }
    let n = problem.dof_count();
    let mass = problem.assemble_mass(model)?;
    let mut counters = EulerCounters {
        mass_factorizations: 1,
        ..Default::default()
    };
    let mut u = BandCholesky::factor(&mass)?.solve(&problem.source);
    let mut factors: BTreeMap<u64, BandCholesky> = BTreeMap::new();
    let mut fields = Vec::with_capacity(times.len());
    let mut t_prev = 0.0;
    for &t in times.times() {
        let dt = (t - t_prev) / steps_per_gate as f64;
        t_prev = t;
        let key = dt.to_bits();
        let factor = match factors.entry(key) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let trip = problem
                    .stiffness
                    .iter()
                    .map(|(v, (r, c))| (r, c, dt * v))
                    .chain(problem.mass_triplets(model)?);
                counters.factorizations += 1;
                e.insert(BandCholesky::factor(&csr_from_triplets(n, n, trip))?)
            }
        };
        for _ in 0..steps_per_gate {
            u = factor.solve(&spmv(&mass, &u));
            counters.steps += 1;
        }
        fields.push(u.clone());
    }
    Ok(EulerResult { fields, counters })
}

/// `||a - b||_2 / ||b||_2`, or the absolute norm when `b = 0`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}
