//! LSQR for `min |A x - b|_2` using only `A v` and `A^T w`
//! (Paige & Saunders, ACM TOMS 8, 1982).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::sensitivity::LinearOperator;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsqrConfig {
    /// Relative tolerance on the residual and on the normal-equation residual.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LsqrConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsqrStop {
    /// `b = 0`; the solution is zero.
    ZeroRhs,
    /// `|r| <= tol (|b| + |A| |x|)`.
    Residual,
    /// `|A^T r| <= tol |A| |r|`.
    NormalEquations,
    /// The bidiagonalization terminated: the Krylov space is exhausted.
    Exhausted,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct LsqrResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub stop: LsqrStop,
    /// Estimates of `|b - A x|` and `|A^T (b - A x)|`.
    pub residual_norm: f64,
    pub normal_residual_norm: f64,
}

impl LsqrResult {
    pub fn converged(&self) -> bool {
        self.stop != LsqrStop::MaxIterations
    }
}

fn scale(v: &mut [f64], s: f64) {
    v.iter_mut().for_each(|x| *x *= s);
}

pub fn lsqr(op: &dyn LinearOperator, b: &[f64], cfg: &LsqrConfig) -> Result<LsqrResult> {
    let (m, n) = (op.nrows(), op.ncols());
    if b.len() != m {
        return Err(Error::DimensionMismatch {
            what: "least-squares right-hand side",
            expected: m,
            got: b.len(),
        });
    }
    let mut x = vec![0.0; n];
    let mut u = b.to_vec();
    let mut beta = norm2(&u);
    let bnorm = beta;
    if beta == 0.0 {
        return Ok(LsqrResult {
            x,
            iterations: 0,
            stop: LsqrStop::ZeroRhs,
            residual_norm: 0.0,
            normal_residual_norm: 0.0,
        });
    }
    scale(&mut u, 1.0 / beta);
    let mut v = op.apply_adjoint(&u)?;
    let mut alpha = norm2(&v);
    if alpha == 0.0 {
        return Ok(LsqrResult {
            x,
            iterations: 0,
            stop: LsqrStop::Exhausted,
            residual_norm: bnorm,
            normal_residual_norm: 0.0,
        });
    }
    scale(&mut v, 1.0 / alpha);
    let mut w = v.clone();
    let (mut phibar, mut rhobar) = (beta, alpha);
    let mut anorm_sq = 0.0;
    let mut stop = LsqrStop::MaxIterations;
    let mut iterations = 0;
    let mut rnorm = bnorm;
    let mut arnorm = alpha * beta;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let av = op.apply(&v)?;
        for (ui, ai) in u.iter_mut().zip(&av) {
            *ui = ai - alpha * *ui;
        }
        beta = norm2(&u);
        anorm_sq += alpha * alpha + beta * beta;
        if beta > 0.0 {
            scale(&mut u, 1.0 / beta);
            let atu = op.apply_adjoint(&u)?;
            for (vi, ai) in v.iter_mut().zip(&atu) {
                *vi = ai - beta * *vi;
            }
            alpha = norm2(&v);
            if alpha > 0.0 {
                scale(&mut v, 1.0 / alpha);
            }
        } else {
            alpha = 0.0;
        }

        let rho = rhobar.hypot(beta);
        let (c, s) = (rhobar / rho, beta / rho);
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let (t1, t2) = (phi / rho, -theta / rho);
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += t1 * *wi;
            *wi = vi + t2 * *wi;
        }
        let xnorm_sq = x.iter().map(|v| v * v).sum::<f64>();

        rnorm = phibar;
        arnorm = phibar * alpha * c.abs();
        let anorm = anorm_sq.sqrt();
        if beta == 0.0 || alpha == 0.0 {
            stop = LsqrStop::Exhausted;
            break;
        }
        if rnorm <= cfg.tol * (bnorm + anorm * xnorm_sq.sqrt()) {
            stop = LsqrStop::Residual;
            break;
        }
        if arnorm <= cfg.tol * anorm * rnorm {
            stop = LsqrStop::NormalEquations;
            break;
        }
    }
    Ok(LsqrResult {
        x,
        iterations,
        stop,
        residual_norm: rnorm,
        normal_residual_norm: arnorm,
    })
}

/// Dense matrix as a [`LinearOperator`].
#[derive(Debug, Clone)]
pub struct DenseOperator(pub nalgebra::DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }
    fn ncols(&self) -> usize {
        self.0.ncols()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.0 * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec())
    }
    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0.tr_mul(&nalgebra::DVector::from_column_slice(w))).as_slice().to_vec())
    }
}
