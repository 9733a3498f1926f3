//! Smoothness regularization `R(m) = 1/2 (m - m_ref)^T L (m - m_ref)` with
//! `L = D Mdiv^{-1} D^T` on the cell/face graph.
//!
//! `D` is the signed cell-face incidence scaled by face measure. The lumped
//! face mass is `Mdiv_f = |f| * mean(|c| / |f|)` over the two adjacent cells,
//! so every face contributes `|f|^2 / mean|c|` to `L` (inverse spacing in
//! 1-D). Constants lie in the null space of `D^T`; a small cell-weighted
//! identity makes `L` definite so that `L = R^T R` exists.

use std::path::Path;

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::linalg::{csr_from_triplets, dot, spmv, BandCholesky};
use crate::mesh_assembly::{Grid, Model};

/// Relative size of the anchoring term: `eps = ANCHOR * trace(L) / P`.
pub const ANCHOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RegOperator {
    /// `P x F` signed incidence.
    pub d: CsMat<f64>,
    pub mdiv: Vec<f64>,
    /// `D Mdiv^{-1} D^T` without the anchor.
    pub laplacian: CsMat<f64>,
    /// Anchored `L`.
    pub l: CsMat<f64>,
    pub anchor: f64,
    factor: BandCholesky,
}

pub fn build_reg(grid: &Grid) -> Result<RegOperator> {
    let p = grid.cell_count();
    if grid.faces.is_empty() {
        return Err(Error::InvalidInput(
            "regularization needs at least one interior face".into(),
        ));
    }
    let mut touched = vec![false; p];
    let mut d_trip = Vec::with_capacity(2 * grid.faces.len());
    let mut l_trip = Vec::with_capacity(4 * grid.faces.len() + p);
    let mut mdiv = Vec::with_capacity(grid.faces.len());
    for (f, face) in grid.faces.iter().enumerate() {
        let [a, b] = face.cells;
        let thick =
            0.5 * (grid.cells[a].measure + grid.cells[b].measure) / face.measure;
        let w = face.measure * thick;
        mdiv.push(w);
        d_trip.push((a, f, face.measure));
        d_trip.push((b, f, -face.measure));
        let c = face.measure * face.measure / w;
        l_trip.extend([(a, a, c), (b, b, c), (a, b, -c), (b, a, -c)]);
        touched[a] = true;
        touched[b] = true;
    }
    let isolated = touched.iter().filter(|t| !**t).count();
    if isolated > 0 {
        log::warn!("{isolated} cells have no interior face; only the anchor constrains them");
    }
    let laplacian = csr_from_triplets(p, p, l_trip.iter().copied());
    let trace: f64 = (0..p).map(|i| laplacian.get(i, i).copied().unwrap_or(0.0)).sum();
    let anchor = ANCHOR * trace / p as f64;
    let mean_measure = grid.cells.iter().map(|c| c.measure).sum::<f64>() / p as f64;
    let l = csr_from_triplets(
        p,
        p,
        l_trip
            .into_iter()
            .chain((0..p).map(|i| (i, i, anchor * grid.cells[i].measure / mean_measure))),
    );
    let factor = BandCholesky::factor(&l)?;
    Ok(RegOperator {
        d: csr_from_triplets(p, grid.faces.len(), d_trip),
        mdiv,
        laplacian,
        l,
        anchor,
        factor,
    })
}

impl RegOperator {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    fn delta(&self, model: &Model) -> Result<Vec<f64>> {
        if model.m.len() != self.dim() || model.m_ref.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "model parameters",
                expected: self.dim(),
                got: model.m.len(),
            });
        }
        Ok(model.m.iter().zip(&model.m_ref).map(|(a, b)| a - b).collect())
    }

    /// `(R(m), L (m - m_ref))`.
    pub fn value_grad(&self, model: &Model) -> Result<(f64, Vec<f64>)> {
        let x = self.delta(model)?;
        let g = spmv(&self.l, &x);
        Ok((0.5 * dot(&x, &g), g))
    }

    pub fn value(&self, model: &Model) -> Result<f64> {
        Ok(self.value_grad(model)?.0)
    }

    /// `R x` with `R^T R = L`.
    pub fn apply_sqrt(&self, x: &[f64]) -> Vec<f64> {
        self.factor.apply(x)
    }

    /// `R^T y`.
    pub fn apply_sqrt_t(&self, y: &[f64]) -> Vec<f64> {
        self.factor.apply_transpose(y)
    }

    pub fn factor_dense(&self) -> nalgebra::DMatrix<f64> {
        self.factor.to_dense()
    }

    pub fn export_matrix_market(&self, path: impl AsRef<Path>) -> Result<()> {
        sprs::io::write_matrix_market(path, &self.l)?;
        Ok(())
    }
}

pub fn reg_value_grad(reg: &RegOperator, model: &Model) -> Result<(f64, Vec<f64>)> {
    reg.value_grad(model)
}
