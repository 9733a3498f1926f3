//! Desk-scale diffusion problems on 1-D intervals and triangulated rectangles.
//!
//! P1 nodal elements with consistent local mass matrices. Boundary nodes
//! carry homogeneous Dirichlet values and are eliminated from the unknowns.
//! The stiffness matrix is model independent; the mass matrix is
//! `M(m) = sum_c exp(m_c) M_c`, and each `M_c` is kept with its global index
//! map so that `dM/dm_c = exp(m_c) M_c` is available slice by slice.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sprs::CsMat;

use crate::error::{Error, Result};
use crate::linalg::{csr_from_triplets, spmv};

/// Magnetic permeability of free space (H/m).
pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    /// Node indices (2 in 1-D, 3 in 2-D).
    pub vertices: Vec<usize>,
    pub measure: f64,
    pub centroid: [f64; 2],
}

/// Interior interface shared by exactly two cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Face {
    pub cells: [usize; 2],
    pub measure: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub dimension: usize,
    pub nodes: Vec<[f64; 2]>,
    pub cells: Vec<Cell>,
    pub faces: Vec<Face>,
    /// Unknown index of every node, `None` on the Dirichlet boundary.
    pub node_dof: Vec<Option<usize>>,
    pub dof_count: usize,
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Grid {
    /// Uniform 1-D grid of `n` cells on `[x0, x1]`.
    pub fn interval(x0: f64, x1: f64, n: usize) -> Result<Self> {
        if n == 0 || !(x1 > x0) {
            return Err(Error::InvalidInput(format!(
                "degenerate interval [{x0}, {x1}] with {n} cells"
            )));
        }
        let h = (x1 - x0) / n as f64;
        let nodes: Vec<[f64; 2]> = (0..=n).map(|i| [x0 + h * i as f64, 0.0]).collect();
        let cells = (0..n)
            .map(|i| Cell {
                vertices: vec![i, i + 1],
                measure: h,
                centroid: [x0 + h * (i as f64 + 0.5), 0.0],
            })
            .collect();
        let faces = (1..n)
            .map(|i| Face {
                cells: [i - 1, i],
                measure: 1.0,
            })
            .collect();
        let mut node_dof = vec![None; n + 1];
        for (k, d) in node_dof.iter_mut().enumerate().take(n).skip(1) {
            *d = Some(k - 1);
        }
        Ok(Self {
            dimension: 1,
            nodes,
            cells,
            faces,
            node_dof,
            dof_count: n.saturating_sub(1),
            lower: [x0, 0.0],
            upper: [x1, 0.0],
        })
    }

    /// `[x0, x1] x [y0, y1]` split into `nx * ny` quads, each cut along the
    /// `(i, j)-(i+1, j+1)` diagonal. Quad `q = j nx + i` owns cells `2q`
    /// (below the diagonal) and `2q + 1`.
    pub fn rectangle(x: [f64; 2], y: [f64; 2], nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || !(x[1] > x[0]) || !(y[1] > y[0]) {
            return Err(Error::InvalidInput(format!(
                "degenerate rectangle {x:?} x {y:?} with {nx} x {ny} cells"
            )));
        }
        let (hx, hy) = ((x[1] - x[0]) / nx as f64, (y[1] - y[0]) / ny as f64);
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([x[0] + hx * i as f64, y[0] + hy * j as f64]);
            }
        }
        let mut cells = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (n00, n10, n01, n11) =
                    (node(i, j), node(i + 1, j), node(i, j + 1), node(i + 1, j + 1));
                for tri in [[n00, n10, n11], [n00, n11, n01]] {
                    let p: Vec<[f64; 2]> = tri.iter().map(|&v| nodes[v]).collect();
                    cells.push(Cell {
                        vertices: tri.to_vec(),
                        measure: 0.5 * hx * hy,
                        centroid: [
                            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
                            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
                        ],
                    });
                }
            }
        }
        let mut edges: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (c, cell) in cells.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (cell.vertices[k], cell.vertices[(k + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push(c);
            }
        }
        let faces = edges
            .into_iter()
            .filter(|(_, cs)| cs.len() == 2)
            .map(|((a, b), cs)| {
                let d = [nodes[a][0] - nodes[b][0], nodes[a][1] - nodes[b][1]];
                Face {
                    cells: [cs[0], cs[1]],
                    measure: d[0].hypot(d[1]),
                }
            })
            .collect();
        let mut node_dof = vec![None; nodes.len()];
        let mut next = 0;
        for j in 1..ny {
            for i in 1..nx {
                node_dof[node(i, j)] = Some(next);
                next += 1;
            }
        }
        Ok(Self {
            dimension: 2,
            nodes,
            cells,
            faces,
            node_dof,
            dof_count: next,
            lower: [x[0], y[0]],
            upper: [x[1], y[1]],
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn domain_measure(&self) -> f64 {
        match self.dimension {
            1 => self.upper[0] - self.lower[0],
            _ => (self.upper[0] - self.lower[0]) * (self.upper[1] - self.lower[1]),
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let tol = 1e-9 * (self.upper[0] - self.lower[0]).abs().max(1.0);
        let inside = |k: usize| p[k] >= self.lower[k] - tol && p[k] <= self.upper[k] + tol;
        inside(0) && (self.dimension == 1 || inside(1))
    }

    /// Containing cell and the P1 basis weights of its vertices at `p`.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, Vec<f64>)> {
        if !self.contains(p) {
            return None;
        }
        let tol = 1e-10;
        for (c, cell) in self.cells.iter().enumerate() {
            let w = match self.dimension {
                1 => {
                    let (a, b) = (self.nodes[cell.vertices[0]][0], self.nodes[cell.vertices[1]][0]);
                    let s = (p[0] - a) / (b - a);
                    vec![1.0 - s, s]
                }
                _ => {
                    let v: Vec<[f64; 2]> = cell.vertices.iter().map(|&i| self.nodes[i]).collect();
                    let t = Matrix2::new(
                        v[1][0] - v[0][0],
                        v[2][0] - v[0][0],
                        v[1][1] - v[0][1],
                        v[2][1] - v[0][1],
                    );
                    let rhs = nalgebra::Vector2::new(p[0] - v[0][0], p[1] - v[0][1]);
                    let l = t.lu().solve(&rhs)?;
                    vec![1.0 - l[0] - l[1], l[0], l[1]]
                }
            };
            if w.iter().all(|&x| x >= -tol) {
                return Some((c, w.iter().map(|x| x.max(0.0)).collect()));
            }
        }
        None
    }
}

/// Log-conductivity per cell and its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub m: Vec<f64>,
    pub m_ref: Vec<f64>,
}

impl Model {
    pub fn uniform(cells: usize, conductivity: f64) -> Self {
        let v = conductivity.ln();
        Self {
            m: vec![v; cells],
            m_ref: vec![v; cells],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn with_m(&self, m: Vec<f64>) -> Self {
        Self {
            m,
            m_ref: self.m_ref.clone(),
        }
    }

    /// Content tag; equal parameter vectors give equal tags.
    pub fn version(&self) -> ModelVersion {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in &self.m {
            v.to_bits().hash(&mut h);
        }
        ModelVersion(h.finish())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelVersion(pub u64);

/// One slice of the mass derivative: a unit-conductivity local mass matrix.
#[derive(Debug, Clone)]
pub struct LocalMass {
    /// Global unknown index per local vertex (`None` for eliminated nodes).
    pub dofs: Vec<Option<usize>>,
    /// Row-major `k x k` local mass.
    pub mass: Vec<f64>,
    /// Row-major `k x k` local stiffness (already scaled), when known.
    pub stiffness: Option<Vec<f64>>,
}

impl LocalMass {
    fn k(&self) -> usize {
        self.dofs.len()
    }
}

/// Assembled operators of a diffusion problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub stiffness: CsMat<f64>,
    pub cells: Vec<LocalMass>,
    pub source: Vec<f64>,
    pub observation: CsMat<f64>,
    pub grid: Option<Grid>,
    pub receivers: Vec<[f64; 2]>,
}

impl Problem {
    /// Builds a problem directly from matrices.
    pub fn from_parts(
        stiffness: CsMat<f64>,
        cells: Vec<LocalMass>,
        source: Vec<f64>,
        observation: CsMat<f64>,
    ) -> Result<Self> {
        let n = stiffness.rows();
        if stiffness.cols() != n {
            return Err(Error::DimensionMismatch {
                what: "stiffness columns",
                expected: n,
                got: stiffness.cols(),
            });
        }
        if source.len() != n {
            return Err(Error::DimensionMismatch {
                what: "source length",
                expected: n,
                got: source.len(),
            });
        }
        if observation.cols() != n {
            return Err(Error::DimensionMismatch {
                what: "observation columns",
                expected: n,
                got: observation.cols(),
            });
        }
        for cell in &cells {
            if cell.mass.len() != cell.k() * cell.k() || cell.dofs.iter().flatten().any(|&d| d >= n)
            {
                return Err(Error::InvalidInput("malformed local mass".into()));
            }
        }
        let receivers = vec![[0.0; 2]; observation.rows()];
        Ok(Self {
            stiffness,
            cells,
            source,
            observation,
            grid: None,
            receivers,
        })
    }

    pub fn dof_count(&self) -> usize {
        self.stiffness.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.cells.len()
    }

    pub fn receiver_count(&self) -> usize {
        self.observation.rows()
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        if model.m.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                what: "model parameters",
                expected: self.parameter_count(),
                got: model.m.len(),
            });
        }
        Ok(())
    }

    /// Triplets of `M(m)` in global indexing.
    pub fn mass_triplets(&self, model: &Model) -> Result<Vec<(usize, usize, f64)>> {
        self.check_model(model)?;
        let mut t = Vec::new();
        for (cell, &mc) in self.cells.iter().zip(&model.m) {
            let s = mc.exp();
            let k = cell.k();
            for a in 0..k {
                let Some(ga) = cell.dofs[a] else { continue };
                for b in 0..k {
                    let Some(gb) = cell.dofs[b] else { continue };
                    t.push((ga, gb, s * cell.mass[a * k + b]));
                }
            }
        }
        Ok(t)
    }

    /// `M(m) = sum_c exp(m_c) M_c`.
    pub fn assemble_mass(&self, model: &Model) -> Result<CsMat<f64>> {
        let n = self.dof_count();
        Ok(csr_from_triplets(n, n, self.mass_triplets(model)?))
    }

    /// Contracts `dM/dm` with `g`: column `c` is `exp(m_c) M_c g` on the
    /// unknowns of cell `c`.
    pub fn mass_derivative(&self, model: &Model, g: &[Complex64]) -> Result<MassDerivative> {
        self.check_model(model)?;
        if g.len() != self.dof_count() {
            return Err(Error::DimensionMismatch {
                what: "contraction vector",
                expected: self.dof_count(),
                got: g.len(),
            });
        }
        let columns = self
            .cells
            .iter()
            .zip(&model.m)
            .map(|(cell, &mc)| {
                let s = mc.exp();
                let k = cell.k();
                let mut rows = Vec::with_capacity(k);
                let mut vals = Vec::with_capacity(k);
                for a in 0..k {
                    let Some(ga) = cell.dofs[a] else { continue };
                    let mut acc = Complex64::new(0.0, 0.0);
                    for b in 0..k {
                        if let Some(gb) = cell.dofs[b] {
                            acc += g[gb] * cell.mass[a * k + b];
                        }
                    }
                    rows.push(ga);
                    vals.push(acc * s);
                }
                (rows, vals)
            })
            .collect();
        Ok(MassDerivative {
            rows: self.dof_count(),
            columns,
        })
    }

    /// Upper bound on the spectrum of `M^{-1} K`: the largest element-level
    /// generalized eigenvalue. Requires local stiffness matrices.
    pub fn spectral_upper_bound(&self, model: &Model) -> Result<Option<f64>> {
        self.check_model(model)?;
        let mut bound = 0.0f64;
        for (cell, &mc) in self.cells.iter().zip(&model.m) {
            let Some(ks) = &cell.stiffness else {
                return Ok(None);
            };
            let k = cell.k();
            let m = DMatrix::from_row_slice(k, k, &cell.mass) * mc.exp();
            let kk = DMatrix::from_row_slice(k, k, ks);
            let chol = m.cholesky().ok_or(Error::NotPositiveDefinite)?;
            let l = chol.l();
            let linv = l.clone().try_inverse().ok_or(Error::NotPositiveDefinite)?;
            let c = &linv * kk * linv.transpose();
            let c = (&c + c.transpose()) * 0.5;
            bound = bound.max(c.symmetric_eigenvalues().max());
        }
        Ok(Some(bound))
    }

    /// Writes `K`, `M(m)`, `Q` and `f` in Matrix Market format into `dir`.
    pub fn export_matrix_market(&self, model: &Model, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let io = |e: std::io::Error| Error::InvalidInput(format!("matrix market: {e}"));
        sprs::io::write_matrix_market(dir.join("K.mtx"), &self.stiffness).map_err(io)?;
        sprs::io::write_matrix_market(dir.join("M.mtx"), &self.assemble_mass(model)?).map_err(io)?;
        sprs::io::write_matrix_market(dir.join("Q.mtx"), &self.observation).map_err(io)?;
        let f = csr_from_triplets(
            self.dof_count(),
            1,
            self.source.iter().enumerate().map(|(i, v)| (i, 0, *v)),
        );
        sprs::io::write_matrix_market(dir.join("f.mtx"), &f).map_err(io)?;
        Ok(())
    }

    /// `M(m) x`, without forming `M`.
    pub fn mass_apply(&self, model: &Model, x: &[f64]) -> Result<Vec<f64>> {
        Ok(spmv(&self.assemble_mass(model)?, x))
    }
}

/// Sparse `N x P` complex matrix stored by columns (one per cell).
#[derive(Debug, Clone)]
pub struct MassDerivative {
    rows: usize,
    columns: Vec<(Vec<usize>, Vec<Complex64>)>,
}

impl MassDerivative {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.columns.len())
    }

    pub fn column(&self, c: usize) -> (&[usize], &[Complex64]) {
        let (r, v) = &self.columns[c];
        (r, v)
    }

    /// `G v` for a real parameter vector.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.rows];
        for ((rows, vals), &vc) in self.columns.iter().zip(v) {
            if vc == 0.0 {
                continue;
            }
            for (&r, &g) in rows.iter().zip(vals) {
                out[r] += g * vc;
            }
        }
        out
    }

    /// `G^T z` (plain transpose).
    pub fn tr_mul(&self, z: &[Complex64]) -> Vec<Complex64> {
        self.columns
            .iter()
            .map(|(rows, vals)| rows.iter().zip(vals).map(|(&r, g)| g * z[r]).sum())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.columns
            .iter()
            .all(|(_, v)| v.iter().all(|z| z.norm() == 0.0))
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut d = DMatrix::zeros(self.rows, self.columns.len());
        for (c, (rows, vals)) in self.columns.iter().enumerate() {
            for (&r, &v) in rows.iter().zip(vals) {
                d[(r, c)] += v;
            }
        }
        d
    }
}

/// Source geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Footprint {
    /// Nodal load at a point, distributed with the P1 basis weights.
    Point { at: Vec<f64>, amplitude: f64 },
    /// Uniform source density over cells whose centroid lies in the box.
    Box {
        min: Vec<f64>,
        max: Vec<f64>,
        amplitude: f64,
    },
}

fn point2(v: &[f64]) -> [f64; 2] {
    [v.first().copied().unwrap_or(0.0), v.get(1).copied().unwrap_or(0.0)]
}

fn in_box(p: [f64; 2], lo: [f64; 2], hi: [f64; 2], dim: usize) -> bool {
    p[0] >= lo[0] && p[0] <= hi[0] && (dim == 1 || (p[1] >= lo[1] && p[1] <= hi[1]))
}

/// Integrates the source trace against the basis functions.
pub fn build_source(grid: &Grid, footprint: &Footprint) -> Result<Vec<f64>> {
    let mut f = vec![0.0; grid.dof_count];
    match footprint {
        Footprint::Point { at, amplitude } => {
            let p = point2(at);
            let (c, w) = grid
                .locate(p)
                .ok_or_else(|| Error::InvalidInput(format!("source point {p:?} outside domain")))?;
            for (&v, wv) in grid.cells[c].vertices.iter().zip(w) {
                if let Some(d) = grid.node_dof[v] {
                    f[d] += amplitude * wv;
                }
            }
        }
        Footprint::Box {
            min,
            max,
            amplitude,
        } => {
            let (lo, hi) = (point2(min), point2(max));
            let mut hit = false;
            for cell in &grid.cells {
                if !in_box(cell.centroid, lo, hi, grid.dimension) {
                    continue;
                }
                hit = true;
                let share = amplitude * cell.measure / cell.vertices.len() as f64;
                for &v in &cell.vertices {
                    if let Some(d) = grid.node_dof[v] {
                        f[d] += share;
                    }
                }
            }
            if !hit {
                return Err(Error::InvalidInput(
                    "source footprint contains no cell".into(),
                ));
            }
        }
    }
    Ok(f)
}

/// Regular receiver layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverGrid {
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ReceiverGrid {
    pub fn points(&self) -> Vec<[f64; 2]> {
        let o = point2(&self.origin);
        let s = point2(&self.spacing);
        let nx = self.counts.first().copied().unwrap_or(1);
        let ny = self.counts.get(1).copied().unwrap_or(1);
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push([o[0] + s[0] * i as f64, o[1] + s[1] * j as f64]);
            }
        }
        out
    }
}

/// Box-shaped conductivity anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub conductivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub x: [f64; 2],
    #[serde(default)]
    pub y: Option<[f64; 2]>,
    pub cells: Vec<usize>,
}

/// Problem description file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub domain: DomainSpec,
    /// Inverse permeability scaling the stiffness; defaults to `1 / mu0`.
    #[serde(default)]
    pub inv_mu: Option<f64>,
    pub background_conductivity: f64,
    #[serde(default)]
    pub receivers: Vec<Vec<f64>>,
    #[serde(default)]
    pub receiver_grid: Option<ReceiverGrid>,
    pub source: Footprint,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
}

impl ProblemSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is serializable")
    }

    pub fn grid(&self) -> Result<Grid> {
        match (self.domain.y, self.domain.cells.as_slice()) {
            (None, [n]) => Grid::interval(self.domain.x[0], self.domain.x[1], *n),
            (Some(y), [nx, ny]) => Grid::rectangle(self.domain.x, y, *nx, *ny),
            _ => Err(Error::InvalidInput(
                "domain needs `cells = [n]` (1-D) or `y` and `cells = [nx, ny]` (2-D)".into(),
            )),
        }
    }

    pub fn receiver_points(&self) -> Vec<[f64; 2]> {
        let mut pts: Vec<[f64; 2]> = self.receivers.iter().map(|r| point2(r)).collect();
        if let Some(g) = &self.receiver_grid {
            pts.extend(g.points());
        }
        pts
    }

    /// Background model with anomalies painted by cell centroid; the
    /// reference model is the background.
    pub fn true_model(&self, grid: &Grid) -> Model {
        let bg = self.background_conductivity.ln();
        let m = grid
            .cells
            .iter()
            .map(|cell| {
                self.anomalies
                    .iter()
                    .rev()
                    .find(|a| in_box(cell.centroid, point2(&a.min), point2(&a.max), grid.dimension))
                    .map_or(bg, |a| a.conductivity.ln())
            })
            .collect();
        Model {
            m,
            m_ref: vec![bg; grid.cell_count()],
        }
    }

    pub fn background_model(&self, grid: &Grid) -> Model {
        Model::uniform(grid.cell_count(), self.background_conductivity)
    }
}

fn p1_local(grid: &Grid, cell: &Cell) -> (Vec<f64>, Vec<f64>) {
    let h = cell.measure;
    match grid.dimension {
        1 => (
            vec![h / 3.0, h / 6.0, h / 6.0, h / 3.0],
            vec![1.0 / h, -1.0 / h, -1.0 / h, 1.0 / h],
        ),
        _ => {
            let v: Vec<[f64; 2]> = cell.vertices.iter().map(|&i| grid.nodes[i]).collect();
            let t = Matrix3::new(
                1.0, v[0][0], v[0][1], 1.0, v[1][0], v[1][1], 1.0, v[2][0], v[2][1],
            );
            // Rows of inv(t)^T hold the gradients of the barycentric coordinates.
            let inv = t.try_inverse().expect("non-degenerate triangle");
            let grad = |a: usize| [inv[(1, a)], inv[(2, a)]];
            let mut mass = vec![0.0; 9];
            let mut stiff = vec![0.0; 9];
            for a in 0..3 {
                for b in 0..3 {
                    mass[a * 3 + b] = h / 12.0 * if a == b { 2.0 } else { 1.0 };
                    let (ga, gb) = (grad(a), grad(b));
                    stiff[a * 3 + b] = h * (ga[0] * gb[0] + ga[1] * gb[1]);
                }
            }
            (mass, stiff)
        }
    }
}

/// Assembles `K`, the mass slices, `f` and `Q` for a problem description.
pub fn build_problem(spec: &ProblemSpec) -> Result<Problem> {
    let grid = spec.grid()?;
    if grid.cells.iter().any(|c| !(c.measure > 0.0)) {
        return Err(Error::InvalidInput("degenerate cell".into()));
    }
    let inv_mu = spec.inv_mu.unwrap_or(1.0 / MU0);
    let n = grid.dof_count;
    if n == 0 {
        return Err(Error::InvalidInput("grid has no interior unknowns".into()));
    }

    let mut k_trip = Vec::new();
    let mut cells = Vec::with_capacity(grid.cell_count());
    for cell in &grid.cells {
        let (mass, stiff) = p1_local(&grid, cell);
        let stiff: Vec<f64> = stiff.iter().map(|v| v * inv_mu).collect();
        let dofs: Vec<Option<usize>> = cell.vertices.iter().map(|&v| grid.node_dof[v]).collect();
        let k = dofs.len();
        for a in 0..k {
            for b in 0..k {
                if let (Some(ga), Some(gb)) = (dofs[a], dofs[b]) {
                    k_trip.push((ga, gb, stiff[a * k + b]));
                }
            }
        }
        cells.push(LocalMass {
            dofs,
            mass,
            stiffness: Some(stiff),
        });
    }
    let stiffness = csr_from_triplets(n, n, k_trip);

    let receivers = spec.receiver_points();
    let mut q_trip = Vec::new();
    for (r, &p) in receivers.iter().enumerate() {
        let (c, w) = grid
            .locate(p)
            .ok_or_else(|| Error::InvalidInput(format!("receiver {r} at {p:?} outside domain")))?;
        for (&v, wv) in grid.cells[c].vertices.iter().zip(w) {
            if let (Some(d), true) = (grid.node_dof[v], wv > 0.0) {
                q_trip.push((r, d, wv));
            }
        }
    }
    let observation = csr_from_triplets(receivers.len(), n, q_trip);
    let source = build_source(&grid, &spec.source)?;

    Ok(Problem {
        stiffness,
        cells,
        source,
        observation,
        grid: Some(grid),
        receivers,
    })
}
