//! Shared-pole rational approximation of the decaying exponential.
//!
//! A [`RationalApproximant`] represents the family
//!
//! ```text
//! r_j(x) = 2 Re sum_i alpha_ij / (x - xi_i)  ~  exp(-t_j x),   x in [x_min, x_max]
//! ```
//!
//! with one pole set `xi_i` (upper half-plane representatives of conjugate
//! pairs) shared by every time channel `t_j`. Substituting `x -> M^{-1} K`
//! turns each term into one shifted solve `(K - xi_i M)^{-1} f`, so the number
//! of solves depends on the pole count only.
//!
//! Poles are found by common-pole vector fitting: the responses of all
//! channels are stacked, a linearised weighted problem yields a correction
//! denominator `sigma(x) = 1 + sum c_k phi_k(x)`, and the zeros of `sigma`
//! become the next pole set. Residues are a plain linear least-squares solve
//! once the poles are fixed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing positive observation times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeChannels {
    times: Vec<f64>,
}

impl TimeChannels {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if let Some(bad) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "time channels must be finite and positive, got {bad}"
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "time channels must be strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    /// `count` times log-spaced between `10^lo` and `10^hi` (inclusive).
    pub fn log_spaced(log10_lo: f64, log10_hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Self::new(Vec::new());
        }
        if count == 1 {
            return Self::new(vec![10f64.powf(log10_lo)]);
        }
        let step = (log10_hi - log10_lo) / (count - 1) as f64;
        Self::new(
            (0..count)
                .map(|k| 10f64.powf(log10_lo + step * k as f64))
                .collect(),
        )
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_min(&self) -> Option<f64> {
        self.times.first().copied()
    }

    pub fn t_max(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

/// Settings for [`fit_common_pole`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Maximum number of pole relocation sweeps.
    pub max_iters: usize,
    /// Relative pole movement below which the iteration is converged.
    pub pole_tol: f64,
    /// Log-spaced training points on `[max(x_min, 1e-3 x_scale), x_max]`.
    pub log_points: usize,
    /// Linearly spaced training points on `[0, min(x_scale, x_max)]`.
    pub linear_points: usize,
    /// Fit relative instead of absolute error.
    pub relative_weighting: bool,
    /// Poles closer than `collision_tol * |xi|` are rejected.
    pub collision_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            pole_tol: 1e-8,
            log_points: 1000,
            linear_points: 1000,
            relative_weighting: false,
            collision_tol: 1e-10,
        }
    }
}

/// Work counters of a fit. Only `residue_solves` touches the channel
/// dimension; pole relocation acts on the stacked system once per sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitCounters {
    pub relocations: usize,
    pub residue_solves: usize,
}

/// Shared poles, per-channel residues and fit metadata.
#[derive(Debug, Clone)]
pub struct RationalApproximant {
    poles: Vec<Complex64>,
    /// `residues[j][i]` is the residue of pole `i` for channel `j`.
    residues: Vec<Vec<Complex64>>,
    interval: [f64; 2],
    fit_error: f64,
    channels: TimeChannels,
    pub converged: bool,
    pub iterations: usize,
    pub counters: FitCounters,
}

impl RationalApproximant {
    /// Builds an approximant from explicit poles and residues, checking the
    /// pole invariants. `fit_error` is left at zero.
    pub fn from_parts(
        poles: Vec<Complex64>,
        residues: Vec<Vec<Complex64>>,
        channels: TimeChannels,
        interval: [f64; 2],
    ) -> Result<Self> {
        if residues.len() != channels.len() {
            return Err(Error::DimensionMismatch {
                what: "residue rows vs channels",
                expected: channels.len(),
                got: residues.len(),
            });
        }
        if let Some(row) = residues.iter().find(|r| r.len() != poles.len()) {
            return Err(Error::DimensionMismatch {
                what: "residues per channel vs poles",
                expected: poles.len(),
                got: row.len(),
            });
        }
        check_poles(&poles, 0.0)?;
        Ok(Self {
            poles,
            residues,
            interval,
            fit_error: 0.0,
            channels,
            converged: true,
            iterations: 0,
            counters: FitCounters::default(),
        })
    }

    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    pub fn pole_count(&self) -> usize {
        self.poles.len()
    }

    pub fn residues(&self) -> &[Vec<Complex64>] {
        &self.residues
    }

    pub fn channel_residues(&self, j: usize) -> &[Complex64] {
        &self.residues[j]
    }

    pub fn channels(&self) -> &TimeChannels {
        &self.channels
    }

    pub fn interval(&self) -> [f64; 2] {
        self.interval
    }

    pub fn fit_error(&self) -> f64 {
        self.fit_error
    }

    /// `2 Re sum_i alpha_ij / (x - xi_i)`.
    pub fn eval_scalar(&self, x: f64, j: usize) -> f64 {
        eval_row(&self.poles, &self.residues[j], x)
    }

    /// Refits the residues for new channels while keeping the pole set.
    pub fn refit_residues(&self, channels: TimeChannels, cfg: &FitConfig) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidInput("no time channels".into()));
        }
        let scale = 1.0 / channels.t_min().unwrap();
        let grid = training_grid(self.interval, &channels, cfg);
        let scaled = ScaledProblem::new(&grid, &channels, scale, cfg.relative_weighting);
        let poles_s: Vec<Complex64> = self.poles.iter().map(|p| p / scale).collect();
        let mut counters = FitCounters::default();
        let res_s = scaled.residues(&poles_s, &mut counters);
        let mut out = scaled.unscale(&poles_s, &res_s, self.interval, channels);
        out.fit_error = out.max_error_on(&grid);
        out.counters = counters;
        Ok(out)
    }

    fn max_error_on(&self, grid: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (j, &t) in self.channels.times().iter().enumerate() {
            for &x in grid {
                let e = (self.eval_scalar(x, j) - (-t * x).exp()).abs();
                worst = worst.max(e);
            }
        }
        worst
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ApproximantFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ApproximantFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn eval_row(poles: &[Complex64], residues: &[Complex64], x: f64) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (p, a) in poles.iter().zip(residues) {
        acc += a / (x - p);
    }
    2.0 * acc.re
}

fn check_poles(poles: &[Complex64], collision_tol: f64) -> Result<()> {
    for (i, p) in poles.iter().enumerate() {
        if !(p.im > 0.0) || !p.re.is_finite() || !p.im.is_finite() {
            return Err(Error::InvalidInput(format!(
                "pole {i} = {p} is not an upper half-plane representative"
            )));
        }
    }
    for i in 0..poles.len() {
        for k in i + 1..poles.len() {
            let d = (poles[i] - poles[k]).norm();
            if d <= collision_tol * poles[i].norm().max(poles[k].norm()) {
                return Err(Error::PoleCollision(i, k));
            }
        }
    }
    Ok(())
}

/// On-disk layout of an approximant.
#[derive(Debug, Serialize, Deserialize)]
struct ApproximantFile {
    times: Vec<f64>,
    poles: Vec<[f64; 2]>,
    residues: Vec<Vec<[f64; 2]>>,
    interval: [f64; 2],
    fit_error: f64,
}

impl From<&RationalApproximant> for ApproximantFile {
    fn from(a: &RationalApproximant) -> Self {
        let pair = |z: &Complex64| [z.re, z.im];
        Self {
            times: a.channels.times().to_vec(),
            poles: a.poles.iter().map(pair).collect(),
            residues: a
                .residues
                .iter()
                .map(|row| row.iter().map(pair).collect())
                .collect(),
            interval: a.interval,
            fit_error: a.fit_error,
        }
    }
}

impl TryFrom<ApproximantFile> for RationalApproximant {
    type Error = Error;

    fn try_from(f: ApproximantFile) -> Result<Self> {
        let z = |p: &[f64; 2]| Complex64::new(p[0], p[1]);
        let mut a = RationalApproximant::from_parts(
            f.poles.iter().map(z).collect(),
            f.residues
                .iter()
                .map(|row| row.iter().map(z).collect())
                .collect(),
            TimeChannels::new(f.times)?,
            f.interval,
        )?;
        a.fit_error = f.fit_error;
        Ok(a)
    }
}

/// Lower end of the log-spaced sampling range. Starting at `1e-3 / t_max`
/// keeps points inside the decay length of the slowest channel.
fn log_floor(x_min: f64, x_max: f64, channels: &TimeChannels) -> f64 {
    let t_max = channels.t_max().unwrap_or(1.0);
    x_min.max(1e-3 / t_max).min(x_max)
}

/// Training grid: log-spaced points covering the slow tail plus linear points
/// resolving the fast decay near the origin (`x_scale = 1 / t_min`). Always
/// contains `x = 0`.
pub fn training_grid(interval: [f64; 2], channels: &TimeChannels, cfg: &FitConfig) -> Vec<f64> {
    let [x_min, x_max] = interval;
    let x_scale = 1.0 / channels.t_min().unwrap_or(1.0);
    let mut grid = Vec::with_capacity(cfg.log_points + cfg.linear_points + 2);
    grid.push(0.0);
    let lo = log_floor(x_min, x_max, channels);
    if cfg.log_points > 0 && lo > 0.0 {
        let (a, b) = (lo.ln(), x_max.ln());
        let n = cfg.log_points.max(2);
        grid.extend((0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()));
    }
    let hi = x_scale.min(x_max);
    if cfg.linear_points > 0 {
        let n = cfg.linear_points.max(2);
        grid.extend((0..n).map(|k| x_min + (hi - x_min) * k as f64 / (n - 1) as f64));
    }
    grid.push(x_max);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Fitting data expressed in the dimensionless variable `s = x / x_scale`.
struct ScaledProblem {
    s: Vec<f64>,
    /// `targets[j][k] = exp(-t_j x_k)`.
    targets: Vec<Vec<f64>>,
    /// Row weights per channel.
    weights: Option<Vec<Vec<f64>>>,
    scale: f64,
}

impl ScaledProblem {
    fn new(grid: &[f64], channels: &TimeChannels, scale: f64, relative: bool) -> Self {
        let s: Vec<f64> = grid.iter().map(|x| x / scale).collect();
        let targets: Vec<Vec<f64>> = channels
            .times()
            .iter()
            .map(|t| grid.iter().map(|x| (-t * x).exp()).collect())
            .collect();
        let weights = relative.then(|| {
            targets
                .iter()
                .map(|row| row.iter().map(|f| 1.0 / f.max(1e-12)).collect())
                .collect()
        });
        Self {
            s,
            targets,
            weights,
            scale,
        }
    }

    /// Real basis: for every pole two columns, `2 Re 1/(s-p)` and `-2 Im 1/(s-p)`.
    fn basis(&self, poles: &[Complex64]) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.s.len(), 2 * poles.len());
        for (i, p) in poles.iter().enumerate() {
            for (k, &s) in self.s.iter().enumerate() {
                let r = 1.0 / (s - p);
                phi[(k, 2 * i)] = 2.0 * r.re;
                phi[(k, 2 * i + 1)] = -2.0 * r.im;
            }
        }
        phi
    }

    fn row_weights(&self, j: usize) -> Option<&[f64]> {
        self.weights.as_ref().map(|w| w[j].as_slice())
    }

    /// Least-squares residues for fixed poles, one row per channel.
    fn residues(&self, poles: &[Complex64], counters: &mut FitCounters) -> Vec<Vec<Complex64>> {
        let phi = self.basis(poles);
        let n_ch = self.targets.len();
        let coeffs: Vec<DVector<f64>> = match &self.weights {
            None => {
                // One factorization serves every channel.
                counters.residue_solves += 1;
                let mut rhs = DMatrix::zeros(self.s.len(), n_ch);
                for (j, row) in self.targets.iter().enumerate() {
                    rhs.set_column(j, &DVector::from_column_slice(row));
                }
                let sol = scaled_lstsq(phi, &rhs);
                (0..n_ch).map(|j| sol.column(j).into_owned()).collect()
            }
            Some(_) => (0..n_ch)
                .map(|j| {
                    counters.residue_solves += 1;
                    let w = self.row_weights(j).unwrap();
                    let mut a = phi.clone();
                    let mut b = DMatrix::zeros(self.s.len(), 1);
                    for k in 0..self.s.len() {
                        a.row_mut(k).scale_mut(w[k]);
                        b[(k, 0)] = w[k] * self.targets[j][k];
                    }
                    scaled_lstsq(a, &b).column(0).into_owned()
                })
                .collect(),
        };
        coeffs
            .iter()
            .map(|c| {
                (0..poles.len())
                    .map(|i| Complex64::new(c[2 * i], c[2 * i + 1]))
                    .collect()
            })
            .collect()
    }

    /// One Sanathanan–Koerner sweep: returns the zeros of the fitted
    /// correction denominator as the new (unprocessed) pole set.
    fn relocate(&self, poles: &[Complex64], counters: &mut FitCounters) -> Vec<Complex64> {
        counters.relocations += 1;
        let n = 2 * poles.len();
        let rows = self.s.len();
        let phi = self.basis(poles);
        debug_assert!(rows >= n);
        let norms: Vec<f64> = (0..n)
            .map(|c| phi.column(c).norm().max(f64::MIN_POSITIVE))
            .collect();
        let mut phi_hat = phi;
        for (c, nrm) in norms.iter().enumerate() {
            phi_hat.column_mut(c).unscale_mut(*nrm);
        }
        let shared = self.weights.is_none().then(|| orthonormal_range(&phi_hat));

        // Each channel's projected block is compressed to an n x n triangle
        // before stacking, so the stacked system has n_ch * n rows.
        let n_ch = self.targets.len();
        let mut big = DMatrix::zeros(n * n_ch, n);
        let mut rhs = DMatrix::zeros(n * n_ch, 1);
        for j in 0..n_ch {
            let f = &self.targets[j];
            let w = self.row_weights(j);
            let wk = |k: usize| w.map_or(1.0, |w| w[k]);
            let local;
            let q = match &shared {
                Some(q) => q,
                None => {
                    let mut a = phi_hat.clone();
                    for k in 0..rows {
                        a.row_mut(k).scale_mut(wk(k));
                    }
                    local = orthonormal_range(&a);
                    &local
                }
            };
            // B = -diag(w f) phi_hat, projected onto the complement of range(w phi).
            let mut b = phi_hat.clone();
            let mut y = DMatrix::zeros(rows, 1);
            for k in 0..rows {
                b.row_mut(k).scale_mut(-wk(k) * f[k]);
                y[(k, 0)] = wk(k) * f[k];
            }
            let qtb = q.tr_mul(&b);
            b -= q * qtb;
            let qty = q.tr_mul(&y);
            y -= q * qty;
            let qr = b.qr();
            qr.q_tr_mul(&mut y);
            big.rows_mut(j * n, n).copy_from(&qr.r());
            rhs.rows_mut(j * n, n).copy_from(&y.rows(0, n));
        }
        let c_hat = scaled_lstsq(big, &rhs);
        let c_tilde: Vec<f64> = (0..n).map(|k| c_hat[(k, 0)] / norms[k]).collect();

        // Real state-space form of sigma: zeros = eig(A - b c^T).
        let mut h = DMatrix::zeros(n, n);
        for (i, p) in poles.iter().enumerate() {
            let (r, c) = (2 * i, 2 * i);
            h[(r, c)] = p.re;
            h[(r, c + 1)] = p.im;
            h[(r + 1, c)] = -p.im;
            h[(r + 1, c + 1)] = p.re;
        }
        for r in (0..n).step_by(2) {
            for c in 0..n {
                h[(r, c)] -= 2.0 * c_tilde[c];
            }
        }
        h.complex_eigenvalues().iter().copied().collect()
    }

    fn unscale(
        &self,
        poles_s: &[Complex64],
        residues_s: &[Vec<Complex64>],
        interval: [f64; 2],
        channels: TimeChannels,
    ) -> RationalApproximant {
        RationalApproximant {
            poles: poles_s.iter().map(|p| p * self.scale).collect(),
            residues: residues_s
                .iter()
                .map(|row| row.iter().map(|a| a * self.scale).collect())
                .collect(),
            interval,
            fit_error: 0.0,
            channels,
            converged: false,
            iterations: 0,
            counters: FitCounters::default(),
        }
    }
}

/// Least squares `a x = b` with column equilibration. Tall systems are first
/// compressed by a Householder QR; the square factor is solved by a
/// truncated SVD.
fn scaled_lstsq(mut a: DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let norms: Vec<f64> = a
        .column_iter()
        .map(|c| c.norm().max(f64::MIN_POSITIVE))
        .collect();
    for (c, nrm) in norms.iter().enumerate() {
        a.column_mut(c).unscale_mut(*nrm);
    }
    let n = a.ncols();
    let (a, b) = if a.nrows() > 2 * n {
        let qr = a.qr();
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        (qr.r(), qtb.rows(0, n).into_owned())
    } else {
        (a, b.clone())
    };
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let mut x = svd
        .solve(&b, 1e-14 * smax)
        .expect("SVD computed with both factors");
    for (r, nrm) in norms.iter().enumerate() {
        x.row_mut(r).unscale_mut(*nrm);
    }
    x
}

/// Orthonormal basis containing the range of `a`.
fn orthonormal_range(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

/// Maps raw eigenvalues of the relocation step to an admissible set of `m`
/// upper half-plane poles. Real eigenvalues are merged pairwise into one
/// complex pair; anything closer to the real axis than `eps |p|` is lifted.
fn admissible_poles(raw: &[Complex64], m: usize) -> Vec<Complex64> {
    const EPS: f64 = 1e-3;
    let real_tol = 1e-10;
    let mut upper: Vec<Complex64> = Vec::with_capacity(m);
    let mut real: Vec<f64> = Vec::new();
    for z in raw {
        if z.im.abs() <= real_tol * z.norm().max(1e-300) {
            real.push(z.re);
        } else if z.im > 0.0 {
            upper.push(*z);
        }
    }
    real.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in real.chunks(2) {
        match pair {
            [a, b] => upper.push(Complex64::new(0.5 * (a + b), 0.5 * (b - a).abs())),
            [a] => upper.push(Complex64::new(*a, 0.0)),
            _ => unreachable!(),
        }
    }
    upper.truncate(m);
    for p in upper.iter_mut() {
        let floor = EPS * p.norm().max(1e-12);
        if p.im < floor {
            p.im = p.im.abs() + floor;
        }
    }
    upper.sort_by(|a, b| a.im.partial_cmp(&b.im).unwrap().then(a.re.partial_cmp(&b.re).unwrap()));
    upper
}

/// Initial poles in scaled units: imaginary parts log-spaced over
/// `[t_min/t_max, 1]`, real parts `-Im/100`.
fn initial_poles(m: usize, ratio: f64) -> Vec<Complex64> {
    let (a, b) = (ratio.ln(), 0.0f64);
    (0..m)
        .map(|k| {
            let im = if m == 1 {
                1.0
            } else {
                (a + (b - a) * k as f64 / (m - 1) as f64).exp()
            };
            Complex64::new(-im / 100.0, im)
        })
        .collect()
}

fn max_relative_shift(old: &[Complex64], new: &[Complex64]) -> f64 {
    if old.len() != new.len() {
        return f64::INFINITY;
    }
    new.iter()
        .map(|p| {
            old.iter()
                .map(|q| (p - q).norm() / q.norm().max(1e-300))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Fits `m` shared poles and per-channel residues to `exp(-t_j x)` on
/// `interval`. A run that hits `max_iters` returns its best iterate with
/// `converged == false`.
pub fn fit_common_pole(
    channels: &TimeChannels,
    interval: [f64; 2],
    pole_count: usize,
    cfg: &FitConfig,
) -> Result<RationalApproximant> {
    if pole_count == 0 {
        return Err(Error::InvalidInput("pole count must be at least 1".into()));
    }
    if channels.is_empty() {
        return Err(Error::InvalidInput("no time channels".into()));
    }
    let [x_min, x_max] = interval;
    if !(x_min >= 0.0 && x_max > x_min && x_max.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "invalid spectral interval [{x_min}, {x_max}]"
        )));
    }
    let (t_min, t_max) = (channels.t_min().unwrap(), channels.t_max().unwrap());
    let scale = 1.0 / t_min;
    let grid = training_grid(interval, channels, cfg);
    let prob = ScaledProblem::new(&grid, channels, scale, cfg.relative_weighting);
    let mut counters = FitCounters::default();

    let score = |poles: &[Complex64], counters: &mut FitCounters| {
        let res = prob.residues(poles, counters);
        let mut a = prob.unscale(poles, &res, interval, channels.clone());
        a.fit_error = a.max_error_on(&grid);
        a
    };

    let mut poles = initial_poles(pole_count, t_min / t_max);
    let mut best = score(&poles, &mut counters);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let raw = prob.relocate(&poles, &mut counters);
        let next = admissible_poles(&raw, pole_count);
        if next.len() != pole_count || next.iter().any(|p| !p.re.is_finite() || !p.im.is_finite())
        {
            break;
        }
        let shift = max_relative_shift(&poles, &next);
        poles = next;
        let cand = score(&poles, &mut counters);
        if cand.fit_error < best.fit_error {
            best = cand;
        }
        if shift < cfg.pole_tol {
            converged = true;
            break;
        }
    }
    check_poles(&best.poles, cfg.collision_tol)?;
    best.converged = converged;
    best.iterations = iterations;
    best.counters = counters;
    Ok(best)
}

/// Per-channel accuracy on an audit grid.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelError {
    pub time: f64,
    pub max_abs: f64,
    /// Largest `|err| / exp(-t x)` over points where the exponential exceeds
    /// `1e-12`; `None` if there is no such point.
    pub max_rel: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub grid_size: usize,
    pub channels: Vec<ChannelError>,
    pub max_abs: f64,
}

/// Radical-inverse (van der Corput) sequence in base 2; prefixes of the
/// sequence are nested, so larger audit grids contain smaller ones.
fn van_der_corput(mut k: u64) -> f64 {
    let mut x = 0.0;
    let mut base = 0.5;
    while k > 0 {
        if k & 1 == 1 {
            x += base;
        }
        k >>= 1;
        base *= 0.5;
    }
    x
}

/// Audit grid with `grid_size` interior points plus both end points and `0`.
pub fn audit_grid(interval: [f64; 2], channels: &TimeChannels, grid_size: usize) -> Vec<f64> {
    let [x_min, x_max] = interval;
    let x_scale = 1.0 / channels.t_min().unwrap_or(1.0);
    let n_log = grid_size / 2;
    let n_lin = grid_size - n_log;
    let lo = log_floor(x_min, x_max, channels).max(f64::MIN_POSITIVE);
    let hi = x_scale.min(x_max);
    let mut grid = vec![0.0, x_min, x_max];
    grid.extend((0..n_log).map(|k| {
        let u = van_der_corput(k as u64 + 1);
        (lo.ln() + u * (x_max.ln() - lo.ln())).exp()
    }));
    grid.extend((0..n_lin).map(|k| x_min + van_der_corput(k as u64 + 1) * (hi - x_min)));
    grid
}

/// Evaluates the approximant against the exact exponentials on a refined grid.
pub fn validate_fit(approx: &RationalApproximant, grid_size: usize) -> Result<FitReport> {
    if grid_size < 10 {
        return Err(Error::InvalidInput("grid_size must be at least 10".into()));
    }
    if approx.channels.is_empty() {
        return Ok(FitReport {
            grid_size,
            channels: Vec::new(),
            max_abs: 0.0,
        });
    }
    let grid = audit_grid(approx.interval, &approx.channels, grid_size);
    let channels: Vec<ChannelError> = approx
        .channels
        .times()
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mut max_abs = 0.0f64;
            let mut max_rel: Option<f64> = None;
            for &x in &grid {
                let exact = (-t * x).exp();
                let err = (approx.eval_scalar(x, j) - exact).abs();
                max_abs = max_abs.max(err);
                if exact > 1e-12 {
                    let rel = err / exact;
                    max_rel = Some(max_rel.map_or(rel, |m| m.max(rel)));
                }
            }
            ChannelError {
                time: t,
                max_abs,
                max_rel,
            }
        })
        .collect();
    let max_abs = channels.iter().map(|c| c.max_abs).fold(0.0, f64::max);
    Ok(FitReport {
        grid_size,
        channels,
        max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn light_cfg() -> FitConfig {
        FitConfig {
            log_points: 300,
            linear_points: 300,
            ..FitConfig::default()
        }
    }

    fn small_fit() -> RationalApproximant {
        let ch = TimeChannels::log_spaced(-6.0, -3.0, 8).unwrap();
        fit_common_pole(&ch, [0.0, 1e9], 12, &light_cfg()).unwrap()
    }

    fn single(pole: Complex64) -> RationalApproximant {
        RationalApproximant::from_parts(
            vec![pole],
            vec![vec![Complex64::new(1.0, 0.0)]],
            TimeChannels::new(vec![1.0]).unwrap(),
            [0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn eval_scalar_hand_values() {
        assert_eq!(single(Complex64::new(0.0, 1.0)).eval_scalar(0.0, 0), 0.0);
        assert_eq!(single(Complex64::new(1.0, 1.0)).eval_scalar(1.0, 0), 0.0);
        // 2 Re(1/(2 - i)) = 2 * 2/5
        let v = single(Complex64::new(0.0, 1.0)).eval_scalar(2.0, 0);
        assert!((v - 0.8).abs() < 1e-15);
    }

    #[test]
    fn time_channels_validation() {
        assert!(TimeChannels::new(vec![1e-6, 1e-5]).is_ok());
        assert!(TimeChannels::new(vec![1e-5, 1e-6]).is_err());
        assert!(TimeChannels::new(vec![1e-5, 1e-5]).is_err());
        assert!(TimeChannels::new(vec![0.0]).is_err());
        assert!(TimeChannels::new(vec![-1.0]).is_err());
        let ch = TimeChannels::log_spaced(-6.0, -3.0, 31).unwrap();
        assert_eq!(ch.len(), 31);
        assert!((ch.t_min().unwrap() - 1e-6).abs() < 1e-20);
        assert!((ch.t_max().unwrap() - 1e-3).abs() < 1e-17);
    }

    #[test]
    fn from_parts_rejects_lower_half_plane_and_collisions() {
        let ch = TimeChannels::new(vec![1.0]).unwrap();
        let one = Complex64::new(1.0, 0.0);
        for bad in [Complex64::new(1.0, 0.0), Complex64::new(1.0, -1.0)] {
            assert!(RationalApproximant::from_parts(vec![bad], vec![vec![one]], ch.clone(), [0.0, 1.0])
                .is_err());
        }
        let p = Complex64::new(-1.0, 2.0);
        let r = RationalApproximant::from_parts(vec![p, p], vec![vec![one, one]], ch, [0.0, 1.0]);
        assert!(matches!(r, Err(Error::PoleCollision(0, 1))));
    }

    #[test]
    fn fit_rejects_bad_input() {
        let ch = TimeChannels::new(vec![1e-3]).unwrap();
        let cfg = light_cfg();
        assert!(fit_common_pole(&ch, [0.0, 1e3], 0, &cfg).is_err());
        assert!(fit_common_pole(&ch, [1.0, 1.0], 2, &cfg).is_err());
        assert!(fit_common_pole(&ch, [-1.0, 1.0], 2, &cfg).is_err());
        let empty = TimeChannels::new(vec![]).unwrap();
        assert!(fit_common_pole(&empty, [0.0, 1.0], 2, &cfg).is_err());
    }

    #[test]
    fn near_constant_single_pole() {
        let t1 = 1e-3;
        let ch = TimeChannels::new(vec![t1]).unwrap();
        let a = fit_common_pole(&ch, [0.0, 1e-6 / t1], 1, &light_cfg()).unwrap();
        assert!(a.fit_error() < 1e-3, "{}", a.fit_error());
        assert!(a.poles()[0].im > 0.0);
    }

    #[test]
    fn fitted_poles_are_admissible() {
        let a = small_fit();
        assert_eq!(a.pole_count(), 12);
        for (i, p) in a.poles().iter().enumerate() {
            assert!(p.im > 0.0);
            for q in &a.poles()[i + 1..] {
                assert!((p - q).norm() > 0.0);
            }
        }
        assert!(a.fit_error() < 1e-4, "{}", a.fit_error());
    }

    #[test]
    fn value_at_zero_is_one() {
        let a = small_fit();
        for j in 0..a.channels().len() {
            assert!((a.eval_scalar(0.0, j) - 1.0).abs() <= a.fit_error());
        }
    }

    #[test]
    fn random_points_match_exponential() {
        let a = small_fit();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [lo, hi] = a.interval();
        let xs = 1.0 / a.channels().t_min().unwrap();
        for _ in 0..2000 {
            // Half the samples in the fast-decay region, half log-uniform.
            let x = if rng.random_bool(0.5) {
                rng.random_range(lo..xs)
            } else {
                (rng.random_range(xs.ln()..hi.ln())).exp()
            };
            let j = rng.random_range(0..a.channels().len());
            let t = a.channels().times()[j];
            let err = (a.eval_scalar(x, j) - (-t * x).exp()).abs();
            assert!(err <= a.fit_error(), "x={x} j={j} err={err} fit={}", a.fit_error());
        }
    }

    #[test]
    fn validate_fit_bounds_and_nesting() {
        let a = small_fit();
        let r10 = validate_fit(&a, 10).unwrap();
        let r1k = validate_fit(&a, 1000).unwrap();
        let r10k = validate_fit(&a, 10000).unwrap();
        assert!(r10k.max_abs <= 2.0 * a.fit_error());
        assert!(r10.max_abs <= r1k.max_abs && r1k.max_abs <= r10k.max_abs);
        assert_eq!(r10k.channels.len(), 8);
        assert!(r10k.channels.iter().all(|c| c.max_rel.is_some()));
        assert!(validate_fit(&a, 9).is_err());
    }

    #[test]
    fn validate_fit_without_channels_is_empty() {
        let a = RationalApproximant::from_parts(
            vec![Complex64::new(-1.0, 1.0)],
            vec![],
            TimeChannels::new(vec![]).unwrap(),
            [0.0, 1.0],
        )
        .unwrap();
        let r = validate_fit(&a, 50).unwrap();
        assert!(r.channels.is_empty());
        assert_eq!(r.max_abs, 0.0);
    }

    #[test]
    fn audit_grid_contains_end_points_and_is_nested() {
        let ch = TimeChannels::log_spaced(-6.0, -3.0, 4).unwrap();
        let g = audit_grid([0.0, 1e9], &ch, 20);
        assert!(g.contains(&0.0) && g.contains(&1e9));
        let big = audit_grid([0.0, 1e9], &ch, 40);
        // Nested in both halves: each point of the 20-point grid appears in the 40-point grid.
        for x in &g {
            assert!(big.contains(x), "{x}");
        }
    }

    #[test]
    fn refit_residues_costs_one_solve_for_any_channel_count() {
        let a = small_fit();
        let cfg = light_cfg();
        let c16 = TimeChannels::log_spaced(-6.0, -3.0, 16).unwrap();
        let c32 = TimeChannels::log_spaced(-6.0, -3.0, 32).unwrap();
        let r16 = a.refit_residues(c16, &cfg).unwrap();
        let r32 = a.refit_residues(c32, &cfg).unwrap();
        assert_eq!(r16.counters, r32.counters);
        assert_eq!(r16.counters.relocations, 0);
        assert_eq!(r16.counters.residue_solves, 1);
        assert_eq!(r16.poles(), a.poles());
        assert_eq!(r32.poles(), a.poles());
        assert!(r32.fit_error() < 10.0 * a.fit_error());
    }

    #[test]
    fn relocation_count_independent_of_channel_count() {
        let cfg = FitConfig {
            max_iters: 5,
            pole_tol: 0.0,
            ..light_cfg()
        };
        let a = fit_common_pole(&TimeChannels::log_spaced(-6.0, -3.0, 4).unwrap(), [0.0, 1e9], 6, &cfg)
            .unwrap();
        let b = fit_common_pole(&TimeChannels::log_spaced(-6.0, -3.0, 8).unwrap(), [0.0, 1e9], 6, &cfg)
            .unwrap();
        assert_eq!(a.counters, b.counters);
        assert_eq!(a.counters.relocations, 5);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let a = small_fit();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        a.save(&path).unwrap();
        let b = RationalApproximant::load(&path).unwrap();
        assert_eq!(a.poles(), b.poles());
        assert_eq!(a.residues(), b.residues());
        assert_eq!(a.channels(), b.channels());
        assert_eq!(a.interval(), b.interval());
        assert_eq!(a.fit_error(), b.fit_error());
        let v: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        for key in ["times", "poles", "residues", "interval", "fit_error"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn admissible_poles_lifts_real_axis() {
        let raw = [
            Complex64::new(3.0, 0.0),
            Complex64::new(5.0, 0.0),
            Complex64::new(-1.0, 2.0),
            Complex64::new(-1.0, -2.0),
            Complex64::new(2.0, 1e-9),
            Complex64::new(2.0, -1e-9),
        ];
        let p = admissible_poles(&raw, 3);
        assert_eq!(p.len(), 3);
        for z in &p {
            assert!(z.im >= 1e-3 * z.norm() * 0.999, "{z}");
        }
    }

    proptest! {
        #[test]
        fn conjugate_pair_sum_is_real(
            poles in prop::collection::vec((-10.0f64..10.0, 0.01f64..10.0), 1..6),
            res in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 6),
            x in 0.0f64..20.0,
        ) {
            let poles: Vec<Complex64> = poles.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
            let res: Vec<Complex64> = res[..poles.len()].iter().map(|&(a, b)| Complex64::new(a, b)).collect();
            let mut full = Complex64::new(0.0, 0.0);
            for (p, a) in poles.iter().zip(&res) {
                full += a / (x - p) + a.conj() / (x - p.conj());
            }
            let v = eval_row(&poles, &res, x);
            prop_assert!(v.is_finite());
            prop_assert!(full.im.abs() <= 1e-12 * full.norm().max(1.0));
            prop_assert!((full.re - v).abs() <= 1e-12 * v.abs().max(1.0));
        }

        #[test]
        fn time_channels_accept_exactly_increasing_positive(
            ts in prop::collection::vec(-1.0f64..1.0, 0..8),
        ) {
            let ok = ts.iter().all(|t| *t > 0.0) && ts.windows(2).all(|w| w[0] < w[1]);
            prop_assert_eq!(TimeChannels::new(ts).is_ok(), ok);
        }

        #[test]
        fn audit_max_is_monotone_in_grid_size(a in 10usize..400, b in 10usize..400) {
            let fit = single(Complex64::new(-0.5, 1.5));
            let (lo, hi) = (a.min(b), a.max(b));
            let e_lo = validate_fit(&fit, lo).unwrap().max_abs;
            let e_hi = validate_fit(&fit, hi).unwrap().max_abs;
            prop_assert!(e_lo <= e_hi);
        }
    }
}
