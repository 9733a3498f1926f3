//! Factorization cache for the shifted systems `A_i = K - xi_i M(m)`.
//!
//! Every pole gets its own direct factorization. Work is split over a fixed
//! number of workers, each owning a contiguous block of poles; results are
//! written into pole-indexed slots, so the output never depends on the
//! worker count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2_c, spmv_c, spmv_t_c, BandLu, DenseLu};
use crate::mesh_assembly::{Model, ModelVersion, Problem};
use crate::rba::RationalApproximant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Banded LU unless the band is wider than the matrix is sparse.
    Auto,
    Banded,
    /// Dense LU; limited to `DENSE_LIMIT` unknowns.
    Dense,
}

pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub workers: usize,
    pub backend: Backend,
    /// Check `|A g - rhs| / |rhs|` after every solve.
    pub residual_check: bool,
    pub residual_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            backend: Backend::Auto,
            residual_check: false,
            residual_tol: 1e-8,
        }
    }
}

/// Snapshot of the cache counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveCounters {
    pub factorizations: u64,
    pub solves: u64,
    pub transpose_solves: u64,
}

impl std::ops::Sub for SolveCounters {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            factorizations: self.factorizations - o.factorizations,
            solves: self.solves - o.solves,
            transpose_solves: self.transpose_solves - o.transpose_solves,
        }
    }
}

#[derive(Debug)]
enum Factor {
    Banded(BandLu<Complex64>),
    Dense(DenseLu),
}

impl Factor {
    fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        match self {
            Factor::Banded(f) => f.solve(b),
            Factor::Dense(f) => f.solve(b),
        }
    }

    fn solve_transpose(&self, b: &[Complex64]) -> Vec<Complex64> {
        match self {
            Factor::Banded(f) => f.solve_transpose(b),
            Factor::Dense(f) => f.solve_transpose(b),
        }
    }
}

#[derive(Debug)]
struct Entry {
    version: ModelVersion,
    pole: Complex64,
    factor: Factor,
}

/// Merged sparsity of `K` and `M(m)`: `(row, col, k, m)` per nonzero.
struct Pencil {
    n: usize,
    kl: usize,
    ku: usize,
    entries: Vec<(usize, usize, f64, f64)>,
}

impl Pencil {
    fn new(problem: &Problem, model: &Model) -> Result<Self> {
        let n = problem.dof_count();
        let mut map = std::collections::BTreeMap::<(usize, usize), (f64, f64)>::new();
        for (v, (r, c)) in problem.stiffness.iter() {
            map.entry((r, c)).or_default().0 += *v;
        }
        for (r, c, v) in problem.mass_triplets(model)? {
            map.entry((r, c)).or_default().1 += v;
        }
        let (mut kl, mut ku) = (0, 0);
        let entries: Vec<_> = map
            .into_iter()
            .map(|((r, c), (k, m))| {
                kl = kl.max(r.saturating_sub(c));
                ku = ku.max(c.saturating_sub(r));
                (r, c, k, m)
            })
            .collect();
        Ok(Self { n, kl, ku, entries })
    }

    fn use_dense(&self, backend: Backend) -> Result<bool> {
        let dense = match backend {
            Backend::Dense => true,
            Backend::Banded => false,
            Backend::Auto => 2 * self.kl + self.ku + 1 >= self.n,
        };
        if dense && self.n > DENSE_LIMIT {
            return Err(Error::DenseLimit {
                n: self.n,
                limit: DENSE_LIMIT,
            });
        }
        Ok(dense)
    }

    fn factor(&self, xi: Complex64, dense: bool) -> Result<Factor> {
        let vals = self
            .entries
            .iter()
            .map(|&(r, c, k, m)| (r, c, Complex64::new(k, 0.0) - xi * m));
        if dense {
            let mut a = DMatrix::zeros(self.n, self.n);
            for (r, c, v) in vals {
                a[(r, c)] += v;
            }
            Ok(Factor::Dense(DenseLu::factor(a)?))
        } else {
            Ok(Factor::Banded(BandLu::factor(self.n, self.kl, self.ku, vals)?))
        }
    }
}

/// Per-pole factorizations of `K - xi_i M(m)` for one model at a time.
#[derive(Debug)]
pub struct ShiftedFactorCache {
    config: SolverConfig,
    entries: Vec<Option<Entry>>,
    /// Exact model bits of the cached factorizations.
    current: Option<(ModelVersion, Vec<f64>)>,
    factorizations: AtomicU64,
    solves: AtomicU64,
    transpose_solves: AtomicU64,
}

fn chunk_len(items: usize, workers: usize) -> usize {
    items.div_ceil(workers.max(1)).max(1)
}

impl ShiftedFactorCache {
    pub fn new(config: SolverConfig) -> Self {
        Self {
            config,
            entries: Vec::new(),
            current: None,
            factorizations: AtomicU64::new(0),
            solves: AtomicU64::new(0),
            transpose_solves: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.config.workers = workers.max(1);
    }

    pub fn counters(&self) -> SolveCounters {
        SolveCounters {
            factorizations: self.factorizations.load(Ordering::Relaxed),
            solves: self.solves.load(Ordering::Relaxed),
            transpose_solves: self.transpose_solves.load(Ordering::Relaxed),
        }
    }

    pub fn current_version(&self) -> Option<ModelVersion> {
        self.current.as_ref().map(|(v, _)| *v)
    }

    pub fn pole_count(&self) -> usize {
        self.entries.len()
    }

    /// True when the cached factorizations belong to exactly this model.
    pub fn is_current(&self, model: &Model) -> bool {
        matches!(&self.current, Some((v, m)) if *v == model.version() && m.len() == model.m.len()
            && m.iter().zip(&model.m).all(|(a, b)| a.to_bits() == b.to_bits()))
    }

    /// Makes sure every pole of `approx` has a factorization for `model`.
    /// Poles already factorized for this exact model are kept.
    pub fn factorize(
        &mut self,
        problem: &Problem,
        model: &Model,
        approx: &RationalApproximant,
    ) -> Result<()> {
        let poles = approx.poles();
        if !self.is_current(model) {
            self.entries.clear();
            self.current = None;
        }
        self.entries.resize_with(poles.len(), || None);
        let version = model.version();
        let stale: Vec<bool> = self
            .entries
            .iter()
            .zip(poles)
            .map(|(e, p)| !matches!(e, Some(e) if e.version == version && e.pole == *p))
            .collect();
        if !stale.iter().any(|s| *s) {
            self.current = Some((version, model.m.clone()));
            return Ok(());
        }
        let pencil = Pencil::new(problem, model)?;
        let dense = pencil.use_dense(self.config.backend)?;
        let size = chunk_len(poles.len(), self.config.workers);
        let counter = &self.factorizations;
        let results: Vec<Result<()>> = thread::scope(|s| {
            let handles: Vec<_> = self
                .entries
                .chunks_mut(size)
                .zip(poles.chunks(size))
                .zip(stale.chunks(size))
                .map(|((slots, ps), st)| {
                    let pencil = &pencil;
                    s.spawn(move || -> Result<()> {
                        for ((slot, &xi), &todo) in slots.iter_mut().zip(ps).zip(st) {
                            if !todo {
                                continue;
                            }
                            let factor = pencil.factor(xi, dense)?;
                            counter.fetch_add(1, Ordering::Relaxed);
                            *slot = Some(Entry {
                                version,
                                pole: xi,
                                factor,
                            });
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            r?;
        }
        self.current = Some((version, model.m.clone()));
        Ok(())
    }

    fn entry(&self, i: usize) -> Result<&Entry> {
        let version = self.current_version().ok_or(Error::CacheMiss { pole: i })?;
        match self.entries.get(i) {
            Some(Some(e)) if e.version == version => Ok(e),
            _ => Err(Error::CacheMiss { pole: i }),
        }
    }

    /// `A_i^{-1} rhs` from the cached factorization.
    pub fn resolve_with_cache(&self, i: usize, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let e = self.entry(i)?;
        self.solves.fetch_add(1, Ordering::Relaxed);
        Ok(e.factor.solve(rhs))
    }

    /// `A_i^{-T} rhs` (plain transpose) from the cached factorization.
    pub fn resolve_transpose(&self, i: usize, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let e = self.entry(i)?;
        self.transpose_solves.fetch_add(1, Ordering::Relaxed);
        Ok(e.factor.solve_transpose(rhs))
    }

    /// Solves one system per pole in parallel; `rhs[i]` belongs to pole `i`.
    pub fn solve_each(
        &self,
        problem: &Problem,
        model: &Model,
        rhs: &[Vec<Complex64>],
        transpose: bool,
    ) -> Result<Vec<Vec<Complex64>>> {
        if !self.is_current(model) {
            return Err(Error::CacheMiss { pole: 0 });
        }
        if rhs.len() != self.entries.len() {
            return Err(Error::DimensionMismatch {
                what: "right-hand sides per pole",
                expected: self.entries.len(),
                got: rhs.len(),
            });
        }
        let n = problem.dof_count();
        if let Some(bad) = rhs.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "right-hand side length",
                expected: n,
                got: bad.len(),
            });
        }
        let mass = if self.config.residual_check {
            Some(problem.assemble_mass(model)?)
        } else {
            None
        };
        let mut out: Vec<Vec<Complex64>> = vec![Vec::new(); rhs.len()];
        let size = chunk_len(rhs.len(), self.config.workers);
        let results: Vec<Result<()>> = thread::scope(|s| {
            let handles: Vec<_> = out
                .chunks_mut(size)
                .zip(rhs.chunks(size))
                .enumerate()
                .map(|(w, (slots, bs))| {
                    let mass = mass.as_ref();
                    s.spawn(move || -> Result<()> {
                        for (k, (slot, b)) in slots.iter_mut().zip(bs).enumerate() {
                            let i = w * size + k;
                            let x = if transpose {
                                self.resolve_transpose(i, b)?
                            } else {
                                self.resolve_with_cache(i, b)?
                            };
                            if let Some(mass) = mass {
                                let xi = self.entries[i].as_ref().unwrap().pole;
                                self.check_residual(problem, mass, xi, &x, b, transpose, i)?;
                            }
                            *slot = x;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            r?;
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn check_residual(
        &self,
        problem: &Problem,
        mass: &sprs::CsMat<f64>,
        xi: Complex64,
        x: &[Complex64],
        b: &[Complex64],
        transpose: bool,
        pole: usize,
    ) -> Result<()> {
        let (kx, mx) = if transpose {
            (spmv_t_c(&problem.stiffness, x), spmv_t_c(mass, x))
        } else {
            (spmv_c(&problem.stiffness, x), spmv_c(mass, x))
        };
        let r: Vec<Complex64> = kx
            .iter()
            .zip(&mx)
            .zip(b)
            .map(|((k, m), b)| k - xi * m - b)
            .collect();
        let bn = norm2_c(b);
        let rel = if bn > 0.0 { norm2_c(&r) / bn } else { norm2_c(&r) };
        if rel > self.config.residual_tol {
            return Err(Error::ResidualCheck { pole, residual: rel });
        }
        Ok(())
    }
}

/// `g_i = (K - xi_i M(m))^{-1} rhs` for every pole of `approx`.
pub fn solve_all_poles(
    problem: &Problem,
    model: &Model,
    approx: &RationalApproximant,
    rhs: &[f64],
    cache: &mut ShiftedFactorCache,
) -> Result<Vec<Vec<Complex64>>> {
    if rhs.len() != problem.dof_count() {
        return Err(Error::DimensionMismatch {
            what: "right-hand side length",
            expected: problem.dof_count(),
            got: rhs.len(),
        });
    }
    cache.factorize(problem, model, approx)?;
    let b: Vec<Complex64> = rhs.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    let all = vec![b; approx.pole_count()];
    cache.solve_each(problem, model, &all, false)
}

/// Order-sensitive checksum of complex vectors (FNV-1a over the raw bits).
pub fn checksum(vectors: &[Vec<Complex64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in vectors {
        for z in v {
            for word in [z.re.to_bits(), z.im.to_bits()] {
                for byte in word.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::csr_from_triplets;
    use crate::mesh_assembly::{build_problem, DomainSpec, Footprint, LocalMass, ProblemSpec};
    use crate::rba::TimeChannels;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scalar_problem(k: f64, mu: f64) -> Problem {
        Problem::from_parts(
            csr_from_triplets(1, 1, [(0, 0, k)]),
            vec![LocalMass {
                dofs: vec![Some(0)],
                mass: vec![mu],
                stiffness: None,
            }],
            vec![1.0],
            csr_from_triplets(1, 1, [(0, 0, 1.0)]),
        )
        .unwrap()
    }

    fn approx_with(poles: Vec<Complex64>) -> RationalApproximant {
        let n = poles.len();
        RationalApproximant::from_parts(
            poles,
            vec![vec![c(1.0, 0.0); n]],
            TimeChannels::new(vec![1.0]).unwrap(),
            [0.0, 1.0],
        )
        .unwrap()
    }

    fn problem_1d(cells: usize) -> (Problem, Model) {
        let spec = ProblemSpec {
            domain: DomainSpec {
                x: [0.0, 100.0],
                y: None,
                cells: vec![cells],
            },
            inv_mu: None,
            background_conductivity: 0.1,
            receivers: vec![vec![50.0]],
            receiver_grid: None,
            source: Footprint::Point {
                at: vec![40.0],
                amplitude: 1.0,
            },
            anomalies: vec![],
        };
        let p = build_problem(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model {
            m: (0..cells).map(|_| rng.random_range(-4.0..0.0)).collect(),
            m_ref: vec![0.0; cells],
        };
        (p, model)
    }

    fn checked(workers: usize) -> ShiftedFactorCache {
        ShiftedFactorCache::new(SolverConfig {
            workers,
            residual_check: true,
            ..SolverConfig::default()
        })
    }

    #[test]
    fn scalar_inverse() {
        let p = scalar_problem(3.0, 2.0);
        let model = Model {
            m: vec![0.0],
            m_ref: vec![0.0],
        };
        let poles = vec![c(-1.0, 1.0), c(2.0, 5.0)];
        let a = approx_with(poles.clone());
        let mut cache = checked(1);
        let g = solve_all_poles(&p, &model, &a, &[1.0], &mut cache).unwrap();
        for (gi, xi) in g.iter().zip(&poles) {
            let exact = 1.0 / (3.0 - xi * 2.0);
            assert!((gi[0] - exact).norm() < 1e-15 * exact.norm());
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let (p, model) = problem_1d(51);
        let a = approx_with(vec![c(-1e3, 1e4), c(5.0, 3e5)]);
        let mut cache = checked(2);
        let g = solve_all_poles(&p, &model, &a, &vec![0.0; 50], &mut cache).unwrap();
        assert!(g.iter().flatten().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn residual_on_fifty_unknowns() {
        let (p, model) = problem_1d(51);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poles: Vec<Complex64> = (0..4)
            .map(|_| c(rng.random_range(-1e5..1e5), rng.random_range(1e2..1e6)))
            .collect();
        let a = approx_with(poles);
        let rhs: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        // The residual check raises an error above 1e-8.
        let mut cache = checked(1);
        solve_all_poles(&p, &model, &a, &rhs, &mut cache).unwrap();
        let mut dense = ShiftedFactorCache::new(SolverConfig {
            backend: Backend::Dense,
            residual_check: true,
            ..SolverConfig::default()
        });
        solve_all_poles(&p, &model, &a, &rhs, &mut dense).unwrap();
    }

    #[test]
    fn resolve_is_deterministic_and_reuses_factorization() {
        let (p, model) = problem_1d(51);
        let a = approx_with(vec![c(-2e3, 4e4), c(1e3, 2e5)]);
        let mut cache = checked(1);
        cache.factorize(&p, &model, &a).unwrap();
        let before = cache.counters();
        let b: Vec<Complex64> = (0..50).map(|k| c(k as f64, -(k as f64).sqrt())).collect();
        let x1 = cache.resolve_with_cache(1, &b).unwrap();
        let x2 = cache.resolve_with_cache(1, &b).unwrap();
        assert_eq!(x1, x2);
        let d = cache.counters() - before;
        assert_eq!(d.solves, 2);
        assert_eq!(d.factorizations, 0);
    }

    #[test]
    fn constructed_solution_and_conjugation() {
        let (p, model) = problem_1d(51);
        let xi = c(-3e3, 7e4);
        let a = approx_with(vec![xi]);
        let mut cache = checked(1);
        cache.factorize(&p, &model, &a).unwrap();
        let x: Vec<Complex64> = (0..50).map(|k| c((k as f64).sin(), (k as f64).cos())).collect();
        let mass = p.assemble_mass(&model).unwrap();
        let (kx, mx) = (spmv_c(&p.stiffness, &x), spmv_c(&mass, &x));
        let b: Vec<Complex64> = kx.iter().zip(&mx).map(|(k, m)| k - xi * m).collect();
        let got = cache.resolve_with_cache(0, &b).unwrap();
        let err: f64 = got.iter().zip(&x).map(|(g, x)| (g - x).norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= 1e-8 * norm2_c(&x));

        // K and M are real, so conjugating the right-hand side conjugates the
        // solution of the conjugate-pole system.
        let bc: Vec<Complex64> = b.iter().map(|z| z.conj()).collect();
        let pencil = Pencil::new(&p, &model).unwrap();
        let yc = pencil.factor(xi.conj(), false).unwrap().solve(&bc);
        for (u, v) in yc.iter().zip(&got) {
            assert!((u - v.conj()).norm() <= 1e-12 * v.norm().max(1e-30));
        }
        // Complex linearity with the pole fixed.
        let ib: Vec<Complex64> = b.iter().map(|z| z * c(0.0, 1.0)).collect();
        let y = cache.resolve_with_cache(0, &ib).unwrap();
        for (u, v) in y.iter().zip(&got) {
            assert!((u - v * c(0.0, 1.0)).norm() <= 1e-12 * v.norm().max(1e-30));
        }
    }

    #[test]
    fn cache_miss_and_model_change() {
        let (p, model) = problem_1d(21);
        let a = approx_with(vec![c(-1.0, 1e4), c(1.0, 1e5), c(0.0, 1e6)]);
        let cache0 = checked(1);
        assert!(matches!(
            cache0.resolve_with_cache(0, &vec![c(1.0, 0.0); 20]),
            Err(Error::CacheMiss { pole: 0 })
        ));
        let mut cache = checked(2);
        cache.factorize(&p, &model, &a).unwrap();
        assert_eq!(cache.counters().factorizations, 3);
        // Same model bits: nothing refactorized.
        cache.factorize(&p, &model.clone(), &a).unwrap();
        assert_eq!(cache.counters().factorizations, 3);
        let mut other = model.clone();
        other.m[3] += 0.1;
        cache.factorize(&p, &other, &a).unwrap();
        assert_eq!(cache.counters().factorizations, 6);
        // The old model's factorizations are gone.
        let res = cache.solve_each(&p, &model, &vec![vec![c(1.0, 0.0); 20]; 3], false);
        assert!(matches!(res, Err(Error::CacheMiss { .. })));
    }

    #[test]
    fn transpose_solve_matches_dense() {
        let (p, model) = problem_1d(31);
        let a = approx_with(vec![c(-5e2, 3e4)]);
        let mut cache = checked(1);
        cache.factorize(&p, &model, &a).unwrap();
        let b: Vec<Complex64> = (0..30).map(|k| c(1.0 / (k + 1) as f64, k as f64)).collect();
        let x = cache.solve_each(&p, &model, std::slice::from_ref(&b), true).unwrap();
        let pencil = Pencil::new(&p, &model).unwrap();
        let f = pencil.factor(a.poles()[0], true).unwrap();
        let y = f.solve_transpose(&b);
        for (u, v) in x[0].iter().zip(&y) {
            assert!((u - v).norm() <= 1e-10 * v.norm().max(1e-30));
        }
    }

    #[test]
    fn dense_limit_is_enforced() {
        let (p, model) = problem_1d(2100);
        let a = approx_with(vec![c(0.0, 1.0)]);
        let mut cache = ShiftedFactorCache::new(SolverConfig {
            backend: Backend::Dense,
            ..SolverConfig::default()
        });
        assert!(matches!(
            cache.factorize(&p, &model, &a),
            Err(Error::DenseLimit { .. })
        ));
    }

    #[test]
    fn worker_count_invariance() {
        let (p, model) = problem_1d(81);
        let poles: Vec<Complex64> = (0..7).map(|k| c(-(k as f64) * 1e3, 1e3 * 3f64.powi(k))).collect();
        let a = approx_with(poles);
        let rhs: Vec<f64> = (0..80).map(|k| ((k * 7) % 11) as f64 - 5.0).collect();
        let mut reference = None;
        for w in [1, 2, 4, 8] {
            let mut cache = checked(w);
            let g = solve_all_poles(&p, &model, &a, &rhs, &mut cache).unwrap();
            assert_eq!(cache.counters().factorizations, 7);
            let sum = checksum(&g);
            match reference {
                None => reference = Some(sum),
                Some(r) => assert_eq!(r, sum, "workers = {w}"),
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn factorizations_equal_pole_count(m in 1usize..8, repeats in 1usize..4, workers in 1usize..5) {
            let (p, model) = problem_1d(16);
            let poles: Vec<Complex64> = (0..m).map(|k| c(-1.0, 10f64.powi(k as i32 + 2))).collect();
            let a = approx_with(poles);
            let mut cache = checked(workers);
            for _ in 0..repeats {
                solve_all_poles(&p, &model, &a, &[1.0; 15], &mut cache).unwrap();
            }
            prop_assert_eq!(cache.counters().factorizations, m as u64);
            prop_assert_eq!(cache.counters().solves, (m * repeats) as u64);
        }
    }
}
