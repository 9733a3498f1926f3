//! Noisy synthetic observations with `sigma(d) = eps_r |d| + eps_a`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::forward_response;
use crate::mesh_assembly::{Model, Problem};
use crate::rba::RationalApproximant;
use crate::shifted_solver::ShiftedFactorCache;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub eps_r: f64,
    /// Absolute floor; `None` means `1e-6 * max |d_clean|`.
    pub eps_a: Option<f64>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            eps_r: 0.03,
            eps_a: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the true model parameters (little-endian f64 bits).
    pub model_sha256: String,
    pub seed: u64,
    pub eps_r: f64,
    pub eps_a: f64,
}

/// Observed data with per-datum standard deviations. Data are stored
/// channel-major: `d_obs[j * receivers.len() + r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub d_obs: Vec<f64>,
    pub sigma_d: Vec<f64>,
    pub times: Vec<f64>,
    pub receivers: Vec<[f64; 2]>,
    pub eps_r: f64,
    pub eps_a: f64,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl DataSet {
    pub fn new(
        d_obs: Vec<f64>,
        sigma_d: Vec<f64>,
        times: Vec<f64>,
        receivers: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let set = Self {
            d_obs,
            sigma_d,
            times,
            receivers,
            eps_r: 0.0,
            eps_a: 0.0,
            provenance: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len() * self.receivers.len();
        for (what, len) in [("observed data", self.d_obs.len()), ("data sigma", self.sigma_d.len())] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        if self.sigma_d.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(
                "data standard deviations must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.d_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_obs.is_empty()
    }

    /// Diagonal of `W_d = diag(1 / sigma_d)`.
    pub fn weights(&self) -> Vec<f64> {
        self.sigma_d.iter().map(|s| 1.0 / s).collect()
    }

    /// `W_d (d_pred - d_obs)`.
    pub fn weighted_residual(&self, d_pred: &[f64]) -> Result<Vec<f64>> {
        if d_pred.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "predicted data",
                expected: self.len(),
                got: d_pred.len(),
            });
        }
        Ok(d_pred
            .iter()
            .zip(&self.d_obs)
            .zip(&self.sigma_d)
            .map(|((p, o), s)| (p - o) / s)
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let set: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }
}

pub fn model_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for v in &model.m {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Adds seeded Gaussian noise to clean data.
pub fn add_noise(
    d_clean: &[f64],
    times: Vec<f64>,
    receivers: Vec<[f64; 2]>,
    noise: &NoiseSpec,
) -> Result<DataSet> {
    if !(noise.eps_r >= 0.0) {
        return Err(Error::InvalidInput("eps_r must be non-negative".into()));
    }
    let dmax = d_clean.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let eps_a = noise.eps_a.unwrap_or(1e-6 * dmax);
    if !(eps_a > 0.0) {
        return Err(Error::InvalidInput(
            "absolute noise floor must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let sigma_d: Vec<f64> = d_clean.iter().map(|d| noise.eps_r * d.abs() + eps_a).collect();
    let d_obs = d_clean
        .iter()
        .zip(&sigma_d)
        .map(|(d, s)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            d + s * e
        })
        .collect();
    let mut set = DataSet::new(d_obs, sigma_d, times, receivers)?;
    set.eps_r = noise.eps_r;
    set.eps_a = eps_a;
    Ok(set)
}

/// Simulates `true_model` and perturbs the data. Returns the data set and
/// the clean data.
pub fn make_dataset(
    problem: &Problem,
    true_model: &Model,
    approx: &RationalApproximant,
    cache: &mut ShiftedFactorCache,
    noise: &NoiseSpec,
) -> Result<(DataSet, Vec<f64>)> {
    let clean = forward_response(problem, true_model, approx, cache, false)?.data;
    let mut set = add_noise(
        &clean,
        approx.channels().times().to_vec(),
        problem.receivers.clone(),
        noise,
    )?;
    set.provenance = Some(Provenance {
        model_sha256: model_hash(true_model),
        seed: noise.seed,
        eps_r: set.eps_r,
        eps_a: set.eps_a,
    });
    Ok((set, clean))
}
