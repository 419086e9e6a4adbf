//! Client compute-speed models.
//!
//! A [`Fleet`] stores unit computation times (simulated time per local
//! update) sorted fastest first, together with each client's original index.
//! Times are drawn once per experiment and never change.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedKind {
    UniformInterval { lo: f64, hi: f64 },
    IidExponential { rate: f64 },
    Explicit { times: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedModel {
    pub kind: SpeedKind,
    pub seed: u64,
}

impl SpeedModel {
    pub fn new(kind: SpeedKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            SpeedKind::UniformInterval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
                    return Err(Error::invalid(format!(
                        "uniform speeds need 0 < lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            SpeedKind::IidExponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::invalid(format!("exponential rate must be positive, got {rate}")));
                }
            }
            SpeedKind::Explicit { times } => {
                if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
                    return Err(Error::invalid(format!("explicit times must be positive, got {t}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Index of the client before sorting.
    pub id: usize,
    /// Simulated time for one local update.
    pub unit_time: f64,
}

/// Clients sorted by ascending unit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    profiles: Vec<ClientProfile>,
}

impl Fleet {
    /// Sorts `times` ascending; ties keep original index order.
    pub fn from_times(times: &[f64]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Empty("fleet"));
        }
        if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::invalid(format!("unit times must be positive, got {t}")));
        }
        let mut profiles: Vec<ClientProfile> = times
            .iter()
            .enumerate()
            .map(|(id, &unit_time)| ClientProfile { id, unit_time })
            .collect();
        profiles.sort_by(|a, b| a.unit_time.total_cmp(&b.unit_time).then(a.id.cmp(&b.id)));
        Ok(Self { profiles })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    /// Unit times in sorted order.
    pub fn times(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.unit_time).collect()
    }

    /// `permutation()[k]` is the original index of the `k`-th fastest client.
    pub fn permutation(&self) -> Vec<usize> {
        self.profiles.iter().map(|p| p.id).collect()
    }

    /// Unit time of the `k`-th fastest client (zero-based).
    pub fn time(&self, k: usize) -> f64 {
        self.profiles[k].unit_time
    }
}

pub fn sample_fleet(model: &SpeedModel, n: usize) -> Result<Fleet> {
    model.validate()?;
    if n == 0 {
        return Err(Error::invalid("fleet size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let times: Vec<f64> = match &model.kind {
        SpeedKind::UniformInterval { lo, hi } => {
            let dist = Uniform::new_inclusive(*lo, *hi)
                .map_err(|e| Error::invalid(format!("uniform speeds: {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        SpeedKind::IidExponential { rate } => {
            let dist = Exp::new(*rate).map_err(|e| Error::invalid(format!("exponential speeds: {e}")))?;
            // An exponential draw can be exactly 0; unit times must stay positive.
            (0..n)
                .map(|_| dist.sample(&mut rng).max(f64::MIN_POSITIVE))
                .collect()
        }
        SpeedKind::Explicit { times } => {
            if times.len() != n {
                return Err(Error::invalid(format!(
                    "explicit speed list has {} entries for {n} clients",
                    times.len()
                )));
            }
            times.clone()
        }
    };
    Fleet::from_times(&times)
}

/// Reads a JSON array of unit times.
pub fn load_speed_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let times: Vec<f64> = serde_json::from_str(&text)?;
    Ok(times)
}
