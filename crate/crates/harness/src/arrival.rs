//! Request arrival models and the fluctuation statistic used to compare
//! them with observed load.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::Deserialize;

use crate::HarnessError;

/// Fewest bins `fluctuation_ratio` accepts.
pub const MIN_BINS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArrivalModel {
    /// Independent arrivals at `rate` per second.
    Poisson { rate: f64 },
    /// Poisson counts whose per-bin mean is itself gamma distributed, with
    /// the gamma shape picked so that the fluctuation ratio is `k`.
    Overdispersed { rate: f64, k: f64 },
}

impl ArrivalModel {
    pub fn rate(&self) -> f64 {
        match *self {
            ArrivalModel::Poisson { rate } | ArrivalModel::Overdispersed { rate, .. } => rate,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let rate = self.rate();
        if !(rate.is_finite() && rate > 0.0) {
            return Err(HarnessError::InvalidConfig(format!("arrival rate must be positive, got {rate}")));
        }
        if let ArrivalModel::Overdispersed { k, .. } = *self {
            if !(k.is_finite() && k >= 1.0) {
                return Err(HarnessError::InvalidConfig(format!(
                    "fluctuation ratio must be at least 1, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Arrival counts in `n_bins` consecutive bins of `bin_seconds` each.
    pub fn bin_counts<R: Rng + ?Sized>(
        &self,
        n_bins: usize,
        bin_seconds: f64,
        rng: &mut R,
    ) -> Result<Vec<u64>, HarnessError> {
        self.validate()?;
        if !(bin_seconds.is_finite() && bin_seconds > 0.0) {
            return Err(HarnessError::InvalidConfig(format!("bin width must be positive, got {bin_seconds}")));
        }
        let mu = self.rate() * bin_seconds;
        let gamma = match *self {
            ArrivalModel::Overdispersed { k, .. } if k > 1.0 => {
                let shape = mu / (k * k - 1.0);
                Some(Gamma::new(shape, mu / shape).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?)
            }
            _ => None,
        };
        let mut out = Vec::with_capacity(n_bins);
        for _ in 0..n_bins {
            let lambda = match &gamma {
                Some(g) => g.sample(rng),
                None => mu,
            };
            out.push(poisson(lambda, rng)?);
        }
        Ok(out)
    }

    /// The first `n` arrival times in seconds, sorted, drawn bin by bin and
    /// spread uniformly inside each bin.
    pub fn arrival_times<R: Rng + ?Sized>(
        &self,
        n: usize,
        bin_seconds: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>, HarnessError> {
        let mut times = Vec::with_capacity(n);
        let mut bin = 0u64;
        while times.len() < n {
            let count = self.bin_counts(1, bin_seconds, rng)?[0];
            let start = bin as f64 * bin_seconds;
            let mut inside: Vec<f64> = (0..count).map(|_| start + rng.random::<f64>() * bin_seconds).collect();
            inside.sort_by(f64::total_cmp);
            times.extend(inside.into_iter().take(n - times.len()));
            bin += 1;
        }
        Ok(times)
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64, HarnessError> {
    if lambda <= 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(lambda).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    Ok(d.sample(rng) as u64)
}

/// Sample standard deviation of per-bin counts over the square root of
/// their mean: about 1 for Poisson arrivals. All-zero input gives 0.
pub fn fluctuation_ratio(counts: &[u64]) -> Result<f64, HarnessError> {
    if counts.len() < MIN_BINS {
        return Err(HarnessError::InsufficientData {
            bins: counts.len(),
            needed: MIN_BINS,
        });
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / mean.sqrt())
}
