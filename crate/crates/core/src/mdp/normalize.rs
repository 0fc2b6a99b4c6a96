use serde::{Deserialize, Serialize};

const CLIP: f64 = 10.0;
const VAR_EPS: f64 = 1e-8;

/// Per-dimension running mean and variance (Welford).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStat {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStat {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *m2 += d * (v - *m);
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![1.0; self.mean.len()];
        }
        self.m2.iter().map(|m2| m2 / self.count as f64).collect()
    }
}

/// Observation normalizer attached to a policy. Statistics are updated only
/// through [`ObsNormalizer::update`] so they stay frozen during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub enabled: bool,
    pub stats: RunningStat,
}

impl ObsNormalizer {
    pub fn new(dim: usize, enabled: bool) -> Self {
        Self {
            enabled,
            stats: RunningStat::new(dim),
        }
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        if !self.enabled || self.stats.count == 0 {
            return obs.to_vec();
        }
        let var = self.stats.variance();
        obs.iter()
            .zip(&self.stats.mean)
            .zip(&var)
            .map(|((x, m), v)| ((x - m) / (v + VAR_EPS).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }

    pub fn update<'a>(&mut self, batch: impl IntoIterator<Item = &'a [f64]>) {
        if self.enabled {
            batch.into_iter().for_each(|x| self.stats.push(x));
        }
    }
}
