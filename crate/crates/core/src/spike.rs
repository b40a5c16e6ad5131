//! Bernoulli rate coding of intensities into binary spike trains.

use ashnet_tensor::rng::seeded;
use rand::Rng;

use crate::error::{CoreError, Result};

/// Binary spikes for `num_units` units over `steps` time steps, stored
/// unit-major: entry `(u, t)` lives at `u * steps + t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTrain {
    values: Vec<u8>,
    num_units: usize,
    steps: usize,
}

impl SpikeTrain {
    pub fn new(num_units: usize, steps: usize, values: Vec<u8>) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::Parameter("spike train needs T >= 1".into()));
        }
        if values.len() != num_units * steps || values.iter().any(|&v| v > 1) {
            return Err(CoreError::Parameter(
                "spike values must be 0/1 with num_units * T entries".into(),
            ));
        }
        Ok(SpikeTrain {
            values,
            num_units,
            steps,
        })
    }

    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, unit: usize, t: usize) -> u8 {
        self.values[unit * self.steps + t]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }
}

/// Samples one spike per unit and step with probability equal to the unit's
/// intensity. Intensities are clamped to `[0, 1]`; NaN counts as zero.
pub fn encode_probabilistic(intensities: &[f64], steps: usize, seed: u64) -> Result<SpikeTrain> {
    if steps == 0 {
        return Err(CoreError::Parameter("time window T must be >= 1".into()));
    }
    let probs: Vec<f64> = intensities
        .iter()
        .map(|&p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) })
        .collect();
    let mut rng = seeded(seed);
    let mut values = vec![0u8; probs.len() * steps];
    for t in 0..steps {
        for (u, &p) in probs.iter().enumerate() {
            let r: f64 = rng.random();
            values[u * steps + t] = u8::from(r < p);
        }
    }
    Ok(SpikeTrain {
        values,
        num_units: probs.len(),
        steps,
    })
}

/// Per-unit firing rate `Σ_t s(u,t) / T`.
pub fn spike_rate(train: &SpikeTrain) -> Vec<f64> {
    train
        .values
        .chunks(train.steps)
        .map(|c| c.iter().map(|&v| f64::from(v)).sum::<f64>() / train.steps as f64)
        .collect()
}

/// Channel mean of a `c×h×w` image, giving `h×w` intensities.
pub fn grayscale(image: &[f64], channels: usize) -> Vec<f64> {
    let plane = image.len() / channels.max(1);
    (0..plane)
        .map(|i| (0..channels).map(|c| image[c * plane + i]).sum::<f64>() / channels as f64)
        .collect()
}

/// Reorders an `h×w` plane so each `patch×patch` tile is contiguous, tiles
/// in row-major order.
pub fn patch_major(plane: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(plane.len());
    for py in 0..h / patch {
        for px in 0..w / patch {
            for y in 0..patch {
                for x in 0..patch {
                    out.push(plane[(py * patch + y) * w + px * patch + x]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_and_unit_rates() {
        let zeros = encode_probabilistic(&[0.0], 10, 1).unwrap();
        assert!(zeros.values().iter().all(|&v| v == 0));
        let ones = encode_probabilistic(&[1.0], 10, 1).unwrap();
        assert!(ones.values().iter().all(|&v| v == 1));
    }

    #[test]
    fn half_rate_concentrates() {
        let train = encode_probabilistic(&[0.5], 10_000, 42).unwrap();
        let rate = spike_rate(&train)[0];
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn rate_counts() {
        let alt = SpikeTrain::new(1, 10, (0..10).map(|i| (i % 2) as u8).collect()).unwrap();
        assert_eq!(spike_rate(&alt), vec![0.5]);
        let z = SpikeTrain::new(2, 4, vec![0; 8]).unwrap();
        assert_eq!(spike_rate(&z), vec![0.0, 0.0]);
        let o = SpikeTrain::new(1, 3, vec![1; 3]).unwrap();
        assert_eq!(spike_rate(&o), vec![1.0]);
    }

    #[test]
    fn zero_window_is_rejected() {
        assert!(encode_probabilistic(&[0.3], 0, 1).is_err());
        assert!(SpikeTrain::new(1, 1, vec![2]).is_err());
    }

    #[test]
    fn out_of_range_intensities_clamp() {
        let t = encode_probabilistic(&[-3.0, 7.0, f64::NAN], 5, 9).unwrap();
        assert_eq!(spike_rate(&t), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn patch_major_groups_tiles() {
        let plane: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patch_major(&plane, 4, 4, 2);
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    proptest! {
        #[test]
        fn binary_and_deterministic(
            xs in prop::collection::vec(-1.0f64..2.0, 1..20),
            steps in 1usize..16,
            seed in any::<u64>(),
        ) {
            let a = encode_probabilistic(&xs, steps, seed).unwrap();
            let b = encode_probabilistic(&xs, steps, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.values().iter().all(|&v| v <= 1));
            prop_assert!(spike_rate(&a).iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }
}
