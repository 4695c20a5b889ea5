//! Stochastic depth: linearly decaying survival probabilities and per-step
//! block masks.
//!
//! Block `l` (1-based, counted across all groups) survives with probability
//! `p_l = 1 - (l / L) * (1 - p_L)`. One mask is drawn per mini-batch, and
//! only final-level residual branches are ever dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSchedule {
    probs: Vec<f64>,
}

impl SurvivalSchedule {
    /// Arbitrary per-block probabilities, each in `[0, 1]`.
    ///
    /// Zero is allowed here so degenerate schedules can be analyzed; the
    /// linear rule itself never produces it.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidConfig("survival schedule needs at least one block".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!("survival probability {p} outside [0, 1]")));
        }
        Ok(SurvivalSchedule { probs })
    }

    pub fn uniform(blocks: usize, p: f64) -> Result<Self> {
        Self::new(vec![p; blocks])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn p_terminal(&self) -> f64 {
        *self.probs.last().expect("schedule is never empty")
    }

    /// Mean survival probability across blocks.
    pub fn expected_active(&self) -> f64 {
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }

    /// Independent Bernoulli(p_l) draw per block.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        self.probs.iter().map(|&p| rng.random::<f64>() < p).collect()
    }

    /// True when no block can ever be dropped.
    pub fn is_noop(&self) -> bool {
        self.probs.iter().all(|&p| p >= 1.0)
    }
}

/// `p_l = 1 - (l / L)(1 - p_terminal)` for `l = 1..=L`.
pub fn linear_decay(blocks: usize, p_terminal: f64) -> Result<SurvivalSchedule> {
    if blocks == 0 {
        return Err(Error::InvalidConfig("linear decay needs at least one block".into()));
    }
    if !(p_terminal > 0.0 && p_terminal <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "terminal survival probability must lie in (0, 1], got {p_terminal}"
        )));
    }
    let drop = 1.0 - p_terminal;
    let total = blocks as f64;
    let mut probs: Vec<f64> = (1..=blocks).map(|l| 1.0 - (l as f64 / total) * drop).collect();
    // l / L is exactly 1 at the last block, but keep the endpoint exact anyway.
    probs[blocks - 1] = p_terminal;
    Ok(SurvivalSchedule { probs })
}

pub fn sample_mask<R: Rng + ?Sized>(schedule: &SurvivalSchedule, rng: &mut R) -> Vec<bool> {
    schedule.sample_mask(rng)
}

pub fn expected_active(schedule: &SurvivalSchedule) -> f64 {
    schedule.expected_active()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decay_points() {
        let s = linear_decay(54, 0.5).unwrap();
        assert_eq!(s.probs()[53], 0.5);
        assert_eq!(s.probs()[26], 0.75);
        assert_eq!(linear_decay(2, 0.5).unwrap().probs(), &[0.75, 0.5]);
        assert!(linear_decay(17, 1.0).unwrap().probs().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn decay_rejects_bad_input() {
        assert!(linear_decay(0, 0.5).is_err());
        assert!(linear_decay(4, 0.0).is_err());
        assert!(linear_decay(4, 1.01).is_err());
        assert!(SurvivalSchedule::new(vec![0.5, 1.2]).is_err());
        assert!(SurvivalSchedule::new(vec![]).is_err());
    }

    #[test]
    fn expected_active_values() {
        assert_eq!(SurvivalSchedule::uniform(9, 1.0).unwrap().expected_active(), 1.0);
        assert_eq!(SurvivalSchedule::uniform(9, 0.25).unwrap().expected_active(), 0.25);
        let l = 54;
        let s = linear_decay(l, 0.5).unwrap();
        let mean = (s.probs()[0] + s.probs()[l - 1]) / 2.0;
        assert!((s.expected_active() - mean).abs() < 1e-15);
        assert!((mean - (0.75 - 0.25 / l as f64)).abs() < 1e-15);
    }

    #[test]
    fn masks() {
        let ones = SurvivalSchedule::uniform(54, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert!(ones.sample_mask(&mut rng).iter().all(|&b| b));
        }
        let s = linear_decay(54, 0.5).unwrap();
        let a = s.sample_mask(&mut ChaCha8Rng::seed_from_u64(11));
        let b = s.sample_mask(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_keep_rate_concentrates() {
        let eps = 1e-3;
        let s = SurvivalSchedule::uniform(1, eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let kept = (0..draws).filter(|_| s.sample_mask(&mut rng)[0]).count() as f64;
        let sigma = (draws as f64 * eps * (1.0 - eps)).sqrt();
        assert!((kept - draws as f64 * eps).abs() <= 3.0 * sigma, "kept {kept}");
    }

    proptest! {
        #[test]
        fn decay_is_arithmetic(blocks in 1usize..400, p in 0.01f64..=1.0) {
            let s = linear_decay(blocks, p).unwrap();
            let step = (1.0 - p) / blocks as f64;
            let mut prev = 1.0;
            for &q in s.probs() {
                prop_assert!((prev - q - step).abs() < 1e-12);
                prop_assert!(q <= prev);
                prev = q;
            }
            prop_assert_eq!(s.p_terminal(), p);
        }
    }
}
