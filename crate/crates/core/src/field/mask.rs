//! Coarse-to-fine masking of the hash encoding.
//!
//! At epoch `t` the first `r = min(⌊t / T⌋ + s, L)` levels are visible and the
//! remaining levels are multiplied by zero, so finer resolutions join the
//! input one every `T` epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSchedule {
    /// Epochs between successive levels being revealed.
    pub t_epochs: usize,
    /// Levels visible at epoch 0.
    pub initial_levels: usize,
    pub levels: usize,
    pub features: usize,
}

impl MaskSchedule {
    pub fn new(t_epochs: usize, initial_levels: usize, levels: usize, features: usize) -> Result<Self> {
        let s = MaskSchedule { t_epochs, initial_levels, levels, features };
        s.validate()?;
        Ok(s)
    }

    /// The published schedule: a new level every 25 epochs from 3 visible.
    pub fn paper(levels: usize, features: usize) -> Result<Self> {
        Self::new(25, 3.min(levels), levels, features)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_epochs == 0 {
            return Err(Error::config("mask period must be at least one epoch"));
        }
        if self.initial_levels == 0 || self.initial_levels > self.levels {
            return Err(Error::config(format!(
                "initial visible levels {} must lie in 1..={}",
                self.initial_levels, self.levels
            )));
        }
        if self.features == 0 {
            return Err(Error::config("mask needs at least one feature per level"));
        }
        Ok(())
    }

    pub fn visible_levels(&self, epoch: usize) -> usize {
        (epoch / self.t_epochs).saturating_add(self.initial_levels).min(self.levels)
    }

    /// First epoch at which every level is visible.
    pub fn saturation_epoch(&self) -> usize {
        (self.levels - self.initial_levels) * self.t_epochs
    }
}

/// Visible level count, treating a disabled schedule as "everything visible".
pub fn visible_levels(schedule: Option<&MaskSchedule>, levels: usize, epoch: usize) -> usize {
    schedule.map_or(levels, |s| s.visible_levels(epoch).min(levels))
}

/// Binary mask of length `L·F`; each level owns `F` consecutive entries.
pub fn level_mask(schedule: &MaskSchedule, epoch: usize) -> Vec<u8> {
    let r = schedule.visible_levels(epoch);
    (0..schedule.levels)
        .flat_map(|l| std::iter::repeat_n(u8::from(l < r), schedule.features))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let s = MaskSchedule::new(100, 1, 3, 2).unwrap();
        assert_eq!(level_mask(&s, 50), vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(level_mask(&s, 100), vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(level_mask(&s, 200), vec![1; 6]);
        assert_eq!(level_mask(&s, 10_000), vec![1; 6]);
    }

    #[test]
    fn saturated_from_the_start() {
        let s = MaskSchedule::new(25, 4, 4, 3).unwrap();
        for t in [0, 1, 24, 25, 1000] {
            assert_eq!(level_mask(&s, t), vec![1; 12]);
        }
    }

    #[test]
    fn validation() {
        assert!(MaskSchedule::new(0, 1, 3, 2).is_err());
        assert!(MaskSchedule::new(10, 0, 3, 2).is_err());
        assert!(MaskSchedule::new(10, 4, 3, 2).is_err());
        assert_eq!(visible_levels(None, 8, 0), 8);
    }

    proptest! {
        #[test]
        fn visible_count_is_monotone(t_epochs in 1usize..60, levels in 1usize..10, s_frac in 0.0f64..1.0, t in 0usize..2000) {
            let s = 1 + ((levels - 1) as f64 * s_frac) as usize;
            let sched = MaskSchedule::new(t_epochs, s, levels, 2).unwrap();
            let now: usize = level_mask(&sched, t).iter().map(|&m| m as usize).sum();
            let next: usize = level_mask(&sched, t + 1).iter().map(|&m| m as usize).sum();
            prop_assert!(next >= now);
            if t >= sched.saturation_epoch() {
                prop_assert_eq!(now, levels * 2);
            }
        }
    }
}
