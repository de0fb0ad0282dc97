use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CsiWindow;
use crate::error::{Error, Result};

/// Train-to-test proportion, e.g. `4:1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ratio {
    pub train: u32,
    pub test: u32,
}

impl Ratio {
    pub const fn new(train: u32, test: u32) -> Self {
        Ratio { train, test }
    }

    /// Items assigned to training out of `n`, rounded half up. Both sides
    /// keep at least one item when `n >= 2`.
    pub fn train_count(&self, n: usize) -> usize {
        let total = (self.train + self.test) as usize;
        let k = (2 * n * self.train as usize + total) / (2 * total);
        if n >= 2 {
            k.clamp(1, n - 1)
        } else {
            k.min(n)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Clip,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub ratio: Ratio,
    pub seed: u64,
    pub granularity: Granularity,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratio: Ratio::new(4, 1), seed: 0, granularity: Granularity::Clip }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio.train == 0 || self.ratio.test == 0 {
            return Err(Error::config(format!(
                "split ratio {}:{} must have both sides positive",
                self.ratio.train, self.ratio.test
            )));
        }
        Ok(())
    }
}

/// Seeded random partition into `(train, test)`. At clip granularity every
/// window of a clip lands on the same side.
pub fn split<S: Clone>(windows: &[CsiWindow<S>], spec: &SplitSpec) -> Result<(Vec<CsiWindow<S>>, Vec<CsiWindow<S>>)> {
    spec.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let in_train: Vec<bool> = match spec.granularity {
        Granularity::Window => {
            let mut order: Vec<usize> = (0..windows.len()).collect();
            order.shuffle(&mut rng);
            let k = spec.ratio.train_count(order.len());
            let mut flags = vec![false; windows.len()];
            for &i in &order[..k] {
                flags[i] = true;
            }
            flags
        }
        Granularity::Clip => {
            let mut clips: Vec<usize> = windows.iter().map(|w| w.clip_id).collect::<BTreeSet<_>>().into_iter().collect();
            clips.shuffle(&mut rng);
            let k = spec.ratio.train_count(clips.len());
            let train: BTreeSet<usize> = clips[..k].iter().copied().collect();
            windows.iter().map(|w| train.contains(&w.clip_id)).collect()
        }
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (w, t) in windows.iter().zip(in_train) {
        if t {
            train.push(w.clone());
        } else {
            test.push(w.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(Ratio::new(4, 1).train_count(10), 8);
        assert_eq!(Ratio::new(3, 1).train_count(4), 3);
        assert_eq!(Ratio::new(1, 1).train_count(2), 1);
        assert_eq!(Ratio::new(99, 1).train_count(3), 2);
        assert_eq!(Ratio::new(4, 1).train_count(1), 1);
    }
}
