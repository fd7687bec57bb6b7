use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    /// Exact ratios of the 8,349 / 1,163 / 2,447 benchmark split.
    pub fn talk2car() -> Self {
        let n = 11_959.0;
        SplitFractions {
            train: 8_349.0 / n,
            val: 1_163.0 / n,
            test: 2_447.0 / n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("{name} fraction must be positive, got {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if sum > 1.0 + 1e-9 {
            return Err(Error::Validation(format!("split fractions sum to {sum} > 1")));
        }
        Ok(())
    }

    /// Split sizes: train and val are floored, the test split takes every remaining item.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

/// Seeded shuffle, then contiguous assignment of train / val / test labels.
pub fn split_dataset(dataset: &mut Dataset, fractions: SplitFractions, seed: u64) -> Result<()> {
    fractions.validate()?;
    let n = dataset.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).child("split").rng());
    let (train, val, _) = fractions.sizes(n);
    for (rank, &i) in order.iter().enumerate() {
        dataset.samples[i].split = Some(if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(())
}

/// Reduced-data training subset: the first ⌊fraction·n_train⌋ training samples
/// in a seeded order, so smaller fractions are prefixes of larger ones.
pub fn training_subset<'a>(dataset: &'a Dataset, fraction: f64, seed: u64) -> Result<Vec<&'a Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut train = dataset.samples_in(Split::Train);
    train.shuffle(&mut SeedTree::new(seed).child("reduce").rng());
    let keep = ((fraction * train.len() as f64) + 1e-9).floor() as usize;
    train.truncate(keep);
    Ok(train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_split_sizes() {
        assert_eq!(SplitFractions::talk2car().sizes(11_959), (8_349, 1_163, 2_447));
        // rounded percentages do not reproduce the published sizes under flooring
        let rounded = SplitFractions::new(0.698, 0.097, 0.205).unwrap();
        assert_eq!(rounded.sizes(11_959), (8_347, 1_160, 2_452));
    }

    #[test]
    fn fractions_over_one_rejected() {
        assert!(SplitFractions::new(0.8, 0.2, 0.1).is_err());
        assert!(SplitFractions::new(0.0, 0.2, 0.1).is_err());
    }
}
