//! Synthetic sequence-classification tasks.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskRule {
    /// Label 1 iff tokens from the upper half of the vocabulary outnumber
    /// those from the lower half.
    MajorityTokenClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub rule: TaskRule,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            vocab: 64,
            seq_len: 15,
            num_classes: 2,
            rule: TaskRule::MajorityTokenClass,
            train_size: 2000,
            test_size: 500,
            seed: 0,
        }
    }
}

/// Label of `tokens` under `rule`.
pub fn label(rule: TaskRule, vocab: usize, tokens: &[usize]) -> usize {
    match rule {
        TaskRule::MajorityTokenClass => {
            let upper = tokens.iter().filter(|&&t| t >= vocab / 2).count();
            usize::from(upper > tokens.len() - upper)
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        match self.rule {
            TaskRule::MajorityTokenClass => {
                if self.num_classes != 2 {
                    return Err(Error::Config(
                        "majority-token-class is a two-class task".into(),
                    ));
                }
                if self.vocab < 2 || self.vocab % 2 != 0 {
                    return Err(Error::Config(format!(
                        "vocab {} must be even and at least 2",
                        self.vocab
                    )));
                }
                // Ties have no majority; an odd length rules them out and
                // makes both labels equally likely.
                if self.seq_len % 2 == 0 {
                    return Err(Error::Config(format!(
                        "seq_len {} must be odd for a balanced majority task",
                        self.seq_len
                    )));
                }
            }
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        let space = (self.vocab as f64).powi(self.seq_len as i32);
        if ((self.train_size + self.test_size) as f64) > space / 4.0 {
            return Err(Error::Config(
                "too few distinct sequences for the requested split sizes".into(),
            ));
        }
        Ok(())
    }

    /// Generates disjoint train and test splits, each with exactly
    /// `size / 2` examples of class 1 (rounded down) and the rest class 0.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::new();
        let train = self.split(self.train_size, &mut rng, &mut seen)?;
        let test = self.split(self.test_size, &mut rng, &mut seen)?;
        Ok((train, test))
    }

    fn split(
        &self,
        size: usize,
        rng: &mut ChaCha8Rng,
        seen: &mut HashSet<Vec<usize>>,
    ) -> Result<Dataset> {
        let mut quota = [size - size / 2, size / 2];
        let segments: Vec<usize> = (0..self.seq_len)
            .map(|i| usize::from(i > self.seq_len / 2))
            .collect();
        let mut examples = Vec::with_capacity(size);
        while examples.len() < size {
            let tokens: Vec<usize> = (0..self.seq_len)
                .map(|_| rng.random_range(0..self.vocab))
                .collect();
            let y = label(self.rule, self.vocab, &tokens);
            if quota[y] == 0 || seen.contains(&tokens) {
                continue;
            }
            quota[y] -= 1;
            seen.insert(tokens.clone());
            examples.push(Example {
                tokens,
                segments: segments.clone(),
                label: y,
            });
        }
        Dataset::new(self.seq_len, examples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTask {
        SyntheticTask {
            train_size: 300,
            test_size: 101,
            seq_len: 9,
            seed: 4,
            ..SyntheticTask::default()
        }
    }

    #[test]
    fn rule_definition() {
        assert_eq!(label(TaskRule::MajorityTokenClass, 64, &[0, 5, 31]), 0);
        assert_eq!(label(TaskRule::MajorityTokenClass, 64, &[32, 5, 63]), 1);
        assert_eq!(label(TaskRule::MajorityTokenClass, 64, &[40, 5, 3]), 0);
    }

    #[test]
    fn deterministic_balanced_and_disjoint() {
        let (a, b) = small().generate().unwrap();
        let (a2, b2) = small().generate().unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        assert_eq!(a.labels().filter(|&l| l == 1).count(), 150);
        assert_eq!(b.labels().filter(|&l| l == 1).count(), 50);
        let train: HashSet<_> = a.examples.iter().map(|e| e.tokens.clone()).collect();
        assert_eq!(train.len(), a.len());
        assert!(b.examples.iter().all(|e| !train.contains(&e.tokens)));
        for e in a.examples.iter().chain(&b.examples) {
            assert_eq!(e.label, label(TaskRule::MajorityTokenClass, 64, &e.tokens));
        }
    }

    #[test]
    fn even_length_is_rejected() {
        let t = SyntheticTask {
            seq_len: 8,
            ..small()
        };
        assert!(t.generate().is_err());
    }

    #[test]
    fn tiny_space_is_rejected() {
        let t = SyntheticTask {
            vocab: 2,
            seq_len: 3,
            ..small()
        };
        assert!(t.generate().is_err());
    }
}
