//! Labelled fixed-length sequences and batching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::Batch;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seq_len: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(seq_len: usize, examples: Vec<Example>) -> Result<Self> {
        for ex in &examples {
            if ex.tokens.len() != seq_len || ex.segments.len() != seq_len {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: vec![seq_len],
                    rhs: vec![ex.tokens.len(), ex.segments.len()],
                });
            }
        }
        Ok(Self { seq_len, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    /// Batch made of the examples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut b = Batch {
            tokens: Vec::with_capacity(indices.len() * self.seq_len),
            segments: Vec::with_capacity(indices.len() * self.seq_len),
            labels: Vec::with_capacity(indices.len()),
            size: indices.len(),
            seq_len: self.seq_len,
        };
        for &i in indices {
            let ex = self.examples.get(i).ok_or(Error::IndexOutOfRange {
                what: "example",
                index: i,
                limit: self.len(),
            })?;
            b.tokens.extend_from_slice(&ex.tokens);
            b.segments.extend_from_slice(&ex.segments);
            b.labels.push(ex.label);
        }
        b.validate()?;
        Ok(b)
    }

    /// Consecutive batches in dataset order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}
