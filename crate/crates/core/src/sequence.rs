//! Layout of padded sequence batches inside the graph.
//!
//! Sequences travel through the network as a single `[T·n × D]` matrix in
//! time-major order: row `t·n + i` holds timestep `t` of example `i`. Valid
//! timesteps of each example form a prefix of length `lengths[i]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    batch: usize,
    steps: usize,
    lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>, steps: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > steps) {
            return Err(Error::Contract(format!(
                "length {l} exceeds padded width {steps}"
            )));
        }
        Ok(SeqLayout {
            batch: lengths.len(),
            steps,
            lengths,
        })
    }

    pub fn from_lengths(lengths: Vec<usize>) -> Result<Self> {
        let steps = lengths.iter().copied().max().unwrap_or(0).max(1);
        Self::new(lengths, steps)
    }

    /// Accepts a row-major `[n × T]` 0/1 mask; errors unless every row is a
    /// prefix mask.
    pub fn from_mask(mask: &[bool], batch: usize, steps: usize) -> Result<Self> {
        if mask.len() != batch * steps {
            return Err(Error::dim("mask", &[batch, steps], &[mask.len()]));
        }
        let mut lengths = Vec::with_capacity(batch);
        for i in 0..batch {
            let row = &mask[i * steps..(i + 1) * steps];
            let len = row.iter().take_while(|&&m| m).count();
            if row[len..].iter().any(|&m| m) {
                return Err(Error::Contract(format!(
                    "row {i} of mask is not a prefix mask"
                )));
            }
            lengths.push(len);
        }
        Self::new(lengths, steps)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn rows(&self) -> usize {
        self.batch * self.steps
    }

    pub fn is_valid(&self, t: usize, i: usize) -> bool {
        t < self.lengths[i]
    }

    /// Validity of the `n` rows at timestep `t`.
    pub fn valid_at(&self, t: usize) -> Vec<bool> {
        self.lengths.iter().map(|&l| t < l).collect()
    }

    /// Validity of all `T·n` rows, time-major.
    pub fn row_mask(&self) -> Vec<bool> {
        (0..self.steps).flat_map(|t| self.valid_at(t)).collect()
    }

    /// Row-major `[n × T]` mask.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.batch)
            .flat_map(|i| (0..self.steps).map(move |t| (i, t)))
            .map(|(i, t)| self.is_valid(t, i))
            .collect()
    }

    /// Row index of each example's last valid timestep.
    pub fn last_rows(&self) -> Result<Vec<usize>> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l == 0 {
                    Err(Error::Contract(format!("example {i} has zero length")))
                } else {
                    Ok((l - 1) * self.batch + i)
                }
            })
            .collect()
    }

    /// Row permutation that reverses each example's valid prefix and leaves
    /// padding rows in place. It is its own inverse.
    pub fn reverse_perm(&self) -> Vec<usize> {
        let n = self.batch;
        let mut perm = Vec::with_capacity(self.rows());
        for t in 0..self.steps {
            for (i, &l) in self.lengths.iter().enumerate() {
                perm.push(if t < l {
                    (l - 1 - t) * n + i
                } else {
                    t * n + i
                });
            }
        }
        perm
    }

    /// Row `t·n + i → i`: tiles a per-example `[n × D]` matrix over time.
    pub fn tile_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r % self.batch).collect()
    }
}
