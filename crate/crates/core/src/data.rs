//! Labelled sample sets and sample streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Inputs (one sample per row) with one class label per row. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Matrix, Vec<usize>)> {
        let x = self.inputs.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(idx)?;
        Dataset::new(x, y)
    }

    /// A random draw without replacement, in shuffled order.
    pub fn sample_stream(&self, seed: u64) -> SampleStream<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        SampleStream {
            data: self,
            order,
            pos: 0,
        }
    }

    /// Rows in stored order.
    pub fn sequential_stream(&self) -> SampleStream<'_> {
        SampleStream {
            data: self,
            order: (0..self.len()).collect(),
            pos: 0,
        }
    }
}

/// Finite stream of samples from a [`Dataset`].
#[derive(Debug, Clone)]
pub struct SampleStream<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
}

impl SampleStream<'_> {
    pub fn remaining(&self) -> usize {
        self.order.len() - self.pos
    }

    /// Next `n` samples as a batch; a data error if fewer remain.
    pub fn take_batch(&mut self, n: usize) -> Result<(Matrix, Vec<usize>)> {
        if n > self.remaining() {
            return Err(Error::Data(format!(
                "sample stream exhausted: wanted {n}, {} left",
                self.remaining()
            )));
        }
        let idx = &self.order[self.pos..self.pos + n];
        self.pos += n;
        self.data.batch(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_exhaustion_is_a_data_error() {
        let d = Dataset::new(Matrix::seeded_gaussian(5, 2, 0.0, 1.0, 1), vec![0, 1, 0, 1, 0]).unwrap();
        let mut s = d.sample_stream(3);
        s.take_batch(3).unwrap();
        assert!(matches!(s.take_batch(3), Err(Error::Data(_))));
        assert_eq!(s.take_batch(2).unwrap().1.len(), 2);
    }

    #[test]
    fn stream_order_is_seeded() {
        let d = Dataset::new(Matrix::seeded_gaussian(20, 2, 0.0, 1.0, 1), (0..20).map(|i| i % 3).collect()).unwrap();
        let a = d.sample_stream(9).take_batch(20).unwrap();
        let b = d.sample_stream(9).take_batch(20).unwrap();
        assert_eq!(a, b);
    }
}
