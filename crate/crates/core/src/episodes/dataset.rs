use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nd::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Class-labeled embedding vectors.
///
/// Records keep their insertion order so that a dataset written back to
/// disk reproduces its source byte for byte; `by_class` indexes them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    split: Split,
    labels: Vec<u32>,
    data: Vec<f64>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, split: Split) -> Self {
        Self { dim, split, labels: Vec::new(), data: Vec::new(), by_class: BTreeMap::new() }
    }

    pub fn push(&mut self, class_id: u32, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "vector of length {} in a dataset of dim {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(bad) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "record {} (class {class_id}) has non-finite coordinate {bad}",
                self.labels.len()
            )));
        }
        self.by_class.entry(class_id).or_default().push(self.labels.len());
        self.labels.push(class_id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_size(&self, class_id: u32) -> usize {
        self.by_class.get(&class_id).map_or(0, Vec::len)
    }

    /// Record indices of one class, in insertion order.
    pub fn class_records(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn record(&self, index: usize) -> (u32, &[f64]) {
        (self.labels[index], &self.data[index * self.dim..(index + 1) * self.dim])
    }

    pub fn records(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.labels.iter().copied().zip(self.data.chunks(self.dim.max(1)))
    }

    /// All vectors of one class as a `count x dim` matrix.
    pub fn class_matrix(&self, class_id: u32) -> Tensor {
        let rows = self.class_records(class_id);
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.record(r).1);
        }
        Tensor::from_parts(vec![rows.len(), self.dim], data)
    }

    /// Mean over every sample of the class: the reference ("real")
    /// prototype used by the bias diagnostics.
    pub fn class_mean(&self, class_id: u32) -> Option<Vec<f64>> {
        let rows = self.by_class.get(&class_id)?;
        let mut mean = vec![0.0; self.dim];
        for &r in rows {
            mean.iter_mut().zip(self.record(r).1).for_each(|(m, v)| *m += v);
        }
        let n = rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }

    /// Restriction to the given classes, keeping record order.
    pub fn subset(&self, classes: &[u32], split: Split) -> Self {
        let mut out = Self::new(self.dim, split);
        for (c, v) in self.records() {
            if classes.contains(&c) {
                out.push(c, v).expect("validated on insert");
            }
        }
        out
    }

    /// Partitions classes in ascending id order into train/val/test.
    pub fn split_by_classes(&self, train: usize, val: usize, test: usize) -> Result<[Self; 3]> {
        let ids = self.class_ids();
        if train + val + test > ids.len() {
            return Err(Error::Config(format!(
                "split {train}/{val}/{test} needs {} classes, dataset has {}",
                train + val + test,
                ids.len()
            )));
        }
        let (a, rest) = ids.split_at(train);
        let (b, rest) = rest.split_at(val);
        let c = &rest[..test];
        Ok([self.subset(a, Split::Train), self.subset(b, Split::Val), self.subset(c, Split::Test)])
    }

    /// Errors if the two datasets share any class id.
    pub fn ensure_disjoint(&self, other: &Self) -> Result<()> {
        if let Some(c) = self.by_class.keys().find(|c| other.by_class.contains_key(c)) {
            return Err(Error::Validation(format!(
                "class {c} appears in both the {} and {} splits",
                self.split, other.split
            )));
        }
        Ok(())
    }
}
