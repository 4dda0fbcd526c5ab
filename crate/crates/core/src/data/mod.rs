//! Datasets, partitioning, triggers and validation sampling.

mod io;
mod partition;
mod synth;
mod trigger;
mod validation;

pub use io::{load_csv, load_idx, parse_csv, parse_idx, write_csv};
pub use partition::{partition, PartitionPlan, PartitionScheme};
pub use synth::{synth_blobs, synth_images};
pub use trigger::{embed_trigger, triggered_set, TriggerCell, TriggerSpec};
pub use validation::{sample_validation, ValidationMode, ValidationSpec};

use crate::error::{config, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Labelled samples. `features` is `n × d` or `n × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    features: Tensor<S>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: Tensor<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() < 2 {
            return config("dataset features need a batch dimension and a sample shape");
        }
        if features.shape()[0] != labels.len() {
            return config(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return config(format!("label {bad} outside {num_classes} classes"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// An empty dataset with the given per-sample shape.
    pub fn empty(sample_shape: &[usize], num_classes: usize) -> Self {
        let mut shape = vec![0];
        shape.extend_from_slice(sample_shape);
        Self {
            features: Tensor::new(shape, Vec::new()).expect("zero-length tensor"),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[S] {
        let w = self.sample_len();
        &self.features.data()[i * w..(i + 1) * w]
    }

    /// Features and labels of the samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch layout"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.batch(indices);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Concatenation of `self` and `other`; both must share the sample shape.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.sample_shape() != other.sample_shape() {
            return config("cannot concatenate datasets with different sample shapes");
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut shape = vec![self.len() + other.len()];
        shape.extend_from_slice(self.sample_shape());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(
            Tensor::new(shape, data)?,
            labels,
            self.num_classes.max(other.num_classes),
        )
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.num_classes)
    }

    pub(crate) fn features_mut(&mut self) -> &mut Tensor<S> {
        &mut self.features
    }

    /// Reinterprets every sample with a new shape of equal size.
    pub fn reshape_samples(&self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Self::new(
            self.features.clone().reshape(shape)?,
            self.labels.clone(),
            self.num_classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
