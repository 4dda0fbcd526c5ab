use rand::seq::index::sample;

use super::Dataset;
use crate::error::{config, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValidationMode {
    /// Uniform without replacement.
    Uniform,
    /// `round(theta · size)` samples from `class`, the rest uniform over the
    /// other classes.
    Biased { theta: f64, class: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationSpec {
    pub size: usize,
    pub mode: ValidationMode,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            size: 100,
            mode: ValidationMode::Uniform,
        }
    }
}

pub fn sample_validation<S: crate::Scalar>(
    dataset: &Dataset<S>,
    spec: &ValidationSpec,
    seed: u64,
) -> Result<Dataset<S>> {
    if spec.size > dataset.len() {
        return Err(Error::Sampling(format!(
            "validation size {} exceeds pool of {}",
            spec.size,
            dataset.len()
        )));
    }
    let mut r = rng::rng(seed);
    let mut picked = match spec.mode {
        ValidationMode::Uniform => sample(&mut r, dataset.len(), spec.size).into_vec(),
        ValidationMode::Biased { theta, class } => {
            if !(0.0..=1.0).contains(&theta) {
                return config(format!("bias probability {theta} outside [0, 1]"));
            }
            if class >= dataset.num_classes() {
                return config(format!(
                    "biased class {class} outside {} classes",
                    dataset.num_classes()
                ));
            }
            let k = (theta * spec.size as f64).round() as usize;
            let (inside, outside): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| dataset.labels()[i] == class);
            if inside.len() < k {
                return Err(Error::Sampling(format!(
                    "class {class} has {} samples, {k} requested",
                    inside.len()
                )));
            }
            if outside.len() < spec.size - k {
                return Err(Error::Sampling(format!(
                    "other classes have {} samples, {} requested",
                    outside.len(),
                    spec.size - k
                )));
            }
            let mut out: Vec<usize> = sample(&mut r, inside.len(), k).into_iter().map(|i| inside[i]).collect();
            out.extend(
                sample(&mut r, outside.len(), spec.size - k)
                    .into_iter()
                    .map(|i| outside[i]),
            );
            out
        }
    };
    picked.sort_unstable();
    Ok(dataset.subset(&picked))
}
