use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{config, Result};
use crate::tensor::Tensor;
use crate::{rng, Scalar};

/// Gaussian class clusters. Class centres are standard normal draws; each
/// sample adds `spread`-scaled standard normal noise. Labels cycle through
/// the classes so every prefix is near balanced.
pub fn synth_blobs<S: Scalar>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return config("blob counts must be at least 1");
    }
    let mut r = rng::rng(seed);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &mu in &centres[c] {
            let noise: f64 = StandardNormal.sample(&mut r);
            data.push(S::of(mu + spread * noise));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, num_classes)
}

/// Image-shaped clusters with pixels in `[0, 1]`: class centres are uniform
/// draws, samples add `spread`-scaled normal noise and are clamped.
pub fn synth_images<S: Scalar>(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    spread: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    let dim: usize = shape.iter().product();
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return config("image counts must be at least 1");
    }
    let mut r = rng::rng(seed);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| r.random::<f64>()).collect())
        .collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &mu in &centres[c] {
            let noise: f64 = StandardNormal.sample(&mut r);
            data.push(S::of((mu + spread * noise).clamp(0.0, 1.0)));
        }
        labels.push(c);
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    Dataset::new(Tensor::new(full, data)?, labels, num_classes)
}
