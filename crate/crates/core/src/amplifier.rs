//! Gradient amplification.
//!
//! Two transforms extract the most activated components of each client
//! gradient before the aggregator scores it:
//!
//! * **max-filter** (`mp`): every parameter tensor is viewed as a matrix,
//!   split into `k × k` patches and reduced to the per-patch maximum;
//! * **explanation-guided** (`xai`): the client's model is run on the
//!   server's clean set, conv filters are ranked by their Grad-CAM weight
//!   `α_k = mean_ij ∂y/∂A^k_ij`, and only the gradients of the top filters
//!   are kept.
//!
//! With `restore_size` the surviving values are written back at their
//! original positions and everything else is zero, so the result is again a
//! full-size gradient.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{config, shape, Error, Result};
use crate::nn::{apply_update, ClassScore, GradientSet, ModelParams};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AmplifierKind {
    #[default]
    None,
    Mp,
    Xai,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmplifierConfig {
    pub kind: AmplifierKind,
    pub kernel: usize,
    pub top_p: f64,
    pub restore_size: bool,
    /// Whether bias vectors take part in max-filtering.
    pub include_bias: bool,
    pub class_score: ClassScore,
}

impl Default for AmplifierConfig {
    fn default() -> Self {
        Self {
            kind: AmplifierKind::None,
            kernel: 3,
            top_p: 0.5,
            restore_size: false,
            include_bias: true,
            class_score: ClassScore::TrueLabel,
        }
    }
}

impl AmplifierConfig {
    pub fn mp(kernel: usize) -> Self {
        Self {
            kind: AmplifierKind::Mp,
            kernel,
            ..Self::default()
        }
    }

    pub fn xai(top_p: f64) -> Self {
        Self {
            kind: AmplifierKind::Xai,
            top_p,
            ..Self::default()
        }
    }

    pub fn restored(mut self) -> Self {
        self.restore_size = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return config("max-filter kernel must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return config(format!("top_p {} outside (0, 1]", self.top_p));
        }
        Ok(())
    }
}

/// Output grid of one max-filtered tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    /// No amplification; values are the flattened gradient.
    Identity,
    /// One grid per amplified parameter tensor (`None` where skipped).
    Patches(Vec<Option<PatchGrid>>),
    /// Selected conv filters in descending importance.
    Filters(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmplifiedGradient<S> {
    pub values: Vec<S>,
    pub provenance: Provenance,
    /// Length of the flattened source gradient.
    pub original_len: usize,
    pub restored: bool,
}

impl<S: Scalar> AmplifiedGradient<S> {
    pub fn identity(grad: &GradientSet<S>) -> Self {
        let values = grad.flatten();
        Self {
            original_len: values.len(),
            values,
            provenance: Provenance::Identity,
            restored: false,
        }
    }

    /// Reinterprets a full-size vector with `layout`'s shapes.
    pub fn to_gradient(&self, layout: &GradientSet<S>) -> Result<GradientSet<S>> {
        if self.values.len() != self.original_len {
            return shape("amplified vector was not restored to full size");
        }
        layout.with_values(&self.values)
    }
}

/// Per-patch maxima and the flat index of each maximum (first occurrence in
/// row-major order). Partial edge patches are reduced as they are.
fn patch_maxima<S: Scalar>(data: &[S], rows: usize, cols: usize, k: usize) -> (Vec<S>, Vec<usize>, usize, usize) {
    let (out_rows, out_cols) = (rows.div_ceil(k), cols.div_ceil(k));
    let mut vals = Vec::with_capacity(out_rows * out_cols);
    let mut idx = Vec::with_capacity(out_rows * out_cols);
    for pr in 0..out_rows {
        let r_end = ((pr + 1) * k).min(rows);
        for pc in 0..out_cols {
            let c_end = ((pc + 1) * k).min(cols);
            let mut best = pr * k * cols + pc * k;
            let mut bv = data[best];
            for r in pr * k..r_end {
                let row = &data[r * cols..(r + 1) * cols];
                for (c, &v) in row.iter().enumerate().take(c_end).skip(pc * k) {
                    if v > bv {
                        bv = v;
                        best = r * cols + c;
                    }
                }
            }
            vals.push(bv);
            idx.push(best);
        }
    }
    (vals, idx, out_rows, out_cols)
}

fn check_matrix<S: Scalar>(m: &Tensor<S>, k: usize) -> Result<(usize, usize)> {
    if m.shape().len() != 2 {
        return shape(format!("max-filter needs a matrix, got {:?}", m.shape()));
    }
    if k == 0 {
        return config("max-filter kernel must be at least 1");
    }
    Ok((m.shape()[0], m.shape()[1]))
}

/// `⌈H/k⌉ × ⌈W/k⌉` grid of per-patch maxima.
pub fn max_filter<S: Scalar>(m: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let (rows, cols) = check_matrix(m, k)?;
    let (vals, _, or, oc) = patch_maxima(m.data(), rows, cols, k);
    Tensor::new(vec![or, oc], vals)
}

/// Same shape as `m`: each patch maximum at its position, zeros elsewhere.
pub fn max_filter_restored<S: Scalar>(m: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let (rows, cols) = check_matrix(m, k)?;
    let (vals, idx, _, _) = patch_maxima(m.data(), rows, cols, k);
    let mut out = Tensor::zeros(m.shape());
    for (v, i) in vals.into_iter().zip(idx) {
        out.data_mut()[i] = v;
    }
    Ok(out)
}

fn amplify_one_mp<S: Scalar>(grad: &GradientSet<S>, cfg: &AmplifierConfig) -> AmplifiedGradient<S> {
    let original_len = grad.num_values();
    let mut grids = Vec::with_capacity(grad.tensors.len());
    let mut values = if cfg.restore_size {
        vec![S::zero(); original_len]
    } else {
        Vec::new()
    };
    let mut offset = 0;
    for (ti, t) in grad.tensors.iter().enumerate() {
        let is_bias = ti % 2 == 1;
        if is_bias && !cfg.include_bias {
            grids.push(None);
            offset += t.len();
            continue;
        }
        let (rows, cols) = t.matrix_dims();
        let (vals, idx, out_rows, out_cols) = patch_maxima(t.data(), rows, cols, cfg.kernel);
        if cfg.restore_size {
            for (v, i) in vals.into_iter().zip(idx) {
                values[offset + i] = v;
            }
        } else {
            values.extend(vals);
        }
        grids.push(Some(PatchGrid {
            rows,
            cols,
            out_rows,
            out_cols,
        }));
        offset += t.len();
    }
    AmplifiedGradient {
        values,
        provenance: Provenance::Patches(grids),
        original_len,
        restored: cfg.restore_size,
    }
}

/// Max-filter amplification of every client gradient, order preserved.
pub fn amplify_mp<S: Scalar>(grads: &[GradientSet<S>], cfg: &AmplifierConfig) -> Result<Vec<AmplifiedGradient<S>>> {
    cfg.validate()?;
    if let Some(first) = grads.first() {
        if grads.iter().any(|g| !g.same_layout(first)) {
            return shape("client gradients have different layouts");
        }
    }
    Ok(grads.par_iter().map(|g| amplify_one_mp(g, cfg)).collect())
}

/// Grad-CAM channel weights `α_k = (1/Z) Σ_ij ∂y/∂A^k_ij`. Accepts `K × H × W`
/// or a batch `n × K × H × W`, in which case the batch is summed first (the
/// score is summed over the batch).
pub fn grad_cam_weights<S: Scalar>(feature_map_grads: &Tensor<S>) -> Result<Vec<S>> {
    let s = feature_map_grads.shape();
    let (batch, k, z) = match s {
        [k, h, w] => (1, *k, h * w),
        [n, k, h, w] => (*n, *k, h * w),
        _ => return shape(format!("feature-map gradients must be 3-D or 4-D, got {s:?}")),
    };
    let data = feature_map_grads.data();
    let mut alpha = vec![S::zero(); k];
    for b in 0..batch {
        for (ch, a) in alpha.iter_mut().enumerate() {
            let start = (b * k + ch) * z;
            *a = *a + data[start..start + z].iter().copied().sum::<S>();
        }
    }
    let zs = S::of_usize(z);
    Ok(alpha.into_iter().map(|a| a / zs).collect())
}

/// Indices of the top `⌈p·K⌉` weights, descending; ties keep index order.
pub fn select_top<S: Scalar>(weights: &[S], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal));
    let keep = ((top_p * weights.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    order.truncate(keep.min(weights.len()));
    order
}

/// Grad-CAM weights of the model obtained by applying `update` to `model`,
/// evaluated on `validation`.
pub fn filter_importance<S: Scalar>(
    model: &ModelParams<S>,
    update: &GradientSet<S>,
    validation: &Dataset<S>,
    score: ClassScore,
) -> Result<Vec<S>> {
    if model.last_conv().is_none() {
        return Err(Error::Unsupported(
            "explanation-guided amplification needs a convolutional layer".into(),
        ));
    }
    if validation.is_empty() {
        return config("validation set is empty");
    }
    let received = apply_update(model, update, S::one())?;
    let idx: Vec<usize> = (0..validation.len()).collect();
    let (x, y) = validation.batch(&idx);
    let trace = received.forward(&x)?;
    let grads = received.backward_with(&trace, &y, Some(score))?;
    grad_cam_weights(grads.feature_map_grads.as_ref().expect("captured"))
}

/// Keeps the last conv layer's weight gradients for `selection` (in that
/// order) from `grad`.
pub fn amplify_with_selection<S: Scalar>(
    grad: &GradientSet<S>,
    model: &ModelParams<S>,
    selection: &[usize],
    restore_size: bool,
) -> Result<AmplifiedGradient<S>> {
    let pidx = model
        .last_conv_param_index()
        .ok_or_else(|| Error::Unsupported("explanation-guided amplification needs a convolutional layer".into()))?;
    if !grad.congruent(model) {
        return shape("gradient is not congruent with the model");
    }
    let conv = &grad.tensors[pidx];
    let filters = conv.shape()[0];
    let fan = conv.len() / filters;
    if let Some(&bad) = selection.iter().find(|&&f| f >= filters) {
        return config(format!("filter {bad} outside {filters}"));
    }
    let original_len = grad.num_values();
    let values = if restore_size {
        let offset: usize = grad.tensors[..pidx].iter().map(|t| t.len()).sum();
        let mut v = vec![S::zero(); original_len];
        for &f in selection {
            let src = &conv.data()[f * fan..(f + 1) * fan];
            v[offset + f * fan..offset + (f + 1) * fan].copy_from_slice(src);
        }
        v
    } else {
        selection
            .iter()
            .flat_map(|&f| conv.data()[f * fan..(f + 1) * fan].iter().copied())
            .collect()
    };
    Ok(AmplifiedGradient {
        values,
        provenance: Provenance::Filters(selection.to_vec()),
        original_len,
        restored: restore_size,
    })
}

/// Explanation-guided amplification: every client's own updated model picks
/// its top filters.
pub fn amplify_xai<S: Scalar>(
    grads: &[GradientSet<S>],
    model: &ModelParams<S>,
    validation: &Dataset<S>,
    cfg: &AmplifierConfig,
) -> Result<Vec<AmplifiedGradient<S>>> {
    cfg.validate()?;
    if model.last_conv().is_none() {
        return Err(Error::Unsupported(
            "explanation-guided amplification needs a convolutional layer".into(),
        ));
    }
    grads
        .par_iter()
        .map(|g| {
            let alpha = filter_importance(model, g, validation, cfg.class_score)?;
            let selection = select_top(&alpha, cfg.top_p);
            amplify_with_selection(g, model, &selection, cfg.restore_size)
        })
        .collect()
}

/// Dispatches on `cfg.kind`. `validation` is only used by `xai`.
pub fn amplify<S: Scalar>(
    grads: &[GradientSet<S>],
    model: &ModelParams<S>,
    validation: &Dataset<S>,
    cfg: &AmplifierConfig,
) -> Result<Vec<AmplifiedGradient<S>>> {
    match cfg.kind {
        AmplifierKind::None => Ok(grads.iter().map(AmplifiedGradient::identity).collect()),
        AmplifierKind::Mp => amplify_mp(grads, cfg),
        AmplifierKind::Xai => amplify_xai(grads, model, validation, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::matrix(rows)
    }

    #[test]
    fn single_patch() {
        assert_eq!(max_filter(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn four_by_four_kernel_two() {
        let t = Tensor::new(vec![4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let out = max_filter(&t, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn kernel_one_is_identity() {
        let t = m(&[&[1.0, -2.0, 3.0], &[0.5, 7.0, -1.0]]);
        assert_eq!(max_filter(&t, 1).unwrap(), t);
    }

    #[test]
    fn ragged_edges_use_partial_patches() {
        let t = m(&[&[1.0, 2.0, 9.0], &[3.0, 4.0, -1.0], &[5.0, 0.0, -7.0]]);
        let out = max_filter(&t, 2).unwrap();
        assert_eq!(out.data(), &[4.0, 9.0, 5.0, -7.0]);
    }

    #[test]
    fn signed_max_not_absolute() {
        assert_eq!(max_filter(&m(&[&[-9.0, -1.0]]), 2).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn restore_puts_max_at_argmax() {
        let r = max_filter_restored(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), 2).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn restore_tie_break_is_first_row_major() {
        let r = max_filter_restored(&m(&[&[5.0, 5.0], &[5.0, 5.0]]), 2).unwrap();
        assert_eq!(r.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_cam_weights_are_spatial_means() {
        let c = Tensor::new(vec![2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(grad_cam_weights(&c).unwrap(), vec![3.0, 2.5]);
    }

    #[test]
    fn top_half_of_four() {
        assert_eq!(select_top(&[0.1, 0.9, 0.5, 0.3], 0.5), vec![1, 2]);
        assert_eq!(select_top(&[0.1, 0.9, 0.5, 0.3], 1.0), vec![1, 2, 3, 0]);
    }

    #[test]
    fn mp_vector_layout() {
        let g = GradientSet::new(vec![
            Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(),
            Tensor::vector(vec![-1.0, -2.0, 3.0]),
        ]);
        let out = amplify_mp(std::slice::from_ref(&g), &AmplifierConfig::mp(2)).unwrap();
        assert_eq!(out[0].values, vec![6.0, 8.0, -1.0, 3.0]);
        let no_bias = AmplifierConfig {
            include_bias: false,
            ..AmplifierConfig::mp(2)
        };
        let out = amplify_mp(std::slice::from_ref(&g), &no_bias).unwrap();
        assert_eq!(out[0].values, vec![6.0, 8.0]);
        let restored = amplify_mp(std::slice::from_ref(&g), &AmplifierConfig::mp(2).restored()).unwrap();
        assert_eq!(restored[0].values.len(), 11);
        assert_eq!(
            restored[0].values,
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 6.0, 0.0, 8.0, -1.0, 0.0, 3.0]
        );
        assert!(restored[0].to_gradient(&g).is_ok());
    }

    #[test]
    fn xai_on_mlp_is_unsupported() {
        let model = ModelParams::<f64>::mlp(4, &[3], 2, 0).unwrap();
        let g = GradientSet::zeros_like(&model);
        let val = crate::data::synth_blobs(2, 3, 4, 1.0, 0).unwrap();
        let r = amplify_xai(&[g], &model, &val, &AmplifierConfig::xai(0.5));
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
