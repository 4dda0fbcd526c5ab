//! Batched layer kernels. Every input carries the batch as its leading
//! dimension.

use crate::tensor::Tensor;
use crate::Scalar;

pub(crate) fn dense_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let n = x.shape()[0];
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut y = Tensor::zeros(&[n, out]);
    for s in 0..n {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        for o in 0..out {
            let wr = &wd[o * inp..(o + 1) * inp];
            let mut acc = b.data()[o];
            for (wi, xi) in wr.iter().zip(xs) {
                acc = acc + *wi * *xi;
            }
            ys[o] = acc;
        }
    }
    y
}

/// Returns `(dw, db, dx)`; `dx` has the shape of `x`.
pub(crate) fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let n = x.shape()[0];
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut dw = Tensor::zeros(&[out, inp]);
    let mut db = Tensor::zeros(&[out]);
    let mut dx = Tensor::zeros(x.shape());
    let wd = w.data();
    for s in 0..n {
        let xs = x.row(s);
        let dys = dy.row(s);
        {
            let dwd = dw.data_mut();
            for o in 0..out {
                let g = dys[o];
                if g == S::zero() {
                    continue;
                }
                let row = &mut dwd[o * inp..(o + 1) * inp];
                for (d, xi) in row.iter_mut().zip(xs) {
                    *d = *d + g * *xi;
                }
            }
        }
        for o in 0..out {
            db.data_mut()[o] = db.data()[o] + dys[o];
        }
        let dxs = dx.row_mut(s);
        for o in 0..out {
            let g = dys[o];
            if g == S::zero() {
                continue;
            }
            let wr = &wd[o * inp..(o + 1) * inp];
            for (d, wi) in dxs.iter_mut().zip(wr) {
                *d = *d + g * *wi;
            }
        }
    }
    (dw, db, dx)
}

fn conv_dims(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>) -> (usize, usize, usize, usize, usize, usize, usize) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, k) = (ws[0], ws[2]);
    debug_assert_eq!(ws[1], c);
    (n, c, h, wd, f, k, k)
}

/// Valid (unpadded) stride-1 convolution.
pub(crate) fn conv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, wi, f, kh, kw) = conv_dims(x, w);
    let (ho, wo) = (h - kh + 1, wi - kw + 1);
    let mut y = Tensor::zeros(&[n, f, ho, wo]);
    let wd = w.data();
    for s in 0..n {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        for fi in 0..f {
            let bias = b.data()[fi];
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias;
                    for ci in 0..c {
                        for a in 0..kh {
                            let xrow = &xs[ci * h * wi + (i + a) * wi + j..][..kw];
                            let wrow = &wd[((fi * c + ci) * kh + a) * kw..][..kw];
                            for (xv, wv) in xrow.iter().zip(wrow) {
                                acc = acc + *xv * *wv;
                            }
                        }
                    }
                    ys[(fi * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, c, h, wi, f, kh, kw) = conv_dims(x, w);
    let (ho, wo) = (h - kh + 1, wi - kw + 1);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[f]);
    let mut dx = Tensor::zeros(x.shape());
    let wd = w.data();
    for s in 0..n {
        let xs = x.row(s);
        let dys = dy.row(s);
        for fi in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let g = dys[(fi * ho + i) * wo + j];
                    if g == S::zero() {
                        continue;
                    }
                    db.data_mut()[fi] = db.data()[fi] + g;
                    for ci in 0..c {
                        for a in 0..kh {
                            let xoff = ci * h * wi + (i + a) * wi + j;
                            let woff = ((fi * c + ci) * kh + a) * kw;
                            for bcol in 0..kw {
                                let dwd = dw.data_mut();
                                dwd[woff + bcol] = dwd[woff + bcol] + g * xs[xoff + bcol];
                            }
                            let dxs = dx.row_mut(s);
                            for bcol in 0..kw {
                                dxs[xoff + bcol] = dxs[xoff + bcol] + g * wd[woff + bcol];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped.
pub(crate) fn maxpool_forward<S: Scalar>(x: &Tensor<S>, size: usize) -> Tensor<S> {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (h / size, w / size);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    for s in 0..n {
        let xr = x.row(s);
        let yr = y.row_mut(s);
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let (_, v) = pool_argmax(xr, ci, h, w, i, j, size);
                    yr[(ci * ho + i) * wo + j] = v;
                }
            }
        }
    }
    y
}

pub(crate) fn maxpool_backward<S: Scalar>(x: &Tensor<S>, size: usize, dy: &Tensor<S>) -> Tensor<S> {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (h / size, w / size);
    let mut dx = Tensor::zeros(xs);
    for s in 0..n {
        let xr = x.row(s).to_vec();
        let dyr = dy.row(s).to_vec();
        let dxr = dx.row_mut(s);
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let (idx, _) = pool_argmax(&xr, ci, h, w, i, j, size);
                    dxr[idx] = dxr[idx] + dyr[(ci * ho + i) * wo + j];
                }
            }
        }
    }
    dx
}

/// First maximum in row-major order within window `(i, j)` of channel `ci`.
fn pool_argmax<S: Scalar>(xr: &[S], ci: usize, h: usize, w: usize, i: usize, j: usize, size: usize) -> (usize, S) {
    let mut best = ci * h * w + i * size * w + j * size;
    let mut bv = xr[best];
    for a in 0..size {
        for b in 0..size {
            let idx = ci * h * w + (i * size + a) * w + j * size + b;
            if xr[idx] > bv {
                bv = xr[idx];
                best = idx;
            }
        }
    }
    (best, bv)
}

pub(crate) fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub(crate) fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= S::zero() {
            *d = S::zero();
        }
    }
    dx
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row<S: Scalar>(z: &[S]) -> Vec<S> {
    let m = z.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / sum).collect()
}
