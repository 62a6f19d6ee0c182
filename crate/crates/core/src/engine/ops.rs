//! Differentiable f64 primitives.
//!
//! Every forward has a matching reverse-mode backward; callers keep whatever
//! caches the backward needs. Feature maps are `(batch, channels, time)`,
//! flattened activations `(batch, features)`. All reductions run in a fixed
//! order, so results are bit-reproducible for a given input.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: ndarray::Dimension> {
    pub value: ndarray::Array<f64, D>,
    pub grad: ndarray::Array<f64, D>,
}

pub type Param1 = Param<ndarray::Ix1>;
pub type Param2 = Param<ndarray::Ix2>;
pub type Param3 = Param<ndarray::Ix3>;

impl<D: ndarray::Dimension> Param<D> {
    pub fn new(value: ndarray::Array<f64, D>) -> Self {
        let grad = ndarray::Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Hands the flattened value/grad storage to a visitor. Owned arrays are
    /// standard layout, so the slices are always available.
    pub fn expose(&mut self, name: String, f: &mut dyn FnMut(ParamView)) {
        let shape = self.value.shape().to_vec();
        f(ParamView {
            name,
            shape,
            value: self.value.as_slice_mut().expect("param is standard layout"),
            grad: self.grad.as_slice_mut().expect("param grad is standard layout"),
        })
    }
}

/// Flat view of one named parameter, used by optimizers, checkpoints and the
/// gradient checker.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Same-padded 1D convolution. `x` is `(B, C_in, T)`, `w` is
/// `(C_out, C_in, K)`, output `(B, C_out, ceil(T / stride))`.
pub struct ConvCache {
    x_col: Array2<f64>,
    in_dim: (usize, usize, usize),
    t_out: usize,
    pad_left: usize,
}

pub fn conv1d_forward(
    x: &Array3<f64>,
    w: &Array3<f64>,
    b: &Array1<f64>,
    stride: usize,
) -> (Array3<f64>, ConvCache) {
    let (batch, c_in, t) = x.dim();
    let (c_out, c_in_w, k) = w.dim();
    assert_eq!(c_in, c_in_w, "conv input channels");
    assert_eq!(b.len(), c_out, "conv bias width");
    assert!(stride >= 1);
    let t_out = (t + stride - 1) / stride;
    let pad_total = ((t_out - 1) * stride + k).saturating_sub(t);
    let pad_left = pad_total / 2;

    let mut x_col = Array2::<f64>::zeros((c_in * k, batch * t_out));
    {
        let xs = x.as_slice().expect("input is standard layout");
        let cols = x_col.as_slice_mut().unwrap();
        let n_cols = batch * t_out;
        for c in 0..c_in {
            for kk in 0..k {
                let row = (c * k + kk) * n_cols;
                for bi in 0..batch {
                    let x_base = (bi * c_in + c) * t;
                    let col_base = row + bi * t_out;
                    for to in 0..t_out {
                        let ti = (to * stride + kk) as isize - pad_left as isize;
                        if ti >= 0 && (ti as usize) < t {
                            cols[col_base + to] = xs[x_base + ti as usize];
                        }
                    }
                }
            }
        }
    }

    let w2 = w.view().into_shape((c_out, c_in * k)).unwrap();
    let y2 = w2.dot(&x_col);
    let mut y = Array3::<f64>::zeros((batch, c_out, t_out));
    {
        let ys = y.as_slice_mut().unwrap();
        let y2s = y2.as_slice().unwrap();
        for co in 0..c_out {
            let bias = b[co];
            for bi in 0..batch {
                let src = co * batch * t_out + bi * t_out;
                let dst = (bi * c_out + co) * t_out;
                for to in 0..t_out {
                    ys[dst + to] = y2s[src + to] + bias;
                }
            }
        }
    }
    (y, ConvCache { x_col, in_dim: (batch, c_in, t), t_out, pad_left })
}

pub fn conv1d_backward(
    gy: &Array3<f64>,
    w: &Array3<f64>,
    stride: usize,
    cache: &ConvCache,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (batch, c_in, t) = cache.in_dim;
    let (c_out, _, k) = w.dim();
    let t_out = cache.t_out;
    assert_eq!(gy.dim(), (batch, c_out, t_out));

    let mut gy2 = Array2::<f64>::zeros((c_out, batch * t_out));
    let mut gb = Array1::<f64>::zeros(c_out);
    {
        let gys = gy.as_slice().expect("grad is standard layout");
        let g2 = gy2.as_slice_mut().unwrap();
        for bi in 0..batch {
            for co in 0..c_out {
                let src = (bi * c_out + co) * t_out;
                let dst = co * batch * t_out + bi * t_out;
                let mut s = 0.0;
                for to in 0..t_out {
                    let g = gys[src + to];
                    g2[dst + to] = g;
                    s += g;
                }
                gb[co] += s;
            }
        }
    }

    let gw2 = gy2.dot(&cache.x_col.t());
    let gw = gw2.into_shape((c_out, c_in, k)).unwrap();

    let w2 = w.view().into_shape((c_out, c_in * k)).unwrap();
    let gx_col = w2.t().dot(&gy2);
    let mut gx = Array3::<f64>::zeros((batch, c_in, t));
    {
        let gxs = gx.as_slice_mut().unwrap();
        let gcs = gx_col.as_slice().unwrap();
        let n_cols = batch * t_out;
        for c in 0..c_in {
            for kk in 0..k {
                let row = (c * k + kk) * n_cols;
                for bi in 0..batch {
                    let x_base = (bi * c_in + c) * t;
                    let col_base = row + bi * t_out;
                    for to in 0..t_out {
                        let ti = (to * stride + kk) as isize - cache.pad_left as isize;
                        if ti >= 0 && (ti as usize) < t {
                            gxs[x_base + ti as usize] += gcs[col_base + to];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Ceil-mode average pooling over time; partial windows at the right edge
/// average only the elements they cover.
pub fn pooled_len(t: usize, window: usize, stride: usize) -> usize {
    if t <= window {
        1
    } else {
        (t - window + stride - 1) / stride + 1
    }
}

pub fn avg_pool1d_forward(x: &Array3<f64>, window: usize, stride: usize) -> Array3<f64> {
    let (batch, c, t) = x.dim();
    let t_out = pooled_len(t, window, stride);
    let mut y = Array3::<f64>::zeros((batch, c, t_out));
    for bi in 0..batch {
        for ci in 0..c {
            for to in 0..t_out {
                let start = to * stride;
                let end = (start + window).min(t);
                let mut s = 0.0;
                for ti in start..end {
                    s += x[[bi, ci, ti]];
                }
                y[[bi, ci, to]] = s / (end - start) as f64;
            }
        }
    }
    y
}

pub fn avg_pool1d_backward(
    gy: &Array3<f64>,
    t_in: usize,
    window: usize,
    stride: usize,
) -> Array3<f64> {
    let (batch, c, t_out) = gy.dim();
    assert_eq!(t_out, pooled_len(t_in, window, stride));
    let mut gx = Array3::<f64>::zeros((batch, c, t_in));
    for bi in 0..batch {
        for ci in 0..c {
            for to in 0..t_out {
                let start = to * stride;
                let end = (start + window).min(t_in);
                let g = gy[[bi, ci, to]] / (end - start) as f64;
                for ti in start..end {
                    gx[[bi, ci, ti]] += g;
                }
            }
        }
    }
    gx
}

pub fn relu_forward<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output*; the gradient at exactly
/// zero is taken as zero.
pub fn relu_backward<D: ndarray::Dimension>(
    gy: &ndarray::Array<f64, D>,
    y: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gy.clone();
    azip_mask(&mut gx, y);
    gx
}

fn azip_mask<D: ndarray::Dimension>(gx: &mut ndarray::Array<f64, D>, y: &ndarray::Array<f64, D>) {
    ndarray::Zip::from(gx).and(y).for_each(|g, &yv| {
        if yv <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn sigmoid_forward<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward<D: ndarray::Dimension>(
    gy: &ndarray::Array<f64, D>,
    y: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| *g *= yv * (1.0 - yv));
    gx
}

/// Global average pooling over time: `(B, C, T)` to `(B, C)`.
pub fn gap_forward(x: &Array3<f64>) -> Array2<f64> {
    x.mean_axis(Axis(2)).unwrap()
}

pub fn gap_backward(g: &Array2<f64>, t: usize) -> Array3<f64> {
    let (batch, c) = g.dim();
    let mut gx = Array3::<f64>::zeros((batch, c, t));
    for bi in 0..batch {
        for ci in 0..c {
            let gv = g[[bi, ci]] / t as f64;
            for ti in 0..t {
                gx[[bi, ci, ti]] = gv;
            }
        }
    }
    gx
}

/// Global max pooling over time; returns the max and its first attaining
/// index per `(batch, channel)`.
pub fn gmp_forward(x: &Array3<f64>) -> (Array2<f64>, Array2<usize>) {
    let (batch, c, t) = x.dim();
    let mut y = Array2::<f64>::zeros((batch, c));
    let mut arg = Array2::<usize>::zeros((batch, c));
    for bi in 0..batch {
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_t = 0;
            for ti in 0..t {
                let v = x[[bi, ci, ti]];
                if v > best {
                    best = v;
                    best_t = ti;
                }
            }
            y[[bi, ci]] = best;
            arg[[bi, ci]] = best_t;
        }
    }
    (y, arg)
}

pub fn gmp_backward(g: &Array2<f64>, arg: &Array2<usize>, t: usize) -> Array3<f64> {
    let (batch, c) = g.dim();
    let mut gx = Array3::<f64>::zeros((batch, c, t));
    for bi in 0..batch {
        for ci in 0..c {
            gx[[bi, ci, arg[[bi, ci]]]] += g[[bi, ci]];
        }
    }
    gx
}

/// Per-timestep mean over channels: `(B, C, T)` to `(B, T)`.
pub fn channel_mean_forward(x: &Array3<f64>) -> Array2<f64> {
    x.mean_axis(Axis(1)).unwrap()
}

pub fn channel_mean_backward(g: &Array2<f64>, c: usize) -> Array3<f64> {
    let (batch, t) = g.dim();
    let mut gx = Array3::<f64>::zeros((batch, c, t));
    for bi in 0..batch {
        for ti in 0..t {
            let gv = g[[bi, ti]] / c as f64;
            for ci in 0..c {
                gx[[bi, ci, ti]] = gv;
            }
        }
    }
    gx
}

pub fn channel_max_forward(x: &Array3<f64>) -> (Array2<f64>, Array2<usize>) {
    let (batch, c, t) = x.dim();
    let mut y = Array2::<f64>::zeros((batch, t));
    let mut arg = Array2::<usize>::zeros((batch, t));
    for bi in 0..batch {
        for ti in 0..t {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = 0;
            for ci in 0..c {
                let v = x[[bi, ci, ti]];
                if v > best {
                    best = v;
                    best_c = ci;
                }
            }
            y[[bi, ti]] = best;
            arg[[bi, ti]] = best_c;
        }
    }
    (y, arg)
}

pub fn channel_max_backward(g: &Array2<f64>, arg: &Array2<usize>, c: usize) -> Array3<f64> {
    let (batch, t) = g.dim();
    let mut gx = Array3::<f64>::zeros((batch, c, t));
    for bi in 0..batch {
        for ti in 0..t {
            gx[[bi, arg[[bi, ti]], ti]] += g[[bi, ti]];
        }
    }
    gx
}

/// Affine map `y = x W + b` with `x: (B, F)`, `w: (F, U)`.
pub fn dense_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub fn dense_backward(
    gy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let gx = gy.dot(&w.t());
    let gw = x.t().dot(gy);
    let gb = gy.sum_axis(Axis(0));
    (gx, gw, gb)
}

/// Data-only dense backward, for gradients that must not touch parameter
/// accumulators (saliency passes).
pub fn dense_backward_data(gy: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    gy.dot(&w.t())
}

/// Broadcast-multiply per-channel weights: `y[b,c,t] = x[b,c,t] * m[b,c]`.
pub fn scale_channels_forward(x: &Array3<f64>, m: &Array2<f64>) -> Array3<f64> {
    let (batch, c, t) = x.dim();
    let mut y = x.clone();
    for bi in 0..batch {
        for ci in 0..c {
            let mv = m[[bi, ci]];
            for ti in 0..t {
                y[[bi, ci, ti]] *= mv;
            }
        }
    }
    y
}

pub fn scale_channels_backward(
    gy: &Array3<f64>,
    x: &Array3<f64>,
    m: &Array2<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (batch, c, t) = x.dim();
    let mut gx = Array3::<f64>::zeros((batch, c, t));
    let mut gm = Array2::<f64>::zeros((batch, c));
    for bi in 0..batch {
        for ci in 0..c {
            let mv = m[[bi, ci]];
            let mut s = 0.0;
            for ti in 0..t {
                let g = gy[[bi, ci, ti]];
                gx[[bi, ci, ti]] = g * mv;
                s += g * x[[bi, ci, ti]];
            }
            gm[[bi, ci]] = s;
        }
    }
    (gx, gm)
}

/// Broadcast-multiply per-timestep weights: `y[b,c,t] = x[b,c,t] * m[b,t]`.
pub fn scale_time_forward(x: &Array3<f64>, m: &Array2<f64>) -> Array3<f64> {
    let (batch, c, t) = x.dim();
    let mut y = x.clone();
    for bi in 0..batch {
        for ci in 0..c {
            for ti in 0..t {
                y[[bi, ci, ti]] *= m[[bi, ti]];
            }
        }
    }
    y
}

pub fn scale_time_backward(
    gy: &Array3<f64>,
    x: &Array3<f64>,
    m: &Array2<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (batch, c, t) = x.dim();
    let mut gx = Array3::<f64>::zeros((batch, c, t));
    let mut gm = Array2::<f64>::zeros((batch, t));
    for bi in 0..batch {
        for ci in 0..c {
            for ti in 0..t {
                let g = gy[[bi, ci, ti]];
                gx[[bi, ci, ti]] = g * m[[bi, ti]];
                gm[[bi, ti]] += g * x[[bi, ci, ti]];
            }
        }
    }
    (gx, gm)
}

/// Row-wise stable softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean categorical cross-entropy, fused with softmax for stability. Returns
/// the loss and the probability rows.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    assert_eq!(labels.len(), batch, "one label per logit row");
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (bi, mut row) in probs.rows_mut().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        loss -= (row[labels[bi] as usize] / s).ln();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    (loss / batch as f64, probs)
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(p - onehot) / B`.
pub fn cross_entropy_grad(probs: &Array2<f64>, labels: &[u8]) -> Array2<f64> {
    let batch = probs.nrows();
    let mut g = probs.clone();
    for (bi, mut row) in g.rows_mut().into_iter().enumerate() {
        row[labels[bi] as usize] -= 1.0;
        row.mapv_inplace(|v| v / batch as f64);
    }
    g
}

/// Inverted-dropout mask: entries are `0` with probability `rate`, else
/// `1 / (1 - rate)`, so the expected activation is unchanged.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha12Rng) -> Array2<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
    let keep = 1.0 - rate;
    let mut m = Array2::<f64>::zeros((rows, cols));
    for v in m.iter_mut() {
        if rng.gen::<f64>() >= rate {
            *v = 1.0 / keep;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of `analytic` against `f` at `x0`, h = 1e-5.
    fn finite_diff_check(
        f: &mut dyn FnMut(&[f64]) -> f64,
        x0: &[f64],
        analytic: &[f64],
        tol: f64,
    ) {
        let h = 1e-5;
        let mut x = x0.to_vec();
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let keep = x[i];
            x[i] = keep + h;
            let fp = f(&x);
            x[i] = keep - h;
            let fm = f(&x);
            x[i] = keep;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs() + num.abs();
            let rel = if denom < 1e-6 { 0.0 } else { (a - num).abs() / denom };
            worst = worst.max(rel);
            assert!(rel < tol, "coord {i}: analytic {a}, numeric {num}, rel {rel}");
        }
        let _ = worst;
    }

    #[test]
    fn conv1d_matches_direct_convolution() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (b, c_in, c_out, t, k) = (2, 3, 4, 9, 5);
        let x = rand_array(&[b, c_in, t], &mut rng).into_dimensionality().unwrap();
        let w = rand_array(&[c_out, c_in, k], &mut rng).into_dimensionality().unwrap();
        let bias: Array1<f64> =
            rand_array(&[c_out], &mut rng).into_dimensionality().unwrap();
        let (y, _) = conv1d_forward(&x, &w, &bias, 1);
        assert_eq!(y.dim(), (b, c_out, t));
        // Direct nested-loop oracle with explicit same padding.
        let pad = (k - 1) / 2;
        for bi in 0..b {
            for co in 0..c_out {
                for to in 0..t {
                    let mut s = bias[co];
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let ti = to as isize + kk as isize - pad as isize;
                            if ti >= 0 && (ti as usize) < t {
                                s += x[[bi, ci, ti as usize]] * w[[co, ci, kk]];
                            }
                        }
                    }
                    let got = y[[bi, co, to]];
                    assert!((got - s).abs() < 1e-12, "({bi},{co},{to}): {got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn conv1d_stride_two_shape() {
        let x = Array3::<f64>::zeros((1, 1, 7));
        let w = Array3::<f64>::zeros((2, 1, 3));
        let bias = Array1::<f64>::zeros(2);
        let (y, _) = conv1d_forward(&x, &w, &bias, 2);
        assert_eq!(y.dim(), (1, 2, 4));
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (b, c_in, c_out, t, k, stride) = (2, 2, 3, 8, 3, 1);
        let x0: Array3<f64> = rand_array(&[b, c_in, t], &mut rng).into_dimensionality().unwrap();
        let w0: Array3<f64> =
            rand_array(&[c_out, c_in, k], &mut rng).into_dimensionality().unwrap();
        let b0: Array1<f64> = rand_array(&[c_out], &mut rng).into_dimensionality().unwrap();
        let r: Array3<f64> =
            rand_array(&[b, c_out, t], &mut rng).into_dimensionality().unwrap();

        let (y, cache) = conv1d_forward(&x0, &w0, &b0, stride);
        let (gx, gw, gb) = conv1d_backward(&r, &w0, stride, &cache);
        let _ = y;

        let mut obj_x = |v: &[f64]| {
            let x = Array3::from_shape_vec((b, c_in, t), v.to_vec()).unwrap();
            let (y, _) = conv1d_forward(&x, &w0, &b0, stride);
            (&y * &r).sum()
        };
        finite_diff_check(&mut obj_x, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-7);

        let mut obj_w = |v: &[f64]| {
            let w = Array3::from_shape_vec((c_out, c_in, k), v.to_vec()).unwrap();
            let (y, _) = conv1d_forward(&x0, &w, &b0, stride);
            (&y * &r).sum()
        };
        finite_diff_check(&mut obj_w, w0.as_slice().unwrap(), gw.as_slice().unwrap(), 1e-7);

        let mut obj_b = |v: &[f64]| {
            let bias = Array1::from_vec(v.to_vec());
            let (y, _) = conv1d_forward(&x0, &w0, &bias, stride);
            (&y * &r).sum()
        };
        finite_diff_check(&mut obj_b, b0.as_slice().unwrap(), gb.as_slice().unwrap(), 1e-7);
    }

    #[test]
    fn avg_pool_halves_time_with_ceil() {
        assert_eq!(pooled_len(4, 2, 2), 2);
        assert_eq!(pooled_len(5, 2, 2), 3);
        assert_eq!(pooled_len(1, 2, 2), 1);
        assert_eq!(pooled_len(175, 2, 2), 88);
        let x = Array3::from_shape_vec((1, 1, 5), vec![1.0, 3.0, 5.0, 7.0, 4.0]).unwrap();
        let y = avg_pool1d_forward(&x, 2, 2);
        assert_eq!(y.as_slice().unwrap(), &[2.0, 6.0, 4.0]);
    }

    #[test]
    fn avg_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x0: Array3<f64> = rand_array(&[2, 3, 7], &mut rng).into_dimensionality().unwrap();
        let r: Array3<f64> = rand_array(&[2, 3, 4], &mut rng).into_dimensionality().unwrap();
        let gx = avg_pool1d_backward(&r, 7, 2, 2);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 3, 7), v.to_vec()).unwrap();
            (&avg_pool1d_forward(&x, 2, 2) * &r).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-8);
    }

    #[test]
    fn pooling_reductions_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x0: Array3<f64> = rand_array(&[2, 4, 6], &mut rng).into_dimensionality().unwrap();

        let r2: Array2<f64> = rand_array(&[2, 4], &mut rng).into_dimensionality().unwrap();
        let gx = gap_backward(&r2, 6);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 4, 6), v.to_vec()).unwrap();
            (&gap_forward(&x) * &r2).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-8);

        let (_, arg) = gmp_forward(&x0);
        let gx = gmp_backward(&r2, &arg, 6);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 4, 6), v.to_vec()).unwrap();
            (&gmp_forward(&x).0 * &r2).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-7);

        let rt: Array2<f64> = rand_array(&[2, 6], &mut rng).into_dimensionality().unwrap();
        let gx = channel_mean_backward(&rt, 4);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 4, 6), v.to_vec()).unwrap();
            (&channel_mean_forward(&x) * &rt).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-8);

        let (_, argc) = channel_max_forward(&x0);
        let gx = channel_max_backward(&rt, &argc, 4);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 4, 6), v.to_vec()).unwrap();
            (&channel_max_forward(&x).0 * &rt).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-7);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0: Array2<f64> = rand_array(&[3, 5], &mut rng).into_dimensionality().unwrap();
        let w0: Array2<f64> = rand_array(&[5, 4], &mut rng).into_dimensionality().unwrap();
        let b0: Array1<f64> = rand_array(&[4], &mut rng).into_dimensionality().unwrap();
        let r: Array2<f64> = rand_array(&[3, 4], &mut rng).into_dimensionality().unwrap();
        let (gx, gw, gb) = dense_backward(&r, &x0, &w0);

        let mut obj = |v: &[f64]| {
            let x = Array2::from_shape_vec((3, 5), v.to_vec()).unwrap();
            (&dense_forward(&x, &w0, &b0) * &r).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-8);
        let mut obj = |v: &[f64]| {
            let w = Array2::from_shape_vec((5, 4), v.to_vec()).unwrap();
            (&dense_forward(&x0, &w, &b0) * &r).sum()
        };
        finite_diff_check(&mut obj, w0.as_slice().unwrap(), gw.as_slice().unwrap(), 1e-8);
        let mut obj = |v: &[f64]| {
            let bias = Array1::from_vec(v.to_vec());
            (&dense_forward(&x0, &w0, &bias) * &r).sum()
        };
        finite_diff_check(&mut obj, b0.as_slice().unwrap(), gb.as_slice().unwrap(), 1e-8);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        // Keep values away from the ReLU kink so central differences are valid.
        let x0: Array2<f64> = Array2::from_shape_simple_fn((3, 4), || {
            let v: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        });
        let r: Array2<f64> = rand_array(&[3, 4], &mut rng).into_dimensionality().unwrap();

        let y = relu_forward(&x0);
        let gx = relu_backward(&r, &y);
        let mut obj = |v: &[f64]| {
            let x = Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            (&relu_forward(&x) * &r).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-7);

        let y = sigmoid_forward(&x0);
        let gx = sigmoid_backward(&r, &y);
        let mut obj = |v: &[f64]| {
            let x = Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            (&sigmoid_forward(&x) * &r).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-7);
    }

    #[test]
    fn scale_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let x0: Array3<f64> = rand_array(&[2, 3, 5], &mut rng).into_dimensionality().unwrap();
        let mc: Array2<f64> = rand_array(&[2, 3], &mut rng).into_dimensionality().unwrap();
        let mt: Array2<f64> = rand_array(&[2, 5], &mut rng).into_dimensionality().unwrap();
        let r: Array3<f64> = rand_array(&[2, 3, 5], &mut rng).into_dimensionality().unwrap();

        let (gx, gm) = scale_channels_backward(&r, &x0, &mc);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 3, 5), v.to_vec()).unwrap();
            (&scale_channels_forward(&x, &mc) * &r).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-8);
        let mut obj = |v: &[f64]| {
            let m = Array2::from_shape_vec((2, 3), v.to_vec()).unwrap();
            (&scale_channels_forward(&x0, &m) * &r).sum()
        };
        finite_diff_check(&mut obj, mc.as_slice().unwrap(), gm.as_slice().unwrap(), 1e-8);

        let (gx, gm) = scale_time_backward(&r, &x0, &mt);
        let mut obj = |v: &[f64]| {
            let x = Array3::from_shape_vec((2, 3, 5), v.to_vec()).unwrap();
            (&scale_time_forward(&x, &mt) * &r).sum()
        };
        finite_diff_check(&mut obj, x0.as_slice().unwrap(), gx.as_slice().unwrap(), 1e-8);
        let mut obj = |v: &[f64]| {
            let m = Array2::from_shape_vec((2, 5), v.to_vec()).unwrap();
            (&scale_time_forward(&x0, &m) * &r).sum()
        };
        finite_diff_check(&mut obj, mt.as_slice().unwrap(), gm.as_slice().unwrap(), 1e-8);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x: Array2<f64> = rand_array(&[4, 256], &mut rng).into_dimensionality().unwrap();
        let p = softmax(&(x * 30.0));
        for row in p.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_ln_256_loss() {
        let logits = Array2::<f64>::from_elem((5, 256), 0.37);
        let labels = [0u8, 17, 255, 3, 128];
        let (loss, probs) = softmax_cross_entropy(&logits, &labels);
        assert!((loss - 256.0f64.ln()).abs() < 1e-9);
        assert!((probs[[0, 0]] - 1.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let logits0: Array2<f64> = rand_array(&[3, 6], &mut rng).into_dimensionality().unwrap();
        let labels = [2u8, 0, 5];
        let (_, probs) = softmax_cross_entropy(&logits0, &labels);
        let g = cross_entropy_grad(&probs, &labels);
        let mut obj = |v: &[f64]| {
            let l = Array2::from_shape_vec((3, 6), v.to_vec()).unwrap();
            softmax_cross_entropy(&l, &labels).0
        };
        finite_diff_check(&mut obj, logits0.as_slice().unwrap(), g.as_slice().unwrap(), 1e-7);
    }

    #[test]
    fn dropout_mask_is_unbiased_and_seeded() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let m = dropout_mask(200, 50, 0.2, &mut rng);
        let mean = m.sum() / (200.0 * 50.0);
        assert!((mean - 1.0).abs() < 0.02, "inverted dropout keeps expectation, got {mean}");
        let mut rng2 = ChaCha12Rng::seed_from_u64(31);
        let m2 = dropout_mask(200, 50, 0.2, &mut rng2);
        assert_eq!(m, m2);
    }
}
