//! Minimal neural-network engine with explicit forward and backward passes.
//!
//! Supports exactly the layer set needed here: 3×3 same-padding
//! convolutions (stride 1), ReLU, 2×2 max-pooling (stride 2), fully
//! connected layers, softmax heads with cross-entropy, bilinear
//! upsampling, and Adam. Every backward pass is validated against central
//! finite differences; [`finite_diff_max_rel_error`] is the oracle used by
//! both the per-layer tests and the end-to-end pipeline check. Double
//! precision is used for all correctness work; the same code instantiates
//! at single precision for faster training.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating-point element type of the engine (f32 or f64).
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Kinds of layers the engine knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3×3 kernel, stride 1, zero same-padding.
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    /// 2×2 window, stride 2; ties go to the first element in scan order.
    MaxPool2x2,
    FullyConnected { in_dim: usize, out_dim: usize },
    /// Fully connected layer whose output is read through a row softmax.
    SoftmaxHead { in_dim: usize, bins: usize },
}

/// Ordered, named collection of parameter arrays.
///
/// Layers index into this flat list so the optimizer, checkpointing, and
/// gradient checking can treat all parameters uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    arrays: Vec<ArrayD<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: ArrayD<F>) -> usize {
        self.names.push(name.into());
        self.arrays.push(array);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn array(&self, idx: usize) -> &ArrayD<F> {
        &self.arrays[idx]
    }

    pub fn array_mut(&mut self, idx: usize) -> &mut ArrayD<F> {
        &mut self.arrays[idx]
    }

    pub fn arrays(&self) -> &[ArrayD<F>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ArrayD<F>] {
        &mut self.arrays
    }

    pub fn view4(&self, idx: usize) -> ArrayView4<'_, F> {
        self.arrays[idx].view().into_dimensionality().expect("4-d parameter")
    }

    pub fn view2(&self, idx: usize) -> ArrayView2<'_, F> {
        self.arrays[idx].view().into_dimensionality().expect("2-d parameter")
    }

    pub fn view1(&self, idx: usize) -> ArrayView1<'_, F> {
        self.arrays[idx].view().into_dimensionality().expect("1-d parameter")
    }

    /// Zero gradient arrays matching every parameter shape.
    pub fn zero_grads(&self) -> Vec<ArrayD<F>> {
        self.arrays.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect()
    }

    pub fn convert<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| a.mapv(|v| G::from_f64(v.as_f64())))
                .collect(),
        }
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// He-style fan-in scaled uniform initialization: U(−√(6/fan_in), +√(6/fan_in)),
/// drawn in f64 from a seeded ChaCha stream so runs are reproducible across
/// platforms. `scale` lets output heads start near zero.
pub fn init_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    scale: f64,
) -> ArrayD<F> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt() * scale;
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        F::from_f64(rng.gen_range(-limit..limit))
    })
}

// ---------------------------------------------------------------------------
// Spatial layers (single patch: channels × height × width)
// ---------------------------------------------------------------------------

/// 3×3 same-padding cross-correlation, stride 1.
pub fn conv3x3_forward<F: Scalar>(
    x: &ArrayView3<'_, F>,
    weight: &ArrayView4<'_, F>,
    bias: &ArrayView1<'_, F>,
) -> Result<Array3<F>> {
    let (cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    if wcin != cin || kh != 3 || kw != 3 {
        return Err(Error::ShapeMismatch {
            expected: format!("weight [*, {cin}, 3, 3]"),
            got: format!("{:?}", weight.shape()),
        });
    }
    let mut y = Array3::<F>::zeros((cout, h, w));
    for o in 0..cout {
        let mut yo = y.index_axis_mut(Axis(0), o);
        yo.fill(bias[o]);
        for c in 0..cin {
            let xc = x.index_axis(Axis(0), c);
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let wv = weight[[o, c, dy, dx]];
                    let r0 = 1usize.saturating_sub(dy);
                    let r1 = (h + 1).saturating_sub(dy).min(h);
                    let q0 = 1usize.saturating_sub(dx);
                    let q1 = (w + 1).saturating_sub(dx).min(w);
                    if r0 >= r1 || q0 >= q1 {
                        continue;
                    }
                    let src = xc.slice(s![r0 + dy - 1..r1 + dy - 1, q0 + dx - 1..q1 + dx - 1]);
                    let mut dst = yo.slice_mut(s![r0..r1, q0..q1]);
                    dst.scaled_add(wv, &src);
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv3x3_forward`] with respect to input, weight, and bias.
pub fn conv3x3_backward<F: Scalar>(
    x: &ArrayView3<'_, F>,
    weight: &ArrayView4<'_, F>,
    grad_out: &ArrayView3<'_, F>,
) -> (Array3<F>, ndarray::Array4<F>, Array1<F>) {
    let (cin, h, w) = x.dim();
    let cout = weight.dim().0;
    let mut gx = Array3::<F>::zeros((cin, h, w));
    let mut gw = ndarray::Array4::<F>::zeros(weight.dim());
    let mut gb = Array1::<F>::zeros(cout);
    for o in 0..cout {
        let go = grad_out.index_axis(Axis(0), o);
        gb[o] = go.sum();
        for c in 0..cin {
            let xc = x.index_axis(Axis(0), c);
            let mut gxc = gx.index_axis_mut(Axis(0), c);
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let r0 = 1usize.saturating_sub(dy);
                    let r1 = (h + 1).saturating_sub(dy).min(h);
                    let q0 = 1usize.saturating_sub(dx);
                    let q1 = (w + 1).saturating_sub(dx).min(w);
                    if r0 >= r1 || q0 >= q1 {
                        continue;
                    }
                    let src_range = s![r0 + dy - 1..r1 + dy - 1, q0 + dx - 1..q1 + dx - 1];
                    let dst_range = s![r0..r1, q0..q1];
                    // weight gradient: correlation of output grad with input
                    let prod = (&go.slice(dst_range) * &xc.slice(src_range)).sum();
                    gw[[o, c, dy, dx]] = gw[[o, c, dy, dx]] + prod;
                    // input gradient: scatter output grad through the kernel
                    let wv = weight[[o, c, dy, dx]];
                    let mut gslice = gxc.slice_mut(src_range);
                    gslice.scaled_add(wv, &go.slice(dst_range));
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu3_forward<F: Scalar>(x: &ArrayView3<'_, F>) -> Array3<F> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu3_backward<F: Scalar>(x: &ArrayView3<'_, F>, grad_out: &ArrayView3<'_, F>) -> Array3<F> {
    let mut g = grad_out.to_owned();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= F::zero() {
            *gv = F::zero();
        }
    });
    g
}

/// 2×2 max-pool with stride 2. Returns the pooled map and the within-window
/// argmax offsets (0..4, row-major) for the backward pass.
pub fn maxpool2x2_forward<F: Scalar>(x: &ArrayView3<'_, F>) -> Result<(Array3<F>, Array3<u8>)> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "even spatial dims".into(),
            got: format!("{h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array3::<F>::zeros((c, ho, wo));
    let mut arg = Array3::<u8>::zeros((c, ho, wo));
    for ci in 0..c {
        let xc = x.index_axis(Axis(0), ci);
        for i in 0..ho {
            for j in 0..wo {
                let mut best = xc[[2 * i, 2 * j]];
                let mut code = 0u8;
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = xc[[2 * i + dy, 2 * j + dx]];
                    if v > best {
                        best = v;
                        code = k as u8;
                    }
                }
                y[[ci, i, j]] = best;
                arg[[ci, i, j]] = code;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2x2_backward<F: Scalar>(
    arg: &Array3<u8>,
    grad_out: &ArrayView3<'_, F>,
    in_h: usize,
    in_w: usize,
) -> Array3<F> {
    let (c, ho, wo) = grad_out.dim();
    let mut gx = Array3::<F>::zeros((c, in_h, in_w));
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let code = arg[[ci, i, j]] as usize;
                let (dy, dx) = (code / 2, code % 2);
                gx[[ci, 2 * i + dy, 2 * j + dx]] = grad_out[[ci, i, j]];
            }
        }
    }
    gx
}

/// Align-corners bilinear interpolation to (target_h, target_w).
pub fn bilinear_upsample<F: Scalar>(
    x: &ArrayView3<'_, F>,
    target_h: usize,
    target_w: usize,
) -> Array3<F> {
    let (c, h, w) = x.dim();
    if target_h == h && target_w == w {
        return x.to_owned();
    }
    let mut y = Array3::<F>::zeros((c, target_h, target_w));
    let sy = if target_h > 1 { (h - 1) as f64 / (target_h - 1) as f64 } else { 0.0 };
    let sx = if target_w > 1 { (w - 1) as f64 / (target_w - 1) as f64 } else { 0.0 };
    for i in 0..target_h {
        let fy = i as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from_f64(fy - y0 as f64);
        for j in 0..target_w {
            let fx = j as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from_f64(fx - x0 as f64);
            for ci in 0..c {
                let one = F::one();
                let v = x[[ci, y0, x0]] * (one - wy) * (one - wx)
                    + x[[ci, y0, x1]] * (one - wy) * wx
                    + x[[ci, y1, x0]] * wy * (one - wx)
                    + x[[ci, y1, x1]] * wy * wx;
                y[[ci, i, j]] = v;
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_upsample`]: scatter output grads back to the
/// source grid with the same weights.
pub fn bilinear_upsample_backward<F: Scalar>(
    grad_out: &ArrayView3<'_, F>,
    in_h: usize,
    in_w: usize,
) -> Array3<F> {
    let (c, th, tw) = grad_out.dim();
    if th == in_h && tw == in_w {
        return grad_out.to_owned();
    }
    let mut gx = Array3::<F>::zeros((c, in_h, in_w));
    let sy = if th > 1 { (in_h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let sx = if tw > 1 { (in_w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    for i in 0..th {
        let fy = i as f64 * sy;
        let y0 = (fy.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = F::from_f64(fy - y0 as f64);
        for j in 0..tw {
            let fx = j as f64 * sx;
            let x0 = (fx.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = F::from_f64(fx - x0 as f64);
            let one = F::one();
            for ci in 0..c {
                let g = grad_out[[ci, i, j]];
                gx[[ci, y0, x0]] = gx[[ci, y0, x0]] + g * (one - wy) * (one - wx);
                gx[[ci, y0, x1]] = gx[[ci, y0, x1]] + g * (one - wy) * wx;
                gx[[ci, y1, x0]] = gx[[ci, y1, x0]] + g * wy * (one - wx);
                gx[[ci, y1, x1]] = gx[[ci, y1, x1]] + g * wy * wx;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Dense layers (batch × features)
// ---------------------------------------------------------------------------

/// Affine map y = x·W + b with W of shape [in, out].
pub fn fc_forward<F: Scalar>(
    x: &ArrayView2<'_, F>,
    weight: &ArrayView2<'_, F>,
    bias: &ArrayView1<'_, F>,
) -> Result<Array2<F>> {
    if x.dim().1 != weight.dim().0 {
        return Err(Error::ShapeMismatch {
            expected: format!("input dim {}", weight.dim().0),
            got: format!("{}", x.dim().1),
        });
    }
    let mut y = x.dot(weight);
    y += &bias.view().insert_axis(Axis(0));
    Ok(y)
}

pub fn fc_backward<F: Scalar>(
    x: &ArrayView2<'_, F>,
    weight: &ArrayView2<'_, F>,
    grad_out: &ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let gx = grad_out.dot(&weight.t());
    let gw = x.t().dot(grad_out);
    let gb = grad_out.sum_axis(Axis(0));
    (gx, gw, gb)
}

pub fn relu2_forward<F: Scalar>(x: &ArrayView2<'_, F>) -> Array2<F> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu2_backward<F: Scalar>(x: &ArrayView2<'_, F>, grad_out: &ArrayView2<'_, F>) -> Array2<F> {
    let mut g = grad_out.to_owned();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= F::zero() {
            *gv = F::zero();
        }
    });
    g
}

/// Max-shifted softmax over a single logit vector.
pub fn softmax_head(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise max-shifted softmax.
pub fn softmax_rows<F: Scalar>(logits: &ArrayView2<'_, F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Cross-entropy over all heads with the 1/(heads·B·K) normalization.
///
/// `probs[j]` is the (B, K) softmax output of head j; `targets[(i, j)]` the
/// true bin of pixel i under head j.
pub fn cross_entropy<F: Scalar>(probs: &[Array2<F>], targets: &Array2<usize>) -> Result<f64> {
    let heads = probs.len();
    let (batch, bins) = probs[0].dim();
    if targets.dim() != (batch, heads) {
        return Err(Error::ShapeMismatch {
            expected: format!("targets ({batch}, {heads})"),
            got: format!("{:?}", targets.dim()),
        });
    }
    let mut loss = 0.0;
    for (j, p) in probs.iter().enumerate() {
        for i in 0..batch {
            let t = targets[(i, j)];
            if t >= bins {
                return Err(Error::InvalidInput(format!(
                    "target bin {t} out of range for {bins} bins"
                )));
            }
            loss -= p[(i, t)].as_f64().max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(loss / (heads as f64 * batch as f64 * bins as f64))
}

/// Gradient of [`cross_entropy`] with respect to each head's logits:
/// (p − onehot) / (heads·B·K).
pub fn cross_entropy_logit_grads<F: Scalar>(
    probs: &[Array2<F>],
    targets: &Array2<usize>,
) -> Vec<Array2<F>> {
    let heads = probs.len();
    let (batch, bins) = probs[0].dim();
    let norm = F::from_f64(1.0 / (heads as f64 * batch as f64 * bins as f64));
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut g = p.to_owned();
            for i in 0..batch {
                let t = targets[(i, j)];
                g[(i, t)] = g[(i, t)] - F::one();
            }
            g.mapv_inplace(|v| v * norm);
            g
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state: per-parameter first and second moments plus the
/// step counter. Defaults are β1 = 0.9, β2 = 0.999, ε = 1e-6, learning
/// rate 1e-4.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub step_count: u64,
    pub first_moment: Vec<ArrayD<F>>,
    pub second_moment: Vec<ArrayD<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            learning_rate: 1e-4,
            step_count: 0,
            first_moment: params.zero_grads(),
            second_moment: params.zero_grads(),
        }
    }

    /// One Adam update with bias correction.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[ArrayD<F>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(t));
        let lr = F::from_f64(self.learning_rate);
        let eps = F::from_f64(self.epsilon);
        for ((p, g), (m, v)) in params
            .arrays_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            azip_update(p, g, m, v, b1, b2, one, bc1, bc2, lr, eps);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update<F: Scalar>(
    p: &mut ArrayD<F>,
    g: &ArrayD<F>,
    m: &mut ArrayD<F>,
    v: &mut ArrayD<F>,
    b1: F,
    b2: F,
    one: F,
    bc1: F,
    bc2: F,
    lr: F,
    eps: F,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Compare analytic gradients against central finite differences on a
/// random subset of parameters (at least `samples_per_array` per array, or
/// the whole array if smaller).
///
/// Errors are measured relative to each array's largest analytic gradient
/// magnitude, which keeps the check meaningful for the tiny gradients the
/// 1/(9BK) loss normalization produces. The loss closure must recompute the
/// loss from the current parameter values on every call.
pub fn finite_diff_max_rel_error(
    params: &mut ParamSet<f64>,
    analytic: &[ArrayD<f64>],
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
    h: f64,
    samples_per_array: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for a in 0..params.len() {
        let len = params.array(a).len();
        let scale = analytic[a]
            .iter()
            .fold(0.0f64, |acc, g| acc.max(g.abs()))
            .max(1e-12);
        let n = samples_per_array.min(len);
        let indices: Vec<usize> = if n == len {
            (0..len).collect()
        } else {
            (0..n).map(|_| rng.gen_range(0..len)).collect()
        };
        for idx in indices {
            let original = params.array(a).as_slice().unwrap()[idx];
            params.array_mut(a).as_slice_mut().unwrap()[idx] = original + h;
            let lp = loss(params);
            params.array_mut(a).as_slice_mut().unwrap()[idx] = original - h;
            let lm = loss(params);
            params.array_mut(a).as_slice_mut().unwrap()[idx] = original;
            let numeric = (lp - lm) / (2.0 * h);
            let anal = analytic[a].as_slice().unwrap()[idx];
            let rel = (numeric - anal).abs() / scale;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
