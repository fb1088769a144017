//! Forward and backward passes over an [`ArchSpec`], generic over the float width.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::arch::{ArchSpec, LayerSpec, Shape};
use crate::error::{NnError, Result};

pub trait Scalar: Float + FromPrimitive + Sum + Send + Sync + Debug + Default + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Weights and biases of one layer; both empty for parameterless layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros_like(other: &Self) -> Self {
        LayerParams {
            weights: vec![T::zero(); other.weights.len()],
            bias: vec![T::zero(); other.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a = *a + *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a = *a + *b;
        }
    }

    fn scale(&mut self, s: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *v = *v * s;
        }
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Per-layer gradients mirroring [`Network::params`].
pub type Gradients<T> = Vec<LayerParams<T>>;

/// Result of back-propagating a single example.
#[derive(Debug, Clone)]
pub struct ExampleBackprop<T> {
    pub loss: T,
    pub predicted: usize,
    pub grads: Gradients<T>,
    /// Gradient of the loss with respect to the input, when requested.
    pub input_grad: Option<Vec<T>>,
}

/// Mean loss, mean gradients and the number of correct argmax predictions in a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: T,
    pub correct: usize,
    pub grads: Gradients<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: ArchSpec,
    shapes: Vec<Shape>,
    pub params: Vec<LayerParams<T>>,
}

enum Aux<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
}

struct Trace<T> {
    acts: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with all parameters set to zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let shapes = arch.shapes()?;
        let params = arch
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, &input)| {
                let (w, b) = layer.param_counts(input);
                LayerParams {
                    weights: vec![T::zero(); w],
                    bias: vec![T::zero(); b],
                }
            })
            .collect();
        Ok(Network {
            arch,
            shapes,
            params,
        })
    }

    /// Wraps existing parameters after checking every tensor length against the architecture.
    pub fn from_params(arch: ArchSpec, params: Vec<LayerParams<T>>) -> Result<Self> {
        let net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape(format!(
                "expected {} layer parameter blocks, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (i, (want, got)) in net.params.iter().zip(&params).enumerate() {
            if want.weights.len() != got.weights.len() || want.bias.len() != got.bias.len() {
                return Err(NnError::Shape(format!(
                    "layer {i}: expected {}+{} parameters, got {}+{}",
                    want.weights.len(),
                    want.bias.len(),
                    got.weights.len(),
                    got.bias.len()
                )));
            }
        }
        Ok(Network { params, ..net })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Activation shapes, input first.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// Converts every parameter to another float width.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect()
        };
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weights: conv(&p.weights),
                    bias: conv(&p.bias),
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(NnError::Shape(format!(
                "input has {} values, architecture expects {} ({:?})",
                input.len(),
                self.input_len(),
                self.shapes[0]
            )));
        }
        Ok(())
    }

    fn run(&self, input: &[T], keep: bool) -> Result<Trace<T>> {
        self.check_input(input)?;
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.arch.layers.len());
        let mut cur = input.to_vec();
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let in_shape = self.shapes[i];
            let out_shape = self.shapes[i + 1];
            let p = &self.params[i];
            let (out, a) = match *layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let cols = im2col(&cur, in_shape, out_shape, kernel, stride, padding);
                    let out = conv_forward(&cols, p, out_shape);
                    (out, if keep { Aux::Cols(cols) } else { Aux::None })
                }
                LayerSpec::Relu => (
                    cur.iter()
                        .map(|&v| if v > T::zero() { v } else { T::zero() })
                        .collect(),
                    Aux::None,
                ),
                LayerSpec::MaxPool { window, stride } => {
                    let (out, idx) = maxpool_forward(&cur, in_shape, out_shape, window, stride);
                    (out, Aux::Argmax(idx))
                }
                LayerSpec::Flatten => (cur.clone(), Aux::None),
                LayerSpec::Dense { .. } | LayerSpec::SoftmaxOutput { .. } => {
                    (dense_forward(&cur, p), Aux::None)
                }
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite {
                    layer: i,
                    stage: "forward",
                });
            }
            if keep {
                acts.push(std::mem::replace(&mut cur, out));
            } else {
                cur = out;
            }
            aux.push(a);
        }
        // Final activation holds logits.
        acts.push(cur);
        Ok(Trace { acts, aux })
    }

    /// Class probabilities for one input laid out channel-major (C, H, W).
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let trace = self.run(input, false)?;
        Ok(softmax(trace.acts.last().expect("logits")))
    }

    /// Logits (pre-softmax scores) for one input.
    pub fn logits(&self, input: &[T]) -> Result<Vec<T>> {
        let mut trace = self.run(input, false)?;
        Ok(trace.acts.pop().expect("logits"))
    }

    /// Cross-entropy of one example.
    pub fn example_loss(&self, input: &[T], label: usize) -> Result<T> {
        let logits = self.logits(input)?;
        self.check_label(label)?;
        Ok(cross_entropy(&logits, label))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes() {
            return Err(NnError::Shape(format!(
                "label {label} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over a batch.
    pub fn batch_loss(&self, batch: &[(&[T], usize)]) -> Result<T> {
        if batch.is_empty() {
            return Err(NnError::Shape("empty batch".into()));
        }
        let mut total = T::zero();
        for (x, y) in batch {
            total = total + self.example_loss(x, *y)?;
        }
        Ok(total / T::from_usize(batch.len()).expect("batch size"))
    }

    /// Back-propagates one example through every layer.
    pub fn backprop(&self, input: &[T], label: usize, want_input_grad: bool) -> Result<ExampleBackprop<T>> {
        self.check_label(label)?;
        let trace = self.run(input, true)?;
        let n_layers = self.arch.layers.len();
        let logits = &trace.acts[n_layers];
        let loss = cross_entropy(logits, label);
        let probs = softmax(logits);
        let predicted = argmax(&probs);

        let mut grads: Gradients<T> = self.params.iter().map(LayerParams::zeros_like).collect();
        let mut delta: Vec<T> = probs;
        delta[label] = delta[label] - T::one();

        for i in (0..n_layers).rev() {
            let layer = self.arch.layers[i];
            let x = &trace.acts[i];
            let need_dx = i > 0 || want_input_grad;
            let in_shape = self.shapes[i];
            let out_shape = self.shapes[i + 1];
            let g = &mut grads[i];
            let next = match layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let cols = match &trace.aux[i] {
                        Aux::Cols(c) => c,
                        _ => unreachable!("conv trace keeps im2col buffer"),
                    };
                    conv_backward(
                        &delta, cols, &self.params[i], g, in_shape, out_shape, kernel, stride,
                        padding, need_dx,
                    )
                }
                LayerSpec::Relu => Some(
                    delta
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                ),
                LayerSpec::MaxPool { .. } => {
                    let idx = match &trace.aux[i] {
                        Aux::Argmax(idx) => idx,
                        _ => unreachable!("pool trace keeps argmax"),
                    };
                    let mut dx = vec![T::zero(); in_shape.len()];
                    for (&d, &j) in delta.iter().zip(idx) {
                        dx[j as usize] = dx[j as usize] + d;
                    }
                    Some(dx)
                }
                LayerSpec::Flatten => Some(delta.clone()),
                LayerSpec::Dense { .. } | LayerSpec::SoftmaxOutput { .. } => {
                    dense_backward(&delta, x, &self.params[i], g, need_dx)
                }
            };
            if !g.all_finite() {
                return Err(NnError::NonFinite {
                    layer: i,
                    stage: "backward",
                });
            }
            match next {
                Some(d) => delta = d,
                None => break,
            }
        }
        Ok(ExampleBackprop {
            loss,
            predicted,
            grads,
            input_grad: if want_input_grad { Some(delta) } else { None },
        })
    }

    /// Mean cross-entropy and mean parameter gradients over a batch.
    ///
    /// Examples are processed in parallel on the current rayon pool but summed in
    /// batch order, so the result does not depend on the thread count.
    pub fn loss_and_gradients(&self, batch: &[(&[T], usize)]) -> Result<BatchGradients<T>> {
        if batch.is_empty() {
            return Err(NnError::Shape("empty batch".into()));
        }
        let per_example: Vec<Result<ExampleBackprop<T>>> = batch
            .par_iter()
            .map(|(x, y)| self.backprop(x, *y, false))
            .collect();
        let mut loss = T::zero();
        let mut correct = 0;
        let mut total: Option<Gradients<T>> = None;
        for (r, (_, y)) in per_example.into_iter().zip(batch) {
            let ex = r?;
            loss = loss + ex.loss;
            if ex.predicted == *y {
                correct += 1;
            }
            match total.as_mut() {
                None => total = Some(ex.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&ex.grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let n = T::from_usize(batch.len()).expect("batch size");
        let mut grads = total.expect("non-empty batch");
        let inv = T::one() / n;
        for g in &mut grads {
            g.scale(inv);
        }
        Ok(BatchGradients {
            loss: loss / n,
            correct,
            grads,
        })
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
    lse - logits[label]
}

/// Dot product with eight independent partial sums so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn map_dims(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Map { c, h, w } => (c, h, w),
        Shape::Flat(n) => (n, 1, 1),
    }
}

/// Unfolds receptive fields into a (C*K*K) x (OH*OW) row-major matrix.
fn im2col<T: Scalar>(
    input: &[T],
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let (c, h, w) = map_dims(in_shape);
    let (_, oh, ow) = map_dims(out_shape);
    let ohw = oh * ow;
    let mut cols = vec![T::zero(); c * kernel * kernel * ohw];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let (c, h, w) = map_dims(in_shape);
    let (_, oh, ow) = map_dims(out_shape);
    let ohw = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward<T: Scalar>(cols: &[T], p: &LayerParams<T>, out_shape: Shape) -> Vec<T> {
    let (f, oh, ow) = map_dims(out_shape);
    let ohw = oh * ow;
    let ckk = p.weights.len() / f;
    let mut out = vec![T::zero(); f * ohw];
    for fi in 0..f {
        let dst = &mut out[fi * ohw..(fi + 1) * ohw];
        dst.iter_mut().for_each(|v| *v = p.bias[fi]);
        let wrow = &p.weights[fi * ckk..(fi + 1) * ckk];
        for (k, &wk) in wrow.iter().enumerate() {
            let src = &cols[k * ohw..(k + 1) * ohw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + wk * s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    delta: &[T],
    cols: &[T],
    p: &LayerParams<T>,
    g: &mut LayerParams<T>,
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (f, oh, ow) = map_dims(out_shape);
    let ohw = oh * ow;
    let ckk = p.weights.len() / f;
    for fi in 0..f {
        let d = &delta[fi * ohw..(fi + 1) * ohw];
        g.bias[fi] = g.bias[fi] + d.iter().copied().sum::<T>();
        let gw = &mut g.weights[fi * ckk..(fi + 1) * ckk];
        for (k, gk) in gw.iter_mut().enumerate() {
            *gk = *gk + dot(d, &cols[k * ohw..(k + 1) * ohw]);
        }
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); ckk * ohw];
    for fi in 0..f {
        let d = &delta[fi * ohw..(fi + 1) * ohw];
        let wrow = &p.weights[fi * ckk..(fi + 1) * ckk];
        for (k, &wk) in wrow.iter().enumerate() {
            let dst = &mut dcols[k * ohw..(k + 1) * ohw];
            for (o, &s) in dst.iter_mut().zip(d) {
                *o = *o + wk * s;
            }
        }
    }
    Some(col2im(&dcols, in_shape, out_shape, kernel, stride, padding))
}

fn maxpool_forward<T: Scalar>(
    input: &[T],
    in_shape: Shape,
    out_shape: Shape,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>) {
    let (c, h, w) = map_dims(in_shape);
    let (_, oh, ow) = map_dims(out_shape);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let j = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[j] > input[best] {
                            best = j;
                        }
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn dense_forward<T: Scalar>(x: &[T], p: &LayerParams<T>) -> Vec<T> {
    let n = x.len();
    p.bias
        .iter()
        .enumerate()
        .map(|(u, &b)| b + dot(&p.weights[u * n..(u + 1) * n], x))
        .collect()
}

fn dense_backward<T: Scalar>(
    delta: &[T],
    x: &[T],
    p: &LayerParams<T>,
    g: &mut LayerParams<T>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let n = x.len();
    for (u, &d) in delta.iter().enumerate() {
        g.bias[u] = g.bias[u] + d;
        for (gw, &v) in g.weights[u * n..(u + 1) * n].iter_mut().zip(x) {
            *gw = *gw + d * v;
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = vec![T::zero(); n];
    for (u, &d) in delta.iter().enumerate() {
        for (o, &w) in dx.iter_mut().zip(&p.weights[u * n..(u + 1) * n]) {
            *o = *o + d * w;
        }
    }
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input: Shape::Map { c: 1, h: 4, w: 4 },
            layers: vec![
                LayerSpec::Conv {
                    filters: 1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::SoftmaxOutput { classes: 3 },
            ],
        }
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let net = Network::<f64>::zeros(ArchSpec::desk_small()).unwrap();
        let x: Vec<f64> = (0..net.input_len()).map(|i| (i % 7) as f64 / 7.0).collect();
        let p = net.forward(&x).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut net = Network::<f64>::zeros(tiny_arch()).unwrap();
        net.params[0].weights[4] = 1.0;
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let trace = net.run(&x, true).unwrap();
        assert_eq!(trace.acts[1], x);
    }

    #[test]
    fn uniform_prediction_loss_is_ln3() {
        let net = Network::<f64>::zeros(tiny_arch()).unwrap();
        let x = vec![0.3; 16];
        let l = net.example_loss(&x, 1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_length_is_shape_error() {
        let net = Network::<f32>::zeros(tiny_arch()).unwrap();
        assert!(matches!(net.forward(&[0.0; 15]), Err(NnError::Shape(_))));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let net = Network::<f32>::zeros(tiny_arch()).unwrap();
        let mut x = vec![0.0f32; 16];
        x[3] = f32::INFINITY;
        let mut n2 = net.clone();
        n2.params[0].weights[4] = 1.0;
        match n2.forward(&x) {
            Err(NnError::NonFinite { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_gradient() {
        let mut net = Network::<f64>::zeros(tiny_arch()).unwrap();
        net.params[2].bias = vec![0.0, 40.0, 0.0];
        let x = vec![0.1; 16];
        let bp = net.backprop(&x, 1, false).unwrap();
        assert!(bp.loss < 1e-12);
        for g in &bp.grads {
            for v in g.weights.iter().chain(&g.bias) {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_examples() {
        let mut net = Network::<f64>::zeros(tiny_arch()).unwrap();
        for (i, w) in net.params[2].weights.iter_mut().enumerate() {
            *w = ((i * 37) % 11) as f64 / 11.0 - 0.5;
        }
        let a: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let b: Vec<f64> = (0..16).map(|i| 1.0 - i as f64 / 16.0).collect();
        let ga = net.backprop(&a, 0, false).unwrap();
        let gb = net.backprop(&b, 2, false).unwrap();
        let batch = net.loss_and_gradients(&[(&a, 0), (&b, 2)]).unwrap();
        for (k, g) in batch.grads[2].weights.iter().enumerate() {
            let want = (ga.grads[2].weights[k] + gb.grads[2].weights[k]) / 2.0;
            assert!((g - want).abs() < 1e-14);
        }
        assert!((batch.loss - (ga.loss + gb.loss) / 2.0).abs() < 1e-14);
    }
}
