//! Dense feed-forward network engine.
//!
//! A network is described by a [`NetSpec`] and a flat [`ParamVector`]. The flat
//! layout is layer-major: for each layer, the weight matrix in row-major
//! `(fan_out, fan_in)` order followed by the `fan_out` biases. The same layout
//! is shared by the sampler state, the memory pool and the surrogate, so
//! every coordinate index means the same thing everywhere.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer widths, got {}",
                widths.len()
            )));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("layer width {i} is zero")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::InvalidSpec(format!(
                "{} activations for {} weight layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        Ok(Self {
            widths,
            activations,
        })
    }

    /// `input -> hidden... -> output`, with `hidden_act` on every hidden layer.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(output_act);
        Self::new(widths, activations)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn layer_param_count(&self, layer: usize) -> usize {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        fan_in * fan_out + fan_out
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.layer_param_count(l))
            .sum()
    }

    /// Offset of each layer's block in the flat vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for l in 0..self.num_layers() {
            offsets.push(off);
            off += self.layer_param_count(l);
        }
        offsets
    }

    /// The sub-network made of weight layers `range`; its parameters are the
    /// contiguous slice `param_range(range)` of the full vector.
    pub fn slice_layers(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.num_layers() {
            return Err(Error::InvalidSpec(format!(
                "layer range {range:?} out of bounds"
            )));
        }
        Self::new(
            self.widths[range.start..=range.end].to_vec(),
            self.activations[range.clone()].to_vec(),
        )
    }

    pub fn param_range(&self, range: std::ops::Range<usize>) -> std::ops::Range<usize> {
        let offsets = self.layer_offsets();
        let start = offsets[range.start];
        let end = if range.end == self.num_layers() {
            self.num_params()
        } else {
            offsets[range.end]
        };
        start..end
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector".into(),
                expected: self.num_params(),
                found: params.len(),
            });
        }
        Ok(())
    }
}

/// Flat vector of all weights and biases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Borrowed weights (row-major `fan_out x fan_in`) and biases of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl LayerView<'_> {
    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.fan_in + inp]
    }
}

pub fn unflatten<'a>(spec: &NetSpec, params: &'a [f64]) -> Result<Vec<LayerView<'a>>> {
    spec.check_params(params)?;
    let mut views = Vec::with_capacity(spec.num_layers());
    let mut off = 0;
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let nw = fan_in * fan_out;
        views.push(LayerView {
            fan_in,
            fan_out,
            weights: &params[off..off + nw],
            bias: &params[off + nw..off + nw + fan_out],
        });
        off += nw + fan_out;
    }
    Ok(views)
}

pub fn flatten(layers: &[LayerView<'_>]) -> Result<ParamVector> {
    let total: usize = layers.iter().map(|v| v.weights.len() + v.bias.len()).sum();
    let mut out = Vec::with_capacity(total);
    for (l, v) in layers.iter().enumerate() {
        if v.weights.len() != v.fan_in * v.fan_out || v.bias.len() != v.fan_out {
            return Err(Error::Layer {
                layer: l,
                message: format!(
                    "buffers ({} weights, {} biases) do not match {}x{}",
                    v.weights.len(),
                    v.bias.len(),
                    v.fan_out,
                    v.fan_in
                ),
            });
        }
        out.extend_from_slice(v.weights);
        out.extend_from_slice(v.bias);
    }
    Ok(ParamVector(out))
}

/// Uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))) weights, zero biases.
pub fn glorot_uniform<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> ParamVector {
    let mut out = Vec::with_capacity(spec.num_params());
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        out.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(out)
}

/// Negative log-likelihood families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    /// `sum (y - f)^2 / (2 noise_var)` over all rows and outputs.
    GaussianNll { noise_var: f64 },
    /// `sum softplus(z) - y z`, single logit output, labels in {0,1}.
    BernoulliLogitNll,
    /// `mean (y - f)^2` over all rows and outputs.
    MeanSquared,
}

impl Loss {
    /// Loss value and its derivative with respect to the network output.
    fn value_and_output_grad(self, out: &Matrix, targets: &Matrix) -> (f64, Matrix) {
        let mut grad = Matrix::zeros(out.rows(), out.cols());
        let mut total = 0.0;
        match self {
            Loss::GaussianNll { noise_var } => {
                let inv = 1.0 / noise_var;
                for ((g, &f), &y) in grad
                    .as_mut_slice()
                    .iter_mut()
                    .zip(out.as_slice())
                    .zip(targets.as_slice())
                {
                    let r = f - y;
                    total += 0.5 * r * r * inv;
                    *g = r * inv;
                }
            }
            Loss::BernoulliLogitNll => {
                for ((g, &z), &y) in grad
                    .as_mut_slice()
                    .iter_mut()
                    .zip(out.as_slice())
                    .zip(targets.as_slice())
                {
                    total += softplus(z) - y * z;
                    *g = sigmoid(z) - y;
                }
            }
            Loss::MeanSquared => {
                let scale = 1.0 / out.as_slice().len().max(1) as f64;
                for ((g, &f), &y) in grad
                    .as_mut_slice()
                    .iter_mut()
                    .zip(out.as_slice())
                    .zip(targets.as_slice())
                {
                    let r = f - y;
                    total += r * r;
                    *g = 2.0 * r * scale;
                }
                total *= scale;
            }
        }
        (total, grad)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c = a * w^T + bias` for `a: n x fan_in`, `w: fan_out x fan_in` row-major.
fn affine(a: &Matrix, layer: &LayerView<'_>) -> Matrix {
    let n = a.rows();
    let mut c = Matrix::zeros(n, layer.fan_out);
    for i in 0..n {
        c.row_mut(i).copy_from_slice(layer.bias);
    }
    // SAFETY: dimensions and strides describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            n,
            layer.fan_in,
            layer.fan_out,
            1.0,
            a.as_slice().as_ptr(),
            layer.fan_in as isize,
            1,
            layer.weights.as_ptr(),
            1,
            layer.fan_in as isize,
            1.0,
            c.as_mut_slice().as_mut_ptr(),
            layer.fan_out as isize,
            1,
        );
    }
    c
}

fn check_inputs(spec: &NetSpec, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != spec.input_dim() {
        return Err(Error::Layer {
            layer: 0,
            message: format!(
                "input has {} columns, layer expects fan_in {}",
                inputs.cols(),
                spec.input_dim()
            ),
        });
    }
    Ok(())
}

pub fn forward(spec: &NetSpec, params: &[f64], inputs: &Matrix) -> Result<Matrix> {
    check_inputs(spec, inputs)?;
    let layers = unflatten(spec, params)?;
    let mut act = inputs.clone();
    for (layer, &g) in layers.iter().zip(&spec.activations) {
        act = affine(&act, layer);
        if g != Activation::Identity {
            act.as_mut_slice().iter_mut().for_each(|v| *v = g.apply(*v));
        }
    }
    Ok(act)
}

/// Loss and its gradient with respect to every parameter, by backpropagation.
pub fn loss_and_grad(
    spec: &NetSpec,
    params: &[f64],
    inputs: &Matrix,
    targets: &Matrix,
    loss: Loss,
) -> Result<(f64, ParamVector)> {
    let (value, grad, _) = loss_grad_and_input_grad(spec, params, inputs, targets, loss, false)?;
    Ok((value, grad))
}

/// As [`loss_and_grad`], optionally also returning the gradient with respect
/// to the inputs (used to chain two networks together).
pub(crate) fn loss_grad_and_input_grad(
    spec: &NetSpec,
    params: &[f64],
    inputs: &Matrix,
    targets: &Matrix,
    loss: Loss,
    want_input_grad: bool,
) -> Result<(f64, ParamVector, Option<Matrix>)> {
    check_inputs(spec, inputs)?;
    let layers = unflatten(spec, params)?;
    if targets.rows() != inputs.rows() || targets.cols() != spec.output_dim() {
        return Err(Error::Layer {
            layer: spec.num_layers() - 1,
            message: format!(
                "targets are {}x{}, output is {}x{}",
                targets.rows(),
                targets.cols(),
                inputs.rows(),
                spec.output_dim()
            ),
        });
    }

    // pre[l] / post[l] are the pre-activation and output of layer l.
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (l, (layer, &g)) in layers.iter().zip(&spec.activations).enumerate() {
        let input = if l == 0 { inputs } else { &post[l - 1] };
        let z = affine(input, layer);
        let mut a = z.clone();
        if g != Activation::Identity {
            a.as_mut_slice().iter_mut().for_each(|v| *v = g.apply(*v));
        }
        pre.push(z);
        post.push(a);
    }

    let (value, mut delta) = loss.value_and_output_grad(post.last().unwrap(), targets);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "network loss".into(),
            iterate: Some(params.to_vec()),
        });
    }

    let offsets = spec.layer_offsets();
    let mut grad = vec![0.0; spec.num_params()];
    let n = inputs.rows();
    let mut input_grad = None;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let g = spec.activations[l];
        if g != Activation::Identity {
            for ((d, &z), &a) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(pre[l].as_slice())
                .zip(post[l].as_slice())
            {
                *d *= g.derivative(z, a);
            }
        }
        let input = if l == 0 { inputs } else { &post[l - 1] };
        let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
        let off = offsets[l];
        let (gw, rest) = grad[off..].split_at_mut(fan_in * fan_out);
        let gb = &mut rest[..fan_out];
        // gw = delta^T * input
        // SAFETY: strides index within the owned buffers.
        unsafe {
            matrixmultiply::dgemm(
                fan_out,
                n,
                fan_in,
                1.0,
                delta.as_slice().as_ptr(),
                1,
                fan_out as isize,
                input.as_slice().as_ptr(),
                fan_in as isize,
                1,
                0.0,
                gw.as_mut_ptr(),
                fan_in as isize,
                1,
            );
        }
        for i in 0..n {
            for (b, &d) in gb.iter_mut().zip(delta.row(i)) {
                *b += d;
            }
        }
        if l > 0 || want_input_grad {
            // delta_prev = delta * w
            let mut prev = Matrix::zeros(n, fan_in);
            // SAFETY: as above.
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    fan_out,
                    fan_in,
                    1.0,
                    delta.as_slice().as_ptr(),
                    fan_out as isize,
                    1,
                    layer.weights.as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    prev.as_mut_slice().as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            if l == 0 {
                input_grad = Some(prev);
                break;
            }
            delta = prev;
        }
    }
    Ok((value, ParamVector(grad), input_grad))
}

/// A network spec bundled with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetSpec,
    pub params: ParamVector,
}

impl Network {
    pub fn new(spec: NetSpec, params: ParamVector) -> Result<Self> {
        spec.check_params(&params)?;
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let params = glorot_uniform(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        forward(&self.spec, &self.params, inputs)
    }

    pub fn forward_row(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward(&m)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Per-neuron loop, indexing the flat vector by hand.
    fn naive_forward(spec: &NetSpec, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let mut off = 0;
        for l in 0..spec.num_layers() {
            let (fi, fo) = (spec.widths()[l], spec.widths()[l + 1]);
            let mut next = vec![0.0; fo];
            for (o, nx) in next.iter_mut().enumerate() {
                let mut s = p[off + fi * fo + o];
                for (i, a) in act.iter().enumerate() {
                    s += p[off + o * fi + i] * a;
                }
                *nx = spec.activations()[l].apply(s);
            }
            off += fi * fo + fo;
            act = next;
        }
        act
    }

    #[test]
    fn zero_map() {
        let spec = NetSpec::new(vec![1, 1], vec![Activation::Identity]).unwrap();
        let out = forward(&spec, &[0.0, 0.0], &Matrix::column(&[5.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0]);
    }

    #[test]
    fn affine_by_hand() {
        let spec = NetSpec::new(vec![1, 1], vec![Activation::Identity]).unwrap();
        let out = forward(&spec, &[2.0, 1.0], &Matrix::column(&[3.0])).unwrap();
        assert_eq!(out.as_slice(), &[7.0]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = NetSpec::mlp(2, &[3], 1, Activation::Relu, Activation::Identity).unwrap();
        for _ in 0..20 {
            let p: Vec<f64> = (0..spec.num_params())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let x = random_matrix(&mut rng, 8, 2);
            let out = forward(&spec, &p, &x).unwrap();
            for i in 0..8 {
                let want = naive_forward(&spec, &p, x.row(i));
                assert!((out.get(i, 0) - want[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_count() {
        let spec = NetSpec::mlp(2, &[3], 1, Activation::Relu, Activation::Identity).unwrap();
        assert_eq!(spec.num_params(), 13);
        let wide = NetSpec::mlp(100, &[32, 8], 1, Activation::Relu, Activation::Identity).unwrap();
        assert_eq!(wide.num_params(), 3505);
    }

    #[test]
    fn layout_matches_index_enumeration() {
        // [1,2,1]: W1 (2x1) at 0..2, b1 at 2..4, W2 (1x2) at 4..6, b2 at 6.
        let spec = NetSpec::mlp(1, &[2], 1, Activation::Relu, Activation::Identity).unwrap();
        let p: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let views = unflatten(&spec, &p).unwrap();
        assert_eq!(views[0].weight(0, 0), 0.0);
        assert_eq!(views[0].weight(1, 0), 1.0);
        assert_eq!(views[0].bias, &[2.0, 3.0]);
        assert_eq!(views[1].weight(0, 0), 4.0);
        assert_eq!(views[1].weight(0, 1), 5.0);
        assert_eq!(views[1].bias, &[6.0]);
    }

    #[test]
    fn unflatten_length_mismatch() {
        let spec = NetSpec::mlp(2, &[3], 1, Activation::Relu, Activation::Identity).unwrap();
        assert!(matches!(
            unflatten(&spec, &[0.0; 12]),
            Err(Error::DimensionMismatch {
                expected: 13,
                found: 12,
                ..
            })
        ));
    }

    #[test]
    fn forward_names_offending_layer() {
        let spec = NetSpec::mlp(2, &[3], 1, Activation::Relu, Activation::Identity).unwrap();
        let err = forward(&spec, &[0.0; 13], &Matrix::zeros(4, 3)).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 0, .. }));
    }

    #[test]
    fn spec_invariants() {
        assert!(NetSpec::new(vec![3], vec![]).is_err());
        assert!(NetSpec::new(vec![3, 0], vec![Activation::Relu]).is_err());
        assert!(NetSpec::new(vec![3, 2], vec![]).is_err());
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetSpec::mlp(3, &[4], 1, Activation::Tanh, Activation::Identity).unwrap();
        let p = glorot_uniform(&spec, &mut rng);
        let x = random_matrix(&mut rng, 10, 3);
        let y = forward(&spec, &p, &x).unwrap();
        let (loss, grad) =
            loss_and_grad(&spec, &p, &x, &y, Loss::GaussianNll { noise_var: 0.1 }).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bernoulli_at_zero_logit_is_ln2() {
        let spec = NetSpec::new(vec![1, 1], vec![Activation::Identity]).unwrap();
        let (loss, _) = loss_and_grad(
            &spec,
            &[0.0, 0.0],
            &Matrix::column(&[1.3]),
            &Matrix::column(&[1.0]),
            Loss::BernoulliLogitNll,
        )
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn relu_zero_bias_is_positively_homogeneous() {
        // Zero biases, one hidden layer: each weight layer contributes one factor of c.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = NetSpec::mlp(4, &[6], 2, Activation::Relu, Activation::Identity).unwrap();
        let p = glorot_uniform(&spec, &mut rng);
        let x = random_matrix(&mut rng, 5, 4);
        let base = forward(&spec, &p, &x).unwrap();
        for c in [0.5, 2.5, 7.0] {
            let scaled_p: Vec<f64> = p.iter().map(|v| v * c).collect();
            let scaled = forward(&spec, &scaled_p, &x).unwrap();
            for (a, b) in scaled.as_slice().iter().zip(base.as_slice()) {
                assert!((a - c * c * b).abs() < 1e-12 * (1.0 + b.abs()));
            }
            // Scaling one layer alone is degree one.
            let mut one = p.clone();
            let first = spec.layer_offsets()[1];
            one[..first].iter_mut().for_each(|v| *v *= c);
            let out = forward(&spec, &one, &x).unwrap();
            for (a, b) in out.as_slice().iter().zip(base.as_slice()) {
                assert!((a - c * b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NetSpec::mlp(3, &[5], 2, Activation::Tanh, Activation::Identity).unwrap();
        let p = glorot_uniform(&spec, &mut rng);
        let x = random_matrix(&mut rng, 4, 3);
        let y = random_matrix(&mut rng, 4, 2);
        let (_, _, gx) =
            loss_grad_and_input_grad(&spec, &p, &x, &y, Loss::MeanSquared, true).unwrap();
        let gx = gx.unwrap();
        let h = 1e-6;
        for k in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let lp = loss_and_grad(&spec, &p, &xp, &y, Loss::MeanSquared)
                .unwrap()
                .0;
            let lm = loss_and_grad(&spec, &p, &xm, &y, Loss::MeanSquared)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx.as_slice()[k]).abs() < 1e-7);
        }
    }

    proptest::proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(
            hidden in proptest::collection::vec(1usize..6, 0..3),
            input in 1usize..5,
            output in 1usize..4,
            seed in 0u64..1000,
        ) {
            let spec = NetSpec::mlp(input, &hidden, output, Activation::Relu, Activation::Identity).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..spec.num_params()).map(|_| rng.sample(StandardNormal)).collect();
            let back = flatten(&unflatten(&spec, &p).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.into_inner(), p);
        }
    }
}
