use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

pub use super::layers::ConvGeom;
use super::layers::{
    conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, dense_backward,
    dense_forward,
};
use super::{ParamSet, Tensor};
use crate::{Error, Result};

/// Activation shape `(channels, height, width)`; flat vectors use `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv { weight: usize, bias: usize, geom: ConvGeom },
    ConvTranspose { weight: usize, bias: usize, geom: ConvGeom },
    Dense { weight: usize, bias: usize },
    LeakyRelu(f64),
    Sigmoid,
    /// Reinterprets the flat buffer under a new shape.
    Reshape,
}

/// A feed-forward chain of ops over parameters held in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    ops: Vec<Op>,
    shapes: Vec<Shape>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn two_mut(tensors: &mut [Tensor], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

impl Network {
    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    /// Shapes of every activation, input first.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("network has an input shape")
    }

    /// Runs the chain and returns every activation, input included.
    pub fn forward(&self, params: &ParamSet, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.input_shape().numel() {
            return Err(Error::shape(self.input_shape().numel(), input.len()));
        }
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        acts.push(input.to_vec());
        for op in &self.ops {
            let x = acts.last().expect("nonempty");
            let y = match *op {
                Op::Conv { weight, bias, ref geom } => {
                    conv_forward(geom, params.data(weight), params.data(bias), x)
                }
                Op::ConvTranspose { weight, bias, ref geom } => {
                    conv_transpose_forward(geom, params.data(weight), params.data(bias), x)
                }
                Op::Dense { weight, bias } => dense_forward(params.data(weight), params.data(bias), x),
                Op::LeakyRelu(slope) => x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
                Op::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
                Op::Reshape => x.clone(),
            };
            acts.push(y);
        }
        Ok(acts)
    }

    pub fn output(&self, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
        let mut acts = self.forward(params, input)?;
        Ok(acts.pop().expect("nonempty"))
    }

    /// Backpropagates gradients injected at any activation.
    ///
    /// `grad_at[i]` is the loss gradient flowing into activation `i`
    /// directly (index 0 is the input). Parameter gradients are added into
    /// `grads` when it is given; the input gradient is returned when
    /// `want_input` is set.
    pub fn backward(
        &self,
        params: &ParamSet,
        acts: &[Vec<f64>],
        mut grad_at: Vec<Option<Vec<f64>>>,
        mut grads: Option<&mut ParamSet>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        assert_eq!(acts.len(), self.ops.len() + 1);
        assert_eq!(grad_at.len(), acts.len());
        // Ops below the first injection point only need running when the
        // input gradient or their parameters matter.
        for (i, op) in self.ops.iter().enumerate().rev() {
            let Some(dy) = grad_at[i + 1].take() else { continue };
            let needs_dx = want_input || i > 0;
            let x = &acts[i];
            let dx = match *op {
                Op::Conv { weight, bias, ref geom } => {
                    let g = grads.as_deref_mut().map(|p| two_mut(p.tensors_mut(), weight, bias));
                    conv_backward(geom, params.data(weight), x, &dy, g, needs_dx)
                }
                Op::ConvTranspose { weight, bias, ref geom } => {
                    let g = grads.as_deref_mut().map(|p| two_mut(p.tensors_mut(), weight, bias));
                    conv_transpose_backward(geom, params.data(weight), x, &dy, g, needs_dx)
                }
                Op::Dense { weight, bias } => {
                    let g = grads.as_deref_mut().map(|p| two_mut(p.tensors_mut(), weight, bias));
                    dense_backward(params.data(weight), x, &dy, g, needs_dx)
                }
                Op::LeakyRelu(slope) => Some(
                    x.iter().zip(&dy).map(|(&v, &d)| if v > 0.0 { d } else { slope * d }).collect(),
                ),
                Op::Sigmoid => {
                    let y = &acts[i + 1];
                    Some(y.iter().zip(&dy).map(|(&s, &d)| d * s * (1.0 - s)).collect())
                }
                Op::Reshape => Some(dy),
            };
            if let Some(dx) = dx {
                match &mut grad_at[i] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(&dx) {
                            *e += d;
                        }
                    }
                    slot => *slot = Some(dx),
                }
            }
        }
        if want_input {
            grad_at[0].take()
        } else {
            None
        }
    }

    /// Backpropagates a gradient on the output only.
    pub fn backward_output(
        &self,
        params: &ParamSet,
        acts: &[Vec<f64>],
        grad_out: Vec<f64>,
        grads: Option<&mut ParamSet>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut grad_at = vec![None; acts.len()];
        grad_at[acts.len() - 1] = Some(grad_out);
        self.backward(params, acts, grad_at, grads, want_input)
    }
}

/// Appends layers to a network, allocating and initialising their
/// parameters in a shared [`ParamSet`].
///
/// Weights are drawn uniformly from `±sqrt(6 / fan_in)`; biases start at
/// zero.
pub struct NetworkBuilder<'a, R: Rng + ?Sized> {
    params: &'a mut ParamSet,
    rng: &'a mut R,
    prefix: String,
    ops: Vec<Op>,
    shapes: Vec<Shape>,
    layer: usize,
}

impl<'a, R: Rng + ?Sized> NetworkBuilder<'a, R> {
    pub fn new(prefix: &str, input: Shape, params: &'a mut ParamSet, rng: &'a mut R) -> Self {
        Self { params, rng, prefix: String::from(prefix), ops: Vec::new(), shapes: vec![input], layer: 0 }
    }

    fn current(&self) -> Shape {
        *self.shapes.last().expect("nonempty")
    }

    fn add_params(&mut self, weight_shape: Vec<usize>, bias_len: usize, fan_in: f64) -> (usize, usize) {
        let bound = libm::sqrt(6.0 / fan_in);
        let mut w = Tensor::zeros(format!("{}.{}.weight", self.prefix, self.layer), weight_shape);
        for v in &mut w.data {
            // f32-representable so a checkpoint round trip is lossless.
            *v = self.rng.random_range(-bound..bound) as f32 as f64;
        }
        let b = Tensor::zeros(format!("{}.{}.bias", self.prefix, self.layer), vec![bias_len]);
        self.layer += 1;
        (self.params.push(w), self.params.push(b))
    }

    pub fn conv(mut self, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let s = self.current();
        if s.height + 2 * pad < kernel || s.width + 2 * pad < kernel || stride == 0 {
            return Err(Error::InvalidConfig(format!("conv k{kernel} s{stride} p{pad} on {s}")));
        }
        let geom = ConvGeom {
            in_c: s.channels,
            out_c,
            kernel,
            stride,
            pad,
            in_h: s.height,
            in_w: s.width,
            out_h: (s.height + 2 * pad - kernel) / stride + 1,
            out_w: (s.width + 2 * pad - kernel) / stride + 1,
        };
        let fan_in = (s.channels * kernel * kernel) as f64;
        let (weight, bias) = self.add_params(vec![out_c, s.channels, kernel, kernel], out_c, fan_in);
        self.ops.push(Op::Conv { weight, bias, geom });
        self.shapes.push(Shape::new(out_c, geom.out_h, geom.out_w));
        Ok(self)
    }

    pub fn conv_transpose(mut self, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let s = self.current();
        let full_h = (s.height - 1) * stride + kernel;
        let full_w = (s.width - 1) * stride + kernel;
        if full_h <= 2 * pad || full_w <= 2 * pad || stride == 0 {
            return Err(Error::InvalidConfig(format!("conv-transpose k{kernel} s{stride} p{pad} on {s}")));
        }
        let geom = ConvGeom {
            in_c: s.channels,
            out_c,
            kernel,
            stride,
            pad,
            in_h: s.height,
            in_w: s.width,
            out_h: full_h - 2 * pad,
            out_w: full_w - 2 * pad,
        };
        let fan_in = (s.channels * kernel * kernel) as f64 / (stride * stride) as f64;
        let (weight, bias) = self.add_params(vec![s.channels, out_c, kernel, kernel], out_c, fan_in);
        self.ops.push(Op::ConvTranspose { weight, bias, geom });
        self.shapes.push(Shape::new(out_c, geom.out_h, geom.out_w));
        Ok(self)
    }

    pub fn dense(mut self, outputs: usize) -> Self {
        let inputs = self.current().numel();
        let (weight, bias) = self.add_params(vec![outputs, inputs], outputs, inputs as f64);
        self.ops.push(Op::Dense { weight, bias });
        self.shapes.push(Shape::flat(outputs));
        self
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        let s = self.current();
        self.ops.push(Op::LeakyRelu(slope));
        self.shapes.push(s);
        self
    }

    pub fn sigmoid(mut self) -> Self {
        let s = self.current();
        self.ops.push(Op::Sigmoid);
        self.shapes.push(s);
        self
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.current().numel() {
            return Err(Error::shape(self.current(), shape));
        }
        self.ops.push(Op::Reshape);
        self.shapes.push(shape);
        Ok(self)
    }

    pub fn build(self) -> Network {
        Network { ops: self.ops, shapes: self.shapes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn tiny(params: &mut ParamSet) -> Network {
        let mut rng = stream(0, Stream::WeightInit);
        NetworkBuilder::new("t", Shape::new(1, 4, 4), params, &mut rng)
            .conv(2, 3, 2, 1)
            .unwrap()
            .leaky_relu(0.2)
            .dense(3)
            .sigmoid()
            .reshape(Shape::new(3, 1, 1))
            .unwrap()
            .conv_transpose(1, 4, 2, 1)
            .unwrap()
            .build()
    }

    fn loss(net: &Network, params: &ParamSet, x: &[f64]) -> f64 {
        net.output(params, x).unwrap().iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
    }

    #[test]
    fn shapes_follow_layers() {
        let mut params = ParamSet::new();
        let net = tiny(&mut params);
        assert_eq!(net.output_shape(), Shape::new(1, 2, 2));
        assert_eq!(params.len(), 6);
        assert_eq!(params.tensors()[0].name, "t.0.weight");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut params = ParamSet::new();
        let net = tiny(&mut params);
        let x: Vec<f64> = (0..16).map(|i| libm::cos(i as f64)).collect();
        let acts = net.forward(&params, &x).unwrap();
        let out = acts.last().unwrap();
        let dy: Vec<f64> = out.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let mut grads = params.zeros_like();
        let dx = net.backward_output(&params, &acts, dy, Some(&mut grads), true).unwrap();
        let h = 1e-6;
        for ti in 0..params.len() {
            for j in 0..params.tensors()[ti].data.len() {
                let mut p = params.clone();
                p.tensors_mut()[ti].data[j] += h;
                let up = loss(&net, &p, &x);
                p.tensors_mut()[ti].data[j] -= 2.0 * h;
                let down = loss(&net, &p, &x);
                let fd = (up - down) / (2.0 * h);
                let an = grads.tensors()[ti].data[j];
                assert!((fd - an).abs() < 1e-6, "{} [{j}]: {fd} vs {an}", params.tensors()[ti].name);
            }
        }
        for j in 0..16 {
            let mut xp = x.clone();
            xp[j] += h;
            let up = loss(&net, &params, &xp);
            xp[j] -= 2.0 * h;
            let down = loss(&net, &params, &xp);
            assert!(((up - down) / (2.0 * h) - dx[j]).abs() < 1e-6);
        }
    }
}
