use rand::Rng;

use super::kernels::{self, Conv3dGeom};
use super::tensor::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Train,
    McInference,
    #[default]
    Off,
}

/// Backward rule for fused operations defined outside the engine (losses).
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input whose `needs` flag is set.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv3d { input: Var, kernel: Var, bias: Var, geom: Conv3dGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Dense { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    Softmax { input: Var },
    Dropout { input: Var, mask: Vec<T> },
    Concat { a: Var, b: Var },
    Reshape { input: Var },
    Sum { input: Var },
    Mul { a: Var, b: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Linear record of forward operations. `backward` replays it in exact
/// reverse order. Operations whose inputs need no gradient are evaluated but
/// not linked, so inference on a fresh tape keeps no backward state.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(what: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], what: &str, op: Op<T>) -> Result<Var> {
        check_finite(what, &data)?;
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = inputs.iter().any(|&v| self.needs(v));
        let op = if value.requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, op))
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = Conv3dGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if self.shape(bias) != [geom.out_channels] {
            return Err(dim_err!(
                "conv3d bias shape {:?} does not match {} output channels",
                self.shape(bias),
                geom.out_channels
            ));
        }
        let out = kernels::conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        self.record(geom.output_shape(), out, &[input, kernel, bias], "conv3d", Op::Conv3d { input, kernel, bias, geom })
    }

    pub fn maxpool3d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (shape, out, argmax) = kernels::maxpool3d_forward(self.shape(input), self.value(input).data(), window)?;
        self.record(shape, out, &[input], "maxpool3d", Op::MaxPool { input, argmax })
    }

    pub fn upsample3d(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (shape, out) = kernels::upsample3d_forward(self.shape(input), self.value(input).data(), factor)?;
        self.record(shape, out, &[input], "upsample3d", Op::Upsample { input, factor })
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(dim_err!("dense shapes incompatible: input {xs:?}, weight {ws:?}, bias {bs:?}"));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let mut out = kernels::matmul(self.value(input).data(), self.value(weight).data(), n, f, g);
        let b = self.value(bias).data();
        for row in out.chunks_mut(g) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        self.record(vec![n, g], out, &[input, weight, bias], "dense", Op::Dense { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(input).to_vec();
        self.record(shape, out, &[input], "relu", Op::Relu { input })
    }

    /// Softmax over axis 1 of an `[N, C, ...]` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("softmax_channels expects at least 2 axes, got {shape:?}"));
        }
        check_finite("softmax input", self.value(input).data())?;
        let out = kernels::softmax_channels(&shape, self.value(input).data());
        self.record(shape, out, &[input], "softmax", Op::Softmax { input })
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R, mode: DropoutMode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == DropoutMode::Off || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let out = self.value(input).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(input).to_vec();
        self.record(shape, out, &[input], "dropout", Op::Dropout { input, mask })
    }

    /// Concatenates two `[N, C, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(dim_err!("cannot concatenate {sa:?} and {sb:?} along channels"));
        }
        let (ca, cb) = (sa[1], sb[1]);
        let v: usize = sa[2..].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * ca * v..(n + 1) * ca * v]);
            out.extend_from_slice(&db[n * cb * v..(n + 1) * cb * v]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        self.record(shape, out, &[a, b], "concat", Op::Concat { a, b })
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(input).len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(input)));
        }
        let data = self.value(input).data().to_vec();
        self.record(shape, data, &[input], "reshape", Op::Reshape { input })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.record(vec![1], vec![s], &[input], "sum", Op::Sum { input })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("mul shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, &[a, b], "mul", Op::Mul { a, b })
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let shape = output.shape().to_vec();
        let name = op.name();
        let data = output.into_data();
        self.record(shape, data, &inputs.clone(), name, Op::Custom { inputs, op })
    }

    /// Propagates d(loss)/d(.) to every gradient-requiring leaf reachable from
    /// `loss`. Contributions accumulate additively across fan-out and across
    /// repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(dim_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.value.requires_grad {
                    grads[i] = Some(g);
                }
                continue;
            }
            for (var, contrib) in self.backward_rule(&node.op, &node.value, &g) {
                if self.needs(var) {
                    add_into(&mut grads[var.0], contrib);
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                add_into(&mut self.nodes[i].value.grad, g);
            }
        }
        Ok(())
    }

    fn backward_rule(&self, op: &Op<T>, out: &Tensor<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.value(v);
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias, geom } => {
                if self.needs(*input) {
                    res.push((*input, kernels::conv3d_backward_input(geom, g, val(*kernel).data())));
                }
                if self.needs(*kernel) || self.needs(*bias) {
                    let (gk, gb) = kernels::conv3d_backward_params(geom, val(*input).data(), g);
                    res.push((*kernel, gk));
                    res.push((*bias, gb));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![T::zero(); val(*input).len()];
                for (&src, &go) in argmax.iter().zip(g) {
                    gi[src] += go;
                }
                res.push((*input, gi));
            }
            Op::Upsample { input, factor } => {
                res.push((*input, kernels::upsample3d_backward(val(*input).shape(), g, *factor)));
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, f, gdim) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.needs(*input) {
                    let mut gx = vec![T::zero(); n * f];
                    for i in 0..n {
                        for k in 0..f {
                            let wrow = &w.data()[k * gdim..(k + 1) * gdim];
                            gx[i * f + k] = wrow.iter().zip(&g[i * gdim..(i + 1) * gdim]).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    res.push((*input, gx));
                }
                if self.needs(*weight) {
                    let mut gw = vec![T::zero(); f * gdim];
                    for i in 0..n {
                        for k in 0..f {
                            let xv = x.data()[i * f + k];
                            for (o, &gv) in gw[k * gdim..(k + 1) * gdim].iter_mut().zip(&g[i * gdim..(i + 1) * gdim]) {
                                *o += xv * gv;
                            }
                        }
                    }
                    res.push((*weight, gw));
                }
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); gdim];
                    for row in g.chunks(gdim) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    res.push((*bias, gb));
                }
            }
            Op::Relu { input } => {
                let gi = val(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &go)| if x > T::zero() { go } else { T::zero() })
                    .collect();
                res.push((*input, gi));
            }
            Op::Softmax { input } => {
                res.push((*input, kernels::softmax_channels_backward(out.shape(), out.data(), g)));
            }
            Op::Dropout { input, mask } => {
                res.push((*input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let v: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * v, sb[1] * v);
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for chunk in g.chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Reshape { input } => res.push((*input, g.to_vec())),
            Op::Sum { input } => res.push((*input, vec![g[0]; val(*input).len()])),
            Op::Mul { a, b } => {
                let (da, db) = (val(*a).data(), val(*b).data());
                res.push((*a, g.iter().zip(db).map(|(&x, &y)| x * y).collect()));
                res.push((*b, g.iter().zip(da).map(|(&x, &y)| x * y).collect()));
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                for (&v, gi) in inputs.iter().zip(op.backward(&tensors, out, g, &needs)) {
                    if let Some(gi) = gi {
                        res.push((v, gi));
                    }
                }
            }
        }
        res
    }
}
