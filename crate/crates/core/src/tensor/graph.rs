use std::collections::HashMap;

use super::kernels::{self, ConvGeom, LogitTransform};
use super::{Float, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample(Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Concat {
        a: Var,
        b: Var,
    },
    Expand(Var),
    Select {
        x: Var,
        index: usize,
    },
    Stack(Vec<Var>),
    Sum(Var),
    Mean {
        x: Var,
        mask: Option<Tensor<T>>,
        denom: T,
    },
    Logit(Var, LogitTransform),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use reverse-mode tape.
///
/// Every operation appends a node holding its output and the inputs its
/// backward rule needs, so node order is a topological order. `backward` may
/// be called once per graph; build a new graph for the next forward pass.
/// Gradients are retained for leaf nodes only.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter once per graph, so repeated use across time
    /// steps accumulates into a single gradient.
    pub fn param(&mut self, key: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(key, v);
        v
    }

    /// The leaf registered under `key`, if any.
    pub fn param_var(&self, key: usize) -> Option<Var> {
        self.params.get(&key).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Upsample(x), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let y = elementwise_binary(kind, ta, tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(Float::sigmoid);
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(Float::tanh);
        let rg = self.rg(x);
        self.push(y, Op::Tanh(x), rg)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::ONE - v);
        let rg = self.rg(x);
        self.push(y, Op::OneMinus(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self.value(x).map(|v| kernels::leaky_relu(v, slope));
        let rg = self.rg(x);
        self.push(y, Op::LeakyRelu(x, slope), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).map(|v| clamp(v, lo, hi));
        let rg = self.rg(x);
        self.push(y, Op::Clamp(x, lo, hi), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    pub fn expand_channels(&mut self, v: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let y = kernels::expand_channels(self.value(v), batch, h, w)?;
        let rg = self.rg(v);
        Ok(self.push(y, Op::Expand(v), rg))
    }

    /// Channel slice `[start, start+len)` of a 4-D tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if self.value(x).rank() != 4 {
            return Err(shape_err!("slice_channels expects 4-D, got {:?}", self.shape(x)));
        }
        let parts: Vec<Var> = (start..start + len)
            .map(|c| self.select_axis1(x, c))
            .collect::<Result<_>>()?;
        self.stack_axis1(&parts)
    }

    /// Drop axis 1 by picking `index`: `[B, T, ...]` → `[B, ...]`.
    pub fn select_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || index >= t.shape()[1] {
            return Err(shape_err!("select index {} on axis 1 of {:?}", index, t.shape()));
        }
        let mut shape = t.shape().to_vec();
        shape.remove(1);
        let y = t.slice_axis1(index, 1)?.reshape(&shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Select { x, index }, rg))
    }

    /// `k × [B, ...]` → `[B, k, ...]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::stack_axis1(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::Stack(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::Sum(x), rg)
    }

    /// Mean of all elements, or `sum(x ⊙ mask) / sum(mask)` when a {0,1}
    /// mask is given.
    pub fn reduce_mean(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        let (num, denom) = match mask {
            None => {
                if xv.is_empty() {
                    return Err(Error::Empty("mean of an empty tensor".into()));
                }
                (xv.sum(), T::from_f64(xv.len() as f64))
            }
            Some(m) => {
                if m.shape() != xv.shape() {
                    return Err(shape_err!("mask {:?} vs input {:?}", m.shape(), xv.shape()));
                }
                let denom = m.sum();
                if denom <= T::ZERO {
                    return Err(Error::Empty("masked mean with an all-zero mask".into()));
                }
                let num = xv
                    .data()
                    .iter()
                    .zip(m.data())
                    .fold(T::ZERO, |s, (&v, &w)| s + v * w);
                (num, denom)
            }
        };
        let y = Tensor::scalar(num / denom);
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::Mean {
                x,
                mask: mask.cloned(),
                denom,
            },
            rg,
        ))
    }

    /// Elementwise truncated normalized logit; zero gradient where clipped.
    pub fn logit_transform(&mut self, x: Var, transform: LogitTransform) -> Var {
        let y = self
            .value(x)
            .map(|v| T::from_f64(transform.apply(v.to_f64())));
        let rg = self.rg(x);
        self.push(y, Op::Logit(x, transform), rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across all
    /// uses of a value. Errors if called a second time on the same graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (input, contrib) in self.input_grads(i, &g) {
                self.accumulate(input, contrib)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, geom } => {
                let need = [self.rg(*x), self.rg(*w), self.rg(*b)];
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), geom, g, need);
                let mut v = Vec::new();
                if let Some(t) = cg.input {
                    v.push((*x, t));
                }
                if let Some(t) = cg.kernel {
                    v.push((*w, t));
                }
                if let Some(t) = cg.bias {
                    v.push((*b, t));
                }
                v
            }
            Op::Upsample(x) => vec![(*x, kernels::upsample2x_backward(self.shape(*x), g))],
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => (mul_bcast(g, tb), mul_bcast(g, ta)),
                };
                vec![
                    (*a, reduce_to(ga, ta.shape())),
                    (*b, reduce_to(gb, tb.shape())),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, out, |gv, y| gv * y * (T::ONE - y)))],
            Op::Tanh(x) => vec![(*x, zip_map(g, out, |gv, y| gv * (T::ONE - y * y)))],
            Op::OneMinus(x) => vec![(*x, g.map(|v| -v))],
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                vec![(
                    *x,
                    zip_map(g, self.value(*x), |gv, xv| if xv >= T::ZERO { gv } else { gv * s }),
                )]
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *x,
                    zip_map(g, self.value(*x), |gv, xv| {
                        if xv < lo || xv > hi {
                            T::ZERO
                        } else {
                            gv
                        }
                    }),
                )]
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                vec![
                    (*a, g.slice_axis1(0, ca).expect("concat grad")),
                    (*b, g.slice_axis1(ca, cb).expect("concat grad")),
                ]
            }
            Op::Expand(v) => vec![(*v, kernels::expand_channels_backward(self.value(*v).len(), g))],
            Op::Select { x, index } => {
                let xs = self.shape(*x);
                let (outer, extent) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let mut d = vec![T::ZERO; outer * extent * inner];
                for o in 0..outer {
                    let dst = (o * extent + index) * inner;
                    d[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                vec![(*x, Tensor::new(xs, d).expect("select grad"))]
            }
            Op::Stack(parts) => {
                let ps = self.shape(parts[0]).to_vec();
                parts
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let t = g.slice_axis1(k, 1).expect("stack grad");
                        (p, t.reshape(&ps).expect("stack grad"))
                    })
                    .collect()
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(self.shape(*x), gv))]
            }
            Op::Mean { x, mask, denom } => {
                let gv = g.data()[0] / *denom;
                let t = match mask {
                    None => Tensor::full(self.shape(*x), gv),
                    Some(m) => m.map(|w| w * gv),
                };
                vec![(*x, t)]
            }
            Op::Logit(x, transform) => vec![(
                *x,
                zip_map(g, self.value(*x), |gv, xv| {
                    gv * T::from_f64(transform.derivative(xv.to_f64()))
                }),
            )],
        }
    }

    /// Gradient of every parameter leaf registered via [`Graph::param`],
    /// indexed by key; zeros for keys in `shapes` that never took part.
    pub fn param_grads(&self, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        shapes
            .iter()
            .enumerate()
            .map(|(key, shape)| {
                self.param_var(key)
                    .and_then(|v| self.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(shape))
            })
            .collect()
    }
}

pub(crate) fn clamp<T: Float>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn is_scalar<T: Float>(t: &Tensor<T>) -> bool {
    t.rank() == 0
}

pub(crate) fn elementwise_binary<T: Float>(
    kind: Binary,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    } else if is_scalar(b) {
        let s = b.data()[0];
        Ok(a.map(|x| f(x, s)))
    } else if is_scalar(a) {
        let s = a.data()[0];
        Ok(b.map(|y| f(s, y)))
    } else {
        Err(shape_err!(
            "elementwise {:?} on {:?} vs {:?} (only scalars broadcast)",
            kind,
            a.shape(),
            b.shape()
        ))
    }
}

fn mul_bcast<T: Float>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if is_scalar(other) {
        let s = other.data()[0];
        g.map(|v| v * s)
    } else {
        zip_map(g, other, |a, b| a * b)
    }
}

fn reduce_to<T: Float>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shape")
}
