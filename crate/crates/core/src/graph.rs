//! Reverse-mode autodiff tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the
//! [`ParamStore`] layout. Parameters are pulled onto the tape once per tape,
//! so a weight reused across recurrence steps collects all contributions in
//! one node.

use std::collections::HashMap;

use crate::conv;
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x * m` with `m` single-channel, broadcast over the channels of `x`.
    MulMap(Var, Var),
    OneMinus(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Conv { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulMap(..) => "mul_map",
            Op::OneMinus(_) => "one_minus",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Mse(..) => "mse",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

pub struct Tape<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    scope: Vec<String>,
    first_nonfinite: Option<(usize, &'static str, String)>,
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(512),
            params: HashMap::new(),
            scope: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((self.nodes.len(), op.name(), self.scope.join("/")));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Error describing the first node whose value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.first_nonfinite {
            None => Ok(()),
            Some((layer, op, scope)) => Err(Error::NonFinite {
                layer: *layer,
                op,
                scope: scope.clone(),
            }),
        }
    }

    /// Sign of every leaky-ReLU input, in tape order. Two evaluations with
    /// different patterns lie on different linear pieces.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(x, _) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv { x, w, b }))
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(ctx, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Channel-broadcast product with a single-channel map.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ms = self.shape(map);
        if ms.c != 1 || !xs.same_spatial(&ms) {
            return Err(Error::shape("mul_map", xs.with_c(1), ms));
        }
        let out = mul_map_value(self.value(x), self.value(map));
        Ok(self.push(out, Op::MulMap(x, map)))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() - v);
        self.push(out, Op::OneMinus(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k = T::lit(s);
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let k = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * k });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if start + len > xs.c || len == 0 {
            return Err(Error::config(format!(
                "narrow {start}..{} out of range for {xs}",
                start + len
            )));
        }
        let out = self.value(x).narrow_channels(start, len);
        Ok(self.push(out, Op::Narrow { x, start }))
    }

    /// Mean squared difference over every element; a `[1,1,1,1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let out = Tensor::scalar(T::lit(mse_value(self.value(a), self.value(b))));
        Ok(self.push(out, Op::Mse(a, b)))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            let s = self.shape(v);
            if s != Shape::scalar() {
                return Err(Error::shape("weighted_sum", Shape::scalar(), s));
            }
            acc += w * self.value(v).item().as_f64();
        }
        Ok(self.push(Tensor::scalar(T::lit(acc)), Op::WeightedSum(terms.to_vec())))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Backward<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b } => {
                    let need_x = !matches!(self.nodes[x.0].op, Op::Input);
                    let cg = conv::backward(self.value(*x), self.value(*w), &g, need_x);
                    if need_x {
                        acc(&mut grads, *x, cg.input);
                    }
                    acc(&mut grads, *w, cg.weight);
                    acc(&mut grads, *b, cg.bias);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |g, y| g * y);
                    let gb = g.zip_map(self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulMap(x, m) => {
                    let xv = self.value(*x);
                    let mv = self.value(*m);
                    let gx = mul_map_value(&g, mv);
                    let s = xv.shape();
                    let p = s.plane();
                    let mut gm = Tensor::zeros(mv.shape());
                    for n in 0..s.n {
                        let dst = gm.plane_mut(n, 0);
                        for c in 0..s.c {
                            for ((d, &gv), &xv) in dst.iter_mut().zip(g.plane(n, c)).zip(xv.plane(n, c)) {
                                *d += gv * xv;
                            }
                        }
                        debug_assert_eq!(dst.len(), p);
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *m, gm);
                }
                Op::OneMinus(x) => acc(&mut grads, *x, g.map(|v| -v)),
                Op::Scale(x, s) => {
                    let k = T::lit(*s);
                    acc(&mut grads, *x, g.map(|v| v * k));
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |g, y| g * y * (T::one() - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |g, y| g * (T::one() - y * y));
                    acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let k = T::lit(*slope);
                    let gx = g.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { g * k });
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).c;
                        acc(&mut grads, p, g.narrow_channels(start, c));
                        start += c;
                    }
                }
                Op::Narrow { x, start } => {
                    let xs = self.shape(*x);
                    let mut gx = Tensor::zeros(xs);
                    let p = xs.plane();
                    let len = g.shape().c;
                    for n in 0..xs.n {
                        gx.image_mut(n)[start * p..(start + len) * p].copy_from_slice(g.image(n));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Mse(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let k = g.item() * T::lit(2.0 / av.len() as f64);
                    let ga = av.zip_map(bv, |x, y| (x - y) * k);
                    acc(&mut grads, *b, ga.map(|v| -v));
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, Tensor::scalar(g.item() * T::lit(w)));
                    }
                }
            }
        }
        Backward { grads }
    }

    /// Parameter gradients of `loss`, laid out like the store.
    pub fn param_grads(&self, loss: Var) -> Gradients<T> {
        let back = self.backward(loss);
        self.collect_params(&back)
    }

    pub fn collect_params(&self, back: &Backward<T>) -> Gradients<T> {
        let mut out = Gradients::new(self.store.len());
        for (&id, &v) in &self.params {
            if let Some(g) = back.wrt(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}

/// Per-node gradients returned by [`Tape::backward`].
pub struct Backward<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient with respect to an input or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn mul_map_value<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let mp = m.plane(n, 0);
        for c in 0..s.c {
            for ((o, &a), &b) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)).zip(mp) {
                *o = a * b;
            }
        }
    }
    out
}

pub(crate) fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n
}
