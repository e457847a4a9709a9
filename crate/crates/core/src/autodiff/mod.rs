//! A small tape-based reverse-mode differentiation engine.
//!
//! Every value is a 2-D row-major [`Tensor`] (batch rows x feature columns).
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! then walks the tape in reverse and returns gradients for every parameter
//! leaf, keyed by the store tag it was registered with.

mod adam;
mod param;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use param::{clip_global_norm, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { store: usize, id: ParamId },
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Column { x: Var, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    LogGamma(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node; convenient for `[1, 1]` losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Parameter leaf; its gradient is reported under `(store, id)`.
    pub fn param(&mut self, store: usize, params: &ParamStore, id: ParamId) -> Var {
        self.push(params.get(id).tensor.clone(), Op::Param { store, id })
    }

    /// `x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = self.shape2(x);
        let wt = &self.nodes[w.0].value;
        if wt.shape().len() != 2 || wt.shape()[1] != fan_in {
            return Err(Error::Shape(format!(
                "affine: input width {fan_in} vs weight shape {:?}",
                wt.shape()
            )));
        }
        let fan_out = wt.shape()[0];
        let bt = &self.nodes[b.0].value;
        if bt.len() != fan_out {
            return Err(Error::Shape(format!(
                "affine: bias length {} vs output width {fan_out}",
                bt.len()
            )));
        }
        let xt = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * fan_out);
        for r in 0..n {
            let xr = xt.row(r);
            for o in 0..fan_out {
                let wr = &wt.values()[o * fan_in..(o + 1) * fan_in];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                out.push(dot + bt.values()[o]);
            }
        }
        let value = Tensor::matrix(n, fan_out, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, ln_gamma, Op::LogGamma(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, 1.0)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::Shape("add_all on an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Column-wise concatenation of `[n, c_i]` nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let n = self.shape2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rows, cols) = self.shape2(p);
            if rows != n {
                return Err(Error::Shape(format!("concat: {rows} rows vs {n}")));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::matrix(n, total, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Column `index` of `x` as an `[n, 1]` node.
    pub fn column(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, cols) = self.shape2(x);
        if index >= cols {
            return Err(Error::Shape(format!("column {index} of width {cols}")));
        }
        let t = &self.nodes[x.0].value;
        let values = (0..n).map(|r| t.get(r, index)).collect();
        Ok(self.push(Tensor::column(values), Op::Column { x, index }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let m = t.values().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::filled(self.value_checked(output)?.shape(), 1.0);
        self.backward_with(output, seed)
    }

    /// Reverse pass seeded with `output_gradient` (same shape as `output`).
    pub fn backward_with(&self, output: Var, output_gradient: Tensor) -> Result<Gradients> {
        let out_value = self.value_checked(output)?;
        if out_value.shape() != output_gradient.shape() {
            return Err(Error::Shape(format!(
                "seed gradient {:?} for output {:?}",
                output_gradient.shape(),
                out_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(output_gradient);
        let mut params = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param { store, id } = node.op {
                params.push((store, id, g));
            }
        }
        Ok(Gradients { params })
    }

    fn value_checked(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Usage("backward called before a forward pass".into()))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let values = a
                .values()
                .iter()
                .zip(g.values())
                .map(|(&x, &gy)| f(x, gy))
                .collect();
            Tensor::new(a.shape().to_vec(), values).expect("same shape")
        };

        match &node.op {
            Op::Constant | Op::Param { .. } => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (n, fan_in) = (xt.rows(), xt.cols());
                let fan_out = wt.shape()[0];
                let mut dx = vec![0.0; n * fan_in];
                let mut dw = vec![0.0; fan_out * fan_in];
                let mut db = vec![0.0; fan_out];
                for r in 0..n {
                    let xr = xt.row(r);
                    let gr = g.row(r);
                    let dxr = &mut dx[r * fan_in..(r + 1) * fan_in];
                    for o in 0..fan_out {
                        let go = gr[o];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        let wr = &wt.values()[o * fan_in..(o + 1) * fan_in];
                        let dwr = &mut dw[o * fan_in..(o + 1) * fan_in];
                        for i in 0..fan_in {
                            dxr[i] += go * wr[i];
                            dwr[i] += go * xr[i];
                        }
                    }
                }
                acc(*x, Tensor::new(xt.shape().to_vec(), dx)?);
                acc(*w, Tensor::new(wt.shape().to_vec(), dw)?);
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db)?);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, zip_map(y, &|t, gy| gy * (1.0 - t * t)));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, zip_map(y, &|s, gy| gy * s * (1.0 - s)));
            }
            Op::Softplus(a) => acc(*a, zip_map(val(*a), &|x, gy| gy * sigmoid(x))),
            Op::Relu(a) => acc(
                *a,
                zip_map(val(*a), &|x, gy| if x > 0.0 { gy } else { 0.0 }),
            ),
            Op::Concat(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut d = Vec::with_capacity(n * c);
                    for r in 0..n {
                        d.extend_from_slice(&g.values()[r * total + offset..r * total + offset + c]);
                    }
                    acc(p, Tensor::new(val(p).shape().to_vec(), d)?);
                    offset += c;
                }
            }
            Op::Column { x, index } => {
                let xt = val(*x);
                let mut d = Tensor::zeros(xt.shape());
                let c = xt.cols();
                for (r, gy) in g.values().iter().enumerate() {
                    d.values_mut()[r * c + index] = *gy;
                }
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, zip_map(tb, &|y, gy| gy * y));
                acc(*b, zip_map(ta, &|x, gy| gy * x));
            }
            Op::Div(a, b) => {
                let tb = val(*b);
                acc(*a, zip_map(tb, &|y, gy| gy / y));
                // d(a/b)/db = -(a/b)/b
                let q = &node.value;
                let values = q
                    .values()
                    .iter()
                    .zip(tb.values())
                    .zip(g.values())
                    .map(|((&q, &y), &gy)| -gy * q / y)
                    .collect();
                acc(*b, Tensor::new(tb.shape().to_vec(), values)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::Log(a) => acc(*a, zip_map(val(*a), &|x, gy| gy / x)),
            Op::Abs(a) => acc(
                *a,
                zip_map(val(*a), &|x, gy| {
                    if x > 0.0 {
                        gy
                    } else if x < 0.0 {
                        -gy
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Square(a) => acc(*a, zip_map(val(*a), &|x, gy| 2.0 * x * gy)),
            Op::LogGamma(a) => acc(*a, zip_map(val(*a), &|x, gy| gy * digamma(x))),
            Op::Sum(a) => {
                let s = g.values()[0];
                acc(*a, Tensor::filled(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g.values()[0] / t.len().max(1) as f64;
                acc(*a, Tensor::filled(t.shape(), s));
            }
        }
        Ok(())
    }
}

/// Parameter gradients from one reverse pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(usize, ParamId, Tensor)>,
}

impl Gradients {
    /// Adds the gradients recorded under `tag` into `store`.
    pub fn accumulate_into(&self, tag: usize, store: &mut ParamStore) {
        for (s, id, g) in &self.params {
            if *s == tag {
                store.get_mut(*id).gradient.add_assign(g);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, _, g)| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_affine_passes_input_through() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = store.add("b", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, 3.0]).unwrap());
        let (wv, bv) = (g.param(0, &store, w), g.param(0, &store, b));
        let y = g.affine(x, wv, bv).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn closed_form_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let sp = g.softplus(z);
        assert!((g.scalar(sp) - 2f64.ln()).abs() < 1e-15);
        let x = g.constant(Tensor::scalar(1.5));
        let lg = g.ln_gamma(x);
        assert!((g.scalar(lg) - (-0.120_782_237_635_245_2)).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_gradient_is_digamma() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::new();
        let x = g.param(0, &store, id);
        let y = g.ln_gamma(x);
        g.backward(y).unwrap().accumulate_into(0, &mut store);
        let d = store.get(id).gradient.values()[0];
        assert!((d - 0.422_784_335_098_467_1).abs() < 1e-10);
    }

    #[test]
    fn mean_of_affine_output_gives_uniform_bias_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let (w, b) = store.add_affine("l", 3, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap());
        let (wv, bv) = (g.param(0, &store, w), g.param(0, &store, b));
        let y = g.affine(x, wv, bv).unwrap();
        let loss = g.mean(y);
        g.backward(loss).unwrap().accumulate_into(0, &mut store);
        // 8 outputs, each bias feeds 4 of them
        for v in store.get(b).gradient.values() {
            assert!((v - 4.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_without_forward_is_a_usage_error() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 1]));
        let b = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    /// Every node type against central differences on one random input.
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = fn(&mut Graph, Var, Var) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("tanh", |g, a, _| g.tanh(a)),
            ("sigmoid", |g, a, _| g.sigmoid(a)),
            ("softplus", |g, a, _| g.softplus(a)),
            ("relu", |g, a, _| g.relu(a)),
            ("add", |g, a, b| g.add(a, b).unwrap()),
            ("sub", |g, a, b| g.sub(a, b).unwrap()),
            ("mul", |g, a, b| g.mul(a, b).unwrap()),
            ("div", |g, a, b| {
                let pos = g.softplus(b);
                let pos = g.shift(pos, 0.5);
                g.div(a, pos).unwrap()
            }),
            ("log", |g, a, _| {
                let s = g.square(a);
                let s = g.shift(s, 0.3);
                g.log(s)
            }),
            ("abs", |g, a, _| g.abs(a)),
            ("square", |g, a, _| g.square(a)),
            ("ln_gamma", |g, a, _| {
                let s = g.softplus(a);
                let s = g.shift(s, 0.2);
                g.ln_gamma(s)
            }),
            ("concat", |g, a, b| {
                let c = g.concat(&[a, b]).unwrap();
                g.square(c)
            }),
            ("column", |g, a, _| {
                let c = g.column(a, 1).unwrap();
                g.scale(c, 3.0)
            }),
            ("sum", |g, a, _| {
                let s = g.tanh(a);
                g.sum(s)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, build) in cases {
            let mut store = ParamStore::new();
            let av: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bv: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // keep away from the kinks of relu/abs
            let av: Vec<f64> = av.iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect();
            let a = store.add("a", Tensor::matrix(3, 2, av).unwrap()).unwrap();
            let b = store.add("b", Tensor::matrix(3, 2, bv).unwrap()).unwrap();
            let weights = Tensor::matrix(3, 2, (0..6).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap();
            let eval = |store: &ParamStore| -> (Graph, Var) {
                let mut g = Graph::new();
                let (va, vb) = (g.param(0, store, a), g.param(0, store, b));
                let out = build(&mut g, va, vb);
                let loss = if g.value(out).len() == 1 {
                    out
                } else {
                    let cols = g.value(out).cols();
                    let wt = if cols == 2 {
                        weights.clone()
                    } else {
                        Tensor::filled(g.value(out).shape(), 0.7)
                    };
                    let wv = g.constant(wt);
                    let prod = g.mul(out, wv).unwrap();
                    g.sum(prod)
                };
                (g, loss)
            };
            let (g, loss) = eval(&store);
            g.backward(loss).unwrap().accumulate_into(0, &mut store);
            for id in [a, b] {
                for k in 0..6 {
                    let analytic = store.get(id).gradient.values()[k];
                    let x0 = store.get(id).tensor.values()[k];
                    let h = 1e-5 * x0.abs().max(1.0);
                    let mut plus = store.clone();
                    plus.get_mut(id).tensor.values_mut()[k] = x0 + h;
                    let mut minus = store.clone();
                    minus.get_mut(id).tensor.values_mut()[k] = x0 - h;
                    let (gp, lp) = eval(&plus);
                    let (gm, lm) = eval(&minus);
                    let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{name}: analytic {analytic} fd {fd}");
                }
            }
        }
    }
}
