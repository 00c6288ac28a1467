//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every op appends a node holding its output; `backward` walks the tape in
//! reverse and accumulates gradients into the parameters referenced by
//! [`Graph::param`]. Parameter values are borrowed from the store, not
//! copied onto the tape.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

pub type ParamId = usize;

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor2) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor2> {
        self.tensors
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Sum(Var),
    Mean(Var),
    BroadcastRows(Var),
    ConcatRows(Vec<Var>),
}

struct Node {
    op: Op,
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor2>,
}

/// Gradients of a scalar loss with respect to every parameter in the store.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor2>,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(Tensor2::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.params {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor2::is_finite)
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    grads: Option<Gradients>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(Op::Const, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a (m x n) + bias (1 x n)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(av.cols(), bv.cols());
        let mut out = av.clone();
        let n = bv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        self.push(Op::AddBias(a, bias), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| leaky_relu(x, slope));
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::min);
        self.push(Op::Min(a, b), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor2::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor2::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Repeat a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1);
        let mut data = Vec::with_capacity(rows * t.cols());
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let out = Tensor2::from_vec(rows, t.cols(), data);
        self.push(Op::BroadcastRows(a), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor2::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Reverse pass from a `1 x 1` loss; parameter gradients are then
    /// available from [`gradients`](Self::gradients).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::validation("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        let mut param_grads = self.params.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            let acc = |grads: &mut Vec<Option<Tensor2>>, v: Var, t: Tensor2| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match op {
                Op::Const => {}
                Op::Param(id) => param_grads[id].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_transpose_rhs(self.value(b));
                    let db = self.value(a).transpose_matmul(&g);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::AddBias(a, b) => {
                    acc(&mut grads, b, g.col_sums());
                    acc(&mut grads, a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, b, g.clone());
                    acc(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, b, g.map(|x| -x));
                    acc(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(b), |x, y| x * y);
                    let db = g.zip_map(self.value(a), |x, y| x * y);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, a, g.map(|x| x * c)),
                Op::AddScalar(a) => acc(&mut grads, a, g),
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut grads, a, g.zip_map(y, |d, s| d * s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut grads, a, g.zip_map(y, |d, t| d * (1.0 - t * t)));
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(self.value(a), |d, x| if x >= 0.0 { d } else { d * slope });
                    acc(&mut grads, a, d);
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    acc(&mut grads, a, g.zip_map(y, |d, e| d * e));
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(a), |d, x| 2.0 * d * x);
                    acc(&mut grads, a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip_map(self.value(a), |d, x| if x >= lo && x <= hi { d } else { 0.0 });
                    acc(&mut grads, a, d);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut da = g.clone();
                    let mut db = g;
                    for k in 0..da.len() {
                        if av.data()[k] <= bv.data()[k] {
                            db.data_mut()[k] = 0.0;
                        } else {
                            da.data_mut()[k] = 0.0;
                        }
                    }
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    acc(&mut grads, a, Tensor2::filled(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(a).shape();
                    let n = (r * c) as f64;
                    acc(&mut grads, a, Tensor2::filled(r, c, g.data()[0] / n));
                }
                Op::BroadcastRows(a) => acc(&mut grads, a, g.col_sums()),
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(&mut grads, p, Tensor2::from_vec(rows, cols, slice));
                        offset += rows;
                    }
                }
            }
        }
        self.grads = Some(Gradients {
            params: param_grads,
        });
        Ok(())
    }

    pub fn gradients(&self) -> Result<&Gradients> {
        self.grads
            .as_ref()
            .ok_or_else(|| Error::state("gradients requested before backward"))
    }

    pub fn take_gradients(&mut self) -> Result<Gradients> {
        self.grads
            .take()
            .ok_or_else(|| Error::state("gradients requested before backward"))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient() {
        // L = 0.5 ||W x||^2  =>  dL/dW = (W x) x^T; with row vectors y = x W,
        // dL/dW = x^T y.
        let mut store = ParamStore::new();
        let w = store.push("w", Tensor2::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]));
        let x = [1.0, -2.0, 0.5];
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor2::row_vector(&x));
        let wv = g.param(w);
        let y = g.matmul(xv, wv);
        let y2 = g.square(y);
        let s = g.sum(y2);
        let loss = g.scale(s, 0.5);
        let y_val = g.value(y).clone();
        g.backward(loss).unwrap();
        let grads = g.take_gradients().unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let expect = x[r] * y_val.get(0, c);
                assert!((grads.params[w].get(r, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.push("w", Tensor2::filled(2, 2, 1.0));
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor2::scalar(3.0));
        g.backward(c).unwrap();
        let grads = g.gradients().unwrap();
        assert!(grads.params[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_only_after_backward() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor2::scalar(1.0));
        assert!(matches!(g.gradients(), Err(Error::State(_))));
        g.backward(c).unwrap();
        assert!(g.gradients().is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor2::zeros(2, 1));
        assert!(g.backward(c).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(5.0, 0.01), 5.0);
        assert_eq!(leaky_relu(-2.0, 0.01), -0.02);
        assert_eq!(leaky_relu(0.0, 0.01), 0.0);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.push("a", Tensor2::from_vec(2, 3, vec![0.3, -0.7, 1.2, -0.1, 0.5, -1.4]));
        let b = store.push("b", Tensor2::from_vec(1, 3, vec![0.2, -0.4, 0.9]));
        let loss_of = |store: &ParamStore| -> (f64, Option<Gradients>) {
            let mut g = Graph::new(store);
            let av = g.param(a);
            let bv = g.param(b);
            let x = g.add_bias(av, bv);
            let s = g.sigmoid(x);
            let t = g.tanh(x);
            let l = g.leaky_relu(x, 0.01);
            let e = g.exp(t);
            let m = g.mul(s, e);
            let d = g.sub(m, l);
            let c = g.clamp(d, -0.5, 0.8);
            let mn = g.min(c, t);
            let bb = g.broadcast_rows(bv, 2);
            let q = g.mul(mn, bb);
            let cat = g.concat_rows(&[q, s]);
            let sq = g.square(cat);
            let sc = g.scale(sq, 1.7);
            let sh = g.add_scalar(sc, 0.3);
            let loss = g.mean(sh);
            let v = g.value(loss).get(0, 0);
            g.backward(loss).unwrap();
            (v, Some(g.take_gradients().unwrap()))
        };
        let (_, grads) = loss_of(&store);
        let grads = grads.unwrap();
        let h = 1e-6;
        for id in [a, b] {
            for k in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let an = grads.params[id].data()[k];
                assert!((fd - an).abs() < 1e-7, "{} [{k}]: fd {fd} vs {an}", store.name(id));
            }
        }
    }
}
