use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Real and imaginary parts of a complex activation, same shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexVar {
    pub re: Var,
    pub im: Var,
}

/// `(grad_out, parent values, output value, which parents need gradients)`
/// to one optional gradient per parent.
pub(crate) type Backward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A recording of one forward pass. Nodes are appended in execution order,
/// which is a topological order, and [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: Option<ChaCha8Rng>,
    stochastic: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by parameter.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn slot(&mut self, id: ParamId) -> &mut Option<Tensor<T>> {
        if self.grads.len() <= id.0 {
            self.grads.resize_with(id.0 + 1, || None);
        }
        &mut self.grads[id.0]
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<T>) {
        match self.slot(id) {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Global L2 norm.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_of_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rng: None,
            stochastic: false,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            rng: Some(rng),
            stochastic: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// True once a random op has drawn from the RNG.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    /// Gives back the RNG, advanced by whatever was drawn.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf sharing the stored tensor.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get_arc(id),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: Backward<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss; returns gradients for every
    /// parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = ParamGrads::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(id) = node.param {
                out.add(id, &g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let parents: Vec<&Tensor<T>> = node.parents.iter().map(|&p| self.nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pg = bw(&g, &parents, &node.value, &needs);
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Ok(out)
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("add", a, b)?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("sub", a, b)?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("mul", a, b)?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| zip_with(g, p[1], |g, y| g * y)),
                    needs[1].then(|| zip_with(g, p[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    /// Sum of several same-shape tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::invalid("add_n of nothing"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|v| v * s);
        self.push(v, &[x], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// Adds `b` (length `shape[axis]`) along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(shape_err("add_bias", &xs, bs));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for o in 0..outer {
            for (j, &bj) in bias.iter().enumerate() {
                let base = (o * n + j) * inner;
                v.data_mut()[base..base + inner].iter_mut().for_each(|e| *e += bj);
            }
        }
        Ok(self.push(
            v,
            &[x, b],
            Box::new(move |g, _, _, needs| {
                let db = needs[1].then(|| {
                    let mut db = vec![T::zero(); n];
                    for o in 0..outer {
                        for (j, d) in db.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *d += g.data()[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(&[n], db).expect("bias shape")
                });
                vec![needs[0].then(|| g.clone()), db]
            }),
        ))
    }

    /// `x[b, t, :] + e[b, :]` for `x: [B, T, d]`, `e: [B, d]`.
    pub fn add_broadcast_time(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() != 3 || es.len() != 2 || es[0] != xs[0] || es[1] != xs[2] {
            return Err(shape_err("add_broadcast_time", &xs, &es));
        }
        let (bn, t, d) = (xs[0], xs[1], xs[2]);
        let mut v = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for b in 0..bn {
            for ti in 0..t {
                let row = &mut v.data_mut()[(b * t + ti) * d..(b * t + ti + 1) * d];
                for (r, &ee) in row.iter_mut().zip(&ev[b * d..(b + 1) * d]) {
                    *r += ee;
                }
            }
        }
        Ok(self.push(
            v,
            &[x, e],
            Box::new(move |g, _, _, needs| {
                let de = needs[1].then(|| {
                    let mut de = Tensor::zeros(&[bn, d]);
                    for b in 0..bn {
                        for ti in 0..t {
                            let row = &g.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
                            for (acc, &gv) in de.data_mut()[b * d..(b + 1) * d].iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                    }
                    de
                });
                vec![needs[0].then(|| g.clone()), de]
            }),
        ))
    }

    /// `a: [m, k]` times `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            false,
            false,
            m,
            n,
            k,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let da = needs[0].then(|| {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(false, true, m, k, n, g.data(), p[1].data(), T::zero(), da.data_mut());
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(true, false, k, n, m, p[0].data(), g.data(), T::zero(), db.data_mut());
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Affine map over the last axis: `x: [..., in]`, `w: [in, out]`,
    /// `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        gemm(
            false,
            false,
            m,
            n,
            k,
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            out.data_mut(),
        );
        let y = self.push(
            out,
            &[x, w],
            Box::new(move |g, p, _, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(p[0].shape());
                    gemm(false, true, m, k, n, g.data(), p[1].data(), T::zero(), dx.data_mut());
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[k, n]);
                    gemm(true, false, k, n, m, p[0].data(), g.data(), T::zero(), dw.data_mut());
                    dw
                });
                vec![dx, dw]
            }),
        );
        match b {
            Some(b) => {
                let axis = out_shape.len() - 1;
                self.add_bias(y, b, axis)
            }
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            v,
            &[x],
            // subgradient 0 at 0
            Box::new(|g, p, _, _| {
                vec![Some(zip_with(
                    g,
                    p[0],
                    |g, x| if x > T::zero() { g } else { T::zero() },
                ))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(
            v,
            &[x],
            Box::new(|g, _, y, _| vec![Some(zip_with(g, y, |g, y| g * y * (T::one() - y)))]),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        self.push(
            v,
            &[x],
            Box::new(move |g, _, y, _| {
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (a, &b) in dr.iter_mut().zip(yr) {
                        *a = b * (*a - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &xs, self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let dt = T::from_usize(d).unwrap();
        let xv = self.value(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(&xs);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _, needs| {
                let gamma = p[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(p[0].shape());
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            dx.data_mut()[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    dx
                });
                let dgamma = needs[1].then(|| {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    Tensor::new(&[d], dg).unwrap()
                });
                let dbeta = needs[2].then(|| {
                    let mut db = vec![T::zero(); d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    Tensor::new(&[d], db).unwrap()
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Inverted dropout in training mode, identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = Tensor::new(
            self.shape(x),
            self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )
        .expect("same shape");
        Ok(self.push(
            v,
            &[x],
            Box::new(move |g, _, _, _| {
                let d = g.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                vec![Some(Tensor::new(g.shape(), d).unwrap())]
            }),
        ))
    }

    /// Rows of `table: [V, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", &ts, &[ids.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        let n = ids.len();
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            &[table],
            Box::new(move |g, _, _, _| {
                let mut dt = Tensor::zeros(&[v, d]);
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[i * d + j] += g.data()[r * d + j];
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &n) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&self.value(x).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x).to_vec()).collect();
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            xs,
            Box::new(move |g, _, _, needs| {
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &n) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&g.data()[off..off + n * inner]);
                        off += n * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::new(s, d).unwrap()))
                    .collect()
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshaped(&old).unwrap())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", &s, perm));
        }
        let v = permute_tensor(self.value(x), perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.push(v, &[x], Box::new(move |g, _, _, _| vec![Some(permute_tensor(g, &inv))])))
    }

    /// Masked softmax cross-entropy. `logits: [..., C]` with one target and
    /// mask entry per row. The sum over masked rows is divided by
    /// `normalizer`, or by the masked row count when `None`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        normalizer: Option<f64>,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let c = *ls.last().unwrap();
        let rows = self.value(logits).len() / c;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err("cross_entropy", &ls, &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= c)
        {
            return Err(Error::invalid(format!("target class {bad} outside {c} classes")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let norm = normalizer.unwrap_or(count.max(1) as f64);
        let norm_t = T::from_f64_lossy(norm);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * c];
        let mut loss = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &lv[r * c..(r + 1) * c];
            let pr = &mut probs[r * c..(r + 1) * c];
            pr.copy_from_slice(row);
            let lse = log_sum_exp(row);
            softmax_row(pr);
            loss += lse - row[targets[r]];
        }
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(self.push(
            Tensor::scalar(loss / norm_t),
            &[logits],
            Box::new(move |g, p, _, _| {
                let scale = g.item() / norm_t;
                let mut d = Tensor::zeros(p[0].shape());
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == targets[r] { T::one() } else { T::zero() };
                        d.data_mut()[r * c + j] = (probs[r * c + j] - onehot) * scale;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Masked binary cross-entropy on logits. `targets` has one value in
    /// `[0, 1]` per logit; `mask` has one entry per row (last axis). The sum
    /// is divided by `normalizer`, or by `masked rows x K` when `None`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        mask: &[bool],
        normalizer: Option<f64>,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let k = *ls.last().unwrap();
        let n = self.value(logits).len();
        let rows = n / k;
        if targets.len() != n || mask.len() != rows {
            return Err(shape_err("bce_with_logits", &ls, &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count() * k;
        let norm = normalizer.unwrap_or(count.max(1) as f64);
        let norm_t = T::from_f64_lossy(norm);
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            for j in 0..k {
                let z = lv[r * k + j].as_f64();
                let y = targets[r * k + j];
                loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let targets: Vec<T> = targets.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let mask = mask.to_vec();
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss / norm)),
            &[logits],
            Box::new(move |g, p, _, _| {
                let scale = g.item() / norm_t;
                let mut d = Tensor::zeros(p[0].shape());
                for r in (0..rows).filter(|&r| mask[r]) {
                    for j in 0..k {
                        let i = r * k + j;
                        d.data_mut()[i] = (sigmoid(p[0].data()[i]) - targets[i]) * scale;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; r];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[off]);
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}
