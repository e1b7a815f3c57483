use std::collections::BTreeMap;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::tdnn::splice::{splice, splice_source_rows, SpliceSpec};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub const BASES: [Activation; 3] = [Activation::Sigmoid, Activation::Tanh, Activation::Relu];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative at `x`. The ReLU subgradient at exactly zero is zero.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
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

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Splice { x: Var, offsets: Vec<i32> },
    Activation(Var, Activation),
    GpMix { pre: Var, lambda: Var },
    ConcatCols(Var, Var),
    Reparam {
        mu: Var,
        log_sigma: Var,
        eps: DenseMatrix,
    },
    GaussianKl {
        mu: Var,
        log_sigma: Var,
        prior_mu: Var,
        prior_log_sigma: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
    key: Option<String>,
}

/// Ordered record of primitive applications with their forward values.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, DenseMatrix>,
    visited: usize,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&DenseMatrix> {
        self.map.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<DenseMatrix> {
        self.map.remove(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, grad: DenseMatrix) {
        self.map.insert(key.into(), grad);
    }

    /// Adds `grad` into the entry for `key`, creating it when absent.
    pub fn accumulate(&mut self, key: &str, grad: &DenseMatrix) -> Result<()> {
        match self.map.get_mut(key) {
            Some(existing) => existing.add_assign(grad),
            None => {
                self.map.insert(key.to_string(), grad.clone());
                Ok(())
            }
        }
    }

    /// Entrywise sum of two gradient maps.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (k, g) in &other.map {
            self.accumulate(k, g)?;
        }
        self.visited += other.visited;
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.map.values_mut() {
            *g = g.scale(alpha);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseMatrix)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseMatrix)> {
        self.map.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn squared_norm(&self) -> f64 {
        self.map.values().map(DenseMatrix::sum_squares).sum()
    }

    /// Number of primitives processed by the backward sweep that produced this map.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseMatrix, op: Op, key: Option<String>) -> Var {
        self.nodes.push(Node { value, op, key });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is reported for it.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Named leaf whose gradient is reported by [`GradTape::backward`].
    pub fn param(&mut self, key: impl Into<String>, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, Some(key.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), None))
    }

    /// Adds a `1×n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (d, &b) in value.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *d += b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias), None))
    }

    /// `x · w + bias`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let prod = self.matmul(x, w)?;
        self.add_bias(prod, bias)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Activation(x, kind), None)
    }

    pub fn splice(&mut self, x: Var, spec: &SpliceSpec) -> Result<Var> {
        let value = splice(self.value(x), spec)?;
        Ok(self.push(
            value,
            Op::Splice {
                x,
                offsets: spec.offsets().to_vec(),
            },
            None,
        ))
    }

    /// `out[t,i] = Σ_m lambda[m,i] · φ_m(pre[t,i])` over sigmoid, tanh, relu bases.
    pub fn gp_mix(&mut self, pre: Var, lambda: Var) -> Result<Var> {
        let p = self.value(pre);
        let l = self.value(lambda);
        if l.rows() != 3 || l.cols() != p.cols() {
            return Err(Error::shape("gp_mix", p.shape(), l.shape()));
        }
        let value = gp_mix_value(p, l);
        Ok(self.push(value, Op::GpMix { pre, lambda }, None))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b), None))
    }

    /// `mu + exp(log_sigma) ⊙ eps` with `eps` held constant.
    pub fn reparam(&mut self, mu: Var, log_sigma: Var, eps: DenseMatrix) -> Result<Var> {
        let m = self.value(mu);
        let s = self.value(log_sigma);
        if m.shape() != s.shape() || m.shape() != eps.shape() {
            return Err(Error::shape("reparam", m.shape(), eps.shape()));
        }
        let mut value = m.clone();
        for ((v, &ls), &e) in value
            .as_mut_slice()
            .iter_mut()
            .zip(s.as_slice())
            .zip(eps.as_slice())
        {
            *v += ls.exp() * e;
        }
        Ok(self.push(value, Op::Reparam { mu, log_sigma, eps }, None))
    }

    /// Closed-form `Σ KL(N(mu, e^{2 log_sigma}) ‖ N(prior_mu, e^{2 prior_log_sigma}))` as a `1×1` value.
    pub fn gaussian_kl(
        &mut self,
        mu: Var,
        log_sigma: Var,
        prior_mu: Var,
        prior_log_sigma: Var,
    ) -> Result<Var> {
        let shape = self.value(mu).shape();
        for v in [log_sigma, prior_mu, prior_log_sigma] {
            if self.value(v).shape() != shape {
                return Err(Error::shape("gaussian_kl", shape, self.value(v).shape()));
            }
        }
        let total = gaussian_kl_terms(
            self.value(mu),
            self.value(log_sigma),
            self.value(prior_mu),
            self.value(prior_log_sigma),
        )
        .sum();
        Ok(self.push(
            DenseMatrix::filled(1, 1, total),
            Op::GaussianKl {
                mu,
                log_sigma,
                prior_mu,
                prior_log_sigma,
            },
            None,
        ))
    }

    /// Reverse sweep seeded with `loss_grad` at `output`.
    pub fn backward(&self, output: Var, loss_grad: DenseMatrix) -> Result<Gradients> {
        self.backward_multi(vec![(output, loss_grad)])
    }

    /// Reverse sweep seeded at several outputs; seeds on the same node add.
    pub fn backward_multi(&self, seeds: Vec<(Var, DenseMatrix)>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::shape("backward seed", self.value(v).shape(), g.shape()));
            }
            add_into(&mut adj[v.0], g)?;
        }

        let mut visited = 0;
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    add_into(&mut adj[a.0], ga)?;
                    add_into(&mut adj[b.0], gb)?;
                }
                Op::AddBias(x, bias) => {
                    let gb = g.column_sums();
                    add_into(&mut adj[bias.0], gb)?;
                    add_into(&mut adj[x.0], g)?;
                }
                Op::Splice { x, offsets } => {
                    let src = self.value(*x);
                    let (t_len, width) = src.shape();
                    let mut gx = DenseMatrix::zeros(t_len, width);
                    for t in 0..t_len {
                        let rows = splice_source_rows(t, t_len, offsets);
                        let grow = g.row(t);
                        for (k, &s) in rows.iter().enumerate() {
                            let dst = gx.row_mut(s);
                            for (d, &v) in dst.iter_mut().zip(&grow[k * width..(k + 1) * width]) {
                                *d += v;
                            }
                        }
                    }
                    add_into(&mut adj[x.0], gx)?;
                }
                Op::Activation(x, kind) => {
                    let input = self.value(*x);
                    let gx = g.zip_with(input, "activation backward", |gv, xv| {
                        gv * kind.derivative(xv)
                    })?;
                    add_into(&mut adj[x.0], gx)?;
                }
                Op::GpMix { pre, lambda } => {
                    let p = self.value(*pre);
                    let l = self.value(*lambda);
                    let (t_len, n) = p.shape();
                    let mut gp = DenseMatrix::zeros(t_len, n);
                    let mut gl = DenseMatrix::zeros(3, n);
                    for t in 0..t_len {
                        for j in 0..n {
                            let x = p.get(t, j);
                            let gv = g.get(t, j);
                            let mut d = 0.0;
                            for (m, basis) in Activation::BASES.iter().enumerate() {
                                d += l.get(m, j) * basis.derivative(x);
                                let acc = gl.get(m, j) + gv * basis.apply(x);
                                gl.set(m, j, acc);
                            }
                            gp.set(t, j, gv * d);
                        }
                    }
                    add_into(&mut adj[pre.0], gp)?;
                    add_into(&mut adj[lambda.0], gl)?;
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.value(*a).cols();
                    let wb = self.value(*b).cols();
                    add_into(&mut adj[a.0], g.column_block(0, wa))?;
                    add_into(&mut adj[b.0], g.column_block(wa, wb))?;
                }
                Op::Reparam { mu, log_sigma, eps } => {
                    let ls = self.value(*log_sigma);
                    let mut gls = g.clone();
                    for ((d, &l), &e) in gls
                        .as_mut_slice()
                        .iter_mut()
                        .zip(ls.as_slice())
                        .zip(eps.as_slice())
                    {
                        *d *= l.exp() * e;
                    }
                    add_into(&mut adj[log_sigma.0], gls)?;
                    add_into(&mut adj[mu.0], g)?;
                }
                Op::GaussianKl {
                    mu,
                    log_sigma,
                    prior_mu,
                    prior_log_sigma,
                } => {
                    let up = g.get(0, 0);
                    let m = self.value(*mu);
                    let ls = self.value(*log_sigma);
                    let mr = self.value(*prior_mu);
                    let lsr = self.value(*prior_log_sigma);
                    let shape = m.shape();
                    let mut g_mu = DenseMatrix::zeros(shape.0, shape.1);
                    let mut g_ls = g_mu.clone();
                    let mut g_mr = g_mu.clone();
                    let mut g_lsr = g_mu.clone();
                    for idx in 0..m.len() {
                        let var = (2.0 * ls.as_slice()[idx]).exp();
                        let var_r = (2.0 * lsr.as_slice()[idx]).exp();
                        let diff = m.as_slice()[idx] - mr.as_slice()[idx];
                        g_mu.as_mut_slice()[idx] = up * diff / var_r;
                        g_mr.as_mut_slice()[idx] = -up * diff / var_r;
                        g_ls.as_mut_slice()[idx] = up * (var / var_r - 1.0);
                        g_lsr.as_mut_slice()[idx] = up * (1.0 - (var + diff * diff) / var_r);
                    }
                    add_into(&mut adj[mu.0], g_mu)?;
                    add_into(&mut adj[log_sigma.0], g_ls)?;
                    add_into(&mut adj[prior_mu.0], g_mr)?;
                    add_into(&mut adj[prior_log_sigma.0], g_lsr)?;
                }
            }
        }

        let mut grads = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(key) = &node.key {
                let g = adj[i]
                    .take()
                    .unwrap_or_else(|| DenseMatrix::zeros(node.value.rows(), node.value.cols()));
                grads.accumulate(key, &g)?;
            }
        }
        grads.visited = visited;
        Ok(grads)
    }
}

fn add_into(slot: &mut Option<DenseMatrix>, g: DenseMatrix) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn gp_mix_value(pre: &DenseMatrix, lambda: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(pre.rows(), pre.cols(), |t, j| {
        let x = pre.get(t, j);
        lambda.get(0, j) * Activation::Sigmoid.apply(x)
            + lambda.get(1, j) * Activation::Tanh.apply(x)
            + lambda.get(2, j) * Activation::Relu.apply(x)
    })
}

/// Per-entry Gaussian KL terms for log-sigma parameterized diagonal Gaussians.
pub(crate) fn gaussian_kl_terms(
    mu: &DenseMatrix,
    log_sigma: &DenseMatrix,
    prior_mu: &DenseMatrix,
    prior_log_sigma: &DenseMatrix,
) -> DenseMatrix {
    DenseMatrix::from_fn(mu.rows(), mu.cols(), |r, c| {
        let ls = log_sigma.get(r, c);
        let lsr = prior_log_sigma.get(r, c);
        let diff = mu.get(r, c) - prior_mu.get(r, c);
        lsr - ls + ((2.0 * ls).exp() + diff * diff) / (2.0 * (2.0 * lsr).exp()) - 0.5
    })
}

/// Stand-alone affine map `x · w + bias` with the shape checks used on the tape.
pub fn affine_forward(x: &DenseMatrix, w: &DenseMatrix, bias: &[f64]) -> Result<DenseMatrix> {
    if bias.len() != w.cols() {
        return Err(Error::shape("affine_forward bias", w.shape(), (1, bias.len())));
    }
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(DenseMatrix::row_vector(bias));
    let out = tape.affine(xv, wv, bv)?;
    Ok(tape.value(out).clone())
}

pub fn activation_forward(x: &DenseMatrix, kind: Activation) -> DenseMatrix {
    x.map(|v| kind.apply(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(x: &DenseMatrix, w: &DenseMatrix, bias: &[f64]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(x.rows(), w.cols());
        for t in 0..x.rows() {
            for j in 0..w.cols() {
                let mut acc = bias[j];
                for i in 0..x.cols() {
                    acc += x.get(t, i) * w.get(i, j);
                }
                out.set(t, j, acc);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_identity_and_zero_inputs() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = affine_forward(&DenseMatrix::identity(2), &w, &[0.0, 0.0]).unwrap();
        assert_eq!(out, w);
        let out = affine_forward(&DenseMatrix::zeros(3, 2), &w, &[0.5, -1.5]).unwrap();
        for t in 0..3 {
            assert_eq!(out.row(t), &[0.5, -1.5]);
        }
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 4, 2);
        let bias = [0.25, -0.75];
        let got = affine_forward(&x, &w, &bias).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&x, &w, &bias)) < 1e-12);
    }

    #[test]
    fn affine_dimension_mismatch_names_shapes() {
        let err = affine_forward(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 2), &[0.0; 2])
            .unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.2), 0.0);
        assert_eq!(Activation::Relu.apply(3.2), 3.2);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        let h = 1e-6;
        let fd = (Activation::Tanh.apply(0.7 + h) - Activation::Tanh.apply(0.7 - h)) / (2.0 * h);
        let an = Activation::Tanh.derivative(0.7);
        assert!((fd - an).abs() / an.abs() < 1e-6);
    }

    #[test]
    fn empty_tape_backward_errors() {
        let tape = GradTape::new();
        assert!(matches!(
            tape.backward_multi(Vec::new()),
            Err(Error::EmptyTape)
        ));
    }

    #[test]
    fn identity_layer_weight_grad_is_column_sums_of_input() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.constant(x.clone());
        let w = tape.param("w", DenseMatrix::identity(2));
        let b = tape.param("b", DenseMatrix::zeros(1, 2));
        let out = tape.affine(xv, w, b).unwrap();
        let grads = tape.backward(out, DenseMatrix::filled(3, 2, 1.0)).unwrap();
        let gw = grads.get("w").unwrap();
        let sums = x.column_sums();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(gw.get(i, j), sums.get(0, i));
            }
        }
        assert_eq!(grads.get("b").unwrap().as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn constant_output_and_unused_params_have_zero_grads() {
        let mut tape = GradTape::new();
        let x = tape.constant(DenseMatrix::filled(2, 2, 1.0));
        let w = tape.param("w", DenseMatrix::zeros(2, 2));
        let _unused = tape.param("unused", DenseMatrix::filled(1, 3, 7.0));
        let prod = tape.matmul(x, w).unwrap();
        let out = tape.activation(prod, Activation::Relu);
        let grads = tape.backward(out, DenseMatrix::filled(2, 2, 1.0)).unwrap();
        assert!(grads.get("w").unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.get("unused").unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    /// Composite of every primitive, reduced to a scalar by a fixed weighting.
    fn composite(params: &BTreeMap<&str, DenseMatrix>, eps: &DenseMatrix) -> (GradTape, Var, Var) {
        let mut tape = GradTape::new();
        let x = tape.constant(DenseMatrix::from_fn(4, 2, |r, c| {
            ((r * 3 + c) as f64 * 0.37).sin()
        }));
        let spec = SpliceSpec::new(vec![-1, 0, 2]).unwrap();
        let s = tape.splice(x, &spec).unwrap();
        let w1 = tape.param("w1", params["w1"].clone());
        let b1 = tape.param("b1", params["b1"].clone());
        let pre = tape.affine(s, w1, b1).unwrap();
        let lam = tape.param("lambda", params["lambda"].clone());
        let h = tape.gp_mix(pre, lam).unwrap();
        let mu_w = tape.param("mu_w", params["mu_w"].clone());
        let mu_b = tape.param("mu_b", params["mu_b"].clone());
        let ls_w = tape.param("ls_w", params["ls_w"].clone());
        let ls_b = tape.param("ls_b", params["ls_b"].clone());
        let mu = tape.affine(h, mu_w, mu_b).unwrap();
        let ls = tape.affine(h, ls_w, ls_b).unwrap();
        let pr = tape.param("prior_shift", params["prior_shift"].clone());
        let pmu = tape.add_bias(ls, pr).unwrap();
        let kl = tape.gaussian_kl(mu, ls, pmu, mu).unwrap();
        let z = tape.reparam(mu, ls, eps.clone()).unwrap();
        let cat = tape.concat_cols(z, h).unwrap();
        let th = tape.activation(cat, Activation::Tanh);
        let w2 = tape.param("w2", params["w2"].clone());
        let b2 = tape.param("b2", params["b2"].clone());
        let pre2 = tape.affine(th, w2, b2).unwrap();
        let out = tape.activation(pre2, Activation::Sigmoid);
        (tape, out, kl)
    }

    fn weighting(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |r, c| 0.3 + 0.1 * r as f64 - 0.2 * c as f64)
    }

    fn scalar(params: &BTreeMap<&str, DenseMatrix>, eps: &DenseMatrix) -> f64 {
        let (tape, out, kl) = composite(params, eps);
        let o = tape.value(out);
        let w = weighting(o.rows(), o.cols());
        o.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            - 0.7 * tape.value(kl).get(0, 0)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params: BTreeMap<&str, DenseMatrix> = BTreeMap::new();
        params.insert("w1", random(&mut rng, 6, 3));
        params.insert("b1", random(&mut rng, 1, 3));
        params.insert("lambda", random(&mut rng, 3, 3));
        params.insert("mu_w", random(&mut rng, 3, 2));
        params.insert("mu_b", random(&mut rng, 1, 2));
        params.insert("ls_w", random(&mut rng, 3, 2).scale(0.3));
        params.insert("ls_b", random(&mut rng, 1, 2).scale(0.3));
        params.insert("prior_shift", random(&mut rng, 1, 2));
        params.insert("w2", random(&mut rng, 5, 2));
        params.insert("b2", random(&mut rng, 1, 2));
        let eps = random(&mut rng, 4, 2);

        let (tape, out, kl) = composite(&params, &eps);
        let o = tape.value(out);
        let seeds = vec![
            (out, weighting(o.rows(), o.cols())),
            (kl, DenseMatrix::filled(1, 1, -0.7)),
        ];
        let grads = tape.backward_multi(seeds).unwrap();
        assert_eq!(grads.visited(), tape.len());

        let h = 1e-6;
        let names: Vec<&str> = params.keys().copied().collect();
        for name in names {
            let n = params[name].len();
            for idx in 0..n {
                let orig = params[name].as_slice()[idx];
                params.get_mut(name).unwrap().as_mut_slice()[idx] = orig + h;
                let up = scalar(&params, &eps);
                params.get_mut(name).unwrap().as_mut_slice()[idx] = orig - h;
                let down = scalar(&params, &eps);
                params.get_mut(name).unwrap().as_mut_slice()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(name).unwrap().as_slice()[idx];
                assert!(
                    (an - fd).abs() / an.abs().max(1.0) < 1e-4,
                    "{name}[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 7, 5);
        let w = random(&mut rng, 5, 4);
        let a = affine_forward(&x, &w, &[0.1; 4]).unwrap();
        let b = affine_forward(&x, &w, &[0.1; 4]).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
