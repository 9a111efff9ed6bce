//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Tape`] borrows the [`ParamStore`] so parameter leaves are never
//! copied. Ops recorded while gradients are disabled (see [`Tape::no_grad`])
//! become constants and are skipped by the backward sweep.

use rand::Rng;

use crate::cif;
use crate::error::Result;
use crate::params::{Grads, ParamId, ParamStore};
use crate::seq::TokenId;
use crate::tensor::{
    log_softmax_rows, logistic, matmul, matmul_acc, matmul_nt, matmul_tn_acc,
    softmax_in_place, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Matrix),
    Param(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Param(m) => m,
        }
    }
}

enum Op {
    Const,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Unfold3(Var),
    Embedding {
        table: Var,
        ids: Vec<TokenId>,
        scale: f64,
    },
    MixRows {
        a: Var,
        b: Var,
        take_b: Vec<bool>,
    },
    SumAll(Var),
    AbsDiff {
        x: Var,
        target: f64,
    },
    ScaleToSum {
        x: Var,
        target: f64,
        sum: f64,
    },
    Cif {
        h: Var,
        alpha: Var,
        beta: f64,
        weights: Matrix,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<TokenId>>,
        probs: Matrix,
    },
    Mwer {
        logits: Var,
        paths: Vec<Vec<TokenId>>,
        probs: Matrix,
        coeffs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Runs `f` with gradient recording disabled.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.grad_enabled;
        self.grad_enabled = false;
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not a parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(self.params.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` with `W: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = matmul(self.value(x), self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols()), "bias shape");
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bb;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(logistic);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Inverted dropout. A no-op when `p == 0` or gradients are disabled.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 || !self.grad_enabled {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).data().len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    /// With `causal`, query `i` sees keys `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (out, probs) =
            attention_forward(self.value(q), self.value(k), self.value(v), heads, causal);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Row `t` of the output is `[x_{t-1}, x_t, x_{t+1}]` with zero rows
    /// outside the sequence. A kernel-3 same-padded convolution is this
    /// followed by a linear map.
    pub fn unfold3(&mut self, x: Var) -> Var {
        let out = unfold3(self.value(x));
        self.push(out, Op::Unfold3(x), &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[TokenId], scale: f64) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            for (o, t) in out.row_mut(r).iter_mut().zip(tv.row(id)) {
                *o = t * scale;
            }
        }
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                scale,
            },
            &[table],
        )
    }

    /// Row `n` comes from `b` where `take_b[n]`, otherwise from `a`.
    pub fn mix_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mix_rows shape");
        assert_eq!(av.rows(), take_b.len(), "mix_rows selection length");
        let mut out = av.clone();
        for (r, &tb) in take_b.iter().enumerate() {
            if tb {
                out.row_mut(r).copy_from_slice(bv.row(r));
            }
        }
        self.push(
            out,
            Op::MixRows {
                a,
                b,
                take_b: take_b.to_vec(),
            },
            &[a, b],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::SumAll(a), &[a])
    }

    /// `|target - x|` for a scalar `x`.
    pub fn abs_diff(&mut self, x: Var, target: f64) -> Var {
        let v = (target - self.value(x).item()).abs();
        self.push(Matrix::scalar(v), Op::AbsDiff { x, target }, &[x])
    }

    /// `x * target / sum(x)`.
    pub fn scale_to_sum(&mut self, x: Var, target: f64) -> Var {
        let sum = self.value(x).sum();
        let out = self.value(x).map(|v| v * target / sum);
        self.push(out, Op::ScaleToSum { x, target, sum }, &[x])
    }

    /// Integrate-and-fire of `h` (`T x d`) under column weights `alpha`
    /// (`T x 1`). Returns the embeddings and the firing plan.
    pub fn cif(&mut self, h: Var, alpha: Var, beta: f64) -> Result<(Var, cif::FiringPlan)> {
        let plan = cif::firing_plan(self.value(alpha).data(), beta)?;
        let weights = plan.weight_matrix(self.value(h).rows());
        let out = matmul(&weights, self.value(h));
        let v = self.push(
            out,
            Op::Cif {
                h,
                alpha,
                beta,
                weights,
            },
            &[h, alpha],
        );
        Ok((v, plan))
    }

    /// Summed negative log-likelihood of `targets` (rows with `None` are
    /// skipped). Returns a scalar.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<TokenId>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross-entropy target length");
        let logp = log_softmax_rows(lv);
        let mut nll = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                nll -= logp.get(r, t);
            }
        }
        let probs = logp.map(f64::exp);
        self.push(
            Matrix::scalar(nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Expected centred error over candidate paths, the path distribution
    /// being the softmax of the paths' summed token log-probabilities.
    /// Errors are constants; the gradient flows through the probabilities.
    pub fn mwer(&mut self, logits: Var, paths: &[Vec<TokenId>], errors: &[f64]) -> Var {
        assert_eq!(paths.len(), errors.len());
        let logp = log_softmax_rows(self.value(logits));
        let (loss, coeffs) = mwer_forward(&logp, paths, errors);
        self.push(
            Matrix::scalar(loss),
            Op::Mwer {
                logits,
                paths: paths.to_vec(),
                probs: logp.map(f64::exp),
                coeffs,
            },
            &[logits],
        )
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = self.params.zero_grads();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = &grads[idx] {
                        param_grads.accumulate(*id, g);
                    }
                    continue;
                }
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_op(&node.op, &g, &mut grads);
        }
        Gradients {
            nodes: grads,
            params: param_grads,
        }
    }

    fn backward_op(&self, op: &Op, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Const | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, matmul_nt(g, self.value(*b)));
                }
                if needs(*b) {
                    let bv = self.value(*b);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    matmul_tn_acc(self.value(*a), g, &mut db);
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                if needs(*x) {
                    acc(*x, matmul_nt(g, self.value(*w)));
                }
                if needs(*w) {
                    let wv = self.value(*w);
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    matmul_tn_acc(self.value(*x), g, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(d, &x)| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                let y = self.value(*a).map(logistic);
                d.data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(d, &y)| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                d.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                if needs(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, gv), xh) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r))
                        {
                            *o += gv * xh;
                        }
                    }
                    acc(*gain, dg);
                }
                if needs(*bias) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (o, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    acc(*bias, db);
                }
                if needs(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gain_v[c];
                            mean_d += d;
                            mean_dx += d * xr[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gain_v[c];
                            out[c] = rstd[r] * (d - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    probs,
                    g,
                );
                if needs(*q) {
                    acc(*q, dq);
                }
                if needs(*k) {
                    acc(*k, dk);
                }
                if needs(*v) {
                    acc(*v, dv);
                }
            }
            Op::Unfold3(x) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for t in 0..rows {
                    let out = dx.row_mut(t);
                    if t + 1 < rows {
                        add_into(out, &g.row(t + 1)[..cols]);
                    }
                    add_into(out, &g.row(t)[cols..2 * cols]);
                    if t > 0 {
                        add_into(out, &g.row(t - 1)[2 * cols..]);
                    }
                }
                acc(*x, dx);
            }
            Op::Embedding { table, ids, scale } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gv * scale;
                    }
                }
                acc(*table, dt);
            }
            Op::MixRows { a, b, take_b } => {
                let mut da = g.clone();
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for (r, &tb) in take_b.iter().enumerate() {
                    if tb {
                        db.row_mut(r).copy_from_slice(g.row(r));
                        da.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                if needs(*a) {
                    acc(*a, da);
                }
                if needs(*b) {
                    acc(*b, db);
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::AbsDiff { x, target } => {
                let diff = self.value(*x).item() - target;
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                acc(*x, Matrix::scalar(s * g.item()));
            }
            Op::ScaleToSum { x, target, sum } => {
                let xv = self.value(*x);
                let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                let k = target / sum;
                let d = Matrix::from_vec(
                    xv.rows(),
                    xv.cols(),
                    g.data().iter().map(|gv| k * (gv - dot / sum)).collect(),
                );
                acc(*x, d);
            }
            Op::Cif {
                h,
                alpha,
                beta,
                weights,
            } => {
                if needs(*h) {
                    let hv = self.value(*h);
                    let mut dh = Matrix::zeros(hv.rows(), hv.cols());
                    matmul_tn_acc(weights, g, &mut dh);
                    acc(*h, dh);
                }
                if needs(*alpha) {
                    let dw = matmul_nt(g, self.value(*h));
                    let av = self.value(*alpha);
                    let da =
                        cif::weight_matrix_backward(av.data(), *beta, weights.rows(), &dw);
                    acc(*alpha, Matrix::from_vec(av.rows(), av.cols(), da));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = g.item();
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = s * p;
                        }
                        let cur = d.get(r, t);
                        d.set(r, t, cur - s);
                    }
                }
                acc(*logits, d);
            }
            Op::Mwer {
                logits,
                paths,
                probs,
                coeffs,
            } => {
                let s = g.item();
                let total: f64 = coeffs.iter().sum();
                let mut d = probs.map(|p| -s * total * p);
                for (path, &c) in paths.iter().zip(coeffs) {
                    for (r, &tok) in path.iter().enumerate() {
                        let cur = d.get(r, tok);
                        d.set(r, tok, cur + s * c);
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Grads,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`] or a
    /// parameter var; `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }
}

pub(crate) fn unfold3(x: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, 3 * cols);
    for t in 0..rows {
        let o = out.row_mut(t);
        if t > 0 {
            o[..cols].copy_from_slice(x.row(t - 1));
        }
        o[cols..2 * cols].copy_from_slice(x.row(t));
        if t + 1 < rows {
            o[2 * cols..].copy_from_slice(x.row(t + 1));
        }
    }
    out
}

fn head_slice(m: &Matrix, h: usize, dk: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dk);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dk..(h + 1) * dk]);
    }
    out
}

fn write_head(dst: &mut Matrix, src: &Matrix, h: usize, dk: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(src.row(r));
    }
}

pub(crate) fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    causal: bool,
) -> (Matrix, Vec<Matrix>) {
    let d = q.cols();
    assert_eq!(d % heads, 0, "model width not divisible by heads");
    assert_eq!(k.rows(), v.rows(), "keys and values differ in length");
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, dk);
        let kh = head_slice(k, h, dk);
        let vh = head_slice(v, h, dk);
        let mut s = matmul_nt(&qh, &kh);
        for i in 0..s.rows() {
            let row = s.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x = if causal && j > i { f64::NEG_INFINITY } else { *x * scale };
            }
            softmax_in_place(row);
        }
        let oh = matmul(&s, &vh);
        write_head(&mut out, &oh, h, dk);
        probs.push(s);
    }
    (out, probs)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    probs: &[Matrix],
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dkm = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    for (h, p) in probs.iter().enumerate() {
        let qh = head_slice(q, h, dk);
        let kh = head_slice(k, h, dk);
        let vh = head_slice(v, h, dk);
        let goh = head_slice(g, h, dk);
        let mut dvh = Matrix::zeros(vh.rows(), dk);
        matmul_tn_acc(p, &goh, &mut dvh);
        let dp = matmul_nt(&goh, &vh);
        let mut ds = Matrix::zeros(p.rows(), p.cols());
        for i in 0..p.rows() {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for (o, (pv, dpv)) in ds.row_mut(i).iter_mut().zip(pr.iter().zip(dpr)) {
                *o = pv * (dpv - dot) * scale;
            }
        }
        let mut dqh = Matrix::zeros(qh.rows(), dk);
        matmul_acc(&ds, &kh, &mut dqh);
        let mut dkh = Matrix::zeros(kh.rows(), dk);
        matmul_tn_acc(&ds, &qh, &mut dkh);
        write_head(&mut dq, &dqh, h, dk);
        write_head(&mut dkm, &dkh, h, dk);
        write_head(&mut dv, &dvh, h, dk);
    }
    (dq, dkm, dv)
}

/// Returns the loss and per-path coefficients `p_i (W_i - mean W - loss)`.
fn mwer_forward(logp: &Matrix, paths: &[Vec<TokenId>], errors: &[f64]) -> (f64, Vec<f64>) {
    if paths.len() < 2 {
        return (0.0, vec![0.0; paths.len()]);
    }
    let mut p: Vec<f64> = paths
        .iter()
        .map(|path| path.iter().enumerate().map(|(r, &t)| logp.get(r, t)).sum())
        .collect();
    softmax_in_place(&mut p);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let loss: f64 = p.iter().zip(errors).map(|(pi, w)| pi * (w - mean)).sum();
    let coeffs = p
        .iter()
        .zip(errors)
        .map(|(pi, w)| pi * (w - mean - loss))
        .collect();
    (loss, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central differences of a scalar function of one input matrix.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(x: &Matrix, build: impl Fn(&mut Tape<'_>, Var) -> Var) {
        let store = ParamStore::new();
        let f = |m: &Matrix| {
            let mut t = Tape::new(&store);
            let v = t.leaf(m.clone());
            let out = build(&mut t, v);
            t.value(out).item()
        };
        let mut t = Tape::new(&store);
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        let g = t.backward(out);
        let analytic = g.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(x, f);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < 1e-5 || (a - n).abs() < 1e-8,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    /// Fixed random projection to a scalar so every output entry matters.
    fn probe(t: &mut Tape<'_>, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = t.value(y).shape();
        let w = t.constant(random(c, 1, &mut rng));
        let p = t.matmul(y, w);
        let coef = t.constant(random(1, r, &mut rng));
        t.matmul(coef, p)
    }

    #[test]
    fn grad_linear_relu_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(4, 3, &mut rng);
        let w = random(3, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        check(&x, |t, v| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.linear(v, wv, Some(bv));
            let y = t.relu(y);
            let y = t.sigmoid(y);
            probe(t, y, 2)
        });
        check(&w, |t, v| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let y = t.linear(xv, v, Some(bv));
            probe(t, y, 3)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(3, 6, &mut rng);
        let g = random(1, 6, &mut rng);
        let b = random(1, 6, &mut rng);
        check(&x, |t, v| {
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            let y = t.layer_norm(v, gv, bv);
            probe(t, y, 5)
        });
        check(&g, |t, v| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let y = t.layer_norm(xv, v, bv);
            probe(t, y, 6)
        });
    }

    #[test]
    fn grad_attention_plain_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random(3, 8, &mut rng);
        let k = random(5, 8, &mut rng);
        let v = random(5, 8, &mut rng);
        for causal in [false, true] {
            let (kk, vv) = if causal {
                (k.head_rows(3), v.head_rows(3))
            } else {
                (k.clone(), v.clone())
            };
            check(&q, |t, x| {
                let kv = t.constant(kk.clone());
                let vv2 = t.constant(vv.clone());
                let y = t.attention(x, kv, vv2, 2, causal);
                probe(t, y, 8)
            });
            check(&kk, |t, x| {
                let qv = t.constant(q.clone());
                let vv2 = t.constant(vv.clone());
                let y = t.attention(qv, x, vv2, 2, causal);
                probe(t, y, 9)
            });
            check(&vv, |t, x| {
                let qv = t.constant(q.clone());
                let kv = t.constant(kk.clone());
                let y = t.attention(qv, kv, x, 2, causal);
                probe(t, y, 10)
            });
        }
    }

    #[test]
    fn grad_unfold_mix_scale_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(4, 3, &mut rng);
        let other = random(4, 3, &mut rng);
        check(&x, |t, v| {
            let y = t.unfold3(v);
            probe(t, y, 12)
        });
        check(&x, |t, v| {
            let o = t.constant(other.clone());
            let y = t.mix_rows(v, o, &[true, false, true, false]);
            let y = t.scale(y, 1.7);
            probe(t, y, 13)
        });
        check(&x, |t, v| {
            let o = t.constant(other.clone());
            let y = t.mix_rows(o, v, &[true, false, false, true]);
            probe(t, y, 14)
        });
    }

    #[test]
    fn grad_scale_to_sum_and_abs_diff() {
        let x = Matrix::column(&[0.3, 0.8, 0.1, 0.45]);
        check(&x, |t, v| {
            let y = t.scale_to_sum(v, 3.0);
            probe(t, y, 15)
        });
        check(&x, |t, v| {
            let s = t.sum_all(v);
            t.abs_diff(s, 4.0)
        });
    }

    #[test]
    fn grad_cross_entropy_and_mwer() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let logits = random(3, 5, &mut rng);
        check(&logits, |t, v| t.cross_entropy_sum(v, &[Some(1), None, Some(4)]));
        let paths = vec![vec![0, 1, 2], vec![3, 1, 2], vec![0, 4, 4]];
        check(&logits, |t, v| t.mwer(v, &paths, &[0.0, 1.0, 2.0]));
    }

    #[test]
    fn grad_embedding_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let table = random(5, 4, &mut rng);
        check(&table, |t, v| {
            let y = t.embedding(v, &[3, 1, 3], 2.0);
            probe(t, y, 18)
        });
    }

    #[test]
    fn no_grad_ops_are_constants() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.leaf(Matrix::scalar(2.0));
        let y = t.no_grad(|t| t.scale(x, 3.0));
        assert!(!t.requires_grad(y));
        let z = t.scale(x, 5.0);
        let w = t.add(y, z);
        let g = t.backward(w);
        assert_eq!(g.wrt(x).unwrap().item(), 5.0);
    }
}
