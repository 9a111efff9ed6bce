//! Pre-norm transformer blocks expressed on the tape, plus a cached
//! single-row path for incremental autoregressive decoding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{attention_forward, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Matrix};

/// Dropout probability plus the stream it draws from. Absent at eval time.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub(crate) fn drop(t: &mut Tape<'_>, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
    match d {
        Some(d) if d.p > 0.0 => t.dropout(x, d.p, d.rng),
        _ => x,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.insert_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = store.insert(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.linear(x, w, Some(b))
    }

    pub fn apply_plain(&self, p: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = matmul(x, p.get(self.w));
        let b = p.get(self.b);
        for r in 0..y.rows() {
            y.row_mut(r)
                .iter_mut()
                .zip(b.data())
                .for_each(|(o, bb)| *o += bb);
        }
        y
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.insert(format!("{name}.g"), Matrix::filled(1, d, 1.0));
        let bias = store.insert(format!("{name}.b"), Matrix::zeros(1, d));
        Self { gain, bias }
    }

    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        t.layer_norm(x, g, b)
    }

    pub fn apply_plain(&self, p: &ParamStore, x: &Matrix) -> Matrix {
        let g = p.get(self.gain).data();
        let b = p.get(self.bias).data();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + 1e-5).sqrt();
            for ((v, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *v = (*v - mean) * rs * gg + bb;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

impl AttnIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: LinearIds::new(store, &format!("{name}.q"), d, d, rng),
            k: LinearIds::new(store, &format!("{name}.k"), d, d, rng),
            v: LinearIds::new(store, &format!("{name}.v"), d, d, rng),
            o: LinearIds::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    pub fn apply(
        &self,
        t: &mut Tape<'_>,
        query: Var,
        memory: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.q.apply(t, query);
        let k = self.k.apply(t, memory);
        let v = self.v.apply(t, memory);
        let a = t.attention(q, k, v, heads, causal);
        self.o.apply(t, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

impl FfnIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: LinearIds::new(store, &format!("{name}.up"), d, d_ffn, rng),
            down: LinearIds::new(store, &format!("{name}.down"), d_ffn, d, rng),
        }
    }

    pub fn apply(&self, t: &mut Tape<'_>, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
        let h = self.up.apply(t, x);
        let h = t.relu(h);
        let h = drop(t, h, d);
        self.down.apply(t, h)
    }

    pub fn apply_plain(&self, p: &ParamStore, x: &Matrix) -> Matrix {
        let h = self.up.apply_plain(p, x).map(|v| v.max(0.0));
        self.down.apply_plain(p, &h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIds {
    pub norm_attn: NormIds,
    pub attn: AttnIds,
    pub norm_ffn: NormIds,
    pub ffn: FfnIds,
}

impl EncoderLayerIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm_attn: NormIds::new(store, &format!("{name}.norm_attn"), d),
            attn: AttnIds::new(store, &format!("{name}.attn"), d, rng),
            norm_ffn: NormIds::new(store, &format!("{name}.norm_ffn"), d),
            ffn: FfnIds::new(store, &format!("{name}.ffn"), d, d_ffn, rng),
        }
    }

    pub fn apply(
        &self,
        t: &mut Tape<'_>,
        x: Var,
        heads: usize,
        d: &mut Option<Dropout<'_>>,
    ) -> Var {
        let n = self.norm_attn.apply(t, x);
        let a = self.attn.apply(t, n, n, heads, false);
        let a = drop(t, a, d);
        let x = t.add(x, a);
        let n = self.norm_ffn.apply(t, x);
        let f = self.ffn.apply(t, n, d);
        let f = drop(t, f, d);
        t.add(x, f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIds {
    pub norm_self: NormIds,
    pub self_attn: AttnIds,
    pub norm_cross: NormIds,
    pub cross_attn: AttnIds,
    pub norm_ffn: NormIds,
    pub ffn: FfnIds,
}

impl DecoderLayerIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm_self: NormIds::new(store, &format!("{name}.norm_self"), d),
            self_attn: AttnIds::new(store, &format!("{name}.self_attn"), d, rng),
            norm_cross: NormIds::new(store, &format!("{name}.norm_cross"), d),
            cross_attn: AttnIds::new(store, &format!("{name}.cross_attn"), d, rng),
            norm_ffn: NormIds::new(store, &format!("{name}.norm_ffn"), d),
            ffn: FfnIds::new(store, &format!("{name}.ffn"), d, d_ffn, rng),
        }
    }

    pub fn apply(
        &self,
        t: &mut Tape<'_>,
        x: Var,
        memory: Var,
        heads: usize,
        causal: bool,
        d: &mut Option<Dropout<'_>>,
    ) -> Var {
        let n = self.norm_self.apply(t, x);
        let a = self.self_attn.apply(t, n, n, heads, causal);
        let a = drop(t, a, d);
        let x = t.add(x, a);
        let n = self.norm_cross.apply(t, x);
        let c = self.cross_attn.apply(t, n, memory, heads, false);
        let c = drop(t, c, d);
        let x = t.add(x, c);
        let n = self.norm_ffn.apply(t, x);
        let f = self.ffn.apply(t, n, d);
        let f = drop(t, f, d);
        t.add(x, f)
    }
}

/// Per-layer key/value cache for incremental causal decoding.
#[derive(Debug, Clone)]
pub struct LayerCache {
    self_k: Matrix,
    self_v: Matrix,
    cross_k: Matrix,
    cross_v: Matrix,
}

fn append_row(m: &Matrix, row: &[f64]) -> Matrix {
    let mut data = Vec::with_capacity(m.data().len() + row.len());
    data.extend_from_slice(m.data());
    data.extend_from_slice(row);
    Matrix::from_vec(m.rows() + 1, row.len(), data)
}

impl DecoderLayerIds {
    pub fn init_cache(&self, p: &ParamStore, memory: &Matrix) -> LayerCache {
        let d = memory.cols();
        LayerCache {
            self_k: Matrix::zeros(0, d),
            self_v: Matrix::zeros(0, d),
            cross_k: self.cross_attn.k.apply_plain(p, memory),
            cross_v: self.cross_attn.v.apply_plain(p, memory),
        }
    }

    /// Advances one position: `x` is the `1 x d` input row for the newest
    /// position. Earlier rows are read from the cache.
    pub fn step(&self, p: &ParamStore, x: &Matrix, cache: &mut LayerCache, heads: usize) -> Matrix {
        let n = self.norm_self.apply_plain(p, x);
        let q = self.self_attn.q.apply_plain(p, &n);
        let k = self.self_attn.k.apply_plain(p, &n);
        let v = self.self_attn.v.apply_plain(p, &n);
        cache.self_k = append_row(&cache.self_k, k.row(0));
        cache.self_v = append_row(&cache.self_v, v.row(0));
        let (a, _) = attention_forward(&q, &cache.self_k, &cache.self_v, heads, false);
        let a = self.self_attn.o.apply_plain(p, &a);
        let mut x = x.clone();
        x.add_assign(&a);

        let n = self.norm_cross.apply_plain(p, &x);
        let q = self.cross_attn.q.apply_plain(p, &n);
        let (c, _) = attention_forward(&q, &cache.cross_k, &cache.cross_v, heads, false);
        let c = self.cross_attn.o.apply_plain(p, &c);
        x.add_assign(&c);

        let n = self.norm_ffn.apply_plain(p, &x);
        let f = self.ffn.apply_plain(p, &n);
        x.add_assign(&f);
        x
    }
}
