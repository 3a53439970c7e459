//! Forward and backward passes of the two-way attention network.
//!
//! The state of a table is a flat `[rows * cells, d_model]` buffer with the
//! context rows first. Feature attention mixes the cells of one row; row
//! attention mixes one column across rows, with every row reading only the
//! context rows.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{AttnParams, BlockParams, MiniPfnConfig, ModelParams, slot_lag};
use super::tensor::{gelu, gelu_grad, gemm, matmul, softmax_in_place, MatMut, MatRef, Scalar};
use crate::data::PAD;
use crate::encoding::{column_info, feature_width, EncodedTable, QueryTable, RowFeatures};
use crate::error::{Error, Result};
use crate::hash::mix64;

const LN_EPS: f64 = 1e-5;
const NO_VALUE: u32 = u32::MAX;

/// Context and query rows of one prediction problem, flattened to codes.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    pub horizon: usize,
    pub n_context: usize,
    pub n_query: usize,
    /// Row-major `(n_context + n_query) x width` feature codes.
    pub codes: Vec<u32>,
    /// Labels of the context rows.
    pub labels: Vec<u8>,
}

impl CellTable {
    pub fn new<'a, C, Q>(horizon: usize, context: C, labels: Vec<u8>, query: Q) -> Result<Self>
    where
        C: IntoIterator<Item = &'a RowFeatures>,
        Q: IntoIterator<Item = &'a RowFeatures>,
    {
        let width = feature_width(horizon);
        let mut codes = Vec::new();
        let mut push = |row: &RowFeatures| -> Result<()> {
            if row.horizon() != horizon {
                return Err(Error::InvalidArgument(format!(
                    "row of horizon {} in a table of horizon {horizon}",
                    row.horizon()
                )));
            }
            codes.extend(row.cells());
            Ok(())
        };
        let mut n_context = 0;
        for row in context {
            push(row)?;
            n_context += 1;
        }
        let mut n_query = 0;
        for row in query {
            push(row)?;
            n_query += 1;
        }
        if labels.len() != n_context {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {n_context} context rows",
                labels.len()
            )));
        }
        debug_assert_eq!(codes.len(), (n_context + n_query) * width);
        Ok(Self {
            horizon,
            n_context,
            n_query,
            codes,
            labels,
        })
    }

    pub fn from_tables(train: &EncodedTable, test: &QueryTable) -> Result<Self> {
        if train.horizon != test.horizon {
            return Err(Error::InvalidArgument(format!(
                "train horizon {} differs from test horizon {}",
                train.horizon, test.horizon
            )));
        }
        Self::new(
            train.horizon,
            train.rows.iter().map(|r| &r.features),
            train.labels(),
            test.rows.iter(),
        )
    }

    pub fn width(&self) -> usize {
        feature_width(self.horizon)
    }

    pub fn n_rows(&self) -> usize {
        self.n_context + self.n_query
    }
}

/// Fixed pseudo-random unit vector of one `(family, code)` pair.
pub fn hash_vector(seed: u64, family: u32, code: u32, dim: usize) -> Vec<f64> {
    let key = (u64::from(family) << 32) | u64::from(code);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(key)));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

/// Row-attention weights at the label column, one row per query row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub n_context: usize,
    /// Row-major `n_query x n_context`, averaged over heads and blocks.
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn n_query(&self) -> usize {
        if self.n_context == 0 {
            0
        } else {
            self.weights.len() / self.n_context
        }
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.weights[query * self.n_context..(query + 1) * self.n_context]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
    /// Skip every block; the head reads the embeddings directly.
    pub bypass_blocks: bool,
}

pub struct ForwardOutput<S> {
    /// Two logits per query row.
    pub logits: Vec<[S; 2]>,
    pub record: Option<AttentionRecord>,
}

impl<S: Scalar> ForwardOutput<S> {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|l| {
                let z = l[1].to_f64() - l[0].to_f64();
                crate::baselines::sigmoid(z)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    rows: usize,
    n_ctx: usize,
    cells: usize,
    width: usize,
    d: usize,
    heads: usize,
    dh: usize,
    dff: usize,
}

impl Dims {
    fn rc(&self) -> usize {
        self.rows * self.cells
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh as f64).sqrt()
    }
}

struct Embedding<S> {
    /// Index into `unique` per feature cell, [`NO_VALUE`] for PAD.
    value_ref: Vec<u32>,
    /// Hashed vectors of the distinct codes, `n_unique x d`.
    unique: Vec<S>,
    slots: Vec<usize>,
}

struct BlockCache<S> {
    x: Vec<S>,
    fq: Vec<S>,
    fk: Vec<S>,
    fv: Vec<S>,
    fp: Vec<S>,
    fo: Vec<S>,
    a: Vec<S>,
    rq: Vec<S>,
    rk: Vec<S>,
    rv: Vec<S>,
    rp: Vec<S>,
    ro: Vec<S>,
    xhat1: Vec<S>,
    rstd1: Vec<S>,
    cn: Vec<S>,
    h1: Vec<S>,
    g1: Vec<S>,
    xhat2: Vec<S>,
    rstd2: Vec<S>,
}

/// Everything backward needs from one forward pass.
pub struct ForwardCache<S> {
    dims: Dims,
    embedding: Embedding<S>,
    blocks: Vec<BlockCache<S>>,
    out: Vec<S>,
    labels: Vec<u8>,
}

fn check_table(config: &MiniPfnConfig, table: &CellTable) -> Result<Dims> {
    config.check_width(table.horizon)?;
    if table.n_context == 0 {
        return Err(Error::EmptyTable { side: "train" });
    }
    let width = table.width();
    Ok(Dims {
        rows: table.n_rows(),
        n_ctx: table.n_context,
        cells: width + 1,
        width,
        d: config.d_model,
        heads: config.n_heads,
        dh: config.head_dim(),
        dff: config.d_ff,
    })
}

fn embed<S: Scalar>(params: &ModelParams<S>, config: &MiniPfnConfig, table: &CellTable, dims: &Dims) -> (Vec<S>, Embedding<S>) {
    let Dims { rows, cells, width, d, n_ctx, .. } = *dims;
    let slots: Vec<usize> = (0..width).map(|j| config.slot(table.horizon, j)).collect();
    let families: Vec<u32> = (0..width).map(|j| column_info(table.horizon, j).0.index()).collect();
    let mut index: HashMap<(u32, u32), u32> = HashMap::new();
    let mut unique: Vec<S> = Vec::new();
    let mut value_ref = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for j in 0..width {
            let code = table.codes[r * width + j];
            if code == PAD {
                value_ref.push(NO_VALUE);
                continue;
            }
            let next = index.len() as u32;
            let idx = *index.entry((families[j], code)).or_insert_with(|| {
                unique.extend(hash_vector(config.value_hash_seed, families[j], code, d).into_iter().map(S::from_f64));
                next
            });
            value_ref.push(idx);
        }
    }
    let n_unique = index.len();
    let mixed = matmul(&unique, n_unique, d, &params.value_mix.data, d);
    let label_slot = config.label_slot();
    let mut x = vec![S::ZERO; rows * cells * d];
    for r in 0..rows {
        for c in 0..cells {
            let dst = &mut x[(r * cells + c) * d..][..d];
            let (base, slot): (&[S], usize) = if c < width {
                let v = value_ref[r * width + c];
                if v == NO_VALUE {
                    (&params.pad_emb.data, slots[c])
                } else {
                    (&mixed[v as usize * d..][..d], slots[c])
                }
            } else if r < n_ctx {
                (params.label_emb.row(usize::from(table.labels[r])), label_slot)
            } else {
                (&params.mask_emb.data, label_slot)
            };
            let col = params.col_emb.row(slot);
            let time = params.time_emb.row(config.slot_lag(slot));
            for (((o, &b), &p), &t) in dst.iter_mut().zip(base).zip(col).zip(time) {
                *o = b + p + t;
            }
        }
    }
    (x, Embedding { value_ref, unique, slots })
}

/// Softmax attention of one head: `probs = softmax(scale * Q K^T)`, `out = probs V`.
#[allow(clippy::too_many_arguments)]
fn attend<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    out: &mut [S],
    q_off: usize,
    n_q: usize,
    k_off: usize,
    n_k: usize,
    stride: usize,
    dh: usize,
    scale: S,
    probs: &mut [S],
) {
    let qv = MatRef::new(&q[q_off..], n_q, dh, stride, 1);
    let kv = MatRef::new(&k[k_off..], n_k, dh, stride, 1);
    gemm(scale, qv, kv.t(), S::ZERO, MatMut::dense(probs, n_q, n_k));
    for row in probs.chunks_exact_mut(n_k) {
        softmax_in_place(row);
    }
    let vv = MatRef::new(&v[k_off..], n_k, dh, stride, 1);
    gemm(S::ONE, MatRef::dense(probs, n_q, n_k), vv, S::ZERO, MatMut::new(&mut out[q_off..], n_q, dh, stride, 1));
}

#[allow(clippy::too_many_arguments)]
fn attend_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
    q_off: usize,
    n_q: usize,
    k_off: usize,
    n_k: usize,
    stride: usize,
    dh: usize,
    scale: S,
    dp: &mut [S],
) {
    let p = MatRef::dense(probs, n_q, n_k);
    let dov = MatRef::new(&dout[q_off..], n_q, dh, stride, 1);
    let vv = MatRef::new(&v[k_off..], n_k, dh, stride, 1);
    gemm(S::ONE, dov, vv.t(), S::ZERO, MatMut::dense(dp, n_q, n_k));
    gemm(S::ONE, p.t(), dov, S::ONE, MatMut::new(&mut dv[k_off..], n_k, dh, stride, 1));
    for (drow, prow) in dp.chunks_exact_mut(n_k).zip(probs.chunks_exact(n_k)) {
        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        let dot = S::from_f64(dot);
        for (g, &pv) in drow.iter_mut().zip(prow) {
            *g = pv * (*g - dot);
        }
    }
    let ds = MatRef::dense(dp, n_q, n_k);
    let qv = MatRef::new(&q[q_off..], n_q, dh, stride, 1);
    let kv = MatRef::new(&k[k_off..], n_k, dh, stride, 1);
    gemm(scale, ds, kv, S::ONE, MatMut::new(&mut dq[q_off..], n_q, dh, stride, 1));
    gemm(scale, ds.t(), qv, S::ONE, MatMut::new(&mut dk[k_off..], n_k, dh, stride, 1));
}

/// Row-wise layer norm; returns `(y, xhat, rstd)`.
fn layer_norm<S: Scalar>(x: &[S], d: usize, gain: &[S], bias: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = x.len() / d;
    let mut y = vec![S::ZERO; x.len()];
    let mut xhat = vec![S::ZERO; x.len()];
    let mut rstd = vec![S::ZERO; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = S::from_f64(rs);
        for j in 0..d {
            let h = S::from_f64((row[j].to_f64() - mean) * rs);
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    rstd: &[S],
    gain: &[S],
    dgain: &mut [S],
    dbias: &mut [S],
    d: usize,
) -> Vec<S> {
    let mut dx = vec![S::ZERO; dy.len()];
    let mut dxhat = vec![0.0f64; d];
    for i in 0..rstd.len() {
        let dyr = &dy[i * d..(i + 1) * d];
        let xr = &xhat[i * d..(i + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            let g = dyr[j].to_f64() * gain[j].to_f64();
            dxhat[j] = g;
            m1 += g;
            m2 += g * xr[j].to_f64();
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rs = rstd[i].to_f64();
        for j in 0..d {
            dx[i * d + j] = S::from_f64(rs * (dxhat[j] - m1 - xr[j].to_f64() * m2));
        }
    }
    dx
}

fn add_in_place<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn add_bias<S: Scalar>(m: &mut [S], bias: &[S]) {
    for row in m.chunks_exact_mut(bias.len()) {
        add_in_place(row, bias);
    }
}

fn add_colsum<S: Scalar>(dst: &mut [S], m: &[S]) {
    for row in m.chunks_exact(dst.len()) {
        add_in_place(dst, row);
    }
}

/// `dst += a^T * b` for dense `a: n x p`, `b: n x q`.
fn add_at_b<S: Scalar>(dst: &mut [S], a: &[S], p: usize, b: &[S], q: usize) {
    let n = a.len() / p;
    gemm(S::ONE, MatRef::dense(a, n, p).t(), MatRef::dense(b, n, q), S::ONE, MatMut::dense(dst, p, q));
}

/// `dst += a * w^T` for dense `a: n x q`, `w: p x q`.
fn add_a_wt<S: Scalar>(dst: &mut [S], a: &[S], q: usize, w: &[S], p: usize) {
    let n = a.len() / q;
    gemm(S::ONE, MatRef::dense(a, n, q), MatRef::dense(w, p, q).t(), S::ONE, MatMut::dense(dst, n, p));
}

fn project<S: Scalar>(x: &[S], d: usize, attn: &AttnParams<S>) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = x.len() / d;
    (
        matmul(x, n, d, &attn.wq.data, d),
        matmul(x, n, d, &attn.wk.data, d),
        matmul(x, n, d, &attn.wv.data, d),
    )
}

fn block_forward<S: Scalar>(
    bp: &BlockParams<S>,
    dims: &Dims,
    x: Vec<S>,
    keep: bool,
    record: Option<(&mut [f64], f64)>,
) -> (Vec<S>, Option<BlockCache<S>>) {
    let Dims { rows, n_ctx, cells, width, d, heads, dh, dff } = *dims;
    let rc = dims.rc();
    let scale = S::from_f64(dims.scale());

    let (fq, fk, fv) = project(&x, d, &bp.feature_attn);
    let mut fo = vec![S::ZERO; rc * d];
    let mut fp = if keep { vec![S::ZERO; rows * heads * cells * cells] } else { Vec::new() };
    let mut scratch = vec![S::ZERO; cells * cells];
    for r in 0..rows {
        for h in 0..heads {
            let off = r * cells * d + h * dh;
            let probs = if keep { &mut fp[(r * heads + h) * cells * cells..][..cells * cells] } else { &mut scratch[..] };
            attend(&fq, &fk, &fv, &mut fo, off, cells, off, cells, d, dh, scale, probs);
        }
    }
    let mut a = matmul(&fo, rc, d, &bp.feature_attn.wo.data, d);
    add_in_place(&mut a, &x);

    let (rq, rk, rv) = project(&a, d, &bp.row_attn);
    let mut ro = vec![S::ZERO; rc * d];
    let block = rows * n_ctx;
    let mut rp = if keep { vec![S::ZERO; cells * heads * block] } else { Vec::new() };
    let mut scratch = vec![S::ZERO; block];
    let mut record = record;
    for c in 0..cells {
        for h in 0..heads {
            let off = c * d + h * dh;
            let probs = if keep { &mut rp[(c * heads + h) * block..][..block] } else { &mut scratch[..] };
            attend(&rq, &rk, &rv, &mut ro, off, rows, off, n_ctx, cells * d, dh, scale, probs);
            if c == width {
                if let Some((rec, w)) = record.as_mut() {
                    for (dst, &p) in rec.iter_mut().zip(&probs[n_ctx * n_ctx..]) {
                        *dst += p.to_f64() * *w;
                    }
                }
            }
        }
    }
    let mut b = matmul(&ro, rc, d, &bp.row_attn.wo.data, d);
    add_in_place(&mut b, &a);

    let (cn, xhat1, rstd1) = layer_norm(&b, d, &bp.ln1_gain.data, &bp.ln1_bias.data);
    drop(b);
    let mut h1 = matmul(&cn, rc, d, &bp.ff_w1.data, dff);
    add_bias(&mut h1, &bp.ff_b1.data);
    let g1: Vec<S> = h1.iter().map(|&v| gelu(v)).collect();
    let mut s = matmul(&g1, rc, dff, &bp.ff_w2.data, d);
    add_bias(&mut s, &bp.ff_b2.data);
    add_in_place(&mut s, &cn);
    let (out, xhat2, rstd2) = layer_norm(&s, d, &bp.ln2_gain.data, &bp.ln2_bias.data);

    let cache = keep.then(|| BlockCache {
        x,
        fq,
        fk,
        fv,
        fp,
        fo,
        a,
        rq,
        rk,
        rv,
        rp,
        ro,
        xhat1,
        rstd1,
        cn,
        h1,
        g1,
        xhat2,
        rstd2,
    });
    (out, cache)
}

fn block_backward<S: Scalar>(bp: &BlockParams<S>, gp: &mut BlockParams<S>, dims: &Dims, cache: &BlockCache<S>, dout: &[S]) -> Vec<S> {
    let Dims { rows, n_ctx, cells, d, heads, dh, dff, .. } = *dims;
    let rc = dims.rc();
    let scale = S::from_f64(dims.scale());

    let ds = layer_norm_backward(dout, &cache.xhat2, &cache.rstd2, &bp.ln2_gain.data, &mut gp.ln2_gain.data, &mut gp.ln2_bias.data, d);
    add_colsum(&mut gp.ff_b2.data, &ds);
    add_at_b(&mut gp.ff_w2.data, &cache.g1, dff, &ds, d);
    let mut dh1 = vec![S::ZERO; rc * dff];
    add_a_wt(&mut dh1, &ds, d, &bp.ff_w2.data, dff);
    for (g, &h) in dh1.iter_mut().zip(&cache.h1) {
        *g *= gelu_grad(h);
    }
    add_colsum(&mut gp.ff_b1.data, &dh1);
    add_at_b(&mut gp.ff_w1.data, &cache.cn, d, &dh1, dff);
    let mut dcn = ds;
    add_a_wt(&mut dcn, &dh1, dff, &bp.ff_w1.data, d);
    drop(dh1);
    let db = layer_norm_backward(&dcn, &cache.xhat1, &cache.rstd1, &bp.ln1_gain.data, &mut gp.ln1_gain.data, &mut gp.ln1_bias.data, d);
    drop(dcn);

    // row attention
    add_at_b(&mut gp.row_attn.wo.data, &cache.ro, d, &db, d);
    let mut dro = vec![S::ZERO; rc * d];
    add_a_wt(&mut dro, &db, d, &bp.row_attn.wo.data, d);
    let (mut dq, mut dk, mut dv) = (vec![S::ZERO; rc * d], vec![S::ZERO; rc * d], vec![S::ZERO; rc * d]);
    let block = rows * n_ctx;
    let mut dp = vec![S::ZERO; block];
    for c in 0..cells {
        for h in 0..heads {
            let off = c * d + h * dh;
            let probs = &cache.rp[(c * heads + h) * block..][..block];
            attend_backward(
                &cache.rq, &cache.rk, &cache.rv, probs, &dro, &mut dq, &mut dk, &mut dv, off, rows, off, n_ctx, cells * d, dh, scale, &mut dp,
            );
        }
    }
    let mut da = db;
    backprop_projections(&mut gp.row_attn, &bp.row_attn, &cache.a, &dq, &dk, &dv, &mut da, d);

    // feature attention
    add_at_b(&mut gp.feature_attn.wo.data, &cache.fo, d, &da, d);
    let mut dfo = vec![S::ZERO; rc * d];
    add_a_wt(&mut dfo, &da, d, &bp.feature_attn.wo.data, d);
    for buf in [&mut dq, &mut dk, &mut dv] {
        buf.iter_mut().for_each(|v| *v = S::ZERO);
    }
    let block = cells * cells;
    let mut dp = vec![S::ZERO; block];
    for r in 0..rows {
        for h in 0..heads {
            let off = r * cells * d + h * dh;
            let probs = &cache.fp[(r * heads + h) * block..][..block];
            attend_backward(
                &cache.fq, &cache.fk, &cache.fv, probs, &dfo, &mut dq, &mut dk, &mut dv, off, cells, off, cells, d, dh, scale, &mut dp,
            );
        }
    }
    let mut dx = da;
    backprop_projections(&mut gp.feature_attn, &bp.feature_attn, &cache.x, &dq, &dk, &dv, &mut dx, d);
    dx
}

#[allow(clippy::too_many_arguments)]
fn backprop_projections<S: Scalar>(
    grads: &mut AttnParams<S>,
    attn: &AttnParams<S>,
    input: &[S],
    dq: &[S],
    dk: &[S],
    dv: &[S],
    dinput: &mut [S],
    d: usize,
) {
    add_at_b(&mut grads.wq.data, input, d, dq, d);
    add_at_b(&mut grads.wk.data, input, d, dk, d);
    add_at_b(&mut grads.wv.data, input, d, dv, d);
    add_a_wt(dinput, dq, d, &attn.wq.data, d);
    add_a_wt(dinput, dk, d, &attn.wk.data, d);
    add_a_wt(dinput, dv, d, &attn.wv.data, d);
}

fn check_finite<S: Scalar>(x: &[S], block: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { block })
    }
}

fn head_logits<S: Scalar>(params: &ModelParams<S>, dims: &Dims, out: &[S]) -> Vec<[S; 2]> {
    let Dims { rows, n_ctx, cells, width, d, .. } = *dims;
    (n_ctx..rows)
        .map(|r| {
            let z = &out[(r * cells + width) * d..][..d];
            let mut l = [params.head_b.data[0], params.head_b.data[1]];
            for (i, &zi) in z.iter().enumerate() {
                l[0] += zi * params.head_w.data[2 * i];
                l[1] += zi * params.head_w.data[2 * i + 1];
            }
            l
        })
        .collect()
}

fn run<S: Scalar>(
    params: &ModelParams<S>,
    config: &MiniPfnConfig,
    table: &CellTable,
    options: ForwardOptions,
    keep: bool,
) -> Result<(ForwardOutput<S>, Option<ForwardCache<S>>)> {
    let dims = check_table(config, table)?;
    let (mut x, embedding) = embed(params, config, table, &dims);
    let n_query = table.n_query;
    let mut record = options.record_attention.then(|| vec![0.0f64; n_query * dims.n_ctx]);
    let mut caches = Vec::new();
    if !options.bypass_blocks {
        let w = 1.0 / (config.n_heads * params.blocks.len()).max(1) as f64;
        for (i, bp) in params.blocks.iter().enumerate() {
            let (out, cache) = block_forward(bp, &dims, x, keep, record.as_deref_mut().map(|r| (r, w)));
            check_finite(&out, i)?;
            caches.extend(cache);
            x = out;
        }
    }
    let logits = head_logits(params, &dims, &x);
    let record = record.map(|weights| AttentionRecord {
        n_context: dims.n_ctx,
        weights,
    });
    let output = ForwardOutput { logits, record };
    let cache = keep.then(|| ForwardCache {
        dims,
        embedding,
        blocks: caches,
        out: x,
        labels: table.labels.clone(),
    });
    Ok((output, cache))
}

/// Inference pass; `train` rows come first in `table`.
pub fn forward<S: Scalar>(params: &ModelParams<S>, config: &MiniPfnConfig, table: &CellTable, options: ForwardOptions) -> Result<ForwardOutput<S>> {
    if table.n_query == 0 {
        return Ok(ForwardOutput {
            logits: Vec::new(),
            record: options.record_attention.then(|| AttentionRecord {
                n_context: table.n_context,
                weights: Vec::new(),
            }),
        });
    }
    run(params, config, table, options, false).map(|(o, _)| o)
}

/// Mean cross-entropy of the query rows against `query_labels`.
pub fn cross_entropy<S: Scalar>(logits: &[[S; 2]], query_labels: &[u8]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(query_labels)
        .map(|(l, &y)| {
            let (l0, l1) = (l[0].to_f64(), l[1].to_f64());
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            lse - if y == 1 { l1 } else { l0 }
        })
        .sum::<f64>()
        / n
}

/// Loss of one episode and its gradient with respect to every parameter.
pub fn loss_and_grad<S: Scalar>(
    params: &ModelParams<S>,
    config: &MiniPfnConfig,
    table: &CellTable,
    query_labels: &[u8],
    options: ForwardOptions,
) -> Result<(f64, ModelParams<S>)> {
    if query_labels.len() != table.n_query || table.n_query == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} query labels for {} query rows",
            query_labels.len(),
            table.n_query
        )));
    }
    let (output, cache) = run(params, config, table, ForwardOptions { record_attention: false, ..options }, true)?;
    let cache = cache.expect("cache requested");
    let loss = cross_entropy(&output.logits, query_labels);
    let grads = backward(params, &cache, &output.logits, query_labels);
    Ok((loss, grads))
}

fn backward<S: Scalar>(params: &ModelParams<S>, cache: &ForwardCache<S>, logits: &[[S; 2]], query_labels: &[u8]) -> ModelParams<S> {
    let dims = &cache.dims;
    let Dims { rows, n_ctx, cells, width, d, .. } = *dims;
    let mut g = params.zeros_like();
    let inv_n = 1.0 / logits.len() as f64;

    let mut dx = vec![S::ZERO; dims.rc() * d];
    for (q, (l, &y)) in logits.iter().zip(query_labels).enumerate() {
        let p1 = crate::baselines::sigmoid(l[1].to_f64() - l[0].to_f64());
        let dl1 = S::from_f64((p1 - f64::from(y)) * inv_n);
        let dl = [-dl1, dl1];
        let at = ((n_ctx + q) * cells + width) * d;
        let z = &cache.out[at..at + d];
        g.head_b.data[0] += dl[0];
        g.head_b.data[1] += dl[1];
        for i in 0..d {
            g.head_w.data[2 * i] += z[i] * dl[0];
            g.head_w.data[2 * i + 1] += z[i] * dl[1];
            dx[at + i] = params.head_w.data[2 * i] * dl[0] + params.head_w.data[2 * i + 1] * dl[1];
        }
    }

    for ((bp, gp), bc) in params.blocks.iter().zip(g.blocks.iter_mut()).zip(&cache.blocks).rev() {
        dx = block_backward(bp, gp, dims, bc, &dx);
    }

    let emb = &cache.embedding;
    let n_unique = emb.unique.len() / d;
    let max_lag = params.time_emb.shape[0];
    let mut d_unique = vec![S::ZERO; n_unique * d];
    for r in 0..rows {
        for c in 0..cells {
            let src = &dx[(r * cells + c) * d..][..d];
            let slot = if c < width {
                let v = emb.value_ref[r * width + c];
                if v == NO_VALUE {
                    add_in_place(&mut g.pad_emb.data, src);
                } else {
                    add_in_place(&mut d_unique[v as usize * d..][..d], src);
                }
                emb.slots[c]
            } else {
                if r < n_ctx {
                    add_in_place(g.label_emb.row_mut(usize::from(cache.labels[r])), src);
                } else {
                    add_in_place(&mut g.mask_emb.data, src);
                }
                g.col_emb.shape[0] - 1
            };
            add_in_place(g.col_emb.row_mut(slot), src);
            add_in_place(g.time_emb.row_mut(slot_lag(max_lag, slot)), src);
        }
    }
    add_at_b(&mut g.value_mix.data, &emb.unique, d, &d_unique, d);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_table(n_ctx: usize, n_query: usize, horizon: usize, seed: u64) -> (CellTable, Vec<u8>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = feature_width(horizon);
        let rows = n_ctx + n_query;
        let mut codes = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let pad = rng.gen_range(0..horizon - 1);
            for j in 0..width {
                let (family, lag) = column_info(horizon, j);
                let is_pad = lag + pad >= horizon;
                let code = if is_pad {
                    PAD
                } else {
                    match family {
                        crate::encoding::ColumnFamily::Correct => rng.gen_range(1..=2),
                        _ => rng.gen_range(1..6),
                    }
                };
                codes.push(code);
            }
        }
        let labels = (0..n_ctx).map(|i| (i % 2) as u8).collect();
        let query_labels = (0..n_query).map(|i| ((i + 1) % 2) as u8).collect();
        (
            CellTable {
                horizon,
                n_context: n_ctx,
                n_query,
                codes,
                labels,
            },
            query_labels,
        )
    }

    #[test]
    fn hash_vectors_are_unit_and_stable() {
        for code in 1..200 {
            let v = hash_vector(9, 1, code, 16);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(v, hash_vector(9, 1, code, 16));
        }
        assert_ne!(hash_vector(9, 0, 5, 16), hash_vector(9, 1, 5, 16));
    }

    #[test]
    fn zero_head_gives_half() {
        let cfg = MiniPfnConfig::tiny();
        let mut p: ModelParams<f64> = ModelParams::init(&cfg, 1);
        p.head_w.data.iter_mut().for_each(|v| *v = 0.0);
        let (t, _) = toy_table(4, 3, 3, 2);
        let out = forward(&p, &cfg, &t, ForwardOptions::default()).unwrap();
        assert!(out.probabilities().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn record_rows_sum_to_one() {
        let cfg = MiniPfnConfig::tiny();
        let p: ModelParams<f32> = ModelParams::init(&cfg, 1);
        let (t, _) = toy_table(5, 3, 4, 3);
        let out = forward(&p, &cfg, &t, ForwardOptions { record_attention: true, ..Default::default() }).unwrap();
        let rec = out.record.unwrap();
        for q in 0..3 {
            let s: f64 = rec.row(q).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gradient_of_value_mix_matches_difference() {
        let cfg = MiniPfnConfig::tiny();
        let mut p: ModelParams<f64> = ModelParams::init(&cfg, 5);
        let (t, y) = toy_table(4, 2, 3, 8);
        let (_, g) = loss_and_grad(&p, &cfg, &t, &y, ForwardOptions::default()).unwrap();
        let h = 1e-5;
        for idx in [0, 9, 33] {
            let orig = p.value_mix.data[idx];
            p.value_mix.data[idx] = orig + h;
            let lp = cross_entropy(&forward(&p, &cfg, &t, ForwardOptions::default()).unwrap().logits, &y);
            p.value_mix.data[idx] = orig - h;
            let lm = cross_entropy(&forward(&p, &cfg, &t, ForwardOptions::default()).unwrap().logits, &y);
            p.value_mix.data[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.value_mix.data[idx]).abs() < 1e-7, "{fd} vs {}", g.value_mix.data[idx]);
        }
    }
}
