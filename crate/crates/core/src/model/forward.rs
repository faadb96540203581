//! Forward pass, answer-masked loss and reverse-mode gradients.

use std::ops::Range;

use super::assemble::{frame_mean, AssembledSequence};
use super::params::{LayerLayout, ModelParams};
use super::scalar::{
    add_bias, col_sum_into, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, matmul, softmax_in_place, Scalar,
    View,
};
use crate::corpus::Clip;
use crate::error::{Error, Result};

/// Row-major `rows × vocab` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Mean-pool the frames and project to `clip_tokens` embedding rows.
pub fn encode_clip<T: Scalar>(clip: &Clip, params: &ModelParams<T>) -> Result<Vec<Vec<T>>> {
    let cfg = &params.config;
    if clip.dim() != cfg.clip_dim {
        return Err(Error::InvalidInstance(format!(
            "clip dimension {} differs from projector input {}",
            clip.dim(),
            cfg.clip_dim
        )));
    }
    let proj = project_clip(params, &frame_mean(clip));
    Ok(proj.chunks_exact(cfg.d_model).map(<[T]>::to_vec).collect())
}

fn project_clip<T: Scalar>(params: &ModelParams<T>, feature: &[T]) -> Vec<T> {
    let cfg = &params.config;
    let width = cfg.clip_tokens * cfg.d_model;
    let mut out = params.slice(&params.layout.clip_b).to_vec();
    matmul(
        View::rm(feature, 1, cfg.clip_dim),
        View::rm(params.slice(&params.layout.clip_w), cfg.clip_dim, width),
        &mut out,
        true,
    );
    out
}

/// Input embedding rows (token or clip row, plus absolute position).
pub(crate) fn embed<T: Scalar>(params: &ModelParams<T>, seq: &AssembledSequence<T>) -> Vec<T> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let tok = params.slice(&params.layout.tok_emb);
    let pos = params.slice(&params.layout.pos_emb);
    let mut x = pos[..seq.len() * d].to_vec();
    let mut t = 0;
    let mut clips = seq.clip_starts.iter().zip(&seq.clip_features).peekable();
    while t < seq.len() {
        if let Some((_, feature)) = clips.next_if(|c| *c.0 == t) {
            let proj = project_clip(params, feature);
            for (slot, row) in proj.chunks_exact(d).enumerate() {
                for (xv, pv) in x[(t + slot) * d..(t + slot + 1) * d].iter_mut().zip(row) {
                    *xv += *pv;
                }
            }
            t += cfg.clip_tokens;
        } else {
            let id = seq.token_ids[t] as usize;
            for (xv, ev) in x[t * d..(t + 1) * d].iter_mut().zip(&tok[id * d..(id + 1) * d]) {
                *xv += *ev;
            }
            t += 1;
        }
    }
    x
}

/// Causal multi-head attention for `n` query rows at absolute positions
/// `t0..t0 + n` over keys/values at `0..t0 + n`. `q`, `k`, `v` point at the
/// first head's columns; heads are `head_dim` apart.
#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    n_heads: usize,
    head_dim: usize,
    q: &[T],
    rs_q: usize,
    k: &[T],
    v: &[T],
    rs_kv: usize,
    n: usize,
    t0: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let d = n_heads * head_dim;
    let tt = t0 + n;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    for h in 0..n_heads {
        let p = &mut probs[h * n * tt..(h + 1) * n * tt];
        let off = h * head_dim;
        gemm(
            scale,
            View::strided(&q[off..], n, head_dim, rs_q, 1),
            View::strided(&k[off..], tt, head_dim, rs_kv, 1).t(),
            T::zero(),
            p,
            tt,
            1,
        );
        for (i, row) in p.chunks_exact_mut(tt).enumerate() {
            let valid = t0 + i + 1;
            softmax_in_place(&mut row[..valid]);
            row[valid..].iter_mut().for_each(|x| *x = T::zero());
        }
        gemm(
            T::one(),
            View::rm(p, n, tt),
            View::strided(&v[off..], tt, head_dim, rs_kv, 1),
            T::zero(),
            &mut out[off..],
            d,
            1,
        );
    }
}

#[derive(Default)]
struct LayerActs<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_stats: Vec<(T, T)>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_stats: Vec<(T, T)>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Activations<T> {
    len: usize,
    layers: Vec<LayerActs<T>>,
    x_final: Vec<T>,
    lnf: Vec<T>,
    lnf_stats: Vec<(T, T)>,
}

fn check_finite<T: Scalar>(x: &[T], what: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure(what()))
    }
}

fn layer_forward<T: Scalar>(params: &ModelParams<T>, lay: &LayerLayout, x: &mut [T], n: usize) -> LayerActs<T> {
    let cfg = &params.config;
    let (d, f, h, dh) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads, cfg.head_dim());
    let p = |r: &Range<usize>| params.slice(r);
    let mut a = LayerActs {
        x_in: x.to_vec(),
        ln1: vec![T::zero(); n * d],
        ln1_stats: vec![(T::zero(), T::zero()); n],
        qkv: vec![T::zero(); n * 3 * d],
        probs: vec![T::zero(); h * n * n],
        attn: vec![T::zero(); n * d],
        ln2: vec![T::zero(); n * d],
        ln2_stats: vec![(T::zero(), T::zero()); n],
        fc_pre: vec![T::zero(); n * f],
        ..LayerActs::default()
    };
    layer_norm(x, p(&lay.ln1_g), p(&lay.ln1_b), &mut a.ln1, &mut a.ln1_stats);
    matmul(View::rm(&a.ln1, n, d), View::rm(p(&lay.w_qkv), d, 3 * d), &mut a.qkv, false);
    add_bias(&mut a.qkv, p(&lay.b_qkv));
    attention_forward(
        h,
        dh,
        &a.qkv,
        3 * d,
        &a.qkv[d..],
        &a.qkv[2 * d..],
        3 * d,
        n,
        0,
        &mut a.probs,
        &mut a.attn,
    );
    matmul(View::rm(&a.attn, n, d), View::rm(p(&lay.w_o), d, d), x, true);
    add_bias(x, p(&lay.b_o));
    a.x_mid = x.to_vec();
    layer_norm(x, p(&lay.ln2_g), p(&lay.ln2_b), &mut a.ln2, &mut a.ln2_stats);
    matmul(View::rm(&a.ln2, n, d), View::rm(p(&lay.w_fc), d, f), &mut a.fc_pre, false);
    add_bias(&mut a.fc_pre, p(&lay.b_fc));
    a.fc_act = a.fc_pre.iter().map(|&v| gelu(v)).collect();
    matmul(View::rm(&a.fc_act, n, f), View::rm(p(&lay.w_proj), f, d), x, true);
    add_bias(x, p(&lay.b_proj));
    a
}

pub(crate) fn forward_activations<T: Scalar>(
    params: &ModelParams<T>,
    seq: &AssembledSequence<T>,
) -> Result<Activations<T>> {
    let cfg = &params.config;
    let n = seq.len();
    if n > cfg.max_seq_len {
        return Err(Error::Assembly {
            required: n,
            max: cfg.max_seq_len,
        });
    }
    if n == 0 {
        return Err(Error::InvalidInstance("empty sequence".into()));
    }
    let d = cfg.d_model;
    let mut x = embed(params, seq);
    check_finite(&x, || "embeddings".into())?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lay) in params.layout.layers.iter().enumerate() {
        layers.push(layer_forward(params, lay, &mut x, n));
        check_finite(&x, || format!("layer {l} activations"))?;
    }
    let mut lnf = vec![T::zero(); n * d];
    let mut lnf_stats = vec![(T::zero(), T::zero()); n];
    layer_norm(
        &x,
        params.slice(&params.layout.lnf_g),
        params.slice(&params.layout.lnf_b),
        &mut lnf,
        &mut lnf_stats,
    );
    Ok(Activations {
        len: n,
        layers,
        x_final: x,
        lnf,
        lnf_stats,
    })
}

/// Output logits for the given normalized hidden rows (`rows × d_model`).
pub(crate) fn head_logits<T: Scalar>(params: &ModelParams<T>, hidden: &[T], rows: usize) -> Vec<T> {
    let cfg = &params.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut out = vec![T::zero(); rows * v];
    let w = match &params.layout.head {
        Some(h) => View::rm(params.slice(h), d, v),
        None => View::rm(params.slice(&params.layout.tok_emb), v, d).t(),
    };
    matmul(View::rm(hidden, rows, d), w, &mut out, false);
    out
}

/// Logits at every position.
pub fn forward<T: Scalar>(params: &ModelParams<T>, seq: &AssembledSequence<T>) -> Result<Logits<T>> {
    let acts = forward_activations(params, seq)?;
    let data = head_logits(params, &acts.lnf, acts.len);
    check_finite(&data, || "output logits".into())?;
    Ok(Logits {
        rows: acts.len,
        vocab: params.config.vocab_size,
        data,
    })
}

/// Mean negative log-likelihood of the answer tokens, each predicted from
/// the previous position.
pub fn loss<T: Scalar>(logits: &Logits<T>, seq: &AssembledSequence<T>) -> Result<f64> {
    let targets = seq.targets();
    if targets.is_empty() {
        return Err(Error::InvalidInstance("answer mask is empty".into()));
    }
    let mut total = 0.0;
    for &(t, gold) in &targets {
        let mut row = logits.row(t).to_vec();
        let lse = softmax_in_place(&mut row);
        total += lse.f64() - logits.row(t)[gold as usize].f64();
    }
    Ok(total / targets.len() as f64)
}

fn two_mut<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    n_heads: usize,
    head_dim: usize,
    n: usize,
    qkv: &[T],
    probs: &[T],
    d_attn: &[T],
    dqkv: &mut [T],
    scratch: &mut Vec<T>,
) {
    let d = n_heads * head_dim;
    let rs = 3 * d;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    scratch.resize(n * n, T::zero());
    for h in 0..n_heads {
        let off = h * head_dim;
        let p = &probs[h * n * n..(h + 1) * n * n];
        let ds = &mut scratch[..];
        // dP = dOut_h · V_hᵀ
        gemm(
            T::one(),
            View::strided(&d_attn[off..], n, head_dim, d, 1),
            View::strided(&qkv[2 * d + off..], n, head_dim, rs, 1).t(),
            T::zero(),
            ds,
            n,
            1,
        );
        // dV_h = Pᵀ · dOut_h
        gemm(
            T::one(),
            View::rm(p, n, n).t(),
            View::strided(&d_attn[off..], n, head_dim, d, 1),
            T::zero(),
            &mut dqkv[2 * d + off..],
            rs,
            1,
        );
        for i in 0..n {
            let pr = &p[i * n..i * n + i + 1];
            let dr = &mut ds[i * n..(i + 1) * n];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - dot);
            }
            dr[i + 1..].iter_mut().for_each(|v| *v = T::zero());
        }
        gemm(
            scale,
            View::rm(ds, n, n),
            View::strided(&qkv[d + off..], n, head_dim, rs, 1),
            T::zero(),
            &mut dqkv[off..],
            rs,
            1,
        );
        gemm(
            scale,
            View::rm(ds, n, n).t(),
            View::strided(&qkv[off..], n, head_dim, rs, 1),
            T::zero(),
            &mut dqkv[d + off..],
            rs,
            1,
        );
    }
}

fn layer_backward<T: Scalar>(
    params: &ModelParams<T>,
    lay: &LayerLayout,
    a: &LayerActs<T>,
    n: usize,
    dx: &mut [T],
    grad: &mut [T],
    scratch: &mut Vec<T>,
) {
    let cfg = &params.config;
    let (d, f, h, dh) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads, cfg.head_dim());
    let p = |r: &Range<usize>| params.slice(r);

    // Feed-forward branch.
    col_sum_into(dx, &mut grad[lay.b_proj.clone()]);
    matmul(View::rm(&a.fc_act, n, f).t(), View::rm(dx, n, d), &mut grad[lay.w_proj.clone()], true);
    let mut d_fc = vec![T::zero(); n * f];
    matmul(View::rm(dx, n, d), View::rm(p(&lay.w_proj), f, d).t(), &mut d_fc, false);
    for (g, &pre) in d_fc.iter_mut().zip(&a.fc_pre) {
        *g *= gelu_grad(pre);
    }
    col_sum_into(&d_fc, &mut grad[lay.b_fc.clone()]);
    matmul(View::rm(&a.ln2, n, d).t(), View::rm(&d_fc, n, f), &mut grad[lay.w_fc.clone()], true);
    let mut d_ln = vec![T::zero(); n * d];
    matmul(View::rm(&d_fc, n, f), View::rm(p(&lay.w_fc), d, f).t(), &mut d_ln, false);
    {
        let (dg, db) = two_mut(grad, &lay.ln2_g, &lay.ln2_b);
        layer_norm_backward(&a.x_mid, &a.ln2_stats, p(&lay.ln2_g), &d_ln, dx, dg, db);
    }

    // Attention branch.
    col_sum_into(dx, &mut grad[lay.b_o.clone()]);
    matmul(View::rm(&a.attn, n, d).t(), View::rm(dx, n, d), &mut grad[lay.w_o.clone()], true);
    let mut d_attn = vec![T::zero(); n * d];
    matmul(View::rm(dx, n, d), View::rm(p(&lay.w_o), d, d).t(), &mut d_attn, false);
    let mut dqkv = vec![T::zero(); n * 3 * d];
    attention_backward(h, dh, n, &a.qkv, &a.probs, &d_attn, &mut dqkv, scratch);
    col_sum_into(&dqkv, &mut grad[lay.b_qkv.clone()]);
    matmul(View::rm(&a.ln1, n, d).t(), View::rm(&dqkv, n, 3 * d), &mut grad[lay.w_qkv.clone()], true);
    matmul(View::rm(&dqkv, n, 3 * d), View::rm(p(&lay.w_qkv), d, 3 * d).t(), &mut d_ln, false);
    let (dg, db) = two_mut(grad, &lay.ln1_g, &lay.ln1_b);
    layer_norm_backward(&a.x_in, &a.ln1_stats, p(&lay.ln1_g), &d_ln, dx, dg, db);
}

/// Loss of one sequence; accumulates `weight × ∂loss/∂θ` into `grad`.
pub(crate) fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    seq: &AssembledSequence<T>,
    weight: T,
    grad: &mut [T],
) -> Result<f64> {
    let cfg = &params.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let targets = seq.targets();
    if targets.is_empty() {
        return Err(Error::InvalidInstance("answer mask is empty".into()));
    }
    let acts = forward_activations(params, seq)?;
    let n = acts.len;
    let m = targets.len();

    let mut hidden = Vec::with_capacity(m * d);
    for &(t, _) in &targets {
        hidden.extend_from_slice(&acts.lnf[t * d..(t + 1) * d]);
    }
    let mut dlogits = head_logits(params, &hidden, m);
    check_finite(&dlogits, || "output logits".into())?;
    let mut total = 0.0;
    let inv_m = weight * T::of(1.0 / m as f64);
    for (row, &(_, gold)) in dlogits.chunks_exact_mut(v).zip(&targets) {
        let gold_logit = row[gold as usize];
        let lse = softmax_in_place(row);
        total += (lse - gold_logit).f64();
        row[gold as usize] -= T::one();
        row.iter_mut().for_each(|x| *x *= inv_m);
    }

    // Output head.
    let mut d_hidden = vec![T::zero(); m * d];
    match &params.layout.head {
        Some(hr) => {
            matmul(View::rm(&dlogits, m, v), View::rm(params.slice(hr), d, v).t(), &mut d_hidden, false);
            matmul(View::rm(&hidden, m, d).t(), View::rm(&dlogits, m, v), &mut grad[hr.clone()], true);
        }
        None => {
            let te = &params.layout.tok_emb;
            matmul(View::rm(&dlogits, m, v), View::rm(params.slice(te), v, d), &mut d_hidden, false);
            matmul(View::rm(&dlogits, m, v).t(), View::rm(&hidden, m, d), &mut grad[te.clone()], true);
        }
    }
    let mut d_lnf = vec![T::zero(); n * d];
    for (row, &(t, _)) in d_hidden.chunks_exact(d).zip(&targets) {
        d_lnf[t * d..(t + 1) * d].copy_from_slice(row);
    }
    let mut dx = vec![T::zero(); n * d];
    {
        let (dg, db) = two_mut(grad, &params.layout.lnf_g, &params.layout.lnf_b);
        layer_norm_backward(
            &acts.x_final,
            &acts.lnf_stats,
            params.slice(&params.layout.lnf_g),
            &d_lnf,
            &mut dx,
            dg,
            db,
        );
    }

    let mut scratch = Vec::new();
    for (lay, a) in params.layout.layers.iter().zip(&acts.layers).rev() {
        layer_backward(params, lay, a, n, &mut dx, grad, &mut scratch);
    }

    // Embeddings.
    let pos = params.layout.pos_emb.start;
    for (gv, xv) in grad[pos..pos + n * d].iter_mut().zip(&dx) {
        *gv += *xv;
    }
    let q = cfg.clip_tokens;
    let te = params.layout.tok_emb.start;
    let mut t = 0;
    let mut clip = 0;
    while t < n {
        if seq.clip_starts.get(clip) == Some(&t) {
            let span = &dx[t * d..(t + q) * d];
            col_sum_into(span, &mut grad[params.layout.clip_b.clone()]);
            let g = &mut grad[params.layout.clip_w.clone()];
            let width = q * d;
            for (i, &fv) in seq.clip_features[clip].iter().enumerate() {
                for (gv, sv) in g[i * width..(i + 1) * width].iter_mut().zip(span) {
                    *gv += fv * *sv;
                }
            }
            t += q;
            clip += 1;
        } else {
            let id = seq.token_ids[t] as usize;
            for (gv, xv) in grad[te + id * d..te + (id + 1) * d].iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                *gv += *xv;
            }
            t += 1;
        }
    }
    Ok(total / m as f64)
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn gradients<T: Scalar>(params: &ModelParams<T>, batch: &[AssembledSequence<T>]) -> Result<(f64, Vec<T>)> {
    let mut grad = vec![T::zero(); params.data.len()];
    let refs: Vec<&AssembledSequence<T>> = batch.iter().collect();
    let loss = accumulate_gradients(params, &refs, &mut grad)?;
    Ok((loss, grad))
}

pub(crate) fn accumulate_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&AssembledSequence<T>],
    grad: &mut [T],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInstance("empty batch".into()));
    }
    let w = T::of(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for seq in batch {
        total += loss_and_grad(params, seq, w, grad)?;
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "gradient of {}",
            params.layout.block_name(i)
        )));
    }
    Ok(total / batch.len() as f64)
}

/// Per-layer key/value history for incremental decoding.
pub(crate) struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let cfg = &params.config;
        let size = cfg.max_seq_len * cfg.d_model;
        Self {
            k: (0..cfg.n_layers).map(|_| vec![T::zero(); size]).collect(),
            v: (0..cfg.n_layers).map(|_| vec![T::zero(); size]).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

/// Run `n` new embedded rows through the network, extending the cache.
/// Returns the final-norm hidden rows.
pub(crate) fn forward_chunk<T: Scalar>(params: &ModelParams<T>, x: &mut [T], cache: &mut KvCache<T>) -> Result<Vec<T>> {
    let cfg = &params.config;
    let (d, f, h, dh) = (cfg.d_model, cfg.ffn_dim(), cfg.n_heads, cfg.head_dim());
    let n = x.len() / d;
    let t0 = cache.len;
    if t0 + n > cfg.max_seq_len {
        return Err(Error::Assembly {
            required: t0 + n,
            max: cfg.max_seq_len,
        });
    }
    let p = |r: &Range<usize>| params.slice(r);
    let mut ln = vec![T::zero(); n * d];
    let mut stats = vec![(T::zero(), T::zero()); n];
    let mut qkv = vec![T::zero(); n * 3 * d];
    let mut probs = vec![T::zero(); h * n * (t0 + n)];
    let mut attn = vec![T::zero(); n * d];
    let mut fc = vec![T::zero(); n * f];
    for (l, lay) in params.layout.layers.iter().enumerate() {
        layer_norm(x, p(&lay.ln1_g), p(&lay.ln1_b), &mut ln, &mut stats);
        matmul(View::rm(&ln, n, d), View::rm(p(&lay.w_qkv), d, 3 * d), &mut qkv, false);
        add_bias(&mut qkv, p(&lay.b_qkv));
        for (i, row) in qkv.chunks_exact(3 * d).enumerate() {
            let t = t0 + i;
            cache.k[l][t * d..(t + 1) * d].copy_from_slice(&row[d..2 * d]);
            cache.v[l][t * d..(t + 1) * d].copy_from_slice(&row[2 * d..]);
        }
        attention_forward(h, dh, &qkv, 3 * d, &cache.k[l], &cache.v[l], d, n, t0, &mut probs, &mut attn);
        matmul(View::rm(&attn, n, d), View::rm(p(&lay.w_o), d, d), x, true);
        add_bias(x, p(&lay.b_o));
        layer_norm(x, p(&lay.ln2_g), p(&lay.ln2_b), &mut ln, &mut stats);
        matmul(View::rm(&ln, n, d), View::rm(p(&lay.w_fc), d, f), &mut fc, false);
        add_bias(&mut fc, p(&lay.b_fc));
        fc.iter_mut().for_each(|v| *v = gelu(*v));
        matmul(View::rm(&fc, n, f), View::rm(p(&lay.w_proj), f, d), x, true);
        add_bias(x, p(&lay.b_proj));
        check_finite(x, || format!("layer {l} activations"))?;
    }
    cache.len += n;
    let mut out = vec![T::zero(); n * d];
    layer_norm(x, p(&params.layout.lnf_g), p(&params.layout.lnf_b), &mut out, &mut stats);
    Ok(out)
}

/// Embedding of a single word token at position `t`.
pub(crate) fn embed_token<T: Scalar>(params: &ModelParams<T>, id: u32, t: usize) -> Vec<T> {
    let d = params.config.d_model;
    let tok = &params.slice(&params.layout.tok_emb)[id as usize * d..(id as usize + 1) * d];
    let pos = &params.slice(&params.layout.pos_emb)[t * d..(t + 1) * d];
    tok.iter().zip(pos).map(|(&a, &b)| a + b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;
    use crate::model::tokenizer::Tokenizer;

    fn cfg(tie: bool) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 12,
            clip_tokens: 2,
            clip_dim: 3,
            max_seq_len: 24,
            ffn_multiplier: 2.0,
            tie_embeddings: tie,
        }
    }

    pub(crate) fn toy_seq(len: usize) -> AssembledSequence<f64> {
        let mut token_ids: Vec<u32> = (0..len).map(|t| 4 + (t as u32 * 7) % 8).collect();
        token_ids[0] = Tokenizer::CLIP;
        token_ids[1] = Tokenizer::CLIP;
        token_ids[5] = Tokenizer::CLIP;
        token_ids[6] = Tokenizer::CLIP;
        let mut answer_mask = vec![false; len];
        for m in answer_mask.iter_mut().skip(len - 3) {
            *m = true;
        }
        AssembledSequence {
            token_ids,
            clip_features: vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]],
            clip_starts: vec![0, 5],
            answer_mask,
        }
    }

    #[test]
    fn causal_prefix_is_unaffected_by_future_inputs() {
        let p = ModelParams::<f64>::init(cfg(true), 3).unwrap();
        let seq = toy_seq(12);
        let base = forward(&p, &seq).unwrap();
        for pos in 1..12 {
            let mut s2 = seq.clone();
            let first = match s2.clip_at(pos, 2) {
                Some((c, _)) => {
                    s2.clip_features[c][0] += 3.0;
                    seq.clip_starts[c]
                }
                None => {
                    s2.token_ids[pos] = 4 + (s2.token_ids[pos] + 3) % 8;
                    pos
                }
            };
            let other = forward(&p, &s2).unwrap();
            for r in 0..first {
                assert_eq!(base.row(r), other.row(r), "row {r} changed when perturbing {pos}");
            }
            assert_ne!(base.row(first), other.row(first));
        }
    }

    #[test]
    fn single_token_logits_shape() {
        let p = ModelParams::<f64>::init(cfg(false), 1).unwrap();
        let seq = AssembledSequence {
            token_ids: vec![5],
            clip_features: vec![],
            clip_starts: vec![],
            answer_mask: vec![false],
        };
        let l = forward(&p, &seq).unwrap();
        assert_eq!((l.rows, l.vocab, l.data.len()), (1, 12, 12));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let seq = toy_seq(10);
        let logits = Logits {
            rows: 10,
            vocab: 64,
            data: vec![0.25; 640],
        };
        assert!((loss(&logits, &seq).unwrap() - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_unmasked_positions() {
        let p = ModelParams::<f64>::init(cfg(true), 2).unwrap();
        let seq = toy_seq(12);
        let mut logits = forward(&p, &seq).unwrap();
        let before = loss(&logits, &seq).unwrap();
        let used: Vec<usize> = seq.targets().iter().map(|t| t.0).collect();
        for t in 0..logits.rows {
            if !used.contains(&t) {
                logits.row_mut(t).iter_mut().enumerate().for_each(|(i, v)| *v += (i * t) as f64);
            }
        }
        assert_eq!(loss(&logits, &seq).unwrap(), before);

        let mut relabelled = seq.clone();
        relabelled.token_ids[3] = 4;
        let l2 = forward(&p, &relabelled).unwrap();
        assert!(loss(&l2, &relabelled).is_ok());
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mut seq = toy_seq(8);
        seq.answer_mask.iter_mut().for_each(|m| *m = false);
        let logits = Logits {
            rows: 8,
            vocab: 12,
            data: vec![0.0; 96],
        };
        assert!(matches!(loss(&logits, &seq), Err(Error::InvalidInstance(_))));
    }

    #[test]
    fn confident_correct_logits_have_near_zero_loss() {
        let seq = toy_seq(10);
        let mut logits = Logits {
            rows: 10,
            vocab: 12,
            data: vec![0.0; 120],
        };
        for (t, gold) in seq.targets() {
            logits.row_mut(t)[gold as usize] = 50.0;
        }
        assert!(loss(&logits, &seq).unwrap() < 1e-15);
    }

    #[test]
    fn loss_and_grad_agrees_with_forward_loss() {
        for tie in [true, false] {
            let p = ModelParams::<f64>::init(cfg(tie), 5).unwrap();
            let seq = toy_seq(14);
            let l1 = loss(&forward(&p, &seq).unwrap(), &seq).unwrap();
            let (l2, g) = gradients(&p, std::slice::from_ref(&seq)).unwrap();
            assert!((l1 - l2).abs() < 1e-12);
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let p = ModelParams::<f64>::init(cfg(true), 4).unwrap();
        let seq = toy_seq(12);
        let full = forward_activations(&p, &seq).unwrap();
        let mut cache = KvCache::new(&p);
        let x = embed(&p, &seq);
        let d = p.config.d_model;
        let mut head = x[..9 * d].to_vec();
        let first = forward_chunk(&p, &mut head, &mut cache).unwrap();
        let mut rows = first;
        for t in 9..12 {
            let mut row = x[t * d..(t + 1) * d].to_vec();
            rows.extend(forward_chunk(&p, &mut row, &mut cache).unwrap());
        }
        for (a, b) in rows.iter().zip(&full.lnf) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cache.len(), 12);
    }

    #[test]
    fn encode_clip_zero_and_mean() {
        let c = ModelConfig {
            d_model: 3,
            n_layers: 1,
            n_heads: 1,
            vocab_size: 8,
            clip_tokens: 1,
            clip_dim: 3,
            max_seq_len: 4,
            ffn_multiplier: 1.0,
            tie_embeddings: true,
        };
        let mut p = ModelParams::<f64>::init(c, 0).unwrap();
        p.block_mut("clip_proj.w").unwrap().iter_mut().for_each(|v| *v = 0.0);
        let clip = Clip {
            frames: vec![vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -1.0]],
            source_action: crate::corpus::Action::new(0, 0),
        };
        assert_eq!(encode_clip(&clip, &p).unwrap(), vec![vec![0.0; 3]]);
        for i in 0..3 {
            p.block_mut("clip_proj.w").unwrap()[i * 3 + i] = 1.0;
        }
        assert_eq!(encode_clip(&clip, &p).unwrap(), vec![vec![2.0, 1.0, 1.0]]);
    }
}
