//! Forward pass, masked cross-entropy, and exact reverse-mode gradients.
//!
//! Activations are `[batch · seq, features]`; sequences in a batch share one
//! length and attention is causal, so right padding never leaks into real
//! positions.

use super::params::ParamSet;
use super::tensor::{gemm, MatMut, MatRef, Matrix, Real};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair, LoraTarget};

const LN_EPS: f64 = 1e-5;

/// Right-padded training batch. `mask[i]` says whether `targets[i]` counts
/// toward the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Builds a batch from full token sequences and per-token loss masks.
    /// Inputs are `tokens[..n-1]`, targets `tokens[1..]`.
    pub fn from_sequences(seqs: &[(&[u32], &[bool])], pad: u32) -> Batch {
        let seq_len = seqs.iter().map(|(t, _)| t.len().saturating_sub(1)).max().unwrap_or(0);
        let mut b = Batch {
            inputs: Vec::with_capacity(seqs.len() * seq_len),
            targets: Vec::with_capacity(seqs.len() * seq_len),
            mask: Vec::with_capacity(seqs.len() * seq_len),
            batch_size: seqs.len(),
            seq_len,
        };
        for (tokens, mask) in seqs {
            debug_assert_eq!(tokens.len(), mask.len());
            let n = tokens.len().saturating_sub(1);
            b.inputs.extend_from_slice(&tokens[..n]);
            b.targets.extend_from_slice(&tokens[1..=n]);
            b.mask.extend_from_slice(&mask[1..=n]);
            for _ in n..seq_len {
                b.inputs.push(pad);
                b.targets.push(pad);
                b.mask.push(false);
            }
        }
        b
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

struct Lin<'a, F> {
    w: &'a Matrix<F>,
    bias: Option<&'a Matrix<F>>,
    lora: Option<&'a LoraPair<F>>,
    scale: F,
}

#[derive(Default)]
struct LinGrads<'a, F> {
    dw: Option<&'a mut Matrix<F>>,
    dbias: Option<&'a mut Matrix<F>>,
    dlora: Option<&'a mut LoraPair<F>>,
}

fn lin_fwd<F: Real>(x: &Matrix<F>, l: &Lin<'_, F>) -> (Matrix<F>, Option<Matrix<F>>) {
    let mut y = x.matmul_t(l.w);
    if let Some(b) = l.bias {
        for r in 0..y.rows {
            for (yv, &bv) in y.row_mut(r).iter_mut().zip(&b.data) {
                *yv += bv;
            }
        }
    }
    let z = l.lora.map(|p| {
        let z = x.matmul_t(&p.a);
        gemm(l.scale, z.view(), p.b.view().t(), F::one(), y.view_mut());
        z
    });
    (y, z)
}

fn lin_bwd<F: Real>(
    x: &Matrix<F>,
    z: Option<&Matrix<F>>,
    dy: &Matrix<F>,
    l: &Lin<'_, F>,
    g: LinGrads<'_, F>,
) -> Matrix<F> {
    let mut dx = dy.matmul(l.w);
    if let Some(dw) = g.dw {
        gemm(F::one(), dy.view().t(), x.view(), F::one(), dw.view_mut());
    }
    if let Some(db) = g.dbias {
        for r in 0..dy.rows {
            for (d, &v) in db.data.iter_mut().zip(dy.row(r)) {
                *d += v;
            }
        }
    }
    if let (Some(p), Some(z)) = (l.lora, z) {
        let mut dz = Matrix::zeros(dy.rows, p.a.rows);
        gemm(l.scale, dy.view(), p.b.view(), F::zero(), dz.view_mut());
        if let Some(dl) = g.dlora {
            gemm(l.scale, dy.view().t(), z.view(), F::one(), dl.b.view_mut());
            gemm(F::one(), dz.view().t(), x.view(), F::one(), dl.a.view_mut());
        }
        gemm(F::one(), dz.view(), p.a.view(), F::one(), dx.view_mut());
    }
    dx
}

struct LnCache<F> {
    xhat: Matrix<F>,
    rstd: Vec<F>,
}

fn ln_fwd<F: Real>(x: &Matrix<F>, g: &Matrix<F>, b: &Matrix<F>) -> (Matrix<F>, LnCache<F>) {
    let n = F::from_usize(x.cols).unwrap();
    let eps = F::lit(LN_EPS);
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let yr = &mut y.data[r * x.cols..(r + 1) * x.cols];
        for c in 0..x.cols {
            yr[c] = xhat.data[r * x.cols + c] * g.data[c] + b.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd<F: Real>(
    dy: &Matrix<F>,
    cache: &LnCache<F>,
    g: &Matrix<F>,
    grads: Option<(&mut Matrix<F>, &mut Matrix<F>)>,
) -> Matrix<F> {
    let cols = dy.cols;
    let n = F::from_usize(cols).unwrap();
    let mut dx = Matrix::zeros(dy.rows, cols);
    let mut grads = grads;
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if let Some((dg, db)) = grads.as_mut() {
            for c in 0..cols {
                dg.data[c] += dyr[c] * xh[c];
                db.data[c] += dyr[c];
            }
        }
        let mut sum_d = F::zero();
        let mut sum_dx = F::zero();
        for c in 0..cols {
            let d = dyr[c] * g.data[c];
            sum_d += d;
            sum_dx += d * xh[c];
        }
        let mean_d = sum_d / n;
        let mean_dx = sum_dx / n;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = rs * (dyr[c] * g.data[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn gelu<F: Real>(u: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * u * (F::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let th = (c * (u + k * u * u * u)).tanh();
    half * (F::one() + th) + half * u * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * k * u * u)
}

/// Softmax over `row[..=last]`; entries after `last` are zeroed.
pub(crate) fn causal_softmax_row<F: Real>(row: &mut [F], last: usize) {
    let max = row[..=last].iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in &mut row[..=last] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..=last] {
        *v /= sum;
    }
    for v in &mut row[last + 1..] {
        *v = F::zero();
    }
}

fn attn_fwd<F: Real>(
    q: &Matrix<F>,
    k: &Matrix<F>,
    v: &Matrix<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Matrix<F>, Vec<F>) {
    let d = q.cols;
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let tt = seq * seq;
    let mut probs = vec![F::zero(); batch * heads * tt];
    let mut att = Matrix::zeros(batch * seq, d);
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * tt..][..tt];
            let qb = q.view().block(b * seq, seq, h * dh, dh);
            let kb = k.view().block(b * seq, seq, h * dh, dh);
            gemm(scale, qb, kb.t(), F::zero(), MatMut::from_slice(p, seq, seq));
            for i in 0..seq {
                causal_softmax_row(&mut p[i * seq..(i + 1) * seq], i);
            }
            let vb = v.view().block(b * seq, seq, h * dh, dh);
            gemm(
                F::one(),
                MatRef::from_slice(p, seq, seq),
                vb,
                F::zero(),
                att.view_mut().block(b * seq, seq, h * dh, dh),
            );
        }
    }
    (att, probs)
}

#[allow(clippy::too_many_arguments)]
fn attn_bwd<F: Real>(
    datt: &Matrix<F>,
    q: &Matrix<F>,
    k: &Matrix<F>,
    v: &Matrix<F>,
    probs: &[F],
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Matrix<F>, Matrix<F>, Matrix<F>) {
    let d = q.cols;
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let tt = seq * seq;
    let mut dq = Matrix::zeros(q.rows, d);
    let mut dk = Matrix::zeros(q.rows, d);
    let mut dv = Matrix::zeros(q.rows, d);
    let mut ds = vec![F::zero(); tt];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * tt..][..tt];
            let pm = MatRef::from_slice(p, seq, seq);
            let dob = datt.view().block(b * seq, seq, h * dh, dh);
            let vb = v.view().block(b * seq, seq, h * dh, dh);
            gemm(F::one(), dob, vb.t(), F::zero(), MatMut::from_slice(&mut ds, seq, seq));
            gemm(F::one(), pm.t(), dob, F::zero(), dv.view_mut().block(b * seq, seq, h * dh, dh));
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut ds[i * seq..(i + 1) * seq];
                let dot: F = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) } else { F::zero() };
                }
            }
            let dsm = MatRef::from_slice(&ds, seq, seq);
            let qb = q.view().block(b * seq, seq, h * dh, dh);
            let kb = k.view().block(b * seq, seq, h * dh, dh);
            gemm(scale, dsm, kb, F::zero(), dq.view_mut().block(b * seq, seq, h * dh, dh));
            gemm(scale, dsm.t(), qb, F::zero(), dk.view_mut().block(b * seq, seq, h * dh, dh));
        }
    }
    (dq, dk, dv)
}

struct LayerCache<F> {
    x: Matrix<F>,
    ln1: LnCache<F>,
    h1: Matrix<F>,
    q: Matrix<F>,
    k: Matrix<F>,
    v: Matrix<F>,
    zq: Option<Matrix<F>>,
    zk: Option<Matrix<F>>,
    zv: Option<Matrix<F>>,
    probs: Vec<F>,
    att: Matrix<F>,
    zo: Option<Matrix<F>>,
    ln2: LnCache<F>,
    h2: Matrix<F>,
    u: Matrix<F>,
    z1: Option<Matrix<F>>,
    g: Matrix<F>,
    z2: Option<Matrix<F>>,
}

struct Cache<F> {
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    hf: Matrix<F>,
}

fn lin<'a, F: Real>(
    w: &'a Matrix<F>,
    bias: Option<&'a Matrix<F>>,
    adapter: Option<&'a LoraAdapter<F>>,
    layer: usize,
    target: LoraTarget,
) -> Lin<'a, F> {
    Lin {
        w,
        bias,
        lora: adapter.and_then(|a| a.get(layer, target)),
        scale: adapter.map_or(F::zero(), |a| a.scale()),
    }
}

fn embed<F: Real>(params: &ParamSet<F>, inputs: &[u32], batch: usize, seq: usize) -> Result<Matrix<F>> {
    let cfg = &params.config;
    if seq > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: seq,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.d_model;
    let mut x = Matrix::zeros(batch * seq, d);
    for (r, &tok) in inputs.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken(tok));
        }
        let t = r % seq;
        let out = x.row_mut(r);
        for ((o, &e), &p) in out.iter_mut().zip(params.tok_emb.row(tok as usize)).zip(params.pos_emb.row(t)) {
            *o = e + p;
        }
    }
    Ok(x)
}

fn forward_cached<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    inputs: &[u32],
    batch: usize,
    seq: usize,
) -> Result<(Matrix<F>, Cache<F>)> {
    assert_eq!(inputs.len(), batch * seq);
    let heads = params.config.n_heads;
    let mut x = embed(params, inputs, batch, seq)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (li, l) in params.layers.iter().enumerate() {
        let (h1, ln1) = ln_fwd(&x, &l.ln1_g, &l.ln1_b);
        let (q, zq) = lin_fwd(&h1, &lin(&l.wq, None, adapter, li, LoraTarget::Wq));
        let (k, zk) = lin_fwd(&h1, &lin(&l.wk, None, adapter, li, LoraTarget::Wk));
        let (v, zv) = lin_fwd(&h1, &lin(&l.wv, None, adapter, li, LoraTarget::Wv));
        let (att, probs) = attn_fwd(&q, &k, &v, batch, seq, heads);
        let (o, zo) = lin_fwd(&att, &lin(&l.wo, None, adapter, li, LoraTarget::Wo));
        let mut x_mid = x.clone();
        x_mid.add_assign(&o);
        let (h2, ln2) = ln_fwd(&x_mid, &l.ln2_g, &l.ln2_b);
        let (u, z1) = lin_fwd(&h2, &lin(&l.w1, Some(&l.b1), adapter, li, LoraTarget::W1));
        let g = Matrix::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
        let (m, z2) = lin_fwd(&g, &lin(&l.w2, Some(&l.b2), adapter, li, LoraTarget::W2));
        let mut x_out = x_mid;
        x_out.add_assign(&m);
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, x_out),
            ln1,
            h1,
            q,
            k,
            v,
            zq,
            zk,
            zv,
            probs,
            att,
            zo,
            ln2,
            h2,
            u,
            z1,
            g,
            z2,
        });
    }
    let (hf, lnf) = ln_fwd(&x, &params.lnf_g, &params.lnf_b);
    let logits = hf.matmul_t(&params.head);
    Ok((logits, Cache { layers, lnf, hf }))
}

/// Logits `[tokens.len(), vocab_size]` for one sequence.
pub fn forward<F: Real>(params: &ParamSet<F>, tokens: &[u32]) -> Result<Matrix<F>> {
    forward_with(params, None, tokens)
}

/// Like [`forward`], optionally through an adapter.
pub fn forward_with<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    tokens: &[u32],
) -> Result<Matrix<F>> {
    Ok(forward_cached(params, adapter, tokens, 1, tokens.len())?.0)
}

/// Logits for a whole batch, `[batch · seq, vocab]`.
pub fn forward_batch<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    batch: &Batch,
) -> Result<Matrix<F>> {
    Ok(forward_cached(params, adapter, &batch.inputs, batch.batch_size, batch.seq_len)?.0)
}

/// Mean over masked positions of `-log softmax(logits)[target]`.
pub fn nll_loss<F: Real>(logits: &Matrix<F>, targets: &[u32], mask: &[bool]) -> Result<F> {
    Ok(nll_and_grad(logits, targets, mask, false)?.0)
}

fn nll_and_grad<F: Real>(
    logits: &Matrix<F>,
    targets: &[u32],
    mask: &[bool],
    want_grad: bool,
) -> Result<(F, Option<Matrix<F>>)> {
    assert_eq!(targets.len(), logits.rows);
    assert_eq!(mask.len(), logits.rows);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = F::one() / F::from_usize(count).unwrap();
    let mut total = F::zero();
    let mut grad = want_grad.then(|| Matrix::zeros(logits.rows, logits.cols));
    for r in 0..logits.rows {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let t = targets[r] as usize;
        total += lse - row[t];
        if let Some(g) = grad.as_mut() {
            let gr = g.row_mut(r);
            for (o, &v) in gr.iter_mut().zip(row) {
                *o = (v - lse).exp() * inv;
            }
            gr[t] -= inv;
        }
    }
    Ok((total * inv, grad))
}

/// Gradients for whichever parameters were requested.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub base: Option<ParamSet<F>>,
    pub adapter: Option<LoraAdapter<F>>,
}

/// Loss and exact gradients. Base gradients are produced only when
/// `base_grads` is set; adapter gradients whenever an adapter is given.
pub fn loss_and_grad<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    batch: &Batch,
    base_grads: bool,
) -> Result<(F, Gradients<F>)> {
    let (bsz, seq) = (batch.batch_size, batch.seq_len);
    let heads = params.config.n_heads;
    let (logits, cache) = forward_cached(params, adapter, &batch.inputs, bsz, seq)?;
    let (loss, dlogits) = nll_and_grad(&logits, &batch.targets, &batch.mask, true)?;
    let dlogits = dlogits.expect("requested");
    drop(logits);

    let mut gb = base_grads.then(|| params.zeros_like());
    let mut ga = adapter.map(LoraAdapter::zeros_like);

    let dhf = dlogits.matmul(&params.head);
    if let Some(g) = gb.as_mut() {
        gemm(F::one(), dlogits.view().t(), cache.hf.view(), F::one(), g.head.view_mut());
    }
    let mut dx = ln_bwd(
        &dhf,
        &cache.lnf,
        &params.lnf_g,
        gb.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
    );

    for (li, (l, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let mut lg = gb.as_mut().map(|g| &mut g.layers[li]);
        let mut la = ga.as_mut().map(|a| &mut a.layers[li]);
        macro_rules! grads {
            ($w:ident, $t:expr) => {
                LinGrads {
                    dw: lg.as_mut().map(|g| &mut g.$w),
                    dbias: None,
                    dlora: la.as_mut().and_then(|m| m.get_mut(&$t)),
                }
            };
            ($w:ident, $b:ident, $t:expr) => {{
                let (dw, dbias) = match lg.as_mut() {
                    Some(g) => (Some(&mut g.$w), Some(&mut g.$b)),
                    None => (None, None),
                };
                LinGrads {
                    dw,
                    dbias,
                    dlora: la.as_mut().and_then(|m| m.get_mut(&$t)),
                }
            }};
        }
        // MLP
        let dm = &dx;
        let dg = lin_bwd(
            &c.g,
            c.z2.as_ref(),
            dm,
            &lin(&l.w2, Some(&l.b2), adapter, li, LoraTarget::W2),
            grads!(w2, b2, LoraTarget::W2),
        );
        let du = Matrix::from_vec(
            dg.rows,
            dg.cols,
            dg.data.iter().zip(&c.u.data).map(|(&d, &u)| d * gelu_grad(u)).collect(),
        );
        let dh2 = lin_bwd(
            &c.h2,
            c.z1.as_ref(),
            &du,
            &lin(&l.w1, Some(&l.b1), adapter, li, LoraTarget::W1),
            grads!(w1, b1, LoraTarget::W1),
        );
        let mut dx_mid = ln_bwd(
            &dh2,
            &c.ln2,
            &l.ln2_g,
            lg.as_mut().map(|g| {
                let g = &mut **g;
                (&mut g.ln2_g, &mut g.ln2_b)
            }),
        );
        dx_mid.add_assign(&dx);
        // attention
        let datt = lin_bwd(
            &c.att,
            c.zo.as_ref(),
            &dx_mid,
            &lin(&l.wo, None, adapter, li, LoraTarget::Wo),
            grads!(wo, LoraTarget::Wo),
        );
        let (dq, dk, dv) = attn_bwd(&datt, &c.q, &c.k, &c.v, &c.probs, bsz, seq, heads);
        let mut dh1 = lin_bwd(
            &c.h1,
            c.zq.as_ref(),
            &dq,
            &lin(&l.wq, None, adapter, li, LoraTarget::Wq),
            grads!(wq, LoraTarget::Wq),
        );
        dh1.add_assign(&lin_bwd(
            &c.h1,
            c.zk.as_ref(),
            &dk,
            &lin(&l.wk, None, adapter, li, LoraTarget::Wk),
            grads!(wk, LoraTarget::Wk),
        ));
        dh1.add_assign(&lin_bwd(
            &c.h1,
            c.zv.as_ref(),
            &dv,
            &lin(&l.wv, None, adapter, li, LoraTarget::Wv),
            grads!(wv, LoraTarget::Wv),
        ));
        let mut dxi = ln_bwd(
            &dh1,
            &c.ln1,
            &l.ln1_g,
            lg.as_mut().map(|g| {
                let g = &mut **g;
                (&mut g.ln1_g, &mut g.ln1_b)
            }),
        );
        dxi.add_assign(&dx_mid);
        debug_assert_eq!(c.x.rows, dxi.rows);
        dx = dxi;
    }

    if let Some(g) = gb.as_mut() {
        for (r, &tok) in batch.inputs.iter().enumerate() {
            let t = r % seq;
            let src = dx.row(r);
            for (o, &v) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
                *o += v;
            }
            for (o, &v) in g.pos_emb.row_mut(t).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok((
        loss,
        Gradients {
            base: gb,
            adapter: ga,
        },
    ))
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Matrix<F>>,
    values: Vec<Matrix<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let c = &params.config;
        KvCache {
            keys: (0..c.n_layers).map(|_| Matrix::zeros(c.max_seq_len, c.d_model)).collect(),
            values: (0..c.n_layers).map(|_| Matrix::zeros(c.max_seq_len, c.d_model)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Runs `tokens` as the continuation of whatever `cache` already holds and
/// returns their logits `[tokens.len(), vocab]`.
pub fn forward_incremental<F: Real>(
    params: &ParamSet<F>,
    cache: &mut KvCache<F>,
    tokens: &[u32],
) -> Result<Matrix<F>> {
    let cfg = &params.config;
    let n = tokens.len();
    let start = cache.len;
    let total = start + n;
    if total > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut x = Matrix::zeros(n, d);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken(tok));
        }
        let out = x.row_mut(i);
        for ((o, &e), &p) in out
            .iter_mut()
            .zip(params.tok_emb.row(tok as usize))
            .zip(params.pos_emb.row(start + i))
        {
            *o = e + p;
        }
    }
    let mut scores = vec![F::zero(); n * total];
    for (li, l) in params.layers.iter().enumerate() {
        let (h1, _) = ln_fwd(&x, &l.ln1_g, &l.ln1_b);
        let (q, _) = lin_fwd(&h1, &lin(&l.wq, None, None, li, LoraTarget::Wq));
        let (k, _) = lin_fwd(&h1, &lin(&l.wk, None, None, li, LoraTarget::Wk));
        let (v, _) = lin_fwd(&h1, &lin(&l.wv, None, None, li, LoraTarget::Wv));
        cache.keys[li].data[start * d..total * d].copy_from_slice(&k.data);
        cache.values[li].data[start * d..total * d].copy_from_slice(&v.data);
        let keys = &cache.keys[li];
        let values = &cache.values[li];
        let mut att = Matrix::zeros(n, d);
        for h in 0..heads {
            let kb = keys.view().block(0, total, h * dh, dh);
            gemm(
                scale,
                q.view().block(0, n, h * dh, dh),
                kb.t(),
                F::zero(),
                MatMut::from_slice(&mut scores, n, total),
            );
            for i in 0..n {
                causal_softmax_row(&mut scores[i * total..(i + 1) * total], start + i);
            }
            gemm(
                F::one(),
                MatRef::from_slice(&scores, n, total),
                values.view().block(0, total, h * dh, dh),
                F::zero(),
                att.view_mut().block(0, n, h * dh, dh),
            );
        }
        let (o, _) = lin_fwd(&att, &lin(&l.wo, None, None, li, LoraTarget::Wo));
        x.add_assign(&o);
        let (h2, _) = ln_fwd(&x, &l.ln2_g, &l.ln2_b);
        let (mut u, _) = lin_fwd(&h2, &lin(&l.w1, Some(&l.b1), None, li, LoraTarget::W1));
        u.data.iter_mut().for_each(|v| *v = gelu(*v));
        let (m, _) = lin_fwd(&u, &lin(&l.w2, Some(&l.b2), None, li, LoraTarget::W2));
        x.add_assign(&m);
    }
    cache.len = total;
    let (hf, _) = ln_fwd(&x, &params.lnf_g, &params.lnf_b);
    Ok(hf.matmul_t(&params.head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ParamSet<f64> {
        let mut c = ModelConfig::tiny(40, 12);
        c.d_model = 16;
        c.d_ff = 32;
        c.n_heads = 2;
        ParamSet::init(&c).unwrap()
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let logits = Matrix::<f64>::zeros(3, 4);
        let loss = nll_loss(&logits, &[0, 1, 3], &[true, true, true]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_mask() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0f64]);
        let loss = nll_loss(&logits, &[2, 0], &[false, true]).unwrap();
        let row = [0.5f64, -1.0, 2.0];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((loss - (lse - 0.5)).abs() < 1e-12);
        assert!(matches!(nll_loss(&logits, &[0, 0], &[false, false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn causal() {
        let p = small();
        let a = forward(&p, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward(&p, &[1, 2, 3, 9, 5]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn single_token_shape_and_softmax() {
        let p = small();
        let l = forward(&p, &[7]).unwrap();
        assert_eq!(l.shape(), (1, 40));
        let max = l.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = l.data.iter().map(|v| (v - max).exp()).sum();
        let probs: f64 = l.data.iter().map(|v| (v - max).exp() / s).sum();
        assert!((probs - 1.0).abs() < 1e-6);
    }

    #[test]
    fn overlong_and_unknown_token() {
        let p = small();
        assert!(matches!(forward(&p, &[1; 13]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(forward(&p, &[99]), Err(Error::UnknownToken(99))));
    }

    #[test]
    fn batched_matches_single() {
        let p = small();
        let s1: Vec<u32> = vec![1, 2, 3, 4, 5];
        let s2: Vec<u32> = vec![6, 7, 8];
        let m1 = vec![true; 5];
        let m2 = vec![true; 3];
        let batch = Batch::from_sequences(&[(&s1, &m1), (&s2, &m2)], 0);
        let logits = forward_batch(&p, None, &batch).unwrap();
        let single = forward(&p, &s2[..2]).unwrap();
        for t in 0..2 {
            for (a, b) in logits.row(4 + t).iter().zip(single.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incremental_matches_full() {
        let p = small();
        let toks = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let full = forward(&p, &toks).unwrap();
        let mut cache = KvCache::new(&p);
        let mut rows = forward_incremental(&p, &mut cache, &toks[..5]).unwrap().data;
        for &t in &toks[5..] {
            rows.extend(forward_incremental(&p, &mut cache, &[t]).unwrap().data);
        }
        assert_eq!(cache.len(), toks.len());
        for (a, b) in rows.iter().zip(&full.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn padding_does_not_change_loss() {
        let p = small();
        let s1: Vec<u32> = vec![1, 2, 3];
        let m1 = vec![true; 3];
        let long: Vec<u32> = vec![4; 8];
        let ml = vec![false; 8];
        let alone = Batch::from_sequences(&[(&s1, &m1)], 0);
        let padded = Batch::from_sequences(&[(&s1, &m1), (&long, &ml)], 0);
        let a = loss_and_grad(&p, None, &alone, true).unwrap().0;
        let b = loss_and_grad(&p, None, &padded, true).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }
}
