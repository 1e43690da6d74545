//! Pre-norm transformer forward pass with activation caches, and the
//! matching reverse pass.

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, NormCache};
use super::params::{Architecture, AttnIds, FfnIds, Gradients, ModelParams, NormIds};
use super::real::Real;
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// One sequence (encoder) or one source/target-prefix pair (encoder-decoder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput<'a> {
    pub source: &'a [TokenId],
    pub decoder_input: Option<&'a [TokenId]>,
}

impl<'a> ModelInput<'a> {
    pub fn encoder(source: &'a [TokenId]) -> Self {
        ModelInput {
            source,
            decoder_input: None,
        }
    }

    pub fn seq2seq(source: &'a [TokenId], decoder_input: &'a [TokenId]) -> Self {
        ModelInput {
            source,
            decoder_input: Some(decoder_input),
        }
    }
}

pub(crate) fn pair_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

fn check_ids<R: Real>(p: &ModelParams<R>, ids: &[TokenId]) -> Result<()> {
    let cfg = &p.config;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

struct EmbedCache<R> {
    ids: Vec<TokenId>,
    raw: Option<Vec<R>>,
}

fn embed_forward<R: Real>(p: &ModelParams<R>, ids: &[TokenId], pos_id: usize) -> (Vec<R>, EmbedCache<R>) {
    let cfg = &p.config;
    let (he, hs) = (cfg.embed_dim, cfg.hidden_dim);
    let lay = p.layout();
    let table = p.data(lay.tok_emb);
    let t = ids.len();
    let mut raw = Vec::with_capacity(t * he);
    for &id in ids {
        let i = id as usize;
        raw.extend_from_slice(&table[i * he..(i + 1) * he]);
    }
    let (mut x, raw) = match lay.in_proj {
        Some(pid) => (super::ops::matmul(&raw, p.data(pid), t, he, hs), Some(raw)),
        None => (raw, None),
    };
    let pos = p.data(pos_id);
    for (v, &pv) in x.iter_mut().zip(&pos[..t * hs]) {
        *v += pv;
    }
    (
        x,
        EmbedCache {
            ids: ids.to_vec(),
            raw,
        },
    )
}

fn embed_backward<R: Real>(p: &ModelParams<R>, cache: &EmbedCache<R>, pos_id: usize, dx: &[R], g: &mut Gradients<R>) {
    let cfg = &p.config;
    let (he, hs) = (cfg.embed_dim, cfg.hidden_dim);
    let lay = p.layout();
    let t = cache.ids.len();
    for (gv, &d) in g.tensors[pos_id].iter_mut().zip(dx) {
        *gv += d;
    }
    let draw = match (lay.in_proj, &cache.raw) {
        (Some(pid), Some(raw)) => {
            super::ops::add_matmul_tn(&mut g.tensors[pid], raw, dx, t, he, hs);
            super::ops::matmul_nt(dx, p.data(pid), t, hs, he)
        }
        _ => dx.to_vec(),
    };
    let gt = &mut g.tensors[lay.tok_emb];
    for (r, &id) in cache.ids.iter().enumerate() {
        let i = id as usize;
        for (gv, &d) in gt[i * he..(i + 1) * he].iter_mut().zip(&draw[r * he..(r + 1) * he]) {
            *gv += d;
        }
    }
}

fn norm_forward<R: Real>(p: &ModelParams<R>, ids: NormIds, x: &[R]) -> (Vec<R>, NormCache<R>) {
    layer_norm(x, p.data(ids.gain), p.data(ids.bias), p.config.hidden_dim)
}

fn norm_backward<R: Real>(p: &ModelParams<R>, ids: NormIds, cache: &NormCache<R>, dy: &[R], g: &mut Gradients<R>) -> Vec<R> {
    let (dg, db) = pair_mut(&mut g.tensors, ids.gain, ids.bias);
    layer_norm_backward(cache, dy, p.data(ids.gain), p.config.hidden_dim, dg, db)
}

struct AttnCache<R> {
    xq: Vec<R>,
    xkv: Vec<R>,
    q: Vec<R>,
    k: Vec<R>,
    v: Vec<R>,
    probs: Vec<R>,
    o: Vec<R>,
    tq: usize,
    tk: usize,
}

fn attn_forward<R: Real>(
    p: &ModelParams<R>,
    ids: &AttnIds,
    xq: &[R],
    xkv: &[R],
    causal: bool,
) -> (Vec<R>, AttnCache<R>) {
    let d = p.config.hidden_dim;
    let heads = p.config.heads;
    let dh = d / heads;
    let tq = xq.len() / d;
    let tk = xkv.len() / d;
    let q = linear(xq, p.data(ids.wq), p.data(ids.bq), tq, d, d);
    let k = super::ops::matmul(xkv, p.data(ids.wk), tk, d, d);
    let v = linear(xkv, p.data(ids.wv), p.data(ids.bv), tk, d, d);
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![R::ZERO; heads * tq * tk];
    let mut o = vec![R::ZERO; tq * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let row = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s = if causal && j > i {
                    R::neg_infinity()
                } else {
                    let kj = &k[j * d + off..j * d + off + dh];
                    qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<R>() * scale
                };
            }
            softmax_in_place(row);
            let oi = &mut o[i * d + off..i * d + off + dh];
            for (j, &pij) in row.iter().enumerate() {
                if pij == R::ZERO {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                for (ov, &vv) in oi.iter_mut().zip(vj) {
                    *ov += pij * vv;
                }
            }
        }
    }
    let out = linear(&o, p.data(ids.wo), p.data(ids.bo), tq, d, d);
    (
        out,
        AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            q,
            k,
            v,
            probs,
            o,
            tq,
            tk,
        },
    )
}

/// Returns `(d xq, d xkv)`.
fn attn_backward<R: Real>(
    p: &ModelParams<R>,
    ids: &AttnIds,
    c: &AttnCache<R>,
    dout: &[R],
    g: &mut Gradients<R>,
) -> (Vec<R>, Vec<R>) {
    let d = p.config.hidden_dim;
    let heads = p.config.heads;
    let dh = d / heads;
    let (tq, tk) = (c.tq, c.tk);
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let do_ = {
        let (dw, db) = pair_mut(&mut g.tensors, ids.wo, ids.bo);
        linear_backward(&c.o, dout, p.data(ids.wo), tq, d, d, dw, db)
    };
    let mut dq = vec![R::ZERO; tq * d];
    let mut dk = vec![R::ZERO; tk * d];
    let mut dv = vec![R::ZERO; tk * d];
    let mut dp = vec![R::ZERO; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let row = &c.probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let doi = &do_[i * d + off..i * d + off + dh];
            let mut dot = R::ZERO;
            for j in 0..tk {
                let pij = row[j];
                let vj = &c.v[j * d + off..j * d + off + dh];
                dp[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                dot += pij * dp[j];
                if pij != R::ZERO {
                    for (dvv, &dd) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                        *dvv += pij * dd;
                    }
                }
            }
            for j in 0..tk {
                let ds = row[j] * (dp[j] - dot) * scale;
                if ds == R::ZERO {
                    continue;
                }
                for a in 0..dh {
                    dq[i * d + off + a] += ds * c.k[j * d + off + a];
                    dk[j * d + off + a] += ds * c.q[i * d + off + a];
                }
            }
        }
    }
    let dxq = {
        let (dw, db) = pair_mut(&mut g.tensors, ids.wq, ids.bq);
        linear_backward(&c.xq, &dq, p.data(ids.wq), tq, d, d, dw, db)
    };
    super::ops::add_matmul_tn(&mut g.tensors[ids.wk], &c.xkv, &dk, tk, d, d);
    let mut dxkv = super::ops::matmul_nt(&dk, p.data(ids.wk), tk, d, d);
    let dxv = {
        let (dw, db) = pair_mut(&mut g.tensors, ids.wv, ids.bv);
        linear_backward(&c.xkv, &dv, p.data(ids.wv), tk, d, d, dw, db)
    };
    for (a, b) in dxkv.iter_mut().zip(dxv) {
        *a += b;
    }
    (dxq, dxkv)
}

struct FfnCache<R> {
    x: Vec<R>,
    pre: Vec<R>,
    act: Vec<R>,
}

fn ffn_forward<R: Real>(p: &ModelParams<R>, ids: &FfnIds, x: &[R]) -> (Vec<R>, FfnCache<R>) {
    let d = p.config.hidden_dim;
    let f = p.config.ffn_dim;
    let t = x.len() / d;
    let pre = linear(x, p.data(ids.w1), p.data(ids.b1), t, d, f);
    let act: Vec<R> = pre.iter().map(|&v| gelu(v)).collect();
    let out = linear(&act, p.data(ids.w2), p.data(ids.b2), t, f, d);
    (out, FfnCache { x: x.to_vec(), pre, act })
}

fn ffn_backward<R: Real>(p: &ModelParams<R>, ids: &FfnIds, c: &FfnCache<R>, dout: &[R], g: &mut Gradients<R>) -> Vec<R> {
    let d = p.config.hidden_dim;
    let f = p.config.ffn_dim;
    let t = c.x.len() / d;
    let mut dact = {
        let (dw, db) = pair_mut(&mut g.tensors, ids.w2, ids.b2);
        linear_backward(&c.act, dout, p.data(ids.w2), t, f, d, dw, db)
    };
    for (da, &z) in dact.iter_mut().zip(&c.pre) {
        *da *= gelu_grad(z);
    }
    let (dw, db) = pair_mut(&mut g.tensors, ids.w1, ids.b1);
    linear_backward(&c.x, &dact, p.data(ids.w1), t, d, f, dw, db)
}

fn add_into<R: Real>(x: &mut [R], y: &[R]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

struct EncBlockCache<R> {
    ln1: NormCache<R>,
    attn: AttnCache<R>,
    ln2: NormCache<R>,
    ffn: FfnCache<R>,
}

struct DecBlockCache<R> {
    ln1: NormCache<R>,
    self_attn: AttnCache<R>,
    ln2: NormCache<R>,
    cross: AttnCache<R>,
    ln3: NormCache<R>,
    ffn: FfnCache<R>,
}

struct DecoderCache<R> {
    embed: EmbedCache<R>,
    blocks: Vec<DecBlockCache<R>>,
    norm: NormCache<R>,
}

/// Activations of one forward pass, kept for the reverse pass.
pub(crate) struct ForwardCache<R> {
    embed: EmbedCache<R>,
    blocks: Vec<EncBlockCache<R>>,
    norm: NormCache<R>,
    decoder: Option<DecoderCache<R>>,
}

fn encoder_forward<R: Real>(p: &ModelParams<R>, src: &[TokenId]) -> (Vec<R>, EmbedCache<R>, Vec<EncBlockCache<R>>, NormCache<R>) {
    let lay = p.layout();
    let (mut x, embed) = embed_forward(p, src, lay.pos_emb);
    let mut blocks = Vec::with_capacity(lay.encoder.len());
    for b in &lay.encoder {
        let (a, ln1) = norm_forward(p, b.ln1, &x);
        let (att, attn) = attn_forward(p, &b.attn, &a, &a, false);
        add_into(&mut x, &att);
        let (h, ln2) = norm_forward(p, b.ln2, &x);
        let (f, ffn) = ffn_forward(p, &b.ffn, &h);
        add_into(&mut x, &f);
        blocks.push(EncBlockCache { ln1, attn, ln2, ffn });
    }
    let (out, norm) = norm_forward(p, lay.enc_norm, &x);
    (out, embed, blocks, norm)
}

fn decoder_forward<R: Real>(p: &ModelParams<R>, ids: &[TokenId], memory: &[R]) -> (Vec<R>, DecoderCache<R>) {
    let lay = p.layout();
    let pos = lay.dec_pos.expect("decoder positions");
    let (mut x, embed) = embed_forward(p, ids, pos);
    let mut blocks = Vec::with_capacity(lay.decoder.len());
    for b in &lay.decoder {
        let (a, ln1) = norm_forward(p, b.ln1, &x);
        let (att, self_attn) = attn_forward(p, &b.self_attn, &a, &a, true);
        add_into(&mut x, &att);
        let (c, ln2) = norm_forward(p, b.ln2, &x);
        let (cr, cross) = attn_forward(p, &b.cross_attn, &c, memory, false);
        add_into(&mut x, &cr);
        let (h, ln3) = norm_forward(p, b.ln3, &x);
        let (f, ffn) = ffn_forward(p, &b.ffn, &h);
        add_into(&mut x, &f);
        blocks.push(DecBlockCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ffn,
        });
    }
    let (out, norm) = norm_forward(p, lay.dec_norm.expect("decoder norm"), &x);
    (out, DecoderCache { embed, blocks, norm })
}

fn validate_input<R: Real>(p: &ModelParams<R>, input: &ModelInput<'_>) -> Result<()> {
    check_ids(p, input.source)?;
    match (p.config.arch, input.decoder_input) {
        (Architecture::Encoder, None) => Ok(()),
        (Architecture::Encoder, Some(_)) => Err(Error::InvalidArgument(
            "encoder model given a decoder input".into(),
        )),
        (Architecture::EncoderDecoder, Some(d)) => check_ids(p, d),
        (Architecture::EncoderDecoder, None) => Err(Error::InvalidArgument(
            "encoder-decoder model needs a decoder input".into(),
        )),
    }
}

pub(crate) fn forward_cached<R: Real>(p: &ModelParams<R>, input: &ModelInput<'_>) -> Result<(Vec<R>, ForwardCache<R>)> {
    validate_input(p, input)?;
    let (enc, embed, blocks, norm) = encoder_forward(p, input.source);
    match input.decoder_input {
        None => Ok((
            enc,
            ForwardCache {
                embed,
                blocks,
                norm,
                decoder: None,
            },
        )),
        Some(dec_ids) => {
            let (out, dec) = decoder_forward(p, dec_ids, &enc);
            Ok((
                out,
                ForwardCache {
                    embed,
                    blocks,
                    norm,
                    decoder: Some(dec),
                },
            ))
        }
    }
}

/// Last-layer hidden states, `[positions, h_s]` row-major. For an
/// encoder-decoder model these are the decoder states.
pub fn forward<R: Real>(p: &ModelParams<R>, input: &ModelInput<'_>) -> Result<Vec<R>> {
    forward_cached(p, input).map(|(s, _)| s)
}

/// Per-sequence forward over a batch; sequences are independent.
pub fn forward_batch<R: Real>(p: &ModelParams<R>, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<R>>> {
    use rayon::prelude::*;
    inputs.par_iter().map(|inp| forward(p, inp)).collect()
}

/// Accumulates parameter gradients given `d states`.
pub(crate) fn backward<R: Real>(p: &ModelParams<R>, cache: &ForwardCache<R>, dstates: &[R], g: &mut Gradients<R>) {
    let lay = p.layout();
    let d_enc_out = match &cache.decoder {
        None => dstates.to_vec(),
        Some(dc) => {
            let mut dx = norm_backward(p, lay.dec_norm.expect("decoder norm"), &dc.norm, dstates, g);
            let mut dmem = vec![R::ZERO; cache.embed.ids.len() * p.config.hidden_dim];
            for (b, c) in lay.decoder.iter().zip(&dc.blocks).rev() {
                let dh = ffn_backward(p, &b.ffn, &c.ffn, &dx, g);
                let dn = norm_backward(p, b.ln3, &c.ln3, &dh, g);
                add_into(&mut dx, &dn);
                let (dcq, dckv) = attn_backward(p, &b.cross_attn, &c.cross, &dx, g);
                add_into(&mut dmem, &dckv);
                let dn = norm_backward(p, b.ln2, &c.ln2, &dcq, g);
                add_into(&mut dx, &dn);
                let (dq, dkv) = attn_backward(p, &b.self_attn, &c.self_attn, &dx, g);
                let mut da = dq;
                add_into(&mut da, &dkv);
                let dn = norm_backward(p, b.ln1, &c.ln1, &da, g);
                add_into(&mut dx, &dn);
            }
            embed_backward(p, &dc.embed, lay.dec_pos.expect("decoder positions"), &dx, g);
            dmem
        }
    };
    let mut dx = norm_backward(p, lay.enc_norm, &cache.norm, &d_enc_out, g);
    for (b, c) in lay.encoder.iter().zip(&cache.blocks).rev() {
        let dh = ffn_backward(p, &b.ffn, &c.ffn, &dx, g);
        let dn = norm_backward(p, b.ln2, &c.ln2, &dh, g);
        add_into(&mut dx, &dn);
        let (dq, dkv) = attn_backward(p, &b.attn, &c.attn, &dx, g);
        let mut da = dq;
        add_into(&mut da, &dkv);
        let dn = norm_backward(p, b.ln1, &c.ln1, &da, g);
        add_into(&mut dx, &dn);
    }
    embed_backward(p, &cache.embed, lay.pos_emb, &dx, g);
}
