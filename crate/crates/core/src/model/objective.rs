use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{add_matmul_tn, matmul, matmul_nt};
use super::params::{Gradients, ModelParams};
use super::real::Real;
use super::transformer::{backward, forward_cached, ModelInput};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaskedLm,
    MimicMse,
}

/// Supervision attached to output positions of one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `(position, gold token)`; cross-entropy over the vocabulary.
    Lm(Vec<(usize, TokenId)>),
    /// `(position, target embedding)`; squared error of the mimic projection.
    Mimic(Vec<(usize, Vec<f64>)>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Lm(t) => t.len(),
            Targets::Mimic(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub decoder_input: Option<Vec<TokenId>>,
    pub targets: Targets,
}

impl Example {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            source: &self.source,
            decoder_input: self.decoder_input.as_deref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<R> {
    pub loss: f64,
    pub grads: Gradients<R>,
    /// Indices of examples without any supervised position.
    pub skipped: Vec<usize>,
}

fn gather<R: Real>(states: &[R], positions: &[usize], d: usize) -> Result<Vec<R>> {
    let rows = states.len() / d;
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        if p >= rows {
            return Err(Error::InvalidArgument(format!("target position {p} outside {rows} states")));
        }
        out.extend_from_slice(&states[p * d..(p + 1) * d]);
    }
    Ok(out)
}

fn scatter<R: Real>(ds: &mut [R], positions: &[usize], rows: &[R], d: usize) {
    for (r, &p) in positions.iter().enumerate() {
        for (a, &b) in ds[p * d..(p + 1) * d].iter_mut().zip(&rows[r * d..(r + 1) * d]) {
            *a += b;
        }
    }
}

/// Vocabulary logits for hidden rows `h [n, h_s]`.
pub fn lm_logits<R: Real>(p: &ModelParams<R>, h: &[R]) -> Vec<R> {
    let cfg = &p.config;
    let n = h.len() / cfg.hidden_dim;
    let lay = p.layout();
    match lay.lm_head {
        Some(id) => matmul_nt(h, p.data(id), n, cfg.hidden_dim, cfg.vocab_size),
        None => {
            let z = match lay.in_proj {
                Some(pid) => matmul_nt(h, p.data(pid), n, cfg.hidden_dim, cfg.embed_dim),
                None => h.to_vec(),
            };
            matmul_nt(&z, p.data(lay.tok_emb), n, cfg.embed_dim, cfg.vocab_size)
        }
    }
}

fn lm_head_backward<R: Real>(p: &ModelParams<R>, h: &[R], dlogits: &[R], g: &mut Gradients<R>) -> Vec<R> {
    let cfg = &p.config;
    let (hs, he, v) = (cfg.hidden_dim, cfg.embed_dim, cfg.vocab_size);
    let n = h.len() / hs;
    let lay = p.layout();
    match lay.lm_head {
        Some(id) => {
            add_matmul_tn(&mut g.tensors[id], dlogits, h, n, v, hs);
            matmul(dlogits, p.data(id), n, v, hs)
        }
        None => {
            let z = match lay.in_proj {
                Some(pid) => matmul_nt(h, p.data(pid), n, hs, he),
                None => h.to_vec(),
            };
            add_matmul_tn(&mut g.tensors[lay.tok_emb], dlogits, &z, n, v, he);
            let dz = matmul(dlogits, p.data(lay.tok_emb), n, v, he);
            match lay.in_proj {
                Some(pid) => {
                    add_matmul_tn(&mut g.tensors[pid], &dz, h, n, he, hs);
                    matmul(&dz, p.data(pid), n, he, hs)
                }
                None => dz,
            }
        }
    }
}

/// `ẽ = W s` for hidden rows `s [n, h_s]`, giving `[n, h_e]`.
pub fn mimic_project<R: Real>(p: &ModelParams<R>, s: &[R]) -> Result<Vec<R>> {
    let cfg = &p.config;
    let id = p
        .layout()
        .mimic
        .ok_or_else(|| Error::InvalidArgument("model has no mimic head".into()))?;
    Ok(matmul_nt(s, p.data(id), s.len() / cfg.hidden_dim, cfg.hidden_dim, cfg.embed_dim))
}

fn check_objective(ex: &Example, objective: Objective) -> Result<()> {
    match (&ex.targets, objective) {
        (Targets::Lm(_), Objective::MaskedLm) | (Targets::Mimic(_), Objective::MimicMse) => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "example targets do not match objective {objective:?}"
        ))),
    }
}

/// Loss contribution (already divided by `denom`) and its gradients.
fn example_loss<R: Real>(p: &ModelParams<R>, ex: &Example, denom: f64, want_grads: bool) -> Result<(f64, Option<Gradients<R>>)> {
    let d = p.config.hidden_dim;
    let (states, cache) = forward_cached(p, &ex.input())?;
    let mut dstates = vec![R::ZERO; states.len()];
    let loss;
    let mut grads = want_grads.then(|| p.zeros_like());
    match &ex.targets {
        Targets::Lm(t) => {
            let positions: Vec<usize> = t.iter().map(|&(q, _)| q).collect();
            let h = gather(&states, &positions, d)?;
            let logits = lm_logits(p, &h);
            let v = p.config.vocab_size;
            let mut total = 0.0;
            let mut dlogits = vec![R::ZERO; logits.len()];
            for (r, &(_, gold)) in t.iter().enumerate() {
                let gold = gold as usize;
                if gold >= v {
                    return Err(Error::TokenOutOfRange {
                        id: gold as u32,
                        position: r,
                        vocab_size: v,
                    });
                }
                let row = &logits[r * v..(r + 1) * v];
                let max = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x.to_f64() - max).exp()).sum();
                let lse = max + z.ln();
                total += lse - row[gold].to_f64();
                for (j, dl) in dlogits[r * v..(r + 1) * v].iter_mut().enumerate() {
                    let pj = (row[j].to_f64() - lse).exp();
                    let onehot = if j == gold { 1.0 } else { 0.0 };
                    *dl = R::from_f64((pj - onehot) / denom);
                }
            }
            loss = total / denom;
            if let Some(g) = grads.as_mut() {
                let dh = lm_head_backward(p, &h, &dlogits, g);
                scatter(&mut dstates, &positions, &dh, d);
            }
        }
        Targets::Mimic(t) => {
            let he = p.config.embed_dim;
            let positions: Vec<usize> = t.iter().map(|(q, _)| *q).collect();
            let s = gather(&states, &positions, d)?;
            let pred = mimic_project(p, &s)?;
            let scale = denom * t.len() as f64;
            let mut total = 0.0;
            let mut dpred = vec![R::ZERO; pred.len()];
            for (r, (_, target)) in t.iter().enumerate() {
                if target.len() != he {
                    return Err(Error::shape(he, target.len()));
                }
                for a in 0..he {
                    let diff = pred[r * he + a].to_f64() - target[a];
                    total += diff * diff;
                    dpred[r * he + a] = R::from_f64(2.0 * diff / scale);
                }
            }
            loss = total / scale;
            if let Some(g) = grads.as_mut() {
                let id = p.layout().mimic.expect("checked by mimic_project");
                add_matmul_tn(&mut g.tensors[id], &dpred, &s, t.len(), he, d);
                let ds = matmul(&dpred, p.data(id), t.len(), he, d);
                scatter(&mut dstates, &positions, &ds, d);
            }
        }
    }
    if let Some(g) = grads.as_mut() {
        backward(p, &cache, &dstates, g);
    }
    Ok((loss, grads))
}

fn batch_weights(batch: &[Example], objective: Objective) -> Result<(f64, Vec<usize>)> {
    for ex in batch {
        check_objective(ex, objective)?;
    }
    let skipped: Vec<usize> = batch
        .iter()
        .enumerate()
        .filter(|(_, e)| e.targets.is_empty())
        .map(|(i, _)| i)
        .collect();
    if skipped.len() == batch.len() {
        return Err(Error::NoCorruptedTokens);
    }
    let denom = match objective {
        Objective::MaskedLm => batch.iter().map(|e| e.targets.len()).sum::<usize>() as f64,
        Objective::MimicMse => (batch.len() - skipped.len()) as f64,
    };
    Ok((denom, skipped))
}

/// Masked LM: mean cross-entropy over every target position in the batch.
/// Mimic: mean over examples of the mean squared error over each example's
/// corrupted tokens. Examples with no targets are skipped and reported.
pub fn loss_and_grads<R: Real>(p: &ModelParams<R>, batch: &[Example], objective: Objective) -> Result<LossOutput<R>> {
    let (denom, skipped) = batch_weights(batch, objective)?;
    let parts: Vec<(f64, Gradients<R>)> = batch
        .par_iter()
        .filter(|e| !e.targets.is_empty())
        .map(|e| example_loss(p, e, denom, true).map(|(l, g)| (l, g.expect("requested"))))
        .collect::<Result<_>>()?;
    let mut grads = p.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grads.add_assign(g);
    }
    Ok(LossOutput { loss, grads, skipped })
}

pub fn loss<R: Real>(p: &ModelParams<R>, batch: &[Example], objective: Objective) -> Result<f64> {
    let (denom, _) = batch_weights(batch, objective)?;
    let parts: Vec<f64> = batch
        .par_iter()
        .filter(|e| !e.targets.is_empty())
        .map(|e| example_loss(p, e, denom, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_values: (f64, f64),
}

pub const GRAD_CHECK_MIN_COORDS: usize = 200;

/// Ridders' extrapolation of central differences `(f(h) - f(-h)) / 2h`.
/// Returns the estimate and its error estimate.
fn ridders(h0: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut tab = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    tab[0][0] = (f(h)? - f(-h)?) / (2.0 * h);
    let mut best = tab[0][0];
    let mut err = f64::INFINITY;
    for i in 1..NTAB {
        h /= CON;
        tab[0][i] = (f(h)? - f(-h)?) / (2.0 * h);
        let mut fac = CON2;
        for j in 1..=i {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (tab[j][i] - tab[j - 1][i]).abs().max((tab[j][i] - tab[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = tab[j][i];
            }
        }
        if (tab[i][i] - tab[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((best, err))
}

/// Ridders from `h0`, `h0/10` and `h0/100`, keeping the estimate with the
/// smallest error. A single start can stop early on strongly curved losses.
fn numeric_derivative(h0: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = (0.0, f64::INFINITY);
    for h in [h0, h0 / 10.0, h0 / 100.0] {
        let r = ridders(h, &mut f)?;
        if r.1 < best.1 {
            best = r;
        }
    }
    Ok(best.0)
}

/// Compares analytic gradients with central differences on a random
/// subset of coordinates. Differences start at steps `epsilon`,
/// `epsilon/10` and `epsilon/100` and are refined by Richardson
/// extrapolation over shrinking steps. The per-coordinate error is relative, or
/// absolute when both values are below `1e-8` in magnitude.
pub fn grad_check<R: Real>(
    p: &ModelParams<R>,
    batch: &[Example],
    objective: Objective,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = loss_and_grads(p, batch, objective)?.grads;
    let total = p.num_parameters();
    let want = coords.max(GRAD_CHECK_MIN_COORDS).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, total, want).into_vec();
    picks.sort_unstable();
    let mut offsets = Vec::with_capacity(p.tensors.len());
    let mut acc = 0;
    for t in &p.tensors {
        offsets.push(acc);
        acc += t.data.len();
    }
    // probe the loss in f64 so the differences measure the analytic
    // gradient and not the working precision
    let mut work: ModelParams<f64> = p.cast();
    let mut report = GradCheckReport {
        max_error: 0.0,
        checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    for flat in picks {
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[ti];
        let orig = work.tensors[ti].data[i];
        let numeric = numeric_derivative(epsilon, |h| {
            work.tensors[ti].data[i] = orig + h;
            loss(&work, batch, objective)
        })?;
        work.tensors[ti].data[i] = orig;
        let a = analytic.tensors[ti][i].to_f64();
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-8 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        report.checked += 1;
        if report.worst.is_none() || err > report.max_error {
            report.max_error = err;
            report.worst = Some((p.tensors[ti].name.clone(), i));
            report.worst_values = (a, numeric);
        }
    }
    Ok(report)
}
