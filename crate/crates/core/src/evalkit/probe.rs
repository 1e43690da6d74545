use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelInput, ModelParams, Real};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLabel {
    NumericLt1000,
    NumericGt1000,
    Other,
}

impl ProbeLabel {
    pub const ALL: [ProbeLabel; 3] = [ProbeLabel::NumericLt1000, ProbeLabel::NumericGt1000, ProbeLabel::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Numbers may use `,` as a thousands separator. Exactly 1000 counts
    /// as the upper class.
    pub fn for_word(word: &str) -> Self {
        let w = word.trim().replace(',', "");
        let numeric = !w.is_empty() && w.chars().all(|c| c.is_ascii_digit() || c == '.') && w.chars().filter(|&c| c == '.').count() <= 1;
        match w.parse::<f64>() {
            Ok(v) if numeric && v < 1000.0 => ProbeLabel::NumericLt1000,
            Ok(_) if numeric => ProbeLabel::NumericGt1000,
            _ => ProbeLabel::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<ProbeLabel>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self) -> Result<usize> {
        if self.features.len() != self.labels.len() {
            return Err(Error::shape(self.labels.len(), self.features.len()));
        }
        let d = self.features.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::InvalidArgument("empty probe dataset".into()));
        }
        if let Some(bad) = self.features.iter().find(|f| f.len() != d) {
            return Err(Error::shape(d, bad.len()));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Hidden layer width; 0 means the input width.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 0,
            epochs: 200,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// `softmax(W2 tanh(W1 x + b1) + b2)` over the three labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub input: usize,
    pub hidden: usize,
    /// `[hidden, input]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[3, hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Probe {
    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let w = &self.w1[j * self.input..(j + 1) * self.input];
                (self.b1[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn logits(&self, h: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            *o = self.b2[c] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> ProbeLabel {
        let l = self.logits(&self.hidden_act(x));
        let best = (0..3).fold(0, |b, c| if l[c] > l[b] { c } else { b });
        ProbeLabel::ALL[best]
    }
}

fn softmax3(l: [f64; 3]) -> [f64; 3] {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn update(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2) = (0.9f64, 0.999f64);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Minibatch Adam on cross-entropy; deterministic per seed.
pub fn train_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<Probe> {
    let d = ds.check()?;
    let mut classes: Vec<ProbeLabel> = ds.labels.clone();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let h = if cfg.hidden == 0 { d } else { cfg.hidden };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
    let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("valid std");
    let mut probe = Probe {
        input: d,
        hidden: h,
        w1: (0..h * d).map(|_| n1.sample(&mut rng)).collect(),
        b1: vec![0.0; h],
        w2: (0..3 * h).map(|_| n2.sample(&mut rng)).collect(),
        b2: vec![0.0; 3],
    };
    let sizes = [h * d, h, 3 * h, 3];
    let mut opts: Vec<Adam> = sizes
        .iter()
        .map(|&n| Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
        .collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut g1 = vec![0.0; h * d];
            let mut gb1 = vec![0.0; h];
            let mut g2 = vec![0.0; 3 * h];
            let mut gb2 = vec![0.0; 3];
            for &i in chunk {
                let x = &ds.features[i];
                let a = probe.hidden_act(x);
                let mut dl = softmax3(probe.logits(&a));
                dl[ds.labels[i].index()] -= 1.0;
                let mut da = vec![0.0; h];
                for c in 0..3 {
                    gb2[c] += dl[c];
                    for j in 0..h {
                        g2[c * h + j] += dl[c] * a[j];
                        da[j] += dl[c] * probe.w2[c * h + j];
                    }
                }
                for j in 0..h {
                    let dz = da[j] * (1.0 - a[j] * a[j]);
                    gb1[j] += dz;
                    for (k, xv) in x.iter().enumerate() {
                        g1[j * d + k] += dz * xv;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for (o, (p, g)) in opts.iter_mut().zip([
                (&mut probe.w1, &mut g1),
                (&mut probe.b1, &mut gb1),
                (&mut probe.w2, &mut g2),
                (&mut probe.b2, &mut gb2),
            ]) {
                g.iter_mut().for_each(|v| *v *= scale);
                o.t += 1;
                o.update(p, g, cfg.lr);
            }
        }
    }
    Ok(probe)
}

pub fn probe_accuracy(probe: &Probe, ds: &ProbeDataset) -> Result<f64> {
    let d = ds.check()?;
    if d != probe.input {
        return Err(Error::shape(probe.input, d));
    }
    let hits = ds
        .features
        .iter()
        .zip(&ds.labels)
        .filter(|(x, &y)| probe.predict(x) == y)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Last-layer hidden state at the final position for each word, fed as
/// `" word"`. Encoder-decoder models receive the tokens on both sides and
/// the decoder's final state is used.
pub fn final_hidden_states<R: Real>(params: &ModelParams<R>, tok: &TokenizerModel, words: &[String]) -> Result<Vec<Vec<f64>>> {
    let d = params.config.hidden_dim;
    words
        .iter()
        .map(|w| {
            let ids = tok.encode(&format!(" {w}"));
            let input = if params.config.arch == crate::model::Architecture::Encoder {
                ModelInput::encoder(&ids)
            } else {
                ModelInput::seq2seq(&ids, &ids)
            };
            let s = forward(params, &input)?;
            let last = s.len() / d - 1;
            Ok(s[last * d..].iter().map(|v| v.to_f64()).collect())
        })
        .collect()
}
