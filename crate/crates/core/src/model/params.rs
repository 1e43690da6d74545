use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Encoder,
    EncoderDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token embedding width `h_e`.
    pub embed_dim: usize,
    /// Model width `h_s`.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub arch: Architecture,
    pub precision: Precision,
    /// The LM head reads the token embedding table.
    pub tie_weights: bool,
    /// Adds the `h_e × h_s` projection that maps hidden states to embeddings.
    pub mimic_head: bool,
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            max_seq_len: 128,
            arch: Architecture::Encoder,
            precision: Precision::F64,
            tie_weights: true,
            mimic_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, embed_dim, ffn_dim and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderBlockIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderBlockIds {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub cross_attn: AttnIds,
    pub ln3: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub in_proj: Option<usize>,
    pub pos_emb: usize,
    pub encoder: Vec<EncoderBlockIds>,
    pub enc_norm: NormIds,
    pub dec_pos: Option<usize>,
    pub decoder: Vec<DecoderBlockIds>,
    pub dec_norm: Option<NormIds>,
    pub lm_head: Option<usize>,
    pub mimic: Option<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let mut lin = |n: &str| {
            let w = self.add(format!("{prefix}.{n}.weight"), vec![d, d], Init::Normal);
            let b = (n != "k").then(|| self.add(format!("{prefix}.{n}.bias"), vec![d], Init::Zeros));
            (w, b.unwrap_or(usize::MAX))
        };
        let (wq, bq) = lin("q");
        // no key bias: it would only shift every score of a query equally
        let (wk, _) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        AttnIds {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.fc1.weight"), vec![d, f], Init::Normal),
            b1: self.add(format!("{prefix}.fc1.bias"), vec![f], Init::Zeros),
            w2: self.add(format!("{prefix}.fc2.weight"), vec![f, d], Init::Normal),
            b2: self.add(format!("{prefix}.fc2.bias"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let (v, he, hs) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let mut b = Builder { specs: Vec::new() };
    let tok_emb = b.add("embed.tokens".into(), vec![v, he], Init::Normal);
    let in_proj = (he != hs).then(|| b.add("embed.in_proj".into(), vec![he, hs], Init::Normal));
    let pos_emb = b.add("embed.positions".into(), vec![cfg.max_seq_len, hs], Init::Normal);
    let encoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderBlockIds {
                ln1: b.norm(&format!("{p}.ln1"), hs),
                attn: b.attn(&format!("{p}.attn"), hs),
                ln2: b.norm(&format!("{p}.ln2"), hs),
                ffn: b.ffn(&format!("{p}.ffn"), hs, cfg.ffn_dim),
            }
        })
        .collect();
    let enc_norm = b.norm("encoder.norm", hs);
    let (dec_pos, decoder, dec_norm) = match cfg.arch {
        Architecture::Encoder => (None, Vec::new(), None),
        Architecture::EncoderDecoder => {
            let pos = b.add("decoder.positions".into(), vec![cfg.max_seq_len, hs], Init::Normal);
            let blocks = (0..cfg.layers)
                .map(|l| {
                    let p = format!("decoder.{l}");
                    DecoderBlockIds {
                        ln1: b.norm(&format!("{p}.ln1"), hs),
                        self_attn: b.attn(&format!("{p}.self_attn"), hs),
                        ln2: b.norm(&format!("{p}.ln2"), hs),
                        cross_attn: b.attn(&format!("{p}.cross_attn"), hs),
                        ln3: b.norm(&format!("{p}.ln3"), hs),
                        ffn: b.ffn(&format!("{p}.ffn"), hs, cfg.ffn_dim),
                    }
                })
                .collect();
            (Some(pos), blocks, Some(b.norm("decoder.norm", hs)))
        }
    };
    let lm_head = (!cfg.tie_weights).then(|| b.add("lm_head.weight".into(), vec![v, hs], Init::Normal));
    let mimic = cfg
        .mimic_head
        .then(|| b.add("mimic.weight".into(), vec![he, hs], Init::Normal));
    (
        Layout {
            tok_emb,
            in_proj,
            pos_emb,
            encoder,
            enc_norm,
            dec_pos,
            decoder,
            dec_norm,
            lm_head,
            mimic,
        },
        b.specs,
    )
}

pub const INIT_STD: f64 = 0.02;

/// Transformer weights plus the optional mimic projection.
#[derive(Debug, Clone)]
pub struct ModelParams<R> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<R>>,
    pub(crate) layout: Layout,
}

impl<R: Real> PartialEq for ModelParams<R> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl<R: Real> ModelParams<R> {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let tensors = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| R::from_f64(normal.sample(&mut rng))).collect(),
                    Init::Zeros => vec![R::ZERO; n],
                    Init::Ones => vec![R::ONE; n],
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors (checkpoint loading).
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<R>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        if specs.len() != tensors.len() {
            return Err(Error::shape(format!("{} tensors", specs.len()), tensors.len()));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(format!("{name} {shape:?}"), format!("{} {:?}", t.name, t.shape)));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            layout,
        })
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn data(&self, id: usize) -> &[R] {
        &self.tensors[id].data
    }

    /// Token embedding table `[vocab, h_e]`.
    pub fn token_embeddings(&self) -> &[R] {
        self.data(self.layout.tok_emb)
    }

    pub fn token_embeddings_mut(&mut self) -> &mut [R] {
        &mut self.tensors[self.layout.tok_emb].data
    }

    pub fn token_embedding_index(&self) -> usize {
        self.layout.tok_emb
    }

    pub fn mimic_index(&self) -> Option<usize> {
        self.layout.mimic
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Copy of these parameters with a mimic head added (fresh Gaussian
    /// init from `seed`) and every other tensor carried over.
    pub fn with_mimic_head(&self, seed: u64) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.mimic_head = true;
        let mut fresh = Self::init(&cfg, seed)?;
        for t in &mut fresh.tensors {
            if let Some(old) = self.tensor(&t.name) {
                t.data.clone_from(&old.data);
            }
        }
        Ok(fresh)
    }

    pub fn zeros_like(&self) -> Gradients<R> {
        Gradients {
            tensors: self.tensors.iter().map(|t| vec![R::ZERO; t.data.len()]).collect(),
        }
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }
}

/// One gradient buffer per parameter tensor, same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R> {
    pub tensors: Vec<Vec<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn add_assign(&mut self, other: &Gradients<R>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }
}
