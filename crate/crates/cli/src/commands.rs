use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use defemb_core::evalkit::{
    dynamics_run, emit_report, final_hidden_states, mse_distribution, probe_accuracy, render_report, train_probe, word_similarity_eval, Cell,
    DynamicsConfig, ProbeConfig, ProbeDataset, ProbeLabel, Report, ReportFormat, ScatterPoint, SimilarityDataset, Table, ZipfConfig,
};
use defemb_core::geometry::{del_direction, group_isotropy, isotropy, svd_project2d, DelDirectionConfig, EmbeddingMatrix, GroupScore};
use defemb_core::model::{checkpoint_bytes, checkpoint_from_bytes, AdamConfig, Architecture, ModelConfig, ModelParams, Precision, Real};
use defemb_core::pipeline::{
    apply_plan, build_replacement_plan, embedding_matrix, embeddings_from_bytes, embeddings_to_bytes, pretrain_toy_plm, reconstruct_all,
    train_mimic, window_means, MimicConfig, PretrainConfig, ReplacementConfig, ReplacementLock, ReplacementPlan, TrainConfig,
};
use defemb_core::prompts::{corrupt_bert, corrupt_t5, corrupted_prompts_jsonl, parse_definitions, render_full_prompt, build_full_prompt, CorruptionMode, DefinitionRecord, Phase};
use defemb_core::tokenizer::{train_bpe, TokenId, TokenizerModel};
use defemb_core::toy;
use defemb_core::vocab::{assign_groups, count_records, count_table_jsonl, count_tokens, rank_by_frequency, CountRecord, GroupAssignment, GroupBasis, Vocabulary};

use crate::manifest::Run;
use crate::{Cmd, GroupArgs, PhaseArg};

const TOY: &str = "@toy";

fn toy_words() -> String {
    let mut s = String::new();
    for i in 0..60u32 {
        let _ = writeln!(s, "{}", (i * 37 + 3) % 1000);
        let _ = writeln!(s, "{}", 1000 + i * 613);
    }
    for d in toy::definitions().iter().take(60) {
        let _ = writeln!(s, "{}", d.word);
    }
    s
}

/// Reads an input file (or bundled data for `@toy`) and records its hash.
fn load(run: &mut Run, arg: &str, path: &str) -> Result<Vec<u8>> {
    let bytes = if path == TOY {
        match arg {
            "corpus" | "task-corpus" => toy::CORPUS.as_bytes().to_vec(),
            "defs" => toy::DEFINITIONS_JSONL.as_bytes().to_vec(),
            "dataset" => toy::WORDSIM_TSV.as_bytes().to_vec(),
            "words" => toy_words().into_bytes(),
            _ => bail!("no bundled data for --{arg}"),
        }
    } else {
        std::fs::read(path).with_context(|| format!("reading --{arg} {path}"))?
    };
    run.input(arg, path, &bytes);
    Ok(bytes)
}

fn load_text(run: &mut Run, arg: &str, path: &str) -> Result<String> {
    String::from_utf8(load(run, arg, path)?).with_context(|| format!("--{arg} {path} is not UTF-8"))
}

fn load_tokenizer(run: &mut Run, path: &str) -> Result<TokenizerModel> {
    Ok(TokenizerModel::from_text(&load_text(run, "tokenizer", path)?)?)
}

fn load_emb(run: &mut Run, arg: &str, path: &str) -> Result<EmbeddingMatrix> {
    Ok(embeddings_from_bytes(&load(run, arg, path)?)?)
}

fn load_defs(run: &mut Run, path: &str) -> Result<Vec<DefinitionRecord>> {
    let text = load_text(run, "defs", path)?;
    let (recs, bad) = parse_definitions(&text);
    run.result("malformed_definition_lines", bad.iter().map(|b| b.line).collect::<Vec<_>>());
    if recs.is_empty() {
        bail!("no usable definitions in {path}");
    }
    Ok(recs)
}

fn load_counts(run: &mut Run, path: &str) -> Result<Vec<CountRecord>> {
    let text = load_text(run, "counts", path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("counts line {}", i + 1)))
        .collect()
}

enum AnyModel {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

macro_rules! with_model {
    ($m:expr, $p:ident => $body:expr) => {
        match $m {
            AnyModel::F32($p) => $body,
            AnyModel::F64($p) => $body,
        }
    };
}

fn load_model(run: &mut Run, arg: &str, path: &str) -> Result<AnyModel> {
    let bytes = load(run, arg, path)?;
    let p = checkpoint_from_bytes::<f64>(&bytes)?;
    Ok(match p.config.precision {
        Precision::F32 => AnyModel::F32(checkpoint_from_bytes(&bytes)?),
        Precision::F64 => AnyModel::F64(p),
    })
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

fn summarize(run: &mut Run, trace: &[f64]) {
    let w = window_means(trace, 100);
    run.result("steps", trace.len());
    run.result("initial_smoothed_loss", w.first());
    run.result("final_smoothed_loss", w.last());
    run.result("loss_trace", trace);
}

#[derive(Serialize, Deserialize)]
struct ReconstructionLine {
    id: TokenId,
    token: String,
    vector: Vec<f64>,
}

fn mode_for(arch: Architecture) -> CorruptionMode {
    match arch {
        Architecture::Encoder => CorruptionMode::Bert,
        Architecture::EncoderDecoder => CorruptionMode::T5,
    }
}

fn groups_for(run: &mut Run, g: &GroupArgs, rows: usize) -> Result<Option<(Vocabulary, GroupAssignment)>> {
    match (&g.counts, &g.task_corpus, &g.tokenizer) {
        (None, None, None) => Ok(None),
        (Some(c), Some(t), Some(k)) => {
            let tok = load_tokenizer(run, k)?;
            let vocab = rank_by_frequency(&load_counts(run, c)?)?;
            let task = count_tokens(&load_text(run, "task-corpus", t)?, &tok);
            if vocab.len() != rows || task.len() != rows {
                bail!("groups cover {} tokens, embeddings have {rows} rows", vocab.len());
            }
            let groups = assign_groups(&vocab, &task, GroupBasis::TaskFrequency)?;
            Ok(Some((vocab, groups)))
        }
        _ => bail!("frequency groups need --counts, --task-corpus and --tokenizer together"),
    }
}

fn isotropy_scores(e: &EmbeddingMatrix, groups: Option<&GroupAssignment>) -> Result<Vec<GroupScore>> {
    Ok(match groups {
        Some(g) => group_isotropy(e, g)?,
        None => vec![GroupScore {
            group: "all",
            members: e.rows(),
            score: Some(isotropy(e)?.score),
        }],
    })
}

fn emit(run: &mut Run, report: &Report, file: &str, format: ReportFormat) -> Result<()> {
    emit_report(report, &run.out_path(file), format)?;
    run.record(file);
    Ok(())
}

fn parse_csv_report(text: &str) -> Result<Report> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty report")?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    if rows.iter().any(|r| r.len() != header.len()) {
        bail!("ragged CSV report (quoted commas are not supported here)");
    }
    if header == ["id", "group", "x", "y"] {
        let points = rows
            .iter()
            .map(|r| {
                Ok(ScatterPoint {
                    id: r[0].parse()?,
                    group: r[1].to_string(),
                    x: r[2].parse()?,
                    y: r[3].parse()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Report::Scatter(points));
    }
    let mut t = Table::new(&header);
    for r in rows {
        t.push(
            r.iter()
                .map(|c| match (*c, c.parse::<f64>()) {
                    ("undefined", _) => Cell::Missing,
                    (_, Ok(v)) => Cell::Num(v),
                    _ => Cell::Text(c.to_string()),
                })
                .collect(),
        );
    }
    Ok(Report::Table(t))
}

fn pretrain_with<R: Real>(corpus: &str, tok: &TokenizerModel, cfg: &PretrainConfig) -> Result<(Vec<u8>, EmbeddingMatrix, Vec<f64>)> {
    let out = pretrain_toy_plm::<R>(corpus, tok, cfg)?;
    Ok((checkpoint_bytes(&out.params)?, embedding_matrix(&out.params), out.trace))
}

pub fn execute(cmd: &Cmd, mut run: Run, seed: u64) -> Result<PathBuf> {
    match cmd {
        Cmd::TokenizerTrain {
            corpus,
            vocab_size,
            sentinels,
        } => {
            let text = load_text(&mut run, "corpus", corpus)?;
            let tok = train_bpe(&text, *vocab_size, *sentinels)?;
            run.write("tokenizer.txt", tok.to_text())?;
            let counts = count_tokens(&text, &tok);
            run.write("counts.jsonl", count_table_jsonl(&count_records(&tok, &counts)))?;
            run.result("vocab_size", tok.vocab_size());
            run.result("merges", tok.merges().len());
        }
        Cmd::Pretrain {
            tokenizer,
            corpus,
            arch,
            embed_dim,
            hidden_dim,
            layers,
            heads,
            ffn_dim,
            max_seq_len,
            precision,
            tie_weights,
            mask_prob,
            train,
        } => {
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let text = load_text(&mut run, "corpus", corpus)?;
            let model = ModelConfig {
                vocab_size: tok.vocab_size(),
                embed_dim: *embed_dim,
                hidden_dim: *hidden_dim,
                layers: *layers,
                heads: *heads,
                ffn_dim: *ffn_dim,
                max_seq_len: *max_seq_len,
                arch: (*arch).into(),
                precision: (*precision).into(),
                tie_weights: *tie_weights,
                mimic_head: false,
            };
            let cfg = PretrainConfig {
                model,
                train: TrainConfig {
                    steps: train.steps,
                    batch_size: train.batch_size,
                    adam: AdamConfig {
                        base_lr: train.lr,
                        warmup: train.warmup,
                        ..AdamConfig::default()
                    },
                    seed,
                },
                mask_prob: *mask_prob,
            };
            let (ckpt, e, trace) = match cfg.model.precision {
                Precision::F32 => pretrain_with::<f32>(&text, &tok, &cfg)?,
                Precision::F64 => pretrain_with::<f64>(&text, &tok, &cfg)?,
            };
            run.write("plm.ckpt", ckpt)?;
            run.write("embeddings.emb", embeddings_to_bytes(&e))?;
            run.write("loss.csv", loss_csv(&trace))?;
            summarize(&mut run, &trace);
        }
        Cmd::PromptsBuild {
            tokenizer,
            defs,
            mode,
            phase,
        } => {
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let recs = load_defs(&mut run, defs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut full = String::new();
            let mut corrupted = Vec::new();
            let mut failed = Vec::new();
            for (i, r) in recs.iter().enumerate() {
                full.push_str(&render_full_prompt(r));
                full.push('\n');
                let p = build_full_prompt(r, &tok)?;
                let c = match (CorruptionMode::from(*mode), phase) {
                    (CorruptionMode::T5, _) => corrupt_t5(&p, &tok).map(|c| vec![c]),
                    (CorruptionMode::Bert, PhaseArg::Train) => corrupt_bert(&p, &tok, &mut rng, Phase::Train),
                    (CorruptionMode::Bert, PhaseArg::Infer) => corrupt_bert(&p, &tok, &mut rng, Phase::Infer),
                };
                match c {
                    Ok(c) => corrupted.extend(c),
                    Err(e) => failed.push((i, e.to_string())),
                }
            }
            run.write("prompts.txt", full)?;
            run.write("corrupted.jsonl", corrupted_prompts_jsonl(&corrupted))?;
            run.result("records", recs.len());
            run.result("corrupted_prompts", corrupted.len());
            run.result("failed_records", failed);
        }
        Cmd::MimicTrain {
            plm,
            tokenizer,
            defs,
            freeze_embeddings,
            steps,
            batch_size,
            lr,
            warmup,
        } => {
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let recs = load_defs(&mut run, defs)?;
            let model = load_model(&mut run, "plm", plm)?;
            let train = TrainConfig {
                steps: *steps,
                batch_size: *batch_size,
                adam: AdamConfig {
                    base_lr: *lr,
                    warmup: *warmup,
                    ..AdamConfig::default()
                },
                seed,
            };
            let (ckpt, trace, mse, skipped) = with_model!(&model, p => {
                let mut cfg = MimicConfig::for_arch(p.config.arch, train);
                if let Some(f) = freeze_embeddings {
                    cfg.freeze_embeddings = *f;
                }
                let out = train_mimic(p, &recs, &tok, &cfg)?;
                (checkpoint_bytes(&out.params)?, out.trace, out.per_token_mse, out.skipped_records)
            });
            run.write("defemb.ckpt", ckpt)?;
            run.write("loss.csv", loss_csv(&trace))?;
            let mut s = String::from("id,token,mse\n");
            for (id, m) in &mse {
                let t = tok.token_string(*id).unwrap_or_default().replace(',', "\\,");
                let _ = writeln!(s, "{id},{t},{m}");
            }
            run.write("per_token_mse.csv", s)?;
            summarize(&mut run, &trace);
            run.result("skipped_records", skipped);
        }
        Cmd::Reconstruct { defemb, tokenizer, defs } => {
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let recs = load_defs(&mut run, defs)?;
            let model = load_model(&mut run, "defemb", defemb)?;
            let rec = with_model!(&model, p => {
                if !p.config.mimic_head {
                    bail!("--defemb checkpoint has no mimic head; run mimic-train first");
                }
                let max = p.config.max_seq_len;
                let usable: Vec<DefinitionRecord> = recs
                    .iter()
                    .filter(|r| build_full_prompt(r, &tok).map_or(false, |q| q.token_ids.len() <= max))
                    .cloned()
                    .collect();
                run.result("skipped_records", recs.len() - usable.len());
                reconstruct_all(p, &usable, &tok, mode_for(p.config.arch))?
            });
            let mut s = String::new();
            for (id, v) in &rec {
                let line = ReconstructionLine {
                    id: *id,
                    token: tok.token_string(*id).unwrap_or_default(),
                    vector: v.clone(),
                };
                s.push_str(&serde_json::to_string(&line)?);
                s.push('\n');
            }
            run.write("reconstructions.jsonl", s)?;
            run.result("tokens", rec.len());
        }
        Cmd::Plan {
            tokenizer,
            counts,
            task_corpus,
            alpha,
            strategy,
            top_min_index,
            backfill,
            count_after_exclusions,
            reconstructions,
            lock,
        } => {
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let vocab = rank_by_frequency(&load_counts(&mut run, counts)?)?;
            let task = count_tokens(&load_text(&mut run, "task-corpus", task_corpus)?, &tok);
            let exclusions: BTreeSet<TokenId> = match reconstructions {
                Some(p) => {
                    let have = read_reconstructions(&mut run, p)?;
                    (0..vocab.len() as TokenId).filter(|id| !have.contains_key(id)).collect()
                }
                None => BTreeSet::new(),
            };
            let lock = match lock {
                Some(p) => serde_json::from_slice(&load(&mut run, "lock", p)?)?,
                None => ReplacementLock::default(),
            };
            let cfg = ReplacementConfig {
                alpha: *alpha,
                strategy: (*strategy).into(),
                exclusions,
                seed,
                top_min_index: *top_min_index,
                backfill: *backfill,
                count_after_exclusions: *count_after_exclusions,
            };
            let plan = build_replacement_plan(&vocab, &task, &cfg, &lock)?;
            run.write("plan.json", serde_json::to_string_pretty(&plan)? + "\n")?;
            run.result("target_count", plan.target_count);
            run.result("selected", &plan.selected);
            run.result("skipped", plan.skipped.len());
        }
        Cmd::Apply {
            emb,
            plan,
            reconstructions,
            lock,
        } => {
            let e = load_emb(&mut run, "emb", emb)?;
            let plan: ReplacementPlan = serde_json::from_slice(&load(&mut run, "plan", plan)?)?;
            let recs = read_reconstructions(&mut run, reconstructions)?;
            let mut lock: ReplacementLock = match lock {
                Some(p) => serde_json::from_slice(&load(&mut run, "lock", p)?)?,
                None => ReplacementLock::default(),
            };
            let rep = apply_plan(&e, &plan, &recs, &mut lock)?;
            run.write("embeddings.emb", embeddings_to_bytes(&rep.matrix))?;
            run.write("lock.json", serde_json::to_string_pretty(&lock)? + "\n")?;
            let ids = serde_json::json!({ "replaced": rep.replaced, "already_locked": rep.locked });
            run.write("apply.json", serde_json::to_string_pretty(&ids)? + "\n")?;
            run.result("replaced", rep.replaced.len());
            run.result("already_locked", rep.locked.len());
        }
        Cmd::Isotropy { emb, groups } => {
            let e = load_emb(&mut run, "emb", emb)?;
            let g = groups_for(&mut run, groups, e.rows())?;
            let scores = isotropy_scores(&e, g.as_ref().map(|(_, g)| g))?;
            let report = Report::Table(Table::isotropy(&scores));
            emit(&mut run, &report, "isotropy.csv", ReportFormat::Csv)?;
            emit(&mut run, &report, "isotropy.json", ReportFormat::Json)?;
            run.result("all", scores.last().and_then(|s| s.score));
        }
        Cmd::Deldirection { emb, beta } => {
            let e = load_emb(&mut run, "emb", emb)?;
            let cfg = match beta {
                Some(b) => DelDirectionConfig { beta: *b },
                None => DelDirectionConfig::for_dim(e.dim()),
            };
            let after = del_direction(&e, cfg)?;
            run.write("embeddings.emb", embeddings_to_bytes(&after))?;
            let mut t = Table::new(&["stage", "score"]);
            t.push(vec![Cell::Text("before".into()), Cell::Num(isotropy(&e)?.score)]);
            t.push(vec![Cell::Text("after".into()), Cell::Num(isotropy(&after)?.score)]);
            emit(&mut run, &Report::Table(t), "isotropy.csv", ReportFormat::Csv)?;
            run.result("beta", cfg.beta);
        }
        Cmd::Project { emb, groups } => {
            let e = load_emb(&mut run, "emb", emb)?;
            let g = groups_for(&mut run, groups, e.rows())?;
            let proj = svd_project2d(&e)?;
            let report = Report::projection(&proj.coords, |id| match &g {
                Some((_, g)) => g.label(id).name().to_string(),
                None => "all".to_string(),
            });
            emit(&mut run, &report, "projection.csv", ReportFormat::Csv)?;
            emit(&mut run, &report, "projection.svg", ReportFormat::SvgScatter)?;
            run.result("singular_values", proj.singular_values);
        }
        Cmd::Wordsim {
            emb,
            tokenizer,
            dataset,
            metric,
        } => {
            let e = load_emb(&mut run, "emb", emb)?;
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let ds = SimilarityDataset::parse_tsv(&load_text(&mut run, "dataset", dataset)?)?;
            let r = word_similarity_eval(&e, &tok, &ds, (*metric).into())?;
            let mut t = Table::new(&["word_a", "word_b", "gold", "score"]);
            for &(i, s) in &r.scores {
                let p = &ds.pairs[i];
                t.push(vec![Cell::Text(p.a.clone()), Cell::Text(p.b.clone()), Cell::Num(p.gold), Cell::Num(s)]);
            }
            emit(&mut run, &Report::Table(t), "wordsim.csv", ReportFormat::Csv)?;
            run.result("spearman", r.correlation);
            run.result("scored_pairs", r.scores.len());
            run.result("skipped_pairs", &r.skipped);
        }
        Cmd::MseDist {
            pre,
            def,
            bins,
            bands,
            counts,
        } => {
            let a = load_emb(&mut run, "pre", pre)?;
            let b = load_emb(&mut run, "def", def)?;
            let vocab = match counts {
                Some(c) => Some(rank_by_frequency(&load_counts(&mut run, c)?)?),
                None => None,
            };
            let d = mse_distribution(&a, &b, bins, bands, vocab.as_ref())?;
            emit(&mut run, &Report::Table(Table::mse_bins(&d)), "mse_bins.csv", ReportFormat::Csv)?;
            emit(&mut run, &Report::Table(Table::mse_bands(&d)), "mse_bands.csv", ReportFormat::Csv)?;
            let changed = d.per_token.iter().filter(|&&m| m > 0.0).count();
            run.result("tokens", d.per_token.len());
            run.result("changed_tokens", changed);
        }
        Cmd::Probe {
            model,
            tokenizer,
            words,
            test_fraction,
            epochs,
            lr,
            hidden,
        } => {
            if !(0.0..1.0).contains(test_fraction) {
                bail!("--test-fraction must be in [0, 1)");
            }
            let tok = load_tokenizer(&mut run, tokenizer)?;
            let m = load_model(&mut run, "model", model)?;
            let mut list: Vec<String> = load_text(&mut run, "words", words)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            list.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let feats = with_model!(&m, p => final_hidden_states(p, &tok, &list)?);
            let labels: Vec<ProbeLabel> = list.iter().map(|w| ProbeLabel::for_word(w)).collect();
            let n_test = ((list.len() as f64) * test_fraction).round() as usize;
            let split = list.len() - n_test;
            let train = ProbeDataset {
                features: feats[..split].to_vec(),
                labels: labels[..split].to_vec(),
            };
            let test = ProbeDataset {
                features: feats[split..].to_vec(),
                labels: labels[split..].to_vec(),
            };
            let cfg = ProbeConfig {
                hidden: *hidden,
                epochs: *epochs,
                lr: *lr,
                seed,
                ..ProbeConfig::default()
            };
            let probe = train_probe(&train, &cfg)?;
            run.write("probe.json", serde_json::to_string(&probe)? + "\n")?;
            run.result("train_accuracy", probe_accuracy(&probe, &train)?);
            if !test.is_empty() {
                run.result("test_accuracy", probe_accuracy(&probe, &test)?);
            }
            run.result("train_size", train.len());
            run.result("test_size", test.len());
        }
        Cmd::Dynamics {
            tokenizer,
            init,
            weight_tying,
            steps,
            snapshot_every,
            pretrain_steps,
            exponent,
            task_types,
            pretrain_sequences,
            task_sequences,
            seq_len,
            embed_dim,
            hidden_dim,
            layers,
            batch_size,
            lr,
        } => {
            let tok = match tokenizer {
                Some(p) => load_tokenizer(&mut run, p)?,
                None => TokenizerModel::bytes_only(0),
            };
            let mut cfg = DynamicsConfig::new(&tok);
            cfg.init = (*init).into();
            cfg.weight_tying = *weight_tying;
            cfg.steps = *steps;
            cfg.snapshot_every = *snapshot_every;
            cfg.pretrain_steps = *pretrain_steps;
            cfg.batch_size = *batch_size;
            cfg.seed = seed;
            cfg.adam.base_lr = *lr;
            cfg.model.embed_dim = *embed_dim;
            cfg.model.hidden_dim = *hidden_dim;
            cfg.model.layers = *layers;
            cfg.model.ffn_dim = 2 * *hidden_dim;
            cfg.corpus = ZipfConfig {
                exponent: *exponent,
                types: 0,
                task_types: *task_types,
                pretrain_sequences: *pretrain_sequences,
                task_sequences: *task_sequences,
                seq_len: *seq_len,
                seed,
            };
            let r = dynamics_run(&cfg, &tok)?;
            let mut t = Table::new(&[
                "step",
                "isotropy",
                "appearing_cosine",
                "frequent_drift",
                "medium_drift",
                "rare_drift",
                "non_appearing_drift",
            ]);
            for s in &r.snapshots {
                let mut row = vec![Cell::Int(s.step as u64), Cell::Num(s.isotropy), Cell::Num(s.appearing_cosine.mean)];
                row.extend(s.drift.iter().map(|d| Cell::from(d.mean_displacement)));
                t.push(row);
            }
            emit(&mut run, &Report::Table(t), "dynamics.csv", ReportFormat::Csv)?;
            let last = r.snapshots.last().expect("step-0 snapshot");
            let proj = Report::projection(&last.projection, |id| r.groups.label(id).name().to_string());
            emit(&mut run, &proj, "projection_final.csv", ReportFormat::Csv)?;
            emit(&mut run, &proj, "projection_final.svg", ReportFormat::SvgScatter)?;
            run.write("loss.csv", loss_csv(&r.trace))?;
            run.write("embeddings_final.emb", embeddings_to_bytes(&last.embeddings))?;
            let first = &r.snapshots[0];
            run.result("initial_appearing_cosine", first.appearing_cosine.mean);
            run.result("final_appearing_cosine", last.appearing_cosine.mean);
        }
        Cmd::Report { input, format } => {
            let text = load_text(&mut run, "input", input)?;
            let report = parse_csv_report(&text)?;
            let format: ReportFormat = (*format).into();
            let stem = std::path::Path::new(input)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report")
                .to_string();
            let file = format!("{stem}.{}", format.extension());
            run.write(&file, render_report(&report, format)?)?;
        }
    }
    run.finish()
}

fn read_reconstructions(run: &mut Run, path: &str) -> Result<BTreeMap<TokenId, Vec<f64>>> {
    let text = load_text(run, "reconstructions", path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: ReconstructionLine = serde_json::from_str(l)?;
            Ok((r.id, r.vector))
        })
        .collect()
}
