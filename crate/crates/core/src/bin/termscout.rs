//! Command-line entry point for the terminology-presence retrieval
//! engine: data generation, curriculum training, evaluation, retrieval,
//! latency benchmarking, ablations, prompt assembly, and gradient
//! verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use termscout::baseline::{bench_cosine, cosine_retrieve, DenseIndex};
use termscout::config::EngineConfig;
use termscout::corpus::{
    generate_bank, generate_distractors, generate_utterances, hash_files, read_bank, read_corpus,
    read_features, write_bank, write_corpus, Corpus, EmbeddingTable, SpeechFeatures, TermBank,
    ToyEncoderConfig,
};
use termscout::evalbench::{
    ablation_rows_csv, ablation_rows_markdown, evaluate, evaluate_cosine, recall_at_k_avg,
    recall_reports_csv, recall_reports_markdown, sweep_bank_size, sweep_rows_csv, AblationArm,
    Averaging, DEFAULT_KS,
};
use termscout::retriever::{gradcheck, load_checkpoint, save_checkpoint, PoolingMode};
use termscout::seeds;
use termscout::serving::{
    bench_bank, bench_rows_csv, build_prompt, retrieve, PromptTask, PromptTemplate,
    RetrievalResult, RetrievedEntry, TermStyle, Timing,
};
use termscout::training::{run_curriculum, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "termscout",
    version,
    about = "Terminology-presence retrieval: cross-attention term scoring, curriculum training, Top-k serving"
)]
struct Cli {
    /// Engine config file (TOML); flags override file values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Engine-level overrides shared by most subcommands.
#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Embedding dimension d (default 64).
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Attention heads H (default 8).
    #[arg(long)]
    heads: Option<usize>,
    /// Attention-weight dropout rate (default 0.1, train only).
    #[arg(long)]
    dropout_p: Option<f32>,
    /// Pooling denominator epsilon (default 1e-6).
    #[arg(long)]
    pooling_epsilon: Option<f32>,
    /// Root seed; all randomness derives from it (default 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus splits, term bank, and distractors.
    GenData {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for manifests, features, and banks.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train_utts: usize,
        #[arg(long, default_value_t = 200)]
        val_utts: usize,
        #[arg(long, default_value_t = 200)]
        test_utts: usize,
        #[arg(long, default_value_t = 583)]
        bank_size: usize,
        /// Distractor pool size for bank-growth sweeps.
        #[arg(long, default_value_t = 9417)]
        distractors: usize,
        #[arg(long, default_value_t = 500)]
        vocab_size: u32,
        #[arg(long, default_value_t = 0.5)]
        noise_sigma: f32,
        #[arg(long, default_value_t = 0.15)]
        filler_rate: f32,
        /// Shared-direction strength for term-region embeddings.
        #[arg(long, default_value_t = 0.8)]
        term_bias: f32,
    },
    /// Train the scorer with the three-stage curriculum.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
        /// Total step budget, split 30/30/40 across stages.
        #[arg(long, default_value_t = 600)]
        total_steps: usize,
        /// Explicit per-stage budgets "word,phrase,real" (overrides --total-steps).
        #[arg(long)]
        stage_steps: Option<String>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 100)]
        max_bank_per_batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        peak_lr: f64,
        #[arg(long, default_value_t = 1e-7)]
        init_lr: f64,
        #[arg(long, default_value_t = 120)]
        warmup_steps: usize,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        #[arg(long, default_value_t = 64)]
        val_utts: usize,
        /// Bypass token-level pooling (the ablation architecture).
        #[arg(long)]
        no_pooling: bool,
    },
    /// Recall@k of a checkpoint (and the cosine baseline) on the test split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "10,20,30,40,50")]
        k: String,
        /// Macro (per-utterance mean) averaging instead of micro.
        #[arg(long)]
        macro_avg: bool,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Score a term bank against one utterance's features; JSON to stdout.
    Retrieve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Term bank JSONL (defaults to <data>/bank.jsonl).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Utterance feature file (.a2pf).
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Also render the downstream prompt (asr | st).
        #[arg(long)]
        prompt_task: Option<String>,
        /// Render src→tgt pairs in translation prompts.
        #[arg(long)]
        pairs: bool,
    },
    /// Cosine-similarity baseline retrieval; JSON to stdout.
    BaselineRetrieve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
    },
    /// Latency vs bank size for both scorers; CSV table.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "583,1000,5000,10000")]
        bank_sizes: String,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation arm at equal budget and tabulate recall.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "full,nopool,realonly,phrase,word")]
        arms: String,
        #[arg(long, default_value_t = 600)]
        total_steps: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 100)]
        max_bank_per_batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        peak_lr: f64,
        #[arg(long, default_value_t = 120)]
        warmup_steps: usize,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Recall@k vs bank size sweep with distractors.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "583,1000,5000,10000")]
        bank_sizes: String,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Render the terminology-augmented prompt from retrieval JSON or a term list.
    Prompt {
        /// asr | st
        #[arg(long, default_value = "asr")]
        task: String,
        /// Comma-separated source terms.
        #[arg(long)]
        terms: Option<String>,
        /// RetrievalResult JSON file (as printed by `retrieve`).
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long, default_value = "English")]
        src_lang: String,
        #[arg(long, default_value = "Chinese")]
        tgt_lang: String,
        /// Render src→tgt pairs for translation.
        #[arg(long)]
        pairs: bool,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeded trials; the max error over all is reported.
        #[arg(long, default_value_t = 1)]
        trials: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}


/// Print to stdout, exiting quietly if the consumer closed the pipe.
fn emit(s: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    if out.write_all(s.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

fn emit_line(s: &str) {
    emit(s);
    emit("\n");
}

fn engine_config(path: &Option<PathBuf>, m: &ModelArgs) -> Result<EngineConfig> {
    let mut ec = match path {
        Some(p) => EngineConfig::load(p)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => EngineConfig::default(),
    };
    if let Some(d) = m.embed_dim {
        ec.embed_dim = d;
    }
    if let Some(h) = m.heads {
        ec.heads = h;
    }
    if let Some(p) = m.dropout_p {
        ec.dropout_p = p;
    }
    if let Some(e) = m.pooling_epsilon {
        ec.pooling_epsilon = e;
    }
    if let Some(s) = m.seed {
        ec.seed = s;
    }
    ec.validate()?;
    Ok(ec)
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .with_context(|| format!("bad number {x:?} in list {s:?}"))
        })
        .collect()
}

fn load_gen_config(data: &Path) -> Result<ToyEncoderConfig> {
    let p = data.join("gen.toml");
    let text =
        std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(toml::from_str(&text)?)
}

fn load_split(data: &Path, name: &str) -> Result<Corpus> {
    let p = data.join(format!("{name}.jsonl"));
    read_corpus(&p).with_context(|| format!("reading corpus manifest {}", p.display()))
}

fn load_bank_at(path: &Path) -> Result<TermBank> {
    read_bank(path).with_context(|| format!("reading term bank {}", path.display()))
}

fn load_checkpoint_at(path: &Path, ec: &EngineConfig) -> Result<termscout::retriever::RetrieverParams> {
    let p = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if p.d != ec.embed_dim || p.heads != ec.heads {
        bail!(
            "checkpoint {} has d={}, H={} but the engine is configured for d={}, H={}",
            path.display(),
            p.d,
            p.heads,
            ec.embed_dim,
            ec.heads
        );
    }
    Ok(p)
}

fn speech_from_file(path: &Path) -> Result<SpeechFeatures> {
    let frames =
        read_features(path).with_context(|| format!("reading features {}", path.display()))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "query".into());
    Ok(SpeechFeatures::full(id, frames))
}

fn training_config(ec: &EngineConfig, stage_steps: [usize; 3]) -> TrainingConfig {
    TrainingConfig {
        stage_steps,
        embed_dim: ec.embed_dim,
        heads: ec.heads,
        dropout_p: ec.dropout_p,
        pooling_eps: ec.pooling_epsilon,
        seed: ec.seed,
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            model,
            out,
            train_utts,
            val_utts,
            test_utts,
            bank_size,
            distractors,
            vocab_size,
            noise_sigma,
            filler_rate,
            term_bias,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let gen = ToyEncoderConfig {
                vocab_size,
                embed_dim: ec.embed_dim,
                noise_sigma,
                filler_rate,
                term_bias,
                seed: ec.seed,
                ..Default::default()
            };
            std::fs::create_dir_all(&out)?;
            let mut brng = seeds::stream(gen.seed, "bank");
            let bank = generate_bank(&gen, bank_size, &mut brng)?;
            let mut splits = Vec::new();
            let mut corpora = Vec::new();
            for (name, n) in [("train", train_utts), ("val", val_utts), ("test", test_utts)] {
                let mut rng = seeds::stream(gen.seed, &format!("utterances/{name}"));
                let corpus = generate_utterances(&gen, &bank, n, name, &mut rng);
                let manifest = write_corpus(&out, name, &corpus)?;
                splits.push(manifest);
                corpora.push(corpus);
            }
            let refs: Vec<&Corpus> = corpora.iter().collect();
            let pool = generate_distractors(&gen, &bank, &refs, distractors)?;
            let bank_path = out.join("bank.jsonl");
            write_bank(&bank_path, &bank.entries)?;
            write_bank(&out.join("distractors.jsonl"), &pool)?;
            std::fs::write(out.join("gen.toml"), toml::to_string_pretty(&gen)?)?;
            splits.push(bank_path);
            let hash = hash_files(&splits)?;
            println!("corpus-hash {hash}");
            println!(
                "wrote {train_utts}+{val_utts}+{test_utts} utterances, bank {bank_size}, \
                 distractor pool {distractors} to {}",
                out.display()
            );
        }

        Cmd::Train {
            model,
            data,
            out,
            total_steps,
            stage_steps,
            batch_size,
            max_bank_per_batch,
            peak_lr,
            init_lr,
            warmup_steps,
            patience,
            val_utts,
            no_pooling,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let gen = load_gen_config(&data)?;
            let train = load_split(&data, "train")?;
            let val = load_split(&data, "val")?;
            let bank = load_bank_at(&data.join("bank.jsonl"))?;
            let emb = EmbeddingTable::from_config(&gen);
            let steps = match &stage_steps {
                Some(s) => {
                    let v = parse_usize_list(s)?;
                    if v.len() != 3 {
                        bail!("--stage-steps needs exactly three values, got {s:?}");
                    }
                    [v[0], v[1], v[2]]
                }
                None => TrainingConfig::split_steps(total_steps),
            };
            let cfg = TrainingConfig {
                batch_size,
                max_bank_per_batch,
                peak_lr,
                init_lr,
                warmup_steps,
                early_stop_patience: patience,
                val_utterances: val_utts,
                ..training_config(&ec, steps)
            };
            let pooling = if no_pooling {
                PoolingMode::Bypassed
            } else {
                PoolingMode::TokenPooled
            };
            let outcome = run_curriculum(&train, &val, &bank, &emb, &cfg, pooling)?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(&out.join("model.ckpt"), &outcome.params)?;
            for (stage, params) in &outcome.stage_checkpoints {
                save_checkpoint(&out.join(format!("stage_{}.ckpt", stage.name())), params)?;
            }
            std::fs::write(out.join("metrics_steps.csv"), outcome.log.steps_csv())?;
            std::fs::write(out.join("metrics_epochs.csv"), outcome.log.epochs_csv())?;
            let last = outcome.log.epochs.last();
            println!(
                "trained {} steps; final validation recall@10 {:.2}; wrote {}",
                outcome.log.steps.len(),
                last.map(|r| r.recall_at_10).unwrap_or(f64::NAN),
                out.join("model.ckpt").display()
            );
        }

        Cmd::Eval {
            model,
            checkpoint,
            data,
            k,
            macro_avg,
            out,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let params = load_checkpoint_at(&checkpoint, &ec)?;
            let gen = load_gen_config(&data)?;
            let test = load_split(&data, "test")?;
            let bank = load_bank_at(&data.join("bank.jsonl"))?;
            let emb = EmbeddingTable::from_config(&gen);
            let feats = bank.to_features(&emb);
            let ks = parse_usize_list(&k)?;
            let a2p = evaluate(
                &params,
                ec.pooling_epsilon,
                &test,
                &bank,
                &feats,
                &ks,
                PoolingMode::TokenPooled,
                "a2p",
            )?;
            let cos = evaluate_cosine(&test, &bank, &feats, &ks, "cosine")?;
            let reports = vec![a2p, cos];
            let md = recall_reports_markdown(&reports);
            emit(&md);
            if macro_avg {
                let bank_ids: HashSet<u64> = bank.entries.iter().map(|e| e.term_id).collect();
                let k_max = ks.iter().copied().max().unwrap_or(10);
                let mut results = Vec::new();
                let mut gold = Vec::new();
                for (utt, speech) in test.utterances.iter().zip(&test.features) {
                    if utt.positive_terms.is_empty() {
                        continue;
                    }
                    results.push(retrieve(
                        &params,
                        ec.pooling_epsilon,
                        speech,
                        &bank.entries,
                        &feats,
                        k_max,
                        32,
                    )?);
                    gold.push(utt.positive_terms.iter().map(|t| t.term_id).collect());
                }
                for &k in &ks {
                    let r = recall_at_k_avg(&results, &gold, k, &bank_ids, Averaging::Macro)?;
                    println!("macro recall@{k} {r:.2}");
                }
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("recall.csv"), recall_reports_csv(&reports))?;
            std::fs::write(out.join("recall.md"), md)?;
        }

        Cmd::Retrieve {
            model,
            checkpoint,
            data,
            bank,
            features,
            k,
            prompt_task,
            pairs,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let params = load_checkpoint_at(&checkpoint, &ec)?;
            let gen = load_gen_config(&data)?;
            let bank = load_bank_at(&bank.unwrap_or_else(|| data.join("bank.jsonl")))?;
            let emb = EmbeddingTable::from_config(&gen);
            let feats = bank.to_features(&emb);
            let speech = speech_from_file(&features)?;
            let result = retrieve(
                &params,
                ec.pooling_epsilon,
                &speech,
                &bank.entries,
                &feats,
                k,
                32,
            )?;
            emit_line(&serde_json::to_string_pretty(&result)?);
            if let Some(task) = prompt_task {
                let template = PromptTemplate {
                    term_style: if pairs {
                        TermStyle::Pairs
                    } else {
                        TermStyle::SourceOnly
                    },
                    ..Default::default()
                };
                emit_line(&build_prompt(&template, parse_task(&task)?, &result));
            }
        }

        Cmd::BaselineRetrieve {
            model,
            data,
            bank,
            features,
            k,
        } => {
            let _ec = engine_config(&cli.config, &model)?;
            let gen = load_gen_config(&data)?;
            let bank = load_bank_at(&bank.unwrap_or_else(|| data.join("bank.jsonl")))?;
            let emb = EmbeddingTable::from_config(&gen);
            let feats = bank.to_features(&emb);
            let index = DenseIndex::build(&bank.entries, &feats)?;
            let speech = speech_from_file(&features)?;
            let result = cosine_retrieve(&index, &speech, k)?;
            emit_line(&serde_json::to_string_pretty(&result)?);
        }

        Cmd::Bench {
            model,
            checkpoint,
            data,
            bank_sizes,
            queries,
            warmup,
            k,
            out,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let params = load_checkpoint_at(&checkpoint, &ec)?;
            let gen = load_gen_config(&data)?;
            let test = load_split(&data, "test")?;
            let bank = load_bank_at(&data.join("bank.jsonl"))?;
            let pool = load_bank_at(&data.join("distractors.jsonl"))?;
            let emb = EmbeddingTable::from_config(&gen);
            let sizes = parse_usize_list(&bank_sizes)?;
            let mut csv = String::new();
            let mut a2p_rows = Vec::new();
            let mut cos_rows = Vec::new();
            for &size in &sizes {
                if size < bank.len() {
                    bail!("bank size {size} smaller than the base bank ({})", bank.len());
                }
                let extra = size - bank.len();
                if extra > pool.len() {
                    bail!(
                        "bank size {size} needs {extra} distractors, pool has {}",
                        pool.len()
                    );
                }
                let mut entries = bank.entries.clone();
                entries.extend(pool.entries.iter().take(extra).cloned());
                let grown = TermBank::new(entries)?;
                let feats = grown.to_features(&emb);
                a2p_rows.push(bench_bank(
                    &params,
                    ec.pooling_epsilon,
                    &test.features,
                    &grown.entries,
                    &feats,
                    queries,
                    warmup,
                    k,
                    32,
                )?);
                let index = DenseIndex::build(&grown.entries, &feats)?;
                cos_rows.push(bench_cosine(&index, &test.features, queries, warmup, k)?);
            }
            for (scorer, rows) in [("a2p", &a2p_rows), ("cosine", &cos_rows)] {
                for line in bench_rows_csv(rows).lines().skip(if scorer == "a2p" { 0 } else { 1 }) {
                    if line.starts_with("bank_size") {
                        csv.push_str(&format!("scorer,{line}\n"));
                    } else {
                        csv.push_str(&format!("{scorer},{line}\n"));
                    }
                }
            }
            emit(&csv);
            if let Some(p) = out {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                std::fs::write(&p, &csv)?;
            }
        }

        Cmd::Ablate {
            model,
            data,
            arms,
            total_steps,
            batch_size,
            max_bank_per_batch,
            peak_lr,
            warmup_steps,
            out,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let gen = load_gen_config(&data)?;
            let train = load_split(&data, "train")?;
            let val = load_split(&data, "val")?;
            let test = load_split(&data, "test")?;
            let bank = load_bank_at(&data.join("bank.jsonl"))?;
            let emb = EmbeddingTable::from_config(&gen);
            let arms: Vec<AblationArm> = arms
                .split(',')
                .map(|s| AblationArm::parse(s.trim()))
                .collect::<std::result::Result<_, _>>()?;
            let cfg = TrainingConfig {
                batch_size,
                max_bank_per_batch,
                peak_lr,
                warmup_steps,
                ..training_config(&ec, TrainingConfig::split_steps(total_steps))
            };
            let rows = termscout::evalbench::run_ablations(
                &train,
                &val,
                &test,
                &bank,
                &emb,
                &cfg,
                &arms,
                &DEFAULT_KS,
            )?;
            let md = ablation_rows_markdown(&rows);
            emit(&md);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablations.csv"), ablation_rows_csv(&rows))?;
            std::fs::write(out.join("ablations.md"), md)?;
        }

        Cmd::Sweep {
            model,
            checkpoint,
            data,
            bank_sizes,
            k,
            seeds: n_seeds,
            out,
        } => {
            let ec = engine_config(&cli.config, &model)?;
            let params = load_checkpoint_at(&checkpoint, &ec)?;
            let gen = load_gen_config(&data)?;
            let test = load_split(&data, "test")?;
            let bank = load_bank_at(&data.join("bank.jsonl"))?;
            let pool = load_bank_at(&data.join("distractors.jsonl"))?;
            let emb = EmbeddingTable::from_config(&gen);
            let sizes = parse_usize_list(&bank_sizes)?;
            let rows = sweep_bank_size(
                &params,
                ec.pooling_epsilon,
                &test,
                &bank,
                &pool.entries,
                &emb,
                &sizes,
                k,
                n_seeds,
                ec.seed,
            )?;
            let csv = sweep_rows_csv(&rows);
            emit(&csv);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.csv"), csv)?;
        }

        Cmd::Prompt {
            task,
            terms,
            result,
            src_lang,
            tgt_lang,
            pairs,
        } => {
            let template = PromptTemplate {
                src_lang,
                tgt_lang,
                term_style: if pairs {
                    TermStyle::Pairs
                } else {
                    TermStyle::SourceOnly
                },
            };
            let retrieved: RetrievalResult = match (result, terms) {
                (Some(p), _) => serde_json::from_str(
                    &std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?,
                )?,
                (None, Some(list)) => RetrievalResult {
                    scorer: "manual".into(),
                    utterance_id: "manual".into(),
                    entries: list
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .enumerate()
                        .map(|(i, src)| RetrievedEntry {
                            term_id: i as u64,
                            tgt: src.clone(),
                            src,
                            score: 1.0,
                            rank: i + 1,
                        })
                        .collect(),
                    timing: Timing::default(),
                },
                (None, None) => bail!("prompt needs --terms or --result"),
            };
            emit_line(&build_prompt(&template, parse_task(&task)?, &retrieved));
        }

        Cmd::Gradcheck {
            d,
            heads,
            frames,
            tokens,
            seed,
            trials,
        } => {
            let mut worst = 0.0f64;
            for t in 0..trials.max(1) {
                let err = gradcheck(d, heads, frames, tokens, 1e-6, seed + t)?;
                if err > worst {
                    worst = err;
                }
            }
            println!("max-relative-error {worst:.3e}");
            if worst >= 1e-4 {
                bail!("gradient check failed: max relative error {worst:.3e} >= 1e-4");
            }
        }
    }
    Ok(())
}

fn parse_task(s: &str) -> Result<PromptTask> {
    match s {
        "asr" => Ok(PromptTask::Transcribe),
        "st" => Ok(PromptTask::Translate),
        other => bail!("unknown prompt task {other:?} (expected asr or st)"),
    }
}
