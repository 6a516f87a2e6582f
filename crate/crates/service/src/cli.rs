//! Command-line entry points. Each subcommand is a thin driver over the
//! library.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use wordalchemy::corpus::{
    corpus_stats, load_description_set, parse_dictionary, split_corpus, write_jsonl, CorpusManifest, CorpusSplits,
    SplitParams, WordDefPair, DEFAULT_SEEN_SAMPLE_SIZE, DEFAULT_UNSEEN_WORD_FRACTION,
};
use wordalchemy::evaluator::{evaluate, write_rank_dump, EvalOptions, RankRecord, Split};
use wordalchemy::model::ModelConfig;
use wordalchemy::tokenizer::{Tokenizer, INPUT_PREFIX, LABEL_PREFIX};
use wordalchemy::trainer::{train_with_observer, Checkpoint, TrainConfig};

use crate::config::{Backend, CheckpointSpec, ServiceConfig, CONFIG_ENV};
use crate::engine::Engine;

#[derive(Debug, Parser)]
#[command(name = "wordalchemy", version, about = "Reverse dictionary: find the word for a description")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read every dictionary listed in a manifest and write one normalized corpus.
    BuildCorpus {
        #[arg(long)]
        manifest: PathBuf,
        /// Corpus JSON-lines output.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the manifest's description sets, if it has any.
        #[arg(long)]
        descriptions_out: Option<PathBuf>,
    },
    /// Word-level seen/unseen split into a directory.
    Split {
        /// Corpus JSON-lines file.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Extra description set (JSON lines) attached as the description split.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_UNSEEN_WORD_FRACTION)]
        unseen_fraction: f64,
        #[arg(long, default_value_t = DEFAULT_SEEN_SAMPLE_SIZE)]
        seen_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a BPE vocabulary from the training split.
    TrainTokenizer {
        /// Split directory.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and print its checkpoint digest.
    Train {
        /// Split directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Tokenizer JSON; trained from the split when absent.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, default_value_t = 8000)]
        vocab_size: usize,
        /// desk or tiny.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// ModelConfig JSON overriding the preset; its vocab size is replaced
        /// by the tokenizer's.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// TrainConfig JSON; --seed and --steps override its fields.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Disable the task prefixes.
        #[arg(long)]
        no_prefixes: bool,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank every test query with five seed checkpoints and report metrics.
    Evaluate {
        /// One checkpoint per seed; exactly five.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        /// Split directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of seen, unseen, description.
        #[arg(long, value_delimiter = ',')]
        splits: Vec<Split>,
        #[arg(long)]
        baseline: bool,
        /// Directory for per-query rank dumps.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Report JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-k words for a description as "rank word score" lines.
    Query {
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
        /// Split directory; needed for the baseline.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "en")]
        lang: String,
        #[arg(long, default_value_t = 10)]
        k: i64,
        #[arg(long, default_value = "model")]
        backend: Backend,
        definition: String,
    },
    /// Serve the HTTP API.
    Serve {
        /// ServiceConfig JSON.
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        backend: Option<Backend>,
        /// Default k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn read_jsonl(path: &Path) -> anyhow::Result<Vec<WordDefPair>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(parse_dictionary(BufReader::new(f), None).with_context(|| format!("parsing {}", path.display()))?)
}

fn write_pairs(path: &Path, pairs: &[WordDefPair]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_jsonl(pairs, &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_splits(dir: &Path) -> anyhow::Result<CorpusSplits> {
    Ok(CorpusSplits::load_dir(dir)
        .with_context(|| format!("loading splits from {}", dir.display()))?
        .0)
}

/// Text the tokenizer learns from: training words and definitions, each with
/// its task prefix, so headword pieces match their in-definition spelling.
pub fn tokenizer_text(splits: &CorpusSplits) -> Vec<String> {
    splits
        .train
        .iter()
        .flat_map(|p| [format!("{LABEL_PREFIX}{}", p.word), format!("{INPUT_PREFIX}{}", p.definition)])
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::BuildCorpus {
            manifest,
            out,
            descriptions_out,
        } => {
            let m = CorpusManifest::load(&manifest)?;
            let pairs = m.read_pairs()?;
            write_pairs(&out, &pairs)?;
            if let Some(path) = descriptions_out {
                write_pairs(&path, &m.read_descriptions()?)?;
            }
            writeln!(stdout, "{}", serde_json::to_string_pretty(&corpus_stats(&pairs))?)?;
        }
        Command::Split {
            corpus,
            manifest,
            descriptions,
            seed,
            unseen_fraction,
            seen_size,
            out,
        } => {
            let (pairs, mut desc) = match (corpus, manifest) {
                (Some(c), _) => (read_jsonl(&c)?, Vec::new()),
                (None, Some(m)) => {
                    let m = CorpusManifest::load(&m)?;
                    (m.read_pairs()?, m.read_descriptions()?)
                }
                (None, None) => bail!("pass --corpus or --manifest"),
            };
            if let Some(path) = descriptions {
                let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                desc.extend(load_description_set(BufReader::new(f))?);
            }
            let splits = split_corpus(&pairs, unseen_fraction, seen_size, seed)?.with_descriptions(desc);
            let params = SplitParams {
                unseen_word_fraction: unseen_fraction,
                seen_sample_size: seen_size,
            };
            let manifest = splits.save_dir(&out, &params)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&manifest.counts)?)?;
            writeln!(stdout, "{}", splits.digest())?;
        }
        Command::TrainTokenizer { corpus, vocab_size, out } => {
            let splits = load_splits(&corpus)?;
            let tok = Tokenizer::train(tokenizer_text(&splits), vocab_size)?;
            std::fs::write(&out, tok.to_json()).with_context(|| format!("writing {}", out.display()))?;
            writeln!(stdout, "vocab {}", tok.vocab_size())?;
        }
        Command::Train {
            corpus,
            tokenizer,
            vocab_size,
            preset,
            model_config,
            train_config,
            seed,
            steps,
            no_prefixes,
            out,
            log,
        } => {
            let splits = load_splits(&corpus)?;
            let tok = match tokenizer {
                Some(path) => Tokenizer::from_json(&std::fs::read_to_string(&path)?)?,
                None => Tokenizer::train(tokenizer_text(&splits), vocab_size)?,
            };
            let mut mcfg = match (model_config, preset.as_str()) {
                (Some(path), _) => read_json::<ModelConfig>(&path)?,
                (None, "desk") => ModelConfig::desk(tok.vocab_size()),
                (None, "tiny") => ModelConfig::tiny(tok.vocab_size()),
                (None, other) => bail!("unknown preset {other:?} (expected desk or tiny)"),
            };
            mcfg.vocab_size = tok.vocab_size();
            if no_prefixes {
                mcfg.task_prefixes = false;
            }
            let mut tcfg = match train_config {
                Some(path) => read_json::<TrainConfig>(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                tcfg.seed = s;
            }
            if let Some(n) = steps {
                tcfg.max_steps = n;
            }
            let (ckpt, train_log) = train_with_observer(&splits, &tok, &mcfg, &tcfg, |r| {
                if r.step % 100 == 0 {
                    tracing::info!(step = r.step, loss = r.loss, "training");
                }
            })?;
            ckpt.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = log {
                std::fs::write(&path, train_log.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
            }
            writeln!(stdout, "{}", ckpt.digest())?;
        }
        Command::Evaluate {
            ckpts,
            corpus,
            splits: which,
            baseline,
            dump,
            out,
        } => {
            let splits = load_splits(&corpus)?;
            let loaded = ckpts
                .iter()
                .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let seeds: Vec<u64> = loaded.iter().map(|c| c.train_config.seed).collect();
            let dump_fn: Option<Arc<dyn Fn(usize, Split, &[RankRecord]) + Send + Sync>> = match dump {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    Some(Arc::new(move |i: usize, split: Split, records: &[RankRecord]| {
                        let path = dir.join(format!("seed{}_{split}.jsonl", seeds[i]));
                        let written = File::create(&path).and_then(|f| {
                            let mut w = BufWriter::new(f);
                            write_rank_dump(records, &mut w)?;
                            w.flush()
                        });
                        if let Err(e) = written {
                            tracing::error!("writing {}: {e}", path.display());
                        }
                    }))
                }
                None => None,
            };
            let opts = EvalOptions {
                splits: which,
                with_baseline: baseline,
                dump: dump_fn,
            };
            let report = evaluate(&loaded, &splits, &opts)?;
            match out {
                Some(path) => std::fs::write(&path, report.to_json())?,
                None => writeln!(stdout, "{}", report.to_json())?,
            }
        }
        Command::Query {
            ckpts,
            corpus,
            lang,
            k,
            backend,
            definition,
        } => {
            let cfg = ServiceConfig {
                checkpoints: ckpts.into_iter().map(|path| CheckpointSpec { path, langs: None }).collect(),
                corpus,
                backend,
                max_k: usize::MAX,
                ..ServiceConfig::default()
            };
            let engine = Engine::load(&cfg)?;
            let resp = engine
                .query(&definition, &lang, Some(k), Some(backend))
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            for c in resp.candidates {
                writeln!(stdout, "{} {} {:.6}", c.rank, c.word, c.score)?;
            }
        }
        Command::Serve {
            config,
            ckpts,
            corpus,
            bind,
            backend,
            k,
            static_dir,
        } => {
            let mut cfg = match config {
                Some(path) => ServiceConfig::load(&path)?,
                None => ServiceConfig::default(),
            };
            if !ckpts.is_empty() {
                cfg.checkpoints = ckpts.into_iter().map(|path| CheckpointSpec { path, langs: None }).collect();
            }
            cfg.corpus = corpus.or(cfg.corpus);
            cfg.bind = bind.unwrap_or(cfg.bind);
            cfg.backend = backend.unwrap_or(cfg.backend);
            cfg.default_k = k.unwrap_or(cfg.default_k);
            cfg.static_dir = static_dir.or(cfg.static_dir);
            cfg.validate()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(cfg))?;
        }
    }
    Ok(())
}
