//! Command-line front end: synthesize data, build contrastive pairs,
//! train, evaluate, diagnose, and sweep task coefficients.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use condigsum::corpus::{self, DialogueRecord, SynthConfig, Vocabulary};
use condigsum::evalgen::{self, BeamConfig};
use condigsum::model::Model;
use condigsum::pairs;
use condigsum::par;
use condigsum::seeds::{self, stream};
use condigsum::trainer::{self, Strategy, TrainConfig};

const TOY_PRESET: &str = include_str!("../presets/toy.json");
const PAPER_PRESET: &str = include_str!("../presets/paper.json");

#[derive(Parser)]
#[command(
    name = "condigsum",
    version,
    about = "Train and probe a topic-aware contrastive dialogue summarizer",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for parallel sections (must be set before first use)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

#[derive(Args)]
struct ConfigSource {
    /// Training config JSON (same shape as the shipped presets)
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in hyperparameter preset [default: toy]
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<TrainConfig> {
        let mut config: TrainConfig = match (&self.config, self.preset) {
            (Some(path), _) => serde_json::from_str(
                &fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?,
            )
            .with_context(|| format!("parsing config {}", path.display()))?,
            (None, Some(Preset::Paper)) => serde_json::from_str(PAPER_PRESET)?,
            (None, Some(Preset::Toy)) | (None, None) => serde_json::from_str(TOY_PRESET)?,
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CliStrategy {
    Alternating,
    Summed,
}

impl From<CliStrategy> for Strategy {
    fn from(s: CliStrategy) -> Strategy {
        match s {
            CliStrategy::Alternating => Strategy::Alternating,
            CliStrategy::Summed => Strategy::Summed,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SweepStrategy {
    Alternating,
    Summed,
    Both,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Coefficient {
    #[value(name = "w_co")]
    WCo,
    #[value(name = "w_su")]
    WSu,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-topic dialogue corpus (JSONL)
    SynthData {
        /// Output corpus path
        #[arg(long)]
        out: PathBuf,
        /// Number of dialogues
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Build one epoch's contrastive pairs and dump them as JSONL
    PreparePairs {
        #[command(flatten)]
        source: ConfigSource,
        /// Corpus JSONL to draw pairs from
        #[arg(long)]
        corpus: PathBuf,
        /// Output pair-dump path
        #[arg(long)]
        out: PathBuf,
        /// Epoch whose derived pair seeds to use
        #[arg(long, default_value_t = 1)]
        epoch: usize,
    },
    /// Train a model and write checkpoints plus a step log
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Training corpus JSONL
        #[arg(long)]
        corpus: PathBuf,
        /// Validation corpus JSONL
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Output directory (checkpoints, vocab, logs)
        #[arg(long)]
        out: PathBuf,
        /// Override the config's update strategy
        #[arg(long, value_enum)]
        strategy: Option<CliStrategy>,
        /// Override the config's epoch count
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a corpus with a checkpoint and report ROUGE scores
    Evaluate {
        /// Model checkpoint (.ckpt)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file written by `train`
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus JSONL to evaluate on
        #[arg(long)]
        corpus: PathBuf,
        /// Report JSON path
        #[arg(long)]
        out: PathBuf,
        /// Also write per-dialogue scores as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        beam_size: usize,
        #[arg(long, default_value_t = 64)]
        max_decode_len: usize,
    },
    /// Run coherence, correlation, and substitution probes on a checkpoint
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory (diagnostics.json + matrix CSVs)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Substitution-probe examples to draw
        #[arg(long, default_value_t = 70)]
        examples: usize,
        /// How many dialogues get a correlation-matrix CSV
        #[arg(long, default_value_t = 3)]
        matrices: usize,
    },
    /// Train across a grid of task-coefficient values and compare
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        corpus: PathBuf,
        /// Validation corpus JSONL (sweeps compare validation loss)
        #[arg(long)]
        valid: PathBuf,
        /// Which coefficient to vary
        #[arg(long, value_enum)]
        coefficient: Coefficient,
        /// Comma-separated coefficient values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Strategies to run for every value
        #[arg(long, value_enum, default_value_t = SweepStrategy::Both)]
        strategies: SweepStrategy,
    },
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CONDIGSUM_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = par::configure_threads(n) {
            log::warn!("could not set thread count: {e}");
        }
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_corpus(path: &Path) -> Result<Vec<DialogueRecord>> {
    corpus::load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let file = fs::File::open(path).with_context(|| format!("opening vocab {}", path.display()))?;
    Ok(Vocabulary::load(std::io::BufReader::new(file))?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct PairDump<'a> {
    dialogue_id: &'a str,
    coherence: &'a [pairs::CoherencePair],
    subsummary: &'a [pairs::SubSummaryPair],
}

#[derive(Serialize)]
struct CoherenceReport {
    n_spans: usize,
    n_pairs: usize,
    n_ordered_higher: usize,
    mean_ordered: f64,
    mean_shuffled: f64,
    probes: Vec<DialogueProbes>,
}

#[derive(Serialize)]
struct DialogueProbes {
    dialogue_id: String,
    probes: Vec<evalgen::CoherenceProbe>,
}

#[derive(Serialize)]
struct Diagnostics {
    coherence: CoherenceReport,
    substitution: evalgen::ProbeOutcome,
    matrix_files: Vec<String>,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { out, count, seed } => {
            let records = corpus::synth_corpus(&SynthConfig {
                n_dialogues: count,
                seed,
                ..SynthConfig::default()
            })?;
            corpus::save_corpus(&records, &out)?;
            log::info!("wrote {} dialogues to {}", records.len(), out.display());
            Ok(())
        }

        Command::PreparePairs { source, corpus: corpus_path, out, epoch } => {
            let config = source.load()?;
            config.validate().map_err(|e| anyhow::anyhow!(e))?;
            let records = load_corpus(&corpus_path)?;
            let subs: Vec<_> = records
                .iter()
                .map(|d| {
                    corpus::filter_sub_summaries(
                        d,
                        corpus::split_sub_summaries(&d.summary),
                        config.a,
                        config.b,
                        config.min_match_recall,
                    )
                })
                .collect();
            let mut file = fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut n_co = 0usize;
            let mut n_su = 0usize;
            for (i, d) in records.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    config.seed,
                    &[stream::PAIRS, epoch as u64, i as u64],
                ));
                let co = pairs::make_coherence_pairs(d, config.k, config.n_co, &mut rng);
                let su = pairs::make_subsummary_pairs(
                    d, &subs[i], config.a, config.b, config.n_su, &mut rng,
                );
                n_co += co.len();
                n_su += su.len();
                let line = serde_json::to_string(&PairDump {
                    dialogue_id: &d.id,
                    coherence: &co,
                    subsummary: &su,
                })?;
                writeln!(file, "{line}")?;
            }
            log::info!(
                "wrote {n_co} coherence and {n_su} sub-summary pairs for {} dialogues to {}",
                records.len(),
                out.display()
            );
            Ok(())
        }

        Command::Train { source, corpus: corpus_path, valid, out, strategy, epochs } => {
            let mut config = source.load()?;
            if let Some(s) = strategy {
                config.strategy = s.into();
            }
            if let Some(e) = epochs {
                config.epochs = e;
            }
            let train_set = load_corpus(&corpus_path)?;
            let valid_set = valid.as_deref().map(load_corpus).transpose()?;
            let vocab = corpus::build_vocab(&train_set, config.model_config.vocab_size)?;
            if vocab.size() < config.model_config.vocab_size {
                log::info!(
                    "corpus yields {} token types; shrinking vocab_size from {}",
                    vocab.size(),
                    config.model_config.vocab_size
                );
                config.model_config.vocab_size = vocab.size();
            }
            fs::create_dir_all(&out)?;
            vocab.save_to(out.join("vocab.txt"))?;
            write_json(&config, &out.join("config.json"))?;
            let outcome = trainer::train::<f32>(
                &train_set,
                valid_set.as_deref(),
                &vocab,
                &config,
                Some(&out),
            )?;
            let mut log_file = fs::File::create(out.join("train_log.jsonl"))?;
            for entry in &outcome.log {
                writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
            }
            if let Some(best) = outcome.best_val_loss {
                log::info!(
                    "finished: best val loss {best:.4} at epoch {}; artifacts in {}",
                    outcome.best_epoch,
                    out.display()
                );
            } else {
                log::info!("finished; artifacts in {}", out.display());
            }
            Ok(())
        }

        Command::Evaluate {
            checkpoint, vocab, corpus: corpus_path, out, csv, beam_size, max_decode_len,
        } => {
            let model: Model<f32> = Model::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let vocab = load_vocab(&vocab)?;
            let records = load_corpus(&corpus_path)?;
            let cfg = BeamConfig {
                beam_size,
                max_decode_len,
                ..BeamConfig::default()
            };
            let mut report = evalgen::evaluate_rouge(&model, &records, &vocab, &cfg)?;
            if let Some(csv_path) = csv {
                let mut text =
                    String::from("id,sub_summaries,rouge1_f1,rouge2_f1,rouge_l_f1\n");
                for i in &report.per_instance {
                    text.push_str(&format!(
                        "{},{},{:.6},{:.6},{:.6}\n",
                        i.id, i.sub_summaries, i.rouge1.f1, i.rouge2.f1, i.rouge_l.f1
                    ));
                }
                fs::write(&csv_path, text)?;
            }
            report.per_instance.clear();
            write_json(&report, &out)?;
            log::info!(
                "ROUGE-1/2/L F1: {:.4} / {:.4} / {:.4} over {} dialogues",
                report.rouge.rouge1.f1,
                report.rouge.rouge2.f1,
                report.rouge.rouge_l.f1,
                report.rouge.count
            );
            Ok(())
        }

        Command::Diagnose {
            checkpoint, vocab, corpus: corpus_path, out, seed, examples, matrices,
        } => {
            let model: Model<f32> = Model::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let vocab = load_vocab(&vocab)?;
            let records = load_corpus(&corpus_path)?;
            fs::create_dir_all(&out)?;

            // Ordered-vs-shuffled coherence over every topic span.
            let mut probes = Vec::new();
            let mut n_pairs = 0usize;
            let mut n_higher = 0usize;
            let mut n_spans = 0usize;
            let mut sum_ordered = 0.0;
            let mut sum_shuffled = 0.0;
            for (i, d) in records.iter().enumerate() {
                let Some(spans) = d.topic_spans.as_ref() else { continue };
                let spans: Vec<(usize, usize)> =
                    spans.iter().map(|t| (t.start, t.end)).collect();
                if spans.is_empty() {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    seed,
                    &[stream::DIAG, i as u64],
                ));
                let ps = evalgen::coherence_diagnostic(&model, d, &spans, &vocab, &mut rng)?;
                n_spans += ps.len();
                for p in &ps {
                    if let Some(sh) = p.shuffled {
                        n_pairs += 1;
                        sum_ordered += p.ordered;
                        sum_shuffled += sh;
                        if p.ordered > sh {
                            n_higher += 1;
                        }
                    }
                }
                probes.push(DialogueProbes {
                    dialogue_id: d.id.clone(),
                    probes: ps,
                });
            }
            let coherence = CoherenceReport {
                n_spans,
                n_pairs,
                n_ordered_higher: n_higher,
                mean_ordered: sum_ordered / n_pairs.max(1) as f64,
                mean_shuffled: sum_shuffled / n_pairs.max(1) as f64,
                probes,
            };

            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[stream::DIAG]));
            let substitution =
                evalgen::substitution_probe_corpus(&model, &records, examples, &vocab, &mut rng)?;

            // Correlation matrices for the first few multi-topic dialogues.
            let mut matrix_files = Vec::new();
            for d in records.iter() {
                if matrix_files.len() >= matrices {
                    break;
                }
                let Some(spans) = d.topic_spans.as_ref() else { continue };
                let subs = corpus::split_sub_summaries(&d.summary);
                if spans.len() < 2 || subs.len() < 2 {
                    continue;
                }
                let snippets: Vec<pairs::Snippet> = spans
                    .iter()
                    .map(|t| pairs::Snippet {
                        dialogue_id: d.id.clone(),
                        start: t.start,
                        length: t.end - t.start,
                        utterance_order: (0..t.end - t.start).collect(),
                    })
                    .collect();
                let m = evalgen::correlation_matrix(&model, d, &snippets, &subs, &vocab)?;
                let name = format!("matrix-{}.csv", d.id);
                fs::write(out.join(&name), m.to_csv())?;
                matrix_files.push(name);
            }

            let diagnostics = Diagnostics {
                coherence,
                substitution,
                matrix_files,
            };
            write_json(&diagnostics, &out.join("diagnostics.json"))?;
            log::info!(
                "coherence: ordered {:.3} vs shuffled {:.3} over {} pairs ({} higher); \
                 substitution: original {:.3} vs substituted {:.3}",
                diagnostics.coherence.mean_ordered,
                diagnostics.coherence.mean_shuffled,
                diagnostics.coherence.n_pairs,
                diagnostics.coherence.n_ordered_higher,
                diagnostics.substitution.mean_original,
                diagnostics.substitution.mean_substituted,
            );
            Ok(())
        }

        Command::Sweep {
            source, corpus: corpus_path, valid, coefficient, values, out, strategies,
        } => {
            if values.is_empty() {
                bail!("--values needs at least one coefficient value");
            }
            let base = source.load()?;
            let train_set = load_corpus(&corpus_path)?;
            let valid_set = load_corpus(&valid)?;
            let vocab = corpus::build_vocab(&train_set, base.model_config.vocab_size)?;
            let strategy_list: Vec<Strategy> = match strategies {
                SweepStrategy::Alternating => vec![Strategy::Alternating],
                SweepStrategy::Summed => vec![Strategy::Summed],
                SweepStrategy::Both => vec![Strategy::Alternating, Strategy::Summed],
            };
            let coeff_name = match coefficient {
                Coefficient::WCo => "w_co",
                Coefficient::WSu => "w_su",
            };
            let mut csv = String::from("coefficient,value,strategy,val_loss\n");
            for &value in &values {
                for &strategy in &strategy_list {
                    let mut config = base.clone();
                    config.strategy = strategy;
                    match coefficient {
                        Coefficient::WCo => config.w_co = value,
                        Coefficient::WSu => config.w_su = value,
                    }
                    if vocab.size() < config.model_config.vocab_size {
                        config.model_config.vocab_size = vocab.size();
                    }
                    let outcome = trainer::train::<f32>(
                        &train_set,
                        Some(&valid_set),
                        &vocab,
                        &config,
                        None,
                    )?;
                    let val_loss = *outcome
                        .val_losses
                        .last()
                        .context("sweep training produced no validation loss")?;
                    let strategy_name = match strategy {
                        Strategy::Alternating => "alternating",
                        Strategy::Summed => "summed",
                    };
                    log::info!(
                        "{coeff_name}={value} strategy={strategy_name}: val loss {val_loss:.4}"
                    );
                    csv.push_str(&format!(
                        "{coeff_name},{value},{strategy_name},{val_loss:.6}\n"
                    ));
                }
            }
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            log::info!("sweep results in {}", out.display());
            Ok(())
        }
    }
}
