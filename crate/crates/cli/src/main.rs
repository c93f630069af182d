use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pagelm::encoder::{DropoutVariant, LayoutMode, QScheduleMode};
use pagelm::runconfig::RunConfig;
use pagelm::synthcorpus::{DocType, ReadingOrder};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "pagelm", version, about = "Layout-aware encoder: corpora, training, extraction, attention export")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// none, winding, autoencoder or graph.
    #[arg(long, global = true)]
    layout: Option<LayoutMode>,
    /// token, dimension or element.
    #[arg(long = "dropout-variant", global = true)]
    dropout_variant: Option<DropoutVariant>,
    /// Positional suppression schedule: none or linear_half.
    #[arg(long, global = true)]
    suppress: Option<QScheduleMode>,
    /// Fine-tuning repetitions for `eval`.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (JSONL plus stats).
    CorpusGen {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long = "doc-type")]
        doc_type: Option<DocType>,
        #[arg(long = "reading-order")]
        reading_order: Option<ReadingOrder>,
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Keep pages that pass the page filter; log the others with a reason.
    CorpusFilter {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a byte-level BPE vocabulary.
    BpeTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "vocab-size")]
        vocab_size: Option<usize>,
    },
    /// Masked-LM pretraining.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Existing vocabulary; trained from the corpus when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Fine-tune a tagging head on auto-tagged pages.
    Finetune {
        /// Pretrained checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
    },
    /// Predict one value per key and page.
    Extract {
        /// Fine-tuned checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score predictions against gold attributes. With `--pretrained`,
    /// fine-tunes `--seeds` times and reports mean and standard deviation.
    Eval {
        /// Gold pages.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, conflicts_with_all = ["checkpoint", "pretrained"])]
        predictions: Option<PathBuf>,
        /// Fine-tuned checkpoint.
        #[arg(long, conflicts_with = "pretrained")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires_all = ["train", "dev"])]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Export attention weights as JSON and SVG.
    VizAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON or JSONL document(s).
        #[arg(long)]
        doc: PathBuf,
        /// Which document of a JSONL file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
        /// Average the heads of each selected layer.
        #[arg(long = "average-layer")]
        average_layer: bool,
        /// Position whose attention row is drawn in the SVG.
        #[arg(long, default_value_t = 0)]
        token: usize,
    },
    /// Print a checkpoint's configuration and tensors.
    CheckpointInspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn run_config(&self) -> pagelm::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.layout {
            cfg.encoder.layout = l;
        }
        if let Some(d) = self.dropout_variant {
            cfg.encoder.dropout_variant = d;
        }
        if let Some(q) = self.suppress {
            cfg.encoder.q_schedule = q;
        }
        if let Some(k) = self.seeds {
            cfg.seeds = k;
        }
        Ok(cfg)
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("LAMBERT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("LAMBERT_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> pagelm::Result<()> {
    let mut cfg = cli.common.run_config()?;
    let out: &Path = &cli.common.out;
    use commands as c;
    match cli.cmd {
        Command::CorpusGen {
            count,
            doc_type,
            reading_order,
            rows,
        } => {
            if let Some(d) = doc_type {
                cfg.gen.doc_type = d;
            }
            if let Some(r) = reading_order {
                cfg.gen.reading_order = r;
            }
            if let Some(r) = rows {
                cfg.gen.rows = r;
            }
            c::corpus_gen(&cfg, count, out)
        }
        Command::CorpusFilter { input } => c::corpus_filter(&cfg, &input, out),
        Command::BpeTrain { corpus, vocab_size } => {
            if let Some(v) = vocab_size {
                cfg.encoder.vocab_size = v;
            }
            c::bpe_train(&cfg, &corpus, out)
        }
        Command::Train { corpus, vocab } => c::train(&mut cfg, &corpus, vocab.as_deref(), out),
        Command::Finetune { checkpoint, corpus, dev } => c::finetune(&cfg, &checkpoint, &corpus, &dev, out),
        Command::Extract { checkpoint, corpus } => c::extract(&cfg, &checkpoint, &corpus, out),
        Command::Eval {
            corpus,
            predictions,
            checkpoint,
            pretrained,
            train,
            dev,
        } => match (predictions, checkpoint, pretrained, train, dev) {
            (Some(p), None, None, ..) => c::eval_predictions(&cfg, &p, &corpus, out),
            (None, Some(ck), None, ..) => c::eval_checkpoint(&cfg, &ck, &corpus, out),
            (None, None, Some(pre), Some(tr), Some(dv)) => c::eval_seeds(&cfg, &pre, &tr, &dv, &corpus, out),
            _ => Err(pagelm::Error::Config(
                "eval needs --predictions, --checkpoint, or --pretrained with --train and --dev".into(),
            )),
        },
        Command::VizAttn {
            checkpoint,
            doc,
            index,
            layer,
            head,
            average_layer,
            token,
        } => c::viz_attn(&cfg, &checkpoint, &doc, index, layer, head, average_layer, token, out),
        Command::CheckpointInspect { checkpoint } => c::checkpoint_inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
