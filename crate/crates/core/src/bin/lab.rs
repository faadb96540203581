use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_lab::corpus::{build_corpus, Corpus, CorpusConfig, Partition};
use icl_lab::evaluation::{evaluate_k_shot, shuffle_ablation, Evaluator, DEFAULT_SHOTS};
use icl_lab::experiments::{self, ExperimentConfig};
use icl_lab::model::{
    assemble_sequence, train, Checkpoint, ModelConfig, ModelParams, Precision, Scalar, SequencePurpose, Tokenizer,
    TrainConfig,
};
use icl_lab::sampling::{build_eval_set, build_training_set, CuratedDataset, Regime, TemplateRole, DEFAULT_CONTEXT_SIZE};
use icl_lab::{Error, Result};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "lab", version, about = "Train and probe toy clip/narration transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Sample a training or evaluation set from a corpus.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on an eval set at several shot counts.
    Eval(EvalArgs),
    /// Rebuild report.json and the plot CSVs of a run directory.
    Analyze { run_dir: PathBuf },
    /// Execute (or resume) an experiment config.
    Run {
        config: PathBuf,
        /// Overrides the config's output_dir and the output root.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    Build {
        /// Corpus config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a shifted corpus with this many episodes.
        #[arg(long, requires = "shifted_out")]
        shifted_episodes: Option<usize>,
        #[arg(long)]
        shifted_out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        /// train, common-eval, rare-eval or shifted.
        #[arg(long, default_value = "train")]
        partition: String,
        /// Training regime, e.g. bursty-dynamic-ALL (training sets only).
        #[arg(long, default_value = "bursty-dynamic-ALL")]
        regime: Regime,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_CONTEXT_SIZE)]
        context_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Further corpora whose words the tokenizer must know (e.g. a shifted corpus).
    #[arg(long)]
    extra_corpus: Vec<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus the eval set was drawn from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    eval_set: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SHOTS)]
    shots: Vec<usize>,
    /// Also compare against clip-deranged contexts at these shots.
    #[arg(long, value_delimiter = ',')]
    shuffle_shots: Vec<usize>,
    #[arg(long, default_value_t = 12)]
    max_new_tokens: usize,
    #[arg(long, default_value = "model")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display()))),
        None => Ok(T::default()),
    }
}

fn corpus_build(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    shifted: Option<(usize, &Path)>,
) -> Result<()> {
    let mut cfg: CorpusConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = build_corpus(&cfg)?;
    corpus.save(out)?;
    println!("{} episodes -> {}", corpus.episodes.len(), out.display());
    if let Some((n, dir)) = shifted {
        let s = corpus.shifted(n, cfg.seed)?;
        s.save(dir)?;
        println!("{} shifted episodes -> {}", s.episodes.len(), dir.display());
    }
    Ok(())
}

fn parse_partition(name: &str) -> Result<Option<Partition>> {
    Ok(match name {
        "train" => None,
        "common-eval" => Some(Partition::CommonEval),
        "rare-eval" => Some(Partition::RareEval),
        "shifted" => Some(Partition::Shifted),
        other => return Err(Error::InvalidConfig(format!("unknown partition `{other}`"))),
    })
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let extra = a.extra_corpus.iter().map(|p| Corpus::load(p)).collect::<Result<Vec<_>>>()?;
    let tokenizer = Tokenizer::new(std::iter::once(&corpus.lexicon).chain(extra.iter().map(|c| &c.lexicon)));
    let mut model: ModelConfig = read_json(a.model_config.as_deref())?;
    if model.vocab_size == 0 {
        model.vocab_size = tokenizer.len();
    }
    if model.clip_dim == 0 {
        model.clip_dim = 2 * corpus.config.prototype_dim;
    }
    let tc: TrainConfig = read_json(a.train_config.as_deref())?;
    let set = CuratedDataset::load(&a.dataset)?;
    match tc.precision {
        Precision::Single => train_typed::<f32>(&corpus, &set, &tokenizer, model, &tc, &a.out),
        Precision::Double => train_typed::<f64>(&corpus, &set, &tokenizer, model, &tc, &a.out),
    }
}

fn train_typed<T: Scalar>(
    corpus: &Corpus,
    set: &CuratedDataset,
    tokenizer: &Tokenizer,
    model: ModelConfig,
    tc: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let seqs = set
        .instances
        .iter()
        .map(|r| {
            let inst = r.materialize(corpus, TemplateRole::QueryTrain)?;
            assemble_sequence::<T>(&inst, tokenizer, &model, set.context_size, SequencePurpose::Train)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::<T>::init(model, tc.seed)?;
    let outcome = train(params, &seqs, tc)?;
    let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
    Checkpoint::from_outcome(outcome, tokenizer.clone(), tc).save(out)?;
    println!("trained {} steps, final loss {last:.4} -> {}", tc.total_steps(seqs.len()), out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let wide = Checkpoint::<f64>::load(&a.checkpoint)?;
    let single = wide
        .train_config
        .as_ref()
        .is_none_or(|c| c.precision == Precision::Single);
    if single {
        eval_typed(a, &wide.params.cast::<f32>(), &wide.tokenizer)
    } else {
        eval_typed(a, &wide.params, &wide.tokenizer)
    }
}

fn eval_typed<T: Scalar>(a: &EvalArgs, params: &ModelParams<T>, tokenizer: &Tokenizer) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let set = CuratedDataset::load(&a.eval_set)?;
    let instances = set
        .instances
        .iter()
        .map(|r| r.materialize(&corpus, TemplateRole::QueryEval))
        .collect::<Result<Vec<_>>>()?;
    let ev = Evaluator {
        variant: &a.variant,
        params,
        tokenizer,
        lexicon: &corpus.lexicon,
        max_new_tokens: a.max_new_tokens,
    };
    fs::create_dir_all(&a.out)?;
    let table = evaluate_k_shot(&ev, &instances, &a.shots)?;
    table.save_json(&a.out.join("metrics.json"))?;
    table.write_csv(&a.out.join("metrics.csv"))?;
    table.write_aggregate_csv(&a.out.join("aggregate.csv"))?;
    for g in table.aggregates() {
        println!(
            "{} k={:<2} class_match {:.3} ± {:.3}  rouge_l {:.3} ± {:.3}",
            g.variant, g.shot, g.class_match.mean, g.class_match.se, g.rouge_l_f.mean, g.rouge_l_f.se
        );
    }
    if !a.shuffle_shots.is_empty() {
        let ab = shuffle_ablation(&ev, &instances, &a.shuffle_shots, a.seed)?;
        fs::write(a.out.join("shuffle.json"), serde_json::to_vec_pretty(&ab)?)?;
        for r in &ab.rows {
            println!(
                "shuffled k={:<2} class_match {:+.1}%  rouge_l {:+.1}%",
                r.shot, r.class_match_pct, r.rouge_l_pct
            );
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus {
            action:
                CorpusCmd::Build {
                    config,
                    seed,
                    out,
                    shifted_episodes,
                    shifted_out,
                },
        } => corpus_build(
            config.as_deref(),
            seed,
            &out,
            shifted_episodes.zip(shifted_out.as_deref()),
        ),
        Command::Dataset {
            action:
                DatasetCmd::Build {
                    corpus,
                    partition,
                    regime,
                    size,
                    context_size,
                    seed,
                    out,
                },
        } => {
            let corpus = Corpus::load(&corpus)?;
            let set = match parse_partition(&partition)? {
                None => build_training_set(&corpus, regime, size, context_size, seed)?,
                Some(p) => {
                    let size = size.ok_or_else(|| Error::InvalidConfig("eval sets need --size".into()))?;
                    build_eval_set(&corpus, p, size, context_size, seed)?
                }
            };
            set.save(&out, &corpus)?;
            for w in &set.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} instances -> {}", set.instances.len(), out.display());
            Ok(())
        }
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Analyze { run_dir } => {
            let report = experiments::analyze(&run_dir)?;
            println!("{} experiments analysed in {}", report.experiments.len(), run_dir.display());
            Ok(())
        }
        Command::Run { config, output_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir.unwrap_or_else(|| cfg.resolve_output_dir());
            experiments::run_in(&cfg, &dir)?;
            println!("run complete: {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
