//! Declarative experiment runs: corpus, datasets, training, k-shot evaluation
//! and analyses, persisted under one run directory with a resumable manifest.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json  manifest.json  report.json
//! corpus/  shifted/
//! eval/<selector>/dataset.jsonl
//! seed-<s>/<regime>/dataset/  model.ckpt  eval-<selector>.{json,csv}
//! seed-<s>/<regime>/shuffle-<selector>.json
//! seed-<s>/aggregate-<experiment>.csv
//! plots/*.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{build_corpus, Action, Corpus, CorpusConfig, MeaningMode, PartOfSpeech, Partition};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_k_shot, icw_regression, per_action_delta, shuffle_ablation, Evaluator, MetricTable, RegressionResult,
    ShuffleAblation, ShuffleRow, DEFAULT_SHOTS,
};
use crate::model::{
    assemble_sequence, train, Checkpoint, ModelConfig, ModelParams, Precision, Scalar, SequencePurpose, Tokenizer,
    TrainConfig,
};
use crate::sampling::{
    build_eval_set, build_training_set, ContextQueryInstance, CuratedDataset, Regime, SamplingMode, SkewTier,
    TemplateRole, DEFAULT_CONTEXT_SIZE,
};
use crate::seed::{digest_of, sha256_hex};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the directory runs are created under.
pub const OUTPUT_ROOT_ENV: &str = "LAB_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const CONFIG_FILE: &str = "config.json";
const MANIFEST_FILE: &str = "manifest.json";
const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Bursty versus random contexts.
    Bursty,
    /// Query restricted to the most frequent common actions.
    Skew,
    /// Dynamic versus canonical narrations.
    Meaning,
    /// Held-out rare actions plus the frequency regression.
    Rare,
    /// A second corpus with fresh prototypes and surface words.
    Shift,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Bursty => "bursty",
            ExperimentKind::Skew => "skew",
            ExperimentKind::Meaning => "meaning",
            ExperimentKind::Rare => "rare",
            ExperimentKind::Shift => "shift",
        }
    }

    fn default_selector(self) -> EvalSelector {
        match self {
            ExperimentKind::Bursty | ExperimentKind::Meaning => EvalSelector::Random7525,
            ExperimentKind::Shift => EvalSelector::ShiftedCorpus,
            _ => EvalSelector::RareHeldOut,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which queries an experiment is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalSelector {
    /// Rare actions, none of which occur in training.
    #[serde(rename = "rare-held-out")]
    RareHeldOut,
    /// The held-out quarter of the common-action episodes.
    #[serde(rename = "random-75/25")]
    Random7525,
    /// Episodes of the shifted corpus.
    #[serde(rename = "shifted-corpus")]
    ShiftedCorpus,
}

impl EvalSelector {
    /// File-system safe name.
    pub fn slug(self) -> &'static str {
        match self {
            EvalSelector::RareHeldOut => "rare-held-out",
            EvalSelector::Random7525 => "random-75-25",
            EvalSelector::ShiftedCorpus => "shifted-corpus",
        }
    }

    fn partition(self) -> Partition {
        match self {
            EvalSelector::RareHeldOut => Partition::RareEval,
            EvalSelector::Random7525 => Partition::CommonEval,
            EvalSelector::ShiftedCorpus => Partition::Shifted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Queries per eval set.
    pub size: usize,
    pub max_new_tokens: usize,
    /// Shots at which the full-regime model is re-scored with deranged clips; empty disables.
    pub shuffle_shots: Vec<usize>,
    /// Episodes in the shifted corpus.
    pub shift_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            size: 200,
            max_new_tokens: 12,
            shuffle_shots: vec![2, 4, 8, 16],
            shift_episodes: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub experiments: Vec<ExperimentKind>,
    pub corpus: CorpusConfig,
    /// `vocab_size` and `clip_dim` of 0 are filled in from the corpus.
    pub model: ModelConfig,
    /// `seed` is replaced by each replicate seed.
    pub train: TrainConfig,
    pub context_size: usize,
    /// Instances per training set; defaults to the training partition size.
    pub train_size: Option<usize>,
    /// Cutoffs of the skew experiment, ascending; ALL is always added.
    pub skew_tiers: Vec<SkewTier>,
    /// Optional explicit grid; must equal the grid the experiments imply.
    pub regimes: Option<Vec<Regime>>,
    pub eval: EvalConfig,
    /// Per-experiment eval set overrides.
    pub eval_partition: BTreeMap<ExperimentKind, EvalSelector>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            experiments: vec![
                ExperimentKind::Bursty,
                ExperimentKind::Skew,
                ExperimentKind::Meaning,
                ExperimentKind::Rare,
                ExperimentKind::Shift,
            ],
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            context_size: DEFAULT_CONTEXT_SIZE,
            train_size: Some(12_000),
            skew_tiers: vec![SkewTier::Top(20), SkewTier::Top(100)],
            regimes: None,
            eval: EvalConfig::default(),
            eval_partition: BTreeMap::new(),
            shots: DEFAULT_SHOTS.to_vec(),
            seeds: vec![0, 1, 2],
            output_dir: None,
        }
    }
}

fn regime(sampling: SamplingMode, meaning: MeaningMode, tier: SkewTier) -> Regime {
    Regime { sampling, meaning, tier }
}

impl ExperimentConfig {
    /// Parse and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config is not JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::config(format!("unsupported schema_version {v}"))),
            None => return Err(Error::config("config lacks schema_version")),
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.experiments.is_empty() {
            return Err(Error::config("no experiments selected"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seed list has duplicates"));
        }
        if self.shots.is_empty() || !self.shots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("shots must be a nonempty strictly increasing list"));
        }
        if self.shots.last().is_some_and(|&k| k > self.context_size) {
            return Err(Error::config("largest shot exceeds context_size"));
        }
        if self.eval.shuffle_shots.iter().any(|&k| k < 2 || k > self.context_size) {
            return Err(Error::config("shuffle shots must lie in 2..=context_size"));
        }
        if self.eval.size == 0 {
            return Err(Error::config("eval size must be positive"));
        }
        let tops: Vec<usize> = self.skew_tiers.iter().filter_map(|t| t.cutoff()).collect();
        if tops.len() != self.skew_tiers.len() || tops.is_empty() || !tops.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("skew_tiers must be ascending T<n> cutoffs (ALL is implied)"));
        }
        for (kind, sel) in &self.eval_partition {
            let ok = match kind {
                ExperimentKind::Rare => *sel == EvalSelector::RareHeldOut,
                ExperimentKind::Shift => *sel == EvalSelector::ShiftedCorpus,
                _ => *sel != EvalSelector::ShiftedCorpus,
            };
            if !ok {
                return Err(Error::config(format!("experiment {kind} cannot be evaluated on {}", sel.slug())));
            }
        }
        let model = &self.model;
        let clip_dim = 2 * self.corpus.prototype_dim;
        if model.clip_dim != 0 && model.clip_dim != clip_dim {
            return Err(Error::config(format!(
                "model.clip_dim {} does not match the corpus clip dimension {clip_dim}",
                model.clip_dim
            )));
        }
        self.train.validate()?;
        if let Some(explicit) = &self.regimes {
            let want: BTreeSet<String> = self.grid().iter().map(Regime::label).collect();
            let got: BTreeSet<String> = explicit.iter().map(Regime::label).collect();
            if want != got {
                return Err(Error::config(format!(
                    "regime grid mismatch: experiments imply {want:?}, config lists {got:?}"
                )));
            }
        }
        Ok(())
    }

    /// Regimes trained for one experiment, control first.
    pub fn experiment_grid(&self, kind: ExperimentKind) -> Vec<Regime> {
        use MeaningMode::*;
        use SamplingMode::*;
        match kind {
            ExperimentKind::Bursty => vec![Regime::FULL, regime(Random, Dynamic, SkewTier::All)],
            ExperimentKind::Skew => self
                .skew_tiers
                .iter()
                .map(|&t| regime(Bursty, Dynamic, t))
                .chain([Regime::FULL])
                .collect(),
            ExperimentKind::Meaning => vec![Regime::FULL, regime(Bursty, Canonical, SkewTier::All)],
            ExperimentKind::Rare | ExperimentKind::Shift => vec![Regime::FULL],
        }
    }

    /// Union of the experiment grids, first-seen order.
    pub fn grid(&self) -> Vec<Regime> {
        let mut out: Vec<Regime> = Vec::new();
        for &k in &self.experiments {
            for r in self.experiment_grid(k) {
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn selector(&self, kind: ExperimentKind) -> EvalSelector {
        self.eval_partition.get(&kind).copied().unwrap_or(kind.default_selector())
    }

    fn selectors(&self) -> Vec<EvalSelector> {
        self.experiments
            .iter()
            .map(|&k| self.selector(k))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// (regime, selector) pairs that need a metric table.
    fn evaluations(&self) -> Vec<(Regime, EvalSelector)> {
        let mut out = Vec::new();
        for r in self.grid() {
            for &k in &self.experiments {
                let pair = (r, self.selector(k));
                if self.experiment_grid(k).contains(&r) && !out.contains(&pair) {
                    out.push(pair);
                }
            }
        }
        out
    }

    /// Eval set the shuffle ablation runs on: the rare experiment's if
    /// selected, otherwise that of the first experiment other than the shift.
    fn shuffle_selector(&self) -> Option<EvalSelector> {
        if self.eval.shuffle_shots.is_empty() {
            return None;
        }
        let mut kinds = self.experiments.iter().filter(|&&k| k != ExperimentKind::Shift);
        let rare = self.experiments.contains(&ExperimentKind::Rare);
        kinds
            .find(|&&k| !rare || k == ExperimentKind::Rare)
            .map(|&k| self.selector(k))
    }

    /// Digest of everything that determines the results (not the output location).
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        digest_of(&c)
    }

    /// `output_dir`, else `$LAB_OUTPUT_ROOT/<name>`, else `runs/<name>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        root.join(&self.name)
    }

    /// Model config with vocabulary and clip sizes filled in.
    pub fn resolved_model(&self, tokenizer: &Tokenizer) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = tokenizer.len();
        } else if m.vocab_size != tokenizer.len() {
            return Err(Error::config(format!(
                "model.vocab_size {} does not match the tokenizer's {}",
                m.vocab_size,
                tokenizer.len()
            )));
        }
        if m.clip_dim == 0 {
            m.clip_dim = 2 * self.corpus.prototype_dim;
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub input_digest: String,
    /// UNIX seconds.
    pub started: u64,
    pub finished: Option<u64>,
    pub artifacts: Vec<Artifact>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("manifest.json.partial");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    fn upsert(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned()
}

/// Files below `path` (or `path` itself), sorted.
fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path)? {
        out.extend(files_under(&entry?.path())?);
    }
    out.sort();
    Ok(out)
}

struct Runner {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Runner {
    /// Run `body` unless a finished record with the same input digest and
    /// intact artifacts exists. `body` returns the paths it produced.
    fn stage(&mut self, name: &str, input_digest: &str, body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>) -> Result<()> {
        if let Some(rec) = self.manifest.stage(name) {
            if rec.status == StageStatus::Done && rec.input_digest == input_digest && self.intact(rec) {
                log::info!("{name}: up to date");
                return Ok(());
            }
        }
        log::info!("{name}: running");
        let mut rec = StageRecord {
            name: name.into(),
            status: StageStatus::Running,
            input_digest: input_digest.into(),
            started: now(),
            finished: None,
            artifacts: Vec::new(),
            error: None,
        };
        self.manifest.upsert(rec.clone());
        self.manifest.save(&self.dir)?;
        let produced = body(&self.dir).and_then(|paths| {
            let mut arts = Vec::new();
            for p in paths {
                for f in files_under(&p)? {
                    arts.push(Artifact {
                        path: rel(&self.dir, &f),
                        sha256: file_digest(&f)?,
                    });
                }
            }
            Ok(arts)
        });
        rec.finished = Some(now());
        match produced {
            Ok(arts) => {
                rec.status = StageStatus::Done;
                rec.artifacts = arts;
                self.manifest.upsert(rec);
                self.manifest.save(&self.dir)
            }
            Err(e) => {
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                self.manifest.upsert(rec);
                self.manifest.save(&self.dir)?;
                Err(e.in_stage(name))
            }
        }
    }

    fn intact(&self, rec: &StageRecord) -> bool {
        !rec.artifacts.is_empty()
            && rec
                .artifacts
                .iter()
                .all(|a| file_digest(&self.dir.join(&a.path)).is_ok_and(|d| d == a.sha256))
    }

    /// Digest over the artifacts of finished stages, used to chain inputs.
    fn outputs_of(&self, names: &[String]) -> String {
        let arts: Vec<(&str, &[Artifact])> = names
            .iter()
            .map(|n| {
                let a = self.manifest.stage(n).map(|s| s.artifacts.as_slice()).unwrap_or(&[]);
                (n.as_str(), a)
            })
            .collect();
        digest_of(&arts)
    }
}

fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(format!("seed-{seed}"))
}

fn regime_dir(seed: u64, regime: &Regime) -> PathBuf {
    seed_dir(seed).join(regime.label())
}

fn eval_table_path(seed: u64, regime: &Regime, sel: EvalSelector) -> PathBuf {
    regime_dir(seed, regime).join(format!("eval-{}.json", sel.slug()))
}

fn shuffle_path(seed: u64, regime: &Regime, sel: EvalSelector) -> PathBuf {
    regime_dir(seed, regime).join(format!("shuffle-{}.json", sel.slug()))
}

/// Corpus and eval-set locations of a run.
struct Inputs {
    corpus: Corpus,
    shifted: Option<Corpus>,
    tokenizer: Tokenizer,
}

impl Inputs {
    fn load(dir: &Path) -> Result<Self> {
        let corpus = Corpus::load(&dir.join("corpus"))?;
        let shifted_dir = dir.join("shifted");
        let shifted = if shifted_dir.exists() {
            Some(Corpus::load(&shifted_dir)?)
        } else {
            None
        };
        let tokenizer = Tokenizer::new([Some(&corpus.lexicon), shifted.as_ref().map(|c| &c.lexicon)].into_iter().flatten());
        Ok(Self {
            corpus,
            shifted,
            tokenizer,
        })
    }

    fn corpus_for(&self, sel: EvalSelector) -> Result<&Corpus> {
        match sel {
            EvalSelector::ShiftedCorpus => self
                .shifted
                .as_ref()
                .ok_or_else(|| Error::config("shifted corpus was not built")),
            _ => Ok(&self.corpus),
        }
    }
}

/// Execute (or resume) the run described by `config` in `dir`.
pub fn run_in(config: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let digest = config.digest();
    let manifest = match RunManifest::load(dir) {
        Ok(m) if m.config_digest != digest => {
            return Err(Error::config(format!(
                "{} holds a run with a different config digest; use a fresh output directory",
                dir.display()
            )))
        }
        Ok(m) => m,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            config_digest: digest.clone(),
            stages: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    let mut stored = config.clone();
    stored.output_dir = None;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&stored)?)?;
    let mut runner = Runner {
        dir: dir.to_path_buf(),
        manifest,
    };

    let with_shift = config.experiments.contains(&ExperimentKind::Shift);
    runner.stage("corpus", &digest_of(&(&config.corpus, with_shift, config.eval.shift_episodes)), |d| {
        let corpus = build_corpus(&config.corpus)?;
        corpus.save(&d.join("corpus"))?;
        let mut out = vec![d.join("corpus")];
        if with_shift {
            let shifted = corpus.shifted(config.eval.shift_episodes, config.corpus.seed)?;
            shifted.save(&d.join("shifted"))?;
            out.push(d.join("shifted"));
        }
        Ok(out)
    })?;
    let inputs = Inputs::load(dir).map_err(|e| e.in_stage("corpus"))?;
    let model_cfg = config.resolved_model(&inputs.tokenizer).map_err(|e| e.in_stage("train"))?;
    let corpus_out = runner.outputs_of(&["corpus".into()]);

    for sel in config.selectors() {
        let name = format!("eval-set:{}", sel.slug());
        let input = digest_of(&(&corpus_out, sel, config.eval.size, config.context_size));
        runner.stage(&name, &input, |d| {
            let corpus = inputs.corpus_for(sel)?;
            let set = build_eval_set(corpus, sel.partition(), config.eval.size, config.context_size, config.corpus.seed)?;
            let out = d.join("eval").join(sel.slug());
            set.save(&out, corpus)?;
            Ok(vec![out])
        })?;
    }

    for &seed in &config.seeds {
        for regime in config.grid() {
            let rdir = regime_dir(seed, &regime);
            let ds_stage = format!("dataset:{seed}:{}", regime.label());
            let input = digest_of(&(&corpus_out, regime, config.train_size, config.context_size, seed));
            runner.stage(&ds_stage, &input, |d| {
                let set = build_training_set(&inputs.corpus, regime, config.train_size, config.context_size, seed)?;
                for w in &set.warnings {
                    log::warn!("{}: {w}", regime.label());
                }
                let out = d.join(&rdir).join("dataset");
                set.save(&out, &inputs.corpus)?;
                Ok(vec![out])
            })?;

            let train_stage = format!("train:{seed}:{}", regime.label());
            let mut tc = config.train.clone();
            tc.seed = seed;
            let input = digest_of(&(runner.outputs_of(std::slice::from_ref(&ds_stage)), &model_cfg, &tc));
            runner.stage(&train_stage, &input, |d| {
                let set = CuratedDataset::load(&d.join(&rdir).join("dataset"))?;
                let path = d.join(&rdir).join("model.ckpt");
                match tc.precision {
                    Precision::Single => train_one::<f32>(&inputs, &set, &model_cfg, &tc, &path)?,
                    Precision::Double => train_one::<f64>(&inputs, &set, &model_cfg, &tc, &path)?,
                }
                Ok(vec![path])
            })?;

            for (r, sel) in config.evaluations() {
                if r != regime {
                    continue;
                }
                let stage = format!("eval:{seed}:{}:{}", regime.label(), sel.slug());
                let set_stage = format!("eval-set:{}", sel.slug());
                let input = digest_of(&(
                    runner.outputs_of(&[train_stage.clone(), set_stage]),
                    &config.shots,
                    config.eval.max_new_tokens,
                ));
                runner.stage(&stage, &input, |d| {
                    let out = d.join(eval_table_path(seed, &regime, sel));
                    let table = match config.train.precision {
                        Precision::Single => eval_one::<f32>(d, &inputs, sel, &regime, seed, config)?,
                        Precision::Double => eval_one::<f64>(d, &inputs, sel, &regime, seed, config)?,
                    };
                    table.save_json(&out)?;
                    let csv = out.with_extension("csv");
                    table.write_csv(&csv)?;
                    Ok(vec![out, csv])
                })?;
            }

            if let Some(sel) = config.shuffle_selector().filter(|_| regime == Regime::FULL) {
                let stage = format!("shuffle:{seed}:{}:{}", regime.label(), sel.slug());
                let set_stage = format!("eval-set:{}", sel.slug());
                let input = digest_of(&(
                    runner.outputs_of(&[train_stage.clone(), set_stage]),
                    &config.eval.shuffle_shots,
                    config.eval.max_new_tokens,
                ));
                runner.stage(&stage, &input, |d| {
                    let out = d.join(shuffle_path(seed, &regime, sel));
                    let ab = match config.train.precision {
                        Precision::Single => shuffle_one::<f32>(d, &inputs, sel, &regime, seed, config)?,
                        Precision::Double => shuffle_one::<f64>(d, &inputs, sel, &regime, seed, config)?,
                    };
                    fs::write(&out, serde_json::to_vec_pretty(&ab)?)?;
                    Ok(vec![out])
                })?;
            }
        }
    }

    let upstream: Vec<String> = runner
        .manifest
        .stages
        .iter()
        .filter(|s| s.name.starts_with("eval:") || s.name.starts_with("shuffle:"))
        .map(|s| s.name.clone())
        .collect();
    let input = runner.outputs_of(&upstream);
    runner.stage("report", &input, |d| {
        let report = build_report(d, config)?;
        let mut out = write_report(d, &report)?;
        out.extend(write_plot_csvs(d, &report)?);
        Ok(out)
    })?;
    Ok(dir.to_path_buf())
}

/// Load a config file and execute it in its resolved output directory.
pub fn run(config_path: &Path) -> Result<PathBuf> {
    let config = ExperimentConfig::load(config_path)?;
    run_in(&config, &config.resolve_output_dir())
}

fn load_eval_instances<'a>(dir: &Path, corpus: &'a Corpus, sel: EvalSelector) -> Result<Vec<ContextQueryInstance<'a>>> {
    let set = CuratedDataset::load(&dir.join("eval").join(sel.slug()))?;
    set.instances
        .iter()
        .map(|r| r.materialize(corpus, TemplateRole::QueryEval))
        .collect()
}

fn train_one<T: Scalar>(
    inputs: &Inputs,
    set: &CuratedDataset,
    model: &ModelConfig,
    tc: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let seqs = set
        .instances
        .iter()
        .map(|r| {
            let inst = r.materialize(&inputs.corpus, TemplateRole::QueryTrain)?;
            assemble_sequence::<T>(&inst, &inputs.tokenizer, model, set.context_size, SequencePurpose::Train)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::<T>::init(model.clone(), tc.seed)?;
    let outcome = train(params, &seqs, tc)?;
    Checkpoint::from_outcome(outcome, inputs.tokenizer.clone(), tc).save(out)
}

fn eval_one<T: Scalar>(
    dir: &Path,
    inputs: &Inputs,
    sel: EvalSelector,
    regime: &Regime,
    seed: u64,
    config: &ExperimentConfig,
) -> Result<MetricTable> {
    let ck = Checkpoint::<T>::load(&dir.join(regime_dir(seed, regime)).join("model.ckpt"))?;
    let corpus = inputs.corpus_for(sel)?;
    let instances = load_eval_instances(dir, corpus, sel)?;
    let label = regime.label();
    let ev = Evaluator {
        variant: &label,
        params: &ck.params,
        tokenizer: &ck.tokenizer,
        lexicon: &corpus.lexicon,
        max_new_tokens: config.eval.max_new_tokens,
    };
    let mut table = evaluate_k_shot(&ev, &instances, &config.shots)?;
    table.metadata.insert("seed".into(), seed.to_string());
    table.metadata.insert("eval_set".into(), sel.slug().into());
    Ok(table)
}

fn shuffle_one<T: Scalar>(
    dir: &Path,
    inputs: &Inputs,
    sel: EvalSelector,
    regime: &Regime,
    seed: u64,
    config: &ExperimentConfig,
) -> Result<ShuffleAblation> {
    let ck = Checkpoint::<T>::load(&dir.join(regime_dir(seed, regime)).join("model.ckpt"))?;
    let corpus = inputs.corpus_for(sel)?;
    let instances = load_eval_instances(dir, corpus, sel)?;
    let label = regime.label();
    let ev = Evaluator {
        variant: &label,
        params: &ck.params,
        tokenizer: &ck.tokenizer,
        lexicon: &corpus.lexicon,
        max_new_tokens: config.eval.max_new_tokens,
    };
    shuffle_ablation(&ev, &instances, &config.eval.shuffle_shots, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ClassMatch,
    RougeLF,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::ClassMatch, Metric::RougeLF];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ClassMatch => "class_match",
            Metric::RougeLF => "rouge_l_f",
        }
    }
}

/// One point of a k-shot curve. `seed` is `None` for the pooled value,
/// whose `stderr` is taken across seeds; per-seed `stderr` is across instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub regime: String,
    pub seed: Option<u64>,
    pub shot: usize,
    pub metric: Metric,
    #[serde(with = "crate::evaluation::nan_as_null")]
    pub mean: f64,
    #[serde(with = "crate::evaluation::nan_as_null")]
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPoint {
    pub action: Action,
    pub log_train_count: f64,
    pub delta: f64,
}

/// Per-action class-match gain regressed on log training frequency of one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRegression {
    pub seed: u64,
    pub side: PartOfSpeech,
    pub hi_shot: usize,
    pub lo_shot: usize,
    pub result: Option<RegressionResult>,
    /// Why `result` is missing.
    pub error: Option<String>,
    pub points: Vec<RegressionPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularyAudit {
    pub training_words: usize,
    pub shifted_words: usize,
    pub shared: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub eval_set: EvalSelector,
    pub regimes: Vec<String>,
    pub curves: Vec<CurvePoint>,
    pub regressions: Vec<SeedRegression>,
    pub vocabulary_audit: Option<VocabularyAudit>,
}

impl ExperimentReport {
    /// Curve value for one regime and shot; `seed: None` is the pooled mean.
    pub fn value(&self, regime: &str, seed: Option<u64>, shot: usize, metric: Metric) -> Option<f64> {
        self.curves
            .iter()
            .find(|p| p.regime == regime && p.seed == seed && p.shot == shot && p.metric == metric)
            .map(|p| p.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedShuffle {
    pub seed: u64,
    pub row: ShuffleRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub regime: String,
    pub eval_set: EvalSelector,
    pub rows: Vec<SeedShuffle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_digest: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub experiments: Vec<ExperimentReport>,
    pub shuffle: Option<ShuffleReport>,
}

impl Report {
    pub fn load(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(run_dir.join(REPORT_FILE))?)?)
    }

    pub fn experiment(&self, kind: ExperimentKind) -> Option<&ExperimentReport> {
        self.experiments.iter().find(|e| e.kind == kind)
    }
}

fn load_table(path: &Path) -> Result<MetricTable> {
    if !path.exists() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "metric table is missing".into(),
        });
    }
    MetricTable::load_json(path)
}

/// Assemble the report from the metric tables stored under `run_dir`.
pub fn build_report(run_dir: &Path, config: &ExperimentConfig) -> Result<Report> {
    let mut experiments = Vec::new();
    for &kind in &config.experiments {
        let sel = config.selector(kind);
        let grid = config.experiment_grid(kind);
        let labels: Vec<String> = grid.iter().map(Regime::label).collect();
        let mut curves = Vec::new();
        let mut per_seed: BTreeMap<u64, MetricTable> = BTreeMap::new();
        for &seed in &config.seeds {
            let mut merged = MetricTable::default();
            for r in &grid {
                merged.merge(load_table(&run_dir.join(eval_table_path(seed, r, sel)))?);
            }
            for label in &labels {
                for &shot in &config.shots {
                    let a = merged.aggregate(label, shot);
                    for (metric, ms) in [(Metric::ClassMatch, a.class_match), (Metric::RougeLF, a.rouge_l_f)] {
                        curves.push(CurvePoint {
                            regime: label.clone(),
                            seed: Some(seed),
                            shot,
                            metric,
                            mean: ms.mean,
                            stderr: ms.se,
                            n: a.n,
                        });
                    }
                }
            }
            per_seed.insert(seed, merged);
        }
        for label in &labels {
            for &shot in &config.shots {
                for metric in Metric::ALL {
                    let xs: Vec<f64> = curves
                        .iter()
                        .filter(|p| &p.regime == label && p.shot == shot && p.metric == metric && p.seed.is_some())
                        .map(|p| p.mean)
                        .collect();
                    let ms = crate::evaluation::MeanSe::of(&xs);
                    curves.push(CurvePoint {
                        regime: label.clone(),
                        seed: None,
                        shot,
                        metric,
                        mean: ms.mean,
                        stderr: ms.se,
                        n: xs.len(),
                    });
                }
            }
        }
        let regressions = if kind == ExperimentKind::Rare {
            rare_regressions(run_dir, config, &per_seed)?
        } else {
            Vec::new()
        };
        let vocabulary_audit = if kind == ExperimentKind::Shift {
            let train = Corpus::load(&run_dir.join("corpus"))?.lexicon.words();
            let shifted = Corpus::load(&run_dir.join("shifted"))?.lexicon.words();
            Some(VocabularyAudit {
                training_words: train.len(),
                shifted_words: shifted.len(),
                shared: train.intersection(&shifted).cloned().collect(),
            })
        } else {
            None
        };
        experiments.push(ExperimentReport {
            kind,
            eval_set: sel,
            regimes: labels,
            curves,
            regressions,
            vocabulary_audit,
        });
    }
    let shuffle = match config.shuffle_selector() {
        Some(sel) => {
            let mut rows = Vec::new();
            for &seed in &config.seeds {
                let path = run_dir.join(shuffle_path(seed, &Regime::FULL, sel));
                let ab: ShuffleAblation = serde_json::from_slice(&fs::read(&path)?)?;
                rows.extend(ab.rows.into_iter().map(|row| SeedShuffle { seed, row }));
            }
            Some(ShuffleReport {
                regime: Regime::FULL.label(),
                eval_set: sel,
                rows,
            })
        }
        None => None,
    };
    Ok(Report {
        name: config.name.clone(),
        config_digest: config.digest(),
        tool_version: TOOL_VERSION.into(),
        seeds: config.seeds.clone(),
        shots: config.shots.clone(),
        experiments,
        shuffle,
    })
}

fn rare_regressions(
    run_dir: &Path,
    config: &ExperimentConfig,
    tables: &BTreeMap<u64, MetricTable>,
) -> Result<Vec<SeedRegression>> {
    let corpus = Corpus::load(&run_dir.join("corpus"))?;
    let (lo, hi) = (config.shots[0], *config.shots.last().expect("validated nonempty"));
    let label = Regime::FULL.label();
    let mut out = Vec::new();
    for (&seed, table) in tables {
        let delta = per_action_delta(table, &label, hi, lo);
        for side in [PartOfSpeech::Verb, PartOfSpeech::Noun] {
            let counts = corpus.train_class_counts(side);
            let points = delta
                .iter()
                .filter_map(|(a, &d)| {
                    let class = if side == PartOfSpeech::Verb { a.verb } else { a.noun };
                    counts.get(&class).filter(|&&c| c > 0).map(|&c| RegressionPoint {
                        action: *a,
                        log_train_count: (c as f64).ln(),
                        delta: d,
                    })
                })
                .collect();
            let (result, error) = match icw_regression(&delta, &counts, side) {
                Ok(r) => (Some(r), None),
                Err(e @ Error::InsufficientData(_)) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            out.push(SeedRegression {
                seed,
                side,
                hi_shot: hi,
                lo_shot: lo,
                result,
                error,
                points,
            });
        }
    }
    Ok(out)
}

fn write_report(run_dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    let path = run_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(report)?)?;
    Ok(vec![path])
}

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn seed_cell(seed: Option<u64>) -> String {
    seed.map_or_else(|| "all".into(), |s| s.to_string())
}

fn write_curves(path: &Path, points: &[&CurvePoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "regime,seed,shot,metric,mean,stderr")?;
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        (a.metric, a.seed.is_none(), a.seed, &a.regime, a.shot).cmp(&(b.metric, b.seed.is_none(), b.seed, &b.regime, b.shot))
    });
    for p in sorted {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.regime,
            seed_cell(p.seed),
            p.shot,
            p.metric.name(),
            p.mean,
            p.stderr
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One tidy CSV per plot under `run_dir/plots`, plus per-seed aggregate
/// CSVs of each experiment's merged tables.
fn write_plot_csvs(run_dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    let plots = run_dir.join("plots");
    let mut written = Vec::new();
    for exp in &report.experiments {
        match exp.kind {
            ExperimentKind::Skew => {
                let all = Regime::FULL.label();
                for label in exp.regimes.iter().filter(|l| **l != all) {
                    let tier = label.rsplit('-').next().unwrap_or(label);
                    let path = plots.join(format!("skew-{tier}.csv"));
                    let pts: Vec<&CurvePoint> =
                        exp.curves.iter().filter(|p| &p.regime == label || p.regime == all).collect();
                    write_curves(&path, &pts)?;
                    written.push(path);
                }
            }
            kind => {
                let path = plots.join(format!("{kind}.csv"));
                write_curves(&path, &exp.curves.iter().collect::<Vec<_>>())?;
                written.push(path);
            }
        }
        if !exp.regressions.is_empty() {
            let path = plots.join("rare-regression.csv");
            let mut w = csv_writer(&path)?;
            writeln!(
                w,
                "regime,seed,side,verb,noun,log_train_count,delta,slope,intercept,r_squared"
            )?;
            let label = Regime::FULL.label();
            for r in &exp.regressions {
                let side = if r.side == PartOfSpeech::Verb { "verb" } else { "noun" };
                let (slope, intercept, r2) = r
                    .result
                    .as_ref()
                    .map_or((f64::NAN, f64::NAN, f64::NAN), |x| (x.slope, x.intercept, x.r_squared));
                for p in &r.points {
                    writeln!(
                        w,
                        "{label},{},{side},{},{},{},{},{slope},{intercept},{r2}",
                        r.seed, p.action.verb, p.action.noun, p.log_train_count, p.delta
                    )?;
                }
            }
            w.flush()?;
            written.push(path);
        }
    }
    if let Some(sh) = &report.shuffle {
        let path = plots.join("shuffle.csv");
        let mut w = csv_writer(&path)?;
        writeln!(w, "regime,seed,shot,metric,condition,mean,stderr,pct_change")?;
        for metric in Metric::ALL {
            for s in &sh.rows {
                for (cond, agg) in [("matched", &s.row.control), ("shuffled", &s.row.treatment)] {
                    let (ms, pct) = match metric {
                        Metric::ClassMatch => (agg.class_match, s.row.class_match_pct),
                        Metric::RougeLF => (agg.rouge_l_f, s.row.rouge_l_pct),
                    };
                    writeln!(
                        w,
                        "{},{},{},{},{cond},{},{},{pct}",
                        sh.regime,
                        s.seed,
                        s.row.shot,
                        metric.name(),
                        ms.mean,
                        ms.se
                    )?;
                }
            }
        }
        w.flush()?;
        written.push(path);
    }
    for exp in &report.experiments {
        for &seed in &report.seeds {
            let path = run_dir.join(seed_dir(seed)).join(format!("aggregate-{}.csv", exp.kind));
            let mut w = csv_writer(&path)?;
            writeln!(w, "variant,shot,n,rouge_l_f_mean,rouge_l_f_se,class_match_mean,class_match_se")?;
            for label in &exp.regimes {
                for &shot in &report.shots {
                    let get = |m| {
                        exp.curves
                            .iter()
                            .find(|p| &p.regime == label && p.seed == Some(seed) && p.shot == shot && p.metric == m)
                    };
                    if let (Some(r), Some(c)) = (get(Metric::RougeLF), get(Metric::ClassMatch)) {
                        writeln!(w, "{label},{shot},{},{},{},{},{}", c.n, r.mean, r.stderr, c.mean, c.stderr)?;
                    }
                }
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Rebuild the report from a run's metric tables and rewrite `report.json` and the plot CSVs.
pub fn analyze(run_dir: &Path) -> Result<Report> {
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let report = build_report(run_dir, &config)?;
    write_report(run_dir, &report)?;
    write_plot_csvs(run_dir, &report)?;
    Ok(report)
}

/// Write the tidy plot CSVs of a completed run; returns their paths.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let report = build_report(run_dir, &config)?;
    write_plot_csvs(run_dir, &report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_follow_the_experiments() {
        let c = ExperimentConfig {
            experiments: vec![ExperimentKind::Bursty],
            ..ExperimentConfig::default()
        };
        let labels: Vec<String> = c.grid().iter().map(Regime::label).collect();
        assert_eq!(labels, ["bursty-dynamic-ALL", "random-dynamic-ALL"]);
        let all = ExperimentConfig::default();
        let labels: Vec<String> = all.grid().iter().map(Regime::label).collect();
        assert_eq!(
            labels,
            [
                "bursty-dynamic-ALL",
                "random-dynamic-ALL",
                "bursty-dynamic-T20",
                "bursty-dynamic-T100",
                "bursty-canonical-ALL"
            ]
        );
    }

    #[test]
    fn explicit_grid_must_match() {
        let mut c = ExperimentConfig {
            experiments: vec![ExperimentKind::Meaning],
            ..ExperimentConfig::default()
        };
        c.regimes = Some(vec![Regime::FULL]);
        assert!(c.validate().unwrap_err().is_config_error());
        c.regimes = Some(c.grid());
        c.validate().unwrap();
    }

    #[test]
    fn config_json_round_trips_and_checks_schema() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        let bumped = text.replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(ExperimentConfig::from_json(&bumped).unwrap_err().is_config_error());
        let extra = text.replacen('{', "{\"bogus\":1,", 1);
        assert!(ExperimentConfig::from_json(&extra).unwrap_err().is_config_error());
    }

    #[test]
    fn rejects_bad_partitions_and_seeds() {
        let mut c = ExperimentConfig::default();
        c.eval_partition.insert(ExperimentKind::Rare, EvalSelector::Random7525);
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("/elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig {
            corpus: CorpusConfig {
                seed: 9,
                ..a.corpus.clone()
            },
            ..a.clone()
        };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn shuffle_prefers_the_rare_eval_set() {
        let c = ExperimentConfig {
            experiments: vec![ExperimentKind::Meaning, ExperimentKind::Rare],
            ..ExperimentConfig::default()
        };
        assert_eq!(c.shuffle_selector(), Some(EvalSelector::RareHeldOut));
        let c = ExperimentConfig {
            experiments: vec![ExperimentKind::Shift, ExperimentKind::Meaning],
            ..ExperimentConfig::default()
        };
        assert_eq!(c.shuffle_selector(), Some(EvalSelector::Random7525));
    }
}
