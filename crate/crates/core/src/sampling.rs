//! Context-query instance construction.
//!
//! A training or evaluation instance is a query episode plus an ordered
//! context of other episodes, each rendered as a question/answer pair through
//! one of nine templates. Contexts are either bursty (half share the query's
//! verb class, half its noun class, none share both) or uniform random.
//! Training sets can further be restricted to the top-N common actions and
//! upsampled back to a fixed size.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, Clip, Corpus, Episode, MeaningMode, Partition, NARRATION_FRAME, NOUN_SLOT, VERB_SLOT};
use crate::error::{Error, MatchSide, Result};
use crate::seed::{digest_of, mix_seed, rng_from_seed, streams};

pub const DEFAULT_CONTEXT_SIZE: usize = 16;
pub const DEFAULT_MAX_QUERY_RESAMPLES: usize = 100;
const NARRATION_SLOT: &str = "{narration}";

/// Question/answer frames; `{narration}` marks the answer.
pub const TEMPLATES: [&str; 9] = [
    "What is the camera wearer doing? {narration}",
    "Question: What is the camera wearer doing? {narration}",
    "What is the camera wearer doing? An answer to the question is {narration}",
    "Q: What is the camera wearer doing? A: {narration}",
    "Given the video, answer the following question.\nWhat is the camera wearer doing? {narration}",
    "Based on the video, respond to this question:\nWhat is the camera wearer doing? Answer: {narration}",
    "Use the provided video to answer the question:\nWhat is the camera wearer doing? {narration}",
    "What is the answer to the following question?\n\"What is the camera wearer doing?\" {narration}",
    "The question \"What is the camera wearer doing?\" can be answered using the video.\nThe answer is {narration}",
];

/// Every whitespace token that can appear outside the verb and noun slots.
pub fn fixed_words() -> Vec<&'static str> {
    let mut words: BTreeSet<&'static str> = TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != NARRATION_SLOT)
        .collect();
    for (i, w) in NARRATION_FRAME.iter().enumerate() {
        if i != VERB_SLOT && i != NOUN_SLOT {
            words.insert(w);
        }
    }
    words.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateRole {
    Context,
    QueryTrain,
    /// Question only; the narration is kept aside as the gold reference.
    QueryEval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

impl QaPair {
    pub fn render(&self) -> String {
        if self.answer.is_empty() {
            self.question.clone()
        } else {
            format!("{} {}", self.question, self.answer)
        }
    }
}

pub fn apply_template(narration: &[String], template_id: usize, role: TemplateRole) -> Result<QaPair> {
    let template = TEMPLATES
        .get(template_id)
        .ok_or_else(|| Error::Lookup(format!("template id {template_id} outside 0..{}", TEMPLATES.len())))?;
    let question = template
        .strip_suffix(NARRATION_SLOT)
        .expect("templates end with the narration slot")
        .trim_end()
        .to_string();
    let answer = match role {
        TemplateRole::QueryEval => String::new(),
        TemplateRole::Context | TemplateRole::QueryTrain => narration.join(" "),
    };
    Ok(QaPair { question, answer })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Bursty,
    Random,
}

/// How many of the most frequent common actions a training set keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SkewTier {
    Top(usize),
    All,
}

impl SkewTier {
    pub fn cutoff(self) -> Option<usize> {
        match self {
            SkewTier::Top(n) => Some(n),
            SkewTier::All => None,
        }
    }
}

impl fmt::Display for SkewTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkewTier::Top(n) => write!(f, "T{n}"),
            SkewTier::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for SkewTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SkewTier::All);
        }
        s.strip_prefix(['T', 't'])
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(SkewTier::Top)
            .ok_or_else(|| Error::config(format!("unknown skew tier `{s}` (expected T<n> or ALL)")))
    }
}

impl TryFrom<String> for SkewTier {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SkewTier> for String {
    fn from(t: SkewTier) -> String {
        t.to_string()
    }
}

/// One cell of the (sampling × meaning × skew) grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regime {
    pub sampling: SamplingMode,
    pub meaning: MeaningMode,
    pub tier: SkewTier,
}

impl Regime {
    /// Bursty contexts, dynamic meaning, every common action.
    pub const FULL: Regime = Regime {
        sampling: SamplingMode::Bursty,
        meaning: MeaningMode::Dynamic,
        tier: SkewTier::All,
    };

    pub fn label(&self) -> String {
        let s = match self.sampling {
            SamplingMode::Bursty => "bursty",
            SamplingMode::Random => "random",
        };
        let m = match self.meaning {
            MeaningMode::Dynamic => "dynamic",
            MeaningMode::Canonical => "canonical",
        };
        format!("{s}-{m}-{}", self.tier)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let [sampling, meaning, tier] = parts.as_slice() else {
            return Err(Error::config(format!("regime `{s}` is not <sampling>-<meaning>-<tier>")));
        };
        let sampling = match *sampling {
            "bursty" => SamplingMode::Bursty,
            "random" => SamplingMode::Random,
            other => return Err(Error::config(format!("unknown sampling mode `{other}`"))),
        };
        let meaning = match *meaning {
            "dynamic" => MeaningMode::Dynamic,
            "canonical" => MeaningMode::Canonical,
            other => return Err(Error::config(format!("unknown meaning mode `{other}`"))),
        };
        Ok(Regime {
            sampling,
            meaning,
            tier: tier.parse()?,
        })
    }
}

/// Episode lookups by verb and noun class over a fixed candidate pool.
#[derive(Clone, Debug)]
pub struct CorpusIndex {
    pool: Vec<usize>,
    by_verb: BTreeMap<usize, Vec<usize>>,
    by_noun: BTreeMap<usize, Vec<usize>>,
    actions: BTreeMap<usize, Action>,
}

impl CorpusIndex {
    pub fn new<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut index = CorpusIndex {
            pool: Vec::new(),
            by_verb: BTreeMap::new(),
            by_noun: BTreeMap::new(),
            actions: BTreeMap::new(),
        };
        for e in episodes {
            index.pool.push(e.id);
            index.by_verb.entry(e.action.verb).or_default().push(e.id);
            index.by_noun.entry(e.action.noun).or_default().push(e.id);
            index.actions.insert(e.id, e.action);
        }
        index
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn action(&self, episode: usize) -> Option<Action> {
        self.actions.get(&episode).copied()
    }

    fn verb_only(&self, query: &Episode) -> Vec<usize> {
        self.by_verb
            .get(&query.action.verb)
            .into_iter()
            .flatten()
            .copied()
            .filter(|&id| id != query.id && self.actions[&id].noun != query.action.noun)
            .collect()
    }

    fn noun_only(&self, query: &Episode) -> Vec<usize> {
        self.by_noun
            .get(&query.action.noun)
            .into_iter()
            .flatten()
            .copied()
            .filter(|&id| id != query.id && self.actions[&id].verb != query.action.verb)
            .collect()
    }
}

fn choose_distinct<R: Rng + ?Sized>(candidates: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    index::sample(rng, candidates.len(), amount)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// ⌈c/2⌉ verb-only and ⌊c/2⌋ noun-only matches, shuffled together.
pub fn sample_bursty_context<R: Rng + ?Sized>(
    query: &Episode,
    index: &CorpusIndex,
    context_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n_verb = context_size.div_ceil(2);
    let n_noun = context_size / 2;
    let verbs = index.verb_only(query);
    if verbs.len() < n_verb {
        return Err(Error::ContextInfeasible {
            side: MatchSide::Verb,
            available: verbs.len(),
            required: n_verb,
        });
    }
    let nouns = index.noun_only(query);
    if nouns.len() < n_noun {
        return Err(Error::ContextInfeasible {
            side: MatchSide::Noun,
            available: nouns.len(),
            required: n_noun,
        });
    }
    let mut context = choose_distinct(&verbs, n_verb, rng);
    context.extend(choose_distinct(&nouns, n_noun, rng));
    context.shuffle(rng);
    Ok(context)
}

/// Uniform sample without replacement from the pool, excluding the query.
pub fn sample_random_context<R: Rng + ?Sized>(
    query: &Episode,
    index: &CorpusIndex,
    context_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = index.pool.iter().copied().filter(|&id| id != query.id).collect();
    if candidates.len() < context_size {
        return Err(Error::ContextInfeasible {
            side: MatchSide::Any,
            available: candidates.len(),
            required: context_size,
        });
    }
    Ok(choose_distinct(&candidates, context_size, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceItem {
    pub episode: usize,
    pub template: usize,
}

/// A context-query instance stored by episode reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub query: InstanceItem,
    pub context: Vec<InstanceItem>,
    pub sampling: SamplingMode,
    pub meaning: MeaningMode,
    pub sub_seed: u64,
}

/// One clip with its rendered question and answer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipQa<'a> {
    pub clip: &'a Clip,
    pub question: String,
    pub answer: String,
}

/// An instance with clips and text resolved against its corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextQueryInstance<'a> {
    pub id: usize,
    pub context: Vec<ClipQa<'a>>,
    pub query: ClipQa<'a>,
    /// Gold narration of the query (always the dynamic rendering).
    pub gold: Vec<String>,
    pub gold_action: Action,
    pub sampling: SamplingMode,
    pub meaning: MeaningMode,
}

impl ContextQueryInstance<'_> {
    /// Keep only the first `k` context pairs.
    pub fn truncated(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.context.truncate(k);
        out
    }
}

impl InstanceRecord {
    /// Resolve against `corpus`. `role` must be a query role.
    pub fn materialize<'a>(&self, corpus: &'a Corpus, role: TemplateRole) -> Result<ContextQueryInstance<'a>> {
        let pair = |item: &InstanceItem, role: TemplateRole| -> Result<ClipQa<'a>> {
            let e = corpus.episode(item.episode)?;
            let qa = apply_template(e.narration(self.meaning), item.template, role)?;
            Ok(ClipQa {
                clip: &e.clip,
                question: qa.question,
                answer: qa.answer,
            })
        };
        let context = self
            .context
            .iter()
            .map(|item| pair(item, TemplateRole::Context))
            .collect::<Result<Vec<_>>>()?;
        let query_episode = corpus.episode(self.query.episode)?;
        Ok(ContextQueryInstance {
            id: self.id,
            context,
            query: pair(&self.query, role)?,
            gold: query_episode.narration_dynamic.clone(),
            gold_action: query_episode.action,
            sampling: self.sampling,
            meaning: self.meaning,
        })
    }
}

/// Per-instance constraint counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceAudit {
    pub verb_only: usize,
    pub noun_only: usize,
    pub both: usize,
    pub query_in_context: bool,
}

impl InstanceAudit {
    pub fn satisfies_bursty(&self, context_size: usize) -> bool {
        self.verb_only == context_size.div_ceil(2)
            && self.noun_only == context_size / 2
            && self.both == 0
            && !self.query_in_context
    }
}

pub fn audit_instance(record: &InstanceRecord, corpus: &Corpus) -> Result<InstanceAudit> {
    let q = corpus.episode(record.query.episode)?.action;
    let mut audit = InstanceAudit::default();
    for item in &record.context {
        if item.episode == record.query.episode {
            audit.query_in_context = true;
        }
        let a = corpus.episode(item.episode)?.action;
        match (a.verb == q.verb, a.noun == q.noun) {
            (true, true) => audit.both += 1,
            (true, false) => audit.verb_only += 1,
            (false, true) => audit.noun_only += 1,
            (false, false) => {}
        }
    }
    Ok(audit)
}

/// Constraint audit over a whole dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetAudit {
    pub instances: usize,
    pub context_items: usize,
    pub bursty_satisfied: usize,
    pub verb_only_items: usize,
    pub noun_only_items: usize,
    pub both_match_items: usize,
    pub query_in_context: usize,
    pub canonical_violations: usize,
    pub distinct_query_actions: usize,
}

impl DatasetAudit {
    pub fn both_match_rate(&self) -> f64 {
        if self.context_items == 0 {
            0.0
        } else {
            self.both_match_items as f64 / self.context_items as f64
        }
    }
}

/// Check every instance-level invariant that applies to `dataset`.
pub fn audit_dataset(dataset: &CuratedDataset, corpus: &Corpus) -> Result<DatasetAudit> {
    let mut audit = DatasetAudit {
        instances: dataset.instances.len(),
        ..DatasetAudit::default()
    };
    let mut actions = BTreeSet::new();
    for rec in &dataset.instances {
        let a = audit_instance(rec, corpus)?;
        audit.context_items += rec.context.len();
        audit.verb_only_items += a.verb_only;
        audit.noun_only_items += a.noun_only;
        audit.both_match_items += a.both;
        audit.query_in_context += usize::from(a.query_in_context);
        if a.satisfies_bursty(rec.context.len()) {
            audit.bursty_satisfied += 1;
        }
        actions.insert(corpus.episode(rec.query.episode)?.action);
        if rec.meaning == MeaningMode::Canonical {
            for item in rec.context.iter().chain(std::iter::once(&rec.query)) {
                let e = corpus.episode(item.episode)?;
                if e.narration_canonical[VERB_SLOT] != corpus.lexicon.verb_surfaces[e.action.verb][0]
                    || e.narration_canonical[NOUN_SLOT] != corpus.lexicon.noun_surfaces[e.action.noun][0]
                {
                    audit.canonical_violations += 1;
                }
            }
        }
    }
    audit.distinct_query_actions = actions.len();
    Ok(audit)
}

/// Expected both-match rate of uniform contexts drawn from `pool`: the chance
/// that a random other pool episode carries the query's action, averaged over
/// the dataset's queries.
pub fn random_both_match_base_rate(dataset: &CuratedDataset, corpus: &Corpus, pool: &[usize]) -> Result<f64> {
    let mut counts: BTreeMap<Action, usize> = BTreeMap::new();
    let pool_set: BTreeSet<usize> = pool.iter().copied().collect();
    for &id in pool {
        *counts.entry(corpus.episode(id)?.action).or_insert(0) += 1;
    }
    let mut total = 0.0;
    for rec in &dataset.instances {
        let q = corpus.episode(rec.query.episode)?;
        let same = counts.get(&q.action).copied().unwrap_or(0);
        let (same, others) = if pool_set.contains(&q.id) {
            (same - 1, pool.len() - 1)
        } else {
            (same, pool.len())
        };
        total += same as f64 / others as f64;
    }
    Ok(total / dataset.instances.len().max(1) as f64)
}

/// A fully materialized list of instance records plus how it was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuratedDataset {
    pub regime: Regime,
    pub target_size: usize,
    pub context_size: usize,
    pub seed: u64,
    pub corpus_digest: String,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub instances: Vec<InstanceRecord>,
}

impl CuratedDataset {
    pub fn skew_tier(&self) -> SkewTier {
        self.regime.tier
    }

    /// Digest over the regime, sizes, seed and corpus.
    pub fn config_digest(&self) -> String {
        digest_of(&(
            self.regime,
            self.target_size,
            self.context_size,
            self.seed,
            &self.corpus_digest,
        ))
    }
}

/// Candidate query episodes for a tier: training episodes whose action is
/// among the top-`cutoff` common actions. A cutoff beyond the number of
/// common actions clamps and is reported as a warning.
pub fn tier_queries(corpus: &Corpus, tier: SkewTier) -> (Vec<usize>, Vec<String>) {
    let mut warnings = Vec::new();
    let cutoff = match tier.cutoff() {
        Some(n) if n > corpus.split.common.len() => {
            warnings.push(format!(
                "tier {tier} exceeds the {} common actions; keeping all of them",
                corpus.split.common.len()
            ));
            corpus.split.common.len()
        }
        Some(n) => n,
        None => corpus.split.common.len(),
    };
    let kept: BTreeSet<Action> = corpus.split.common[..cutoff].iter().copied().collect();
    let queries = corpus
        .partition(Partition::Train)
        .filter(|e| kept.contains(&e.action))
        .map(|e| e.id)
        .collect();
    (queries, warnings)
}

/// How contexts are drawn for a batch of queries.
#[derive(Clone, Debug)]
pub struct InstanceSampler {
    pub index: CorpusIndex,
    pub sampling: SamplingMode,
    pub meaning: MeaningMode,
    pub context_size: usize,
    pub max_query_resamples: usize,
}

impl InstanceSampler {
    fn context<R: Rng + ?Sized>(&self, query: &Episode, rng: &mut R) -> Result<Vec<usize>> {
        match self.sampling {
            SamplingMode::Bursty => sample_bursty_context(query, &self.index, self.context_size, rng),
            SamplingMode::Random => sample_random_context(query, &self.index, self.context_size, rng),
        }
    }

    /// Build instance `id` around `first_query`, drawing replacement queries
    /// from `candidates` while the context cannot be filled.
    fn instance(
        &self,
        corpus: &Corpus,
        id: usize,
        first_query: usize,
        candidates: &[usize],
        seed: u64,
    ) -> Result<InstanceRecord> {
        let sub_seed = mix_seed(seed, streams::INSTANCES, id as u64);
        let mut rng = rng_from_seed(sub_seed);
        let mut query = first_query;
        let mut last_err = None;
        for _ in 0..=self.max_query_resamples {
            let episode = corpus.episode(query)?;
            match self.context(episode, &mut rng) {
                Ok(context) => {
                    let context = context
                        .into_iter()
                        .map(|episode| InstanceItem {
                            episode,
                            template: rng.random_range(0..TEMPLATES.len()),
                        })
                        .collect();
                    return Ok(InstanceRecord {
                        id,
                        query: InstanceItem {
                            episode: query,
                            template: rng.random_range(0..TEMPLATES.len()),
                        },
                        context,
                        sampling: self.sampling,
                        meaning: self.meaning,
                        sub_seed,
                    });
                }
                Err(e @ Error::ContextInfeasible { .. }) => {
                    last_err = Some(e);
                    query = candidates[rng.random_range(0..candidates.len())];
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::DatasetConstruction(format!(
            "instance {id}: no feasible query after {} resamples ({})",
            self.max_query_resamples,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

/// Restrict queries to a skew tier and upsample by round-robin duplication
/// to exactly `target_size` instances; duplicates get fresh contexts.
/// Contexts are drawn from the whole training partition, so only the
/// supervised query marginal changes between tiers.
pub fn curate_skew(
    corpus: &Corpus,
    regime: Regime,
    target_size: usize,
    context_size: usize,
    seed: u64,
) -> Result<CuratedDataset> {
    let (kept, warnings) = tier_queries(corpus, regime.tier);
    if kept.is_empty() {
        return Err(Error::config(format!("tier {} keeps no training episodes", regime.tier)));
    }
    if target_size < kept.len() {
        return Err(Error::config(format!(
            "target size {target_size} is below the {} kept instances of tier {}",
            kept.len(),
            regime.tier
        )));
    }
    let sampler = InstanceSampler {
        index: CorpusIndex::new(corpus.partition(Partition::Train)),
        sampling: regime.sampling,
        meaning: regime.meaning,
        context_size,
        max_query_resamples: DEFAULT_MAX_QUERY_RESAMPLES,
    };
    let instances = (0..target_size)
        .map(|i| sampler.instance(corpus, i, kept[i % kept.len()], &kept, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(CuratedDataset {
        regime,
        target_size,
        context_size,
        seed,
        corpus_digest: corpus.config_digest(),
        warnings,
        instances,
    })
}

/// Training set for `regime`. `size` defaults to the training partition size.
pub fn build_training_set(
    corpus: &Corpus,
    regime: Regime,
    size: Option<usize>,
    context_size: usize,
    seed: u64,
) -> Result<CuratedDataset> {
    let size = size.unwrap_or_else(|| corpus.partition(Partition::Train).count());
    if size == 0 {
        return Err(Error::config("training set size must be positive"));
    }
    curate_skew(corpus, regime, size, context_size, seed)
}

/// Evaluation instances: `size` distinct queries from `partition`, each with
/// a bursty dynamic-meaning context drawn from the whole corpus.
pub fn build_eval_set(
    corpus: &Corpus,
    partition: Partition,
    size: usize,
    context_size: usize,
    seed: u64,
) -> Result<CuratedDataset> {
    let mut queries: Vec<usize> = corpus.partition(partition).map(|e| e.id).collect();
    if queries.is_empty() {
        return Err(Error::config(format!("partition {partition:?} is empty")));
    }
    queries.shuffle(&mut rng_from_seed(mix_seed(seed, streams::EVAL_QUERIES, 0)));
    let sampler = InstanceSampler {
        index: CorpusIndex::new(corpus.episodes.iter()),
        sampling: SamplingMode::Bursty,
        meaning: MeaningMode::Dynamic,
        context_size,
        max_query_resamples: 0,
    };
    let mut instances = Vec::with_capacity(size);
    for &q in &queries {
        if instances.len() == size {
            break;
        }
        match sampler.instance(corpus, instances.len(), q, &queries, seed) {
            Ok(rec) => instances.push(rec),
            Err(Error::DatasetConstruction(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if instances.len() < size {
        return Err(Error::DatasetConstruction(format!(
            "only {} feasible {partition:?} queries, {size} requested",
            instances.len()
        )));
    }
    Ok(CuratedDataset {
        regime: Regime::FULL,
        target_size: size,
        context_size,
        seed,
        corpus_digest: corpus.config_digest(),
        warnings: Vec::new(),
        instances,
    })
}

const DATASET_FILE: &str = "dataset.jsonl";
const META_FILE: &str = "dataset.meta.json";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    #[serde(flatten)]
    dataset: CuratedDataset,
    regime_label: String,
    instance_count: usize,
    config_digest: String,
    audit: DatasetAudit,
}

impl CuratedDataset {
    /// Write `dataset.jsonl` and `dataset.meta.json` into `dir`.
    pub fn save(&self, dir: &Path, corpus: &Corpus) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
        for rec in &self.instances {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let meta = DatasetMeta {
            dataset: self.clone(),
            regime_label: self.regime.label(),
            instance_count: self.instances.len(),
            config_digest: self.config_digest(),
            audit: audit_dataset(self, corpus)?,
        };
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<CuratedDataset> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        let mut dataset = meta.dataset;
        let path = dir.join(DATASET_FILE);
        for line in BufReader::new(fs::File::open(&path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                dataset.instances.push(serde_json::from_str(&line)?);
            }
        }
        if dataset.instances.len() != meta.instance_count {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("expected {} instances, found {}", meta.instance_count, dataset.instances.len()),
            });
        }
        Ok(dataset)
    }

    pub fn file_path(dir: &Path) -> std::path::PathBuf {
        dir.join(DATASET_FILE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig};

    pub(crate) fn test_corpus() -> Corpus {
        build_corpus(&CorpusConfig {
            num_verbs: 8,
            num_nouns: 8,
            num_actions: 40,
            common_episodes: 1200,
            rare_episodes: 200,
            prototype_dim: 4,
            frames: 2,
            seed: 3,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn first_template_renders_worked_example() {
        let qa = apply_template(&words("the camera wearer cuts a carrot"), 0, TemplateRole::Context).unwrap();
        assert_eq!(qa.render(), "What is the camera wearer doing? the camera wearer cuts a carrot");
    }

    #[test]
    fn eval_role_withholds_answer() {
        let qa = apply_template(&words("the camera wearer cuts a carrot"), 3, TemplateRole::QueryEval).unwrap();
        assert!(qa.answer.is_empty());
        assert_eq!(qa.question, "Q: What is the camera wearer doing? A:");
    }

    #[test]
    fn template_set_shape() {
        assert_eq!(TEMPLATES.len(), 9);
        assert!(TEMPLATES.iter().all(|t| t.contains("What is the camera wearer doing?")));
        assert!(matches!(
            apply_template(&[], 9, TemplateRole::Context),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn regime_and_tier_labels_parse() {
        for s in ["bursty-dynamic-ALL", "random-canonical-T20"] {
            assert_eq!(s.parse::<Regime>().unwrap().label(), s);
        }
        assert!("bursty-dynamic".parse::<Regime>().is_err());
        assert!("T0".parse::<SkewTier>().is_err());
    }

    #[test]
    fn bursty_context_halves() {
        let c = test_corpus();
        let index = CorpusIndex::new(c.partition(Partition::Train));
        let q = c.partition(Partition::Train).next().unwrap();
        let mut rng = rng_from_seed(1);
        let ctx = sample_bursty_context(q, &index, 16, &mut rng).unwrap();
        let (mut v, mut n) = (0, 0);
        for id in &ctx {
            let a = c.episodes[*id].action;
            assert!(!(a.verb == q.action.verb && a.noun == q.action.noun));
            v += usize::from(a.verb == q.action.verb);
            n += usize::from(a.noun == q.action.noun);
        }
        assert_eq!((v, n), (8, 8));
        assert!(sample_bursty_context(q, &index, 0, &mut rng).unwrap().is_empty());
        let odd = sample_bursty_context(q, &index, 5, &mut rng).unwrap();
        assert_eq!(odd.len(), 5);
    }

    #[test]
    fn bursty_reports_short_side() {
        let c = test_corpus();
        let q = &c.episodes[0];
        let index = CorpusIndex::new(c.episodes.iter().filter(|e| e.action.noun == q.action.noun));
        let err = sample_bursty_context(q, &index, 4, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::ContextInfeasible { side: MatchSide::Verb, .. }));
    }

    #[test]
    fn random_context_exhausts_pool() {
        let c = test_corpus();
        let pool: Vec<&Episode> = c.episodes.iter().take(10).collect();
        let index = CorpusIndex::new(pool.iter().copied());
        let q = pool[3];
        let mut ctx = sample_random_context(q, &index, 9, &mut rng_from_seed(2)).unwrap();
        ctx.sort_unstable();
        assert_eq!(ctx, vec![0, 1, 2, 4, 5, 6, 7, 8, 9]);
        assert!(sample_random_context(q, &index, 10, &mut rng_from_seed(2)).is_err());
        let a = sample_random_context(q, &index, 5, &mut rng_from_seed(7)).unwrap();
        let b = sample_random_context(q, &index, 5, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_tier_at_base_size_keeps_query_multiset() {
        let c = test_corpus();
        let base = c.partition(Partition::Train).count();
        let d = curate_skew(&c, Regime::FULL, base, 4, 0).unwrap();
        let mut got: Vec<usize> = d.instances.iter().map(|r| r.query.episode).collect();
        got.sort_unstable();
        let want: Vec<usize> = c.partition(Partition::Train).map(|e| e.id).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn round_robin_upsampling_is_exact() {
        let c = test_corpus();
        let regime = Regime {
            tier: SkewTier::Top(6),
            ..Regime::FULL
        };
        let (kept, _) = tier_queries(&c, regime.tier);
        let d = curate_skew(&c, regime, kept.len() * 3, 4, 0).unwrap();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &d.instances {
            *counts.entry(r.query.episode).or_default() += 1;
        }
        // Resampled queries would perturb the counts; the test corpus is dense enough to avoid them.
        assert!(counts.values().all(|&n| n == 3), "{counts:?}");
        assert!(audit_dataset(&d, &c).unwrap().distinct_query_actions <= 6);
        assert!(curate_skew(&c, regime, kept.len() - 1, 4, 0).is_err());
    }

    #[test]
    fn tier_beyond_common_count_warns() {
        let c = test_corpus();
        let (kept, warnings) = tier_queries(&c, SkewTier::Top(10_000));
        assert_eq!(kept.len(), c.partition(Partition::Train).count());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn training_set_of_one() {
        let c = test_corpus();
        let regime = Regime {
            tier: SkewTier::Top(1),
            ..Regime::FULL
        };
        let (kept, _) = tier_queries(&c, regime.tier);
        let d = build_training_set(&c, regime, Some(kept.len()), 4, 0).unwrap();
        assert_eq!(d.instances.len(), kept.len());
    }

    fn small_set(c: &Corpus, meaning: MeaningMode, seed: u64) -> CuratedDataset {
        let regime = Regime {
            tier: SkewTier::Top(2),
            meaning,
            ..Regime::FULL
        };
        let n = tier_queries(c, regime.tier).0.len();
        build_training_set(c, regime, Some(n), 4, seed).unwrap()
    }

    #[test]
    fn template_assignment_is_seeded() {
        let c = test_corpus();
        let a = small_set(&c, MeaningMode::Dynamic, 5);
        let b = small_set(&c, MeaningMode::Dynamic, 5);
        let templates = |d: &CuratedDataset| -> Vec<usize> {
            d.instances
                .iter()
                .flat_map(|r| r.context.iter().chain([&r.query]).map(|i| i.template))
                .collect()
        };
        assert_eq!(templates(&a), templates(&b));
        let other = small_set(&c, MeaningMode::Dynamic, 6);
        assert_ne!(templates(&a), templates(&other));
    }

    #[test]
    fn eval_instances_materialize_without_answer() {
        let c = test_corpus();
        let d = build_eval_set(&c, Partition::RareEval, 10, 4, 1).unwrap();
        for rec in &d.instances {
            let inst = rec.materialize(&c, TemplateRole::QueryEval).unwrap();
            assert!(inst.query.answer.is_empty());
            assert_eq!(inst.gold, c.episodes[rec.query.episode].narration_dynamic);
            assert_eq!(inst.context.len(), 4);
            assert!(!c.split.is_common(inst.gold_action));
        }
    }

    #[test]
    fn canonical_regime_text_is_pure() {
        let c = test_corpus();
        let d = small_set(&c, MeaningMode::Canonical, 0);
        assert_eq!(audit_dataset(&d, &c).unwrap().canonical_violations, 0);
        for rec in &d.instances {
            let inst = rec.materialize(&c, TemplateRole::QueryTrain).unwrap();
            for (qa, item) in inst.context.iter().zip(&rec.context) {
                let a = c.episodes[item.episode].action;
                let w: Vec<&str> = qa.answer.split(' ').collect();
                assert_eq!(w[VERB_SLOT], c.lexicon.verb_surfaces[a.verb][0]);
                assert_eq!(w[NOUN_SLOT], c.lexicon.noun_surfaces[a.noun][0]);
            }
        }
    }

    #[test]
    fn dataset_round_trips() {
        let c = test_corpus();
        let d = small_set(&c, MeaningMode::Dynamic, 2);
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path(), &c).unwrap();
        assert_eq!(CuratedDataset::load(dir.path()).unwrap(), d);
    }
}
