//! Synthetic action corpus.
//!
//! An action is a (verb class, noun class) pair. The vocabulary assigns the
//! sampled actions a Zipfian frequency by rank, the lexicon realizes every
//! class with one or more surface words (optionally sharing words between
//! classes of the same part of speech), and each episode pairs a noisy
//! prototype clip with two renderings of its narration: a dynamic one drawn
//! from the synonym lists and a canonical one using each class's designated
//! word.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{child_rng, digest_of, mix_seed, streams};

/// Fixed sentence frame. Verb and noun slots sit at [`VERB_SLOT`] and [`NOUN_SLOT`].
pub const NARRATION_FRAME: [&str; 6] = ["the", "camera", "wearer", "<verb>", "a", "<noun>"];
pub const VERB_SLOT: usize = 3;
pub const NOUN_SLOT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub verb: usize,
    pub noun: usize,
}

impl Action {
    pub fn new(verb: usize, noun: usize) -> Self {
        Self { verb, noun }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartOfSpeech {
    Verb,
    Noun,
}

/// Sampled actions in rank order with their Zipfian frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVocabulary {
    pub num_verb_classes: usize,
    pub num_noun_classes: usize,
    pub zipf_exponent: f64,
    /// Rank order: `actions[0]` has rank 1.
    pub actions: Vec<Action>,
    /// Probability mass aligned with `actions`.
    pub frequency: Vec<f64>,
}

impl ActionVocabulary {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frequency_of(&self, action: Action) -> Option<f64> {
        self.position(action).map(|i| self.frequency[i])
    }

    pub fn position(&self, action: Action) -> Option<usize> {
        self.actions.iter().position(|&a| a == action)
    }

    /// Actions sorted by frequency descending, ties broken by `(verb, noun)`.
    pub fn by_frequency(&self) -> Vec<(Action, f64)> {
        let mut ranked: Vec<(Action, f64)> = self
            .actions
            .iter()
            .copied()
            .zip(self.frequency.iter().copied())
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }
}

/// Sample `num_actions` distinct cells of the verb × noun grid and assign
/// frequencies proportional to `rank^(-zipf_exponent)`.
pub fn build_action_vocabulary(
    num_verbs: usize,
    num_nouns: usize,
    num_actions: usize,
    zipf_exponent: f64,
    seed: u64,
) -> Result<ActionVocabulary> {
    if !(zipf_exponent >= 0.0 && zipf_exponent.is_finite()) {
        return Err(Error::config(format!(
            "zipf exponent must be finite and non-negative, got {zipf_exponent}"
        )));
    }
    let grid = num_verbs
        .checked_mul(num_nouns)
        .ok_or_else(|| Error::config("verb × noun grid overflows"))?;
    if num_actions == 0 || num_actions > grid {
        return Err(Error::config(format!(
            "num_actions must be in 1..={grid}, got {num_actions}"
        )));
    }

    let mut rng = child_rng(seed, streams::VOCAB, 0);
    let actions: Vec<Action> = index::sample(&mut rng, grid, num_actions)
        .into_iter()
        .map(|cell| Action::new(cell / num_nouns, cell % num_nouns))
        .collect();

    let weights: Vec<f64> = (1..=num_actions)
        .map(|rank| (rank as f64).powf(-zipf_exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let frequency = weights.into_iter().map(|w| w / total).collect();

    Ok(ActionVocabulary {
        num_verb_classes: num_verbs,
        num_noun_classes: num_nouns,
        zipf_exponent,
        actions,
        frequency,
    })
}

/// Surface realizations of verb and noun classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceLexicon {
    pub verb_surfaces: Vec<Vec<String>>,
    pub noun_surfaces: Vec<Vec<String>>,
    pub verb_reverse: BTreeMap<String, BTreeSet<usize>>,
    pub noun_reverse: BTreeMap<String, BTreeSet<usize>>,
}

impl SurfaceLexicon {
    /// Assemble a lexicon from forward maps, deriving the reverse maps.
    pub fn from_surfaces(verb_surfaces: Vec<Vec<String>>, noun_surfaces: Vec<Vec<String>>) -> Result<Self> {
        fn reverse(forward: &[Vec<String>], pos: &str) -> Result<BTreeMap<String, BTreeSet<usize>>> {
            let mut map: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
            for (class, words) in forward.iter().enumerate() {
                if words.is_empty() {
                    return Err(Error::config(format!("{pos} class {class} has no surface words")));
                }
                for w in words {
                    map.entry(w.clone()).or_default().insert(class);
                }
            }
            Ok(map)
        }
        let verb_reverse = reverse(&verb_surfaces, "verb")?;
        let noun_reverse = reverse(&noun_surfaces, "noun")?;
        Ok(Self {
            verb_surfaces,
            noun_surfaces,
            verb_reverse,
            noun_reverse,
        })
    }

    pub fn surfaces(&self, pos: PartOfSpeech, class: usize) -> Result<&[String]> {
        let table = match pos {
            PartOfSpeech::Verb => &self.verb_surfaces,
            PartOfSpeech::Noun => &self.noun_surfaces,
        };
        table
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown {pos:?} class {class}")))
    }

    pub fn canonical(&self, pos: PartOfSpeech, class: usize) -> Result<&str> {
        Ok(self.surfaces(pos, class)?[0].as_str())
    }

    /// Classes of the given part of speech that `word` can realize.
    pub fn classes_of(&self, pos: PartOfSpeech, word: &str) -> Option<&BTreeSet<usize>> {
        match pos {
            PartOfSpeech::Verb => self.verb_reverse.get(word),
            PartOfSpeech::Noun => self.noun_reverse.get(word),
        }
    }

    /// Surface words shared by two or more classes.
    pub fn homonyms(&self) -> Vec<(PartOfSpeech, &str)> {
        let verbs = self
            .verb_reverse
            .iter()
            .filter(|(_, c)| c.len() > 1)
            .map(|(w, _)| (PartOfSpeech::Verb, w.as_str()));
        let nouns = self
            .noun_reverse
            .iter()
            .filter(|(_, c)| c.len() > 1)
            .map(|(w, _)| (PartOfSpeech::Noun, w.as_str()));
        verbs.chain(nouns).collect()
    }

    /// Every surface word in either part of speech.
    pub fn words(&self) -> BTreeSet<String> {
        self.verb_reverse
            .keys()
            .chain(self.noun_reverse.keys())
            .cloned()
            .collect()
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Two-syllable CV-CV pseudo-words, the pool surface words are drawn from.
pub fn surface_namespace() -> Vec<String> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|c| NUCLEI.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut words = Vec::with_capacity(syllables.len() * syllables.len());
    for a in &syllables {
        for b in &syllables {
            words.push(format!("{a}{b}"));
        }
    }
    words
}

/// Build a lexicon with `synonyms_per_class` words per class and
/// `homonym_pairs` words shared between two classes of the same part of speech.
pub fn build_lexicon(
    vocab: &ActionVocabulary,
    synonyms_per_class: usize,
    homonym_pairs: usize,
    seed: u64,
) -> Result<SurfaceLexicon> {
    build_lexicon_excluding(vocab, synonyms_per_class, homonym_pairs, seed, &BTreeSet::new())
}

/// [`build_lexicon`] that never uses a word from `excluded`.
pub fn build_lexicon_excluding(
    vocab: &ActionVocabulary,
    synonyms_per_class: usize,
    homonym_pairs: usize,
    seed: u64,
    excluded: &BTreeSet<String>,
) -> Result<SurfaceLexicon> {
    let nv = vocab.num_verb_classes;
    let nn = vocab.num_noun_classes;
    if synonyms_per_class == 0 {
        return Err(Error::config("synonyms_per_class must be at least 1"));
    }
    if homonym_pairs > 0 && synonyms_per_class < 2 {
        return Err(Error::config(
            "homonyms need at least 2 synonyms per class so canonical words stay unique",
        ));
    }
    if homonym_pairs > nv / 2 + nn / 2 {
        return Err(Error::config(format!(
            "{homonym_pairs} homonym pairs exceed the {} available disjoint class pairs",
            nv / 2 + nn / 2
        )));
    }

    let reserved: BTreeSet<&str> = crate::sampling::fixed_words().into_iter().collect();
    let mut rng = child_rng(seed, streams::LEXICON, 0);
    let mut pool: Vec<String> = surface_namespace()
        .into_iter()
        .filter(|w| !excluded.contains(w) && !reserved.contains(w.as_str()))
        .collect();
    let needed = (nv + nn) * synonyms_per_class;
    if needed > pool.len() {
        return Err(Error::config(format!(
            "lexicon needs {needed} surface words, namespace offers {}",
            pool.len()
        )));
    }
    pool.shuffle(&mut rng);
    let mut words = pool.into_iter();
    let mut take_class = || -> Vec<String> { words.by_ref().take(synonyms_per_class).collect() };
    let mut verb_surfaces: Vec<Vec<String>> = (0..nv).map(|_| take_class()).collect();
    let mut noun_surfaces: Vec<Vec<String>> = (0..nn).map(|_| take_class()).collect();

    // Alternate verb and noun pairs while each side still has disjoint pairs left.
    let mut verb_order: Vec<usize> = (0..nv).collect();
    let mut noun_order: Vec<usize> = (0..nn).collect();
    verb_order.shuffle(&mut rng);
    noun_order.shuffle(&mut rng);
    let (mut verb_used, mut noun_used) = (0usize, 0usize);
    for i in 0..homonym_pairs {
        let prefer_verb = i % 2 == 0;
        let verb_free = verb_used < nv / 2;
        let noun_free = noun_used < nn / 2;
        let (table, order, used) = if (prefer_verb && verb_free) || !noun_free {
            (&mut verb_surfaces, &verb_order, &mut verb_used)
        } else {
            (&mut noun_surfaces, &noun_order, &mut noun_used)
        };
        let (a, b) = (order[2 * *used], order[2 * *used + 1]);
        *used += 1;
        let shared = table[a].last().cloned().expect("non-empty class");
        *table[b].last_mut().expect("non-empty class") = shared;
    }

    SurfaceLexicon::from_surfaces(verb_surfaces, noun_surfaces)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeaningMode {
    Dynamic,
    Canonical,
}

/// "the camera wearer VERB a NOUN", tokenized on whitespace.
pub fn render_narration<R: Rng + ?Sized>(
    action: Action,
    lexicon: &SurfaceLexicon,
    mode: MeaningMode,
    rng: &mut R,
) -> Result<Vec<String>> {
    let verbs = lexicon.surfaces(PartOfSpeech::Verb, action.verb)?;
    let nouns = lexicon.surfaces(PartOfSpeech::Noun, action.noun)?;
    let (verb, noun) = match mode {
        MeaningMode::Canonical => (&verbs[0], &nouns[0]),
        MeaningMode::Dynamic => (
            &verbs[rng.random_range(0..verbs.len())],
            &nouns[rng.random_range(0..nouns.len())],
        ),
    };
    Ok(NARRATION_FRAME
        .iter()
        .enumerate()
        .map(|(i, w)| match i {
            VERB_SLOT => verb.clone(),
            NOUN_SLOT => noun.clone(),
            _ => (*w).to_string(),
        })
        .collect())
}

/// One feature vector per verb and noun class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub verb: Vec<Vec<f32>>,
    pub noun: Vec<Vec<f32>>,
}

impl Prototypes {
    /// Unit-Gaussian prototypes of dimension `dim`.
    pub fn sample(num_verbs: usize, num_nouns: usize, dim: usize, seed: u64) -> Self {
        let mut rng = child_rng(seed, streams::PROTOTYPES, 0);
        let mut draw = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
                .collect()
        };
        let verb = draw(num_verbs);
        let noun = draw(num_nouns);
        Self { verb, noun }
    }

    pub fn dim(&self) -> usize {
        self.verb.first().or(self.noun.first()).map_or(0, Vec::len)
    }
}

/// A fixed-length sequence of frame features standing in for a video clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub frames: Vec<Vec<f32>>,
    pub source_action: Action,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

/// Each frame is `[verb prototype ; noun prototype]` plus i.i.d. Gaussian noise.
pub fn generate_clip<R: Rng + ?Sized>(
    action: Action,
    prototypes: &Prototypes,
    num_frames: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Clip> {
    if num_frames == 0 {
        return Err(Error::config("clips need at least one frame"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let verb = prototypes
        .verb
        .get(action.verb)
        .ok_or_else(|| Error::Lookup(format!("no prototype for verb class {}", action.verb)))?;
    let noun = prototypes
        .noun
        .get(action.noun)
        .ok_or_else(|| Error::Lookup(format!("no prototype for noun class {}", action.noun)))?;
    let frames = (0..num_frames)
        .map(|_| {
            verb.iter()
                .chain(noun.iter())
                .map(|&x| {
                    if noise_sigma == 0.0 {
                        x
                    } else {
                        (f64::from(x) + noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32
                    }
                })
                .collect()
        })
        .collect();
    Ok(Clip {
        frames,
        source_action: action,
    })
}

/// How `common_fraction` selects common actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Top ⌈fraction · |actions|⌉ distinct actions.
    #[default]
    DistinctCount,
    /// Smallest rank prefix holding at least `fraction` of the probability mass.
    ProbabilityMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSplit {
    /// Common actions in frequency order (most frequent first).
    pub common: Vec<Action>,
    pub rare: Vec<Action>,
}

impl ActionSplit {
    pub fn is_common(&self, action: Action) -> bool {
        self.common.contains(&action)
    }

    /// 1-based frequency rank among common actions.
    pub fn common_rank(&self, action: Action) -> Option<usize> {
        self.common.iter().position(|&a| a == action).map(|i| i + 1)
    }
}

pub fn split_common_rare(vocab: &ActionVocabulary, common_fraction: f64) -> ActionSplit {
    split_common_rare_with(vocab, common_fraction, SplitRule::DistinctCount)
}

pub fn split_common_rare_with(vocab: &ActionVocabulary, common_fraction: f64, rule: SplitRule) -> ActionSplit {
    let ranked = vocab.by_frequency();
    let n_common = match rule {
        SplitRule::DistinctCount => ((common_fraction * ranked.len() as f64) - 1e-9).ceil().max(0.0) as usize,
        SplitRule::ProbabilityMass => {
            let mut mass = 0.0;
            let mut n = 0;
            for (_, f) in &ranked {
                if mass >= common_fraction - 1e-12 {
                    break;
                }
                mass += f;
                n += 1;
            }
            n
        }
    }
    .min(ranked.len());
    let (common, rare) = ranked.split_at(n_common);
    ActionSplit {
        common: common.iter().map(|(a, _)| *a).collect(),
        rare: rare.iter().map(|(a, _)| *a).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Common-action episodes available for training.
    Train,
    /// Held-out share of the common-action episodes (same action distribution as `Train`).
    CommonEval,
    /// Rare-action episodes, never trained on.
    RareEval,
    /// Episodes of a distribution-shifted corpus.
    Shifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub action: Action,
    pub partition: Partition,
    pub clip: Clip,
    pub narration_dynamic: Vec<String>,
    pub narration_canonical: Vec<String>,
}

impl Episode {
    pub fn narration(&self, mode: MeaningMode) -> &[String] {
        match mode {
            MeaningMode::Dynamic => &self.narration_dynamic,
            MeaningMode::Canonical => &self.narration_canonical,
        }
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub num_actions: usize,
    pub zipf_exponent: f64,
    pub synonyms_per_class: usize,
    pub homonym_pairs: usize,
    pub prototype_dim: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    pub common_fraction: f64,
    pub split_rule: SplitRule,
    /// Common-action episodes, divided into `Train` and `CommonEval`.
    pub common_episodes: usize,
    pub train_fraction: f64,
    pub rare_episodes: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_verbs: 30,
            num_nouns: 30,
            num_actions: 300,
            zipf_exponent: 1.0,
            synonyms_per_class: 3,
            homonym_pairs: 4,
            prototype_dim: 16,
            frames: 8,
            noise_sigma: 1.0,
            common_fraction: 0.8,
            split_rule: SplitRule::DistinctCount,
            common_episodes: 16_000,
            train_fraction: 0.75,
            rare_episodes: 2_000,
            seed: 0,
        }
    }
}

/// Episode counts for [`sample_corpus`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeCounts {
    pub common: usize,
    pub train_fraction: f64,
    pub rare: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocabulary: ActionVocabulary,
    pub lexicon: SurfaceLexicon,
    pub prototypes: Prototypes,
    pub split: ActionSplit,
    pub seed: u64,
    #[serde(skip)]
    pub episodes: Vec<Episode>,
}

/// Generate the full corpus described by `config`.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let vocab = build_action_vocabulary(
        config.num_verbs,
        config.num_nouns,
        config.num_actions,
        config.zipf_exponent,
        config.seed,
    )?;
    let lexicon = build_lexicon(&vocab, config.synonyms_per_class, config.homonym_pairs, config.seed)?;
    let prototypes = Prototypes::sample(config.num_verbs, config.num_nouns, config.prototype_dim, config.seed);
    if !(config.common_fraction > 0.0 && config.common_fraction < 1.0) {
        return Err(Error::config("common_fraction must lie strictly between 0 and 1"));
    }
    let split = split_common_rare_with(&vocab, config.common_fraction, config.split_rule);
    let mut corpus = sample_corpus(
        &vocab,
        &lexicon,
        &prototypes,
        &split,
        EpisodeCounts {
            common: config.common_episodes,
            train_fraction: config.train_fraction,
            rare: config.rare_episodes,
        },
        config.frames,
        config.noise_sigma,
        config.seed,
    )?;
    corpus.config = config.clone();
    Ok(corpus)
}

fn draw_episodes(
    actions: &[Action],
    vocab: &ActionVocabulary,
    count: usize,
    first_id: usize,
    ctx: &EpisodeContext<'_>,
) -> Result<Vec<Episode>> {
    let weights: Vec<f64> = actions
        .iter()
        .map(|&a| vocab.frequency_of(a).expect("split actions come from the vocabulary"))
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::config(format!("action weights: {e}")))?;
    (0..count)
        .map(|i| {
            let id = first_id + i;
            let mut rng = child_rng(ctx.seed, streams::EPISODES, id as u64);
            let action = actions[dist.sample(&mut rng)];
            ctx.episode(id, action, Partition::Train, &mut rng)
        })
        .collect()
}

struct EpisodeContext<'a> {
    lexicon: &'a SurfaceLexicon,
    prototypes: &'a Prototypes,
    frames: usize,
    noise_sigma: f64,
    seed: u64,
}

impl EpisodeContext<'_> {
    fn episode<R: Rng>(&self, id: usize, action: Action, partition: Partition, rng: &mut R) -> Result<Episode> {
        let clip = generate_clip(action, self.prototypes, self.frames, self.noise_sigma, rng)?;
        let narration_dynamic = render_narration(action, self.lexicon, MeaningMode::Dynamic, rng)?;
        let narration_canonical = render_narration(action, self.lexicon, MeaningMode::Canonical, rng)?;
        Ok(Episode {
            id,
            action,
            partition,
            clip,
            narration_dynamic,
            narration_canonical,
        })
    }
}

/// Draw common-action episodes (split into train and held-out shares) and
/// rare-action episodes, each ∝ the renormalized action frequencies.
#[allow(clippy::too_many_arguments)]
pub fn sample_corpus(
    vocab: &ActionVocabulary,
    lexicon: &SurfaceLexicon,
    prototypes: &Prototypes,
    split: &ActionSplit,
    counts: EpisodeCounts,
    frames: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Corpus> {
    if split.common.is_empty() || split.rare.is_empty() {
        return Err(Error::config(format!(
            "split needs both common and rare actions (common {}, rare {})",
            split.common.len(),
            split.rare.len()
        )));
    }
    if counts.common == 0 {
        return Err(Error::config("common episode count must be positive"));
    }
    if !(counts.train_fraction > 0.0 && counts.train_fraction <= 1.0) {
        return Err(Error::config("train_fraction must lie in (0, 1]"));
    }
    let ctx = EpisodeContext {
        lexicon,
        prototypes,
        frames,
        noise_sigma,
        seed,
    };
    let mut episodes = draw_episodes(&split.common, vocab, counts.common, 0, &ctx)?;
    let n_train = ((counts.train_fraction * counts.common as f64).round() as usize).clamp(1, counts.common);
    let mut order: Vec<usize> = (0..counts.common).collect();
    order.shuffle(&mut child_rng(seed, streams::PARTITION, 0));
    for &i in &order[n_train..] {
        episodes[i].partition = Partition::CommonEval;
    }
    let mut rare = draw_episodes(&split.rare, vocab, counts.rare, counts.common, &ctx)?;
    for e in &mut rare {
        e.partition = Partition::RareEval;
    }
    episodes.extend(rare);

    let config = CorpusConfig {
        num_verbs: vocab.num_verb_classes,
        num_nouns: vocab.num_noun_classes,
        num_actions: vocab.len(),
        zipf_exponent: vocab.zipf_exponent,
        prototype_dim: prototypes.dim(),
        frames,
        noise_sigma,
        common_episodes: counts.common,
        train_fraction: counts.train_fraction,
        rare_episodes: counts.rare,
        seed,
        ..CorpusConfig::default()
    };
    Ok(Corpus {
        config,
        vocabulary: vocab.clone(),
        lexicon: lexicon.clone(),
        prototypes: prototypes.clone(),
        split: split.clone(),
        seed,
        episodes,
    })
}

const CORPUS_FILE: &str = "corpus.json";
const EPISODES_FILE: &str = "episodes.jsonl";

#[derive(Serialize)]
struct CorpusHeaderRef<'a> {
    #[serde(flatten)]
    corpus: &'a Corpus,
    config_digest: String,
    episode_count: usize,
}

#[derive(Deserialize)]
struct CorpusHeader {
    #[serde(flatten)]
    corpus: Corpus,
    config_digest: String,
    episode_count: usize,
}

impl Corpus {
    pub fn episode(&self, id: usize) -> Result<&Episode> {
        self.episodes
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("episode {id} not in corpus")))
    }

    pub fn partition(&self, partition: Partition) -> impl Iterator<Item = &Episode> + '_ {
        self.episodes.iter().filter(move |e| e.partition == partition)
    }

    pub fn config_digest(&self) -> String {
        digest_of(&self.config)
    }

    /// Training episode count per verb or noun class.
    pub fn train_class_counts(&self, pos: PartOfSpeech) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in self.partition(Partition::Train) {
            let class = match pos {
                PartOfSpeech::Verb => e.action.verb,
                PartOfSpeech::Noun => e.action.noun,
            };
            *counts.entry(class).or_insert(0) += 1;
        }
        counts
    }

    /// A second corpus over the same action structure with re-drawn
    /// prototypes and a surface vocabulary disjoint from this one. All of its
    /// episodes fall in [`Partition::Shifted`].
    pub fn shifted(&self, episodes: usize, seed: u64) -> Result<Corpus> {
        let shift_seed = mix_seed(seed, streams::SHIFT, 0);
        let lexicon = build_lexicon_excluding(
            &self.vocabulary,
            self.config.synonyms_per_class,
            self.config.homonym_pairs,
            shift_seed,
            &self.lexicon.words(),
        )?;
        let prototypes = Prototypes::sample(
            self.vocabulary.num_verb_classes,
            self.vocabulary.num_noun_classes,
            self.prototypes.dim(),
            shift_seed,
        );
        let ctx = EpisodeContext {
            lexicon: &lexicon,
            prototypes: &prototypes,
            frames: self.config.frames,
            noise_sigma: self.config.noise_sigma,
            seed: shift_seed,
        };
        let mut eps = draw_episodes(&self.vocabulary.actions, &self.vocabulary, episodes, 0, &ctx)?;
        for e in &mut eps {
            e.partition = Partition::Shifted;
        }
        let mut config = self.config.clone();
        config.seed = shift_seed;
        config.common_episodes = 0;
        config.rare_episodes = episodes;
        Ok(Corpus {
            config,
            vocabulary: self.vocabulary.clone(),
            lexicon,
            prototypes,
            split: self.split.clone(),
            seed: shift_seed,
            episodes: eps,
        })
    }

    /// Write `corpus.json` and `episodes.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = CorpusHeaderRef {
            corpus: self,
            config_digest: self.config_digest(),
            episode_count: self.episodes.len(),
        };
        fs::write(dir.join(CORPUS_FILE), serde_json::to_vec_pretty(&header)?)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(EPISODES_FILE))?);
        for e in &self.episodes {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let header: CorpusHeader = serde_json::from_slice(&fs::read(dir.join(CORPUS_FILE))?)?;
        let mut corpus = header.corpus;
        let path = dir.join(EPISODES_FILE);
        let reader = BufReader::new(fs::File::open(&path)?);
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                corpus.episodes.push(serde_json::from_str(&line)?);
            }
        }
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        if corpus.episodes.len() != header.episode_count {
            return Err(bad(format!(
                "expected {} episodes, found {}",
                header.episode_count,
                corpus.episodes.len()
            )));
        }
        if let Some(e) = corpus.episodes.iter().enumerate().find(|(i, e)| e.id != *i) {
            return Err(bad(format!("episode ids are not dense at position {}", e.0)));
        }
        if corpus.config_digest() != header.config_digest {
            return Err(bad("config digest mismatch".into()));
        }
        Ok(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn single_action_has_unit_mass() {
        let v = build_action_vocabulary(1, 1, 1, 1.0, 3).unwrap();
        assert_eq!(v.actions, vec![Action::new(0, 0)]);
        assert_eq!(v.frequency, vec![1.0]);
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let v = build_action_vocabulary(3, 3, 3, 0.0, 1).unwrap();
        for f in &v.frequency {
            assert!((f - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_exponent_three_actions() {
        let v = build_action_vocabulary(4, 4, 3, 1.0, 9).unwrap();
        let expected = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
        for (f, e) in v.frequency.iter().zip(expected) {
            assert!((f - e).abs() < 1e-15, "{f} vs {e}");
        }
    }

    #[test]
    fn vocabulary_rejects_bad_configs() {
        assert!(matches!(build_action_vocabulary(2, 2, 5, 1.0, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_action_vocabulary(2, 2, 0, 1.0, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_action_vocabulary(2, 2, 2, -0.5, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            build_action_vocabulary(usize::MAX, 2, 2, 1.0, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn vocabulary_actions_are_distinct_and_in_range() {
        let v = build_action_vocabulary(7, 5, 30, 1.2, 11).unwrap();
        let set: BTreeSet<_> = v.actions.iter().collect();
        assert_eq!(set.len(), 30);
        assert!(v.actions.iter().all(|a| a.verb < 7 && a.noun < 5));
    }

    fn small_vocab() -> ActionVocabulary {
        build_action_vocabulary(6, 8, 20, 1.0, 5).unwrap()
    }

    #[test]
    fn single_sense_lexicon_renders_identically() {
        let lex = build_lexicon(&small_vocab(), 1, 0, 2).unwrap();
        let mut rng = rng_from_seed(0);
        for a in &small_vocab().actions {
            let d = render_narration(*a, &lex, MeaningMode::Dynamic, &mut rng).unwrap();
            let c = render_narration(*a, &lex, MeaningMode::Canonical, &mut rng).unwrap();
            assert_eq!(d, c);
        }
        assert!(lex.homonyms().is_empty());
    }

    #[test]
    fn three_synonyms_per_class() {
        let lex = build_lexicon(&small_vocab(), 3, 0, 2).unwrap();
        for (pos, table) in [(PartOfSpeech::Verb, &lex.verb_surfaces), (PartOfSpeech::Noun, &lex.noun_surfaces)] {
            for (class, words) in table.iter().enumerate() {
                assert_eq!(words.len(), 3);
                for w in words {
                    assert!(lex.classes_of(pos, w).unwrap().contains(&class));
                }
            }
        }
    }

    #[test]
    fn homonym_pairs_counted_by_reverse_multiplicity() {
        let lex = build_lexicon(&small_vocab(), 3, 2, 2).unwrap();
        let shared: usize = lex
            .verb_reverse
            .values()
            .chain(lex.noun_reverse.values())
            .filter(|c| c.len() == 2)
            .count();
        assert_eq!(shared, 2);
        assert!(lex.verb_reverse.values().chain(lex.noun_reverse.values()).all(|c| c.len() <= 2));
    }

    #[test]
    fn lexicon_errors() {
        let v = small_vocab();
        assert!(build_lexicon(&v, 0, 0, 0).is_err());
        assert!(build_lexicon(&v, 1, 1, 0).is_err());
        assert!(build_lexicon(&v, 2, 8, 0).is_err());
        let big = build_action_vocabulary(3000, 3000, 10, 1.0, 0).unwrap();
        assert!(matches!(build_lexicon(&big, 2, 0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn canonical_rendering_is_deterministic() {
        let v = small_vocab();
        let lex = build_lexicon(&v, 3, 1, 2).unwrap();
        let a = v.actions[4];
        let one = render_narration(a, &lex, MeaningMode::Canonical, &mut rng_from_seed(1)).unwrap();
        let two = render_narration(a, &lex, MeaningMode::Canonical, &mut rng_from_seed(99)).unwrap();
        assert_eq!(one, two);
        assert_eq!(one[VERB_SLOT], lex.verb_surfaces[a.verb][0]);
        assert_eq!(one.join(" "), format!("the camera wearer {} a {}", one[3], one[5]));
    }

    #[test]
    fn unknown_class_is_a_lookup_error() {
        let lex = build_lexicon(&small_vocab(), 1, 0, 2).unwrap();
        let err = render_narration(Action::new(99, 0), &lex, MeaningMode::Canonical, &mut rng_from_seed(0));
        assert!(matches!(err, Err(Error::Lookup(_))));
    }

    #[test]
    fn dynamic_surface_rates_are_uniform() {
        let v = small_vocab();
        let lex = build_lexicon(&v, 2, 0, 4).unwrap();
        let a = v.actions[0];
        let first = &lex.verb_surfaces[a.verb][0];
        let mut rng = rng_from_seed(17);
        let n = 1000;
        let hits = (0..n)
            .filter(|_| &render_narration(a, &lex, MeaningMode::Dynamic, &mut rng).unwrap()[VERB_SLOT] == first)
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.5).abs() <= 0.06, "rate {rate}");
    }

    fn protos() -> Prototypes {
        Prototypes::sample(3, 4, 5, 8)
    }

    #[test]
    fn noiseless_clip_is_concatenated_prototypes() {
        let p = protos();
        let a = Action::new(2, 1);
        let c = generate_clip(a, &p, 8, 0.0, &mut rng_from_seed(0)).unwrap();
        let expected: Vec<f32> = p.verb[2].iter().chain(&p.noun[1]).copied().collect();
        assert_eq!(c.frames.len(), 8);
        assert!(c.frames.iter().all(|f| f == &expected));
        let d = generate_clip(a, &p, 8, 0.0, &mut rng_from_seed(5)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn noisy_clip_means_concentrate() {
        let p = protos();
        let a = Action::new(0, 3);
        let mut rng = rng_from_seed(21);
        let frames = 8;
        let n = 500;
        let dim = 10;
        let mut sums = vec![0.0f64; dim];
        for _ in 0..n {
            let c = generate_clip(a, &p, frames, 0.1, &mut rng).unwrap();
            for f in &c.frames {
                for (s, x) in sums.iter_mut().zip(f) {
                    *s += f64::from(*x);
                }
            }
        }
        let target: Vec<f32> = p.verb[0].iter().chain(&p.noun[3]).copied().collect();
        for (s, t) in sums.iter().zip(target) {
            let mean = s / (n * frames) as f64;
            assert!((mean - f64::from(t)).abs() < 0.02);
        }
    }

    #[test]
    fn clip_rejects_bad_inputs() {
        let p = protos();
        let mut rng = rng_from_seed(0);
        assert!(generate_clip(Action::new(0, 0), &p, 0, 0.1, &mut rng).is_err());
        assert!(generate_clip(Action::new(0, 0), &p, 2, -1.0, &mut rng).is_err());
        assert!(matches!(
            generate_clip(Action::new(9, 0), &p, 2, 0.1, &mut rng),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn split_ties_break_lexicographically() {
        let v = build_action_vocabulary(5, 5, 10, 0.0, 3).unwrap();
        let split = split_common_rare(&v, 0.8);
        let mut sorted = v.actions.clone();
        sorted.sort();
        assert_eq!(split.common, sorted[..8].to_vec());
        assert_eq!(split.rare, sorted[8..].to_vec());
    }

    #[test]
    fn split_sizes() {
        let v = build_action_vocabulary(20, 20, 100, 1.0, 3).unwrap();
        assert_eq!(split_common_rare(&v, 0.8).common.len(), 80);
        let v5 = build_action_vocabulary(4, 4, 5, 1.0, 3).unwrap();
        let s = split_common_rare(&v5, 0.8);
        assert_eq!(s.common, v5.actions[..4].to_vec());
        assert_eq!(s.rare, vec![v5.actions[4]]);
    }

    #[test]
    fn mass_rule_covers_requested_mass() {
        let v = build_action_vocabulary(20, 20, 100, 1.0, 3).unwrap();
        let s = split_common_rare_with(&v, 0.8, SplitRule::ProbabilityMass);
        let mass: f64 = s.common.iter().map(|&a| v.frequency_of(a).unwrap()).sum();
        let without_last = mass - v.frequency_of(*s.common.last().unwrap()).unwrap();
        assert!(mass >= 0.8 && without_last < 0.8);
    }

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            num_verbs: 6,
            num_nouns: 6,
            num_actions: 20,
            common_episodes: 200,
            rare_episodes: 40,
            prototype_dim: 4,
            homonym_pairs: 2,
            seed: 13,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn partitions_respect_split() {
        let c = build_corpus(&tiny_config()).unwrap();
        assert_eq!(c.partition(Partition::Train).count(), 150);
        assert_eq!(c.partition(Partition::CommonEval).count(), 50);
        assert!(c.partition(Partition::RareEval).all(|e| !c.split.is_common(e.action)));
        assert!(c
            .partition(Partition::Train)
            .chain(c.partition(Partition::CommonEval))
            .all(|e| c.split.is_common(e.action)));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let c = build_corpus(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.episodes, c.episodes);
    }

    #[test]
    fn shifted_corpus_uses_disjoint_words() {
        let c = build_corpus(&tiny_config()).unwrap();
        let s = c.shifted(50, 4).unwrap();
        assert!(c.lexicon.words().is_disjoint(&s.lexicon.words()));
        assert_ne!(c.prototypes, s.prototypes);
        assert!(s.episodes.iter().all(|e| e.partition == Partition::Shifted));
    }

    #[test]
    fn empty_rare_set_is_rejected() {
        let v = build_action_vocabulary(3, 3, 4, 1.0, 0).unwrap();
        let lex = build_lexicon(&v, 1, 0, 0).unwrap();
        let p = Prototypes::sample(3, 3, 2, 0);
        let split = ActionSplit {
            common: v.actions.clone(),
            rare: vec![],
        };
        let counts = EpisodeCounts {
            common: 10,
            train_fraction: 0.75,
            rare: 0,
        };
        assert!(matches!(
            sample_corpus(&v, &lex, &p, &split, counts, 2, 0.1, 0),
            Err(Error::InvalidConfig(_))
        ));
    }
}
