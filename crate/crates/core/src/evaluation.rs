//! Scoring generated narrations and the analyses built on the scores.
//!
//! Each instance is scored with ROUGE-L against the gold dynamic narration
//! and with a class-match proxy (did the generation contain a word naming
//! the gold verb class, and one naming the gold noun class). Tables keep
//! every per-instance row so that cells of different model variants can be
//! compared on identical instance sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, PartOfSpeech, SurfaceLexicon};
use crate::error::{Error, Result};
use crate::model::{generate, ModelParams, Scalar, Tokenizer};
use crate::sampling::ContextQueryInstance;
use crate::seed::{child_rng, mix_seed, streams};

pub const DEFAULT_SHOTS: [usize; 6] = [0, 1, 2, 4, 8, 16];

/// Serde adapter writing NaN as `null` and reading `null` back as NaN.
pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> RougeL {
    let lcs = lcs_len(reference, hypothesis);
    if lcs == 0 {
        return RougeL {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    RougeL {
        precision: p,
        recall: r,
        f1: 2.0 * p * r / (p + r),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub rouge_l_f: f64,
    /// `(verb_hit + noun_hit) / 2`.
    pub class_match: f64,
    pub verb_hit: bool,
    pub noun_hit: bool,
}

/// Verb and noun hits of a generation; a homonym hits if any of its classes is gold.
pub fn class_match(generated: &[String], gold: Action, lexicon: &SurfaceLexicon) -> MetricResult {
    let hit = |pos, class| {
        generated
            .iter()
            .any(|w| lexicon.classes_of(pos, w).is_some_and(|s| s.contains(&class)))
    };
    let verb_hit = hit(PartOfSpeech::Verb, gold.verb);
    let noun_hit = hit(PartOfSpeech::Noun, gold.noun);
    MetricResult {
        rouge_l_f: 0.0,
        class_match: (u8::from(verb_hit) + u8::from(noun_hit)) as f64 / 2.0,
        verb_hit,
        noun_hit,
    }
}

pub fn score(generated: &[String], gold: &[String], gold_action: Action, lexicon: &SurfaceLexicon) -> MetricResult {
    MetricResult {
        rouge_l_f: rouge_l(gold, generated).f1,
        ..class_match(generated, gold_action, lexicon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub shot: usize,
    pub instance_id: usize,
    pub gold_action: Action,
    pub generated: Vec<String>,
    pub result: MetricResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub variant: String,
    pub shot: usize,
    pub instance_id: usize,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    #[serde(with = "nan_as_null")]
    pub mean: f64,
    #[serde(with = "nan_as_null")]
    pub se: f64,
}

impl MeanSe {
    /// Mean and standard error (sample standard deviation / sqrt(n)).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self { mean, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub shot: usize,
    pub n: usize,
    pub rouge_l_f: MeanSe,
    pub class_match: MeanSe,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<EvalFailure>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricTable {
    /// Append another table's rows, failures and metadata.
    pub fn merge(&mut self, other: MetricTable) {
        self.rows.extend(other.rows);
        self.failures.extend(other.failures);
        self.metadata.extend(other.metadata);
    }

    pub fn variants(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.variant.clone()))
            .map(|r| r.variant.clone())
            .collect()
    }

    pub fn shots(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.shot).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Instance ids that failed at `shot` in any variant.
    fn excluded(&self, shot: usize) -> BTreeSet<usize> {
        self.failures
            .iter()
            .filter(|f| f.shot == shot)
            .map(|f| f.instance_id)
            .collect()
    }

    /// Rows of one cell, minus instances that failed in any variant at that shot.
    pub fn cell(&self, variant: &str, shot: usize) -> Vec<&MetricRow> {
        let skip = self.excluded(shot);
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.shot == shot && !skip.contains(&r.instance_id))
            .collect()
    }

    pub fn aggregate(&self, variant: &str, shot: usize) -> Aggregate {
        let cell = self.cell(variant, shot);
        let rouge: Vec<f64> = cell.iter().map(|r| r.result.rouge_l_f).collect();
        let cm: Vec<f64> = cell.iter().map(|r| r.result.class_match).collect();
        Aggregate {
            variant: variant.into(),
            shot,
            n: cell.len(),
            rouge_l_f: MeanSe::of(&rouge),
            class_match: MeanSe::of(&cm),
        }
    }

    /// One aggregate per (variant, shot), variants in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let shots = self.shots();
        self.variants()
            .iter()
            .flat_map(|v| shots.iter().map(move |&k| (v.clone(), k)))
            .filter(|(v, k)| self.rows.iter().any(|r| &r.variant == v && r.shot == *k))
            .map(|(v, k)| self.aggregate(&v, k))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "variant,shot,instance_id,rouge_l_f,class_match,verb_hit,noun_hit")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.shot,
                r.instance_id,
                r.result.rouge_l_f,
                r.result.class_match,
                r.result.verb_hit,
                r.result.noun_hit
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_aggregate_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "variant,shot,n,rouge_l_f_mean,rouge_l_f_se,class_match_mean,class_match_se")?;
        for a in self.aggregates() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                a.variant, a.shot, a.n, a.rouge_l_f.mean, a.rouge_l_f.se, a.class_match.mean, a.class_match.se
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// The trained model and vocabulary a variant is evaluated with.
#[derive(Clone, Copy)]
pub struct Evaluator<'a, T> {
    pub variant: &'a str,
    pub params: &'a ModelParams<T>,
    pub tokenizer: &'a Tokenizer,
    /// Lexicon of the corpus the instances come from.
    pub lexicon: &'a SurfaceLexicon,
    pub max_new_tokens: usize,
}

impl<T: Scalar> Evaluator<'_, T> {
    fn run(&self, instance: &ContextQueryInstance<'_>, shot: usize, table: &mut MetricTable) -> Result<()> {
        match generate(self.params, self.tokenizer, instance, shot, self.max_new_tokens) {
            Ok(generated) => {
                let result = score(&generated, &instance.gold, instance.gold_action, self.lexicon);
                table.rows.push(MetricRow {
                    variant: self.variant.into(),
                    shot,
                    instance_id: instance.id,
                    gold_action: instance.gold_action,
                    generated,
                    result,
                });
                Ok(())
            }
            Err(e @ Error::Assembly { .. }) => {
                table.failures.push(EvalFailure {
                    variant: self.variant.into(),
                    shot,
                    instance_id: instance.id,
                    reason: e.to_string(),
                });
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

fn check_schedule(instances: &[ContextQueryInstance<'_>], shots: &[usize]) -> Result<()> {
    if shots.is_empty() {
        return Err(Error::config("shot schedule is empty"));
    }
    let max = shots.iter().copied().max().unwrap_or(0);
    if let Some(i) = instances.iter().find(|i| i.context.len() < max) {
        return Err(Error::InvalidInstance(format!(
            "instance {} has {} context items, schedule needs {max}",
            i.id,
            i.context.len()
        )));
    }
    Ok(())
}

/// Evaluate every instance at every shot count, reusing each instance's
/// fixed context so that smaller shots see prefixes of larger ones.
pub fn evaluate_k_shot<T: Scalar>(
    evaluator: &Evaluator<'_, T>,
    instances: &[ContextQueryInstance<'_>],
    shots: &[usize],
) -> Result<MetricTable> {
    check_schedule(instances, shots)?;
    let mut table = MetricTable::default();
    for &k in shots {
        for inst in instances {
            evaluator.run(inst, k, &mut table)?;
        }
    }
    if !table.failures.is_empty() {
        log::warn!("{}: {} prompts exceeded the context window", evaluator.variant, table.failures.len());
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
    /// Targets had zero variance; R² is reported as 0.
    pub zero_variance: bool,
    /// Points dropped because their class never occurs in training.
    pub excluded: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<RegressionResult> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::config("x and y differ in length"));
    }
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} points, regression needs at least 3")));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all x values are equal".into()));
    }
    let zero_variance = ys.iter().all(|&y| y == ys[0]);
    let slope = if zero_variance { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let r_squared = if zero_variance {
        0.0
    } else {
        let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(RegressionResult {
        slope,
        intercept,
        r_squared,
        n,
        zero_variance,
        excluded: 0,
    })
}

/// Regress per-action Δ on the natural log of its verb or noun class's training count.
pub fn icw_regression(
    per_action_delta: &BTreeMap<Action, f64>,
    train_freq: &BTreeMap<usize, usize>,
    side: PartOfSpeech,
) -> Result<RegressionResult> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0;
    for (a, &delta) in per_action_delta {
        let class = match side {
            PartOfSpeech::Verb => a.verb,
            PartOfSpeech::Noun => a.noun,
        };
        match train_freq.get(&class) {
            Some(&c) if c >= 1 => {
                xs.push((c as f64).ln());
                ys.push(delta);
            }
            _ => excluded += 1,
        }
    }
    let mut r = ols(&xs, &ys)?;
    r.excluded = excluded;
    Ok(r)
}

/// Mean class-match difference between two shots, per gold action.
pub fn per_action_delta(table: &MetricTable, variant: &str, hi: usize, lo: usize) -> BTreeMap<Action, f64> {
    let lo_rows: BTreeMap<usize, &MetricRow> = table.cell(variant, lo).into_iter().map(|r| (r.instance_id, r)).collect();
    let mut sums: BTreeMap<Action, (f64, usize)> = BTreeMap::new();
    for r in table.cell(variant, hi) {
        if let Some(l) = lo_rows.get(&r.instance_id) {
            let e = sums.entry(r.gold_action).or_default();
            e.0 += r.result.class_match - l.result.class_match;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect()
}

/// A uniformly random permutation of `0..n` with no fixed points (`n ≥ 2`).
pub fn derangement(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two items");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// The first `k` context items with their clips permuted so no clip keeps its narration.
pub fn deranged<'a>(instance: &ContextQueryInstance<'a>, k: usize, seed: u64) -> ContextQueryInstance<'a> {
    let mut out = instance.truncated(k);
    let mut rng = child_rng(mix_seed(seed, instance.id as u64, k as u64), streams::DERANGE, 0);
    let perm = derangement(k, &mut rng);
    let clips: Vec<_> = out.context.iter().map(|c| c.clip).collect();
    for (item, &src) in out.context.iter_mut().zip(&perm) {
        item.clip = clips[src];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub variant: String,
    pub shot: usize,
    pub control: Aggregate,
    pub treatment: Aggregate,
    /// Percentage change of the shuffled mean; NaN when the control mean is 0.
    #[serde(with = "nan_as_null")]
    pub rouge_l_pct: f64,
    #[serde(with = "nan_as_null")]
    pub class_match_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShuffleAblation {
    pub control: MetricTable,
    pub treatment: MetricTable,
    pub rows: Vec<ShuffleRow>,
}

fn pct(treatment: f64, control: f64) -> f64 {
    100.0 * (treatment - control) / control
}

/// Compare matched and clip-deranged contexts at each shot (all ≥ 2).
pub fn shuffle_ablation<T: Scalar>(
    evaluator: &Evaluator<'_, T>,
    instances: &[ContextQueryInstance<'_>],
    shots: &[usize],
    seed: u64,
) -> Result<ShuffleAblation> {
    if let Some(&k) = shots.iter().find(|&&k| k < 2) {
        return Err(Error::config(format!("shuffled contexts need at least 2 shots, got {k}")));
    }
    let control = evaluate_k_shot(evaluator, instances, shots)?;
    let mut treatment = MetricTable::default();
    for &k in shots {
        for inst in instances {
            evaluator.run(&deranged(inst, k, seed), k, &mut treatment)?;
        }
    }
    let mut both = control.clone();
    both.failures.extend(treatment.failures.iter().cloned());
    let mut t_view = treatment.clone();
    t_view.failures = both.failures.clone();
    let rows = shots
        .iter()
        .map(|&k| {
            let c = both.aggregate(evaluator.variant, k);
            let t = t_view.aggregate(evaluator.variant, k);
            ShuffleRow {
                variant: evaluator.variant.into(),
                shot: k,
                rouge_l_pct: pct(t.rouge_l_f.mean, c.rouge_l_f.mean),
                class_match_pct: pct(t.class_match.mean, c.class_match.mean),
                control: c,
                treatment: t,
            }
        })
        .collect();
    Ok(ShuffleAblation {
        control,
        treatment,
        rows,
    })
}

/// Write `reference<TAB>hypothesis` lines for an external similarity scorer.
pub fn write_scorer_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (a, b) in pairs {
        if a.contains(['\t', '\n']) || b.contains(['\t', '\n']) {
            return Err(Error::InvalidInstance("scorer text contains a tab or newline".into()));
        }
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read one score per line; the count must match the number of pairs sent.
pub fn read_scorer_scores(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    let scores = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if scores.len() != expected {
        return Err(bad(format!("{} scores for {expected} pairs", scores.len())));
    }
    Ok(scores)
}

/// Score text pairs with an external program invoked as `program [args..] <pairs.tsv> <scores.txt>`.
pub fn external_scores(program: &str, args: &[String], pairs: &[(String, String)], workdir: &Path) -> Result<Vec<f64>> {
    fs::create_dir_all(workdir)?;
    let input = workdir.join("pairs.tsv");
    let output = workdir.join("scores.txt");
    write_scorer_pairs(&input, pairs)?;
    let status = Command::new(program).args(args).arg(&input).arg(&output).status()?;
    if !status.success() {
        return Err(Error::config(format!("external scorer `{program}` exited with {status}")));
    }
    read_scorer_scores(&output, pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn rouge_worked_example() {
        let r = rouge_l(
            &w("the camera wearer cuts a carrot"),
            &w("the camera wearer slices a carrot"),
        );
        assert_eq!(lcs_len(&w("the camera wearer cuts a carrot"), &w("the camera wearer slices a carrot")), 5);
        assert!((r.f1 - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_edge_cases() {
        let a = w("x y z");
        assert_eq!(rouge_l(&a, &a).f1, 1.0);
        assert_eq!(rouge_l(&a, &w("p q")).f1, 0.0);
        assert_eq!(rouge_l(&a, &[]).f1, 0.0);
        assert_eq!(rouge_l::<String>(&[], &[]).f1, 0.0);
    }

    fn lexicon() -> SurfaceLexicon {
        SurfaceLexicon::from_surfaces(
            vec![w("cut slice"), w("put slice")],
            vec![w("carrot root"), w("bench seat")],
        )
        .unwrap()
    }

    #[test]
    fn class_match_cases() {
        let lex = lexicon();
        let gold = Action::new(0, 0);
        assert_eq!(class_match(&w("the camera wearer cut a carrot"), gold, &lex).class_match, 1.0);
        let half = class_match(&w("the camera wearer cut a bench"), gold, &lex);
        assert_eq!((half.class_match, half.verb_hit, half.noun_hit), (0.5, true, false));
        // "slice" names both verb classes.
        assert!(class_match(&w("slice"), Action::new(1, 1), &lex).verb_hit);
        assert!(class_match(&w("slice"), gold, &lex).verb_hit);
        // Words are checked against their own part of speech only.
        assert!(!class_match(&w("carrot"), gold, &lex).verb_hit);
    }

    #[test]
    fn ols_closed_forms() {
        let xs: Vec<f64> = (1..=10).map(|i| (i as f64).ln()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let r = ols(&xs, &ys).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12 && (r.intercept - 1.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        let flat = ols(&xs, &[0.3; 10]).unwrap();
        assert_eq!((flat.slope, flat.r_squared, flat.zero_variance), (0.0, 0.0, true));
        assert!(matches!(ols(&xs[..2], &ys[..2]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn regression_drops_unseen_classes() {
        let deltas: BTreeMap<Action, f64> = [(Action::new(0, 0), 0.5), (Action::new(1, 0), 0.2), (Action::new(2, 1), 0.1), (Action::new(3, 1), 0.0)]
            .into_iter()
            .collect();
        let freq: BTreeMap<usize, usize> = [(0, 10), (1, 4), (2, 2)].into_iter().collect();
        let r = icw_regression(&deltas, &freq, PartOfSpeech::Verb).unwrap();
        assert_eq!((r.n, r.excluded), (3, 1));
        let sparse: BTreeMap<usize, usize> = [(0, 3)].into_iter().collect();
        assert!(matches!(
            icw_regression(&deltas, &sparse, PartOfSpeech::Noun),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for n in 2..20 {
            for _ in 0..50 {
                let p = derangement(n, &mut rng);
                assert!(p.iter().enumerate().all(|(i, &j)| i != j));
                let mut s = p.clone();
                s.sort_unstable();
                assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn standard_error() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanSe::of(&[0.7]).se, 0.0);
    }

    #[test]
    fn failures_are_excluded_from_every_variant() {
        let row = |v: &str, id| MetricRow {
            variant: v.into(),
            shot: 4,
            instance_id: id,
            gold_action: Action::new(0, 0),
            generated: vec![],
            result: MetricResult {
                rouge_l_f: id as f64,
                class_match: 0.0,
                verb_hit: false,
                noun_hit: false,
            },
        };
        let mut t = MetricTable {
            rows: vec![row("a", 0), row("a", 1), row("b", 0)],
            failures: vec![EvalFailure {
                variant: "b".into(),
                shot: 4,
                instance_id: 1,
                reason: "overflow".into(),
            }],
            ..MetricTable::default()
        };
        assert_eq!(t.aggregate("a", 4).n, 1);
        assert_eq!(t.aggregate("a", 4).rouge_l_f.mean, 0.0);
        t.failures.clear();
        assert_eq!(t.aggregate("a", 4).n, 2);
    }

    #[test]
    fn scorer_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![("a b".to_string(), "a c".to_string()), ("x".into(), "y".into())];
        let p = dir.path().join("pairs.tsv");
        write_scorer_pairs(&p, &pairs).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a b\ta c\nx\ty\n");
        let s = dir.path().join("scores.txt");
        fs::write(&s, "0.5\n1\n").unwrap();
        assert_eq!(read_scorer_scores(&s, 2).unwrap(), vec![0.5, 1.0]);
        assert!(read_scorer_scores(&s, 3).is_err());
    }
}
