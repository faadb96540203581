//! Build a small synthetic corpus and look at what is in it.
//!
//! cargo run --example corpus_tour

use icl_lab::corpus::{build_corpus, CorpusConfig, MeaningMode, Partition, PartOfSpeech};

fn main() -> icl_lab::Result<()> {
    let corpus = build_corpus(&CorpusConfig {
        num_verbs: 10,
        num_nouns: 10,
        num_actions: 40,
        common_episodes: 2_000,
        rare_episodes: 300,
        seed: 7,
        ..CorpusConfig::default()
    })?;

    println!("top actions by frequency:");
    for (a, f) in corpus.vocabulary.by_frequency().iter().take(5) {
        let verb = corpus.lexicon.canonical(PartOfSpeech::Verb, a.verb)?;
        let noun = corpus.lexicon.canonical(PartOfSpeech::Noun, a.noun)?;
        let kind = if corpus.split.is_common(*a) { "common" } else { "rare" };
        println!("  {verb:>6} {noun:<6} p={f:.4} ({kind})");
    }

    for p in [Partition::Train, Partition::CommonEval, Partition::RareEval] {
        println!("{p:?}: {} episodes", corpus.partition(p).count());
    }

    println!("homonyms: {:?}", corpus.lexicon.homonyms());
    for e in corpus.partition(Partition::Train).take(3) {
        println!(
            "episode {}: \"{}\" (canonical \"{}\"), clip {}x{}",
            e.id,
            e.narration(MeaningMode::Dynamic).join(" "),
            e.narration(MeaningMode::Canonical).join(" "),
            e.clip.num_frames(),
            e.clip.dim()
        );
    }
    Ok(())
}
