//! Sample context-query training sets under different regimes and audit them.
//!
//! cargo run --example curate_datasets

use icl_lab::corpus::{build_corpus, CorpusConfig, Partition};
use icl_lab::sampling::{audit_dataset, build_eval_set, build_training_set, Regime, TemplateRole};

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
    let n = corpus.partition(Partition::Train).count();

    for label in ["bursty-dynamic-ALL", "random-dynamic-ALL", "bursty-canonical-ALL", "bursty-dynamic-T5"] {
        let regime: Regime = label.parse()?;
        let set = build_training_set(&corpus, regime, Some(n), 8, 1)?;
        let audit = audit_dataset(&set, &corpus)?;
        println!(
            "{label:<22} {} instances, {} query actions, verb-only {} noun-only {} both {}",
            audit.instances, audit.distinct_query_actions, audit.verb_only_items, audit.noun_only_items, audit.both_match_items
        );
    }

    let eval = build_eval_set(&corpus, Partition::RareEval, 20, 8, 0)?;
    let inst = eval.instances[0].materialize(&corpus, TemplateRole::QueryEval)?;
    println!("\nrare-action eval instance {}:", inst.id);
    for c in &inst.context {
        println!("  <clip> {} {}", c.question, c.answer);
    }
    println!("  <clip> {} ?   (gold: {})", inst.query.question, inst.gold.join(" "));
    Ok(())
}
