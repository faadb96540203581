//! Train a bursty and a random-context model and compare their k-shot curves,
//! then rerun the bursty model with clips shuffled across the context.
//!
//! cargo run --release --example k_shot_evaluation

use icl_lab::corpus::{build_corpus, CorpusConfig, Partition};
use icl_lab::evaluation::{evaluate_k_shot, shuffle_ablation, Evaluator, MetricTable};
use icl_lab::model::{assemble_sequence, train, ModelConfig, ModelParams, SequencePurpose, Tokenizer, TrainConfig};
use icl_lab::sampling::{build_eval_set, build_training_set, Regime, TemplateRole};

fn main() -> icl_lab::Result<()> {
    let corpus = build_corpus(&CorpusConfig {
        num_verbs: 12,
        num_nouns: 12,
        num_actions: 60,
        common_episodes: 3_000,
        rare_episodes: 400,
        prototype_dim: 8,
        frames: 4,
        seed: 4,
        ..CorpusConfig::default()
    })?;
    let tokenizer = Tokenizer::new([&corpus.lexicon]);
    let config = ModelConfig {
        d_model: 48,
        n_layers: 2,
        n_heads: 4,
        vocab_size: tokenizer.len(),
        clip_tokens: 1,
        clip_dim: 16,
        max_seq_len: 256,
        ffn_multiplier: 2.0,
        ..ModelConfig::default()
    };
    let ctx = 8;
    let shots = [0, 1, 2, 4, 8];
    let tc = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        epochs: 6,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let eval = build_eval_set(&corpus, Partition::RareEval, 100, ctx, 0)?;
    let instances = eval
        .instances
        .iter()
        .map(|r| r.materialize(&corpus, TemplateRole::QueryEval))
        .collect::<icl_lab::Result<Vec<_>>>()?;

    let mut table = MetricTable::default();
    for label in ["bursty-dynamic-ALL", "random-dynamic-ALL"] {
        let regime: Regime = label.parse()?;
        let set = build_training_set(&corpus, regime, None, ctx, 0)?;
        let data = set
            .instances
            .iter()
            .map(|r| {
                let inst = r.materialize(&corpus, TemplateRole::QueryTrain)?;
                assemble_sequence::<f32>(&inst, &tokenizer, &config, ctx, SequencePurpose::Train)
            })
            .collect::<icl_lab::Result<Vec<_>>>()?;
        let params = train(ModelParams::init(config.clone(), 0)?, &data, &tc)?.params;
        let ev = Evaluator {
            variant: label,
            params: &params,
            tokenizer: &tokenizer,
            lexicon: &corpus.lexicon,
            max_new_tokens: 12,
        };
        table.merge(evaluate_k_shot(&ev, &instances, &shots)?);
        if regime == Regime::FULL {
            for row in shuffle_ablation(&ev, &instances, &[4, 8], 0)?.rows {
                println!("{label} shuffled clips at {}-shot: class_match {:+.1}%", row.shot, row.class_match_pct);
            }
        }
    }
    for a in table.aggregates() {
        println!(
            "{:<20} k={} class_match {:.3} ± {:.3}  rouge_l {:.3}",
            a.variant, a.shot, a.class_match.mean, a.class_match.se, a.rouge_l_f.mean
        );
    }
    Ok(())
}
