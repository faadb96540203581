//! Train a small model, checkpoint it, reload it and generate narrations.
//!
//! cargo run --release --example train_and_generate

use icl_lab::corpus::{build_corpus, CorpusConfig, Partition};
use icl_lab::model::{
    assemble_sequence, generate, train, Checkpoint, ModelConfig, ModelParams, SequencePurpose, Tokenizer, TrainConfig,
};
use icl_lab::sampling::{build_eval_set, build_training_set, Regime, TemplateRole};

fn main() -> icl_lab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let corpus = build_corpus(&CorpusConfig {
        num_verbs: 8,
        num_nouns: 8,
        num_actions: 30,
        common_episodes: 1_600,
        rare_episodes: 200,
        prototype_dim: 4,
        frames: 4,
        seed: 2,
        ..CorpusConfig::default()
    })?;
    let tokenizer = Tokenizer::new([&corpus.lexicon]);
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        vocab_size: tokenizer.len(),
        clip_tokens: 1,
        clip_dim: 8,
        max_seq_len: 128,
        ffn_multiplier: 2.0,
        ..ModelConfig::default()
    };
    let ctx = 4;
    let set = build_training_set(&corpus, Regime::FULL, None, ctx, 0)?;
    let data = set
        .instances
        .iter()
        .map(|r| {
            let inst = r.materialize(&corpus, TemplateRole::QueryTrain)?;
            assemble_sequence::<f32>(&inst, &tokenizer, &config, ctx, SequencePurpose::Train)
        })
        .collect::<icl_lab::Result<Vec<_>>>()?;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        epochs: 12,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let outcome = train(ModelParams::init(config, 0)?, &data, &tc)?;
    println!("final loss {:.4}", outcome.loss_trace.last().unwrap());

    let dir = std::env::temp_dir().join("icl-lab-example");
    let path = dir.join("model.ckpt");
    Checkpoint::from_outcome(outcome, tokenizer, &tc).save(&path)?;
    let ck = Checkpoint::<f32>::load(&path)?;
    println!("reloaded {} parameters from {}", ck.params.num_params(), path.display());

    let eval = build_eval_set(&corpus, Partition::CommonEval, 5, ctx, 0)?;
    for r in &eval.instances {
        let inst = r.materialize(&corpus, TemplateRole::QueryEval)?;
        let words = generate(&ck.params, &ck.tokenizer, &inst, ctx, 12)?;
        println!("  {:<32} gold: {}", words.join(" "), inst.gold.join(" "));
    }
    Ok(())
}
