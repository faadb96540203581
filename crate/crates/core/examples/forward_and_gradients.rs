//! Turn an instance into an interleaved token/clip sequence, run the network
//! and take one gradient.
//!
//! cargo run --example forward_and_gradients

use icl_lab::corpus::{build_corpus, CorpusConfig};
use icl_lab::model::{assemble_sequence, forward, gradients, loss, ModelConfig, ModelParams, SequencePurpose, Tokenizer};
use icl_lab::sampling::{build_training_set, Regime, TemplateRole};

fn main() -> icl_lab::Result<()> {
    let corpus = build_corpus(&CorpusConfig {
        num_verbs: 8,
        num_nouns: 8,
        num_actions: 30,
        common_episodes: 1_000,
        rare_episodes: 100,
        prototype_dim: 8,
        seed: 1,
        ..CorpusConfig::default()
    })?;
    let tokenizer = Tokenizer::new([&corpus.lexicon]);
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        vocab_size: tokenizer.len(),
        clip_tokens: 2,
        clip_dim: 16,
        max_seq_len: 256,
        ..ModelConfig::default()
    };
    let set = build_training_set(&corpus, Regime::FULL, None, 4, 0)?;
    let inst = set.instances[0].materialize(&corpus, TemplateRole::QueryTrain)?;
    let seq = assemble_sequence::<f64>(&inst, &tokenizer, &config, 4, SequencePurpose::Train)?;
    println!(
        "{} positions, {} clips, {} supervised targets",
        seq.len(),
        seq.clip_starts.len(),
        seq.targets().len()
    );
    println!("tokens: {}", tokenizer.decode(&seq.token_ids).join(" "));

    let params = ModelParams::<f64>::init(config, 0)?;
    let logits = forward(&params, &seq)?;
    println!("initial loss {:.4} (uniform would be {:.4})", loss(&logits, &seq)?, (tokenizer.len() as f64).ln());
    let (l, grad) = gradients(&params, &[seq])?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("loss {l:.4}, gradient norm {norm:.4} over {} parameters", params.num_params());
    Ok(())
}
