use super::assemble::{assemble_sequence, SequencePurpose};
use super::forward::{embed, embed_token, forward_chunk, head_logits, KvCache};
use super::params::ModelParams;
use super::scalar::Scalar;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::sampling::ContextQueryInstance;

/// Greedy decoding after the first `k` context items and the query
/// question. Stops at EOS (not included) or after `max_new_tokens`.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    tokenizer: &Tokenizer,
    instance: &ContextQueryInstance<'_>,
    k: usize,
    max_new_tokens: usize,
) -> Result<Vec<String>> {
    let ids = generate_ids(params, tokenizer, instance, k, max_new_tokens)?;
    Ok(tokenizer.decode(&ids))
}

pub(crate) fn generate_ids<T: Scalar>(
    params: &ModelParams<T>,
    tokenizer: &Tokenizer,
    instance: &ContextQueryInstance<'_>,
    k: usize,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let seq = assemble_sequence::<T>(instance, tokenizer, &params.config, k, SequencePurpose::Prompt)?;
    let max = params.config.max_seq_len;
    if seq.len() + max_new_tokens > max {
        return Err(Error::Assembly {
            required: seq.len() + max_new_tokens,
            max,
        });
    }
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let d = params.config.d_model;
    let mut cache = KvCache::new(params);
    let mut x = embed(params, &seq);
    let mut hidden = forward_chunk(params, &mut x, &mut cache)?;
    let mut out = Vec::new();
    loop {
        let last = &hidden[hidden.len() - d..];
        let next = argmax(&head_logits(params, last, 1));
        if next == Tokenizer::EOS || out.len() == max_new_tokens {
            break;
        }
        out.push(next);
        if out.len() == max_new_tokens {
            break;
        }
        let mut row = embed_token(params, next, cache.len());
        hidden = forward_chunk(params, &mut row, &mut cache)?;
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}
