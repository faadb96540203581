use super::params::ModelConfig;
use super::scalar::Scalar;
use super::tokenizer::Tokenizer;
use crate::corpus::Clip;
use crate::error::{Error, Result};
use crate::sampling::{ClipQa, ContextQueryInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequencePurpose {
    /// Includes the query answer and marks it for the loss.
    Train,
    /// Ends after the query question; generation continues from there.
    Prompt,
}

/// A flattened interleaved sequence ready for the model.
///
/// Each item contributes `clip_tokens` clip positions, its question tokens
/// and its answer tokens terminated by EOS. Clip positions carry the
/// [`Tokenizer::CLIP`] sentinel in `token_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence<T> {
    pub token_ids: Vec<u32>,
    /// Frame-mean feature vector per clip span.
    pub clip_features: Vec<Vec<T>>,
    /// Start position of each clip span.
    pub clip_starts: Vec<usize>,
    /// True on the query answer tokens (including the closing EOS).
    pub answer_mask: Vec<bool>,
}

impl<T: Scalar> AssembledSequence<T> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `(position whose logits predict, gold id)` for every masked token.
    pub fn targets(&self) -> Vec<(usize, u32)> {
        self.answer_mask
            .iter()
            .enumerate()
            .filter(|(t, &m)| m && *t > 0)
            .map(|(t, _)| (t - 1, self.token_ids[t]))
            .collect()
    }

    /// Index of the clip span covering `t`, with the slot inside it.
    pub fn clip_at(&self, t: usize, clip_tokens: usize) -> Option<(usize, usize)> {
        let c = self.clip_starts.partition_point(|&s| s <= t).checked_sub(1)?;
        let slot = t - self.clip_starts[c];
        (slot < clip_tokens).then_some((c, slot))
    }
}

pub(crate) fn frame_mean<T: Scalar>(clip: &Clip) -> Vec<T> {
    let mut mean = vec![0.0f64; clip.dim()];
    for f in &clip.frames {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += f64::from(*x);
        }
    }
    let n = clip.num_frames().max(1) as f64;
    mean.into_iter().map(|m| T::of(m / n)).collect()
}

/// Lay out the first `k` context items and the query.
pub fn assemble_sequence<T: Scalar>(
    instance: &ContextQueryInstance<'_>,
    tokenizer: &Tokenizer,
    config: &ModelConfig,
    k: usize,
    purpose: SequencePurpose,
) -> Result<AssembledSequence<T>> {
    if k > instance.context.len() {
        return Err(Error::InvalidInstance(format!(
            "{k} shots requested, instance {} has {} context items",
            instance.id,
            instance.context.len()
        )));
    }
    let mut seq = AssembledSequence {
        token_ids: Vec::new(),
        clip_features: Vec::new(),
        clip_starts: Vec::new(),
        answer_mask: Vec::new(),
    };
    let push_clip = |seq: &mut AssembledSequence<T>, clip: &Clip| -> Result<()> {
        if clip.dim() != config.clip_dim {
            return Err(Error::InvalidInstance(format!(
                "clip dimension {} differs from projector input {}",
                clip.dim(),
                config.clip_dim
            )));
        }
        seq.clip_starts.push(seq.token_ids.len());
        seq.clip_features.push(frame_mean(clip));
        for _ in 0..config.clip_tokens {
            seq.token_ids.push(Tokenizer::CLIP);
            seq.answer_mask.push(false);
        }
        Ok(())
    };
    let push_text = |seq: &mut AssembledSequence<T>, text: &str, mask: bool, eos: bool| -> Result<()> {
        for id in tokenizer.encode(text)?.into_iter().chain(eos.then_some(Tokenizer::EOS)) {
            seq.token_ids.push(id);
            seq.answer_mask.push(mask);
        }
        Ok(())
    };
    for ClipQa { clip, question, answer } in &instance.context[..k] {
        push_clip(&mut seq, clip)?;
        push_text(&mut seq, question, false, false)?;
        push_text(&mut seq, answer, false, true)?;
    }
    push_clip(&mut seq, instance.query.clip)?;
    push_text(&mut seq, &instance.query.question, false, false)?;
    if purpose == SequencePurpose::Train {
        if instance.query.answer.trim().is_empty() {
            return Err(Error::InvalidInstance(format!(
                "instance {} has no query answer to train on",
                instance.id
            )));
        }
        push_text(&mut seq, &instance.query.answer, true, true)?;
    }
    if seq.len() > config.max_seq_len {
        return Err(Error::Assembly {
            required: seq.len(),
            max: config.max_seq_len,
        });
    }
    Ok(seq)
}
