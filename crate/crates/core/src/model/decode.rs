use super::{TokenBatch, TokenId, TransformerLM};
use crate::autodiff::Tape;
use crate::data::tokenizer::{EOS, PAD};
use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of one prompt. Stops after `max_new` tokens or at EOS
/// (the EOS token is included in the output). The prompt is not returned.
pub fn greedy_decode(
    model: &TransformerLM,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    Ok(greedy_decode_batch(model, &[prompt], max_new)?.remove(0))
}

/// Greedy decoding of many prompts at once. Sequences are right-padded, so
/// with causal attention every row decodes exactly as it would alone.
pub fn greedy_decode_batch(
    model: &TransformerLM,
    prompts: &[&[TokenId]],
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let max_len = model.config().max_seq_len;
    for p in prompts {
        if p.is_empty() {
            return Err(Error::Argument("cannot decode from an empty prompt".into()));
        }
        if p.len() + max_new > max_len {
            return Err(Error::Length {
                len: p.len() + max_new,
                max: max_len,
            });
        }
    }
    let mut seqs: Vec<Vec<TokenId>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    let vocab = model.config().vocab_size;

    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let views: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch = TokenBatch::from_sequences(&views, PAD);
        let last: Vec<usize> = active
            .iter()
            .enumerate()
            .map(|(row, &i)| row * batch.seq_len + seqs[i].len() - 1)
            .collect();
        let mut tape = Tape::new();
        let out = model.forward_rows(&mut tape, &batch, &[], Some(&last))?;
        let data = tape.value(out.logits).data();
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let next = argmax(&data[row * vocab..(row + 1) * vocab]) as TokenId;
            seqs[i].push(next);
            outputs[i].push(next);
            if next != EOS {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn model() -> TransformerLM {
        build_model(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: 13,
            max_seq_len: 10,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
    }

    #[test]
    fn zero_budget_returns_nothing() {
        assert!(greedy_decode(&model(), &[3, 4], 0).unwrap().is_empty());
    }

    #[test]
    fn overlong_request_is_a_length_error() {
        assert!(matches!(
            greedy_decode(&model(), &[3; 8], 3),
            Err(Error::Length { len: 11, max: 10 })
        ));
    }

    #[test]
    fn batched_decode_matches_single_decode() {
        let m = model();
        let prompts: Vec<Vec<TokenId>> = vec![vec![3, 4, 5], vec![7], vec![9, 10, 11, 12, 3]];
        let views: Vec<&[TokenId]> = prompts.iter().map(|p| p.as_slice()).collect();
        let batched = greedy_decode_batch(&m, &views, 4).unwrap();
        for (p, b) in prompts.iter().zip(&batched) {
            assert_eq!(&greedy_decode(&m, p, 4).unwrap(), b);
        }
    }
}
