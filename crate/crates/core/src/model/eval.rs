use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::corpus::byte_tokens;
use crate::model::lm::LmModel;
use crate::tensor::{self, Scalar};

/// Windows of up to `max_seq_len + 1` tokens, consecutive windows sharing
/// one boundary token so that every token after the first is predicted once.
pub fn eval_windows(tokens: &[usize], max_seq_len: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + max_seq_len + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start += max_seq_len;
    }
    out
}

/// Mean next-token negative log-likelihood over `tokens`.
pub fn eval_loss<T: Scalar>(model: &LmModel<T>, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input(format!("evaluation needs at least 2 tokens, got {}", tokens.len())));
    }
    let windows = eval_windows(tokens, model.config().max_seq_len);
    let sums = windows
        .par_iter()
        .map(|w| {
            let n = w.len() - 1;
            let logits = model.forward(&w[..n])?;
            Ok(tensor::cross_entropy(&logits, &w[1..])?.as_f64() * n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / (tokens.len() - 1) as f64)
}

/// Perplexity of a byte corpus: `exp` of the mean next-token loss.
pub fn eval_ppl<T: Scalar>(model: &LmModel<T>, corpus: &[u8]) -> Result<f64> {
    let tokens = byte_tokens(corpus, model.config().vocab_size)?;
    Ok(eval_loss(model, &tokens)?.exp())
}
