use std::cmp::Ordering;

use super::{Seq2SeqModel, Source, BOS, EOS};
use crate::error::{invalid, Result};
use crate::numerics::Scalar;

/// A finished decode. `tokens` always ends with exactly one EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities divided by `count^len_norm`.
    pub score: f64,
    /// True when EOS was appended because the length limit was reached.
    pub forced: bool,
}

impl Hypothesis {
    /// Tokens with the terminal EOS removed.
    pub fn content(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub nbest: usize,
    /// Maximum number of emitted tokens, EOS included.
    pub max_len: usize,
    /// Length normalization exponent applied to the token count.
    pub len_norm: f64,
}

impl DecodeOptions {
    pub fn new(beam: usize, nbest: usize, max_len: usize) -> Self {
        Self {
            beam,
            nbest,
            max_len,
            len_norm: 1.0,
        }
    }
}

fn normalize(cum: f64, count: usize, alpha: f64) -> f64 {
    cum / (count.max(1) as f64).powf(alpha)
}

fn effective_max_len<S: Scalar>(model: &Seq2SeqModel<S>, max_len: usize) -> Result<usize> {
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    Ok(max_len.min(model.config().max_len))
}

/// Argmax decoding; the lowest token id wins ties.
pub fn greedy_decode<S: Scalar>(model: &Seq2SeqModel<S>, source: Source, max_len: usize) -> Result<Hypothesis> {
    let max_len = effective_max_len(model, max_len)?;
    let mem = model.encode_memory(source)?;
    let mut state = [model.start_state()];
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut cum = 0.0;
    for _ in 0..max_len {
        let lp = model.step(&mem, &mut state, &[prev])?;
        let tok = crate::numerics::argmax(&lp) as u32;
        cum += lp[tok as usize].to_f64_lossy();
        tokens.push(tok);
        if tok == EOS {
            let n = tokens.len();
            return Ok(Hypothesis {
                tokens,
                score: normalize(cum, n, 1.0),
                forced: false,
            });
        }
        prev = tok;
    }
    let n = tokens.len();
    tokens.push(EOS);
    Ok(Hypothesis {
        tokens,
        score: normalize(cum, n, 1.0),
        forced: true,
    })
}

struct Candidate {
    cum: f64,
    parent: usize,
    token: u32,
}

/// Beam search returning up to `nbest` distinct hypotheses, best first.
///
/// Each step keeps the `beam` best expansions by cumulative log-probability;
/// expansions ending in EOS move to the finished pool. The search ends once the
/// pool holds `beam` hypotheses or `max_len` tokens have been emitted, in which
/// case surviving prefixes are closed with a forced EOS.
pub fn beam_search<S: Scalar>(
    model: &Seq2SeqModel<S>,
    source: Source,
    beam: usize,
    nbest: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    beam_search_with(model, source, &DecodeOptions::new(beam, nbest, max_len))
}

pub fn beam_search_with<S: Scalar>(
    model: &Seq2SeqModel<S>,
    source: Source,
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    if opts.beam == 0 || opts.nbest == 0 {
        return invalid("beam and nbest must be at least 1");
    }
    if opts.nbest > opts.beam {
        return invalid(format!("nbest {} exceeds beam {}", opts.nbest, opts.beam));
    }
    let max_len = effective_max_len(model, opts.max_len)?;
    let vocab = model.config().vocab_size_tgt;
    let mem = model.encode_memory(source)?;

    let mut alive_tokens: Vec<Vec<u32>> = vec![Vec::new()];
    let mut alive_cum = vec![0.0f64];
    let mut alive_states = vec![model.start_state()];
    // (hypothesis, completion order)
    let mut pool: Vec<(Hypothesis, usize)> = Vec::new();

    for step in 0..max_len {
        let last: Vec<u32> = alive_tokens.iter().map(|t| t.last().copied().unwrap_or(BOS)).collect();
        let lp = model.step(&mem, &mut alive_states, &last)?;
        let mut cands = Vec::with_capacity(alive_tokens.len() * vocab);
        for (a, &cum) in alive_cum.iter().enumerate() {
            for tok in 0..vocab {
                cands.push(Candidate {
                    cum: cum + lp[a * vocab + tok].to_f64_lossy(),
                    parent: a,
                    token: tok as u32,
                });
            }
        }
        cands.sort_by(|x, y| {
            y.cum
                .partial_cmp(&x.cum)
                .unwrap_or(Ordering::Equal)
                .then(x.parent.cmp(&y.parent))
                .then(x.token.cmp(&y.token))
        });
        cands.truncate(opts.beam);

        let last_step = step + 1 == max_len;
        let mut next_tokens = Vec::new();
        let mut next_cum = Vec::new();
        let mut next_states = Vec::new();
        for c in cands {
            let mut toks = alive_tokens[c.parent].clone();
            toks.push(c.token);
            if c.token == EOS {
                let n = toks.len();
                let order = pool.len();
                pool.push((
                    Hypothesis {
                        tokens: toks,
                        score: normalize(c.cum, n, opts.len_norm),
                        forced: false,
                    },
                    order,
                ));
            } else if last_step {
                let n = toks.len();
                toks.push(EOS);
                let order = pool.len();
                pool.push((
                    Hypothesis {
                        tokens: toks,
                        score: normalize(c.cum, n, opts.len_norm),
                        forced: true,
                    },
                    order,
                ));
            } else {
                next_tokens.push(toks);
                next_cum.push(c.cum);
                next_states.push(alive_states[c.parent].clone());
            }
        }
        alive_tokens = next_tokens;
        alive_cum = next_cum;
        alive_states = next_states;
        if pool.len() >= opts.beam || alive_tokens.is_empty() {
            break;
        }
    }

    pool.sort_by(|(a, oa), (b, ob)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(oa.cmp(ob))
    });
    Ok(pool.into_iter().take(opts.nbest).map(|(h, _)| h).collect())
}
