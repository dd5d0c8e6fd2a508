//! Graph-free decoder stepping with per-hypothesis key/value caches.
//!
//! Uses the same kernels as the graph forward, so the log-probabilities of a
//! step equal the teacher-forced ones bit for bit.

use super::{AttnParams, Linear, Mode, Norm, Seq2SeqModel, Source, BOS};
use crate::error::{KdError, Result};
use crate::numerics::kernels;
use crate::numerics::{Graph, Scalar};

/// Encoder output of one source plus the per-layer cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct Memory<S> {
    n: usize,
    key_valid: Option<Vec<bool>>,
    cross_k: Vec<Vec<S>>,
    cross_v: Vec<Vec<S>>,
}

impl<S> Memory<S> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Self-attention cache of one partial hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<S> {
    len: usize,
    self_k: Vec<Vec<S>>,
    self_v: Vec<Vec<S>>,
}

impl<S> DecoderState<S> {
    /// Number of decoder positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<S: Scalar> Seq2SeqModel<S> {
    fn plain_linear(&self, x: &[S], rows: usize, l: Linear) -> Vec<S> {
        let w = &self.params.tensors[l.w];
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut y = kernels::matmul(x, w.data(), rows, k, n);
        kernels::add_row_bias(&mut y, self.params.tensors[l.b].data());
        y
    }

    fn plain_norm(&self, x: &[S], n: Norm) -> Vec<S> {
        let d = self.config.d_model;
        let (g, b) = (self.params.tensors[n.g].data(), self.params.tensors[n.b].data());
        let mut out = vec![S::zero(); x.len()];
        let mut xhat = vec![S::zero(); d];
        for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
            kernels::layer_norm_row(src, g, b, dst, &mut xhat);
        }
        out
    }

    /// Runs the encoder once and precomputes cross-attention projections.
    pub fn encode_memory(&self, source: Source) -> Result<Memory<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let enc = self.encode(&mut g, &p, &[source], &mut Mode::Eval)?;
        let out = g.value(enc.out).data();
        let n = enc.segments[0];
        let mut cross_k = Vec::with_capacity(self.layout.dec_layers.len());
        let mut cross_v = Vec::with_capacity(self.layout.dec_layers.len());
        for layer in &self.layout.dec_layers {
            cross_k.push(self.plain_linear(out, n, layer.cross.k));
            cross_v.push(self.plain_linear(out, n, layer.cross.v));
        }
        Ok(Memory {
            n,
            key_valid: enc.key_valid,
            cross_k,
            cross_v,
        })
    }

    pub fn start_state(&self) -> DecoderState<S> {
        let layers = self.layout.dec_layers.len();
        DecoderState {
            len: 0,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
        }
    }

    fn attend_rows(
        &self,
        q: &[S],
        keys: &[S],
        values: &[S],
        n_keys: usize,
        valid: Option<&[bool]>,
        out: &mut [S],
    ) {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let mut probs = vec![S::zero(); n_keys];
        for h in 0..heads {
            kernels::attend(q, keys, values, d, h, dh, n_keys, valid, &mut probs, &mut out[h * dh..(h + 1) * dh]);
        }
    }

    fn project_out(&self, ctx: &[S], rows: usize, a: AttnParams) -> Vec<S> {
        self.plain_linear(ctx, rows, a.o)
    }

    /// Advances every state by one token and returns row-major `[B, V]`
    /// log-probabilities of the next token.
    pub fn step(&self, mem: &Memory<S>, states: &mut [DecoderState<S>], tokens: &[u32]) -> Result<Vec<S>> {
        let d = self.config.d_model;
        let v = self.config.vocab_size_tgt;
        let b = states.len();
        assert_eq!(b, tokens.len());
        let emb = self.params.tensors[self.layout.tgt_embed].data();
        let scale = S::of((d as f64).sqrt());
        let mut y = Vec::with_capacity(b * d);
        for (st, &tok) in states.iter().zip(tokens) {
            if tok as usize >= v {
                return Err(KdError::InvalidToken { id: tok, vocab: v });
            }
            if st.len >= self.config.max_len {
                return Err(KdError::InputTooLong {
                    len: st.len + 1,
                    max: self.config.max_len,
                });
            }
            let e = &emb[tok as usize * d..(tok as usize + 1) * d];
            let pos = &self.positions[st.len * d..(st.len + 1) * d];
            y.extend(e.iter().zip(pos).map(|(&x, &p)| x * scale + p));
        }

        for (li, layer) in self.layout.dec_layers.iter().enumerate() {
            let h = self.plain_norm(&y, layer.ln1);
            let q = self.plain_linear(&h, b, layer.self_attn.q);
            let k = self.plain_linear(&h, b, layer.self_attn.k);
            let vv = self.plain_linear(&h, b, layer.self_attn.v);
            let mut ctx = vec![S::zero(); b * d];
            for (r, st) in states.iter_mut().enumerate() {
                st.self_k[li].extend_from_slice(&k[r * d..(r + 1) * d]);
                st.self_v[li].extend_from_slice(&vv[r * d..(r + 1) * d]);
                let n_keys = st.len + 1;
                self.attend_rows(
                    &q[r * d..(r + 1) * d],
                    &st.self_k[li],
                    &st.self_v[li],
                    n_keys,
                    None,
                    &mut ctx[r * d..(r + 1) * d],
                );
            }
            let o = self.project_out(&ctx, b, layer.self_attn);
            y.iter_mut().zip(&o).for_each(|(a, &c)| *a = *a + c);

            let h = self.plain_norm(&y, layer.ln2);
            let q = self.plain_linear(&h, b, layer.cross.q);
            let mut ctx = vec![S::zero(); b * d];
            for r in 0..b {
                self.attend_rows(
                    &q[r * d..(r + 1) * d],
                    &mem.cross_k[li],
                    &mem.cross_v[li],
                    mem.n,
                    mem.key_valid.as_deref(),
                    &mut ctx[r * d..(r + 1) * d],
                );
            }
            let o = self.project_out(&ctx, b, layer.cross);
            y.iter_mut().zip(&o).for_each(|(a, &c)| *a = *a + c);

            let h = self.plain_norm(&y, layer.ln3);
            let f = self.plain_linear(&h, b, layer.ff1);
            let f: Vec<S> = f.into_iter().map(|x| x.max(S::zero())).collect();
            let f = self.plain_linear(&f, b, layer.ff2);
            y.iter_mut().zip(&f).for_each(|(a, &c)| *a = *a + c);
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let y = self.plain_norm(&y, self.layout.dec_ln);
        let logits = self.plain_linear(&y, b, self.layout.out_proj);
        let mut out = vec![S::zero(); b * v];
        for (src, dst) in logits.chunks(v).zip(out.chunks_mut(v)) {
            kernels::log_softmax_row(src, dst);
        }
        Ok(out)
    }

    /// Log-probabilities of each emitted token of `tokens` (no BOS) under
    /// teacher forcing, computed step by step.
    pub fn score_tokens(&self, source: Source, tokens: &[u32]) -> Result<Vec<f64>> {
        let mem = self.encode_memory(source)?;
        let mut st = [self.start_state()];
        let mut prev = BOS;
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let lp = self.step(&mem, &mut st, &[prev])?;
            out.push(lp[t as usize].to_f64_lossy());
            prev = t;
        }
        Ok(out)
    }
}
