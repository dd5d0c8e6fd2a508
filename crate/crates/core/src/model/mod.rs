//! Small pre-norm transformer encoder–decoder.
//!
//! One type serves both roles: a token encoder (teacher, reads transcripts)
//! and a frame encoder (student, reads continuous frames through a linear
//! projection and a fixed 2x temporal average).

mod checkpoint;
mod decode;
mod incremental;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, KdError, Result};
use crate::numerics::kernels;
use crate::numerics::{AttnLayout, Graph, Scalar, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use decode::{beam_search, beam_search_with, greedy_decode, DecodeOptions, Hypothesis};
pub use incremental::{DecoderState, Memory};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
/// Sentence boundary inside multi-sentence samples.
pub const SEP: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flavor {
    TokenEncoder,
    FrameEncoder,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::TokenEncoder => "tokens",
            Flavor::FrameEncoder => "frames",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(Flavor::TokenEncoder),
            "frames" => Ok(Flavor::FrameEncoder),
            other => invalid(format!("unknown model flavor `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub frame_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size_src: 44,
            vocab_size_tgt: 44,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 128,
            dropout: 0.1,
            frame_dim: 16,
            max_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size_tgt", self.vocab_size_tgt),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return invalid("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        if self.vocab_size_tgt < 3 {
            return invalid("target vocabulary must hold BOS, EOS and PAD");
        }
        Ok(())
    }

    pub(crate) fn to_kv(&self, flavor: Flavor) -> String {
        format!(
            "flavor={}\nvocab_size_src={}\nvocab_size_tgt={}\nd_model={}\nn_heads={}\n\
             n_encoder_layers={}\nn_decoder_layers={}\nd_ff={}\ndropout={}\nframe_dim={}\nmax_len={}\n",
            flavor.as_str(),
            self.vocab_size_src,
            self.vocab_size_tgt,
            self.d_model,
            self.n_heads,
            self.n_encoder_layers,
            self.n_decoder_layers,
            self.d_ff,
            self.dropout,
            self.frame_dim,
            self.max_len
        )
    }

    pub(crate) fn from_kv(text: &str) -> Result<(Self, Flavor)> {
        let mut cfg = ModelConfig::default();
        let mut flavor = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KdError::Format(format!("bad config line `{line}`")))?;
            let num = || -> Result<usize> {
                v.parse().map_err(|_| KdError::Format(format!("bad value for {k}: `{v}`")))
            };
            match k {
                "flavor" => flavor = Some(Flavor::parse(v)?),
                "vocab_size_src" => cfg.vocab_size_src = num()?,
                "vocab_size_tgt" => cfg.vocab_size_tgt = num()?,
                "d_model" => cfg.d_model = num()?,
                "n_heads" => cfg.n_heads = num()?,
                "n_encoder_layers" => cfg.n_encoder_layers = num()?,
                "n_decoder_layers" => cfg.n_decoder_layers = num()?,
                "d_ff" => cfg.d_ff = num()?,
                "frame_dim" => cfg.frame_dim = num()?,
                "max_len" => cfg.max_len = num()?,
                "dropout" => {
                    cfg.dropout = v.parse().map_err(|_| KdError::Format(format!("bad dropout `{v}`")))?
                }
                other => return Err(KdError::UnknownKey(other.to_string())),
            }
        }
        let flavor = flavor.ok_or_else(|| KdError::Format("config block lacks flavor".into()))?;
        cfg.validate()?;
        Ok((cfg, flavor))
    }
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    fn register(&mut self, name: String, tensor: Tensor<S>) -> usize {
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `graph`; gradients are tracked when `track`.
    pub fn bind(&self, graph: &mut Graph<S>, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    graph.leaf(t)
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect()
    }

    /// Copies gradients from a backward pass into the tensors' grad buffers.
    /// Parameters the loss does not depend on receive zeros.
    pub fn store_grads(&mut self, vars: &[Var], grads: &crate::numerics::Gradients<S>) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            let g = grads.get_or_zeros(v, t.len());
            t.set_grad(g).expect("gradient length matches parameter");
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: AttnParams,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: AttnParams,
    ln2: Norm,
    cross: AttnParams,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: Option<usize>,
    frame_proj: Option<Linear>,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: Norm,
    tgt_embed: usize,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: Norm,
    out_proj: Linear,
}

struct Builder<'a, S> {
    params: ParamSet<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| S::of(self.rng.random_range(-limit..limit)))
            .collect();
        self.params.register(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    fn constant(&mut self, name: String, n: usize, value: f64) -> usize {
        self.params.register(name, Tensor::new(vec![n], vec![S::of(value); n]).unwrap())
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.xavier(format!("{name}.w"), fan_in, fan_out),
            b: self.constant(format!("{name}.b"), fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.constant(format!("{name}.g"), d, 1.0),
            b: self.constant(format!("{name}.b"), d, 0.0),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        AttnParams {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> usize {
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).unwrap();
        let data = (0..vocab * d).map(|_| S::of(normal.sample(self.rng))).collect();
        self.params.register(name.to_string(), Tensor::new(vec![vocab, d], data).unwrap())
    }
}

/// Encoder–decoder model.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel<S> {
    config: ModelConfig,
    flavor: Flavor,
    params: ParamSet<S>,
    layout: Layout,
    positions: Vec<S>,
}

/// Model input: transcript tokens (teacher) or a frame matrix (student).
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Tokens(&'a [u32]),
    /// Row-major `[n_frames, frame_dim]`.
    Frames { data: &'a [f32], n_frames: usize },
}

impl Source<'_> {
    pub fn is_empty(&self) -> bool {
        match self {
            Source::Tokens(t) => t.is_empty(),
            Source::Frames { n_frames, .. } => *n_frames == 0,
        }
    }
}

/// Dropout switch for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout<S: Scalar>(&mut self, g: &mut Graph<S>, x: Var, rate: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => g.dropout(x, rate, *rng),
        }
    }
}

pub(crate) struct Encoded {
    pub out: Var,
    pub segments: Vec<usize>,
    pub key_valid: Option<Vec<bool>>,
}

impl<S: Scalar> Seq2SeqModel<S> {
    /// Freshly initialized model; parameters are a pure function of `seed`.
    pub fn new(config: ModelConfig, flavor: Flavor, seed: u64) -> Result<Self> {
        config.validate()?;
        if flavor == Flavor::TokenEncoder && config.vocab_size_src == 0 {
            return invalid("token encoder needs vocab_size_src >= 1");
        }
        if flavor == Flavor::FrameEncoder && config.frame_dim == 0 {
            return invalid("frame encoder needs frame_dim >= 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::default(),
            rng: &mut rng,
        };
        let d = config.d_model;
        let (src_embed, frame_proj) = match flavor {
            Flavor::TokenEncoder => (Some(b.embedding("enc.embed", config.vocab_size_src, d)), None),
            Flavor::FrameEncoder => (None, Some(b.linear("enc.frame_proj", config.frame_dim, d))),
        };
        let enc_layers = (0..config.n_encoder_layers)
            .map(|i| EncoderLayer {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                ff1: b.linear(&format!("enc.{i}.ff1"), d, config.d_ff),
                ff2: b.linear(&format!("enc.{i}.ff2"), config.d_ff, d),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let tgt_embed = b.embedding("dec.embed", config.vocab_size_tgt, d);
        let dec_layers = (0..config.n_decoder_layers)
            .map(|i| DecoderLayer {
                ln1: b.norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), d),
                ln2: b.norm(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross"), d),
                ln3: b.norm(&format!("dec.{i}.ln3"), d),
                ff1: b.linear(&format!("dec.{i}.ff1"), d, config.d_ff),
                ff2: b.linear(&format!("dec.{i}.ff2"), config.d_ff, d),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let out_proj = b.linear("dec.out", d, config.vocab_size_tgt);
        let params = b.params;
        let positions = kernels::sinusoid(config.max_len, d);
        Ok(Self {
            config,
            flavor,
            params,
            layout: Layout {
                src_embed,
                frame_proj,
                enc_layers,
                enc_ln,
                tgt_embed,
                dec_layers,
                dec_ln,
                out_proj,
            },
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return invalid("dropout must lie in [0, 1)");
        }
        self.config.dropout = rate;
        Ok(())
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Names of the parameters that belong to the encoder side.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.names().iter().filter(|n| n.starts_with("enc.")).cloned().collect()
    }

    /// Copies every encoder parameter from `donor`; decoder parameters are
    /// left untouched.
    pub fn load_encoder_from(&mut self, donor: &Seq2SeqModel<S>) -> Result<()> {
        if donor.flavor != self.flavor {
            return Err(KdError::IncompatibleCheckpoint(format!(
                "encoder flavor {} cannot initialize {}",
                donor.flavor.as_str(),
                self.flavor.as_str()
            )));
        }
        let names = self.encoder_param_names();
        for name in &names {
            let src = donor
                .params
                .get(name)
                .ok_or_else(|| KdError::IncompatibleCheckpoint(format!("donor lacks {name}")))?;
            let dst = self.params.get_mut(name).unwrap();
            if src.shape() != dst.shape() {
                return Err(KdError::IncompatibleCheckpoint(format!(
                    "{name}: donor shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Seq2SeqModel<T> {
        let mut params = ParamSet::default();
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            params.register(n.clone(), t.cast());
        }
        Seq2SeqModel {
            config: self.config.clone(),
            flavor: self.flavor,
            params,
            layout: self.layout.clone(),
            positions: kernels::sinusoid(self.config.max_len, self.config.d_model),
        }
    }

    fn check_source(&self, source: &Source) -> Result<usize> {
        if source.is_empty() {
            return invalid("source must be non-empty");
        }
        match (self.flavor, source) {
            (Flavor::TokenEncoder, Source::Tokens(toks)) => {
                for &t in toks.iter() {
                    if t as usize >= self.config.vocab_size_src {
                        return Err(KdError::InvalidToken {
                            id: t,
                            vocab: self.config.vocab_size_src,
                        });
                    }
                }
                if toks.len() > self.config.max_len {
                    return Err(KdError::InputTooLong {
                        len: toks.len(),
                        max: self.config.max_len,
                    });
                }
                Ok(toks.len())
            }
            (Flavor::FrameEncoder, Source::Frames { data, n_frames }) => {
                if data.len() != n_frames * self.config.frame_dim {
                    return invalid(format!(
                        "frame matrix has {} values, expected {} x {}",
                        data.len(),
                        n_frames,
                        self.config.frame_dim
                    ));
                }
                let pooled = n_frames.div_ceil(2);
                if pooled > self.config.max_len {
                    return Err(KdError::InputTooLong {
                        len: pooled,
                        max: self.config.max_len,
                    });
                }
                Ok(pooled)
            }
            _ => invalid(format!("source kind does not match a {} model", self.flavor.as_str())),
        }
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            return invalid("target prefix must begin with BOS");
        }
        if prefix.len() > self.config.max_len {
            return Err(KdError::InputTooLong {
                len: prefix.len(),
                max: self.config.max_len,
            });
        }
        for &t in prefix {
            if t as usize >= self.config.vocab_size_tgt {
                return Err(KdError::InvalidToken {
                    id: t,
                    vocab: self.config.vocab_size_tgt,
                });
            }
        }
        Ok(())
    }

    fn position_rows(&self, segments: &[usize]) -> Tensor<S> {
        let d = self.config.d_model;
        let total: usize = segments.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        for &len in segments {
            data.extend_from_slice(&self.positions[..len * d]);
        }
        Tensor::new(vec![total, d], data).unwrap()
    }

    fn linear(&self, g: &mut Graph<S>, p: &[Var], x: Var, l: Linear) -> Var {
        let y = g.matmul(x, p[l.w]);
        g.add_row(y, p[l.b])
    }

    fn norm(&self, g: &mut Graph<S>, p: &[Var], x: Var, n: Norm) -> Var {
        g.layer_norm(x, p[n.g], p[n.b])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph<S>,
        p: &[Var],
        query_in: Var,
        kv_in: Var,
        a: AttnParams,
        layout: AttnLayout,
    ) -> Var {
        let q = self.linear(g, p, query_in, a.q);
        let k = self.linear(g, p, kv_in, a.k);
        let v = self.linear(g, p, kv_in, a.v);
        let ctx = g.attention(q, k, v, layout);
        self.linear(g, p, ctx, a.o)
    }

    fn feed_forward(&self, g: &mut Graph<S>, p: &[Var], x: Var, ff1: Linear, ff2: Linear) -> Var {
        let h = self.linear(g, p, x, ff1);
        let h = g.relu(h);
        self.linear(g, p, h, ff2)
    }

    pub(crate) fn encode(&self, g: &mut Graph<S>, p: &[Var], sources: &[Source], mode: &mut Mode) -> Result<Encoded> {
        let d = self.config.d_model;
        let rate = self.config.dropout;
        let mut segments = Vec::with_capacity(sources.len());
        for s in sources {
            segments.push(self.check_source(s)?);
        }
        let (x, key_valid) = match self.flavor {
            Flavor::TokenEncoder => {
                let mut ids = Vec::new();
                let mut valid = Vec::new();
                for s in sources {
                    if let Source::Tokens(t) = s {
                        ids.extend(t.iter().map(|&v| v as usize));
                        valid.extend(t.iter().map(|&v| v != PAD));
                    }
                }
                let e = g.embedding(p[self.layout.src_embed.unwrap()], &ids);
                let e = g.scale(e, S::of((d as f64).sqrt()));
                let key_valid = if valid.iter().all(|&v| v) { None } else { Some(valid) };
                (e, key_valid)
            }
            Flavor::FrameEncoder => {
                let fd = self.config.frame_dim;
                let mut data = Vec::new();
                let mut raw = Vec::with_capacity(sources.len());
                for s in sources {
                    if let Source::Frames { data: f, n_frames } = s {
                        data.extend(f.iter().map(|&v| S::of(v as f64)));
                        raw.push(*n_frames);
                    }
                }
                let total: usize = raw.iter().sum();
                let frames = g.constant(Tensor::new(vec![total, fd], data)?);
                let h = self.linear(g, p, frames, self.layout.frame_proj.unwrap());
                (g.pair_mean(h, &raw), None)
            }
        };
        let pos = g.constant(self.position_rows(&segments));
        let x = g.add(x, pos);
        let mut x = mode.dropout(g, x, rate);
        for layer in &self.layout.enc_layers {
            let h = self.norm(g, p, x, layer.ln1);
            let layout = AttnLayout {
                q_segments: segments.clone(),
                kv_segments: segments.clone(),
                key_valid: key_valid.clone(),
                causal: false,
                heads: self.config.n_heads,
            };
            let a = self.attention_block(g, p, h, h, layer.attn, layout);
            let a = mode.dropout(g, a, rate);
            x = g.add(x, a);
            let h = self.norm(g, p, x, layer.ln2);
            let f = self.feed_forward(g, p, h, layer.ff1, layer.ff2);
            let f = mode.dropout(g, f, rate);
            x = g.add(x, f);
        }
        let out = self.norm(g, p, x, self.layout.enc_ln);
        Ok(Encoded {
            out,
            segments,
            key_valid,
        })
    }

    pub(crate) fn decode_forced(
        &self,
        g: &mut Graph<S>,
        p: &[Var],
        enc: &Encoded,
        prefixes: &[&[u32]],
        mode: &mut Mode,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let rate = self.config.dropout;
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(prefixes.len());
        for pre in prefixes {
            self.check_prefix(pre)?;
            ids.extend(pre.iter().map(|&t| t as usize));
            segments.push(pre.len());
        }
        let e = g.embedding(p[self.layout.tgt_embed], &ids);
        let e = g.scale(e, S::of((d as f64).sqrt()));
        let pos = g.constant(self.position_rows(&segments));
        let y = g.add(e, pos);
        let mut y = mode.dropout(g, y, rate);
        for layer in &self.layout.dec_layers {
            let h = self.norm(g, p, y, layer.ln1);
            let self_layout = AttnLayout {
                q_segments: segments.clone(),
                kv_segments: segments.clone(),
                key_valid: None,
                causal: true,
                heads: self.config.n_heads,
            };
            let a = self.attention_block(g, p, h, h, layer.self_attn, self_layout);
            let a = mode.dropout(g, a, rate);
            y = g.add(y, a);
            let h = self.norm(g, p, y, layer.ln2);
            let cross_layout = AttnLayout {
                q_segments: segments.clone(),
                kv_segments: enc.segments.clone(),
                key_valid: enc.key_valid.clone(),
                causal: false,
                heads: self.config.n_heads,
            };
            let c = self.attention_block(g, p, h, enc.out, layer.cross, cross_layout);
            let c = mode.dropout(g, c, rate);
            y = g.add(y, c);
            let h = self.norm(g, p, y, layer.ln3);
            let f = self.feed_forward(g, p, h, layer.ff1, layer.ff2);
            let f = mode.dropout(g, f, rate);
            y = g.add(y, f);
        }
        let y = self.norm(g, p, y, self.layout.dec_ln);
        Ok(self.linear(g, p, y, self.layout.out_proj))
    }

    /// Teacher-forced logits for a packed batch: row block `i` holds
    /// `prefixes[i].len()` rows, row `t` predicting target position `t`.
    pub fn forward_batch(
        &self,
        g: &mut Graph<S>,
        p: &[Var],
        sources: &[Source],
        prefixes: &[&[u32]],
        mode: &mut Mode,
    ) -> Result<Var> {
        if sources.len() != prefixes.len() {
            return invalid("sources and prefixes must align");
        }
        let enc = self.encode(g, p, sources, mode)?;
        self.decode_forced(g, p, &enc, prefixes, mode)
    }

    /// Evaluation-mode logits `[prefix.len(), V]`.
    pub fn forward_teacher_forced(&self, source: Source, target_prefix: &[u32]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let logits = self.forward_batch(&mut g, &p, &[source], &[target_prefix], &mut Mode::Eval)?;
        Ok(g.value(logits).clone())
    }
}

#[cfg(test)]
mod tests;
