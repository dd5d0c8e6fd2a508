//! Synthetic translation world: token sources, transduced targets, noisy
//! frame renderings of the sources, and multi-sentence compositions.
//!
//! Samples carry model-space ids: content index `c` is token `c + NUM_SPECIALS`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{KdError, Result};
use crate::kvfile::KvReader;
use crate::metrics::{Annotation, Group};
use crate::model::{NUM_SPECIALS, SEP};

/// Offset added to a mapped content index.
pub const MAP_SHIFT: u32 = 7;
/// Composite ids are `component id + (k - 1) * MULTI_ID_STRIDE`.
pub const MULTI_ID_STRIDE: u32 = 100_000_000;

const FRAMES_MAGIC: &[u8; 4] = b"KDFR";
const FRAMES_VERSION: u32 = 1;

const PURPOSE_EMBED: u64 = 1;
const PURPOSE_TOKENS: u64 = 2;
const PURPOSE_FRAMES: u64 = 3;
const PURPOSE_MARKED: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transduction {
    ReverseAndMap,
    CopyAndMap,
    ShiftAndMap,
}

impl Transduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Transduction::ReverseAndMap => "reverse-and-map",
            Transduction::CopyAndMap => "copy-and-map",
            Transduction::ShiftAndMap => "shift-and-map",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reverse-and-map" => Ok(Transduction::ReverseAndMap),
            "copy-and-map" => Ok(Transduction::CopyAndMap),
            "shift-and-map" => Ok(Transduction::ShiftAndMap),
            _ => Err(KdError::InvalidSpec(format!("unknown transduction `{s}`"))),
        }
    }
}

impl std::str::FromStr for Transduction {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Parameters of the synthetic task. Vocabulary sizes count content tokens only.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub src_vocab: u32,
    pub tgt_vocab: u32,
    pub transduction: Transduction,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub frame_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            src_vocab: 40,
            tgt_vocab: 40,
            transduction: Transduction::CopyAndMap,
            min_len: 3,
            max_len: 12,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            frame_dim: 16,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KdError::InvalidSpec(m.to_string()));
        if self.src_vocab == 0 {
            return bad("src_vocab must be at least 1");
        }
        if self.tgt_vocab < self.src_vocab {
            return bad("tgt_vocab must be at least src_vocab for the mapping to be invertible");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("need 1 <= min_frames_per_token <= max_frames_per_token");
        }
        if self.frame_dim == 0 {
            return bad("frame_dim must be at least 1");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Source vocabulary size in model space.
    pub fn model_src_vocab(&self) -> usize {
        (self.src_vocab + NUM_SPECIALS) as usize
    }

    pub fn model_tgt_vocab(&self) -> usize {
        (self.tgt_vocab + NUM_SPECIALS) as usize
    }

    pub fn to_kv(&self) -> String {
        format!(
            "src_vocab={}\ntgt_vocab={}\ntransduction={}\nmin_len={}\nmax_len={}\n\
             min_frames_per_token={}\nmax_frames_per_token={}\nframe_dim={}\nnoise_sigma={}\nseed={}\n",
            self.src_vocab,
            self.tgt_vocab,
            self.transduction.as_str(),
            self.min_len,
            self.max_len,
            self.min_frames_per_token,
            self.max_frames_per_token,
            self.frame_dim,
            self.noise_sigma,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut s = TaskSpec::default();
        r.set("src_vocab", &mut s.src_vocab)?;
        r.set("tgt_vocab", &mut s.tgt_vocab)?;
        r.set("transduction", &mut s.transduction)?;
        r.set("min_len", &mut s.min_len)?;
        r.set("max_len", &mut s.max_len)?;
        r.set("min_frames_per_token", &mut s.min_frames_per_token)?;
        r.set("max_frames_per_token", &mut s.max_frames_per_token)?;
        r.set("frame_dim", &mut s.frame_dim)?;
        r.set("noise_sigma", &mut s.noise_sigma)?;
        r.set("seed", &mut s.seed)?;
        r.finish()?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub src_tokens: Vec<u32>,
    pub tgt_tokens: Vec<u32>,
    /// Row-major `[n_frames, frame_dim]`.
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub n_sentences: usize,
}

fn rng_for(seed: u64, purpose: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Content-space mapping `i -> (i + 7) mod tgt_vocab`.
pub fn map_content(i: u32, tgt_vocab: u32) -> u32 {
    (i + MAP_SHIFT) % tgt_vocab
}

pub fn unmap_content(j: u32, tgt_vocab: u32) -> u32 {
    (j + tgt_vocab - MAP_SHIFT % tgt_vocab) % tgt_vocab
}

/// Applies a transduction to one sentence of content indices.
pub fn transduce(kind: Transduction, src: &[u32], tgt_vocab: u32) -> Vec<u32> {
    let map = |&i: &u32| map_content(i, tgt_vocab);
    match kind {
        Transduction::CopyAndMap => src.iter().map(map).collect(),
        Transduction::ReverseAndMap => src.iter().rev().map(map).collect(),
        Transduction::ShiftAndMap => src.iter().skip(1).chain(src.iter().take(1)).map(map).collect(),
    }
}

/// Inverse of [`transduce`].
pub fn untransduce(kind: Transduction, tgt: &[u32], tgt_vocab: u32) -> Vec<u32> {
    let unmap = |&j: &u32| unmap_content(j, tgt_vocab);
    match kind {
        Transduction::CopyAndMap => tgt.iter().map(unmap).collect(),
        Transduction::ReverseAndMap => tgt.iter().rev().map(unmap).collect(),
        Transduction::ShiftAndMap => {
            let n = tgt.len();
            tgt.iter().skip(n.saturating_sub(1)).chain(tgt.iter().take(n.saturating_sub(1))).map(unmap).collect()
        }
    }
}

fn to_model(content: &[u32]) -> Vec<u32> {
    content.iter().map(|&c| c + NUM_SPECIALS).collect()
}

/// Frozen per-seed frame embedding of every source content token, `[src_vocab, frame_dim]`.
pub fn frame_embeddings(spec: &TaskSpec) -> Vec<f32> {
    let mut rng = rng_for(spec.seed, PURPOSE_EMBED, 0);
    (0..spec.src_vocab as usize * spec.frame_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect()
}

fn render_with(embed: &[f32], src_tokens: &[u32], spec: &TaskSpec, sample_id: u32) -> Result<(Vec<f32>, usize)> {
    let d = spec.frame_dim;
    let mut rng = rng_for(spec.seed, PURPOSE_FRAMES, sample_id as u64);
    let mut frames = Vec::new();
    let mut n = 0;
    for &tok in src_tokens {
        let c = tok.checked_sub(NUM_SPECIALS).filter(|&c| c < spec.src_vocab).ok_or(KdError::InvalidToken {
            id: tok,
            vocab: spec.model_src_vocab(),
        })? as usize;
        let r = rng.random_range(spec.min_frames_per_token..=spec.max_frames_per_token);
        let e = &embed[c * d..(c + 1) * d];
        for _ in 0..r {
            for &x in e {
                let z: f64 = StandardNormal.sample(&mut rng);
                frames.push((x as f64 + spec.noise_sigma * z) as f32);
            }
        }
        n += r;
    }
    Ok((frames, n))
}

/// Frames for model-space content tokens; deterministic in `(spec, tokens, sample_id)`.
pub fn render_frames(src_tokens: &[u32], spec: &TaskSpec, sample_id: u32) -> Result<(Vec<f32>, usize)> {
    render_with(&frame_embeddings(spec), src_tokens, spec, sample_id)
}

/// Single-sentence samples with ids `first_id..first_id + n`.
pub fn generate_split(spec: &TaskSpec, n: usize, first_id: u32) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(KdError::InvalidArgument("corpus size must be at least 1".into()));
    }
    let embed = frame_embeddings(spec);
    (0..n as u32)
        .map(|i| {
            let id = first_id + i;
            let mut rng = rng_for(spec.seed, PURPOSE_TOKENS, id as u64);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let content: Vec<u32> = (0..len).map(|_| rng.random_range(0..spec.src_vocab)).collect();
            let src_tokens = to_model(&content);
            let tgt_tokens = to_model(&transduce(spec.transduction, &content, spec.tgt_vocab));
            let (frames, n_frames) = render_with(&embed, &src_tokens, spec, id)?;
            Ok(Sample {
                id,
                src_tokens,
                tgt_tokens,
                frames,
                n_frames,
                n_sentences: 1,
            })
        })
        .collect()
}

pub fn generate_corpus(spec: &TaskSpec, n: usize) -> Result<Vec<Sample>> {
    generate_split(spec, n, 0)
}

/// Joins sample `i` with the next `k - 1` samples (cyclically) using SEP in
/// both token streams. SEP has no frames.
pub fn compose_multisentence(corpus: &[Sample], k: usize, spec: &TaskSpec) -> Result<Vec<Sample>> {
    if k < 2 {
        return Err(KdError::InvalidArgument("k_sentences must be at least 2".into()));
    }
    if corpus.is_empty() {
        return Err(KdError::InvalidArgument("empty corpus".into()));
    }
    let offset = (k as u32 - 1)
        .checked_mul(MULTI_ID_STRIDE)
        .ok_or_else(|| KdError::InvalidArgument("k_sentences too large".into()))?;
    let d = spec.frame_dim;
    let mut out = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let first = &corpus[i];
        let mut s = Sample {
            id: first.id + offset,
            src_tokens: Vec::new(),
            tgt_tokens: Vec::new(),
            frames: Vec::new(),
            n_frames: 0,
            n_sentences: 0,
        };
        for j in 0..k {
            let part = &corpus[(i + j) % corpus.len()];
            if part.frames.len() != part.n_frames * d {
                return Err(KdError::InvalidSpec(format!("sample {} frames do not match frame_dim", part.id)));
            }
            if j > 0 {
                s.src_tokens.push(SEP);
                s.tgt_tokens.push(SEP);
            }
            s.src_tokens.extend_from_slice(&part.src_tokens);
            s.tgt_tokens.extend_from_slice(&part.tgt_tokens);
            s.frames.extend_from_slice(&part.frames);
            s.n_frames += part.n_frames;
            s.n_sentences += part.n_sentences;
        }
        out.push(s);
    }
    Ok(out)
}

/// One synthetic marked term per sample: up to two target tokens starting at
/// a random position, with the first token swapped for its partner (content
/// index xor 1) in the wrong form. The group is a fair coin.
pub fn marked_term_annotations(samples: &[Sample], spec: &TaskSpec) -> Result<Vec<Annotation<u32>>> {
    if spec.tgt_vocab < 2 {
        return Err(KdError::InvalidSpec("marked terms need tgt_vocab >= 2".into()));
    }
    let is_content = |t: u32| t >= NUM_SPECIALS;
    samples
        .iter()
        .map(|s| {
            let t = &s.tgt_tokens;
            let slots: Vec<usize> = (0..t.len()).filter(|&p| is_content(t[p])).collect();
            if slots.is_empty() {
                return Err(KdError::InvalidArgument(format!("sample {} has no content target token", s.id)));
            }
            let mut rng = rng_for(spec.seed, PURPOSE_MARKED, s.id as u64);
            let group = if rng.random_bool(0.5) { Group::F } else { Group::M };
            let p = slots[rng.random_range(0..slots.len())];
            let end = if p + 1 < t.len() && is_content(t[p + 1]) { p + 2 } else { p + 1 };
            let correct = t[p..end].to_vec();
            let mut wrong = correct.clone();
            let c = wrong[0] - NUM_SPECIALS;
            let partner = if c ^ 1 < spec.tgt_vocab { c ^ 1 } else { c - 1 };
            wrong[0] = partner + NUM_SPECIALS;
            Ok(Annotation { group, correct, wrong })
        })
        .collect()
}

fn ids_to_string(ids: &[u32]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// Space-separated ids; an empty string is an empty sequence.
pub fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| KdError::Format(format!("bad token id `{t}`"))))
        .collect()
}

/// Tab-separated lines: id, source ids, target ids, sentence count.
pub fn write_corpus_tsv<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            s.id,
            ids_to_string(&s.src_tokens),
            ids_to_string(&s.tgt_tokens),
            s.n_sentences
        )?;
    }
    Ok(())
}

/// Frame sidecar: "KDFR", version, frame_dim, then per sample id, n_frames, f32 data.
pub fn write_frames<W: Write>(mut w: W, frame_dim: usize, samples: &[Sample]) -> Result<()> {
    w.write_all(FRAMES_MAGIC)?;
    w.write_all(&FRAMES_VERSION.to_le_bytes())?;
    w.write_all(&(frame_dim as u32).to_le_bytes())?;
    for s in samples {
        if s.frames.len() != s.n_frames * frame_dim {
            return Err(KdError::InvalidArgument(format!("sample {} has a ragged frame matrix", s.id)));
        }
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&(s.n_frames as u32).to_le_bytes())?;
        for x in &s.frames {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Row {
    id: u32,
    src: Vec<u32>,
    tgt: Vec<u32>,
    n_sentences: usize,
}

fn read_tsv<R: BufRead>(r: R) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(KdError::Format(format!("corpus line {}: expected 4 fields", i + 1)));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| KdError::Format(format!("corpus line {}: bad number", i + 1)));
        rows.push(Row {
            id: num(f[0])? as u32,
            src: parse_ids(f[1])?,
            tgt: parse_ids(f[2])?,
            n_sentences: num(f[3])? as usize,
        });
    }
    Ok(rows)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| KdError::Format("truncated frame file".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a frame sidecar into `(frame_dim, [(id, n_frames, data)])`.
pub fn read_frames<R: Read>(mut r: R) -> Result<(usize, Vec<(u32, usize, Vec<f32>)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| KdError::Format("truncated frame file".into()))?;
    if &magic != FRAMES_MAGIC {
        return Err(KdError::Format("not a frame file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FRAMES_VERSION {
        return Err(KdError::Format(format!("unsupported frame file version {version}")));
    }
    let d = read_u32(&mut r)? as usize;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < rest.len() {
        if rest.len() - pos < 8 {
            return Err(KdError::Format("truncated frame record".into()));
        }
        let id = u32::from_le_bytes(rest[pos..pos + 4].try_into().unwrap());
        let n = u32::from_le_bytes(rest[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let bytes = n * d * 4;
        if rest.len() - pos < bytes {
            return Err(KdError::Format("truncated frame record".into()));
        }
        let data = rest[pos..pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += bytes;
        out.push((id, n, data));
    }
    Ok((d, out))
}

/// Writes `<stem>.tsv` and `<stem>.frames`.
pub fn save_corpus(stem: &Path, frame_dim: usize, samples: &[Sample]) -> Result<()> {
    let mut tsv = BufWriter::new(File::create(stem.with_extension("tsv"))?);
    write_corpus_tsv(&mut tsv, samples)?;
    tsv.flush()?;
    let mut fr = BufWriter::new(File::create(stem.with_extension("frames"))?);
    write_frames(&mut fr, frame_dim, samples)?;
    fr.flush()?;
    Ok(())
}

/// Loads a corpus written by [`save_corpus`]. Returns the frame width too.
pub fn load_corpus(stem: &Path) -> Result<(usize, Vec<Sample>)> {
    let rows = read_tsv(BufReader::new(File::open(stem.with_extension("tsv"))?))?;
    let (d, frames) = read_frames(BufReader::new(File::open(stem.with_extension("frames"))?))?;
    if rows.len() != frames.len() {
        return Err(KdError::Format(format!(
            "{} corpus lines but {} frame records",
            rows.len(),
            frames.len()
        )));
    }
    let samples = rows
        .into_iter()
        .zip(frames)
        .map(|(row, (fid, n_frames, data))| {
            if row.id != fid {
                return Err(KdError::Format(format!("corpus id {} paired with frame id {fid}", row.id)));
            }
            Ok(Sample {
                id: row.id,
                src_tokens: row.src,
                tgt_tokens: row.tgt,
                frames: data,
                n_frames,
                n_sentences: row.n_sentences,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((d, samples))
}
