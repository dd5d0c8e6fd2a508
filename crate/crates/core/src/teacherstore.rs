//! Precomputed teacher signals: truncated per-position distributions for
//! word-level distillation, and beam-search target corpora for sequence-level
//! distillation and sequence interpolation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{KdError, Result};
use crate::kdloss::{truncate_topk, TruncatedDistribution};
use crate::metrics::sentence_bleu_smoothed;
use crate::model::{beam_search, Seq2SeqModel, Source, BOS, EOS};
use crate::numerics::{softmax_with_temperature, Scalar, Tensor};
use crate::synthtask::parse_ids;

const MAGIC: &[u8; 4] = b"KDTS";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 * 4 + 32;
pub const INDEX_ENTRY_BYTES: usize = 16;
pub const PAYLOAD_ENTRY_BYTES: usize = 8;

pub const DEFAULT_SEQKD_BEAM: usize = 5;
pub const DEFAULT_SEQINTER_NBEST: usize = 5;

/// One sentence of a forced-target corpus: id and target tokens without BOS/EOS.
pub type TargetRef<'a> = (u32, &'a [u32]);

/// SHA-256 over every `(id, length, tokens)` record, little-endian u32s.
pub fn corpus_hash<'a, I: IntoIterator<Item = TargetRef<'a>>>(targets: I) -> [u8; 32] {
    let mut h = Sha256::new();
    for (id, toks) in targets {
        h.update(id.to_le_bytes());
        h.update((toks.len() as u32).to_le_bytes());
        for t in toks {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub id: u32,
    /// One distribution per forced target position, EOS included.
    pub positions: Vec<TruncatedDistribution<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStore {
    vocab_size: usize,
    k: usize,
    corpus_hash: [u8; 32],
    entries: Vec<StoreEntry>,
}

/// Input record for precomputation: id, teacher source tokens, forced target tokens.
#[derive(Clone, Copy, Debug)]
pub struct ForcedPair<'a> {
    pub id: u32,
    pub source: &'a [u32],
    pub target: &'a [u32],
}

impl TeacherStore {
    /// Validates and assembles a store. Every position must hold exactly `k` distinct ids below `vocab_size`.
    pub fn from_parts(vocab_size: usize, k: usize, corpus_hash: [u8; 32], entries: Vec<StoreEntry>) -> Result<Self> {
        if k == 0 || k > vocab_size {
            return Err(KdError::Format(format!("K={k} invalid for vocabulary {vocab_size}")));
        }
        for e in &entries {
            for d in &e.positions {
                if d.token_ids.len() != k || d.logprobs.len() != k {
                    return Err(KdError::Format(format!("sentence {}: position width differs from K", e.id)));
                }
                let mut seen = d.token_ids.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != k {
                    return Err(KdError::Format(format!("sentence {}: duplicate ids", e.id)));
                }
                if let Some(&bad) = d.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
                    return Err(KdError::InvalidToken {
                        id: bad,
                        vocab: vocab_size,
                    });
                }
            }
        }
        Ok(Self {
            vocab_size,
            k,
            corpus_hash,
            entries,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn corpus_hash(&self) -> &[u8; 32] {
        &self.corpus_hash
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn total_positions(&self) -> usize {
        self.entries.iter().map(|e| e.positions.len()).sum()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.entries.len() * INDEX_ENTRY_BYTES + self.total_positions() * self.k * PAYLOAD_ENTRY_BYTES
    }

    /// Fails with a misalignment error unless `targets` hash to the recorded value
    /// and every sentence's position count is its target length plus EOS.
    pub fn verify<'a>(&self, targets: &[TargetRef<'a>]) -> Result<()> {
        let h = corpus_hash(targets.iter().copied());
        if h != self.corpus_hash {
            return Err(KdError::Misalignment("corpus hash differs from the one recorded in the store".into()));
        }
        if targets.len() != self.entries.len() {
            return Err(KdError::Misalignment(format!(
                "{} sentences in corpus, {} in store",
                targets.len(),
                self.entries.len()
            )));
        }
        for ((id, toks), e) in targets.iter().zip(&self.entries) {
            if *id != e.id || toks.len() + 1 != e.positions.len() {
                return Err(KdError::Misalignment(format!("sentence {id} does not line up with the store")));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.vocab_size as u32, self.k as u32, self.entries.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.corpus_hash)?;
        let mut offset = (HEADER_BYTES + self.entries.len() * INDEX_ENTRY_BYTES) as u64;
        for e in &self.entries {
            w.write_all(&e.id.to_le_bytes())?;
            w.write_all(&(e.positions.len() as u32).to_le_bytes())?;
            w.write_all(&offset.to_le_bytes())?;
            offset += (e.positions.len() * self.k * PAYLOAD_ENTRY_BYTES) as u64;
        }
        for e in &self.entries {
            for d in &e.positions {
                for (id, lp) in d.token_ids.iter().zip(&d.logprobs) {
                    w.write_all(&id.to_le_bytes())?;
                    w.write_all(&lp.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let fmt = |m: &str| KdError::Format(format!("teacher store: {m}"));
        if buf.len() < HEADER_BYTES {
            return Err(fmt("truncated header"));
        }
        if &buf[..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let u32_at = |p: usize| u32::from_le_bytes(buf[p..p + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(fmt(&format!("unsupported version {}", u32_at(4))));
        }
        let vocab = u32_at(8) as usize;
        let k = u32_at(12) as usize;
        let n = u32_at(16) as usize;
        let hash: [u8; 32] = buf[20..52].try_into().unwrap();
        let index_end = HEADER_BYTES
            .checked_add(n.checked_mul(INDEX_ENTRY_BYTES).ok_or_else(|| fmt("index overflow"))?)
            .ok_or_else(|| fmt("index overflow"))?;
        if buf.len() < index_end {
            return Err(fmt("truncated index"));
        }
        let stride = k * PAYLOAD_ENTRY_BYTES;
        let mut expected = index_end as u64;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let base = HEADER_BYTES + i * INDEX_ENTRY_BYTES;
            let id = u32_at(base);
            let count = u32_at(base + 4) as usize;
            let offset = u64::from_le_bytes(buf[base + 8..base + 16].try_into().unwrap());
            if offset != expected {
                return Err(fmt(&format!("sentence {id}: payload offset {offset}, expected {expected}")));
            }
            let start = offset as usize;
            let end = start
                .checked_add(count.checked_mul(stride).ok_or_else(|| fmt("payload overflow"))?)
                .ok_or_else(|| fmt("payload overflow"))?;
            if end > buf.len() {
                return Err(fmt("truncated payload"));
            }
            let positions = buf[start..end]
                .chunks_exact(stride.max(1))
                .map(|pos| {
                    let mut d = TruncatedDistribution {
                        token_ids: Vec::with_capacity(k),
                        logprobs: Vec::with_capacity(k),
                    };
                    for pair in pos.chunks_exact(PAYLOAD_ENTRY_BYTES) {
                        d.token_ids.push(u32::from_le_bytes(pair[..4].try_into().unwrap()));
                        d.logprobs.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
                    }
                    d
                })
                .collect();
            expected = end as u64;
            entries.push(StoreEntry { id, positions });
        }
        if expected as usize != buf.len() {
            return Err(fmt("trailing bytes after payload"));
        }
        Self::from_parts(vocab, k, hash, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Loads a store and checks it against the forced-target corpus it will be used with.
    pub fn load_verified(path: &Path, targets: &[TargetRef]) -> Result<Self> {
        let store = Self::load(path)?;
        store.verify(targets)?;
        Ok(store)
    }
}

fn check_vocab<S: Scalar>(teacher: &Seq2SeqModel<S>, pair: &ForcedPair) -> Result<()> {
    let cfg = teacher.config();
    if let Some(&t) = pair.target.iter().find(|&&t| t as usize >= cfg.vocab_size_tgt) {
        return Err(KdError::IncompatibleVocab(format!(
            "sentence {}: target id {t} outside teacher vocabulary {}",
            pair.id, cfg.vocab_size_tgt
        )));
    }
    if let Some(&t) = pair.source.iter().find(|&&t| t as usize >= cfg.vocab_size_src) {
        return Err(KdError::IncompatibleVocab(format!(
            "sentence {}: source id {t} outside teacher vocabulary {}",
            pair.id, cfg.vocab_size_src
        )));
    }
    Ok(())
}

/// Per-position top-K teacher distributions for one forced target (EOS included).
pub fn teacher_distributions<S: Scalar>(
    teacher: &Seq2SeqModel<S>,
    source: &[u32],
    target: &[u32],
    k: usize,
) -> Result<Vec<TruncatedDistribution<S>>> {
    let mut prefix = Vec::with_capacity(target.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(target);
    let logits = teacher.forward_teacher_forced(Source::Tokens(source), &prefix)?;
    let v = logits.last_dim();
    (0..prefix.len())
        .map(|t| {
            let row = Tensor::new(vec![v], logits.row(t).iter().map(|x| x.to_f64_lossy()).collect())?;
            let probs = softmax_with_temperature(&row, 1.0)?;
            Ok(truncate_topk(probs.data(), k)?.cast())
        })
        .collect()
}

/// Forces the teacher on every target and keeps the top `k` of each position.
pub fn precompute_teacher_outputs<S: Scalar>(
    teacher: &Seq2SeqModel<S>,
    corpus: &[ForcedPair],
    k: usize,
) -> Result<TeacherStore> {
    if k == 0 {
        return Err(KdError::InvalidArgument("K must be at least 1".into()));
    }
    let vocab = teacher.config().vocab_size_tgt;
    let k_eff = k.min(vocab);
    for pair in corpus {
        check_vocab(teacher, pair)?;
    }
    let entries = corpus
        .par_iter()
        .map(|pair| {
            let dists = teacher_distributions(teacher, pair.source, pair.target, k_eff)?;
            Ok(StoreEntry {
                id: pair.id,
                positions: dists.iter().map(|d| d.cast::<f32>()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hash = corpus_hash(corpus.iter().map(|p| (p.id, p.target)));
    TeacherStore::from_parts(vocab, k_eff, hash, entries)
}

/// Decoding length budget for generated targets.
pub fn generation_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

/// Generated targets aligned with the sources; `None` marks a skipped sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedTargets {
    pub targets: Vec<Option<Vec<u32>>>,
}

impl GeneratedTargets {
    pub fn gaps(&self) -> Vec<usize> {
        self.targets.iter().enumerate().filter(|(_, t)| t.is_none()).map(|(i, _)| i).collect()
    }

    /// Targets with gaps as empty sequences.
    pub fn into_lines(self) -> Vec<Vec<u32>> {
        self.targets.into_iter().map(Option::unwrap_or_default).collect()
    }
}

fn generate<S: Scalar, F>(teacher: &Seq2SeqModel<S>, sources: &[&[u32]], beam: usize, nbest: usize, pick: F) -> Result<GeneratedTargets>
where
    F: Fn(usize, &[crate::model::Hypothesis]) -> Result<usize> + Sync,
{
    if beam == 0 || nbest == 0 || nbest > beam {
        return Err(KdError::InvalidArgument(format!("need 1 <= nbest ({nbest}) <= beam ({beam})")));
    }
    let targets = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            if src.is_empty() {
                warn!("source {i} is empty; leaving a gap in the generated targets");
                return Ok(None);
            }
            let hyps = beam_search(teacher, Source::Tokens(src), beam, nbest, generation_max_len(src.len()))?;
            let best = pick(i, &hyps)?;
            Ok(Some(hyps[best].content().to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedTargets { targets })
}

/// Top beam-search hypothesis per source.
pub fn generate_seqkd_targets<S: Scalar>(teacher: &Seq2SeqModel<S>, sources: &[&[u32]], beam: usize) -> Result<GeneratedTargets> {
    generate(teacher, sources, beam, 1, |_, _| Ok(0))
}

/// The n-best hypothesis with the highest smoothed sentence BLEU against the
/// reference; the better-ranked hypothesis wins ties.
pub fn generate_seqinter_targets<S: Scalar>(
    teacher: &Seq2SeqModel<S>,
    sources: &[&[u32]],
    references: &[&[u32]],
    beam: usize,
    nbest: usize,
) -> Result<GeneratedTargets> {
    if sources.len() != references.len() {
        return Err(KdError::InvalidArgument("sources and references must align".into()));
    }
    generate(teacher, sources, beam, nbest, |i, hyps| {
        let contents: Vec<&[u32]> = hyps.iter().map(|h| h.content()).collect();
        select_by_bleu(&contents, references[i])
    })
}

/// Index of the candidate with the highest smoothed sentence BLEU; first wins ties.
pub fn select_by_bleu<T: Eq + std::hash::Hash>(candidates: &[&[T]], reference: &[T]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let b = sentence_bleu_smoothed(c, reference)?;
        if b > best.1 {
            best = (i, b);
        }
    }
    Ok(best.0)
}

/// One space-separated id sequence per line.
pub fn write_targets<W: Write>(mut w: W, targets: &[Vec<u32>]) -> Result<()> {
    for t in targets {
        let line: Vec<String> = t.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_targets<R: BufRead>(r: R) -> Result<Vec<Vec<u32>>> {
    r.lines().map(|l| parse_ids(&l?)).collect()
}

pub fn save_targets(path: &Path, targets: &[Vec<u32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_targets(&mut w, targets)?;
    w.flush()?;
    Ok(())
}

pub fn load_targets(path: &Path) -> Result<Vec<Vec<u32>>> {
    read_targets(BufReader::new(File::open(path)?))
}

/// Strips a trailing EOS if present (generated targets are stored without it).
pub fn strip_eos(tokens: &[u32]) -> &[u32] {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    }
}
