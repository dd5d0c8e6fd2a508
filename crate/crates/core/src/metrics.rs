//! Evaluation metrics over token sequences: BLEU (corpus and smoothed
//! sentence), WER, TER with greedy block shifts, marked-term accuracy with a
//! group bias score, and a truncation probe for multi-sentence outputs.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{invalid, Result};

const MAX_ORDER: usize = 4;
/// Longest block TER will shift.
pub const TER_MAX_BLOCK: usize = 10;
/// Default hypothesis/reference length ratio below which a SEP-less output counts as truncated.
pub const TRUNCATION_RATIO: f64 = 0.6;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, hypothesis n-gram count) for each order 1..=4.
fn match_stats<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> [(usize, usize); MAX_ORDER] {
    let mut out = [(0, 0); MAX_ORDER];
    for (i, slot) in out.iter_mut().enumerate() {
        let n = i + 1;
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, hyp.len().saturating_sub(n - 1));
    }
    out
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
}

/// Corpus-level 4-gram BLEU in [0, 100].
pub fn corpus_bleu<T, H, R>(hypotheses: &[H], references: &[R]) -> Result<f64>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hypotheses.len() != references.len() {
        return invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        ));
    }
    if hypotheses.is_empty() {
        return invalid("BLEU needs at least one sentence");
    }
    let mut totals = [(0usize, 0usize); MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for (t, s) in totals.iter_mut().zip(match_stats(h, r)) {
            t.0 += s.0;
            t.1 += s.1;
        }
    }
    if totals.iter().any(|&(m, c)| m == 0 || c == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = totals.iter().map(|&(m, c)| (m as f64 / c as f64).ln()).sum::<f64>() / MAX_ORDER as f64;
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * log_p.exp())
}

/// Sentence BLEU with add-one smoothing on the 2- to 4-gram precisions.
pub fn sentence_bleu_smoothed<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return invalid("reference must be non-empty");
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let stats = match_stats(hypothesis, reference);
    if stats[0].0 == 0 {
        return Ok(0.0);
    }
    let mut log_p = (stats[0].0 as f64 / stats[0].1 as f64).ln();
    for &(m, c) in &stats[1..] {
        log_p += ((m + 1) as f64 / (c + 1) as f64).ln();
    }
    let bp = brevity_penalty(hypothesis.len(), reference.len());
    Ok(100.0 * bp * (log_p / MAX_ORDER as f64).exp())
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate in percent of the reference length.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return invalid("reference must be non-empty");
    }
    Ok(100.0 * edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

fn occurrences<T: PartialEq>(hay: &[T], needle: &[T]) -> Vec<usize> {
    if needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len()).filter(|&p| &hay[p..p + needle.len()] == needle).collect()
}

fn moved<T: Clone>(seq: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = seq[..start].iter().chain(&seq[start + len..]).cloned().collect();
    let block = seq[start..start + len].to_vec();
    rest.splice(dest..dest, block);
    rest
}

/// Translation edit rate: (edits + shifts) in percent of the reference length.
///
/// Shifts are chosen greedily. A candidate moves a hypothesis block of at most
/// [`TER_MAX_BLOCK`] tokens that also occurs in the reference to within two
/// positions of one of its reference occurrences; the candidate with the
/// lowest resulting edit distance wins (first found on ties), and the search
/// stops once no shift lowers the edit distance.
pub fn ter<T: PartialEq + Clone>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return invalid("reference must be non-empty");
    }
    Ok(100.0 * ter_edits(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Edits plus shifts counted by [`ter`].
pub fn ter_edits<T: PartialEq + Clone>(hypothesis: &[T], reference: &[T]) -> usize {
    let mut cur = hypothesis.to_vec();
    let mut shifts = 0usize;
    let mut dist = edit_distance(&cur, reference);
    while dist > 0 {
        let mut best: Option<(usize, Vec<T>)> = None;
        for start in 0..cur.len() {
            for len in 1..=TER_MAX_BLOCK.min(cur.len() - start) {
                let block = &cur[start..start + len];
                let occ = occurrences(reference, block);
                if occ.is_empty() {
                    break;
                }
                let rest_len = cur.len() - len;
                for &p in &occ {
                    if p == start {
                        continue;
                    }
                    for dest in p.saturating_sub(2)..=(p + 2).min(rest_len) {
                        if dest == start {
                            continue;
                        }
                        let cand = moved(&cur, start, len, dest);
                        let d = edit_distance(&cand, reference);
                        if d < best.as_ref().map_or(dist, |b| b.0) {
                            best = Some((d, cand));
                        }
                    }
                }
            }
        }
        match best {
            Some((d, cand)) => {
                cur = cand;
                dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    dist + shifts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    F,
    M,
}

impl Group {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F" | "f" => Ok(Group::F),
            "M" | "m" => Ok(Group::M),
            _ => invalid(format!("unknown group `{s}`")),
        }
    }
}

/// Expected and unexpected surface forms of a marked term in one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation<T> {
    pub group: Group,
    pub correct: Vec<T>,
    pub wrong: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupScore {
    pub corr_pct: f64,
    pub wrong_pct: f64,
    pub diff: f64,
    pub sentences: usize,
}

impl GroupScore {
    fn from_percentages(corr_pct: f64, wrong_pct: f64, sentences: usize) -> Self {
        Self {
            corr_pct,
            wrong_pct,
            diff: corr_pct - wrong_pct,
            sentences,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BiasReport {
    pub f: GroupScore,
    pub m: GroupScore,
    /// `diff_M - diff_F`.
    pub bias: f64,
}

impl BiasReport {
    pub fn from_percentages(f_corr: f64, f_wrong: f64, m_corr: f64, m_wrong: f64) -> Result<Self> {
        for (c, w) in [(f_corr, f_wrong), (m_corr, m_wrong)] {
            if !(0.0..=100.0).contains(&c) || !(0.0..=100.0).contains(&w) || c + w > 100.0 + 1e-9 {
                return invalid(format!("percentages {c}/{w} out of range"));
            }
        }
        Ok(Self::from_groups(
            GroupScore::from_percentages(f_corr, f_wrong, 0),
            GroupScore::from_percentages(m_corr, m_wrong, 0),
        ))
    }

    fn from_groups(f: GroupScore, m: GroupScore) -> Self {
        Self {
            f,
            m,
            bias: m.diff - f.diff,
        }
    }
}

/// Parses annotation lines: sentence id, group letter, correct-form ids, wrong-form ids (tab-separated).
pub fn parse_annotations(text: &str) -> Result<Vec<(u32, Annotation<u32>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(crate::KdError::Format(format!("annotation line {}: expected 4 fields", i + 1)));
        }
        let id = f[0]
            .trim()
            .parse()
            .map_err(|_| crate::KdError::Format(format!("annotation line {}: bad id", i + 1)))?;
        out.push((
            id,
            Annotation {
                group: Group::parse(f[1].trim())?,
                correct: crate::synthtask::parse_ids(f[2])?,
                wrong: crate::synthtask::parse_ids(f[3])?,
            },
        ));
    }
    Ok(out)
}

/// Inverse of [`parse_annotations`].
pub fn format_annotations(rows: &[(u32, Annotation<u32>)]) -> String {
    let ids = |v: &[u32]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    rows.iter()
        .map(|(id, a)| {
            let g = match a.group {
                Group::F => "F",
                Group::M => "M",
            };
            format!("{id}\t{g}\t{}\t{}\n", ids(&a.correct), ids(&a.wrong))
        })
        .collect()
}

fn first_at<T: PartialEq>(hay: &[T], needle: &[T]) -> Option<usize> {
    occurrences(hay, needle).first().copied()
}

/// Per-group rates of sentences containing the correct or the wrong form.
///
/// When both forms occur, the earlier occurrence decides; if both start at the
/// same position the longer form decides. Sentences with neither form count
/// toward neither rate. A group without sentences scores zero.
pub fn marked_term_accuracy<T: PartialEq, H: AsRef<[T]>>(
    hypotheses: &[H],
    annotations: &[Annotation<T>],
) -> Result<BiasReport> {
    if hypotheses.len() != annotations.len() {
        return invalid(format!(
            "{} hypotheses for {} annotations",
            hypotheses.len(),
            annotations.len()
        ));
    }
    // [group][total, corr, wrong]
    let mut counts = [[0usize; 3]; 2];
    for (h, a) in hypotheses.iter().zip(annotations) {
        if a.correct.is_empty() || a.wrong.is_empty() || a.correct == a.wrong {
            return invalid("annotation forms must be non-empty and distinct");
        }
        let slot = &mut counts[(a.group == Group::M) as usize];
        slot[0] += 1;
        let h = h.as_ref();
        let verdict = match (first_at(h, &a.correct), first_at(h, &a.wrong)) {
            (Some(_), None) => Some(true),
            (None, Some(_)) => Some(false),
            (Some(c), Some(w)) if c != w => Some(c < w),
            (Some(_), Some(_)) => Some(a.correct.len() > a.wrong.len()),
            (None, None) => None,
        };
        match verdict {
            Some(true) => slot[1] += 1,
            Some(false) => slot[2] += 1,
            None => {}
        }
    }
    let score = |c: [usize; 3]| {
        if c[0] == 0 {
            return GroupScore::default();
        }
        let pct = |k: usize| 100.0 * k as f64 / c[0] as f64;
        GroupScore::from_percentages(pct(c[1]), pct(c[2]), c[0])
    };
    Ok(BiasReport::from_groups(score(counts[0]), score(counts[1])))
}

/// Fraction of multi-sentence samples whose hypothesis has no boundary token
/// and is shorter than `ratio` times the reference. References without a
/// boundary are left out; returns 0 when none remain.
pub fn truncation_rate<T: PartialEq, H: AsRef<[T]>, R: AsRef<[T]>>(
    hypotheses: &[H],
    references: &[R],
    sep: &T,
    ratio: f64,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return invalid("hypotheses and references must align");
    }
    let (mut counted, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        if !r.contains(sep) {
            continue;
        }
        total += 1;
        if !h.contains(sep) && (h.len() as f64) < ratio * r.len() as f64 {
            counted += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { counted as f64 / total as f64 })
}
