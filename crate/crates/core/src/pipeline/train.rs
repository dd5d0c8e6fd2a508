use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{lr_at, LossKind, TrainConfig};
use super::optim::{adam_step, AdamState};
use crate::error::{KdError, Result};
use crate::kdloss::{compose_loss, LossTerm, TruncatedDistribution};
use crate::metrics::{self, Annotation, BiasReport};
use crate::model::{beam_search, greedy_decode, Flavor, Mode, Seq2SeqModel, Source, BOS, EOS, SEP};
use crate::numerics::{Graph, Scalar};
use crate::synthtask::Sample;
use crate::teacherstore::{TargetRef, TeacherStore};

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Tokens(Vec<u32>),
    /// Row-major `[n_frames, frame_dim]`.
    Frames { data: Vec<f32>, n_frames: usize },
}

impl Input {
    pub fn as_source(&self) -> Source<'_> {
        match self {
            Input::Tokens(t) => Source::Tokens(t),
            Input::Frames { data, n_frames } => Source::Frames {
                data,
                n_frames: *n_frames,
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.as_source().is_empty()
    }

    /// Upper bound on emitted tokens when decoding this input.
    pub fn decode_budget(&self) -> usize {
        match self {
            Input::Tokens(t) => crate::teacherstore::generation_max_len(t.len()),
            Input::Frames { n_frames, .. } => n_frames + 10,
        }
    }
}

/// A training or evaluation pair; `target` has neither BOS nor EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u32,
    pub input: Input,
    pub target: Vec<u32>,
}

/// Pairs samples with targets (gold when `targets` is `None`). Samples whose
/// model input is empty are dropped.
pub fn examples_from_samples(samples: &[Sample], flavor: Flavor, targets: Option<&[Vec<u32>]>) -> Result<Vec<Example>> {
    if let Some(t) = targets {
        if t.len() != samples.len() {
            return Err(KdError::InvalidArgument(format!(
                "{} target lines for {} samples",
                t.len(),
                samples.len()
            )));
        }
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| Example {
            id: s.id,
            input: match flavor {
                Flavor::TokenEncoder => Input::Tokens(s.src_tokens.clone()),
                Flavor::FrameEncoder => Input::Frames {
                    data: s.frames.clone(),
                    n_frames: s.n_frames,
                },
            },
            target: targets.map_or_else(|| s.tgt_tokens.clone(), |t| t[i].clone()),
        })
        .filter(|e| !e.input.is_empty())
        .collect())
}

/// Frames paired with their own source transcript.
pub fn transcript_examples(samples: &[Sample]) -> Vec<Example> {
    samples
        .iter()
        .filter(|s| s.n_frames > 0)
        .map(|s| Example {
            id: s.id,
            input: Input::Frames {
                data: s.frames.clone(),
                n_frames: s.n_frames,
            },
            target: s.src_tokens.clone(),
        })
        .collect()
}

pub fn target_refs(examples: &[Example]) -> Vec<TargetRef<'_>> {
    examples.iter().map(|e| (e.id, e.target.as_slice())).collect()
}

pub struct StageData<'a> {
    pub train: &'a [Example],
    pub valid: &'a [Example],
    /// Required by KD losses; must be aligned with `train`'s targets.
    pub store: Option<&'a TeacherStore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub val_bleu: Vec<(usize, f64)>,
    pub best_step: usize,
    pub warmup_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TestScores {
    pub bleu: f64,
    pub wer: f64,
    pub ter: f64,
    pub truncation_rate: f64,
    pub bias: Option<BiasReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub plan: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub test: Option<TestScores>,
    pub wall_time_secs: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub(crate) fn sha256_hex(text: &[u8]) -> String {
    hex(&Sha256::digest(text))
}

impl RunRecord {
    /// Digest of everything except wall time; floats enter by bit pattern.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut f = |x: f64| h.update(x.to_bits().to_le_bytes());
        let mut text = format!("{}|{}|{}|", self.plan, self.config_hash, self.seed);
        for s in &self.stages {
            let _ = write!(text, "{}|{}|{}|{}|", s.name, s.best_step, s.warmup_steps, s.losses.len());
            s.losses.iter().chain(&s.lrs).for_each(|&x| f(x));
            for &(step, b) in &s.val_bleu {
                f(step as f64);
                f(b);
            }
        }
        if let Some(t) = &self.test {
            for x in [t.bleu, t.wer, t.ter, t.truncation_rate] {
                f(x);
            }
            if let Some(b) = &t.bias {
                for x in [b.f.corr_pct, b.f.wrong_pct, b.m.corr_pct, b.m.wrong_pct] {
                    f(x);
                }
            }
        }
        h.update(text.as_bytes());
        hex(&h.finalize())
    }
}

impl RunRecord {
    /// Flat `key=value` report; list values are space-separated.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "plan={}\nconfig_hash={}\nrecord_hash={}\nseed={}", self.plan, self.config_hash, self.hash(), self.seed);
        let _ = writeln!(out, "wall_time_secs={:.3}", self.wall_time_secs);
        for (i, s) in self.stages.iter().enumerate() {
            let curve: Vec<String> = s.val_bleu.iter().map(|(k, b)| format!("{k}:{b:.4}")).collect();
            let _ = writeln!(out, "stage.{i}.name={}", s.name);
            let _ = writeln!(out, "stage.{i}.best_step={}", s.best_step);
            let _ = writeln!(out, "stage.{i}.warmup_steps={}", s.warmup_steps);
            let _ = writeln!(out, "stage.{i}.val_bleu={}", curve.join(" "));
            let _ = writeln!(out, "stage.{i}.losses={}", join(&s.losses));
            let _ = writeln!(out, "stage.{i}.lrs={}", join(&s.lrs));
        }
        if let Some(t) = &self.test {
            let _ = writeln!(out, "test.bleu={:.4}\ntest.wer={:.4}\ntest.ter={:.4}", t.bleu, t.wer, t.ter);
            let _ = writeln!(out, "test.truncation_rate={:.4}", t.truncation_rate);
            if let Some(b) = &t.bias {
                let _ = writeln!(out, "test.diff_f={:.4}\ntest.diff_m={:.4}\ntest.bias={:.4}", b.f.diff, b.m.diff, b.bias);
            }
        }
        out
    }
}

/// Seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_SHUFFLE: u64 = 11;
const STREAM_DROPOUT: u64 = 12;

/// Example indices of each step: consecutive slices of per-epoch shuffles.
pub fn batch_order(seed: u64, n: usize, batch_size: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));
    let mut perm: Vec<usize> = Vec::new();
    let mut pos = 0;
    (0..steps)
        .map(|_| {
            (0..batch_size.min(n))
                .map(|_| {
                    if pos == perm.len() {
                        perm = (0..n).collect();
                        perm.shuffle(&mut rng);
                        pos = 0;
                    }
                    pos += 1;
                    perm[pos - 1]
                })
                .collect()
        })
        .collect()
}

fn truncated_store(store: &TeacherStore, k: Option<usize>) -> Result<Vec<Vec<TruncatedDistribution<f32>>>> {
    let k = match k {
        None => store.k(),
        Some(k) if k <= store.k() => k,
        Some(_) if store.k() == store.vocab_size() => store.k(),
        Some(k) => {
            return Err(KdError::InvalidArgument(format!(
                "loss asks for K={k} but the store holds only {}",
                store.k()
            )))
        }
    };
    Ok(store
        .entries()
        .iter()
        .map(|e| {
            e.positions
                .iter()
                .map(|d| TruncatedDistribution {
                    token_ids: d.token_ids[..k].to_vec(),
                    logprobs: d.logprobs[..k].to_vec(),
                })
                .collect()
        })
        .collect())
}

/// Mean loss and gradients of one batch.
pub(crate) fn batch_loss<S: Scalar>(
    model: &Seq2SeqModel<S>,
    batch: &[&Example],
    teacher: Option<Vec<&[TruncatedDistribution<f32>]>>,
    cfg: &TrainConfig,
    mode: &mut Mode,
) -> Result<(f64, Vec<Vec<S>>)> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g, true);
    let sources: Vec<Source> = batch.iter().map(|e| e.input.as_source()).collect();
    let prefixes: Vec<Vec<u32>> = batch
        .iter()
        .map(|e| std::iter::once(BOS).chain(e.target.iter().copied()).collect())
        .collect();
    let prefix_refs: Vec<&[u32]> = prefixes.iter().map(|p| p.as_slice()).collect();
    let logits = model.forward_batch(&mut g, &vars, &sources, &prefix_refs, mode)?;
    let gold: Vec<u32> = batch
        .iter()
        .flat_map(|e| e.target.iter().copied().chain(std::iter::once(EOS)))
        .collect();
    let dists: Vec<TruncatedDistribution<f32>> = match &teacher {
        Some(per) => per.iter().flat_map(|d| d.iter().cloned()).collect(),
        None => Vec::new(),
    };
    let l = &cfg.loss;
    let kd = LossTerm::WordKd {
        teacher: &dists,
        temperature: l.temperature,
    };
    let ce = LossTerm::LabelSmoothedCe {
        gold: &gold,
        epsilon: l.epsilon,
    };
    let terms = match l.kind {
        LossKind::LabelSmoothedCe => vec![(ce, 1.0)],
        LossKind::WordKd => vec![(kd, 1.0)],
        LossKind::Composed => vec![(kd, l.kd_weight), (ce, l.ce_weight)],
    };
    let loss = compose_loss(&mut g, logits, &terms, None)?;
    let value = g.value(loss).item().to_f64_lossy();
    let grads = g.backward(loss)?;
    let per_param = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    Ok((value, per_param))
}

/// Optimizes `model` for `cfg.max_steps` steps and returns the parameters with
/// the best validation BLEU (the final ones when there is no validation set).
pub fn train_stage<S: Scalar>(
    mut model: Seq2SeqModel<S>,
    name: &str,
    cfg: &TrainConfig,
    data: &StageData,
) -> Result<(Seq2SeqModel<S>, StageRecord)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(KdError::InvalidArgument("empty training set".into()));
    }
    model.set_dropout(cfg.dropout)?;
    let teacher = if cfg.loss.kind.uses_teacher() {
        let store = data
            .store
            .ok_or_else(|| KdError::InvalidArgument(format!("stage `{name}` needs a teacher store")))?;
        store.verify(&target_refs(data.train))?;
        Some(truncated_store(store, cfg.loss.k)?)
    } else {
        None
    };

    let warmup = cfg.effective_warmup();
    let sched = TrainConfig {
        warmup_steps: warmup,
        ..cfg.clone()
    };
    let mut adam = AdamState::for_params(model.params().tensors());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT));
    let order = batch_order(cfg.seed, data.train.len(), cfg.batch_size, cfg.max_steps);
    let mut rec = StageRecord {
        name: name.to_string(),
        losses: Vec::with_capacity(cfg.max_steps),
        lrs: Vec::with_capacity(cfg.max_steps),
        val_bleu: Vec::new(),
        best_step: 0,
        warmup_steps: warmup,
    };
    let mut best: Option<(f64, Seq2SeqModel<S>)> = None;
    info!("stage `{name}`: {} examples, {} steps, warmup {warmup}", data.train.len(), cfg.max_steps);

    for (step, idx) in order.iter().enumerate() {
        let step = step + 1;
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
        let tdist = teacher.as_ref().map(|t| idx.iter().map(|&i| t[i].as_slice()).collect());
        let (loss, grads) = batch_loss(&model, &batch, tdist, cfg, &mut Mode::Train(&mut dropout_rng))?;
        if !loss.is_finite() {
            return Err(KdError::Diverged(format!(
                "stage `{name}` loss {loss} at step {step}; seed {}; config {cfg:?}",
                cfg.seed
            )));
        }
        let lr = lr_at(step, &sched);
        adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            .map_err(|e| match e {
                KdError::Diverged(m) => KdError::Diverged(format!("{m}; stage `{name}`, seed {}; config {cfg:?}", cfg.seed)),
                other => other,
            })?;
        rec.losses.push(loss);
        rec.lrs.push(lr);
        if !data.valid.is_empty() && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let bleu = validation_bleu(&model, data.valid)?;
            debug!("stage `{name}` step {step}: loss {loss:.4}, lr {lr:.2e}, valid BLEU {bleu:.2}");
            rec.val_bleu.push((step, bleu));
            if best.as_ref().is_none_or(|(b, _)| bleu > *b) {
                best = Some((bleu, model.clone()));
                rec.best_step = step;
            }
        }
    }
    let out = match best {
        Some((bleu, m)) => {
            info!("stage `{name}`: best valid BLEU {bleu:.2} at step {}", rec.best_step);
            m
        }
        None => {
            rec.best_step = cfg.max_steps;
            model
        }
    };
    Ok((out, rec))
}

/// Decodes every example (greedy when `beam == 1`), content tokens only.
pub fn decode_all<S: Scalar>(model: &Seq2SeqModel<S>, examples: &[Example], beam: usize) -> Result<Vec<Vec<u32>>> {
    examples
        .par_iter()
        .map(|e| {
            let budget = e.input.decode_budget();
            let h = if beam <= 1 {
                greedy_decode(model, e.input.as_source(), budget)?
            } else {
                beam_search(model, e.input.as_source(), beam, 1, budget)?.remove(0)
            };
            Ok(h.content().to_vec())
        })
        .collect()
}

pub fn validation_bleu<S: Scalar>(model: &Seq2SeqModel<S>, valid: &[Example]) -> Result<f64> {
    let hyps = decode_all(model, valid, 1)?;
    let refs: Vec<&[u32]> = valid.iter().map(|e| e.target.as_slice()).collect();
    metrics::corpus_bleu(&hyps, &refs)
}

/// Corpus BLEU, WER and TER (edits pooled over the corpus), truncation rate
/// over multi-sentence references, and the bias report when annotations are given.
pub fn score_outputs(
    hyps: &[Vec<u32>],
    refs: &[&[u32]],
    annotations: Option<&[Annotation<u32>]>,
    truncation_ratio: f64,
) -> Result<TestScores> {
    let bleu = metrics::corpus_bleu(hyps, refs)?;
    let ref_len: usize = refs.iter().map(|r| r.len()).sum();
    if ref_len == 0 {
        return Err(KdError::InvalidArgument("references are empty".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| metrics::edit_distance(h, r)).sum();
    let ter_edits: usize = hyps.par_iter().zip(refs.par_iter()).map(|(h, r)| metrics::ter_edits(h, r)).sum();
    let truncation_rate = metrics::truncation_rate(hyps, refs, &SEP, truncation_ratio)?;
    let bias = annotations.map(|a| metrics::marked_term_accuracy(hyps, a)).transpose()?;
    Ok(TestScores {
        bleu,
        wer: 100.0 * edits as f64 / ref_len as f64,
        ter: 100.0 * ter_edits as f64 / ref_len as f64,
        truncation_rate,
        bias,
    })
}

pub fn evaluate<S: Scalar>(
    model: &Seq2SeqModel<S>,
    test: &[Example],
    beam: usize,
    annotations: Option<&[Annotation<u32>]>,
    truncation_ratio: f64,
) -> Result<TestScores> {
    let hyps = decode_all(model, test, beam)?;
    let refs: Vec<&[u32]> = test.iter().map(|e| e.target.as_slice()).collect();
    score_outputs(&hyps, &refs, annotations, truncation_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthtask::{generate_corpus, TaskSpec};

    #[test]
    fn batches_cover_each_epoch() {
        let order = batch_order(3, 10, 4, 5);
        assert_eq!(order.len(), 5);
        let flat: Vec<usize> = order.concat();
        let mut first: Vec<usize> = flat[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(order, batch_order(3, 10, 4, 5));
        assert_ne!(order, batch_order(4, 10, 4, 5));
        assert_eq!(batch_order(1, 3, 8, 2)[0].len(), 3);
    }

    fn small_config(spec: &TaskSpec) -> ModelConfig {
        ModelConfig {
            vocab_size_src: spec.model_src_vocab(),
            vocab_size_tgt: spec.model_tgt_vocab(),
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 32,
            dropout: 0.1,
            frame_dim: spec.frame_dim,
            max_len: 64,
        }
    }

    #[test]
    fn overfit_smoke_and_determinism() {
        let spec = TaskSpec {
            src_vocab: 8,
            tgt_vocab: 8,
            min_len: 2,
            max_len: 4,
            ..TaskSpec::default()
        };
        let samples = generate_corpus(&spec, 50).unwrap();
        let train = examples_from_samples(&samples, Flavor::FrameEncoder, None).unwrap();
        let cfg = TrainConfig {
            max_steps: 60,
            batch_size: 8,
            eval_every: 30,
            ..TrainConfig::default()
        };
        let data = StageData {
            train: &train,
            valid: &train[..10],
            store: None,
        };
        let model = Seq2SeqModel::<f64>::new(small_config(&spec), Flavor::FrameEncoder, 1).unwrap();
        let (m1, r1) = train_stage(model.clone(), "s", &cfg, &data).unwrap();
        let (m2, r2) = train_stage(model, "s", &cfg, &data).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.params().tensors(), m2.params().tensors());
        let head: f64 = r1.losses[..5].iter().sum();
        let tail: f64 = r1.losses[r1.losses.len() - 5..].iter().sum();
        assert!(tail < head, "loss did not fall: {head} -> {tail}");
        assert_eq!(r1.val_bleu.len(), 2);
        assert_eq!(r1.warmup_steps, 400);
    }

    #[test]
    fn kd_stage_requires_aligned_store() {
        let spec = TaskSpec {
            src_vocab: 6,
            tgt_vocab: 6,
            min_len: 2,
            max_len: 3,
            ..TaskSpec::default()
        };
        let samples = generate_corpus(&spec, 6).unwrap();
        let train = examples_from_samples(&samples, Flavor::FrameEncoder, None).unwrap();
        let mut cfg = TrainConfig {
            max_steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        cfg.loss.kind = LossKind::WordKd;
        let model = Seq2SeqModel::<f64>::new(small_config(&spec), Flavor::FrameEncoder, 1).unwrap();
        let no_store = StageData {
            train: &train,
            valid: &[],
            store: None,
        };
        assert!(train_stage(model.clone(), "kd", &cfg, &no_store).is_err());

        let teacher = Seq2SeqModel::<f64>::new(small_config(&spec), Flavor::TokenEncoder, 2).unwrap();
        let tok = examples_from_samples(&samples, Flavor::TokenEncoder, None).unwrap();
        let pairs: Vec<_> = tok
            .iter()
            .map(|e| crate::teacherstore::ForcedPair {
                id: e.id,
                source: match &e.input {
                    Input::Tokens(t) => t,
                    _ => unreachable!(),
                },
                target: &e.target,
            })
            .collect();
        let store = crate::teacherstore::precompute_teacher_outputs(&teacher, &pairs[1..], 4).unwrap();
        let wrong = StageData {
            train: &train,
            valid: &[],
            store: Some(&store),
        };
        assert!(matches!(
            train_stage(model.clone(), "kd", &cfg, &wrong),
            Err(KdError::Misalignment(_))
        ));
        let store = crate::teacherstore::precompute_teacher_outputs(&teacher, &pairs, 4).unwrap();
        let right = StageData {
            train: &train,
            valid: &[],
            store: Some(&store),
        };
        let (_, rec) = train_stage(model.clone(), "kd", &cfg, &right).unwrap();
        assert_eq!(rec.losses.len(), 2);
        cfg.loss.k = Some(5);
        assert!(train_stage(model, "kd", &cfg, &right).is_err());
    }

    #[test]
    fn fixed_schedule_logs_constant_lr() {
        let spec = TaskSpec {
            src_vocab: 6,
            tgt_vocab: 6,
            min_len: 2,
            max_len: 3,
            ..TaskSpec::default()
        };
        let samples = generate_corpus(&spec, 6).unwrap();
        let train = examples_from_samples(&samples, Flavor::FrameEncoder, None).unwrap();
        let cfg = TrainConfig {
            max_steps: 5,
            batch_size: 2,
            schedule: crate::pipeline::Schedule::Fixed,
            ..TrainConfig::default()
        };
        let model = Seq2SeqModel::<f64>::new(small_config(&spec), Flavor::FrameEncoder, 1).unwrap();
        let data = StageData {
            train: &train,
            valid: &[],
            store: None,
        };
        let (_, rec) = train_stage(model, "ft", &cfg, &data).unwrap();
        assert!(rec.lrs.iter().all(|&lr| lr == 1e-4));
    }
}
