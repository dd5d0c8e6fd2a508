use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use super::config::{ExperimentPlan, Init, TargetSource, TrainConfig};
use super::train::{
    derive_seed, evaluate, examples_from_samples, sha256_hex, train_stage, transcript_examples, RunRecord,
    StageData, StageRecord, TestScores,
};
use crate::error::{KdError, Result};
use crate::metrics::Annotation;
use crate::model::{Flavor, ModelConfig, Seq2SeqModel};
use crate::numerics::Scalar;
use crate::synthtask::Sample;
use crate::teacherstore::TeacherStore;

/// Everything a plan may refer to, already loaded.
#[derive(Clone, Debug)]
pub struct DataBundle<S> {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Aligned with `test`.
    pub annotations: Option<Vec<Annotation<u32>>>,
    /// Generated target corpora aligned with `train`.
    pub targets: BTreeMap<TargetSource, Vec<Vec<u32>>>,
    pub stores: BTreeMap<String, TeacherStore>,
    pub encoder: Option<Seq2SeqModel<S>>,
    pub checkpoints: BTreeMap<String, Seq2SeqModel<S>>,
}

impl<S> DataBundle<S> {
    pub fn new(train: Vec<Sample>, valid: Vec<Sample>, test: Vec<Sample>) -> Self {
        Self {
            train,
            valid,
            test,
            annotations: None,
            targets: BTreeMap::new(),
            stores: BTreeMap::new(),
            encoder: None,
            checkpoints: BTreeMap::new(),
        }
    }
}

pub struct PlanOutcome<S> {
    pub model: Seq2SeqModel<S>,
    pub record: RunRecord,
}

const STREAM_INIT: u64 = 100;
const STREAM_STAGE: u64 = 200;

fn initial_model<S: Scalar>(
    plan: &ExperimentPlan,
    i: usize,
    previous: Option<Seq2SeqModel<S>>,
    data: &DataBundle<S>,
) -> Result<Seq2SeqModel<S>> {
    let stage = &plan.stages[i];
    let fresh = || Seq2SeqModel::new(plan.model.clone(), stage.input, derive_seed(plan.seed, STREAM_INIT + i as u64));
    let model = match &stage.init {
        Init::Scratch => fresh()?,
        Init::Previous => previous.ok_or_else(|| KdError::InvalidArgument("no previous stage".into()))?,
        Init::PretrainedEncoder => {
            let donor = data
                .encoder
                .as_ref()
                .ok_or_else(|| KdError::InvalidArgument("plan needs a pretrained encoder".into()))?;
            let mut m = fresh()?;
            m.load_encoder_from(donor)?;
            m
        }
        Init::Checkpoint(name) => data
            .checkpoints
            .get(name)
            .cloned()
            .ok_or_else(|| KdError::InvalidArgument(format!("checkpoint `{name}` not loaded")))?,
    };
    if model.flavor() != stage.input {
        return Err(KdError::IncompatibleCheckpoint(format!(
            "stage `{}` wants {} input but its initial model reads {}",
            stage.name,
            stage.input.as_str(),
            model.flavor().as_str()
        )));
    }
    Ok(model)
}

/// Runs every stage in order, then scores the final model on the test set.
pub fn run_plan<S: Scalar>(plan: &ExperimentPlan, data: &DataBundle<S>) -> Result<PlanOutcome<S>> {
    plan.validate()?;
    let started = Instant::now();
    let mut stages = Vec::new();
    let mut model: Option<Seq2SeqModel<S>> = None;
    for (i, stage) in plan.stages.iter().enumerate() {
        let targets = match stage.targets {
            TargetSource::Gold => None,
            other => Some(
                data.targets
                    .get(&other)
                    .ok_or_else(|| KdError::InvalidArgument(format!("no {other} target corpus loaded")))?
                    .as_slice(),
            ),
        };
        let train = examples_from_samples(&data.train, stage.input, targets)?;
        let valid = examples_from_samples(&data.valid, stage.input, None)?;
        let store = if stage.train.loss.kind.uses_teacher() {
            let name = stage.store_name();
            Some(
                data.stores
                    .get(&name)
                    .ok_or_else(|| KdError::InvalidArgument(format!("no teacher store named `{name}`")))?,
            )
        } else {
            None
        };
        let init = initial_model(plan, i, model.take(), data)?;
        let cfg = TrainConfig {
            seed: derive_seed(plan.seed, STREAM_STAGE + i as u64),
            ..stage.train.clone()
        };
        let (trained, rec) = train_stage(
            init,
            &stage.name,
            &cfg,
            &StageData {
                train: &train,
                valid: &valid,
                store,
            },
        )?;
        stages.push(rec);
        model = Some(trained);
    }
    let model = model.expect("validated plans have stages");
    let flavor = model.flavor();
    let test = examples_from_samples(&data.test, flavor, None)?;
    let scores = if test.is_empty() {
        None
    } else {
        if let Some(a) = &data.annotations {
            if a.len() != test.len() {
                return Err(KdError::InvalidArgument("annotations must align with the test set".into()));
            }
        }
        Some(evaluate(&model, &test, plan.eval_beam, data.annotations.as_deref(), plan.truncation_ratio)?)
    };
    let record = RunRecord {
        plan: plan.name.clone(),
        config_hash: sha256_hex(plan.to_kv().as_bytes()),
        seed: plan.seed,
        stages,
        test: scores,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    info!("plan `{}` done in {:.1}s", plan.name, record.wall_time_secs);
    Ok(PlanOutcome { model, record })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub plan: String,
    pub outcome: std::result::Result<(TestScores, String), String>,
}

/// Runs plans in parallel; a failing plan is reported in its row.
pub fn run_experiment_matrix<S: Scalar>(plans: &[ExperimentPlan], data: &DataBundle<S>) -> Vec<MatrixRow> {
    plans
        .par_iter()
        .map(|p| {
            let outcome = run_plan(p, data).and_then(|o| {
                let hash = o.record.hash();
                o.record
                    .test
                    .map(|t| (t, hash))
                    .ok_or_else(|| KdError::InvalidArgument("no test set".into()))
            });
            if let Err(e) = &outcome {
                warn!("plan `{}` failed: {e}", p.name);
            }
            MatrixRow {
                plan: p.name.clone(),
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect()
}

pub const MATRIX_COLUMNS: [&str; 10] = [
    "plan",
    "bleu",
    "wer",
    "ter",
    "truncation_rate",
    "diff_f",
    "diff_m",
    "bias",
    "record_hash",
    "status",
];

/// Tab-separated table with a header row in [`MATRIX_COLUMNS`] order.
pub fn matrix_tsv(rows: &[MatrixRow]) -> String {
    let mut out = MATRIX_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        let plan = r.plan.replace(['\t', '\n'], " ");
        match &r.outcome {
            Ok((t, hash)) => {
                let (df, dm, b) = match &t.bias {
                    Some(b) => (format!("{:.2}", b.f.diff), format!("{:.2}", b.m.diff), format!("{:.2}", b.bias)),
                    None => ("NA".into(), "NA".into(), "NA".into()),
                };
                let _ = writeln!(
                    out,
                    "{plan}\t{:.2}\t{:.2}\t{:.2}\t{:.4}\t{df}\t{dm}\t{b}\t{hash}\tok",
                    t.bleu, t.wer, t.ter, t.truncation_rate
                );
            }
            Err(e) => {
                let msg = e.replace(['\t', '\n'], " ");
                let _ = writeln!(out, "{plan}\tNA\tNA\tNA\tNA\tNA\tNA\tNA\tNA\terror: {msg}");
            }
        }
    }
    out
}

/// Trains a frames-to-transcript model whose encoder can seed student stages.
pub fn pretrain_student_encoder<S: Scalar>(
    train: &[Sample],
    valid: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Seq2SeqModel<S>, StageRecord)> {
    let asr_config = ModelConfig {
        vocab_size_tgt: model.vocab_size_src,
        ..model.clone()
    };
    let init = Seq2SeqModel::new(asr_config, Flavor::FrameEncoder, derive_seed(cfg.seed, STREAM_INIT))?;
    let tr = transcript_examples(train);
    let va = transcript_examples(valid);
    train_stage(
        init,
        "pretrain-encoder",
        cfg,
        &StageData {
            train: &tr,
            valid: &va,
            store: None,
        },
    )
}
