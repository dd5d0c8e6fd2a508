use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{KdError, Result};
use crate::kvfile::KvReader;
use crate::model::{Flavor, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    WarmupInverseSqrt,
    Fixed,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Schedule::WarmupInverseSqrt => "warmup-inverse-sqrt",
            Schedule::Fixed => "fixed",
        })
    }
}

impl FromStr for Schedule {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup-inverse-sqrt" => Ok(Schedule::WarmupInverseSqrt),
            "fixed" => Ok(Schedule::Fixed),
            _ => Err(KdError::InvalidArgument(format!("unknown schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    LabelSmoothedCe,
    WordKd,
    /// `kd_weight * word-kd + ce_weight * label-smoothed-ce`.
    Composed,
}

impl LossKind {
    pub fn uses_teacher(self) -> bool {
        self != LossKind::LabelSmoothedCe
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            LossKind::LabelSmoothedCe => "label-smoothed-ce",
            LossKind::WordKd => "word-kd",
            LossKind::Composed => "composed",
        })
    }
}

impl FromStr for LossKind {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label-smoothed-ce" => Ok(LossKind::LabelSmoothedCe),
            "word-kd" => Ok(LossKind::WordKd),
            "composed" => Ok(LossKind::Composed),
            _ => Err(KdError::InvalidArgument(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Truncation width; `None` uses every entry the store holds.
    pub k: Option<usize>,
    pub temperature: f64,
    pub epsilon: f64,
    pub kd_weight: f64,
    pub ce_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::LabelSmoothedCe,
            k: None,
            temperature: 1.0,
            epsilon: 0.1,
            kd_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    /// Shrink warmup tenfold when the stage is shorter than the warmup.
    pub scale_warmup: bool,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub schedule: Schedule,
    pub fixed_lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss: LossSpec,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_steps: 4000,
            scale_warmup: true,
            lr_init: 1e-7,
            lr_peak: 5e-3,
            schedule: Schedule::WarmupInverseSqrt,
            fixed_lr: 1e-4,
            dropout: 0.1,
            batch_size: 32,
            max_steps: 3000,
            seed: 0,
            loss: LossSpec::default(),
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KdError::InvalidArgument(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.lr_init > 0.0 && self.lr_peak > 0.0 && self.fixed_lr > 0.0 && self.adam_eps > 0.0) {
            return bad("learning rates and epsilon must be positive".into());
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        let l = &self.loss;
        if !(l.temperature > 0.0) || !(0.0..1.0).contains(&l.epsilon) || l.k == Some(0) {
            return bad("loss needs T > 0, 0 <= epsilon < 1 and K >= 1".into());
        }
        if l.kind == LossKind::Composed && (!(l.kd_weight >= 0.0 && l.ce_weight >= 0.0) || l.kd_weight + l.ce_weight <= 0.0) {
            return bad("composed loss weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    /// Warmup length actually used by a stage.
    pub fn effective_warmup(&self) -> usize {
        if self.scale_warmup && self.max_steps < self.warmup_steps {
            (self.warmup_steps / 10).max(1)
        } else {
            self.warmup_steps
        }
    }
}

/// Learning rate at `step` under `config`'s schedule (with its warmup as given).
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    match config.schedule {
        Schedule::Fixed => config.fixed_lr,
        Schedule::WarmupInverseSqrt => {
            let w = config.warmup_steps as f64;
            let s = step as f64;
            if step <= config.warmup_steps {
                config.lr_init + (config.lr_peak - config.lr_init) * s / w
            } else {
                config.lr_peak * (w / s).sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetSource {
    Gold,
    SeqKd,
    SeqInter,
}

impl TargetSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetSource::Gold => "gold",
            TargetSource::SeqKd => "seq-kd",
            TargetSource::SeqInter => "seq-inter",
        }
    }
}

impl fmt::Display for TargetSource {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetSource {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(TargetSource::Gold),
            "seq-kd" => Ok(TargetSource::SeqKd),
            "seq-inter" => Ok(TargetSource::SeqInter),
            _ => Err(KdError::InvalidArgument(format!("unknown target source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Init {
    Scratch,
    Previous,
    /// Fresh model whose encoder is copied from the bundle's pretrained encoder.
    PretrainedEncoder,
    Checkpoint(String),
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            Init::Scratch => f.write_str("scratch"),
            Init::Previous => f.write_str("previous"),
            Init::PretrainedEncoder => f.write_str("pretrained-encoder"),
            Init::Checkpoint(n) => write!(f, "checkpoint:{n}"),
        }
    }
}

impl FromStr for Init {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Init::Scratch),
            "previous" => Ok(Init::Previous),
            "pretrained-encoder" => Ok(Init::PretrainedEncoder),
            _ => match s.strip_prefix("checkpoint:") {
                Some(n) if !n.is_empty() => Ok(Init::Checkpoint(n.to_string())),
                _ => Err(KdError::InvalidArgument(format!("unknown init `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub input: Flavor,
    pub targets: TargetSource,
    /// Store used by KD losses; defaults to the one named after `targets`.
    pub store: Option<String>,
    pub init: Init,
    pub train: TrainConfig,
}

impl StageSpec {
    pub fn new(name: &str, train: TrainConfig) -> Self {
        Self {
            name: name.to_string(),
            input: Flavor::FrameEncoder,
            targets: TargetSource::Gold,
            store: None,
            init: Init::Scratch,
            train,
        }
    }

    pub fn store_name(&self) -> String {
        self.store.clone().unwrap_or_else(|| self.targets.as_str().to_string())
    }
}

/// A named chain of training stages plus evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub stages: Vec<StageSpec>,
    /// Beam used for test decoding (1 = greedy).
    pub eval_beam: usize,
    pub truncation_ratio: f64,
    /// File references (`data.*`, `targets.*`, `store.*`, `encoder`, `checkpoint.*`) resolved by the CLI.
    pub resources: BTreeMap<String, String>,
}

const RESOURCE_PREFIXES: [&str; 4] = ["data.", "targets.", "store.", "checkpoint."];

impl ExperimentPlan {
    pub fn new(name: &str, seed: u64, model: ModelConfig, stages: Vec<StageSpec>) -> Self {
        Self {
            name: name.to_string(),
            seed,
            model,
            stages,
            eval_beam: 1,
            truncation_ratio: crate::metrics::TRUNCATION_RATIO,
            resources: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(KdError::InvalidArgument(format!("plan `{}` has no stages", self.name)));
        }
        if self.stages[0].init == Init::Previous {
            return Err(KdError::InvalidArgument("the first stage cannot initialize from a previous stage".into()));
        }
        if self.eval_beam == 0 {
            return Err(KdError::InvalidArgument("eval_beam must be at least 1".into()));
        }
        self.model.validate()?;
        for s in &self.stages {
            s.train.validate()?;
        }
        Ok(())
    }

    /// Canonical `key=value` text; parsing it yields an equal plan.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| out.push_str(&format!("{k}={v}\n"));
        put("name", &self.name);
        put("seed", &self.seed);
        put("eval_beam", &self.eval_beam);
        put("truncation_ratio", &self.truncation_ratio);
        let m = &self.model;
        put("model.vocab_size_src", &m.vocab_size_src);
        put("model.vocab_size_tgt", &m.vocab_size_tgt);
        put("model.d_model", &m.d_model);
        put("model.n_heads", &m.n_heads);
        put("model.n_encoder_layers", &m.n_encoder_layers);
        put("model.n_decoder_layers", &m.n_decoder_layers);
        put("model.d_ff", &m.d_ff);
        put("model.frame_dim", &m.frame_dim);
        put("model.max_len", &m.max_len);
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage.{i}.");
            let t = &s.train;
            put(&format!("{p}name"), &s.name);
            put(&format!("{p}input"), &s.input.as_str());
            put(&format!("{p}targets"), &s.targets);
            if let Some(st) = &s.store {
                put(&format!("{p}store"), st);
            }
            put(&format!("{p}init"), &s.init);
            put(&format!("{p}loss"), &t.loss.kind);
            if let Some(k) = t.loss.k {
                put(&format!("{p}k"), &k);
            }
            put(&format!("{p}temperature"), &t.loss.temperature);
            put(&format!("{p}epsilon"), &t.loss.epsilon);
            put(&format!("{p}kd_weight"), &t.loss.kd_weight);
            put(&format!("{p}ce_weight"), &t.loss.ce_weight);
            put(&format!("{p}schedule"), &t.schedule);
            put(&format!("{p}lr_init"), &t.lr_init);
            put(&format!("{p}lr_peak"), &t.lr_peak);
            put(&format!("{p}fixed_lr"), &t.fixed_lr);
            put(&format!("{p}warmup_steps"), &t.warmup_steps);
            put(&format!("{p}scale_warmup"), &t.scale_warmup);
            put(&format!("{p}beta1"), &t.beta1);
            put(&format!("{p}beta2"), &t.beta2);
            put(&format!("{p}adam_eps"), &t.adam_eps);
            put(&format!("{p}dropout"), &t.dropout);
            put(&format!("{p}batch_size"), &t.batch_size);
            put(&format!("{p}max_steps"), &t.max_steps);
            put(&format!("{p}eval_every"), &t.eval_every);
        }
        for (k, v) in &self.resources {
            put(k, v);
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let mut plan = ExperimentPlan::new("plan", 0, ModelConfig::default(), Vec::new());
        r.set("name", &mut plan.name)?;
        r.set("seed", &mut plan.seed)?;
        r.set("eval_beam", &mut plan.eval_beam)?;
        r.set("truncation_ratio", &mut plan.truncation_ratio)?;
        let m = &mut plan.model;
        r.set("model.vocab_size_src", &mut m.vocab_size_src)?;
        r.set("model.vocab_size_tgt", &mut m.vocab_size_tgt)?;
        r.set("model.d_model", &mut m.d_model)?;
        r.set("model.n_heads", &mut m.n_heads)?;
        r.set("model.n_encoder_layers", &mut m.n_encoder_layers)?;
        r.set("model.n_decoder_layers", &mut m.n_decoder_layers)?;
        r.set("model.d_ff", &mut m.d_ff)?;
        r.set("model.frame_dim", &mut m.frame_dim)?;
        r.set("model.max_len", &mut m.max_len)?;

        for prefix in RESOURCE_PREFIXES {
            for k in r.keys_with_prefix(prefix) {
                let v = r.take_str(&k).unwrap_or_default();
                plan.resources.insert(k, v);
            }
        }
        if let Some(v) = r.take_str("encoder") {
            plan.resources.insert("encoder".into(), v);
        }

        let mut i = 0;
        loop {
            let p = format!("stage.{i}.");
            if r.keys_with_prefix(&p).is_empty() {
                break;
            }
            let mut s = StageSpec::new(&format!("stage{i}"), TrainConfig::default());
            r.set(&format!("{p}name"), &mut s.name)?;
            if let Some(v) = r.take_str(&format!("{p}input")) {
                s.input = Flavor::parse(&v)?;
            }
            r.set(&format!("{p}targets"), &mut s.targets)?;
            s.store = r.take_str(&format!("{p}store"));
            r.set(&format!("{p}init"), &mut s.init)?;
            let t = &mut s.train;
            r.set(&format!("{p}loss"), &mut t.loss.kind)?;
            if let Some(v) = r.take_str(&format!("{p}k")) {
                t.loss.k = match v.as_str() {
                    "full" => None,
                    _ => Some(v.parse().map_err(|_| KdError::Format(format!("bad K `{v}`")))?),
                };
            }
            r.set(&format!("{p}temperature"), &mut t.loss.temperature)?;
            r.set(&format!("{p}epsilon"), &mut t.loss.epsilon)?;
            r.set(&format!("{p}kd_weight"), &mut t.loss.kd_weight)?;
            r.set(&format!("{p}ce_weight"), &mut t.loss.ce_weight)?;
            r.set(&format!("{p}schedule"), &mut t.schedule)?;
            r.set(&format!("{p}lr_init"), &mut t.lr_init)?;
            r.set(&format!("{p}lr_peak"), &mut t.lr_peak)?;
            r.set(&format!("{p}fixed_lr"), &mut t.fixed_lr)?;
            r.set(&format!("{p}warmup_steps"), &mut t.warmup_steps)?;
            r.set(&format!("{p}scale_warmup"), &mut t.scale_warmup)?;
            r.set(&format!("{p}beta1"), &mut t.beta1)?;
            r.set(&format!("{p}beta2"), &mut t.beta2)?;
            r.set(&format!("{p}adam_eps"), &mut t.adam_eps)?;
            r.set(&format!("{p}dropout"), &mut t.dropout)?;
            r.set(&format!("{p}batch_size"), &mut t.batch_size)?;
            r.set(&format!("{p}max_steps"), &mut t.max_steps)?;
            r.set(&format!("{p}eval_every"), &mut t.eval_every)?;
            plan.stages.push(s);
            i += 1;
        }
        r.finish()?;
        plan.validate()?;
        Ok(plan)
    }
}
