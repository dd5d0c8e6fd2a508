use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use kdlab::metrics::{self, format_annotations, parse_annotations, Annotation};
use kdlab::model::{load_checkpoint, save_checkpoint, Flavor, Seq2SeqModel};
use kdlab::numerics::Scalar;
use kdlab::pipeline::{
    decode_all, evaluate, examples_from_samples, matrix_tsv, pretrain_student_encoder, run_experiment_matrix,
    run_plan, score_outputs, DataBundle, ExperimentPlan, TargetSource,
};
use kdlab::synthtask::{compose_multisentence, generate_split, load_corpus, marked_term_annotations, save_corpus, Sample, TaskSpec};
use kdlab::teacherstore::{
    generate_seqinter_targets, generate_seqkd_targets, load_targets, precompute_teacher_outputs, save_targets,
    ForcedPair, GeneratedTargets, TeacherStore,
};
use kdlab::{KdError, Result};

const VALID_FIRST_ID: u32 = 1_000_000;
const TEST_FIRST_ID: u32 = 2_000_000;

#[derive(Parser)]
#[command(name = "kdlab", version, about = "Knowledge distillation lab for toy speech-translation models")]
struct Cli {
    /// Master seed; overrides the seed in spec and plan files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision of model arithmetic.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/valid/test corpora and frame sidecars.
    GenData(GenData),
    /// Train a token-input model from a plan.
    TrainTeacher(Train),
    /// Train a frames-to-transcript model whose encoder seeds student stages.
    PretrainEncoder(Pretrain),
    /// Force the teacher on a target corpus and store its top-K distributions.
    DistillPrecompute(Precompute),
    /// Generate seq-KD or seq-inter target corpora with the teacher.
    GenTargets(GenTargets),
    /// Run a student plan.
    TrainStudent(Train),
    /// Decode a test corpus and print the requested metrics.
    Evaluate(Evaluate),
    /// Run every `*.plan` file of a directory and write a results table.
    Matrix(Matrix),
}

#[derive(Args)]
struct GenData {
    /// TaskSpec file; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    valid: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    /// Sentences per multi-sentence sample.
    #[arg(long, default_value_t = 2)]
    multi_k: usize,
    /// Multi-sentence samples appended to `train_mixed`.
    #[arg(long, default_value_t = 0)]
    multi_train: usize,
    /// Multi-sentence samples appended to `valid_mixed`.
    #[arg(long, default_value_t = 0)]
    multi_valid: usize,
    /// Multi-sentence samples written as `test_multi`.
    #[arg(long, default_value_t = 0)]
    multi_test: usize,
    /// Also write marked-term annotations for the test corpora.
    #[arg(long)]
    annotations: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    plan: PathBuf,
    /// Final checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// RunRecord report; defaults to `out` with its extension replaced by `record`.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct Pretrain {
    /// Plan supplying the model shape, `data.train`, `data.valid` and stage 0's training settings.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Precompute {
    #[arg(long)]
    teacher: PathBuf,
    /// Corpus stem supplying sources (and gold targets).
    #[arg(long)]
    data: PathBuf,
    /// Number of stored entries per position, or `full`.
    #[arg(long, default_value = "8")]
    k: String,
    /// Target corpus to force; gold when omitted.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    SeqKd,
    SeqInter,
}

#[derive(Args)]
struct GenTargets {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = kdlab::teacherstore::DEFAULT_SEQKD_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = kdlab::teacherstore::DEFAULT_SEQINTER_NBEST)]
    nbest: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of bleu,wer,ter,truncation,bias.
    #[arg(long, default_value = "bleu,wer,ter")]
    metrics: String,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = metrics::TRUNCATION_RATIO)]
    truncation_ratio: f64,
    /// Write hypotheses here, one per line.
    #[arg(long)]
    hyps: Option<PathBuf>,
}

#[derive(Args)]
struct Matrix {
    #[arg(long)]
    plans: PathBuf,
    /// Results table; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| KdError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn gen_data(a: &GenData, seed: Option<u64>) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => TaskSpec::from_kv(&read_text(p)?)?,
        None => TaskSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("taskspec.kv"), spec.to_kv())?;
    let d = spec.frame_dim;
    let train = generate_split(&spec, a.train, 0)?;
    let valid = generate_split(&spec, a.valid, VALID_FIRST_ID)?;
    let test = generate_split(&spec, a.test, TEST_FIRST_ID)?;
    let multi = |base: &[Sample], n: usize| -> Result<Vec<Sample>> {
        if n > base.len() {
            return Err(KdError::InvalidArgument(format!("asked for {n} multi-sentence samples from {}", base.len())));
        }
        compose_multisentence(&base[..n], a.multi_k, &spec)
    };
    let write = |name: &str, samples: &[Sample], annotate: bool| -> Result<()> {
        save_corpus(&a.out.join(name), d, samples)?;
        if annotate {
            let ann = marked_term_annotations(samples, &spec)?;
            let rows: Vec<(u32, Annotation<u32>)> = samples.iter().map(|s| s.id).zip(ann).collect();
            fs::write(a.out.join(format!("{name}.ann")), format_annotations(&rows))?;
        }
        info!("wrote {name}: {} samples", samples.len());
        Ok(())
    };
    write("train", &train, false)?;
    write("valid", &valid, false)?;
    write("test", &test, a.annotations)?;
    if a.multi_train > 0 {
        let mixed: Vec<Sample> = train.iter().cloned().chain(multi(&train, a.multi_train)?).collect();
        write("train_mixed", &mixed, false)?;
    }
    if a.multi_valid > 0 {
        let mixed: Vec<Sample> = valid.iter().cloned().chain(multi(&valid, a.multi_valid)?).collect();
        write("valid_mixed", &mixed, false)?;
    }
    if a.multi_test > 0 {
        write("test_multi", &multi(&test, a.multi_test)?, a.annotations)?;
    }
    Ok(())
}

fn corpus(stem: &Path) -> Result<Vec<Sample>> {
    Ok(load_corpus(stem)?.1)
}

/// Annotations reordered to follow `samples`.
fn aligned_annotations(path: &Path, samples: &[Sample]) -> Result<Vec<Annotation<u32>>> {
    let mut by_id: HashMap<u32, Annotation<u32>> = parse_annotations(&read_text(path)?)?.into_iter().collect();
    samples
        .iter()
        .map(|s| {
            by_id
                .remove(&s.id)
                .ok_or_else(|| KdError::Misalignment(format!("no annotation for sample {}", s.id)))
        })
        .collect()
}

struct PlanFile {
    plan: ExperimentPlan,
    dir: PathBuf,
}

fn read_plan(path: &Path, seed: Option<u64>) -> Result<PlanFile> {
    let mut plan = ExperimentPlan::from_kv(&read_text(path)?)
        .map_err(|e| KdError::InvalidArgument(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(PlanFile { plan, dir })
}

impl PlanFile {
    fn resource(&self, key: &str) -> Option<PathBuf> {
        self.plan.resources.get(key).map(|v| self.dir.join(v))
    }
}

/// Loads every file a set of plans refers to. Plans sharing a bundle must agree on `data.*`.
fn load_bundle<S: Scalar>(plans: &[PlanFile]) -> Result<DataBundle<S>> {
    let data_keys = ["data.train", "data.valid", "data.test", "data.annotations"];
    let first = &plans[0];
    for p in &plans[1..] {
        for k in data_keys {
            if p.resource(k) != first.resource(k) {
                return Err(KdError::InvalidArgument(format!(
                    "plans `{}` and `{}` disagree on {k}",
                    first.plan.name, p.plan.name
                )));
            }
        }
    }
    let load = |k: &str| first.resource(k).map(|p| corpus(&p)).transpose();
    let train = load("data.train")?.ok_or_else(|| KdError::InvalidArgument("plan lacks data.train".into()))?;
    let valid = load("data.valid")?.unwrap_or_default();
    let test = load("data.test")?.unwrap_or_default();
    let mut bundle = DataBundle::new(train, valid, test);
    if let Some(p) = first.resource("data.annotations") {
        bundle.annotations = Some(aligned_annotations(&p, &bundle.test)?);
    }

    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for pf in plans {
        for key in pf.plan.resources.keys() {
            if key.starts_with("data.") {
                continue;
            }
            let path = pf.resource(key).expect("key exists");
            match seen.get(key) {
                Some(prev) if *prev != path => {
                    return Err(KdError::InvalidArgument(format!("plans bind {key} to different files")))
                }
                Some(_) => continue,
                None => {
                    seen.insert(key.clone(), path.clone());
                }
            }
            if let Some(src) = key.strip_prefix("targets.") {
                let t: TargetSource = src.parse()?;
                bundle.targets.insert(t, load_targets(&path)?);
            } else if let Some(name) = key.strip_prefix("store.") {
                bundle.stores.insert(name.to_string(), TeacherStore::load(&path)?);
            } else if let Some(name) = key.strip_prefix("checkpoint.") {
                bundle.checkpoints.insert(name.to_string(), load_checkpoint(&path)?);
            } else if key == "encoder" {
                bundle.encoder = Some(load_checkpoint(&path)?);
            }
        }
    }
    Ok(bundle)
}

fn train<S: Scalar>(a: &Train, seed: Option<u64>, want: Flavor) -> Result<()> {
    let pf = read_plan(&a.plan, seed)?;
    if let Some(s) = pf.plan.stages.iter().find(|s| s.input != want) {
        return Err(KdError::InvalidArgument(format!(
            "stage `{}` reads {} but this command trains {} models",
            s.name,
            s.input.as_str(),
            want.as_str()
        )));
    }
    let bundle = load_bundle::<S>(std::slice::from_ref(&pf))?;
    let out = run_plan(&pf.plan, &bundle)?;
    save_checkpoint(&out.model, &a.out)?;
    let record = a.record.clone().unwrap_or_else(|| a.out.with_extension("record"));
    fs::write(&record, out.record.to_kv())?;
    if let Some(t) = &out.record.test {
        println!("test BLEU {:.2}  WER {:.2}  TER {:.2}", t.bleu, t.wer, t.ter);
    }
    println!("record hash {}", out.record.hash());
    Ok(())
}

fn pretrain<S: Scalar>(a: &Pretrain, seed: Option<u64>) -> Result<()> {
    let pf = read_plan(&a.plan, seed)?;
    let need = |k: &str| pf.resource(k).ok_or_else(|| KdError::InvalidArgument(format!("plan lacks {k}")));
    let train = corpus(&need("data.train")?)?;
    let valid = match pf.resource("data.valid") {
        Some(p) => corpus(&p)?,
        None => Vec::new(),
    };
    let cfg = kdlab::pipeline::TrainConfig {
        seed: pf.plan.seed,
        ..pf.plan.stages[0].train.clone()
    };
    let (model, rec) = pretrain_student_encoder::<S>(&train, &valid, &pf.plan.model, &cfg)?;
    save_checkpoint(&model, &a.out)?;
    if let Some((step, bleu)) = rec.val_bleu.iter().find(|(s, _)| *s == rec.best_step) {
        println!("transcript BLEU {bleu:.2} at step {step}");
    }
    Ok(())
}

fn forced_targets(samples: &[Sample], targets: Option<&Path>) -> Result<Vec<Vec<u32>>> {
    match targets {
        None => Ok(samples.iter().map(|s| s.tgt_tokens.clone()).collect()),
        Some(p) => {
            let t = load_targets(p)?;
            if t.len() != samples.len() {
                return Err(KdError::Misalignment(format!("{} target lines for {} samples", t.len(), samples.len())));
            }
            Ok(t)
        }
    }
}

fn precompute<S: Scalar>(a: &Precompute) -> Result<()> {
    let teacher: Seq2SeqModel<S> = load_checkpoint(&a.teacher)?;
    let samples = corpus(&a.data)?;
    let targets = forced_targets(&samples, a.targets.as_deref())?;
    let k = match a.k.as_str() {
        "full" => teacher.config().vocab_size_tgt,
        v => v.parse().map_err(|_| KdError::InvalidArgument(format!("bad K `{v}`")))?,
    };
    let pairs: Vec<ForcedPair> = samples
        .iter()
        .zip(&targets)
        .filter(|(s, _)| !s.src_tokens.is_empty())
        .map(|(s, t)| ForcedPair {
            id: s.id,
            source: &s.src_tokens,
            target: t,
        })
        .collect();
    let store = precompute_teacher_outputs(&teacher, &pairs, k)?;
    store.save(&a.out)?;
    println!(
        "{} sentences, {} positions, K={}, {} bytes",
        store.entries().len(),
        store.total_positions(),
        store.k(),
        store.encoded_len()
    );
    Ok(())
}

fn gen_targets<S: Scalar>(a: &GenTargets) -> Result<()> {
    let teacher: Seq2SeqModel<S> = load_checkpoint(&a.teacher)?;
    let samples = corpus(&a.data)?;
    let sources: Vec<&[u32]> = samples.iter().map(|s| s.src_tokens.as_slice()).collect();
    let generated: GeneratedTargets = match a.method {
        Method::SeqKd => generate_seqkd_targets(&teacher, &sources, a.beam)?,
        Method::SeqInter => {
            let refs: Vec<&[u32]> = samples.iter().map(|s| s.tgt_tokens.as_slice()).collect();
            generate_seqinter_targets(&teacher, &sources, &refs, a.beam, a.nbest)?
        }
    };
    let gaps = generated.gaps();
    if !gaps.is_empty() {
        warn!("{} gaps written as empty lines", gaps.len());
    }
    let lines = generated.into_lines();
    let same = lines.iter().zip(&samples).filter(|(t, s)| **t == s.tgt_tokens).count();
    save_targets(&a.out, &lines)?;
    println!("{} targets, {same} identical to the reference", lines.len());
    Ok(())
}

fn evaluate_cmd<S: Scalar>(a: &Evaluate) -> Result<()> {
    const KNOWN: [&str; 5] = ["bleu", "wer", "ter", "truncation", "bias"];
    let wanted: BTreeSet<&str> = a.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if let Some(m) = wanted.iter().find(|m| !KNOWN.contains(m)) {
        return Err(KdError::InvalidArgument(format!("unknown metric `{m}`")));
    }
    let model: Seq2SeqModel<S> = load_checkpoint(&a.model)?;
    let samples = corpus(&a.data)?;
    let test = examples_from_samples(&samples, model.flavor(), None)?;
    let annotations = match (&a.annotations, wanted.contains("bias")) {
        (Some(p), true) => {
            let kept: Vec<Sample> = samples.into_iter().filter(|s| test.iter().any(|e| e.id == s.id)).collect();
            Some(aligned_annotations(p, &kept)?)
        }
        (None, true) => return Err(KdError::InvalidArgument("bias needs --annotations".into())),
        _ => None,
    };
    let scores = if let Some(path) = &a.hyps {
        let hyps = decode_all(&model, &test, a.beam)?;
        save_targets(path, &hyps)?;
        let refs: Vec<&[u32]> = test.iter().map(|e| e.target.as_slice()).collect();
        score_outputs(&hyps, &refs, annotations.as_deref(), a.truncation_ratio)?
    } else {
        evaluate(&model, &test, a.beam, annotations.as_deref(), a.truncation_ratio)?
    };
    for m in KNOWN.iter().filter(|m| wanted.contains(*m)) {
        match *m {
            "bleu" => println!("bleu\t{:.2}", scores.bleu),
            "wer" => println!("wer\t{:.2}", scores.wer),
            "ter" => println!("ter\t{:.2}", scores.ter),
            "truncation" => println!("truncation_rate\t{:.4}", scores.truncation_rate),
            _ => {
                let b = scores.bias.as_ref().expect("annotations were supplied");
                println!("corr_f\t{:.2}\nwrong_f\t{:.2}\ndiff_f\t{:.2}", b.f.corr_pct, b.f.wrong_pct, b.f.diff);
                println!("corr_m\t{:.2}\nwrong_m\t{:.2}\ndiff_m\t{:.2}", b.m.corr_pct, b.m.wrong_pct, b.m.diff);
                println!("bias\t{:.2}", b.bias);
            }
        }
    }
    Ok(())
}

fn matrix<S: Scalar>(a: &Matrix, seed: Option<u64>) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.plans)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "plan"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(KdError::InvalidArgument(format!("no .plan files in {}", a.plans.display())));
    }
    let plans = files.iter().map(|f| read_plan(f, seed)).collect::<Result<Vec<_>>>()?;
    let bundle = load_bundle::<S>(&plans)?;
    let list: Vec<ExperimentPlan> = plans.into_iter().map(|p| p.plan).collect();
    let table = matrix_tsv(&run_experiment_matrix(&list, &bundle));
    match &a.out {
        Some(p) => fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run<S: Scalar>(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(a, cli.seed),
        Cmd::TrainTeacher(a) => train::<S>(a, cli.seed, Flavor::TokenEncoder),
        Cmd::PretrainEncoder(a) => pretrain::<S>(a, cli.seed),
        Cmd::DistillPrecompute(a) => precompute::<S>(a),
        Cmd::GenTargets(a) => gen_targets::<S>(a),
        Cmd::TrainStudent(a) => train::<S>(a, cli.seed, Flavor::FrameEncoder),
        Cmd::Evaluate(a) => evaluate_cmd::<S>(a),
        Cmd::Matrix(a) => matrix::<S>(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
