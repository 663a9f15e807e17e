//! Stage orchestration. Every stage is one training run that leaves a
//! directory `runs/<timestamp>-<stage>/` holding `manifest.json`,
//! `loss.csv`, the merged `checkpoint.bin`, and a resumable `state.bin`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{sample_seeded, SentencePair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, LmTranslator};
use crate::instruction::{
    build_sft_dataset_with, render_training_text, sft_to_jsonl, InstructionMode, SftRecord, TemplateTable,
};
use crate::interlinear::{to_jsonl, Document};
use crate::lang::Direction;
use crate::lora::LoraConfig;
use crate::model::{Checkpoint, ModelConfig, ParamSet};
use crate::tokenizer::Vocab;
use crate::train::{mean_nll, TrainSequence, Trainer, TrainerConfig, UpdateMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Longest training sequence accepted, BOS and EOS included.
    pub seq_len: usize,
    pub seed: u64,
    pub lora: LoraConfig,
    pub warmup_frac: f64,
    pub min_lr_frac: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Permits `epochs = 0`, in which case the input weights come back
    /// unchanged.
    pub test_mode: bool,
    /// Stop after this many optimizer steps; the run can be resumed from
    /// its `state.bin`.
    pub max_steps: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        let t = TrainerConfig::default();
        TrainHyper {
            epochs: 1,
            lr: 1e-3,
            batch_size: t.batch_size,
            seq_len: 256,
            seed: 0,
            lora: LoraConfig::default(),
            warmup_frac: t.warmup_frac,
            min_lr_frac: t.min_lr_frac,
            grad_clip: t.grad_clip,
            weight_decay: t.weight_decay,
            test_mode: false,
            max_steps: None,
        }
    }
}

impl TrainHyper {
    pub fn stage1() -> Self {
        TrainHyper::default()
    }

    pub fn stage2() -> Self {
        TrainHyper {
            epochs: 1,
            ..TrainHyper::default()
        }
    }

    pub fn stage3() -> Self {
        TrainHyper {
            epochs: 3,
            ..TrainHyper::default()
        }
    }

    /// Every problem with this block, checked against the model it will
    /// train.
    pub fn validate(&self, model: &ModelConfig) -> Vec<String> {
        let mut problems = self.trainer_config().validate();
        if self.epochs == 0 && !self.test_mode {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.seq_len < 2 {
            problems.push(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if self.seq_len > model.max_seq_len {
            problems.push(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                self.seq_len, model.max_seq_len
            ));
        }
        if self.lora.rank == 0 {
            problems.push("lora.rank must be at least 1".to_string());
        }
        if self.lora.targets.is_empty() {
            problems.push("lora.targets must not be empty".to_string());
        }
        problems
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            min_lr_frac: self.min_lr_frac,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

/// Everything needed to audit or repeat one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub update_mode: UpdateMode,
    pub instruction_mode: Option<InstructionMode>,
    /// Dataset name to SHA-256 of its serialized bytes.
    pub datasets: BTreeMap<String, String>,
    pub base_params_sha256: String,
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub started_at: String,
    pub wall_time_secs: f64,
    pub steps: usize,
    pub completed: bool,
    pub loss_curve: Vec<(usize, f32)>,
    pub checkpoint: PathBuf,
    pub state: PathBuf,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub extra: Value,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn first_loss(&self) -> Option<f32> {
        self.loss_curve.first().map(|&(_, l)| l)
    }

    pub fn last_loss(&self) -> Option<f32> {
        self.loss_curve.last().map(|&(_, l)| l)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of every parameter tensor's name, shape, and little-endian data.
pub fn params_sha256(params: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.tensors() {
        h.update(name.as_bytes());
        h.update((t.rows as u64).to_le_bytes());
        h.update((t.cols as u64).to_le_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Bytes of a one-text-per-line file holding `texts`.
pub fn texts_to_lines(texts: &[String]) -> String {
    let mut out = String::new();
    for t in texts {
        out.push_str(t);
        out.push('\n');
    }
    out
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Where runs go and how chatty they are.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub runs_root: PathBuf,
    /// Print a loss line every this many steps (0 = silent).
    pub log_every: usize,
}

impl RunContext {
    pub fn new(runs_root: impl Into<PathBuf>) -> Self {
        RunContext {
            runs_root: runs_root.into(),
            log_every: 0,
        }
    }

    fn create_run_dir(&self, stage: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.runs_root).map_err(|e| Error::io(&self.runs_root, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
        let mut dir = self.runs_root.join(format!("{stamp}-{stage}"));
        let mut k = 1;
        while dir.exists() {
            dir = self.runs_root.join(format!("{stamp}-{stage}-{k}"));
            k += 1;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Result of one stage: merged weights plus the run's record.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub params: ParamSet<f32>,
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
}

impl StageOutput {
    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }
}

struct StageSpec<'a> {
    stage: &'a str,
    update_mode: UpdateMode,
    instruction_mode: Option<InstructionMode>,
    datasets: BTreeMap<String, String>,
    extra: Value,
}

fn check_lengths(data: &[TrainSequence], seq_len: usize, what: &str) -> Result<()> {
    if let Some((i, s)) = data.iter().enumerate().find(|(_, s)| s.tokens.len() > seq_len) {
        return Err(Error::InvalidArgument(format!(
            "{what} {i} has {} tokens, more than seq_len {seq_len}",
            s.tokens.len()
        )));
    }
    Ok(())
}

fn write_loss_csv(path: &Path, curve: &[(usize, f32)]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (s, l) in curve {
        let _ = writeln!(out, "{s},{l}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn finish_run(
    spec: StageSpec<'_>,
    trainer: Trainer,
    base_sha: String,
    hyper: &TrainHyper,
    n: usize,
    started_at: String,
    wall: f64,
    run_dir: PathBuf,
) -> Result<StageOutput> {
    let completed = trainer.is_done(n);
    let state_path = run_dir.join("state.bin");
    trainer.checkpoint()?.save(&state_path)?;
    let model = trainer.params.config.clone();
    let loss_curve = trainer.state.loss_curve.clone();
    let steps = trainer.state.step;
    let params = trainer.finish();
    let ckpt_path = run_dir.join("checkpoint.bin");
    Checkpoint::weights(params.clone()).save(&ckpt_path)?;
    write_loss_csv(&run_dir.join("loss.csv"), &loss_curve)?;
    let manifest = RunManifest {
        stage: spec.stage.to_string(),
        update_mode: spec.update_mode,
        instruction_mode: spec.instruction_mode,
        datasets: spec.datasets,
        base_params_sha256: base_sha,
        model,
        hyper: hyper.clone(),
        started_at,
        wall_time_secs: wall,
        steps,
        completed,
        loss_curve,
        checkpoint: ckpt_path,
        state: state_path,
        metrics: BTreeMap::new(),
        extra: spec.extra,
    };
    manifest.save(run_dir.join("manifest.json"))?;
    Ok(StageOutput {
        params,
        manifest,
        run_dir,
    })
}

fn drive(trainer: &mut Trainer, data: &[TrainSequence], pad: u32, hyper: &TrainHyper, ctx: &RunContext, stage: &str) -> Result<()> {
    let total = trainer.total_steps(data.len());
    let every = ctx.log_every;
    trainer.run(data, pad, hyper.max_steps, |step, loss| {
        if every > 0 && (step % every == 0 || step + 1 == total) {
            eprintln!("[{stage}] step {}/{total} loss {loss:.4}", step + 1);
        }
    })
}

fn run_stage(
    spec: StageSpec<'_>,
    params: &ParamSet<f32>,
    data: Vec<TrainSequence>,
    vocab: &Vocab,
    hyper: &TrainHyper,
    ctx: &RunContext,
) -> Result<StageOutput> {
    let problems = hyper.validate(&params.config);
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    if vocab.len() != params.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "tokenizer has {} ids but the model expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no training examples", spec.stage)));
    }
    check_lengths(&data, hyper.seq_len, "training example")?;
    let run_dir = ctx.create_run_dir(spec.stage)?;
    let _lock = DirLock::acquire(&run_dir)?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let base_sha = params_sha256(params);
    let lora = (spec.update_mode == UpdateMode::Lora).then_some(&hyper.lora);
    let mut trainer = Trainer::new(params.clone(), lora, hyper.trainer_config())?;
    drive(&mut trainer, &data, vocab.pad(), hyper, ctx, spec.stage)?;
    let n = data.len();
    finish_run(spec, trainer, base_sha, hyper, n, started_at, clock.elapsed().as_secs_f64(), run_dir)
}

/// `BOS, text, EOS` examples with loss on every token.
pub fn causal_sequences(texts: &[String], vocab: &Vocab) -> Vec<TrainSequence> {
    texts
        .iter()
        .map(|t| {
            let mut tokens = Vec::with_capacity(t.len() / 2 + 2);
            tokens.push(vocab.bos());
            tokens.extend(vocab.encode(t));
            tokens.push(vocab.eos());
            TrainSequence::causal(tokens)
        })
        .collect()
}

pub fn document_sequences(docs: &[Document], vocab: &Vocab) -> Vec<TrainSequence> {
    let texts: Vec<String> = docs.iter().map(|d| d.rendered_text.clone()).collect();
    causal_sequences(&texts, vocab)
}

pub fn sft_sequences(records: &[SftRecord], vocab: &Vocab, seq_len: usize) -> Result<Vec<TrainSequence>> {
    records
        .iter()
        .map(|r| {
            let ex = render_training_text(r, vocab, seq_len)?;
            Ok(TrainSequence {
                tokens: ex.tokens,
                loss_mask: ex.loss_mask,
                prompt_len: ex.prompt_len,
            })
        })
        .collect()
}

/// Mean per-token NLL of `texts` (as `BOS, text, EOS`); `exp` of it is the
/// perplexity.
pub fn text_nll(params: &ParamSet<f32>, texts: &[String], vocab: &Vocab) -> Result<f64> {
    mean_nll(params, &causal_sequences(texts, vocab), 32, vocab.pad())
}

/// Full-parameter causal LM training from `params`, used to build the
/// foundation model the recipe starts from.
pub fn pretrain_foundation(
    params: &ParamSet<f32>,
    texts: &[String],
    vocab: &Vocab,
    hyper: &TrainHyper,
    ctx: &RunContext,
) -> Result<StageOutput> {
    let spec = StageSpec {
        stage: "foundation",
        update_mode: UpdateMode::Full,
        instruction_mode: None,
        datasets: BTreeMap::from([("texts".to_string(), sha256_hex(texts_to_lines(texts).as_bytes()))]),
        extra: Value::Null,
    };
    run_stage(spec, params, causal_sequences(texts, vocab), vocab, hyper, ctx)
}

/// Stage 1: monolingual continual pre-training through a merged adapter.
pub fn run_stage1(
    params: &ParamSet<f32>,
    texts: &[String],
    vocab: &Vocab,
    hyper: &TrainHyper,
    ctx: &RunContext,
) -> Result<StageOutput> {
    if texts.is_empty() {
        return Err(Error::EmptyDataset("stage 1 needs monolingual text".into()));
    }
    let spec = StageSpec {
        stage: "stage1",
        update_mode: UpdateMode::Lora,
        instruction_mode: None,
        datasets: BTreeMap::from([("texts".to_string(), sha256_hex(texts_to_lines(texts).as_bytes()))]),
        extra: Value::Null,
    };
    zero_epoch_or(params, hyper, spec, ctx, |spec| {
        run_stage(spec, params, causal_sequences(texts, vocab), vocab, hyper, ctx)
    })
}

/// Stage 2: continual pre-training on interlinear documents, loss on all
/// tokens.
pub fn run_stage2(
    params: &ParamSet<f32>,
    docs: &[Document],
    vocab: &Vocab,
    hyper: &TrainHyper,
    ctx: &RunContext,
) -> Result<StageOutput> {
    if docs.is_empty() {
        return Err(Error::EmptyDataset("stage 2 needs interlinear documents".into()));
    }
    let jsonl = to_jsonl(docs)?;
    let spec = StageSpec {
        stage: "stage2",
        update_mode: UpdateMode::Lora,
        instruction_mode: None,
        datasets: BTreeMap::from([("interlinear".to_string(), sha256_hex(jsonl.as_bytes()))]),
        extra: serde_json::json!({
            "documents": docs.len(),
            "blocks": docs.iter().map(Document::block_count).sum::<usize>(),
        }),
    };
    zero_epoch_or(params, hyper, spec, ctx, |spec| {
        run_stage(spec, params, document_sequences(docs, vocab), vocab, hyper, ctx)
    })
}

/// Stage 3: instruction tuning with the loss on responses only.
pub fn run_stage3(
    params: &ParamSet<f32>,
    records: &[SftRecord],
    vocab: &Vocab,
    hyper: &TrainHyper,
    mode: InstructionMode,
    ctx: &RunContext,
) -> Result<StageOutput> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("stage 3 needs SFT records".into()));
    }
    let jsonl = sft_to_jsonl(records)?;
    let spec = StageSpec {
        stage: "stage3",
        update_mode: UpdateMode::Lora,
        instruction_mode: Some(mode),
        datasets: BTreeMap::from([("sft".to_string(), sha256_hex(jsonl.as_bytes()))]),
        extra: serde_json::json!({ "records": records.len() }),
    };
    zero_epoch_or(params, hyper, spec, ctx, |spec| {
        run_stage(spec, params, sft_sequences(records, vocab, hyper.seq_len)?, vocab, hyper, ctx)
    })
}

/// In test mode with zero epochs, records a run that returns the input
/// weights untouched.
fn zero_epoch_or<'a>(
    params: &ParamSet<f32>,
    hyper: &TrainHyper,
    spec: StageSpec<'a>,
    ctx: &RunContext,
    run: impl FnOnce(StageSpec<'a>) -> Result<StageOutput>,
) -> Result<StageOutput> {
    if !(hyper.test_mode && hyper.epochs == 0) {
        return run(spec);
    }
    let run_dir = ctx.create_run_dir(spec.stage)?;
    let _lock = DirLock::acquire(&run_dir)?;
    let trainer = Trainer::new(params.clone(), Some(&hyper.lora), hyper.trainer_config())?;
    let started_at = chrono::Utc::now().to_rfc3339();
    finish_run(spec, trainer, params_sha256(params), hyper, 0, started_at, 0.0, run_dir)
}

/// Continues an interrupted run from its `state.bin`, writing a fresh run
/// directory. `data` must be the same examples the run started with.
pub fn resume_run(
    manifest: &RunManifest,
    data: &[TrainSequence],
    vocab: &Vocab,
    max_steps: Option<usize>,
    ctx: &RunContext,
) -> Result<StageOutput> {
    let mut trainer = Trainer::resume(Checkpoint::load(&manifest.state)?)?;
    let mut hyper = manifest.hyper.clone();
    hyper.max_steps = max_steps;
    let run_dir = ctx.create_run_dir(&manifest.stage)?;
    let _lock = DirLock::acquire(&run_dir)?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    drive(&mut trainer, data, vocab.pad(), &hyper, ctx, &manifest.stage)?;
    let spec = StageSpec {
        stage: &manifest.stage,
        update_mode: manifest.update_mode,
        instruction_mode: manifest.instruction_mode,
        datasets: manifest.datasets.clone(),
        extra: serde_json::json!({ "resumed_from": manifest.state }),
    };
    finish_run(
        spec,
        trainer,
        manifest.base_params_sha256.clone(),
        &hyper,
        data.len(),
        started_at,
        clock.elapsed().as_secs_f64(),
        run_dir,
    )
}

/// What the direct-SFT ablation evaluates each trained model on.
#[derive(Debug, Clone)]
pub struct AblationEval<'a> {
    pub test: &'a [SentencePair],
    pub dev: &'a [SentencePair],
    pub directions: &'a [Direction],
    pub config: EvalConfig,
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Total SFT records trained on.
    pub size: usize,
    /// Records added from the stage-2 pool.
    pub added: usize,
    /// Direction key to BLEU.
    pub bleu: BTreeMap<String, f64>,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub start_params_sha256: String,
    pub directions: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:>8} {:>8}", "size", "added");
        for d in &self.directions {
            let _ = write!(out, " {d:>8}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:>8} {:>8}", r.size, r.added);
            for d in &self.directions {
                let _ = write!(out, " {:>8.2}", r.bleu.get(d).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}

/// Direct-SFT ablation: for each total size, the stage-3 set is topped up
/// with a seeded sample of stage-2 pairs rendered as instructions, trained
/// stage-3 style from the same `start` weights, and evaluated.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_direct_sft(
    start: &ParamSet<f32>,
    sft: &[SftRecord],
    stage2_pairs: &[SentencePair],
    sizes: &[usize],
    vocab: &Vocab,
    hyper: &TrainHyper,
    mode: InstructionMode,
    templates: &TemplateTable,
    eval: &AblationEval<'_>,
    ctx: &RunContext,
) -> Result<AblationReport> {
    if sft.is_empty() {
        return Err(Error::EmptyDataset("ablation needs the stage-3 SFT set".into()));
    }
    let mut problems = Vec::new();
    for &size in sizes {
        if size < sft.len() {
            problems.push(format!("size {size} is smaller than the SFT set ({})", sft.len()));
        } else if size - sft.len() > stage2_pairs.len() {
            problems.push(format!(
                "size {size} needs {} extra pairs but the pool has {}",
                size - sft.len(),
                stage2_pairs.len()
            ));
        }
    }
    if sizes.is_empty() {
        problems.push("no sizes given".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let start_sha = params_sha256(start);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let added = size - sft.len();
        let extra = sample_seeded(stage2_pairs, added, hyper.seed)?;
        let mut records = sft.to_vec();
        records.extend(build_sft_dataset_with(&extra, mode, templates)?);
        let out = run_stage3(start, &records, vocab, hyper, mode, ctx)?;
        let mut translator = LmTranslator::new(&out.params, vocab, eval.max_new);
        let report = evaluate(&mut translator, eval.test, eval.dev, eval.directions, templates, &eval.config)?;
        let bleu = report.directions.iter().map(|d| (d.direction.clone(), d.bleu.score)).collect();
        rows.push(AblationRow {
            size,
            added,
            bleu,
            run_dir: out.run_dir,
        });
    }
    Ok(AblationReport {
        start_params_sha256: start_sha,
        directions: eval.directions.iter().map(|d| d.key()).collect(),
        rows,
    })
}
