//! One config struct and one `run` function per subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mtrecipe::corpus::{self, CleanConfig, InputFormat, SentencePair, WordCounter};
use mtrecipe::demo::{run_demo, DemoConfig};
use mtrecipe::eval::{evaluate, EmptyStub, EvalConfig, EvalMode, LmTranslator, OracleStub, Smoothing, Translator};
use mtrecipe::instruction::{build_sft_dataset_with, read_sft_jsonl, sft_to_jsonl, InstructionMode, TemplateTable};
use mtrecipe::interlinear::{load_documents, materialize_both_directions, pack_documents, to_jsonl};
use mtrecipe::model::{Checkpoint, ModelConfig, ParamSet};
use mtrecipe::pipeline::{
    causal_sequences, document_sequences, pretrain_foundation, resume_run, run_ablation_direct_sft, run_stage1,
    run_stage2, run_stage3, sft_sequences, sha256_hex, AblationEval, DirLock, RunContext, RunManifest, StageOutput,
    TrainHyper,
};
use mtrecipe::tokenizer::Vocab;
use mtrecipe::{Direction, LangCode};

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn check(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::new("invalid_config", problems.join("; ")))
    }
}

fn need_path(p: &Path, key: &str, problems: &mut Vec<String>) {
    if p.as_os_str().is_empty() {
        problems.push(format!("`{key}` is required"));
    } else if !p.exists() {
        problems.push(format!("`{key}` points to missing path {}", p.display()));
    }
}

fn need_opt_path(p: &Option<PathBuf>, key: &str, problems: &mut Vec<String>) {
    match p {
        Some(p) => need_path(p, key, problems),
        None => problems.push(format!("`{key}` is required")),
    }
}

fn need_out(out: &Path, problems: &mut Vec<String>) {
    if out.as_os_str().is_empty() {
        problems.push("`out` is required".to_string());
    }
}

fn need_pair(src: Option<LangCode>, tgt: Option<LangCode>, problems: &mut Vec<String>) -> Option<Direction> {
    match (src, tgt) {
        (Some(s), Some(t)) => match Direction::new(s, t) {
            Ok(d) => Some(d),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        },
        _ => {
            if src.is_none() {
                problems.push("`src` is required".to_string());
            }
            if tgt.is_none() {
                problems.push("`tgt` is required".to_string());
            }
            None
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| mtrecipe::Error::io(path, e).into())
}

fn create_out(out: &Path) -> Result<DirLock> {
    fs::create_dir_all(out).map_err(|e| mtrecipe::Error::io(out, e))?;
    Ok(DirLock::acquire(out)?)
}

/// `manifest.json` for non-training commands: the resolved config, output
/// file hashes, and counts. No timestamps, so reruns are byte-identical.
fn write_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    config: &C,
    outputs: &BTreeMap<String, String>,
    stats: Value,
) -> Result<()> {
    let m = json!({
        "command": command,
        "config": config,
        "outputs": outputs,
        "stats": stats,
    });
    write(&out.join("manifest.json"), (serde_json::to_string_pretty(&m).expect("json") + "\n").as_bytes())
}

fn read_pairs(path: &Path, src: LangCode, tgt: LangCode) -> Result<Vec<SentencePair>> {
    let format = if path.extension().is_some_and(|e| e == "jsonl") {
        InputFormat::Jsonl
    } else {
        InputFormat::Tsv
    };
    let rep = corpus::ingest(path, format, src, tgt)?;
    if let Some(r) = rep.rejects.first() {
        return Err(CliError::new(
            "parse",
            format!("{}:{}: {} ({} bad rows)", path.display(), r.line, r.reason, rep.rejects.len()),
        ));
    }
    Ok(rep.pairs)
}

/// Monolingual texts: blank-line separated paragraphs.
fn read_texts(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| mtrecipe::Error::io(path, e))?;
    Ok(raw
        .split("\n\n")
        .map(|t| t.trim_matches('\n'))
        .filter(|t| !t.trim().is_empty())
        .map(|t| format!("{t}\n"))
        .collect())
}

fn load_templates(path: &Option<PathBuf>) -> Result<TemplateTable> {
    Ok(match path {
        Some(p) => TemplateTable::load(p)?,
        None => TemplateTable::default(),
    })
}

fn parse_directions(keys: &[String], default: Option<Direction>, problems: &mut Vec<String>) -> Vec<Direction> {
    if keys.is_empty() {
        return default.map(|d| vec![d, d.reversed()]).unwrap_or_default();
    }
    keys.iter()
        .filter_map(|k| match k.parse::<Direction>() {
            Ok(d) => Some(d),
            Err(e) => {
                problems.push(format!("directions: {e}"));
                None
            }
        })
        .collect()
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildCorpus {
    pub input: PathBuf,
    pub format: InputFormat,
    pub src: Option<LangCode>,
    pub tgt: Option<LangCode>,
    pub clean: CleanConfig,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for BuildCorpus {
    fn default() -> Self {
        BuildCorpus {
            input: PathBuf::new(),
            format: InputFormat::Tsv,
            src: None,
            tgt: None,
            clean: CleanConfig::default(),
            dev_fraction: 0.01,
            test_fraction: 0.01,
            seed: 0,
            out: PathBuf::new(),
        }
    }
}

pub fn build_corpus(cfg: &BuildCorpus) -> Result<String> {
    let mut problems = Vec::new();
    need_path(&cfg.input, "input", &mut problems);
    need_out(&cfg.out, &mut problems);
    let dir = need_pair(cfg.src, cfg.tgt, &mut problems);
    if !(cfg.clean.max_len_ratio > 1.0) {
        problems.push("clean.max_len_ratio must be > 1".to_string());
    }
    let frac_ok = |f: f64| (0.0..1.0).contains(&f);
    if !frac_ok(cfg.dev_fraction) || !frac_ok(cfg.test_fraction) || cfg.dev_fraction + cfg.test_fraction >= 1.0 {
        problems.push("dev_fraction and test_fraction must be >= 0 with sum < 1".to_string());
    }
    check(problems)?;
    let dir = dir.expect("checked");
    let _lock = create_out(&cfg.out)?;
    let rep = corpus::ingest(&cfg.input, cfg.format, dir.src, dir.tgt)?;
    let cleaned = corpus::clean(&rep.pairs, &cfg.clean, &WordCounter)?;
    let split = corpus::split(&cleaned, cfg.dev_fraction, cfg.test_fraction, cfg.seed)?;
    let mut outputs = BTreeMap::new();
    for (name, pairs) in [("train.tsv", &split.train), ("dev.tsv", &split.dev), ("test.tsv", &split.test)] {
        let path = cfg.out.join(name);
        corpus::write_tsv(&path, pairs)?;
        let bytes = fs::read(&path).map_err(|e| mtrecipe::Error::io(&path, e))?;
        outputs.insert(name.to_string(), sha256_hex(&bytes));
    }
    corpus::write_rejects(cfg.out.join("rejects.jsonl"), &rep.rejects)?;
    let stats = json!({
        "ingested": rep.pairs.len(),
        "rejected": rep.rejects.len(),
        "removed_by_clean": rep.pairs.len() - cleaned.len(),
        "train": split.train.len(),
        "dev": split.dev.len(),
        "test": split.test.len(),
    });
    write_manifest(&cfg.out, "build-corpus", cfg, &outputs, stats.clone())?;
    Ok(format!(
        "{} pairs kept of {} ({} rejected): train {} / dev {} / test {}",
        cleaned.len(),
        rep.pairs.len() + rep.rejects.len(),
        rep.rejects.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len()
    ))
}

// ------------------------------------------------------------- tokenizer

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainTokenizer {
    /// Parallel TSV files; both columns are used.
    pub corpora: Vec<PathBuf>,
    /// Plain-text files of blank-line separated paragraphs.
    pub texts: Vec<PathBuf>,
    /// Strings always included, e.g. line labels or instruction templates.
    pub extra: Vec<String>,
    pub vocab_size: usize,
    pub out: PathBuf,
}

impl Default for TrainTokenizer {
    fn default() -> Self {
        TrainTokenizer {
            corpora: Vec::new(),
            texts: Vec::new(),
            extra: Vec::new(),
            vocab_size: 4000,
            out: PathBuf::new(),
        }
    }
}

pub fn train_tokenizer(cfg: &TrainTokenizer) -> Result<String> {
    let mut problems = Vec::new();
    for (i, p) in cfg.corpora.iter().enumerate() {
        need_path(p, &format!("corpora[{i}]"), &mut problems);
    }
    for (i, p) in cfg.texts.iter().enumerate() {
        need_path(p, &format!("texts[{i}]"), &mut problems);
    }
    if cfg.corpora.is_empty() && cfg.texts.is_empty() && cfg.extra.is_empty() {
        problems.push("no training text: set `corpora`, `texts` or `extra`".to_string());
    }
    if cfg.vocab_size < Vocab::MIN_SIZE {
        problems.push(format!("vocab_size must be at least {}", Vocab::MIN_SIZE));
    }
    need_out(&cfg.out, &mut problems);
    check(problems)?;
    let _lock = create_out(&cfg.out)?;
    let mut texts = Vec::new();
    for p in &cfg.corpora {
        let raw = fs::read_to_string(p).map_err(|e| mtrecipe::Error::io(p, e))?;
        for line in raw.lines() {
            texts.extend(line.split('\t').take(2).map(str::to_string));
        }
    }
    for p in &cfg.texts {
        texts.extend(read_texts(p)?);
    }
    texts.extend(cfg.extra.iter().cloned());
    let vocab = Vocab::train(&texts, cfg.vocab_size)?;
    let json = vocab.to_json()?;
    write(&cfg.out.join("vocab.json"), json.as_bytes())?;
    let outputs = BTreeMap::from([("vocab.json".to_string(), sha256_hex(json.as_bytes()))]);
    write_manifest(&cfg.out, "train-tokenizer", cfg, &outputs, json!({ "texts": texts.len(), "ids": vocab.len() }))?;
    Ok(format!("vocab with {} ids written to {}", vocab.len(), cfg.out.join("vocab.json").display()))
}

// ----------------------------------------------------------- interlinear

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildInterlinear {
    pub corpus: PathBuf,
    pub src: Option<LangCode>,
    pub tgt: Option<LangCode>,
    pub vocab: PathBuf,
    /// Token budget per document, excluding BOS and EOS.
    pub max_tokens: usize,
    pub seed: u64,
    /// Add every pair reversed as well.
    pub both_directions: bool,
    pub out: PathBuf,
}

impl Default for BuildInterlinear {
    fn default() -> Self {
        BuildInterlinear {
            corpus: PathBuf::new(),
            src: None,
            tgt: None,
            vocab: PathBuf::new(),
            max_tokens: 254,
            seed: 0,
            both_directions: true,
            out: PathBuf::new(),
        }
    }
}

pub fn build_interlinear(cfg: &BuildInterlinear) -> Result<String> {
    let mut problems = Vec::new();
    need_path(&cfg.corpus, "corpus", &mut problems);
    need_path(&cfg.vocab, "vocab", &mut problems);
    need_out(&cfg.out, &mut problems);
    let dir = need_pair(cfg.src, cfg.tgt, &mut problems);
    if cfg.max_tokens == 0 {
        problems.push("max_tokens must be positive".to_string());
    }
    check(problems)?;
    let dir = dir.expect("checked");
    let _lock = create_out(&cfg.out)?;
    let vocab = Vocab::load(&cfg.vocab)?;
    let mut pairs = read_pairs(&cfg.corpus, dir.src, dir.tgt)?;
    if cfg.both_directions {
        pairs = materialize_both_directions(&pairs);
    }
    let packed = pack_documents(&pairs, cfg.max_tokens, &vocab, cfg.seed);
    let jsonl = to_jsonl(&packed.documents)?;
    write(&cfg.out.join("interlinear.jsonl"), jsonl.as_bytes())?;
    let blocks: usize = packed.documents.iter().map(|d| d.block_count()).sum();
    let outputs = BTreeMap::from([("interlinear.jsonl".to_string(), sha256_hex(jsonl.as_bytes()))]);
    let stats = json!({
        "documents": packed.documents.len(),
        "blocks": blocks,
        "dropped": packed.dropped,
    });
    write_manifest(&cfg.out, "build-interlinear", cfg, &outputs, stats)?;
    Ok(format!(
        "{} documents holding {blocks} blocks ({} pairs dropped as too long)",
        packed.documents.len(),
        packed.dropped.len()
    ))
}

// ------------------------------------------------------------------- sft

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildSft {
    pub corpus: PathBuf,
    pub src: Option<LangCode>,
    pub tgt: Option<LangCode>,
    pub mode: InstructionMode,
    /// JSON overrides layered on the built-in instruction table.
    pub templates: Option<PathBuf>,
    /// Keep a seeded sample of this many pairs before direction expansion.
    pub sample: Option<usize>,
    pub seed: u64,
    pub both_directions: bool,
    pub out: PathBuf,
}

impl Default for BuildSft {
    fn default() -> Self {
        BuildSft {
            corpus: PathBuf::new(),
            src: None,
            tgt: None,
            mode: InstructionMode::SourceConsistent,
            templates: None,
            sample: None,
            seed: 0,
            both_directions: true,
            out: PathBuf::new(),
        }
    }
}

pub fn build_sft(cfg: &BuildSft) -> Result<String> {
    let mut problems = Vec::new();
    need_path(&cfg.corpus, "corpus", &mut problems);
    if let Some(t) = &cfg.templates {
        need_path(t, "templates", &mut problems);
    }
    need_out(&cfg.out, &mut problems);
    let dir = need_pair(cfg.src, cfg.tgt, &mut problems);
    check(problems)?;
    let dir = dir.expect("checked");
    let table = load_templates(&cfg.templates)?;
    let _lock = create_out(&cfg.out)?;
    let mut pairs = read_pairs(&cfg.corpus, dir.src, dir.tgt)?;
    if let Some(k) = cfg.sample {
        pairs = corpus::sample_seeded(&pairs, k, cfg.seed)?;
    }
    if cfg.both_directions {
        pairs = materialize_both_directions(&pairs);
    }
    let records = build_sft_dataset_with(&pairs, cfg.mode, &table)?;
    let jsonl = sft_to_jsonl(&records)?;
    write(&cfg.out.join("sft.jsonl"), jsonl.as_bytes())?;
    let outputs = BTreeMap::from([("sft.jsonl".to_string(), sha256_hex(jsonl.as_bytes()))]);
    write_manifest(&cfg.out, "build-sft", cfg, &outputs, json!({ "records": records.len() }))?;
    Ok(format!("{} {} records written", records.len(), cfg.mode))
}

// ----------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Train {
    /// 0 trains a foundation model with full parameters; 1-3 are the
    /// recipe's LoRA stages.
    pub stage: u8,
    pub vocab: PathBuf,
    /// Texts (stages 0, 1), interlinear JSONL (2), or SFT JSONL (3).
    pub data: PathBuf,
    /// Starting weights. Stage 0 may omit it to start from `model`.
    pub init: Option<PathBuf>,
    /// Architecture for a fresh stage-0 model; `vocab_size` is taken from
    /// the tokenizer.
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub instruction_mode: InstructionMode,
    /// Manifest of an interrupted run to continue.
    pub resume: Option<PathBuf>,
    pub log_every: usize,
    /// Root directory for run directories.
    pub out: PathBuf,
}

impl Train {
    pub fn for_stage(stage: u8) -> Self {
        let hyper = match stage {
            2 => TrainHyper::stage2(),
            3 => TrainHyper::stage3(),
            _ => TrainHyper::stage1(),
        };
        Train {
            stage,
            vocab: PathBuf::new(),
            data: PathBuf::new(),
            init: None,
            model: ModelConfig::tiny(0, 256),
            hyper,
            instruction_mode: InstructionMode::SourceConsistent,
            resume: None,
            log_every: 50,
            out: PathBuf::from("runs"),
        }
    }
}

impl Default for Train {
    fn default() -> Self {
        Train::for_stage(1)
    }
}

pub fn train(cfg: &Train) -> Result<String> {
    let mut problems = Vec::new();
    if cfg.stage > 3 {
        problems.push(format!("stage must be 0, 1, 2 or 3, got {}", cfg.stage));
    }
    need_path(&cfg.vocab, "vocab", &mut problems);
    need_path(&cfg.data, "data", &mut problems);
    need_out(&cfg.out, &mut problems);
    if let Some(r) = &cfg.resume {
        need_path(r, "resume", &mut problems);
    } else if cfg.stage != 0 {
        need_opt_path(&cfg.init, "init", &mut problems);
    } else if let Some(p) = &cfg.init {
        need_path(p, "init", &mut problems);
    }
    let model_for_check = match &cfg.init {
        Some(p) if p.exists() => Checkpoint::load(p).map(|c| c.params.config).ok(),
        _ => None,
    }
    .unwrap_or_else(|| cfg.model.clone());
    if cfg.resume.is_none() {
        problems.extend(cfg.hyper.validate(&model_for_check).into_iter().map(|p| format!("hyper: {p}")));
    }
    check(problems)?;

    let vocab = Vocab::load(&cfg.vocab)?;
    let ctx = RunContext {
        runs_root: cfg.out.clone(),
        log_every: cfg.log_every,
    };
    let out = if let Some(r) = &cfg.resume {
        let manifest = RunManifest::load(r)?;
        let data = match manifest.stage.as_str() {
            "foundation" | "stage1" => causal_sequences(&read_texts(&cfg.data)?, &vocab),
            "stage2" => document_sequences(&load_documents(&cfg.data, &vocab)?, &vocab),
            "stage3" => sft_sequences(&read_sft_jsonl(&cfg.data)?, &vocab, manifest.hyper.seq_len)?,
            other => return Err(CliError::new("invalid_config", format!("cannot resume stage `{other}`"))),
        };
        resume_run(&manifest, &data, &vocab, cfg.hyper.max_steps, &ctx)?
    } else {
        let params = match &cfg.init {
            Some(p) => Checkpoint::load(p)?.params,
            None => {
                let mut m = cfg.model.clone();
                m.vocab_size = vocab.len();
                ParamSet::init(&m)?
            }
        };
        run_train_stage(cfg, &params, &vocab, &ctx)?
    };
    Ok(summarize(&out))
}

fn run_train_stage(cfg: &Train, params: &ParamSet<f32>, vocab: &Vocab, ctx: &RunContext) -> Result<StageOutput> {
    let h = &cfg.hyper;
    Ok(match cfg.stage {
        0 => pretrain_foundation(params, &read_texts(&cfg.data)?, vocab, h, ctx)?,
        1 => run_stage1(params, &read_texts(&cfg.data)?, vocab, h, ctx)?,
        2 => run_stage2(params, &load_documents(&cfg.data, vocab)?, vocab, h, ctx)?,
        _ => run_stage3(params, &read_sft_jsonl(&cfg.data)?, vocab, h, cfg.instruction_mode, ctx)?,
    })
}

fn summarize(out: &StageOutput) -> String {
    let m = &out.manifest;
    format!(
        "{} finished {} steps (loss {:.4} -> {:.4}, complete: {}); run directory {}",
        m.stage,
        m.steps,
        m.first_loss().unwrap_or(f32::NAN),
        m.last_loss().unwrap_or(f32::NAN),
        m.completed,
        out.run_dir.display()
    )
}

// -------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stub {
    Oracle,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Nshot,
    Instruction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Evaluate {
    pub checkpoint: Option<PathBuf>,
    /// Harness check without a model.
    pub stub: Option<Stub>,
    pub vocab: Option<PathBuf>,
    /// Test pairs, oriented `src` → `tgt`.
    pub test: PathBuf,
    /// Exemplar pool for n-shot prompts.
    pub dev: Option<PathBuf>,
    pub src: Option<LangCode>,
    pub tgt: Option<LangCode>,
    /// `src-tgt` keys; both directions of the pair when empty.
    pub directions: Vec<String>,
    pub mode: ModeName,
    pub n: usize,
    pub instruction_mode: InstructionMode,
    pub templates: Option<PathBuf>,
    pub seed: u64,
    pub smoothing: Smoothing,
    pub max_segments: Option<usize>,
    pub max_new: usize,
    pub samples: usize,
    pub out: PathBuf,
}

impl Default for Evaluate {
    fn default() -> Self {
        Evaluate {
            checkpoint: None,
            stub: None,
            vocab: None,
            test: PathBuf::new(),
            dev: None,
            src: None,
            tgt: None,
            directions: Vec::new(),
            mode: ModeName::Nshot,
            n: 5,
            instruction_mode: InstructionMode::SourceConsistent,
            templates: None,
            seed: 0,
            smoothing: Smoothing::None,
            max_segments: None,
            max_new: 64,
            samples: 5,
            out: PathBuf::new(),
        }
    }
}

impl Evaluate {
    fn eval_mode(&self) -> EvalMode {
        match self.mode {
            ModeName::Nshot => EvalMode::NShot { n: self.n },
            ModeName::Instruction => EvalMode::Instruction {
                mode: self.instruction_mode,
            },
        }
    }
}

pub fn evaluate_cmd(cfg: &Evaluate) -> Result<String> {
    let mut problems = Vec::new();
    need_path(&cfg.test, "test", &mut problems);
    need_out(&cfg.out, &mut problems);
    let pair = need_pair(cfg.src, cfg.tgt, &mut problems);
    match (&cfg.checkpoint, cfg.stub) {
        (Some(_), Some(_)) => problems.push("set either `checkpoint` or `stub`, not both".to_string()),
        (None, None) => problems.push("`checkpoint` (or `stub`) is required".to_string()),
        (Some(c), None) => {
            need_path(c, "checkpoint", &mut problems);
            need_opt_path(&cfg.vocab, "vocab", &mut problems);
        }
        (None, Some(_)) => {}
    }
    if cfg.mode == ModeName::Nshot && cfg.n > 0 {
        need_opt_path(&cfg.dev, "dev", &mut problems);
    }
    if let Some(t) = &cfg.templates {
        need_path(t, "templates", &mut problems);
    }
    let directions = parse_directions(&cfg.directions, pair, &mut problems);
    check(problems)?;
    let pair = pair.expect("checked");
    let templates = load_templates(&cfg.templates)?;
    let test = read_pairs(&cfg.test, pair.src, pair.tgt)?;
    let dev = match &cfg.dev {
        Some(p) => read_pairs(p, pair.src, pair.tgt)?,
        None => Vec::new(),
    };
    let ecfg = EvalConfig {
        mode: cfg.eval_mode(),
        seed: cfg.seed,
        smoothing: cfg.smoothing,
        samples: cfg.samples,
        max_segments: cfg.max_segments,
    };
    let _lock = create_out(&cfg.out)?;
    let loaded;
    let vocab;
    let mut lm;
    let translator: &mut dyn Translator = match cfg.stub {
        Some(Stub::Oracle) => &mut OracleStub,
        Some(Stub::Empty) => &mut EmptyStub,
        None => {
            loaded = Checkpoint::load(cfg.checkpoint.as_ref().expect("checked"))?.params;
            vocab = Vocab::load(cfg.vocab.as_ref().expect("checked"))?;
            lm = LmTranslator::new(&loaded, &vocab, cfg.max_new);
            &mut lm
        }
    };
    let report = evaluate(translator, &test, &dev, &directions, &templates, &ecfg)?;
    let json = serde_json::to_string_pretty(&report).expect("json") + "\n";
    write(&cfg.out.join("report.json"), json.as_bytes())?;
    let outputs = BTreeMap::from([("report.json".to_string(), sha256_hex(json.as_bytes()))]);
    let scores: BTreeMap<String, f64> = report.directions.iter().map(|d| (d.direction.clone(), d.bleu.score)).collect();
    write_manifest(&cfg.out, "evaluate", cfg, &outputs, json!({ "bleu": scores }))?;
    Ok(report.table())
}

// -------------------------------------------------------------- ablation

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablate {
    pub init: PathBuf,
    pub vocab: PathBuf,
    /// The stage-3 SFT set every size starts from.
    pub sft: PathBuf,
    /// Parallel pairs the extra SFT records are drawn from.
    pub pool: PathBuf,
    pub src: Option<LangCode>,
    pub tgt: Option<LangCode>,
    pub both_directions: bool,
    /// Total SFT sizes: plain counts (`"1200"`) or multiples of the SFT set
    /// (`"4x"`).
    pub sizes: Vec<String>,
    pub hyper: TrainHyper,
    pub instruction_mode: InstructionMode,
    pub templates: Option<PathBuf>,
    pub test: PathBuf,
    pub dev: Option<PathBuf>,
    pub directions: Vec<String>,
    pub seed: u64,
    pub smoothing: Smoothing,
    pub max_segments: Option<usize>,
    pub max_new: usize,
    pub log_every: usize,
    pub out: PathBuf,
}

impl Default for Ablate {
    fn default() -> Self {
        Ablate {
            init: PathBuf::new(),
            vocab: PathBuf::new(),
            sft: PathBuf::new(),
            pool: PathBuf::new(),
            src: None,
            tgt: None,
            both_directions: true,
            sizes: vec!["1x".into(), "4x".into(), "16x".into()],
            hyper: TrainHyper::stage3(),
            instruction_mode: InstructionMode::SourceConsistent,
            templates: None,
            test: PathBuf::new(),
            dev: None,
            directions: Vec::new(),
            seed: 0,
            smoothing: Smoothing::None,
            max_segments: None,
            max_new: 64,
            log_every: 0,
            out: PathBuf::new(),
        }
    }
}

/// Resolves `"4x"` / `"1200"` size specs against the SFT set size.
pub fn resolve_sizes(specs: &[String], sft_len: usize, problems: &mut Vec<String>) -> Vec<usize> {
    specs
        .iter()
        .filter_map(|s| {
            let parsed = match s.strip_suffix(['x', 'X']) {
                Some(m) => m.trim().parse::<usize>().map(|m| m * sft_len),
                None => s.trim().parse::<usize>(),
            };
            parsed.map_err(|_| problems.push(format!("size `{s}` is neither a count nor a multiple like `4x`"))).ok()
        })
        .collect()
}

pub fn ablate(cfg: &Ablate) -> Result<String> {
    let mut problems = Vec::new();
    need_path(&cfg.init, "init", &mut problems);
    need_path(&cfg.vocab, "vocab", &mut problems);
    need_path(&cfg.sft, "sft", &mut problems);
    need_path(&cfg.pool, "pool", &mut problems);
    need_path(&cfg.test, "test", &mut problems);
    need_opt_path(&cfg.dev, "dev", &mut problems);
    need_out(&cfg.out, &mut problems);
    if let Some(t) = &cfg.templates {
        need_path(t, "templates", &mut problems);
    }
    let pair = need_pair(cfg.src, cfg.tgt, &mut problems);
    let directions = parse_directions(&cfg.directions, pair, &mut problems);
    if cfg.sizes.is_empty() {
        problems.push("`sizes` must not be empty".to_string());
    }
    check(problems)?;
    let pair = pair.expect("checked");
    let start = Checkpoint::load(&cfg.init)?.params;
    let mut problems = cfg.hyper.validate(&start.config).into_iter().map(|p| format!("hyper: {p}")).collect::<Vec<_>>();
    let records = read_sft_jsonl(&cfg.sft)?;
    let sizes = resolve_sizes(&cfg.sizes, records.len(), &mut problems);
    check(problems)?;
    let vocab = Vocab::load(&cfg.vocab)?;
    let templates = load_templates(&cfg.templates)?;
    let mut pool = read_pairs(&cfg.pool, pair.src, pair.tgt)?;
    if cfg.both_directions {
        pool = materialize_both_directions(&pool);
    }
    let test = read_pairs(&cfg.test, pair.src, pair.tgt)?;
    let dev = read_pairs(cfg.dev.as_ref().expect("checked"), pair.src, pair.tgt)?;
    let _lock = create_out(&cfg.out)?;
    let eval = AblationEval {
        test: &test,
        dev: &dev,
        directions: &directions,
        config: EvalConfig {
            mode: EvalMode::Instruction {
                mode: cfg.instruction_mode,
            },
            seed: cfg.seed,
            smoothing: cfg.smoothing,
            samples: 0,
            max_segments: cfg.max_segments,
        },
        max_new: cfg.max_new,
    };
    let ctx = RunContext {
        runs_root: cfg.out.join("runs"),
        log_every: cfg.log_every,
    };
    let report = run_ablation_direct_sft(
        &start,
        &records,
        &pool,
        &sizes,
        &vocab,
        &cfg.hyper,
        cfg.instruction_mode,
        &templates,
        &eval,
        &ctx,
    )?;
    let json = serde_json::to_string_pretty(&report).expect("json") + "\n";
    write(&cfg.out.join("ablation_report.json"), json.as_bytes())?;
    let outputs = BTreeMap::from([("ablation_report.json".to_string(), sha256_hex(json.as_bytes()))]);
    write_manifest(&cfg.out, "ablate-direct-sft", cfg, &outputs, json!({ "sizes": sizes }))?;
    Ok(report.table())
}

// ------------------------------------------------------------------ demo

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Demo {
    #[serde(flatten)]
    pub config: DemoConfig,
    pub out: PathBuf,
}

impl Demo {
    pub fn new(quick: bool) -> Self {
        Demo {
            config: if quick { DemoConfig::quick() } else { DemoConfig::default() },
            out: PathBuf::from("demo-out"),
        }
    }
}

impl Default for Demo {
    fn default() -> Self {
        Demo::new(false)
    }
}

pub fn demo(cfg: &Demo, log: bool) -> Result<String> {
    let mut problems = cfg.config.validate();
    need_out(&cfg.out, &mut problems);
    check(problems)?;
    fs::create_dir_all(&cfg.out).map_err(|e| mtrecipe::Error::io(&cfg.out, e))?;
    let m = run_demo(&cfg.config, &cfg.out, log)?;
    let en_xx = "en-xx";
    let mut out = m.table();
    let get = |s: &str| m.score(s, en_xx).unwrap_or(f64::NAN);
    out.push_str(&format!(
        "en-xx Stage3-only {:.2} vs Stage2,3 {:.2} ({:+.2})\n",
        get("stage3_only"),
        get("stage2_3"),
        get("stage2_3") - get("stage3_only")
    ));
    out.push_str(&format!(
        "en-xx 5-shot base {:.2} vs after stage 2 {:.2}\n",
        get("base_5shot"),
        get("stage2_5shot")
    ));
    out.push_str(&format!("wall time {:.1}s; manifest {}\n", m.wall_time_secs, cfg.out.join("demo_manifest.json").display()));
    Ok(out)
}
