//! End-to-end run of the recipe on the synthetic English ↔ Cipher task.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::write_tsv;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalMode, EvalReport, LmTranslator, Smoothing};
use crate::instruction::{build_sft_dataset_with, sft_to_jsonl, InstructionMode, TemplateTable};
use crate::interlinear::{materialize_both_directions, pack_documents, to_jsonl};
use crate::lang::{Direction, LangCode};
use crate::lora::{LoraConfig, LoraTarget};
use crate::model::{ModelConfig, ParamSet};
use crate::pipeline::{
    pretrain_foundation, run_stage1, run_stage2, run_stage3, sha256_hex, text_nll, DirLock, RunContext,
    TrainHyper,
};
use crate::synthetic::{CipherLanguage, SyntheticConfig};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoEval {
    pub n_shot: usize,
    pub max_new: usize,
    pub smoothing: Smoothing,
    pub seed: u64,
    /// Test segments per direction; `None` uses the whole test set.
    pub max_segments: Option<usize>,
}

impl Default for DemoEval {
    fn default() -> Self {
        DemoEval {
            n_shot: 5,
            max_new: 40,
            smoothing: Smoothing::None,
            seed: 11,
            max_segments: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub language_seed: u64,
    pub data: SyntheticConfig,
    pub vocab_size: usize,
    /// `vocab_size` here is ignored and replaced by the trained tokenizer's.
    pub model: ModelConfig,
    /// Fraction of the Cipher monolingual texts the foundation model sees;
    /// the rest is left for stage 1.
    pub foundation_cipher_frac: f64,
    pub foundation: TrainHyper,
    /// Stage 1 is optional.
    pub stage1: Option<TrainHyper>,
    pub stage2: TrainHyper,
    pub stage3: TrainHyper,
    pub interlinear_max_tokens: usize,
    pub pack_seed: u64,
    pub instruction_mode: InstructionMode,
    pub eval: DemoEval,
}

impl Default for DemoConfig {
    fn default() -> Self {
        let model = ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 256,
            dropout: 0.0,
            init_seed: 1,
        };
        let lora = LoraConfig {
            rank: 16,
            alpha: 32.0,
            targets: LoraTarget::ALL.into_iter().collect(),
            init_seed: 0,
            modules_to_save: ["tok_emb", "pos_emb", "head"].map(String::from).into(),
        };
        DemoConfig {
            language_seed: 3,
            data: SyntheticConfig::default(),
            vocab_size: 800,
            model,
            foundation_cipher_frac: 0.2,
            foundation: TrainHyper {
                epochs: 3,
                lr: 3e-3,
                batch_size: 16,
                seed: 21,
                ..TrainHyper::default()
            },
            stage1: Some(TrainHyper {
                epochs: 1,
                lr: 2e-3,
                batch_size: 16,
                seed: 22,
                lora: lora.clone(),
                ..TrainHyper::stage1()
            }),
            stage2: TrainHyper {
                epochs: 12,
                lr: 3e-3,
                batch_size: 4,
                seed: 23,
                lora: lora.clone(),
                ..TrainHyper::stage2()
            },
            stage3: TrainHyper {
                lr: 2e-3,
                batch_size: 8,
                seed: 24,
                lora,
                ..TrainHyper::stage3()
            },
            interlinear_max_tokens: 192,
            pack_seed: 5,
            instruction_mode: InstructionMode::SourceConsistent,
            eval: DemoEval::default(),
        }
    }
}

impl DemoConfig {
    /// A reduced configuration that finishes in about a minute.
    pub fn quick() -> Self {
        let mut c = DemoConfig::default();
        c.data.english_mono = 600;
        c.data.cipher_mono = 200;
        c.data.train_pairs = 1500;
        c.data.test_pairs = 100;
        c.data.dev_pairs = 60;
        c.foundation.epochs = 2;
        c.stage2.epochs = 4;
        c.eval.max_segments = Some(100);
        c.eval.smoothing = Smoothing::AddOne;
        c
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut model = self.model.clone();
        model.vocab_size = self.vocab_size.max(Vocab::MIN_SIZE);
        if let Err(e) = model.validate() {
            problems.push(e.to_string());
        }
        if self.vocab_size < Vocab::MIN_SIZE {
            problems.push(format!("vocab_size must be at least {}", Vocab::MIN_SIZE));
        }
        if !(0.0..=1.0).contains(&self.foundation_cipher_frac) {
            problems.push("foundation_cipher_frac must be in [0, 1]".to_string());
        }
        let mut stages: Vec<(&str, &TrainHyper)> =
            vec![("foundation", &self.foundation), ("stage2", &self.stage2), ("stage3", &self.stage3)];
        if let Some(s1) = &self.stage1 {
            stages.push(("stage1", s1));
        }
        for (name, h) in stages {
            problems.extend(h.validate(&model).into_iter().map(|p| format!("{name}: {p}")));
        }
        if self.interlinear_max_tokens + 2 > self.stage2.seq_len {
            problems.push(format!(
                "interlinear_max_tokens {} plus BOS/EOS exceeds stage2.seq_len {}",
                self.interlinear_max_tokens, self.stage2.seq_len
            ));
        }
        let d = &self.data;
        if d.test_pairs == 0 || d.sft_pairs == 0 || d.train_pairs == 0 {
            problems.push("data: train_pairs, sft_pairs and test_pairs must be positive".to_string());
        }
        if d.dev_pairs < self.eval.n_shot + 1 {
            problems.push(format!("data.dev_pairs must exceed eval.n_shot ({})", self.eval.n_shot));
        }
        problems
    }
}

/// BLEU per direction for each compared system.
pub type ScoreTable = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub config: DemoConfig,
    pub datasets: BTreeMap<String, String>,
    /// System name (`base_5shot`, `stage2_5shot`, `stage3_only`,
    /// `stage2_3`) to direction to BLEU.
    pub bleu: ScoreTable,
    pub metrics: BTreeMap<String, f64>,
    pub runs: BTreeMap<String, PathBuf>,
    pub wall_time_secs: f64,
}

impl DemoManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn score(&self, system: &str, direction: &str) -> Option<f64> {
        self.bleu.get(system)?.get(direction).copied()
    }

    pub fn table(&self) -> String {
        let dirs: Vec<&String> = self.bleu.values().flat_map(|m| m.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut out = format!("{:<14}", "system");
        for d in &dirs {
            out.push_str(&format!(" {d:>8}"));
        }
        out.push('\n');
        for (sys, scores) in &self.bleu {
            out.push_str(&format!("{sys:<14}"));
            for d in &dirs {
                out.push_str(&format!(" {:>8.2}", scores.get(*d).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn scores(report: &EvalReport) -> BTreeMap<String, f64> {
    report.directions.iter().map(|d| (d.direction.clone(), d.bleu.score)).collect()
}

/// Generates data, trains every stage, evaluates, and writes
/// `demo_manifest.json` plus data artifacts and run directories under
/// `out_dir`.
pub fn run_demo(cfg: &DemoConfig, out_dir: &Path, log: bool) -> Result<DemoManifest> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    let _lock = DirLock::acquire(out_dir)?;
    let clock = Instant::now();
    let say = |msg: &str| {
        if log {
            eprintln!("[demo {:>6.1}s] {msg}", clock.elapsed().as_secs_f64());
        }
    };
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let ctx = RunContext {
        runs_root: out_dir.join("runs"),
        log_every: if log { 200 } else { 0 },
    };

    let lang = CipherLanguage::new(cfg.language_seed);
    let corpus = lang.generate(&cfg.data)?;
    let templates: TemplateTable = lang.templates()?;
    let en_xx = Direction::new(LangCode::En, LangCode::Xx)?;
    let directions = [en_xx, en_xx.reversed()];
    say(&format!(
        "data: {} train / {} sft / {} dev / {} test pairs",
        corpus.train.len(),
        corpus.sft.len(),
        corpus.dev.len(),
        corpus.test.len()
    ));

    let mut tok_texts: Vec<String> = corpus.english_mono.iter().chain(&corpus.cipher_mono).cloned().collect();
    for d in directions {
        tok_texts.push(templates.get(d, cfg.instruction_mode)?.text);
    }
    tok_texts.push("English: \nCipher: \n".to_string());
    let vocab = Vocab::train(&tok_texts, cfg.vocab_size)?;
    let vocab_json = vocab.to_json()?;
    write(&data_dir.join("vocab.json"), vocab_json.as_bytes())?;
    say(&format!("tokenizer: {} ids", vocab.len()));

    let n_found = (corpus.cipher_mono.len() as f64 * cfg.foundation_cipher_frac).round() as usize;
    let (found_cipher, stage1_cipher) = corpus.cipher_mono.split_at(n_found);
    let held_out = stage1_cipher.len() / 10;
    let (cipher_heldout, stage1_texts) = stage1_cipher.split_at(held_out);
    let mut found_texts = corpus.english_mono.clone();
    found_texts.extend_from_slice(found_cipher);

    let mut model = cfg.model.clone();
    model.vocab_size = vocab.len();
    let init = ParamSet::<f32>::init(&model)?;
    let mut runs = BTreeMap::new();
    let mut metrics = BTreeMap::new();

    let foundation = pretrain_foundation(&init, &found_texts, &vocab, &cfg.foundation, &ctx)?;
    runs.insert("foundation".to_string(), foundation.run_dir.clone());
    say(&format!("foundation: final loss {:.3}", foundation.manifest.last_loss().unwrap_or(f32::NAN)));
    let mut base = foundation.params;

    if let Some(h) = &cfg.stage1 {
        if !stage1_texts.is_empty() {
            let before = if held_out > 0 { Some(text_nll(&base, cipher_heldout, &vocab)?) } else { None };
            let s1 = run_stage1(&base, stage1_texts, &vocab, h, &ctx)?;
            runs.insert("stage1".to_string(), s1.run_dir.clone());
            base = s1.params;
            if let Some(before) = before {
                let after = text_nll(&base, cipher_heldout, &vocab)?;
                metrics.insert("stage1_heldout_ppl_before".to_string(), before.exp());
                metrics.insert("stage1_heldout_ppl_after".to_string(), after.exp());
                say(&format!("stage1: held-out Cipher perplexity {:.2} -> {:.2}", before.exp(), after.exp()));
            }
        }
    }

    let packed = pack_documents(
        &materialize_both_directions(&corpus.train),
        cfg.interlinear_max_tokens,
        &vocab,
        cfg.pack_seed,
    );
    let docs_jsonl = to_jsonl(&packed.documents)?;
    write(&data_dir.join("interlinear.jsonl"), docs_jsonl.as_bytes())?;
    let sft = build_sft_dataset_with(&materialize_both_directions(&corpus.sft), cfg.instruction_mode, &templates)?;
    let sft_jsonl = sft_to_jsonl(&sft)?;
    write(&data_dir.join("sft.jsonl"), sft_jsonl.as_bytes())?;
    for (name, pairs) in [
        ("train.tsv", &corpus.train),
        ("sft.tsv", &corpus.sft),
        ("dev.tsv", &corpus.dev),
        ("test.tsv", &corpus.test),
    ] {
        write_tsv(data_dir.join(name), pairs)?;
    }
    // Blank-line separated, the format `mtrecipe train` reads for stages 0 and 1.
    for (name, texts) in [("foundation.txt", &found_texts[..]), ("stage1.txt", stage1_texts)] {
        write(&data_dir.join(name), texts.join("\n").as_bytes())?;
    }
    let cipher_templates = serde_json::json!({
        "source_consistent": directions
            .iter()
            .map(|d| Ok((d.key(), templates.get(*d, InstructionMode::SourceConsistent)?.text)))
            .collect::<Result<BTreeMap<_, _>>>()?,
    });
    write(
        &data_dir.join("templates.json"),
        (serde_json::to_string_pretty(&cipher_templates)? + "\n").as_bytes(),
    )?;
    let datasets = BTreeMap::from([
        ("vocab".to_string(), sha256_hex(vocab_json.as_bytes())),
        ("interlinear".to_string(), sha256_hex(docs_jsonl.as_bytes())),
        ("sft".to_string(), sha256_hex(sft_jsonl.as_bytes())),
    ]);
    say(&format!("interlinear: {} documents; sft: {} records", packed.documents.len(), sft.len()));

    let s2 = run_stage2(&base, &packed.documents, &vocab, &cfg.stage2, &ctx)?;
    runs.insert("stage2".to_string(), s2.run_dir.clone());
    say(&format!(
        "stage2: loss {:.3} -> {:.3}",
        s2.manifest.first_loss().unwrap_or(f32::NAN),
        s2.manifest.last_loss().unwrap_or(f32::NAN)
    ));
    let s23 = run_stage3(&s2.params, &sft, &vocab, &cfg.stage3, cfg.instruction_mode, &ctx)?;
    runs.insert("stage2_3".to_string(), s23.run_dir.clone());
    let s3 = run_stage3(&base, &sft, &vocab, &cfg.stage3, cfg.instruction_mode, &ctx)?;
    runs.insert("stage3_only".to_string(), s3.run_dir.clone());
    say("stage3: trained from stage2 and from base");

    let eval_cfg = |mode| EvalConfig {
        mode,
        seed: cfg.eval.seed,
        smoothing: cfg.eval.smoothing,
        samples: 5,
        max_segments: cfg.eval.max_segments,
    };
    let nshot = eval_cfg(EvalMode::NShot { n: cfg.eval.n_shot });
    let instr = eval_cfg(EvalMode::Instruction {
        mode: cfg.instruction_mode,
    });
    let systems: [(&str, &ParamSet<f32>, &EvalConfig); 4] = [
        ("base_5shot", &base, &nshot),
        ("stage2_5shot", &s2.params, &nshot),
        ("stage3_only", &s3.params, &instr),
        ("stage2_3", &s23.params, &instr),
    ];
    let eval_dir = out_dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let mut bleu = BTreeMap::new();
    for (name, params, ecfg) in systems {
        let mut t = LmTranslator::new(params, &vocab, cfg.eval.max_new);
        let report = evaluate(&mut t, &corpus.test, &corpus.dev, &directions, &templates, ecfg)?;
        write(
            &eval_dir.join(format!("{name}.json")),
            (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
        )?;
        say(&format!("eval {name}:\n{}", report.table()));
        bleu.insert(name.to_string(), scores(&report));
    }

    let manifest = DemoManifest {
        config: cfg.clone(),
        datasets,
        bleu,
        metrics,
        runs,
        wall_time_secs: clock.elapsed().as_secs_f64(),
    };
    write(
        &out_dir.join("demo_manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    Ok(manifest)
}
