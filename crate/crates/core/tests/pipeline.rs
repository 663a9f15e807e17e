use mtrecipe::eval::{evaluate, EvalConfig, EvalMode, LmTranslator};
use mtrecipe::instruction::{build_sft_dataset_with, InstructionMode, SftRecord, TemplateTable};
use mtrecipe::interlinear::{materialize_both_directions, pack_documents, serialize, Document};
use mtrecipe::lang::{Direction, LangCode};
use mtrecipe::lora::{LoraConfig, LoraTarget};
use mtrecipe::model::{Checkpoint, ModelConfig, ParamSet};
use mtrecipe::pipeline::*;
use mtrecipe::synthetic::{CipherLanguage, SyntheticConfig, SyntheticCorpus};
use mtrecipe::tokenizer::Vocab;
use mtrecipe::train::UpdateMode;
use mtrecipe::Error;

struct Fixture {
    corpus: SyntheticCorpus,
    templates: TemplateTable,
    vocab: Vocab,
    params: ParamSet<f32>,
}

fn fixture() -> Fixture {
    let lang = CipherLanguage::new(2);
    let cfg = SyntheticConfig {
        seed: 5,
        english_mono: 24,
        cipher_mono: 24,
        sentences_per_text: 3,
        train_pairs: 60,
        dev_pairs: 10,
        test_pairs: 8,
        sft_pairs: 12,
    };
    let corpus = lang.generate(&cfg).unwrap();
    let mut texts: Vec<String> = corpus.english_mono.iter().chain(&corpus.cipher_mono).cloned().collect();
    texts.push("English: \nCipher: \n".into());
    let vocab = Vocab::train(&texts, 420).unwrap();
    let model = ModelConfig {
        n_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: vocab.len(),
        max_seq_len: 128,
        dropout: 0.0,
        init_seed: 3,
    };
    let params = ParamSet::init(&model).unwrap();
    let templates = lang.templates().unwrap();
    Fixture { corpus, templates, vocab, params }
}

fn hyper(epochs: usize) -> TrainHyper {
    TrainHyper {
        epochs,
        lr: 1e-2,
        batch_size: 4,
        seq_len: 128,
        seed: 9,
        lora: LoraConfig { rank: 4, alpha: 8.0, targets: LoraTarget::ALL.into_iter().collect(), init_seed: 1, ..Default::default() },
        ..TrainHyper::default()
    }
}

fn docs(f: &Fixture) -> Vec<Document> {
    pack_documents(&materialize_both_directions(&f.corpus.train), 100, &f.vocab, 1).documents
}

fn sft(f: &Fixture) -> Vec<SftRecord> {
    let pairs = materialize_both_directions(&f.corpus.sft);
    build_sft_dataset_with(&pairs, InstructionMode::SourceConsistent, &f.templates).unwrap()
}

fn decreased(m: &RunManifest) -> bool {
    let c: Vec<f32> = m.loss_curve.iter().map(|(_, l)| *l).collect();
    let k = (c.len() / 4).max(1);
    let head: f32 = c[..k].iter().sum::<f32>() / k as f32;
    let tail: f32 = c[c.len() - k..].iter().sum::<f32>() / k as f32;
    tail < head
}

#[test]
fn stage1_lowers_held_out_perplexity() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let (train, held) = f.corpus.cipher_mono.split_at(20);
    let before = text_nll(&f.params, held, &f.vocab).unwrap();
    let out = run_stage1(&f.params, train, &f.vocab, &hyper(3), &RunContext::new(tmp.path())).unwrap();
    let after = text_nll(&out.params, held, &f.vocab).unwrap();
    assert!(decreased(&out.manifest));
    assert!(after < before, "{after} !< {before}");
    assert_eq!(out.manifest.update_mode, UpdateMode::Lora);
    assert!(out.run_dir.join("loss.csv").exists());
    assert!(out.run_dir.join("checkpoint.bin").exists());
}

#[test]
fn stage2_hash_matches_written_jsonl() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let docs = docs(&f);
    let out = run_stage2(&f.params, &docs, &f.vocab, &hyper(2), &RunContext::new(tmp.path())).unwrap();
    assert!(decreased(&out.manifest));
    let path = tmp.path().join("interlinear.jsonl");
    serialize(&docs, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(out.manifest.datasets["interlinear"], sha256_hex(&bytes));
    let reloaded = RunManifest::load(out.manifest_path()).unwrap();
    assert_eq!(reloaded, out.manifest);
}

#[test]
fn stage3_records_mode_and_learns() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let records = sft(&f);
    let out = run_stage3(&f.params, &records, &f.vocab, &hyper(3), InstructionMode::SourceConsistent, &RunContext::new(tmp.path()))
        .unwrap();
    assert!(decreased(&out.manifest));
    assert_eq!(out.manifest.instruction_mode, Some(InstructionMode::SourceConsistent));
    assert_eq!(out.manifest.stage, "stage3");
    assert!(out.manifest.completed);
}

#[test]
fn zero_epochs_in_test_mode_returns_input_weights() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut h = hyper(0);
    h.test_mode = true;
    let ctx = RunContext::new(tmp.path());
    let out = run_stage2(&f.params, &docs(&f), &f.vocab, &h, &ctx).unwrap();
    assert_eq!(params_sha256(&out.params), params_sha256(&f.params));
    assert_eq!(out.manifest.steps, 0);
    h.test_mode = false;
    assert!(matches!(run_stage2(&f.params, &docs(&f), &f.vocab, &h, &ctx), Err(Error::InvalidConfig(_))));
}

#[test]
fn empty_inputs_are_rejected() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ctx = RunContext::new(tmp.path());
    assert!(matches!(run_stage1(&f.params, &[], &f.vocab, &hyper(1), &ctx), Err(Error::EmptyDataset(_))));
    assert!(matches!(run_stage2(&f.params, &[], &f.vocab, &hyper(1), &ctx), Err(Error::EmptyDataset(_))));
    assert!(matches!(
        run_stage3(&f.params, &[], &f.vocab, &hyper(1), InstructionMode::EnglishFixed, &ctx),
        Err(Error::EmptyDataset(_))
    ));
}

#[test]
fn resume_reproduces_next_step_loss() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ctx = RunContext::new(tmp.path());
    let docs = docs(&f);
    let data = document_sequences(&docs, &f.vocab);
    let full = run_stage2(&f.params, &docs, &f.vocab, &hyper(2), &ctx).unwrap();
    let mut h = hyper(2);
    h.max_steps = Some(5);
    let part = run_stage2(&f.params, &docs, &f.vocab, &h, &ctx).unwrap();
    assert!(!part.manifest.completed);
    assert_eq!(part.manifest.steps, 5);
    let next = resume_run(&part.manifest, &data, &f.vocab, Some(1), &ctx).unwrap();
    assert_eq!(next.manifest.loss_curve[5], full.manifest.loss_curve[5]);
    let rest = resume_run(&part.manifest, &data, &f.vocab, None, &ctx).unwrap();
    assert!(rest.manifest.completed);
    assert_eq!(params_sha256(&rest.params), params_sha256(&full.params));
}

#[test]
fn run_directory_lock_is_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let lock = DirLock::acquire(tmp.path()).unwrap();
    assert!(matches!(DirLock::acquire(tmp.path()), Err(Error::Locked(_))));
    drop(lock);
    DirLock::acquire(tmp.path()).unwrap();
}

fn ablation_eval<'a>(f: &'a Fixture, dirs: &'a [Direction]) -> AblationEval<'a> {
    AblationEval {
        test: &f.corpus.test,
        dev: &f.corpus.dev,
        directions: dirs,
        config: EvalConfig::new(EvalMode::Instruction { mode: InstructionMode::SourceConsistent }),
        max_new: 24,
    }
}

#[test]
fn ablation_degenerate_size_is_plain_stage3() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ctx = RunContext::new(tmp.path());
    let records = sft(&f);
    let en_xx = Direction::new(LangCode::En, LangCode::Xx).unwrap();
    let dirs = [en_xx, en_xx.reversed()];
    let ev = ablation_eval(&f, &dirs);
    let pool = materialize_both_directions(&f.corpus.train);
    let n = records.len();
    let h = hyper(1);
    let mode = InstructionMode::SourceConsistent;
    let report = run_ablation_direct_sft(&f.params, &records, &pool, &[n, 2 * n], &f.vocab, &h, mode, &f.templates, &ev, &ctx).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].added, 0);
    assert_eq!(report.rows[1].added, n);
    assert_eq!(report.start_params_sha256, params_sha256(&f.params));
    for row in &report.rows {
        assert_eq!(row.bleu.len(), 2);
    }
    assert_eq!(report.table().lines().count(), 3);

    let plain = run_stage3(&f.params, &records, &f.vocab, &h, mode, &ctx).unwrap();
    let degenerate = Checkpoint::load(report.rows[0].run_dir.join("checkpoint.bin")).unwrap().params;
    assert_eq!(params_sha256(&degenerate), params_sha256(&plain.params));
    let mut tr = LmTranslator::new(&plain.params, &f.vocab, 24);
    let r = evaluate(&mut tr, ev.test, ev.dev, &dirs, &f.templates, &ev.config).unwrap();
    for d in &r.directions {
        assert_eq!(report.rows[0].bleu[&d.direction], d.bleu.score);
    }
}

#[test]
fn ablation_lists_every_bad_size() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let records = sft(&f);
    let en_xx = Direction::new(LangCode::En, LangCode::Xx).unwrap();
    let dirs = [en_xx];
    let ev = ablation_eval(&f, &dirs);
    let pool = materialize_both_directions(&f.corpus.train);
    let sizes = [1, records.len() + pool.len() + 1];
    let err = run_ablation_direct_sft(
        &f.params,
        &records,
        &pool,
        &sizes,
        &f.vocab,
        &hyper(1),
        InstructionMode::SourceConsistent,
        &f.templates,
        &ev,
        &RunContext::new(tmp.path()),
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("size 1 is smaller"), "{msg}");
    assert!(msg.contains("extra pairs"), "{msg}");
}
