//! The eight pipeline commands over an output directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ecg_mllm::bridge::template_text;
use ecg_mllm::debias::{adversarial_split, build_debiased_verify_set, compute_bias_report, TemplateBank};
use ecg_mllm::eval::{evaluate, random_ecg_test, zero_shot_eval, zero_shot_prompt, ModelAnswerer, Prediction};
use ecg_mllm::model::{EcgCache, EcgLlm};
use ecg_mllm::rng;
use ecg_mllm::synth::{make_corpus, read_archive, read_jsonl, write_archive, write_jsonl, EcgRecord, QaItem, RecordMeta};
use ecg_mllm::tensor::ParamStore;
use ecg_mllm::textlm::Tokenizer;
use ecg_mllm::trainer::{
    add_logit_scale, contrastive_pretrain, load_checkpoint, mean_loss, pretrain_lm, save_checkpoint, train_stage, Checkpoint, Stage,
    TextTower, TrainState,
};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{LmCorpus, RunConfig};
use crate::error::CliError;

const TAG_INIT: u64 = 40;
const TAG_LORA: u64 = 41;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Jsonl,
}

impl ReportFormat {
    fn ext(self) -> &'static str {
        match self {
            ReportFormat::Table => "txt",
            ReportFormat::Jsonl => "jsonl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    BiasReport,
    BuildDebias,
    PretrainEncoder,
    Train(Stage),
    Eval,
    ZeroShot,
    RandomEcgTest,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::GenData => "gen-data".into(),
            Command::BiasReport => "bias-report".into(),
            Command::BuildDebias => "build-debias".into(),
            Command::PretrainEncoder => "pretrain-encoder".into(),
            Command::Train(s) => format!("train --stage {}", s.number()),
            Command::Eval => "eval".into(),
            Command::ZeroShot => "zero-shot".into(),
            Command::RandomEcgTest => "random-ecg-test".into(),
        }
    }
}

/// File locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
    pub fn archive(&self) -> PathBuf {
        self.p("data/records.ecgb")
    }
    pub fn records(&self) -> PathBuf {
        self.p("data/records.jsonl")
    }
    pub fn items(&self) -> PathBuf {
        self.p("data/items.jsonl")
    }
    pub fn templates(&self) -> PathBuf {
        self.p("data/templates.jsonl")
    }
    pub fn train(&self) -> PathBuf {
        self.p("data/train.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.p("data/test.jsonl")
    }
    pub fn stage1_set(&self) -> PathBuf {
        self.p("data/stage1.jsonl")
    }
    pub fn split_info(&self) -> PathBuf {
        self.p("data/split.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.p("models/vocab.txt")
    }
    pub fn foundation(&self) -> PathBuf {
        self.p("models/foundation.ecgm")
    }
    pub fn ecg_cache(&self) -> PathBuf {
        self.p("models/ecg_cache.ecgm")
    }
    pub fn stage(&self, s: Stage) -> PathBuf {
        self.p(&format!("models/stage{}.ecgm", s.number()))
    }
    pub fn report(&self, name: &str, fmt: ReportFormat) -> PathBuf {
        self.p(&format!("reports/{name}.{}", fmt.ext()))
    }
    pub fn json_report(&self, name: &str) -> PathBuf {
        self.p(&format!("reports/{name}.json"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.p("manifest.jsonl")
    }
    pub fn effective_config(&self) -> PathBuf {
        self.p("effective_config.toml")
    }
    fn lock(&self) -> PathBuf {
        self.p(".lock")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub test_subjects: BTreeSet<String>,
    pub dropped: usize,
    pub excluded_templates: Vec<String>,
    pub train: usize,
    pub test: usize,
    pub stage1: usize,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    command: &'a str,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    wall_time_s: f64,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Dependency(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub struct Runner {
    pub config: RunConfig,
    pub layout: Layout,
    pub format: ReportFormat,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Runner {
    pub fn new(config: RunConfig, out: &Path, format: ReportFormat) -> Self {
        Self { config, layout: Layout::new(out), format, inputs: Vec::new(), outputs: Vec::new() }
    }

    /// Runs one command under the directory lock, then dumps the effective
    /// config and appends a manifest entry.
    pub fn run(&mut self, cmd: Command) -> Result<(), CliError> {
        for d in ["data", "models", "reports"] {
            fs::create_dir_all(self.layout.root.join(d))?;
        }
        let _guard = self.lock()?;
        let start = Instant::now();
        self.inputs.clear();
        self.outputs.clear();
        match cmd {
            Command::GenData => self.gen_data()?,
            Command::BiasReport => self.bias_report()?,
            Command::BuildDebias => self.build_debias()?,
            Command::PretrainEncoder => self.pretrain_encoder()?,
            Command::Train(s) => self.train(s)?,
            Command::Eval => self.eval()?,
            Command::ZeroShot => self.zero_shot()?,
            Command::RandomEcgTest => self.random_ecg()?,
        }
        fs::write(self.layout.effective_config(), self.config.to_toml()?)?;
        self.append_manifest(&cmd.name(), start.elapsed().as_secs_f64())
    }

    fn lock(&self) -> Result<LockGuard, CliError> {
        let path = self.layout.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Dependency(format!("{} is locked by another run ({})", self.layout.root.display(), path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn append_manifest(&self, command: &str, wall: f64) -> Result<(), CliError> {
        let rel = |p: &PathBuf| p.strip_prefix(&self.layout.root).unwrap_or(p).display().to_string();
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(rel(p), file_digest(p)?);
        }
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(rel(p), file_digest(p)?);
        }
        let entry = ManifestEntry { command, config_digest: hex(&self.config.digest()?), inputs, outputs, wall_time_s: wall };
        let mut line = serde_json::to_string(&entry).map_err(|e| CliError::Internal(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.layout.manifest())?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    fn need(&mut self, path: PathBuf, producer: &str) -> Result<PathBuf, CliError> {
        if !path.exists() {
            return Err(CliError::Dependency(format!("missing {}; run `{producer}` first", path.display())));
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn write_text(&mut self, path: PathBuf, text: &str) -> Result<(), CliError> {
        fs::write(&path, text)?;
        self.wrote(path);
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    // ------------------------------------------------------------ loaders

    fn load_meta(&mut self) -> Result<Vec<RecordMeta>, CliError> {
        let p = self.need(self.layout.records(), "gen-data")?;
        Ok(read_jsonl(&p)?)
    }

    fn load_records(&mut self, meta: &[RecordMeta]) -> Result<Vec<EcgRecord>, CliError> {
        let p = self.need(self.layout.archive(), "gen-data")?;
        Ok(read_archive(&p, meta)?)
    }

    fn load_bank(&mut self) -> Result<TemplateBank, CliError> {
        let p = self.need(self.layout.templates(), "gen-data")?;
        Ok(TemplateBank::load(&p)?)
    }

    fn load_items(&mut self, path: PathBuf, producer: &str) -> Result<Vec<QaItem>, CliError> {
        let p = self.need(path, producer)?;
        Ok(read_jsonl(&p)?)
    }

    fn load_split(&mut self) -> Result<SplitInfo, CliError> {
        let p = self.need(self.layout.split_info(), "build-debias")?;
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("{}: {e}", p.display())))
    }

    fn load_tokenizer(&mut self) -> Result<Tokenizer, CliError> {
        let p = self.need(self.layout.vocab(), "pretrain-encoder")?;
        Ok(Tokenizer::load(&p)?)
    }

    fn load_cache(&mut self) -> Result<EcgCache, CliError> {
        let p = self.need(self.layout.ecg_cache(), "pretrain-encoder")?;
        let ck = load_checkpoint(&p)?;
        let mut cache = EcgCache::default();
        for t in ck.tensors {
            cache.insert(t.name, t.value);
        }
        Ok(cache)
    }

    /// Model weights from a checkpoint, with the contrastive-only tensors
    /// (text tower, temperature) left out.
    fn load_model(&mut self, path: PathBuf, producer: &str) -> Result<(ParamStore, EcgLlm, Checkpoint), CliError> {
        let p = self.need(path, producer)?;
        let ck = load_checkpoint(&p)?;
        let full = ck.store()?;
        let mut store = ParamStore::new();
        for (_, name, value, trainable) in full.iter() {
            if name.starts_with("txt.") || name.starts_with("clip.") {
                continue;
            }
            store.add(name, value.clone(), trainable)?;
        }
        let tok = self.load_tokenizer()?;
        let model = EcgLlm::lookup(&store, &self.config.model, tok)?;
        Ok((store, model, ck))
    }

    fn final_model(&mut self) -> Result<(ParamStore, EcgLlm), CliError> {
        let (store, model, _) = self.load_model(self.layout.stage(Stage::Two), "train --stage 2")?;
        Ok((store, model))
    }

    // ----------------------------------------------------------- commands

    fn gen_data(&mut self) -> Result<(), CliError> {
        let bank = TemplateBank::default_bank();
        info!("generating {} records", self.config.generator.n_records);
        let corpus = make_corpus(&self.config.generator, &bank)?;
        write_archive(&self.layout.archive(), &corpus.records)?;
        write_jsonl(&self.layout.records(), &corpus.meta)?;
        write_jsonl(&self.layout.items(), &corpus.items)?;
        bank.save(&self.layout.templates())?;
        for p in [self.layout.archive(), self.layout.records(), self.layout.items(), self.layout.templates()] {
            self.wrote(p);
        }
        info!("{} records, {} items", corpus.records.len(), corpus.items.len());
        Ok(())
    }

    fn bias_report(&mut self) -> Result<(), CliError> {
        let meta = self.load_meta()?;
        let bank = self.load_bank()?;
        let items = self.load_items(self.layout.items(), "gen-data")?;
        let report = compute_bias_report(&items, &meta, &bank)?;
        for w in &report.warnings {
            log::warn!("{w}");
        }
        let text = match self.format {
            ReportFormat::Table => report.table(),
            ReportFormat::Jsonl => {
                let mut s = String::new();
                for r in &report.rows {
                    s.push_str(&serde_json::to_string(r).map_err(|e| CliError::Internal(e.to_string()))?);
                    s.push('\n');
                }
                s.push_str(
                    &serde_json::json!({"broad_ratio": report.broad_ratio, "specific_ratio": report.specific_ratio, "total": report.total})
                        .to_string(),
                );
                s.push('\n');
                s
            }
        };
        if log::log_enabled!(log::Level::Info) {
            eprint!("{text}");
        }
        self.write_text(self.layout.report("bias_report", self.format), &text)
    }

    fn build_debias(&mut self) -> Result<(), CliError> {
        let meta = self.load_meta()?;
        let bank = self.load_bank()?;
        let items = self.load_items(self.layout.items(), "gen-data")?;
        let split = adversarial_split(&items, &bank, &meta, self.seed(), self.config.split.test_fraction)?;
        let verify: Vec<QaItem> = split.train.iter().filter(|i| i.qtype == ecg_mllm::synth::QType::Verify).cloned().collect();
        let balanced = build_debiased_verify_set(&verify, self.seed())?;
        write_jsonl(&self.layout.train(), &split.train)?;
        write_jsonl(&self.layout.test(), &split.test)?;
        write_jsonl(&self.layout.stage1_set(), &balanced.items)?;
        let info = SplitInfo {
            test_subjects: split.test_subjects.clone(),
            dropped: split.dropped,
            excluded_templates: balanced.excluded.clone(),
            train: split.train.len(),
            test: split.test.len(),
            stage1: balanced.items.len(),
        };
        fs::write(self.layout.split_info(), serde_json::to_string_pretty(&info).map_err(|e| CliError::Internal(e.to_string()))?)?;
        for p in [self.layout.train(), self.layout.test(), self.layout.stage1_set(), self.layout.split_info()] {
            self.wrote(p);
        }
        info!(
            "train {} / test {} items ({} straddling dropped); stage-1 set {} items; {} templates excluded",
            info.train,
            info.test,
            info.dropped,
            info.stage1,
            info.excluded_templates.len()
        );
        Ok(())
    }

    fn pretrain_encoder(&mut self) -> Result<(), CliError> {
        let meta = self.load_meta()?;
        let records = self.load_records(&meta)?;
        let bank = self.load_bank()?;
        let items = self.load_items(self.layout.items(), "gen-data")?;
        let train = self.load_items(self.layout.train(), "build-debias")?;
        let test = self.load_items(self.layout.test(), "build-debias")?;
        let split = self.load_split()?;

        let tok = build_vocabulary(&meta, &bank, [&items, &train, &test]);
        tok.save(&self.layout.vocab())?;
        self.wrote(self.layout.vocab());
        info!("vocabulary of {} tokens", tok.len());

        let mut rng = rng::stream(self.seed(), &[TAG_INIT]);
        let mut store = ParamStore::new();
        let model = EcgLlm::init(&mut store, &self.config.model, tok.clone(), &mut rng)?;
        let cc = self.config.contrastive.clone();
        let tower = TextTower::init(&mut store, &cc, tok.len(), &mut rng)?;
        add_logit_scale(&mut store, cc.temperature)?;

        let train_records: Vec<(&EcgRecord, Vec<usize>)> = records
            .iter()
            .zip(&meta)
            .filter(|(_, m)| !split.test_subjects.contains(&m.subject_id))
            .map(|(r, m)| (r, tok.encode(&m.report)))
            .collect();
        info!("contrastive pretraining on {} ECG-report pairs", train_records.len());
        let clip = contrastive_pretrain(&mut store, &model.encoder, &tower, &train_records, &cc, self.seed(), |e, s, l| {
            if s % 10 == 0 {
                info!("contrastive epoch {} step {s}: loss {l:.4}", e + 1);
            }
        })?;

        let lm_seqs = lm_corpus(self.config.lm_pretrain.corpus, &tok, &meta, &train, &split.test_subjects);
        let lm_losses = if lm_seqs.is_empty() {
            Vec::new()
        } else {
            info!("base LM pretraining on {} sequences", lm_seqs.len());
            pretrain_lm(&mut store, &model.lm, &tok, &lm_seqs, &self.config.lm_pretrain.trainer(), self.seed())?
        };

        let digest = self.config.digest()?;
        save_checkpoint(&self.layout.foundation(), &Checkpoint::from_store(&store, &[], Vec::new(), digest))?;
        self.wrote(self.layout.foundation());

        let cache = EcgCache::build(&model.encoder, &store, &records, self.config.eval.encode_batch)?;
        let mut cs = ParamStore::new();
        for id in cache.ids().map(str::to_string).collect::<Vec<_>>() {
            cs.add(id.clone(), cache.get(&id)?.clone(), false)?;
        }
        save_checkpoint(&self.layout.ecg_cache(), &Checkpoint::from_store(&cs, &[], Vec::new(), digest))?;
        self.wrote(self.layout.ecg_cache());

        let report = serde_json::json!({
            "contrastive_epoch_losses": clip.epoch_losses,
            "temperature": clip.temperature,
            "lm_corpus": self.config.lm_pretrain.corpus,
            "lm_epoch_losses": lm_losses,
        });
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
        self.write_text(self.layout.json_report("pretrain"), &text)
    }

    fn train(&mut self, stage: Stage) -> Result<(), CliError> {
        let (cfg, items_path, producer) = match stage {
            Stage::One => {
                if !self.config.debias.enabled {
                    return Err(CliError::Config("stage 1 is disabled (debias.enabled = false)".into()));
                }
                (self.config.stage1(), self.layout.stage1_set(), "build-debias")
            }
            Stage::Two => (self.config.stage2(), self.layout.train(), "build-debias"),
        };
        let items = self.load_items(items_path, producer)?;
        let cache = self.load_cache()?;
        let (mut store, model) = match (stage, self.config.debias.enabled) {
            (Stage::Two, true) => {
                let (s, m, _) = self.load_model(self.layout.stage(Stage::One), "train --stage 1")?;
                (s, m)
            }
            _ => {
                let (mut s, mut m, _) = self.load_model(self.layout.foundation(), "pretrain-encoder")?;
                m.inject_lora(&mut s, &mut rng::stream(self.seed(), &[TAG_LORA]))?;
                (s, m)
            }
        };
        model.freeze_for_instruction(&mut store);
        let initial = mean_loss(&store, &model, &items, &cache)?;
        info!("{stage}: {} items, initial loss {initial:.4}", items.len());
        let mut state = TrainState::new(stage, self.seed(), &cfg);
        let report = train_stage(&mut store, &model, &cfg, &items, &cache, &mut state, None, |e, s, l| {
            if s % 25 == 0 {
                info!("{stage} epoch {} step {s}: loss {l:.4}", e + 1);
            }
        })?;
        let final_loss = mean_loss(&store, &model, &items, &cache)?;
        info!("{stage}: final loss {final_loss:.4}");
        let (_, moments) = state.adam.export(&store);
        let ck = Checkpoint::from_store(&store, &moments, state.to_blob(), self.config.digest()?);
        save_checkpoint(&self.layout.stage(stage), &ck)?;
        self.wrote(self.layout.stage(stage));
        let text = serde_json::to_string_pretty(&serde_json::json!({
            "stage": stage.number(),
            "items": items.len(),
            "initial_loss": initial,
            "final_loss": final_loss,
            "epoch_losses": report.epoch_losses,
            "steps": report.steps,
        }))
        .map_err(|e| CliError::Internal(e.to_string()))?
            + "\n";
        self.write_text(self.layout.json_report(&format!("stage{}", stage.number())), &text)
    }

    fn eval(&mut self) -> Result<(), CliError> {
        let test = self.load_items(self.layout.test(), "build-debias")?;
        let cache = self.load_cache()?;
        let (store, model) = self.final_model()?;
        let answerer = ModelAnswerer { model: &model, store: &store, cache: &cache };
        let (result, preds) = evaluate(&answerer, &test)?;
        let text = match self.format {
            ReportFormat::Table => result.table(),
            ReportFormat::Jsonl => result.jsonl()?,
        };
        if log::log_enabled!(log::Level::Info) {
            eprint!("{text}");
        }
        self.write_text(self.layout.report("eval", self.format), &text)?;
        let path = self.layout.root.join("reports/eval_predictions.jsonl");
        write_jsonl::<Prediction>(&path, &preds)?;
        self.wrote(path);
        Ok(())
    }

    fn zero_shot(&mut self) -> Result<(), CliError> {
        let meta = self.load_meta()?;
        let split = self.load_split()?;
        let records = self.load_records(&meta)?;
        let cache = self.load_cache()?;
        let (store, model) = self.final_model()?;
        let held: Vec<&EcgRecord> = records.iter().zip(&meta).filter(|(_, m)| split.test_subjects.contains(&m.subject_id)).map(|(r, _)| r).collect();
        let labels = self.config.eval.zero_shot_labels.clone();
        let result = zero_shot_eval(&model, &store, &cache, &held, &labels)?;
        let text = match self.format {
            ReportFormat::Table => {
                let mut s = format!("{:<24} {:>6} {:>6} {:>7}\n", "Label", "pos", "neg", "AUC");
                for r in &result {
                    s.push_str(&format!("{:<24} {:>6} {:>6} {:>7.3}\n", r.label.phrase(), r.positives, r.negatives, r.auc));
                }
                s
            }
            ReportFormat::Jsonl => {
                let mut s = String::new();
                for r in &result {
                    let v = serde_json::json!({"label": r.label, "prompt": zero_shot_prompt(r.label), "positives": r.positives, "negatives": r.negatives, "auc": r.auc});
                    s.push_str(&v.to_string());
                    s.push('\n');
                }
                s
            }
        };
        if log::log_enabled!(log::Level::Info) {
            eprint!("{text}");
        }
        self.write_text(self.layout.report("zero_shot", self.format), &text)
    }

    fn random_ecg(&mut self) -> Result<(), CliError> {
        let meta = self.load_meta()?;
        let split = self.load_split()?;
        let test = self.load_items(self.layout.test(), "build-debias")?;
        let cache = self.load_cache()?;
        let (store, model) = self.final_model()?;
        let pool: Vec<String> = meta.iter().filter(|m| split.test_subjects.contains(&m.subject_id)).map(|m| m.id.clone()).collect();
        let answerer = ModelAnswerer { model: &model, store: &store, cache: &cache };
        let result = random_ecg_test(&answerer, &test, &pool, self.seed())?;
        let text = match self.format {
            ReportFormat::Table => result.table(),
            ReportFormat::Jsonl => result.jsonl()?,
        };
        if log::log_enabled!(log::Level::Info) {
            eprint!("{text}");
        }
        self.write_text(self.layout.report("random_ecg", self.format), &text)
    }
}

/// Lowercased words of every text the pipeline will ever tokenize.
pub fn build_vocabulary<'a>(meta: &[RecordMeta], bank: &TemplateBank, item_sets: impl IntoIterator<Item = &'a Vec<QaItem>>) -> Tokenizer {
    let mut texts: Vec<String> = template_text().iter().map(|s| s.to_string()).collect();
    for items in item_sets {
        for i in items {
            texts.push(i.question.clone());
            texts.push(i.answer.clone());
        }
    }
    for t in bank.templates() {
        texts.extend(t.train_forms.iter().chain(&t.test_forms).cloned());
    }
    texts.extend(meta.iter().map(|m| m.report.clone()));
    texts.extend(ecg_mllm::synth::Condition::ABNORMAL.iter().map(|c| zero_shot_prompt(*c)));
    Tokenizer::build(texts.iter().map(String::as_str))
}

/// The prompt of an item with each ECG slot replaced by its report text.
pub fn described_prompt(item: &QaItem, reports: &HashMap<&str, &str>) -> String {
    let r: Vec<&str> = item.ecg_ids.iter().map(|id| reports.get(id.as_str()).copied().unwrap_or("")).collect();
    let (b, t) = (ecg_mllm::bridge::SLOT_END, ecg_mllm::bridge::QUESTION_INTRO);
    let pre = match r.as_slice() {
        [a] => format!("{} {a} {b}", ecg_mllm::bridge::SINGLE_INTRO),
        [a, c, ..] => format!("{} {a} {} {c} {b}", ecg_mllm::bridge::PAIR_INTRO, ecg_mllm::bridge::PAIR_MIDDLE),
        [] => String::new(),
    };
    format!("{pre} {t} {} {}", item.question, item.answer)
}

/// Token sequences for base-LM pretraining; only training-split text.
pub fn lm_corpus(kind: LmCorpus, tok: &Tokenizer, meta: &[RecordMeta], train: &[QaItem], test_subjects: &BTreeSet<String>) -> Vec<Vec<usize>> {
    let with_bos = |s: &str| [vec![tok.bos()], tok.encode(s)].concat();
    match kind {
        LmCorpus::None => Vec::new(),
        LmCorpus::Reports => meta.iter().filter(|m| !test_subjects.contains(&m.subject_id)).map(|m| with_bos(&m.report)).collect(),
        LmCorpus::Qa => train.iter().map(|i| with_bos(&format!("{} {}", i.question, i.answer))).collect(),
        LmCorpus::Described => {
            let reports: HashMap<&str, &str> = meta.iter().map(|m| (m.id.as_str(), m.report.as_str())).collect();
            train.iter().map(|i| with_bos(&described_prompt(i, &reports))).collect()
        }
    }
}
