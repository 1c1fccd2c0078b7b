//! Experiment configuration, artifact orchestration and the experiment
//! suites: UFA against the denoise-only baseline, few-shot fine-tuning,
//! transfer to an unseen task, and prompt and task ablations.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_corpus, generate_sentence_pairs, load_corpus, split_corpus, write_corpus, DialogueRecord, GeneratorConfig,
    LabelProvenance, SentencePair, Taxonomy,
};
use crate::decode_eval::{
    aligned_table, evaluate, selection_metric, DecodeConfig, EvalContext, MetricReport, Strategy, METRIC_COLUMNS,
};
use crate::denoising::{build_denoise_dataset, CorruptionConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::promptkit::{
    render_dialogue_history, BuildWarnings, ExampleBuilder, PromptVariant, PromptedExample, TaskRegistry, TaskSpec,
    DENOISE_TASK, DOMAIN_TASK, GENERATION_TASK, INTENT_TASK, SIMILARITY_TASK, SUMMARY_TASK,
};
use crate::tokenizer::{train, TokenizerModel, TrainOptions};
use crate::trainer::{run_stage, Stage, TrainPlan};

/// Tasks trained jointly in knowledge-prompt pre-training.
pub const PRETRAIN_TASKS: [&str; 4] = [DOMAIN_TASK, INTENT_TASK, GENERATION_TASK, SUMMARY_TASK];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Main,
    Fewshot,
    Unseen,
    PromptAblation,
    TaskAblation,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Main,
        ExperimentKind::Fewshot,
        ExperimentKind::Unseen,
        ExperimentKind::PromptAblation,
        ExperimentKind::TaskAblation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Main => "main",
            ExperimentKind::Fewshot => "fewshot",
            ExperimentKind::Unseen => "unseen",
            ExperimentKind::PromptAblation => "prompt_ablation",
            ExperimentKind::TaskAblation => "task_ablation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// `Ufa` adds knowledge-prompt pre-training on top of span denoising;
/// `UfaOri` is the denoise-only baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Ufa,
    UfaOri,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Ufa => "ufa",
            ModelVariant::UfaOri => "ufa_ori",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ufa" => Some(ModelVariant::Ufa),
            "ufa_ori" => Some(ModelVariant::UfaOri),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model_variant: ModelVariant,
    pub prompt_variant: PromptVariant,
    pub fewshot_k: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Fine-tuning tasks for the main and prompt-ablation experiments.
    pub tasks: Vec<String>,
    pub fewshot_task: String,

    pub out_dir: PathBuf,
    pub corpus_path: Option<PathBuf>,
    pub gold_path: Option<PathBuf>,
    pub pairs_path: Option<PathBuf>,
    pub tokenizer_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_path: Option<PathBuf>,

    /// Weakly labeled pre-training dialogues.
    pub n_dialogues: usize,
    /// Gold-labeled dialogues for fine-tuning and evaluation.
    pub gold_dialogues: usize,
    pub n_domains: usize,
    pub n_intents: usize,
    pub label_noise_rate: f64,
    pub corpus_seed: u64,
    pub dev_size: usize,
    pub test_fraction: f64,
    pub pair_train: usize,
    pub pair_dev: usize,
    pub pair_test: usize,

    pub vocab_size: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub dropout_rate: f64,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_seed: u64,
    pub denoise_steps: u64,
    pub ufa_steps: u64,
    pub finetune_epochs: usize,
    pub finetune_max_steps: Option<u64>,
    /// Fixed step count for few-shot runs; the epoch rule applies when unset.
    pub fewshot_steps: Option<u64>,
    /// Dev evaluations per fine-tuning run.
    pub dev_evals: u64,
    /// Caps on fine-tuning train, dev and test examples per task.
    pub train_limit: Option<usize>,
    pub dev_limit: usize,
    pub test_limit: usize,
    pub beam_width: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Main,
            model_variant: ModelVariant::Ufa,
            prompt_variant: PromptVariant::Full,
            fewshot_k: vec![5, 10, 20],
            seeds: vec![13, 17, 23],
            tasks: PRETRAIN_TASKS.iter().map(|s| s.to_string()).collect(),
            fewshot_task: INTENT_TASK.to_string(),
            out_dir: PathBuf::from("runs"),
            corpus_path: None,
            gold_path: None,
            pairs_path: None,
            tokenizer_path: None,
            checkpoint_dir: None,
            report_path: None,
            n_dialogues: 20_000,
            gold_dialogues: 3_000,
            n_domains: 24,
            n_intents: 20,
            label_noise_rate: 0.2,
            corpus_seed: 1,
            dev_size: 300,
            test_fraction: 0.2,
            pair_train: 2_000,
            pair_dev: 200,
            pair_test: 600,
            vocab_size: 8_000,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_source_len: 128,
            max_target_len: 32,
            dropout_rate: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            pretrain_seed: 7,
            denoise_steps: 2_000,
            ufa_steps: 3_000,
            finetune_epochs: 5,
            finetune_max_steps: None,
            fewshot_steps: None,
            dev_evals: 4,
            train_limit: None,
            dev_limit: 300,
            test_limit: 600,
            beam_width: 4,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Parse {
        line,
        field: key.to_string(),
        message: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse_value(line, key, v))
        .collect()
}

fn bad_choice(line: usize, key: &str, value: &str) -> Error {
    Error::Parse {
        line,
        field: key.to_string(),
        message: format!("unrecognized value `{value}`"),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; lists are comma-separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    field: content.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            c.set(line, key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Assigns one key. Unknown keys are configuration errors.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "experiment" => self.experiment = ExperimentKind::parse(value).ok_or_else(|| bad_choice(line, key, value))?,
            "model_variant" => self.model_variant = ModelVariant::parse(value).ok_or_else(|| bad_choice(line, key, value))?,
            "prompt_variant" => self.prompt_variant = PromptVariant::parse(value).ok_or_else(|| bad_choice(line, key, value))?,
            "fewshot_k" => self.fewshot_k = parse_list(line, key, value)?,
            "seeds" => self.seeds = parse_list(line, key, value)?,
            "tasks" => self.tasks = value.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
            "fewshot_task" => self.fewshot_task = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "corpus_path" => self.corpus_path = path(),
            "gold_path" => self.gold_path = path(),
            "pairs_path" => self.pairs_path = path(),
            "tokenizer_path" => self.tokenizer_path = path(),
            "checkpoint_dir" => self.checkpoint_dir = path(),
            "report_path" => self.report_path = path(),
            "n_dialogues" => self.n_dialogues = parse_value(line, key, value)?,
            "gold_dialogues" => self.gold_dialogues = parse_value(line, key, value)?,
            "n_domains" => self.n_domains = parse_value(line, key, value)?,
            "n_intents" => self.n_intents = parse_value(line, key, value)?,
            "label_noise_rate" => self.label_noise_rate = parse_value(line, key, value)?,
            "corpus_seed" => self.corpus_seed = parse_value(line, key, value)?,
            "dev_size" => self.dev_size = parse_value(line, key, value)?,
            "test_fraction" => self.test_fraction = parse_value(line, key, value)?,
            "pair_train" => self.pair_train = parse_value(line, key, value)?,
            "pair_dev" => self.pair_dev = parse_value(line, key, value)?,
            "pair_test" => self.pair_test = parse_value(line, key, value)?,
            "vocab_size" => self.vocab_size = parse_value(line, key, value)?,
            "d_model" => self.d_model = parse_value(line, key, value)?,
            "n_layers" => self.n_layers = parse_value(line, key, value)?,
            "n_heads" => self.n_heads = parse_value(line, key, value)?,
            "d_ff" => self.d_ff = parse_value(line, key, value)?,
            "max_source_len" => self.max_source_len = parse_value(line, key, value)?,
            "max_target_len" => self.max_target_len = parse_value(line, key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(line, key, value)?,
            "learning_rate" => self.learning_rate = parse_value(line, key, value)?,
            "batch_size" => self.batch_size = parse_value(line, key, value)?,
            "pretrain_seed" => self.pretrain_seed = parse_value(line, key, value)?,
            "denoise_steps" => self.denoise_steps = parse_value(line, key, value)?,
            "ufa_steps" => self.ufa_steps = parse_value(line, key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse_value(line, key, value)?,
            "finetune_max_steps" => {
                self.finetune_max_steps = match value {
                    "none" => None,
                    v => Some(parse_value(line, key, v)?),
                }
            }
            "fewshot_steps" => {
                self.fewshot_steps = match value {
                    "none" => None,
                    v => Some(parse_value(line, key, v)?),
                }
            }
            "dev_evals" => self.dev_evals = parse_value(line, key, value)?,
            "train_limit" => {
                self.train_limit = match value {
                    "none" => None,
                    v => Some(parse_value(line, key, v)?),
                }
            }
            "dev_limit" => self.dev_limit = parse_value(line, key, value)?,
            "test_limit" => self.test_limit = parse_value(line, key, value)?,
            "beam_width" => self.beam_width = parse_value(line, key, value)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.fewshot_k.iter().any(|&k| k == 0) {
            return Err(Error::config("fewshot_k", "values must be at least 1"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "must list at least one task"));
        }
        if self.dev_evals == 0 {
            return Err(Error::config("dev_evals", "must be at least 1"));
        }
        if self.dev_limit == 0 || self.test_limit == 0 {
            return Err(Error::config("dev_limit", "dev and test limits must be positive"));
        }
        if self.gold_dialogues == 0 || self.n_dialogues == 0 {
            return Err(Error::config("n_dialogues", "corpora must be nonempty"));
        }
        if self.pair_train == 0 || self.pair_dev == 0 || self.pair_test == 0 {
            return Err(Error::config("pair_train", "sentence-pair splits must be nonempty"));
        }
        self.generator(false).validate()?;
        self.model_config(self.vocab_size).validate()?;
        let registry = self.registry();
        for t in self.tasks.iter().chain([&self.fewshot_task]) {
            registry.require(t)?;
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus_path.clone().unwrap_or_else(|| self.out_dir.join("corpus.jsonl"))
    }

    pub fn gold_path(&self) -> PathBuf {
        self.gold_path.clone().unwrap_or_else(|| self.out_dir.join("gold.jsonl"))
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.pairs_path.clone().unwrap_or_else(|| self.out_dir.join("pairs.jsonl"))
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.tokenizer_path.clone().unwrap_or_else(|| self.out_dir.join("tokenizer.txt"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report_path.clone().unwrap_or_else(|| self.out_dir.join("reports.jsonl"))
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::new(self.n_domains, self.n_intents)
    }

    pub fn registry(&self) -> TaskRegistry {
        match self.taxonomy() {
            Ok(t) => TaskRegistry::builtin(&t),
            Err(_) => TaskRegistry::standard(),
        }
    }

    fn generator(&self, gold: bool) -> GeneratorConfig {
        GeneratorConfig {
            n_dialogues: if gold { self.gold_dialogues } else { self.n_dialogues },
            n_domains: self.n_domains,
            n_intents: self.n_intents,
            label_noise_rate: if gold { 0.0 } else { self.label_noise_rate },
            provenance: if gold { LabelProvenance::Gold } else { LabelProvenance::Weak },
            seed: if gold { self.corpus_seed.wrapping_add(1) } else { self.corpus_seed },
            ..GeneratorConfig::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_encoder_layers: self.n_layers,
            n_decoder_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            dropout_rate: self.dropout_rate,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
            ..ModelConfig::default()
        }
    }

    fn pretrain_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let fields = [
            self.n_dialogues.to_string(),
            self.n_domains.to_string(),
            self.n_intents.to_string(),
            self.label_noise_rate.to_string(),
            self.corpus_seed.to_string(),
            self.vocab_size.to_string(),
            self.d_model.to_string(),
            self.n_layers.to_string(),
            self.n_heads.to_string(),
            self.d_ff.to_string(),
            self.max_source_len.to_string(),
            self.max_target_len.to_string(),
            self.dropout_rate.to_string(),
            self.learning_rate.to_string(),
            self.batch_size.to_string(),
            self.pretrain_seed.to_string(),
            self.denoise_steps.to_string(),
            self.ufa_steps.to_string(),
        ];
        for f in fields {
            h.update(f.as_bytes());
            h.update([0]);
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Texts the tokenizer is trained on: dialogues, labels, summaries and
/// the prompt segments of every registered task.
pub fn tokenizer_texts(records: &[DialogueRecord], registry: &TaskRegistry) -> Vec<String> {
    let mut texts: Vec<String> = Vec::with_capacity(records.len() * 2 + registry.len());
    for r in records {
        if let Ok(h) = render_dialogue_history(&r.utterances) {
            texts.push(h);
        }
        texts.extend(r.summary.clone());
    }
    for spec in registry.specs() {
        texts.push(format!("{} {}", spec.name, spec.goal_description));
        texts.extend(spec.label_set.iter().flatten().cloned());
    }
    texts
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[SentencePair]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<SentencePair>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            field: "pair".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Writes the weak pre-training corpus, the gold corpus and the sentence
/// pairs.
pub fn generate_artifacts(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let weak = generate_corpus(&config.generator(false))?;
    let gold = generate_corpus(&config.generator(true))?;
    let n_pairs = config.pair_train + config.pair_dev + config.pair_test;
    let pairs = generate_sentence_pairs(n_pairs, config.n_intents, config.corpus_seed.wrapping_add(2))?;
    for (path, records) in [(config.corpus_path(), &weak), (config.gold_path(), &gold)] {
        ensure_parent(&path)?;
        write_corpus(&path, records)?;
    }
    let path = config.pairs_path();
    ensure_parent(&path)?;
    write_pairs(&path, &pairs)
}

/// Trains the tokenizer on the pre-training corpus and saves it.
pub fn train_tokenizer_artifact(config: &ExperimentConfig) -> Result<TokenizerModel> {
    let corpus_path = config.corpus_path();
    if !corpus_path.exists() {
        return Err(Error::Orchestration(vec![format!("corpus at {} (gen-corpus)", corpus_path.display())]));
    }
    let records = load_corpus(&corpus_path)?.collect::<Result<Vec<_>>>()?;
    let tok = train(tokenizer_texts(&records, &config.registry()), &TrainOptions::new(config.vocab_size))?;
    let path = config.tokenizer_path();
    ensure_parent(&path)?;
    tok.save(&path)?;
    Ok(tok)
}

/// Exactly `k` examples per class of a classification task, or `k`
/// examples of a generation task, drawn uniformly without replacement.
/// Selected examples keep their dataset order within each class.
pub fn fewshot_sample(examples: &[PromptedExample], task: &TaskSpec, k: usize, seed: u64) -> Result<Vec<PromptedExample>> {
    if k == 0 {
        return Err(Error::config("fewshot_k", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(labels) = task.normalized_labels() else {
        if examples.len() < k {
            return Err(Error::Sampling {
                class: task.name.clone(),
                available: examples.len(),
                requested: k,
            });
        }
        let mut picked = sample(&mut rng, examples.len(), k).into_vec();
        picked.sort_unstable();
        return Ok(picked.into_iter().map(|i| examples[i].clone()).collect());
    };
    let mut out = Vec::with_capacity(k * labels.len());
    for label in labels {
        let members: Vec<&PromptedExample> = examples.iter().filter(|e| e.target_text == label).collect();
        if members.len() < k {
            return Err(Error::Sampling {
                class: label,
                available: members.len(),
                requested: k,
            });
        }
        let mut picked = sample(&mut rng, members.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

fn input_digest(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest holds 8 bytes"))
}

/// One knowledge-prompt pre-training run as recorded in a bundle.
#[derive(Clone, Debug)]
pub struct Stage2Record {
    pub label: String,
    pub tasks: Vec<String>,
    pub checkpoint: String,
    /// Truncated SHA-256 of every training input.
    pub input_digests: Arc<HashSet<u64>>,
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub experiment: ExperimentKind,
    pub reports: Vec<MetricReport>,
    pub stage2: Vec<Stage2Record>,
    pub finetune_runs: usize,
    /// Ablated examples compared against their full prompt.
    pub containment_checked: usize,
    pub containment_violations: usize,
    /// Unseen-task inputs whose digest appears among stage-2 inputs.
    pub isolation_overlap: usize,
}

impl ReportBundle {
    fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            reports: Vec::new(),
            stage2: Vec::new(),
            finetune_runs: 0,
            containment_checked: 0,
            containment_violations: 0,
            isolation_overlap: 0,
        }
    }

    /// Distinct report groups in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.reports {
            if !out.contains(&r.group) {
                out.push(r.group.clone());
            }
        }
        out
    }

    /// Per-seed values of `metric` for reports matching the filters.
    pub fn values(&self, task: &str, group: &str, variant: &str, metric: &str) -> Vec<f64> {
        self.reports
            .iter()
            .filter(|r| r.task_name == task && r.group == group && r.model_variant == variant)
            .filter_map(|r| r.metric(metric))
            .collect()
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn fmt_value(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// One aligned table per experiment. Cells show the median over seeds
/// followed by the per-seed values in parentheses; "-" marks metrics a
/// row does not report.
pub fn render_report(reports: &[MetricReport]) -> String {
    let mut experiments: Vec<&str> = Vec::new();
    for r in reports {
        if !experiments.contains(&r.experiment.as_str()) {
            experiments.push(&r.experiment);
        }
    }
    let mut out = String::new();
    for exp in experiments {
        let subset: Vec<&MetricReport> = reports.iter().filter(|r| r.experiment == exp).collect();
        let columns: Vec<(&str, &str)> = METRIC_COLUMNS
            .iter()
            .copied()
            .filter(|(k, _)| subset.iter().any(|r| r.metric(k).is_some()))
            .collect();
        let mut keys: Vec<(&str, &str, &str, &str)> = Vec::new();
        for r in &subset {
            let key = (
                r.task_name.as_str(),
                r.group.as_str(),
                r.model_variant.as_str(),
                r.prompt_variant.as_str(),
            );
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let rows: Vec<Vec<String>> = keys
            .iter()
            .map(|key| {
                let members: Vec<&&MetricReport> = subset
                    .iter()
                    .filter(|r| (r.task_name.as_str(), r.group.as_str(), r.model_variant.as_str(), r.prompt_variant.as_str()) == *key)
                    .collect();
                let mut row = vec![key.0.to_string(), key.1.to_string(), key.2.to_string(), key.3.to_string()];
                for (metric, _) in &columns {
                    let values: Vec<f64> = members.iter().filter_map(|r| r.metric(metric)).collect();
                    row.push(match median(&values) {
                        None => "-".to_string(),
                        Some(m) => format!(
                            "{} ({})",
                            fmt_value(m),
                            values.iter().map(|v| fmt_value(*v)).collect::<Vec<_>>().join(", ")
                        ),
                    });
                }
                row
            })
            .collect();
        let mut headers = vec!["Task", "Group", "Model", "Prompt"];
        headers.extend(columns.iter().map(|(_, h)| *h));
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "== {exp} ==");
        out.push_str(&aligned_table(&headers, &rows));
    }
    out
}

/// Train, dev and test examples of one task.
#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub train: Vec<PromptedExample>,
    pub dev: Vec<PromptedExample>,
    pub test: Vec<PromptedExample>,
}

/// Loaded artifacts plus a cache of pre-trained models shared by every
/// experiment run against them.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub tokenizer: TokenizerModel,
    pub registry: TaskRegistry,
    pub pretrain_corpus: Vec<DialogueRecord>,
    pub gold: (Vec<DialogueRecord>, Vec<DialogueRecord>, Vec<DialogueRecord>),
    pub pairs: (Vec<SentencePair>, Vec<SentencePair>, Vec<SentencePair>),
    models: Mutex<BTreeMap<String, Arc<ModelParameters<f32>>>>,
    stage2: Mutex<BTreeMap<String, Stage2Record>>,
}

struct FinetuneRun {
    params: ModelParameters<f32>,
    checkpoint: String,
}

impl Workspace {
    /// Loads the corpus, gold, pair and tokenizer artifacts; reports every
    /// missing one at once.
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut missing = Vec::new();
        for (path, step) in [
            (config.corpus_path(), "gen-corpus"),
            (config.gold_path(), "gen-corpus"),
            (config.pairs_path(), "gen-corpus"),
            (config.tokenizer_path(), "train-tokenizer"),
        ] {
            if !path.exists() {
                missing.push(format!("{} ({step})", path.display()));
            }
        }
        if !missing.is_empty() {
            return Err(Error::Orchestration(missing));
        }
        let pretrain_corpus = load_corpus(config.corpus_path())?.collect::<Result<Vec<_>>>()?;
        let gold_records = load_corpus(config.gold_path())?.collect::<Result<Vec<_>>>()?;
        let gold = split_corpus(gold_records, config.dev_size, config.test_fraction, config.corpus_seed)?;
        let mut pairs = read_pairs(config.pairs_path())?;
        let (n_dev, n_test) = (config.pair_dev, config.pair_test);
        if pairs.len() < n_dev + n_test + 1 {
            return Err(Error::Sizing(format!(
                "{} sentence pairs cannot fill dev {n_dev} and test {n_test} splits",
                pairs.len()
            )));
        }
        let pair_train = pairs.split_off(n_dev + n_test);
        let pair_test = pairs.split_off(n_dev);
        let tokenizer = TokenizerModel::load(config.tokenizer_path())?;
        let registry = config.registry();
        Ok(Self {
            config,
            tokenizer,
            registry,
            pretrain_corpus,
            gold,
            pairs: (pair_train, pairs, pair_test),
            models: Mutex::new(BTreeMap::new()),
            stage2: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.model_config(self.tokenizer.vocab_size())
    }

    fn builder(&self) -> ExampleBuilder<'_> {
        ExampleBuilder::new(&self.tokenizer, self.config.max_source_len, self.config.max_target_len)
    }

    fn build_records(&self, records: &[DialogueRecord], task: &TaskSpec, variant: PromptVariant) -> Vec<PromptedExample> {
        let b = self.builder();
        let mut w = BuildWarnings::default();
        records.iter().flat_map(|r| b.build(r, task, variant, &mut w)).collect()
    }

    fn build_pairs(&self, pairs: &[SentencePair], task: &TaskSpec, variant: PromptVariant) -> Vec<PromptedExample> {
        let b = self.builder();
        let mut w = BuildWarnings::default();
        pairs.iter().filter_map(|p| b.build_pair(p, task, variant, &mut w)).collect()
    }

    /// Fine-tuning data for `task` under `variant`, with the configured
    /// train, dev and test caps applied.
    pub fn task_data(&self, task: &TaskSpec, variant: PromptVariant) -> TaskData {
        let mut data = if task.builder_kind == crate::promptkit::BuilderKind::SentencePair {
            TaskData {
                train: self.build_pairs(&self.pairs.0, task, variant),
                dev: self.build_pairs(&self.pairs.1, task, variant),
                test: self.build_pairs(&self.pairs.2, task, variant),
            }
        } else {
            TaskData {
                train: self.build_records(&self.gold.0, task, variant),
                dev: self.build_records(&self.gold.1, task, variant),
                test: self.build_records(&self.gold.2, task, variant),
            }
        };
        if let Some(limit) = self.config.train_limit {
            data.train = limited(data.train, limit, self.config.corpus_seed);
        }
        data.dev = limited(data.dev, self.config.dev_limit, self.config.corpus_seed);
        data.test = limited(data.test, self.config.test_limit, self.config.corpus_seed);
        data
    }

    /// Counts ablated examples that are not a prefix (no goal) or suffix
    /// (no task) of the full-prompt example built from the same source.
    fn containment(&self, task: &TaskSpec, variant: PromptVariant, full: &TaskData, ablated: &TaskData) -> (usize, usize) {
        let mut checked = 0;
        let mut violations = 0;
        for (f, a) in [(&full.train, &ablated.train), (&full.dev, &ablated.dev), (&full.test, &ablated.test)] {
            if f.len() != a.len() {
                violations += f.len().abs_diff(a.len());
            }
            for (f, a) in f.iter().zip(a) {
                checked += 1;
                let ok = match variant {
                    PromptVariant::NoGoal => f.input_text.starts_with(&a.input_text),
                    PromptVariant::NoTask => f.input_text.ends_with(&a.input_text),
                    PromptVariant::Full => f.input_text == a.input_text,
                };
                if !ok || f.target_ids != a.target_ids || f.task_name != task.name {
                    violations += 1;
                }
            }
        }
        (checked, violations)
    }

    fn cache_path(&self, name: &str) -> PathBuf {
        self.config
            .checkpoint_dir()
            .join(format!("{name}-{}.ckpt", self.config.pretrain_fingerprint()))
    }

    fn cached(&self, name: &str, build: impl FnOnce() -> Result<ModelParameters<f32>>) -> Result<Arc<ModelParameters<f32>>> {
        if let Some(m) = self.models.lock().expect("model cache poisoned").get(name) {
            return Ok(Arc::clone(m));
        }
        let path = self.cache_path(name);
        let params = if path.exists() {
            ModelParameters::load_expecting(&path, &self.model_config())?
        } else {
            let p = build()?;
            ensure_parent(&path)?;
            p.save(&path)?;
            p
        };
        let params = Arc::new(params);
        self.models
            .lock()
            .expect("model cache poisoned")
            .insert(name.to_string(), Arc::clone(&params));
        Ok(params)
    }

    /// Checkpoint id of a cached pre-trained model.
    pub fn checkpoint_id(&self, name: &str) -> String {
        format!("{name}@{}", self.config.pretrain_fingerprint())
    }

    fn plan(&self, stage: Stage, tasks: &[&str], steps: u64, seed: u64) -> TrainPlan {
        let mut plan = TrainPlan::new(stage, tasks);
        plan.batch_size = self.config.batch_size;
        plan.max_steps = Some(steps);
        plan.seed = seed;
        plan.optimizer.learning_rate = self.config.learning_rate;
        plan
    }

    /// Span-denoising pre-training on the unlabeled dialogues.
    pub fn denoise_model(&self) -> Result<Arc<ModelParameters<f32>>> {
        self.cached("denoise", || {
            let corruption = CorruptionConfig {
                seed: self.config.pretrain_seed,
                ..CorruptionConfig::default()
            };
            let window = corruption.fit_window(self.config.max_source_len, self.config.max_target_len);
            let (examples, _) = build_denoise_dataset(&self.pretrain_corpus, &self.tokenizer, &corruption, window)?;
            let mut data = BTreeMap::new();
            data.insert(DENOISE_TASK.to_string(), examples);
            let init = ModelParameters::init(&self.model_config(), self.config.pretrain_seed)?;
            let plan = self.plan(Stage::Denoise, &[DENOISE_TASK], self.config.denoise_steps, self.config.pretrain_seed);
            Ok(run_stage(&plan, init, &data, self.tokenizer.pad_id(), None)?.params)
        })
    }

    fn stage2_name(tasks: &[&str]) -> String {
        if tasks == PRETRAIN_TASKS {
            "ufa".to_string()
        } else {
            format!("ufa[{}]", tasks.join("+").replace(' ', "_"))
        }
    }

    /// Knowledge-prompt pre-training on `tasks`, continuing from the
    /// denoise model.
    pub fn ufa_model(&self, tasks: &[&str]) -> Result<(Arc<ModelParameters<f32>>, Stage2Record)> {
        if tasks.contains(&SIMILARITY_TASK) {
            return Err(Error::Plan(format!("`{SIMILARITY_TASK}` is reserved for unseen-task evaluation")));
        }
        let name = Self::stage2_name(tasks);
        let mut data = BTreeMap::new();
        for &t in tasks {
            let spec = self.registry.require(t)?;
            data.insert(t.to_string(), self.build_records(&self.pretrain_corpus, spec, PromptVariant::Full));
        }
        let record = {
            let mut cache = self.stage2.lock().expect("stage-2 cache poisoned");
            cache
                .entry(name.clone())
                .or_insert_with(|| Stage2Record {
                    label: name.clone(),
                    tasks: tasks.iter().map(|t| t.to_string()).collect(),
                    checkpoint: self.checkpoint_id(&name),
                    input_digests: Arc::new(data.values().flatten().map(|e| input_digest(&e.input_text)).collect()),
                })
                .clone()
        };
        let params = self.cached(&name, || {
            let base = self.denoise_model()?;
            let plan = self.plan(Stage::UfaPretrain, tasks, self.config.ufa_steps, self.config.pretrain_seed);
            Ok(run_stage(&plan, (*base).clone(), &data, self.tokenizer.pad_id(), None)?.params)
        })?;
        Ok((params, record))
    }

    fn base_model(&self, variant: ModelVariant) -> Result<(Arc<ModelParameters<f32>>, Option<Stage2Record>)> {
        match variant {
            ModelVariant::UfaOri => Ok((self.denoise_model()?, None)),
            ModelVariant::Ufa => {
                let (p, r) = self.ufa_model(&PRETRAIN_TASKS)?;
                Ok((p, Some(r)))
            }
        }
    }

    /// Fine-tunes `base` and keeps the dev checkpoint with the best
    /// selection metric (greedy dev decoding).
    fn finetune(
        &self,
        base: &ModelParameters<f32>,
        task: &TaskSpec,
        data: &TaskData,
        seed: u64,
        steps: Option<u64>,
    ) -> Result<FinetuneRun> {
        if data.train.is_empty() || data.dev.is_empty() {
            return Err(Error::Plan(format!("task `{}` has no fine-tuning data", task.name)));
        }
        let steps = steps.unwrap_or_else(|| {
            let per_epoch = data.train.len().div_ceil(self.config.batch_size) as u64;
            let by_epochs = self.config.finetune_epochs as u64 * per_epoch;
            self.config.finetune_max_steps.map_or(by_epochs, |m| m.min(by_epochs))
        });
        let mut plan = self.plan(Stage::Finetune, &[task.name.as_str()], steps.max(1), seed);
        plan.eval_every = (steps / self.config.dev_evals).max(1);
        let mut datasets = BTreeMap::new();
        datasets.insert(task.name.clone(), data.train.clone());
        let metric = selection_metric(task);
        let dev_decode = DecodeConfig {
            strategy: Strategy::Greedy,
            max_target_length: self.config.max_target_len,
            ..DecodeConfig::default()
        };
        let mut evaluator = |p: &ModelParameters<f32>, _step: u64| -> Result<BTreeMap<String, f64>> {
            let report = evaluate(p, &data.dev, task, &dev_decode, &self.tokenizer, &EvalContext::default())?;
            Ok(report.metrics().into_iter().map(|(k, v)| (k.to_string(), v)).collect())
        };
        let outcome = run_stage(&plan, base.clone(), &datasets, self.tokenizer.pad_id(), Some(&mut evaluator))?;
        let checkpoint = crate::trainer::select_best(&outcome.log, metric)?;
        let params = outcome.best(metric)?.clone();
        Ok(FinetuneRun { params, checkpoint })
    }

    fn test_report(&self, run: &FinetuneRun, task: &TaskSpec, data: &TaskData, ctx: &EvalContext) -> Result<MetricReport> {
        let mut decode = DecodeConfig::for_task(task);
        decode.beam_width = self.config.beam_width;
        decode.max_target_length = self.config.max_target_len;
        evaluate(&run.params, &data.test, task, &decode, &self.tokenizer, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_one(
        &self,
        bundle: &mut ReportBundle,
        base: (&ModelParameters<f32>, &str),
        variant_label: &str,
        group: &str,
        prompt: PromptVariant,
        task: &TaskSpec,
        train: &TaskData,
        seed: u64,
        steps: Option<u64>,
    ) -> Result<()> {
        let run = self.finetune(base.0, task, train, seed, steps)?;
        let ctx = EvalContext {
            seed,
            checkpoint: format!("{}/{}/{}/seed{seed}/{}", base.1, group, task.name.replace(' ', "_"), run.checkpoint),
            split: "test".into(),
            with_macro: task.name == SIMILARITY_TASK,
        };
        let mut report = self.test_report(&run, task, train, &ctx)?;
        report.experiment = bundle.experiment.as_str().to_string();
        report.group = group.to_string();
        report.model_variant = variant_label.to_string();
        report.prompt_variant = prompt.as_str().to_string();
        bundle.reports.push(report);
        bundle.finetune_runs += 1;
        Ok(())
    }

    fn record_stage2(bundle: &mut ReportBundle, record: Option<Stage2Record>) {
        if let Some(r) = record {
            if !bundle.stage2.iter().any(|s| s.label == r.label) {
                bundle.stage2.push(r);
            }
        }
    }

    pub fn run(&self, kind: ExperimentKind) -> Result<ReportBundle> {
        let mut bundle = ReportBundle::new(kind);
        let c = &self.config;
        let variants = [ModelVariant::Ufa, ModelVariant::UfaOri];
        match kind {
            ExperimentKind::Main => {
                for name in &c.tasks {
                    let task = self.registry.require(name)?;
                    let data = self.task_data(task, PromptVariant::Full);
                    for variant in variants {
                        let (base, record) = self.base_model(variant)?;
                        let id = self.checkpoint_id(base_name(variant));
                        Self::record_stage2(&mut bundle, record);
                        for &seed in &c.seeds {
                            self.run_one(&mut bundle, (&base, &id), variant.as_str(), "full", PromptVariant::Full, task, &data, seed, None)?;
                        }
                    }
                }
            }
            ExperimentKind::Fewshot => {
                let task = self.registry.require(&c.fewshot_task)?;
                let data = self.task_data(task, PromptVariant::Full);
                let pool = self.task_data_uncapped_train(task);
                for &k in &c.fewshot_k {
                    for variant in variants {
                        let (base, record) = self.base_model(variant)?;
                        let id = self.checkpoint_id(base_name(variant));
                        Self::record_stage2(&mut bundle, record);
                        for &seed in &c.seeds {
                            let subset = TaskData {
                                train: fewshot_sample(&pool, task, k, seed)?,
                                dev: data.dev.clone(),
                                test: data.test.clone(),
                            };
                            let group = format!("k={k}");
                            self.run_one(&mut bundle, (&base, &id), variant.as_str(), &group, PromptVariant::Full, task, &subset, seed, c.fewshot_steps)?;
                        }
                    }
                }
            }
            ExperimentKind::Unseen => {
                let task = self.registry.require(SIMILARITY_TASK)?;
                let data = self.task_data(task, PromptVariant::Full);
                for variant in variants {
                    let (base, record) = self.base_model(variant)?;
                    let id = self.checkpoint_id(base_name(variant));
                    if let Some(r) = &record {
                        if r.tasks.iter().any(|t| t == SIMILARITY_TASK) {
                            return Err(Error::Contract("unseen task appears in knowledge-prompt pre-training".into()));
                        }
                        bundle.isolation_overlap = [&data.train, &data.dev, &data.test]
                            .into_iter()
                            .flatten()
                            .filter(|e| r.input_digests.contains(&input_digest(&e.input_text)))
                            .count();
                    }
                    Self::record_stage2(&mut bundle, record);
                    for &seed in &c.seeds {
                        self.run_one(&mut bundle, (&base, &id), variant.as_str(), "unseen", PromptVariant::Full, task, &data, seed, None)?;
                    }
                }
            }
            ExperimentKind::PromptAblation => {
                let (base, record) = self.base_model(ModelVariant::Ufa)?;
                let id = self.checkpoint_id("ufa");
                Self::record_stage2(&mut bundle, record);
                for name in &c.tasks {
                    let task = self.registry.require(name)?;
                    let full = self.task_data(task, PromptVariant::Full);
                    for prompt in [PromptVariant::Full, PromptVariant::NoGoal, PromptVariant::NoTask] {
                        let data = if prompt == PromptVariant::Full {
                            full.clone()
                        } else {
                            let d = self.task_data(task, prompt);
                            let (checked, bad) = self.containment(task, prompt, &full, &d);
                            bundle.containment_checked += checked;
                            bundle.containment_violations += bad;
                            d
                        };
                        for &seed in &c.seeds {
                            self.run_one(&mut bundle, (&base, &id), "ufa", prompt.as_str(), prompt, task, &data, seed, None)?;
                        }
                    }
                }
            }
            ExperimentKind::TaskAblation => {
                let mut groups: Vec<(String, Arc<ModelParameters<f32>>, String, &str)> = Vec::new();
                groups.push(("ufa_ori".into(), self.denoise_model()?, self.checkpoint_id("denoise"), "ufa_ori"));
                for (t, label) in [
                    (DOMAIN_TASK, "+domain"),
                    (INTENT_TASK, "+intent"),
                    (SUMMARY_TASK, "+summary"),
                    (GENERATION_TASK, "+dialogue"),
                ] {
                    let (p, r) = self.ufa_model(&[t])?;
                    let id = r.checkpoint.clone();
                    Self::record_stage2(&mut bundle, Some(r));
                    groups.push((label.into(), p, id, "ufa"));
                }
                let (p, r) = self.ufa_model(&PRETRAIN_TASKS)?;
                let id = r.checkpoint.clone();
                Self::record_stage2(&mut bundle, Some(r));
                groups.push(("ufa".into(), p, id, "ufa"));
                for name in [INTENT_TASK, GENERATION_TASK] {
                    let task = self.registry.require(name)?;
                    let data = self.task_data(task, PromptVariant::Full);
                    for (label, base, id, variant) in &groups {
                        for &seed in &c.seeds {
                            self.run_one(&mut bundle, (base, id), variant, label, PromptVariant::Full, task, &data, seed, None)?;
                        }
                    }
                }
            }
        }
        Ok(bundle)
    }

    fn task_data_uncapped_train(&self, task: &TaskSpec) -> Vec<PromptedExample> {
        self.build_records(&self.gold.0, task, PromptVariant::Full)
    }

    /// Fine-tunes one variant on one task with the configured seed and
    /// returns the selected parameters with their checkpoint id.
    pub fn finetune_single(
        &self,
        variant: ModelVariant,
        task: &TaskSpec,
        prompt: PromptVariant,
        seed: u64,
    ) -> Result<(ModelParameters<f32>, String)> {
        let (base, _) = self.base_model(variant)?;
        let data = self.task_data(task, prompt);
        let run = self.finetune(&base, task, &data, seed, None)?;
        Ok((run.params, format!("{}/{}", self.checkpoint_id(base_name(variant)), run.checkpoint)))
    }

    /// Test-split report for already fine-tuned parameters.
    pub fn evaluate_params(
        &self,
        params: &ModelParameters<f32>,
        task: &TaskSpec,
        prompt: PromptVariant,
        ctx: &EvalContext,
    ) -> Result<MetricReport> {
        let data = self.task_data(task, prompt);
        let run = FinetuneRun {
            params: params.clone(),
            checkpoint: ctx.checkpoint.clone(),
        };
        let mut report = self.test_report(&run, task, &data, ctx)?;
        report.prompt_variant = prompt.as_str().to_string();
        Ok(report)
    }
}

fn base_name(variant: ModelVariant) -> &'static str {
    match variant {
        ModelVariant::Ufa => "ufa",
        ModelVariant::UfaOri => "denoise",
    }
}

/// At most `limit` examples chosen uniformly by `seed`, in dataset order.
fn limited(examples: Vec<PromptedExample>, limit: usize, seed: u64) -> Vec<PromptedExample> {
    if examples.len() <= limit {
        return examples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, examples.len(), limit).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<PromptedExample>> = examples.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Loads the workspace and runs the configured experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    let ws = Workspace::load(config.clone())?;
    ws.run(config.experiment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::INTENT_TASK;

    fn ex(task: &str, target: &str, i: usize) -> PromptedExample {
        PromptedExample {
            task_name: task.into(),
            input_text: format!("input {i}"),
            target_text: target.into(),
            input_ids: vec![3],
            target_ids: vec![4, 1],
        }
    }

    #[test]
    fn config_parsing_and_unknown_keys() {
        let c = ExperimentConfig::parse(
            "# desk run\nexperiment = fewshot\nseeds = 1, 2\nfewshot_k = 5,10\nd_model = 64  # smaller\nprompt_variant = no_goal\n",
        )
        .unwrap();
        assert_eq!(c.experiment, ExperimentKind::Fewshot);
        assert_eq!(c.seeds, [1, 2]);
        assert_eq!(c.fewshot_k, [5, 10]);
        assert_eq!(c.d_model, 64);
        assert_eq!(c.prompt_variant, PromptVariant::NoGoal);

        let err = ExperimentConfig::parse("colour = blue\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "colour"));
        assert!(matches!(ExperimentConfig::parse("seeds = a\n").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(ExperimentConfig::parse("seeds =\n").is_err());
        assert!(ExperimentConfig::parse("fewshot_k = 0\n").is_err());
        assert!(ExperimentConfig::parse("experiment = everything\n").is_err());
        assert!(ExperimentConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn fewshot_sampling() {
        let reg = TaskRegistry::standard();
        let task = reg.get(INTENT_TASK).unwrap();
        let labels = task.normalized_labels().unwrap();
        let pool: Vec<PromptedExample> = (0..labels.len() * 8).map(|i| ex(INTENT_TASK, &labels[i % labels.len()], i)).collect();
        let s = fewshot_sample(&pool, task, 5, 3).unwrap();
        assert_eq!(s.len(), 5 * labels.len());
        for l in &labels {
            assert_eq!(s.iter().filter(|e| &e.target_text == l).count(), 5);
        }
        assert_eq!(s, fewshot_sample(&pool, task, 5, 3).unwrap());
        assert_ne!(s, fewshot_sample(&pool, task, 5, 4).unwrap());

        let mut kept = 0;
        let short: Vec<PromptedExample> = pool
            .iter()
            .filter(|e| {
                if e.target_text != labels[2] {
                    return true;
                }
                kept += 1;
                kept <= 3
            })
            .cloned()
            .collect();
        let err = fewshot_sample(&short, task, 5, 3).unwrap_err();
        assert!(matches!(err, Error::Sampling { ref class, requested: 5, .. } if class == &labels[2]));

        let gen = reg.get(GENERATION_TASK).unwrap();
        let gen_pool: Vec<PromptedExample> = (0..30).map(|i| ex(GENERATION_TASK, "ok", i)).collect();
        assert_eq!(fewshot_sample(&gen_pool, gen, 20, 1).unwrap().len(), 20);
        assert!(fewshot_sample(&gen_pool, gen, 31, 1).is_err());
    }

    #[test]
    fn median_and_rendering() {
        assert_eq!(median(&[0.5, 0.7, 0.6]), Some(0.6));
        assert_eq!(median(&[]), None);
        assert_eq!(fmt_value(0.6), "0.6");
        let mk = |seed, acc| MetricReport {
            experiment: "main".into(),
            task_name: INTENT_TASK.into(),
            accuracy: Some(acc),
            seed,
            group: "full".into(),
            model_variant: "ufa".into(),
            prompt_variant: "full".into(),
            ..Default::default()
        };
        let text = render_report(&[mk(1, 0.5), mk(2, 0.7), mk(3, 0.6)]);
        assert_eq!(text.matches("==").count(), 2);
        assert!(text.contains("0.6 (0.5, 0.7, 0.6)"), "{text}");

        let mut gen = mk(1, 0.0);
        gen.task_name = GENERATION_TASK.into();
        gen.accuracy = None;
        gen.bleu2 = Some(0.25);
        let text = render_report(&[mk(1, 0.5), gen]);
        let intent_row = text.lines().find(|l| l.starts_with(INTENT_TASK)).unwrap();
        assert!(intent_row.trim_end().ends_with('-'), "{text}");
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        match Workspace::load(c) {
            Err(Error::Orchestration(missing)) => {
                assert_eq!(missing.len(), 4);
                assert!(missing[3].contains("train-tokenizer"));
            }
            other => panic!("expected an orchestration error, got {:?}", other.err()),
        }
    }

    #[test]
    fn limited_keeps_order_and_is_seeded() {
        let pool: Vec<PromptedExample> = (0..50).map(|i| ex(INTENT_TASK, "x", i)).collect();
        let a = limited(pool.clone(), 10, 9);
        assert_eq!(a.len(), 10);
        assert_eq!(a, limited(pool.clone(), 10, 9));
        let idx: Vec<usize> = a.iter().map(|e| e.input_text[6..].parse().unwrap()).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(limited(pool.clone(), 80, 9).len(), 50);
    }
}
