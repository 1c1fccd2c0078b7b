//! Prompt rendering and per-task text-to-text example construction.
//!
//! Every input follows one pattern:
//!
//! ```text
//! [TASK] <task name> [DIALOGUE] <role-tagged utterances> [GOAL] <goal description>
//! ```
//!
//! The task registry holds the name/goal strings so that pre-training and
//! fine-tuning always render the same prompts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::corpus::{DialogueRecord, Role, SentencePair, Taxonomy, Utterance, NEGATIVE, POSITIVE};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenizerModel, AGENT, CUSTOMER, DEFAULT_SPECIAL_TOKENS, DIALOGUE, GOAL, TASK};

pub const DOMAIN_TASK: &str = "domain classification";
pub const INTENT_TASK: &str = "intent detection";
pub const GENERATION_TASK: &str = "dialogue generation";
pub const SUMMARY_TASK: &str = "summarization";
pub const SIMILARITY_TASK: &str = "sentence similarity";
pub const DENOISE_TASK: &str = "denoise";

pub const DOMAIN_GOAL: &str = "the domain of the dialogue is";
pub const INTENT_GOAL: &str = "the intent of the customer is";
pub const GENERATION_GOAL: &str = "the response of the agent is";
pub const SUMMARY_GOAL: &str = "the summary of the dialogue is";
pub const SIMILARITY_GOAL: &str = "the relationship of the input sentences is";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuilderKind {
    FirstTwoCustomer,
    AgentSegments,
    FullHistorySummary,
    SentencePair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetField {
    Domain,
    Intent,
    Summary,
    AgentUtterance,
    PairLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub goal_description: String,
    pub builder_kind: BuilderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<Vec<String>>,
    pub target_field: TargetField,
}

impl TaskSpec {
    pub fn is_classification(&self) -> bool {
        self.label_set.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        for (field, text) in [("name", &self.name), ("goal_description", &self.goal_description)] {
            if text.trim().is_empty() {
                return Err(Error::Registry(format!("task {field} is empty")));
            }
            if text.contains(['\n', '\r']) {
                return Err(Error::Registry(format!("task {field} `{text}` contains a newline")));
            }
            if let Some(tok) = DEFAULT_SPECIAL_TOKENS.iter().find(|t| text.contains(*t)) {
                return Err(Error::Registry(format!("task {field} `{text}` contains {tok}")));
            }
        }
        if let Some(labels) = &self.label_set {
            if labels.is_empty() {
                return Err(Error::Registry(format!("task `{}` has an empty label set", self.name)));
            }
            if let Some(bad) = labels.iter().find(|l| normalize_label(l).is_empty()) {
                return Err(Error::Registry(format!(
                    "task `{}`: label `{bad}` is empty after normalization",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// The normalized label set, when this is a classification task.
    pub fn normalized_labels(&self) -> Option<Vec<String>> {
        self.label_set
            .as_ref()
            .map(|ls| ls.iter().map(|l| normalize_label(l)).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    Full,
    NoGoal,
    NoTask,
}

impl PromptVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Full => "full",
            PromptVariant::NoGoal => "no_goal",
            PromptVariant::NoTask => "no_task",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(PromptVariant::Full),
            "no_goal" => Some(PromptVariant::NoGoal),
            "no_task" => Some(PromptVariant::NoTask),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptedExample {
    pub task_name: String,
    pub input_text: String,
    pub target_text: String,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

/// Role-tagged rendering: `[CUSTOMER] text [AGENT] text ...`.
pub fn render_dialogue_history(utterances: &[Utterance]) -> Result<String> {
    if utterances.is_empty() {
        return Err(Error::Contract("cannot render an empty dialogue history".into()));
    }
    let parts: Vec<String> = utterances
        .iter()
        .map(|u| {
            let tag = match u.role {
                Role::Customer => CUSTOMER,
                Role::Agent => AGENT,
            };
            format!("{tag} {}", u.text)
        })
        .collect();
    Ok(parts.join(" "))
}

fn prompt_prefix(task: &TaskSpec, variant: PromptVariant) -> String {
    match variant {
        PromptVariant::NoTask => DIALOGUE.to_string(),
        _ => format!("{TASK} {} {DIALOGUE}", task.name),
    }
}

fn prompt_suffix(task: &TaskSpec, variant: PromptVariant) -> Option<String> {
    match variant {
        PromptVariant::NoGoal => None,
        _ => Some(format!("{GOAL} {}", task.goal_description)),
    }
}

pub fn build_prompt(task: &TaskSpec, dialogue_text: &str, variant: PromptVariant) -> String {
    let mut s = prompt_prefix(task, variant);
    s.push(' ');
    s.push_str(dialogue_text);
    if let Some(suffix) = prompt_suffix(task, variant) {
        s.push(' ');
        s.push_str(&suffix);
    }
    s
}

/// Removes Unicode punctuation, collapses whitespace, trims and lowercases.
pub fn normalize_label(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|&c| !is_punctuation(c))
        .collect::<String>()
        .to_lowercase();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Ordered collection of task specs. Ships with the four dialogue tasks and
/// sentence similarity.
#[derive(Clone, Debug)]
pub struct TaskRegistry {
    specs: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn empty() -> Self {
        Self { specs: Vec::new() }
    }

    pub fn builtin(taxonomy: &Taxonomy) -> Self {
        let specs = vec![
            TaskSpec {
                name: DOMAIN_TASK.into(),
                goal_description: DOMAIN_GOAL.into(),
                builder_kind: BuilderKind::FirstTwoCustomer,
                label_set: Some(taxonomy.domains.clone()),
                target_field: TargetField::Domain,
            },
            TaskSpec {
                name: INTENT_TASK.into(),
                goal_description: INTENT_GOAL.into(),
                builder_kind: BuilderKind::FirstTwoCustomer,
                label_set: Some(taxonomy.intents.clone()),
                target_field: TargetField::Intent,
            },
            TaskSpec {
                name: GENERATION_TASK.into(),
                goal_description: GENERATION_GOAL.into(),
                builder_kind: BuilderKind::AgentSegments,
                label_set: None,
                target_field: TargetField::AgentUtterance,
            },
            TaskSpec {
                name: SUMMARY_TASK.into(),
                goal_description: SUMMARY_GOAL.into(),
                builder_kind: BuilderKind::FullHistorySummary,
                label_set: None,
                target_field: TargetField::Summary,
            },
            TaskSpec {
                name: SIMILARITY_TASK.into(),
                goal_description: SIMILARITY_GOAL.into(),
                builder_kind: BuilderKind::SentencePair,
                label_set: Some(vec![POSITIVE.into(), NEGATIVE.into()]),
                target_field: TargetField::PairLabel,
            },
        ];
        Self { specs }
    }

    pub fn standard() -> Self {
        Self::builtin(&Taxonomy::standard())
    }

    pub fn register(mut self, spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        if self.get(&spec.name).is_some() {
            return Err(Error::Registry(format!("task `{}` is already registered", spec.name)));
        }
        self.specs.push(spec);
        Ok(self)
    }

    /// Replaces same-named specs and registers new ones.
    pub fn with_overrides(mut self, overrides: Vec<TaskSpec>) -> Result<Self> {
        for spec in overrides {
            spec.validate()?;
            match self.specs.iter_mut().find(|s| s.name == spec.name) {
                Some(slot) => *slot = spec,
                None => self.specs.push(spec),
            }
        }
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&TaskSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TaskSpec> {
        self.get(name)
            .ok_or_else(|| Error::Registry(format!("unknown task `{name}`")))
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Reads a task registry override file: one JSON TaskSpec per line.
pub fn load_task_specs(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: TaskSpec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            field: "task_spec".into(),
            message: e.to_string(),
        })?;
        out.push(spec);
    }
    Ok(out)
}

/// Counts of examples skipped while building, keyed by reason.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildWarnings {
    pub skipped: BTreeMap<String, usize>,
}

impl BuildWarnings {
    pub fn count(&mut self, reason: impl Into<String>) {
        *self.skipped.entry(reason.into()).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Tokenizes prompts under fixed source/target length limits.
pub struct ExampleBuilder<'a> {
    pub tokenizer: &'a TokenizerModel,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl<'a> ExampleBuilder<'a> {
    pub fn new(tokenizer: &'a TokenizerModel, max_source_len: usize, max_target_len: usize) -> Self {
        Self {
            tokenizer,
            max_source_len,
            max_target_len,
        }
    }

    /// Builds the examples `task` derives from one dialogue. Records lacking
    /// what the task needs produce no examples and a counted warning.
    pub fn build(
        &self,
        record: &DialogueRecord,
        task: &TaskSpec,
        variant: PromptVariant,
        warnings: &mut BuildWarnings,
    ) -> Vec<PromptedExample> {
        let u = &record.utterances;
        let mut out = Vec::new();
        match task.builder_kind {
            BuilderKind::FirstTwoCustomer => {
                let label = match task.target_field {
                    TargetField::Domain => record.domain_label.as_deref(),
                    TargetField::Intent => record.intent_label.as_deref(),
                    TargetField::Summary => record.summary.as_deref(),
                    _ => None,
                };
                let Some(label) = label else {
                    warnings.count(format!("{}: missing {:?} label", task.name, task.target_field));
                    return out;
                };
                let customers: Vec<Utterance> = u.iter().filter(|x| x.role == Role::Customer).take(2).cloned().collect();
                self.push_labeled(task, variant, &customers, label, warnings, &mut out);
            }
            BuilderKind::AgentSegments => {
                for (i, utt) in u.iter().enumerate() {
                    if utt.role != Role::Agent {
                        continue;
                    }
                    if i == 0 {
                        warnings.count(format!("{}: agent turn without context", task.name));
                        continue;
                    }
                    let target = self.tokenizer.normalize(&utt.text);
                    self.push_free(task, variant, &u[..i], &target, warnings, &mut out);
                }
            }
            BuilderKind::FullHistorySummary => {
                let Some(summary) = record.summary.as_deref() else {
                    warnings.count(format!("{}: missing summary", task.name));
                    return out;
                };
                let target = self.tokenizer.normalize(summary);
                self.push_free(task, variant, u, &target, warnings, &mut out);
            }
            BuilderKind::SentencePair => {
                warnings.count(format!("{}: dialogue records carry no sentence pair", task.name));
            }
        }
        out
    }

    pub fn build_pair(
        &self,
        pair: &SentencePair,
        task: &TaskSpec,
        variant: PromptVariant,
        warnings: &mut BuildWarnings,
    ) -> Option<PromptedExample> {
        if task.builder_kind != BuilderKind::SentencePair {
            warnings.count(format!("{}: not a sentence-pair task", task.name));
            return None;
        }
        let sentences = [Utterance::customer(pair.first.clone()), Utterance::customer(pair.second.clone())];
        let mut out = Vec::new();
        self.push_labeled(task, variant, &sentences, &pair.label, warnings, &mut out);
        out.pop()
    }

    fn push_labeled(
        &self,
        task: &TaskSpec,
        variant: PromptVariant,
        context: &[Utterance],
        label: &str,
        warnings: &mut BuildWarnings,
        out: &mut Vec<PromptedExample>,
    ) {
        let target = normalize_label(label);
        if let Some(labels) = task.normalized_labels() {
            if !labels.contains(&target) {
                warnings.count(format!("{}: label outside the label set", task.name));
                return;
            }
        }
        self.push_free(task, variant, context, &target, warnings, out);
    }

    fn push_free(
        &self,
        task: &TaskSpec,
        variant: PromptVariant,
        context: &[Utterance],
        target: &str,
        warnings: &mut BuildWarnings,
        out: &mut Vec<PromptedExample>,
    ) {
        let Ok(history) = render_dialogue_history(context) else {
            warnings.count(format!("{}: empty context", task.name));
            return;
        };
        match self.assemble(task, variant, &history, target) {
            Some(ex) => out.push(ex),
            None => warnings.count(format!("{}: prompt does not fit the source length", task.name)),
        }
    }

    /// Fits the prompt into the source limit by dropping the oldest
    /// dialogue words; the task and goal segments are never truncated.
    /// The word budget is the one the full prompt leaves, so every variant
    /// keeps the same dialogue words. Targets longer than the target limit
    /// lose trailing words.
    pub fn assemble(
        &self,
        task: &TaskSpec,
        variant: PromptVariant,
        history: &str,
        target: &str,
    ) -> Option<PromptedExample> {
        let tok = self.tokenizer;
        let prefix = prompt_prefix(task, PromptVariant::Full);
        let suffix = prompt_suffix(task, PromptVariant::Full);
        let fixed = tok.encode(&prefix).len() + suffix.as_deref().map_or(0, |s| tok.encode(s).len());
        let budget = self.max_source_len.checked_sub(fixed)?;

        let words: Vec<&str> = history.split(' ').filter(|w| !w.is_empty()).collect();
        let lens: Vec<usize> = words.iter().map(|w| tok.encode(w).len()).collect();
        let mut total: usize = lens.iter().sum();
        let mut start = 0;
        while total > budget && start < words.len() {
            total -= lens[start];
            start += 1;
        }
        if start == words.len() {
            return None;
        }
        let input_text = build_prompt(task, &words[start..].join(" "), variant);
        let input_ids = tok.encode(&input_text);
        if input_ids.len() > self.max_source_len {
            return None;
        }

        let mut target_words: Vec<&str> = target.split(' ').filter(|w| !w.is_empty()).collect();
        let mut target_ids = tok.encode(&target_words.join(" "));
        while target_ids.len() + 1 > self.max_target_len && !target_words.is_empty() {
            target_words.pop();
            target_ids = tok.encode(&target_words.join(" "));
        }
        if self.max_target_len == 0 {
            return None;
        }
        target_ids.push(tok.eos_id());
        Some(PromptedExample {
            task_name: task.name.clone(),
            input_text,
            target_text: target_words.join(" "),
            input_ids,
            target_ids,
        })
    }
}
