//! Golden fixtures stored as JSONL data files and replayed against the
//! prompt renderer and the metrics.
//!
//! Every fixture names its `origin`; a line without one fails to parse.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::corpus::{Role, Utterance};
use crate::decode_eval::{bleu2, exact_match_accuracy, rouge, RougeVariant};
use crate::error::{Error, Result};
use crate::promptkit::{build_prompt, render_dialogue_history, PromptVariant, TaskRegistry};

/// Where a fixture's expected value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// The prompt layout the framework defines.
    ReferenceFormat,
    /// Follows from counting or definitions alone.
    Arithmetic,
    /// Computed by exhaustive enumeration outside this crate.
    Enumerated,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenFixture {
    pub name: String,
    pub kind: FixtureKind,
    pub origin: Origin,
    pub input: Value,
    pub expected: Value,
    #[serde(default)]
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Prompt,
    Overlap,
    ExactMatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureFailure {
    pub name: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixtureReport {
    pub passed: Vec<String>,
    pub failures: Vec<FixtureFailure>,
}

impl FixtureReport {
    pub fn is_pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} passed, {} failed", self.passed.len(), self.failures.len());
        for f in &self.failures {
            s.push_str(&format!("\n  {}: expected {} got {}", f.name, f.expected, f.actual));
        }
        s
    }
}

/// Directory of the fixture set shipped with the crate.
pub fn default_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("v1")
}

pub fn load_fixtures(path: impl AsRef<Path>) -> Result<Vec<GoldenFixture>> {
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
            field: "fixture".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads every `*.jsonl` file in `dir`, in file-name order.
pub fn load_fixture_dir(dir: impl AsRef<Path>) -> Result<Vec<GoldenFixture>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load_fixtures(f)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct UtteranceIn {
    role: Role,
    text: String,
}

#[derive(Deserialize)]
struct PromptInput {
    task: String,
    variant: String,
    utterances: Vec<UtteranceIn>,
}

#[derive(Deserialize)]
struct PairInput {
    prediction: String,
    reference: String,
}

fn field<T: for<'de> Deserialize<'de>>(name: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("fixture `{name}`: {e}")))
}

fn number(name: &str, expected: &Value, key: &str) -> Result<f64> {
    expected
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Format(format!("fixture `{name}` lacks a numeric `{key}`")))
}

/// Replays each fixture through its operation. Prompts must match byte
/// for byte; numbers must agree within the fixture's tolerance.
pub fn verify_fixtures(fixtures: &[GoldenFixture], registry: &TaskRegistry) -> Result<FixtureReport> {
    let mut report = FixtureReport::default();
    for fx in fixtures {
        let mut checks: Vec<(String, String, bool)> = Vec::new();
        match fx.kind {
            FixtureKind::Prompt => {
                let input: PromptInput = field(&fx.name, &fx.input)?;
                let task = registry.require(&input.task)?;
                let variant = PromptVariant::parse(&input.variant)
                    .ok_or_else(|| Error::Format(format!("fixture `{}`: unknown variant", fx.name)))?;
                let utterances: Vec<Utterance> = input
                    .utterances
                    .into_iter()
                    .map(|u| Utterance { role: u.role, text: u.text })
                    .collect();
                let actual = build_prompt(task, &render_dialogue_history(&utterances)?, variant);
                let expected = fx
                    .expected
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Format(format!("fixture `{}` lacks `text`", fx.name)))?;
                checks.push((expected.to_string(), actual.clone(), actual == expected));
            }
            FixtureKind::Overlap => {
                let input: PairInput = field(&fx.name, &fx.input)?;
                let (p, r) = (input.prediction.as_str(), input.reference.as_str());
                let actual = [
                    ("bleu2", bleu2(&[p], &[r])?),
                    ("rouge1", rouge(p, r, RougeVariant::One)?.f1),
                    ("rouge2", rouge(p, r, RougeVariant::Two)?.f1),
                    ("rougeL", rouge(p, r, RougeVariant::L)?.f1),
                ];
                for (key, value) in actual {
                    let want = number(&fx.name, &fx.expected, key)?;
                    checks.push((format!("{key}={want}"), format!("{key}={value}"), (want - value).abs() <= fx.tolerance));
                }
            }
            FixtureKind::ExactMatch => {
                let input: PairInput = field(&fx.name, &fx.input)?;
                let value = exact_match_accuracy(&[input.prediction], &[input.reference])?;
                let want = number(&fx.name, &fx.expected, "accuracy")?;
                checks.push((want.to_string(), value.to_string(), (want - value).abs() <= fx.tolerance));
            }
        }
        let mut ok = true;
        for (expected, actual, pass) in checks {
            if !pass {
                ok = false;
                report.failures.push(FixtureFailure {
                    name: fx.name.clone(),
                    expected,
                    actual,
                });
            }
        }
        if ok {
            report.passed.push(fx.name.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_fixtures_pass() {
        let fixtures = load_fixture_dir(default_fixture_dir()).unwrap();
        assert!(fixtures.len() >= 35);
        let report = verify_fixtures(&fixtures, &TaskRegistry::standard()).unwrap();
        assert!(report.is_pass(), "{}", report.summary());
    }

    #[test]
    fn empty_set_passes_trivially() {
        let report = verify_fixtures(&[], &TaskRegistry::standard()).unwrap();
        assert!(report.is_pass());
        assert!(report.passed.is_empty());
    }

    #[test]
    fn fixtures_without_origin_are_rejected() {
        let line = r#"{"name":"x","kind":"exact_match","input":{"prediction":"a","reference":"a"},"expected":{"accuracy":1.0}}"#;
        assert!(serde_json::from_str::<GoldenFixture>(line).is_err());
    }

    #[test]
    fn mismatch_names_the_fixture() {
        let line = r#"{"name":"wrong","kind":"overlap","origin":"arithmetic","input":{"prediction":"the cat","reference":"the dog"},"expected":{"bleu2":0.5,"rouge1":0.5,"rouge2":0.0,"rougeL":0.5},"tolerance":1e-9}"#;
        let fx: GoldenFixture = serde_json::from_str(line).unwrap();
        let report = verify_fixtures(&[fx], &TaskRegistry::standard()).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].name, "wrong");
        assert!(report.failures[0].expected.starts_with("bleu2"));
    }
}
