//! Autoregressive decoding and the evaluation metrics: exact-match
//! accuracy, macro P/R/F1, corpus BLEU-2 and ROUGE-1/2/L.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoded, ModelParameters, Network, TokenBatch};
use crate::promptkit::{normalize_label, BuilderKind, PromptedExample, TargetField, TaskSpec};
use crate::tensor::{Float, Tape, Var};
use crate::tokenizer::TokenizerModel;

const EOS_ID: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub max_target_length: usize,
    pub length_penalty: f64,
    /// Id that terminates a hypothesis.
    pub eos_id: u32,
    /// Inputs decoded together under greedy search.
    pub batch_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: 4,
            max_target_length: 100,
            length_penalty: 1.0,
            eos_id: EOS_ID,
            batch_size: 32,
        }
    }
}

impl DecodeConfig {
    /// Greedy for classification tasks, beam search of width 4 otherwise.
    pub fn for_task(task: &TaskSpec) -> Self {
        let strategy = if task.is_classification() {
            Strategy::Greedy
        } else {
            Strategy::Beam
        };
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam_width", "must be at least 1"));
        }
        if self.max_target_length == 0 {
            return Err(Error::config("max_target_length", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Decodes one input; the terminating `<eos>` is not part of the output.
pub fn decode<T: Float>(params: &ModelParameters<T>, input_ids: &[u32], config: &DecodeConfig) -> Result<Vec<u32>> {
    Ok(decode_many(params, &[input_ids], config)?.remove(0))
}

/// Decodes every input in order. Greedy search runs inputs in batches;
/// beam search runs one input at a time with the beams as a batch.
pub fn decode_many<T: Float>(
    params: &ModelParameters<T>,
    inputs: &[&[u32]],
    config: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    config.validate()?;
    let max_len = config.max_target_length.min(params.config().max_target_len);
    let mut out = Vec::with_capacity(inputs.len());
    match config.strategy {
        Strategy::Greedy => {
            for chunk in inputs.chunks(config.batch_size) {
                out.extend(greedy_batch(params, chunk, max_len, config.eos_id)?);
            }
        }
        Strategy::Beam => {
            for input in inputs {
                out.push(beam_search(params, input, max_len, config)?);
            }
        }
    }
    Ok(out)
}

struct Session<'a, T: Float> {
    params: &'a ModelParameters<T>,
    tape: Tape<T>,
    vars: Vec<Var>,
    enc: Encoded,
    mark: usize,
}

impl<'a, T: Float> Session<'a, T> {
    fn new(params: &'a ModelParameters<T>, input: &TokenBatch) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let enc = Network::new(params, &vars, None).encode(&mut tape, input)?;
        let mark = tape.len();
        Ok(Self {
            params,
            tape,
            vars,
            enc,
            mark,
        })
    }

    /// Log-probabilities of the next token for each row of `prefixes`.
    fn next_log_probs(&mut self, prefixes: &TokenBatch) -> Result<Vec<Vec<f64>>> {
        let logits = Network::new(self.params, &self.vars, None).decode(&mut self.tape, &self.enc, prefixes)?;
        let value = self.tape.value(logits);
        let v = self.params.config().vocab_size;
        let t = prefixes.cols;
        let rows = (0..prefixes.rows)
            .map(|r| {
                let row = &value.data()[(r * t + t - 1) * v..(r * t + t) * v];
                log_softmax(row)
            })
            .collect();
        self.tape.truncate(self.mark);
        Ok(rows)
    }
}

fn log_softmax<T: Float>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.to_f64_lossy() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x.to_f64_lossy() - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn greedy_batch<T: Float>(params: &ModelParameters<T>, inputs: &[&[u32]], max_len: usize, eos: u32) -> Result<Vec<Vec<u32>>> {
    let batch = TokenBatch::from_rows(inputs, 0);
    let mut session = Session::new(params, &batch)?;
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); inputs.len()];
    let mut done = vec![false; inputs.len()];
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = outputs
            .iter()
            .map(|o| {
                let mut p = Vec::with_capacity(step + 1);
                p.push(0);
                p.extend(o.iter().copied().chain(std::iter::repeat(0)).take(step));
                p
            })
            .collect();
        let lp = session.next_log_probs(&TokenBatch::from_rows(&prefixes, 0))?;
        for (r, row) in lp.iter().enumerate() {
            if done[r] {
                continue;
            }
            let tok = argmax(row) as u32;
            if tok == eos {
                done[r] = true;
            } else {
                outputs[r].push(tok);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}

fn beam_search<T: Float>(params: &ModelParameters<T>, input: &[u32], max_len: usize, config: &DecodeConfig) -> Result<Vec<u32>> {
    let width = config.beam_width;
    let batch = TokenBatch::from_rows(&vec![input; width], 0);
    let mut session = Session::new(params, &batch)?;
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64, usize)> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<u32>> = (0..width)
            .map(|i| {
                let (toks, _) = &alive[i.min(alive.len() - 1)];
                std::iter::once(0).chain(toks.iter().copied()).collect()
            })
            .collect();
        let lp = session.next_log_probs(&TokenBatch::from_rows(&prefixes, 0))?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * lp[0].len());
        for (b, (_, score)) in alive.iter().enumerate() {
            for (v, &l) in lp[b].iter().enumerate() {
                candidates.push((score + l, b, v as u32));
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(width);
        for &(score, b, v) in candidates.iter().take(width) {
            let toks = &alive[b].0;
            if v == config.eos_id {
                finished.push((toks.clone(), score, toks.len() + 1));
            } else {
                let mut t = toks.clone();
                t.push(v);
                next.push((t, score));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    for (toks, score) in alive {
        let len = toks.len();
        finished.push((toks, score, len));
    }
    let normalized = |&(_, score, len): &(Vec<u32>, f64, usize)| score / (len.max(1) as f64).powf(config.length_penalty);
    let mut best = 0;
    for i in 1..finished.len() {
        if normalized(&finished[i]) > normalized(&finished[best]) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best).0)
}

/// Whitespace tokens, with every CJK ideograph split into its own token.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

pub fn exact_match_accuracy<S: AsRef<str>, G: AsRef<str>>(predictions: &[S], gold: &[G]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("accuracy over zero examples".into()));
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| normalize_label(p.as_ref()) == normalize_label(g.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(pred: &[String], reference: &[String], n: usize) -> usize {
    let r = ngrams(reference, n);
    ngrams(pred, n)
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus BLEU over 1- and 2-grams with uniform weights and no smoothing.
pub fn bleu2<S: AsRef<str>, R: AsRef<str>>(predictions: &[S], references: &[R]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Contract("BLEU needs one reference per prediction".into()));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("BLEU over an empty corpus".into()));
    }
    let mut matches = [0usize; 2];
    let mut totals = [0usize; 2];
    let (mut pred_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        let (p, r) = (metric_tokens(p.as_ref()), metric_tokens(r.as_ref()));
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=2 {
            matches[n - 1] += clipped_overlap(&p, &r, n);
            totals[n - 1] += p.len().saturating_sub(n - 1);
        }
    }
    if pred_len == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..2).map(|i| (matches[i] as f64 / totals[i] as f64).ln()).sum::<f64>() / 2.0;
    let bp = if pred_len < ref_len {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, pred: usize, reference: usize) -> Self {
        let precision = if pred == 0 { 0.0 } else { overlap as f64 / pred as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge(prediction: &str, reference: &str, variant: RougeVariant) -> Result<Prf> {
    let (p, r) = (metric_tokens(prediction), metric_tokens(reference));
    if r.is_empty() {
        return Err(Error::Contract("ROUGE needs a nonempty reference".into()));
    }
    Ok(match variant {
        RougeVariant::One => Prf::from_counts(clipped_overlap(&p, &r, 1), p.len(), r.len()),
        RougeVariant::Two => Prf::from_counts(
            clipped_overlap(&p, &r, 2),
            p.len().saturating_sub(1),
            r.len().saturating_sub(1),
        ),
        RougeVariant::L => Prf::from_counts(lcs_len(&p, &r), p.len(), r.len()),
    })
}

/// Mean per-example ROUGE F1.
pub fn corpus_rouge<S: AsRef<str>, R: AsRef<str>>(predictions: &[S], references: &[R], variant: RougeVariant) -> Result<f64> {
    if predictions.len() != references.len() || predictions.is_empty() {
        return Err(Error::Contract("ROUGE needs equal, nonempty prediction and reference lists".into()));
    }
    let mut total = 0.0;
    for (p, r) in predictions.iter().zip(references) {
        total += rouge(p.as_ref(), r.as_ref(), variant)?.f1;
    }
    Ok(total / predictions.len() as f64)
}

/// Macro-averaged precision, recall and F1 over `label_set`. Predictions
/// outside the set count as a wrong prediction for every gold class.
pub fn macro_prf<S: AsRef<str>, G: AsRef<str>, L: AsRef<str>>(predictions: &[S], gold: &[G], label_set: &[L]) -> Result<Prf> {
    if predictions.is_empty() || label_set.is_empty() || predictions.len() != gold.len() {
        return Err(Error::Contract("macro P/R/F1 needs equal, nonempty inputs and labels".into()));
    }
    let labels: Vec<String> = label_set.iter().map(|l| normalize_label(l.as_ref())).collect();
    let preds: Vec<String> = predictions.iter().map(|p| normalize_label(p.as_ref())).collect();
    let golds: Vec<String> = gold.iter().map(|g| normalize_label(g.as_ref())).collect();
    if let Some(g) = golds.iter().find(|g| !labels.contains(g)) {
        return Err(Error::Contract(format!("gold label `{g}` is outside the label set")));
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for label in &labels {
        let tp = preds.iter().zip(&golds).filter(|(p, g)| *p == label && *g == label).count();
        let predicted = preds.iter().filter(|p| *p == label).count();
        let actual = golds.iter().filter(|g| *g == label).count();
        let c = Prf::from_counts(tp, predicted, actual);
        sp += c.precision;
        sr += c.recall;
        sf += c.f1;
    }
    let k = labels.len() as f64;
    Ok(Prf {
        precision: sp / k,
        recall: sr / k,
        f1: sf / k,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default)]
    pub experiment: String,
    pub task_name: String,
    pub n_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    /// ROUGE values are F1 scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_measure: Option<String>,
    pub seed: u64,
    pub checkpoint: String,
    pub split: String,
    #[serde(default)]
    pub model_variant: String,
    #[serde(default)]
    pub prompt_variant: String,
    /// Free-form grouping label used by experiment reports.
    #[serde(default)]
    pub group: String,
}

impl MetricReport {
    /// Metric names and values present in this report, in display order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("bleu2", self.bleu2),
            ("rouge1", self.rouge1),
            ("rouge2", self.rouge2),
            ("rougeL", self.rouge_l),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics().into_iter().find(|(k, _)| *k == name).map(|(_, v)| v)
    }
}

/// Which metric selects checkpoints for a task.
pub fn selection_metric(task: &TaskSpec) -> &'static str {
    if task.is_classification() {
        "accuracy"
    } else {
        "rouge1"
    }
}

/// Decoded text for every example, in order.
pub fn predict<T: Float>(
    params: &ModelParameters<T>,
    examples: &[PromptedExample],
    config: &DecodeConfig,
    tokenizer: &TokenizerModel,
) -> Result<Vec<String>> {
    let inputs: Vec<&[u32]> = examples.iter().map(|e| e.input_ids.as_slice()).collect();
    decode_many(params, &inputs, config)?
        .iter()
        .map(|ids| tokenizer.decode(ids))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct EvalContext {
    pub seed: u64,
    pub checkpoint: String,
    pub split: String,
    pub with_macro: bool,
}

pub fn evaluate<T: Float>(
    params: &ModelParameters<T>,
    examples: &[PromptedExample],
    task: &TaskSpec,
    config: &DecodeConfig,
    tokenizer: &TokenizerModel,
    ctx: &EvalContext,
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Contract(format!("no examples to evaluate for `{}`", task.name)));
    }
    if let Some(e) = examples.iter().find(|e| e.task_name != task.name) {
        return Err(Error::Contract(format!(
            "example for task `{}` in a `{}` evaluation",
            e.task_name, task.name
        )));
    }
    let predictions = predict(params, examples, config, tokenizer)?;
    let references: Vec<&str> = examples.iter().map(|e| e.target_text.as_str()).collect();
    score(task, &predictions, &references, ctx)
}

/// Scores decoded predictions against references with the task's metrics.
pub fn score<S: AsRef<str>>(task: &TaskSpec, predictions: &[S], references: &[&str], ctx: &EvalContext) -> Result<MetricReport> {
    let mut report = MetricReport {
        task_name: task.name.clone(),
        n_examples: predictions.len(),
        seed: ctx.seed,
        checkpoint: ctx.checkpoint.clone(),
        split: ctx.split.clone(),
        ..Default::default()
    };
    if let Some(labels) = &task.label_set {
        report.accuracy = Some(exact_match_accuracy(predictions, references)?);
        if ctx.with_macro || task.builder_kind == BuilderKind::SentencePair {
            let prf = macro_prf(predictions, references, labels)?;
            report.macro_precision = Some(prf.precision);
            report.macro_recall = Some(prf.recall);
            report.macro_f1 = Some(prf.f1);
        }
    } else if task.target_field == TargetField::AgentUtterance {
        report.bleu2 = Some(bleu2(predictions, references)?);
        report.rouge1 = Some(corpus_rouge(predictions, references, RougeVariant::One)?);
        report.rouge_measure = Some("f1".into());
    } else {
        report.rouge1 = Some(corpus_rouge(predictions, references, RougeVariant::One)?);
        report.rouge2 = Some(corpus_rouge(predictions, references, RougeVariant::Two)?);
        report.rouge_l = Some(corpus_rouge(predictions, references, RougeVariant::L)?);
        report.rouge_measure = Some("f1".into());
    }
    Ok(report)
}

pub fn write_reports(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
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
            field: "report".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Left-aligned first column, right-aligned remaining columns.
pub fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(headers.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub const METRIC_COLUMNS: [(&str, &str); 8] = [
    ("accuracy", "Acc"),
    ("macro_precision", "P"),
    ("macro_recall", "R"),
    ("macro_f1", "F1"),
    ("bleu2", "BLEU-2"),
    ("rouge1", "ROUGE-1"),
    ("rouge2", "ROUGE-2"),
    ("rougeL", "ROUGE-L"),
];

/// One row per report, scores as percentages, "-" for absent metrics.
pub fn render_metric_table(reports: &[MetricReport]) -> String {
    let mut headers = vec!["Task", "Model"];
    headers.extend(METRIC_COLUMNS.iter().map(|(_, h)| *h));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.task_name.clone(), r.model_variant.clone()];
            row.extend(
                METRIC_COLUMNS
                    .iter()
                    .map(|(k, _)| r.metric(k).map_or("-".to_string(), |v| format!("{:.2}", v * 100.0))),
            );
            row
        })
        .collect();
    aligned_table(&headers, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::promptkit::TaskRegistry;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn exact_match_rules() {
        assert_eq!(exact_match_accuracy(&["refund!"], &["refund"]).unwrap(), 1.0);
        assert_eq!(exact_match_accuracy(&["refund order"], &["refund"]).unwrap(), 0.0);
        assert_eq!(exact_match_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert!(exact_match_accuracy(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn bleu_hand_cases() {
        assert!(close(bleu2(&["the cat sat"], &["the cat sat"]).unwrap(), 1.0));
        assert_eq!(bleu2(&["the cat"], &["the dog"]).unwrap(), 0.0);
        let p = metric_tokens("the the the");
        let r = metric_tokens("the cat");
        assert_eq!(clipped_overlap(&p, &r, 1), 1);
        assert!(bleu2::<&str, &str>(&[], &[]).is_err());
    }

    #[test]
    fn rouge_hand_cases() {
        let r1 = rouge("a b c", "a b d", RougeVariant::One).unwrap();
        assert!(close(r1.precision, 2.0 / 3.0) && close(r1.recall, 2.0 / 3.0) && close(r1.f1, 2.0 / 3.0));
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            assert_eq!(rouge("x y z", "a b c", v).unwrap().f1, 0.0);
            assert!(close(rouge("a b c", "a b c", v).unwrap().f1, 1.0));
        }
        assert!(rouge("a", "", RougeVariant::One).is_err());
    }

    #[test]
    fn macro_prf_hand_cases() {
        let labels = ["positive", "negative"];
        let perfect = macro_prf(&["positive", "negative"], &["positive", "negative"], &labels).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let all_pos = macro_prf(
            &["positive", "positive", "positive", "positive"],
            &["positive", "positive", "negative", "negative"],
            &labels,
        )
        .unwrap();
        assert!(close(all_pos.recall, 0.5));
        assert!(close(all_pos.precision, 0.25));
        let degenerate = macro_prf(&["positive"], &["positive"], &labels).unwrap();
        assert!(close(degenerate.recall, 0.5));
        let other = macro_prf(&["maybe"], &["positive"], &labels).unwrap();
        assert_eq!(other.f1, 0.0);
    }

    #[test]
    fn cjk_tokens_split_per_character() {
        assert_eq!(metric_tokens("退款 refund 订单ok"), ["退", "款", "refund", "订", "单", "ok"]);
    }

    fn tiny() -> ModelParameters<f32> {
        let c = ModelConfig {
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 30,
            relpos_buckets: 8,
            relpos_max_distance: 16,
            dropout_rate: 0.0,
            tie_embeddings: true,
            max_source_len: 32,
            max_target_len: 12,
        };
        ModelParameters::init(&c, 7).unwrap()
    }

    #[test]
    fn beam_of_one_is_greedy_and_lengths_are_bounded() {
        let p = tiny();
        let greedy = DecodeConfig {
            max_target_length: 6,
            ..Default::default()
        };
        let beam1 = DecodeConfig {
            strategy: Strategy::Beam,
            beam_width: 1,
            ..greedy.clone()
        };
        for i in 0..20u32 {
            let input = [2 + i % 25, 3 + (i * 7) % 25, 4];
            let g = decode(&p, &input, &greedy).unwrap();
            assert_eq!(g, decode(&p, &input, &beam1).unwrap());
            assert!(g.len() <= 6);
            assert_eq!(g, decode(&p, &input, &greedy).unwrap());
        }
        let beam4 = DecodeConfig {
            strategy: Strategy::Beam,
            ..greedy
        };
        assert!(decode(&p, &[5, 6, 7], &beam4).unwrap().len() <= 6);
    }

    #[test]
    fn batched_greedy_matches_single() {
        let p = tiny();
        let config = DecodeConfig {
            max_target_length: 5,
            ..Default::default()
        };
        let inputs: Vec<Vec<u32>> = (0..5u32).map(|i| (0..=i).map(|j| 3 + j).collect()).collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let batched = decode_many(&p, &refs, &config).unwrap();
        for (inp, out) in inputs.iter().zip(&batched) {
            assert_eq!(&decode(&p, inp, &config).unwrap(), out);
        }
    }

    #[test]
    fn evaluation_contracts_and_fields() {
        let reg = TaskRegistry::standard();
        let intent = reg.get(crate::promptkit::INTENT_TASK).unwrap();
        let summary = reg.get(crate::promptkit::SUMMARY_TASK).unwrap();
        let generation = reg.get(crate::promptkit::GENERATION_TASK).unwrap();
        let ctx = EvalContext::default();
        let r = score(intent, &["cancel order"], &["cancel order"], &ctx).unwrap();
        assert_eq!(r.metrics().iter().map(|m| m.0).collect::<Vec<_>>(), ["accuracy"]);
        let r = score(summary, &["a b"], &["a b"], &ctx).unwrap();
        assert_eq!(r.metrics().iter().map(|m| m.0).collect::<Vec<_>>(), ["rouge1", "rouge2", "rougeL"]);
        let r = score(generation, &["a b"], &["a b"], &ctx).unwrap();
        assert_eq!(r.metrics().iter().map(|m| m.0).collect::<Vec<_>>(), ["bleu2", "rouge1"]);

        let p = tiny();
        let tok_texts = ["hello there"];
        let tok = crate::tokenizer::train(tok_texts, &crate::tokenizer::TrainOptions::new(8 + 100 + 63 + 2)).unwrap();
        let err = evaluate(&p, &[], intent, &DecodeConfig::default(), &tok, &ctx).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn report_round_trip_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let r = MetricReport {
            task_name: "intent detection".into(),
            n_examples: 3,
            accuracy: Some(0.5),
            seed: 13,
            checkpoint: "c1".into(),
            split: "test".into(),
            model_variant: "ufa".into(),
            ..Default::default()
        };
        write_reports(&path, &[r.clone()]).unwrap();
        assert_eq!(read_reports(&path).unwrap(), vec![r.clone()]);
        let table = render_metric_table(&[r]);
        assert!(table.contains("50.00"));
        assert!(table.lines().nth(2).unwrap().contains(" -"));
    }
}
