//! Synthetic weakly-labeled customer-service dialogues: generation,
//! JSONL persistence, and stratified train/dev/test splitting.
//!
//! Dialogues follow a fixed template grammar (greeting, problem statement,
//! agent resolution, closing) so that domain, intent, summary and agent
//! responses are all learnable functions of the conversation text.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Customer,
    Agent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Customer => "customer",
            Role::Agent => "agent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
}

impl Utterance {
    pub fn customer(text: impl Into<String>) -> Self {
        Self {
            role: Role::Customer,
            text: text.into(),
        }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        Self {
            role: Role::Agent,
            text: text.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelProvenance {
    #[default]
    Weak,
    Gold,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueRecord {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub domain_label: Option<String>,
    pub intent_label: Option<String>,
    pub summary: Option<String>,
    pub label_provenance: LabelProvenance,
}

impl DialogueRecord {
    /// Checks the structural invariants: at least two utterances, both roles
    /// present, and every text nonempty and free of newlines.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.utterances.len() < 2 {
            return Err("a dialogue needs at least two utterances".into());
        }
        if !self.utterances.iter().any(|u| u.role == Role::Customer) {
            return Err("no customer utterance".into());
        }
        if !self.utterances.iter().any(|u| u.role == Role::Agent) {
            return Err("no agent utterance".into());
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(format!("utterance {i} is empty"));
            }
            if u.text.contains(['\n', '\r']) {
                return Err(format!("utterance {i} contains a newline"));
            }
        }
        Ok(())
    }

    /// Gold records may only carry labels drawn from the closed label sets.
    pub fn validate_gold(&self, taxonomy: &Taxonomy) -> std::result::Result<(), String> {
        if self.label_provenance != LabelProvenance::Gold {
            return Ok(());
        }
        if let Some(d) = &self.domain_label {
            if !taxonomy.domains.contains(d) {
                return Err(format!("gold domain label `{d}` is not in the label set"));
            }
        }
        if let Some(i) = &self.intent_label {
            if !taxonomy.intents.contains(i) {
                return Err(format!("gold intent label `{i}` is not in the label set"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut labels = Map::new();
        if let Some(d) = &self.domain_label {
            labels.insert("domain".into(), json!(d));
        }
        if let Some(i) = &self.intent_label {
            labels.insert("intent".into(), json!(i));
        }
        if let Some(s) = &self.summary {
            labels.insert("summary".into(), json!(s));
        }
        json!({
            "id": self.id,
            "utterances": self.utterances.iter()
                .map(|u| json!({"role": u.role.as_str(), "text": u.text}))
                .collect::<Vec<_>>(),
            "labels": labels,
            "provenance": match self.label_provenance {
                LabelProvenance::Weak => "weak",
                LabelProvenance::Gold => "gold",
            },
        })
    }

    /// Parses one JSONL line; `line` is the 1-based line number used in errors.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self> {
        let perr = |field: &str, message: String| Error::Parse {
            line,
            field: field.to_string(),
            message,
        };
        let value: Value = serde_json::from_str(text).map_err(|e| perr("<record>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| perr("<record>", "expected a JSON object".into()))?;

        let id = obj
            .get("id")
            .ok_or_else(|| perr("id", "missing".into()))?
            .as_str()
            .ok_or_else(|| perr("id", "expected a string".into()))?
            .to_string();

        let raw = obj
            .get("utterances")
            .ok_or_else(|| perr("utterances", "missing".into()))?
            .as_array()
            .ok_or_else(|| perr("utterances", "expected an array".into()))?;
        let mut utterances = Vec::with_capacity(raw.len());
        for (i, u) in raw.iter().enumerate() {
            let role = match u.get("role").and_then(Value::as_str) {
                Some("customer") => Role::Customer,
                Some("agent") => Role::Agent,
                Some(other) => return Err(perr("role", format!("utterance {i}: unknown role `{other}`"))),
                None => return Err(perr("role", format!("utterance {i}: missing"))),
            };
            let text = u
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| perr("text", format!("utterance {i}: missing or not a string")))?;
            utterances.push(Utterance {
                role,
                text: text.to_string(),
            });
        }

        let labels = match obj.get("labels") {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(perr("labels", "expected an object".into())),
        };
        let label = |name: &str| -> Result<Option<String>> {
            match labels.get(name) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(_) => Err(perr(name, "expected a string".into())),
            }
        };

        let label_provenance = match obj.get("provenance").and_then(Value::as_str) {
            Some("weak") => LabelProvenance::Weak,
            Some("gold") => LabelProvenance::Gold,
            Some(other) => return Err(perr("provenance", format!("unknown value `{other}`"))),
            None => return Err(perr("provenance", "missing".into())),
        };

        let record = DialogueRecord {
            id,
            utterances,
            domain_label: label("domain")?,
            intent_label: label("intent")?,
            summary: label("summary")?,
            label_provenance,
        };
        record.validate().map_err(|m| perr("utterances", m))?;
        Ok(record)
    }
}

/// Closed label sets and the phrase inventory the generator draws from.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    pub domains: Vec<String>,
    pub intents: Vec<String>,
}

struct DomainSpec {
    name: &'static str,
    items: [&'static str; 3],
}

const DOMAINS: [DomainSpec; 24] = [
    DomainSpec { name: "food delivery", items: ["pizza", "noodles", "dumplings"] },
    DomainSpec { name: "hotel booking", items: ["hotel room", "suite", "twin room"] },
    DomainSpec { name: "movie tickets", items: ["movie ticket", "cinema seat", "film pass"] },
    DomainSpec { name: "taxi service", items: ["taxi ride", "cab trip", "airport transfer"] },
    DomainSpec { name: "flower shop", items: ["bouquet", "roses", "tulips"] },
    DomainSpec { name: "grocery", items: ["vegetables", "milk", "eggs"] },
    DomainSpec { name: "pharmacy", items: ["medicine", "vitamins", "bandages"] },
    DomainSpec { name: "bike sharing", items: ["bike rental", "scooter", "bike pass"] },
    DomainSpec { name: "train travel", items: ["train ticket", "sleeper berth", "rail pass"] },
    DomainSpec { name: "air travel", items: ["flight", "plane ticket", "window seat"] },
    DomainSpec { name: "car rental", items: ["rental car", "van", "suv"] },
    DomainSpec { name: "beauty salon", items: ["haircut", "manicure", "facial"] },
    DomainSpec { name: "fitness club", items: ["gym membership", "yoga class", "spin class"] },
    DomainSpec { name: "pet care", items: ["dog grooming", "cat food", "pet sitter"] },
    DomainSpec { name: "home cleaning", items: ["house cleaning", "window washing", "carpet cleaning"] },
    DomainSpec { name: "laundry", items: ["dry cleaning", "shirt pressing", "laundry bag"] },
    DomainSpec { name: "coffee shop", items: ["latte", "espresso", "cold brew"] },
    DomainSpec { name: "bakery", items: ["birthday cake", "croissants", "bread loaf"] },
    DomainSpec { name: "electronics", items: ["headphones", "phone charger", "laptop"] },
    DomainSpec { name: "bookstore", items: ["novel", "textbook", "comic book"] },
    DomainSpec { name: "concert tickets", items: ["concert ticket", "festival pass", "vip seat"] },
    DomainSpec { name: "dental clinic", items: ["dental checkup", "teeth cleaning", "filling"] },
    DomainSpec { name: "furniture", items: ["sofa", "dining table", "bookshelf"] },
    DomainSpec { name: "bike repair", items: ["tire repair", "brake service", "chain fix"] },
];

struct ActionSpec {
    name: &'static str,
    phrases: [&'static str; 4],
    /// Agent commitment, past-tense outcome for summaries.
    promise: &'static str,
    outcome: &'static str,
}

const ACTIONS: [ActionSpec; 5] = [
    ActionSpec {
        name: "cancel",
        phrases: ["cancel", "call off", "stop", "drop"],
        promise: "cancel",
        outcome: "cancelled",
    },
    ActionSpec {
        name: "refund",
        phrases: ["get a refund for", "get my money back for", "be reimbursed for", "refund"],
        promise: "refund",
        outcome: "refunded",
    },
    ActionSpec {
        name: "track",
        phrases: ["track", "check the status of", "find out about", "follow up on"],
        promise: "check the status of",
        outcome: "checked the status of",
    },
    ActionSpec {
        name: "modify",
        phrases: ["change", "update", "modify", "edit"],
        promise: "update",
        outcome: "updated",
    },
    ActionSpec {
        name: "complain about",
        phrases: ["complain about", "report a problem with", "raise an issue with", "file a complaint about"],
        promise: "escalate the complaint about",
        outcome: "escalated the complaint about",
    },
];

struct ObjectSpec {
    name: &'static str,
    phrases: [&'static str; 3],
}

const OBJECTS: [ObjectSpec; 4] = [
    ObjectSpec { name: "order", phrases: ["order", "purchase", "items"] },
    ObjectSpec { name: "payment", phrases: ["payment", "charge", "bill"] },
    ObjectSpec { name: "delivery", phrases: ["delivery", "shipment", "courier"] },
    ObjectSpec { name: "reservation", phrases: ["reservation", "booking", "appointment"] },
];

const GREETINGS: [&str; 5] = ["hello", "hi", "hi there", "good morning", "hey"];
const NAMES: [&str; 12] = [
    "alex", "sam", "jordan", "lee", "morgan", "casey", "riley", "taylor", "jamie", "drew", "quinn", "avery",
];
const AGENT_OPENERS: [&str; 3] = [
    "hello this is customer service how can i help",
    "hi thanks for contacting us what can i do for you",
    "good day you are chatting with support how may i help",
];
const CLOSINGS_CUSTOMER: [&str; 3] = ["thank you very much", "thanks a lot", "great thanks for the help"];
const CLOSINGS_AGENT: [&str; 3] = [
    "you are welcome have a nice day",
    "glad i could help goodbye",
    "happy to help take care",
];

impl Taxonomy {
    pub fn new(n_domains: usize, n_intents: usize) -> Result<Self> {
        if n_domains < 2 || n_domains > DOMAINS.len() {
            return Err(Error::config(
                "n_domains",
                format!("must be in [2, {}], got {n_domains}", DOMAINS.len()),
            ));
        }
        let max_intents = ACTIONS.len() * OBJECTS.len();
        if n_intents < 2 || n_intents > max_intents {
            return Err(Error::config(
                "n_intents",
                format!("must be in [2, {max_intents}], got {n_intents}"),
            ));
        }
        Ok(Self {
            domains: DOMAINS[..n_domains].iter().map(|d| d.name.to_string()).collect(),
            intents: (0..n_intents).map(intent_name).collect(),
        })
    }

    pub fn standard() -> Self {
        Self::new(24, 20).expect("standard taxonomy is valid")
    }
}

fn intent_parts(intent: usize) -> (&'static ActionSpec, &'static ObjectSpec) {
    (&ACTIONS[intent / OBJECTS.len()], &OBJECTS[intent % OBJECTS.len()])
}

fn intent_name(intent: usize) -> String {
    let (a, o) = intent_parts(intent);
    format!("{} {}", a.name, o.name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_dialogues: usize,
    pub n_domains: usize,
    pub n_intents: usize,
    /// Inclusive bounds on the number of utterances per dialogue.
    pub turns_range: (usize, usize),
    pub label_noise_rate: f64,
    pub provenance: LabelProvenance,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_dialogues: 1000,
            n_domains: 24,
            n_intents: 20,
            turns_range: (4, 8),
            label_noise_rate: 0.2,
            provenance: LabelProvenance::Weak,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<Taxonomy> {
        let taxonomy = Taxonomy::new(self.n_domains, self.n_intents)?;
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return Err(Error::config(
                "label_noise_rate",
                format!("must be in [0, 1], got {}", self.label_noise_rate),
            ));
        }
        if self.provenance == LabelProvenance::Gold && self.label_noise_rate != 0.0 {
            return Err(Error::config("label_noise_rate", "gold corpora cannot carry label noise"));
        }
        let (lo, hi) = self.turns_range;
        if lo < MIN_TURNS || lo > hi || hi > MAX_TURNS {
            return Err(Error::config(
                "turns_range",
                format!("must satisfy {MIN_TURNS} <= min <= max <= {MAX_TURNS}, got ({lo}, {hi})"),
            ));
        }
        Ok(taxonomy)
    }
}

const MIN_TURNS: usize = 4;
const MAX_TURNS: usize = 10;

/// The labels a record would carry without noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrueLabels {
    pub domain: String,
    pub intent: String,
    pub summary: String,
}

pub fn generate_corpus(config: &GeneratorConfig) -> Result<Vec<DialogueRecord>> {
    Ok(generate_corpus_with_truth(config)?.into_iter().map(|(r, _)| r).collect())
}

/// Like [`generate_corpus`], also returning each record's noise-free labels.
pub fn generate_corpus_with_truth(config: &GeneratorConfig) -> Result<Vec<(DialogueRecord, TrueLabels)>> {
    let taxonomy = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.n_dialogues);
    for index in 0..config.n_dialogues {
        let domain = rng.gen_range(0..taxonomy.domains.len());
        let intent = rng.gen_range(0..taxonomy.intents.len());
        let n_turns = rng.gen_range(config.turns_range.0..=config.turns_range.1);
        let dialogue = compose_dialogue(&mut rng, domain, intent, n_turns);

        let truth = TrueLabels {
            domain: taxonomy.domains[domain].clone(),
            intent: taxonomy.intents[intent].clone(),
            summary: dialogue.summary.clone(),
        };
        let rate = config.label_noise_rate;
        let domain_label = if rng.gen_bool(rate) {
            taxonomy.domains[other_index(&mut rng, domain, taxonomy.domains.len())].clone()
        } else {
            truth.domain.clone()
        };
        let intent_label = if rng.gen_bool(rate) {
            taxonomy.intents[other_index(&mut rng, intent, taxonomy.intents.len())].clone()
        } else {
            truth.intent.clone()
        };
        let summary = if rng.gen_bool(rate) {
            let wrong = other_index(&mut rng, intent, taxonomy.intents.len());
            summarize(&dialogue.item, wrong)
        } else {
            truth.summary.clone()
        };

        let record = DialogueRecord {
            id: format!("s{}-{:06}", config.seed, index),
            utterances: dialogue.utterances,
            domain_label: Some(domain_label),
            intent_label: Some(intent_label),
            summary: Some(summary),
            label_provenance: config.provenance,
        };
        out.push((record, truth));
    }
    Ok(out)
}

fn other_index(rng: &mut ChaCha8Rng, current: usize, n: usize) -> usize {
    let k = rng.gen_range(0..n - 1);
    if k >= current {
        k + 1
    } else {
        k
    }
}

struct Composed {
    utterances: Vec<Utterance>,
    item: String,
    summary: String,
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

fn order_number<R: Rng>(rng: &mut R) -> String {
    let digits = rng.gen_range(4..=6);
    (0..digits).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
}

/// A customer sentence stating the intent, optionally with a distractor
/// clause mentioning a different object.
pub(crate) fn intent_statement<R: Rng>(rng: &mut R, intent: usize, item: &str) -> String {
    let (action, object) = intent_parts(intent);
    let verb = pick(rng, &action.phrases);
    let noun = pick(rng, &object.phrases);
    let core = match rng.gen_range(0..4) {
        0 => format!("i want to {verb} my {noun} for the {item}"),
        1 => format!("can you help me {verb} the {noun} of my {item}"),
        2 => format!("i would like to {verb} my {item} {noun}"),
        _ => format!("please {verb} my {noun} for the {item}"),
    };
    if rng.gen_bool(0.4) {
        let other = loop {
            let o = &OBJECTS[rng.gen_range(0..OBJECTS.len())];
            if o.name != object.name {
                break o;
            }
        };
        let other_noun = pick(rng, &other.phrases);
        match rng.gen_range(0..2) {
            0 => format!("my {other_noun} is fine but {core}"),
            _ => format!("{core} the {other_noun} is not the problem"),
        }
    } else {
        core
    }
}

fn summarize(item: &str, intent: usize) -> String {
    let (action, object) = intent_parts(intent);
    format!(
        "customer asked to {} the {} for the {} and agent {} it",
        action.name, object.name, item, action.outcome
    )
}

fn compose_dialogue<R: Rng>(rng: &mut R, domain: usize, intent: usize, n_turns: usize) -> Composed {
    let spec = &DOMAINS[domain];
    let item = pick(rng, &spec.items).to_string();
    let (action, object) = intent_parts(intent);
    let name = pick(rng, &NAMES);
    let number = order_number(rng);

    let opening = match rng.gen_range(0..3) {
        0 => format!("{} i have a question about my {} from your {} service", pick(rng, &GREETINGS), item, spec.name),
        1 => format!("{} this is {} i used your {} service for a {}", pick(rng, &GREETINGS), name, spec.name, item),
        _ => format!("{} i need help with a {} i got through {}", pick(rng, &GREETINGS), item, spec.name),
    };
    let statement = intent_statement(rng, intent, &item);
    let resolution = format!(
        "i will {} your {} for the {} right away number {}",
        action.promise, object.name, item, number
    );

    let mut u = vec![Utterance::customer(opening)];
    // 4 turns: opening, agent opener, statement, resolution.
    u.push(Utterance::agent(pick(rng, &AGENT_OPENERS)));
    u.push(Utterance::customer(statement));
    let mut extra = n_turns - MIN_TURNS;
    if extra >= 2 {
        u.push(Utterance::agent(format!("could you tell me the {} number please", object.name)));
        u.push(Utterance::customer(format!("sure it is {number}")));
        extra -= 2;
    }
    u.push(Utterance::agent(resolution));
    if extra >= 2 {
        u.push(Utterance::customer(pick(rng, &CLOSINGS_CUSTOMER).to_string()));
        u.push(Utterance::agent(pick(rng, &CLOSINGS_AGENT).to_string()));
        extra -= 2;
    }
    if extra >= 2 {
        u.push(Utterance::customer("one more thing will i get a confirmation"));
        u.push(Utterance::agent(format!("yes a confirmation for {number} will be sent to {name}")));
        extra -= 2;
    }
    if extra == 1 {
        u.push(Utterance::customer("ok bye"));
    }

    Composed {
        utterances: u,
        summary: summarize(&item, intent),
        item,
    }
}

/// A labeled pair of customer sentences for the sentence-similarity task:
/// positive when both express the same intent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub first: String,
    pub second: String,
    pub label: String,
}

pub const POSITIVE: &str = "positive";
pub const NEGATIVE: &str = "negative";

pub fn generate_sentence_pairs(n: usize, n_intents: usize, seed: u64) -> Result<Vec<SentencePair>> {
    let taxonomy = Taxonomy::new(2, n_intents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_intents = taxonomy.intents.len();
    Ok((0..n)
        .map(|index| {
            let a = rng.gen_range(0..n_intents);
            let positive = rng.gen_bool(0.5);
            let b = if positive { a } else { other_index(&mut rng, a, n_intents) };
            let domain_a = rng.gen_range(0..DOMAINS.len());
            let item_a = pick(&mut rng, &DOMAINS[domain_a].items).to_string();
            let domain_b = rng.gen_range(0..DOMAINS.len());
            let item_b = pick(&mut rng, &DOMAINS[domain_b].items).to_string();
            SentencePair {
                id: format!("p{seed}-{index:06}"),
                first: intent_statement(&mut rng, a, &item_a),
                second: intent_statement(&mut rng, b, &item_b),
                label: if positive { POSITIVE } else { NEGATIVE }.to_string(),
            }
        })
        .collect())
}

/// Streams records from a JSONL corpus file in file order.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    path: std::path::PathBuf,
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<DialogueRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(DialogueRecord::from_json_line(&text, self.line));
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CorpusReader {
        lines: BufReader::new(file).lines(),
        line: 0,
        path: path.to_path_buf(),
    })
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[DialogueRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(file, "{}", r.to_json()).map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Splits into `(train, dev, test)`. The test split takes
/// `round(test_fraction · n)` records, dev takes exactly `dev_size` of the
/// remainder. Allocation is stratified by domain label, with the train share
/// of every class within one record of its global proportion.
pub fn split_corpus(
    records: Vec<DialogueRecord>,
    dev_size: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", format!("must be in [0, 1), got {test_fraction}")));
    }
    let n = records.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let rest = n - n_test;
    if dev_size >= rest {
        return Err(Error::Sizing(format!(
            "dev_size {dev_size} must be smaller than the {rest} records left after the test split"
        )));
    }
    let n_train = rest - dev_size;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: BTreeMap<Option<String>, Vec<DialogueRecord>> = BTreeMap::new();
    for r in records {
        classes.entry(r.domain_label.clone()).or_default().push(r);
    }
    let mut groups: Vec<Vec<DialogueRecord>> = classes.into_values().collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let train_alloc = apportion(&sizes, n_train, n, &sizes);
    let left: Vec<usize> = sizes.iter().zip(&train_alloc).map(|(s, t)| s - t).collect();
    let test_alloc = apportion(&sizes, n_test, n, &left);

    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for ((group, &tr), &te) in groups.into_iter().zip(&train_alloc).zip(&test_alloc) {
        let mut it = group.into_iter();
        train.extend(it.by_ref().take(tr));
        test.extend(it.by_ref().take(te));
        dev.extend(it);
    }
    train.shuffle(&mut rng);
    dev.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, dev, test))
}

/// Largest-remainder apportionment of `total` units with quotas
/// `size · total / n`, never exceeding `cap` per class.
fn apportion(sizes: &[usize], total: usize, n: usize, cap: &[usize]) -> Vec<usize> {
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(cap)
        .map(|(q, &c)| (q.floor() as usize).min(c))
        .collect();
    let mut remaining = total - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - alloc[a] as f64;
        let fb = quotas[b] - alloc[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    while remaining > 0 {
        let mut progressed = false;
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if alloc[i] < cap[i] {
                alloc[i] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}
