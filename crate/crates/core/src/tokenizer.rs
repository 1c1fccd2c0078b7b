//! Byte-pair subword tokenizer with atomic special tokens and span
//! sentinels.
//!
//! Id layout: special tokens first (`<pad>` is always id 0), then the base
//! character alphabet, then merged tokens in merge order, and finally the
//! sentinels `<X_0>`, `<X_1>`, ... counting down from the top id.
//!
//! Words carry a leading `▁` boundary marker so that detokenization can
//! restore the normalized spacing exactly.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const TASK: &str = "[TASK]";
pub const DIALOGUE: &str = "[DIALOGUE]";
pub const GOAL: &str = "[GOAL]";
pub const CUSTOMER: &str = "[CUSTOMER]";
pub const AGENT: &str = "[AGENT]";

pub const DEFAULT_SPECIAL_TOKENS: [&str; 8] = [PAD, EOS, UNK, TASK, DIALOGUE, GOAL, CUSTOMER, AGENT];
pub const DEFAULT_SENTINELS: usize = 100;
pub const WORD_MARK: char = '\u{2581}';

const MAGIC: &str = "UFATOK1";
const MERGES_HEADER: &str = "#MERGES";

pub fn sentinel(k: usize) -> String {
    format!("<X_{k}>")
}

fn parse_sentinel(token: &str) -> Option<usize> {
    token.strip_prefix("<X_")?.strip_suffix('>')?.parse().ok()
}

/// Character allowlist filter. Disallowed characters become spaces, space
/// runs collapse, and the result is trimmed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Normalizer {
    pub latin: bool,
    pub digits: bool,
    pub cjk: bool,
    pub punctuation: String,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            latin: true,
            digits: true,
            cjk: true,
            punctuation: String::new(),
        }
    }
}

impl Normalizer {
    pub fn allows(&self, c: char) -> bool {
        (self.latin && is_latin_letter(c))
            || (self.digits && c.is_ascii_digit())
            || (self.cjk && is_cjk(c))
            || self.punctuation.contains(c)
    }

    pub fn normalize(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut pending_space = false;
        for c in text.chars() {
            if c != ' ' && self.allows(c) {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.push(c);
            } else {
                pending_space = true;
            }
        }
        out
    }
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
        || (c.is_alphabetic() && matches!(c as u32, 0x00C0..=0x024F) && c != '×' && c != '÷')
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF)
}

/// Normalizes with the default allowlist.
pub fn normalize(text: &str) -> String {
    Normalizer::default().normalize(text)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub vocab_size: usize,
    pub special_tokens: Vec<String>,
    pub n_sentinels: usize,
    pub normalizer: Normalizer,
}

impl TrainOptions {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            special_tokens: DEFAULT_SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            n_sentinels: DEFAULT_SENTINELS,
            normalizer: Normalizer::default(),
        }
    }
}

#[derive(Debug)]
pub struct TokenizerModel {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    /// `(left, right) → (rank, merged id)`
    merge_table: HashMap<(u32, u32), (usize, u32)>,
    special: Vec<(String, u32)>,
    n_sentinels: usize,
    normalizer: Normalizer,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.merges == other.merges
            && self.special == other.special
            && self.n_sentinels == other.n_sentinels
    }
}

impl Clone for TokenizerModel {
    fn clone(&self) -> Self {
        Self::assemble(self.vocab.clone(), self.merges.clone(), self.normalizer.clone())
            .expect("a valid model reassembles")
    }
}

/// Splits text into alternating plain segments and special-token matches,
/// matching specials greedily longest-first.
fn split_specials<'a>(text: &'a str, specials: &[(String, u32)]) -> Vec<(&'a str, Option<u32>)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < text.len() {
        if bytes[i] == b'<' || bytes[i] == b'[' {
            if let Some((tok, id)) = specials.iter().find(|(t, _)| text[i..].starts_with(t.as_str())) {
                if start < i {
                    out.push((&text[start..i], None));
                }
                out.push((&text[i..i + tok.len()], Some(*id)));
                i += tok.len();
                start = i;
                continue;
            }
        }
        i += text[i..].chars().next().map_or(1, char::len_utf8);
    }
    if start < text.len() {
        out.push((&text[start..], None));
    }
    out
}

fn is_special_form(token: &str) -> bool {
    token.chars().count() > 2
        && ((token.starts_with('<') && token.ends_with('>')) || (token.starts_with('[') && token.ends_with(']')))
}

/// Trains a byte-pair model on `texts`. Pairs are merged by descending
/// frequency, ties broken by the lexicographic order of `(left, right)`.
pub fn train<I, S>(texts: I, options: &TrainOptions) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let specials = &options.special_tokens;
    if specials.first().map(String::as_str) != Some(PAD) {
        return Err(Error::config("special_tokens", "the first special token must be <pad>"));
    }
    for required in [EOS, UNK] {
        if !specials.iter().any(|s| s == required) {
            return Err(Error::config("special_tokens", format!("missing {required}")));
        }
    }
    if let Some(bad) = specials.iter().find(|s| !is_special_form(s) || parse_sentinel(s).is_some()) {
        return Err(Error::config(
            "special_tokens",
            format!("`{bad}` must be bracketed as <...> or [...] and not use the sentinel form"),
        ));
    }
    let unique: HashSet<&String> = specials.iter().collect();
    if unique.len() != specials.len() {
        return Err(Error::config("special_tokens", "duplicate special token"));
    }
    let mut special_pairs: Vec<(String, u32)> = specials.iter().map(|s| (s.clone(), 0)).collect();
    special_pairs.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for (segment, special) in split_specials(text.as_ref(), &special_pairs) {
            if special.is_some() {
                continue;
            }
            for word in options.normalizer.normalize(segment).split(' ').filter(|w| !w.is_empty()) {
                *word_freq.entry(format!("{WORD_MARK}{word}")).or_default() += 1;
            }
        }
    }

    let mut alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    alphabet.extend(('a'..='z').chain('A'..='Z').chain('0'..='9'));
    alphabet.insert(WORD_MARK);

    let reserved = specials.len() + options.n_sentinels + alphabet.len();
    if options.vocab_size <= reserved {
        return Err(Error::Sizing(format!(
            "vocab_size {} must exceed the {} reserved entries ({} special, {} sentinel, {} base characters)",
            options.vocab_size,
            reserved,
            specials.len(),
            options.n_sentinels,
            alphabet.len()
        )));
    }

    let mut vocab: Vec<String> = specials.clone();
    vocab.extend(alphabet.iter().map(char::to_string));
    let mut index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let target_regular = options.vocab_size - options.n_sentinels;

    // Deterministic word order for the merge loop.
    let mut words: Vec<(Vec<u32>, u64)> = {
        let mut sorted: Vec<_> = word_freq.into_iter().collect();
        sorted.sort();
        sorted
            .into_iter()
            .map(|(w, f)| (w.chars().map(|c| index[&c.to_string()]).collect(), f))
            .collect()
    };

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += f;
            pair_words.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    while vocab.len() < target_regular {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab[pa.0 as usize], &vocab[pa.1 as usize]);
                    let kb = (&vocab[pb.0 as usize], &vocab[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((left, right)) = best else {
            return Err(Error::Sizing(format!(
                "the training corpus supports only {} entries, {} requested",
                vocab.len() + options.n_sentinels,
                options.vocab_size
            )));
        };
        let merged = format!("{}{}", vocab[left as usize], vocab[right as usize]);
        merges.push((vocab[left as usize].clone(), vocab[right as usize].clone()));
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = pair_words.remove(&(left, right)).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        for wi in affected {
            let (syms, f) = &mut words[wi];
            if !syms.windows(2).any(|p| p[0] == left && p[1] == right) {
                continue;
            }
            for p in syms.windows(2) {
                if let Some(c) = pair_counts.get_mut(&(p[0], p[1])) {
                    *c -= *f;
                }
            }
            let mut merged_syms = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    merged_syms.push(new_id);
                    i += 2;
                } else {
                    merged_syms.push(syms[i]);
                    i += 1;
                }
            }
            *syms = merged_syms;
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += *f;
                pair_words.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.remove(&(left, right));
    }

    for k in (0..options.n_sentinels).rev() {
        vocab.push(sentinel(k));
    }
    TokenizerModel::assemble(vocab, merges, options.normalizer.clone())
}

impl TokenizerModel {
    fn assemble(vocab: Vec<String>, merges: Vec<(String, String)>, normalizer: Normalizer) -> Result<Self> {
        if vocab.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Format("<pad> must have id 0".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        let mut merge_table = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                index
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("merge refers to unknown token `{t}`")))
            };
            let key = (lookup(l)?, lookup(r)?);
            let out = lookup(&format!("{l}{r}"))?;
            merge_table.entry(key).or_insert((rank, out));
        }
        let mut special: Vec<(String, u32)> = vocab
            .iter()
            .enumerate()
            .filter(|(_, t)| is_special_form(t))
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        special.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let n_sentinels = vocab.iter().filter(|t| parse_sentinel(t).is_some()).count();
        for k in 0..n_sentinels {
            if index.get(&sentinel(k)) != Some(&((vocab.len() - 1 - k) as u32)) {
                return Err(Error::Format(format!("sentinel <X_{k}> is not at id {}", vocab.len() - 1 - k)));
            }
        }
        for required in [EOS, UNK] {
            if !index.contains_key(required) {
                return Err(Error::Format(format!("missing special token {required}")));
            }
        }
        Ok(Self {
            vocab,
            index,
            merges,
            merge_table,
            special,
            n_sentinels,
            normalizer,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS]
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn n_sentinels(&self) -> usize {
        self.n_sentinels
    }

    pub fn sentinel_id(&self, k: usize) -> Option<u32> {
        (k < self.n_sentinels).then(|| (self.vocab.len() - 1 - k) as u32)
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        let id = id as usize;
        id < self.vocab.len() && id >= self.vocab.len() - self.n_sentinels
    }

    pub fn special_tokens(&self) -> impl Iterator<Item = (&str, u32)> {
        self.special.iter().map(|(t, i)| (t.as_str(), *i))
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn normalize(&self, text: &str) -> String {
        self.normalizer.normalize(text)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for (segment, special) in split_specials(text, &self.special) {
            match special {
                Some(id) => ids.push(id),
                None => {
                    for word in self.normalizer.normalize(segment).split(' ').filter(|w| !w.is_empty()) {
                        self.encode_word(word, &mut ids);
                    }
                }
            }
        }
        ids
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(hit) = self.cache.lock().ok().and_then(|c| c.get(word).cloned()) {
            out.extend(hit);
            return;
        }
        let unk = self.unk_id();
        let mut syms: Vec<u32> = std::iter::once(WORD_MARK)
            .chain(word.chars())
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index.get(&*c.encode_utf8(&mut buf)).copied().unwrap_or(unk)
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.merge_table.get(&(p[0], p[1])).map(|&(rank, out)| (rank, i, out)))
                .min();
            let Some((rank, _, out_id)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && self.merge_table.get(&(syms[i], syms[i + 1])).map(|m| m.0) == Some(rank) {
                    merged.push(out_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        if let Ok(mut c) = self.cache.lock() {
            if c.len() < 200_000 {
                c.insert(word.to_string(), syms.clone());
            }
        }
        out.extend(syms);
    }

    /// Detokenizes `ids`. Padding and end-of-sequence ids are dropped;
    /// special and sentinel tokens are rendered literally as separate words.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut raw = String::new();
        let eos = self.eos_id();
        for (position, &id) in ids.iter().enumerate() {
            let token = self.vocab.get(id as usize).ok_or(Error::Decode { position, id })?;
            if id == self.pad_id() || id == eos {
                continue;
            }
            if is_special_form(token) {
                raw.push(' ');
                raw.push_str(token);
                raw.push(' ');
            } else {
                raw.extend(token.chars().map(|c| if c == WORD_MARK { ' ' } else { c }));
            }
        }
        Ok(raw.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" "))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::with_capacity(self.vocab.len() * 12);
        s.push_str(MAGIC);
        s.push('\n');
        for (i, t) in self.vocab.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        s.push_str(MERGES_HEADER);
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(&format!("{l}\t{r}\n"));
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format(format!("tokenizer file must start with {MAGIC}")));
        }
        let mut vocab: Vec<String> = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            if !in_merges && line == MERGES_HEADER {
                in_merges = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {lineno}: expected a tab-separated pair")))?;
            if in_merges {
                merges.push((a.to_string(), b.to_string()));
            } else {
                let id: usize = b
                    .parse()
                    .map_err(|_| Error::Format(format!("line {lineno}: bad id `{b}`")))?;
                if id != vocab.len() {
                    return Err(Error::Format(format!("line {lineno}: id {id} out of sequence")));
                }
                vocab.push(a.to_string());
            }
        }
        if !in_merges {
            return Err(Error::Format(format!("missing {MERGES_HEADER} section")));
        }
        Self::assemble(vocab, merges, Normalizer::default())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> TokenizerModel {
        let texts = ["hello there my order is late", "where is my order", "refund my payment please 12345"];
        let base = train(texts, &TrainOptions::new(10_000)).unwrap_err();
        assert!(matches!(base, Error::Sizing(_)));
        let reserved = 8 + 100 + {
            let mut a: BTreeSet<char> = texts.iter().flat_map(|t| t.chars()).filter(|c| *c != ' ').collect();
            a.extend(('a'..='z').chain('A'..='Z').chain('0'..='9'));
            a.insert(WORD_MARK);
            a.len()
        };
        train(texts, &TrainOptions::new(reserved + 20)).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let no_punct = Normalizer::default();
        assert_eq!(no_punct.normalize("hi!!™ there"), "hi there");
        assert_eq!(no_punct.normalize(""), "");
        assert_eq!(no_punct.normalize("退款 refund"), "退款 refund");
        assert_eq!(no_punct.normalize("  a\tb\n\nc  "), "a b c");
        let with = Normalizer {
            punctuation: "?".into(),
            ..Default::default()
        };
        assert_eq!(with.normalize("why? ok!"), "why? ok");
    }

    #[test]
    fn first_merge_on_repeated_letters() {
        let opts = TrainOptions::new(8 + 100 + 63 + 1);
        let model = train(["aaaa aaaa"], &opts).unwrap();
        assert_eq!(model.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn vocab_size_at_reserved_count_is_rejected() {
        // 62 alphanumerics + the boundary marker.
        let reserved = 8 + 100 + 63;
        let err = train(["abc"], &TrainOptions::new(reserved)).unwrap_err();
        assert!(matches!(err, Error::Sizing(_)));
    }

    #[test]
    fn exact_vocab_size_and_layout() {
        let m = small_model();
        let opts_size = m.vocab_size();
        assert_eq!(m.id(PAD), Some(0));
        assert_eq!(m.sentinel_id(0), Some(opts_size as u32 - 1));
        assert_eq!(m.id("<X_99>"), Some(opts_size as u32 - 100));
        assert!(m.is_sentinel(opts_size as u32 - 1));
        assert!(!m.is_sentinel(0));
    }

    #[test]
    fn training_is_deterministic() {
        let texts = vec!["the cat sat on the mat", "the dog sat on the log", "cats and dogs"];
        let a = train(&texts, &TrainOptions::new(185)).unwrap();
        let b = train(&texts, &TrainOptions::new(185)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn special_tokens_are_atomic() {
        let m = small_model();
        let ids = m.encode("[CUSTOMER] hi");
        assert_eq!(ids[0], m.id(CUSTOMER).unwrap());
        assert_eq!(m.decode(&ids[1..]).unwrap(), "hi");
        for (tok, id) in m.special_tokens() {
            assert_eq!(m.encode(tok), vec![id], "{tok}");
        }
        assert_eq!(m.encode("<X_7>"), vec![m.sentinel_id(7).unwrap()]);
    }

    #[test]
    fn empty_and_drop_rules() {
        let m = small_model();
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert_eq!(m.decode(&[m.pad_id(), m.eos_id()]).unwrap(), "");
    }

    #[test]
    fn out_of_range_id_reports_position() {
        let m = small_model();
        let bad = m.vocab_size() as u32;
        match m.decode(&[5, bad]) {
            Err(Error::Decode { position, id }) => {
                assert_eq!(position, 1);
                assert_eq!(id, bad);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_with_specials() {
        let m = small_model();
        let s = "[TASK] intent detection [DIALOGUE] [CUSTOMER] where is my order <X_0> [GOAL] ok";
        assert_eq!(m.decode(&m.encode(s)).unwrap(), s);
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let m = small_model();
        let ids = m.encode("退");
        assert!(ids.contains(&m.unk_id()));
    }

    #[test]
    fn file_round_trip_preserves_ids() {
        let m = small_model();
        let back = TokenizerModel::from_file_str(&m.to_file_string()).unwrap();
        assert_eq!(m, back);
        for id in 0..m.vocab_size() as u32 {
            assert_eq!(m.token(id), back.token(id));
        }
        assert!(TokenizerModel::from_file_str("NOPE\n").is_err());
    }
}
