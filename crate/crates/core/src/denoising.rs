//! Span-corruption pairs for the denoising warm-up stage.
//!
//! A fixed budget of `round(rate * n)` tokens is removed as
//! `round(budget / mean_span_length)` near-equal spans that never touch.
//! Each span is replaced by the next sentinel in the input; the target lists
//! every sentinel followed by the tokens it hides, then `<eos>`.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DialogueRecord;
use crate::error::{Error, Result};
use crate::promptkit::{render_dialogue_history, BuildWarnings, PromptedExample, DENOISE_TASK};
use crate::tokenizer::TokenizerModel;

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionConfig {
    pub corruption_rate: f64,
    pub mean_span_length: f64,
    pub max_sentinels: usize,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            mean_span_length: 3.0,
            max_sentinels: 100,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(Error::config("corruption_rate", "must lie strictly between 0 and 1"));
        }
        if !(self.mean_span_length >= 1.0) {
            return Err(Error::config("mean_span_length", "must be at least 1"));
        }
        if self.max_sentinels == 0 {
            return Err(Error::config("max_sentinels", "must be positive"));
        }
        Ok(())
    }

    /// `(tokens removed, span count)` for a sequence of length `n >= 2`.
    pub fn span_plan(&self, n: usize) -> (usize, usize) {
        let budget = ((self.corruption_rate * n as f64).round() as usize).clamp(1, n - 1);
        let kept = n - budget;
        let spans = ((budget as f64 / self.mean_span_length).round() as usize)
            .max(1)
            .min(budget)
            .min(kept + 1)
            .min(self.max_sentinels);
        (budget, spans)
    }

    /// Target length (sentinels, removed tokens and `<eos>`) for length `n`.
    pub fn target_len(&self, n: usize) -> usize {
        let (budget, spans) = self.span_plan(n);
        budget + spans + 1
    }

    /// Largest window, at most `max_source_len`, whose every chunk yields a
    /// target of at most `max_target_len` tokens.
    pub fn fit_window(&self, max_source_len: usize, max_target_len: usize) -> usize {
        let mut best = 0;
        for n in 2..=max_source_len {
            if self.target_len(n) > max_target_len {
                break;
            }
            best = n;
        }
        best
    }
}

/// Ids of `<X_0>, <X_1>, ...` in order, plus `<eos>`.
#[derive(Clone, Debug)]
pub struct SentinelSet {
    pub ids: Vec<u32>,
    pub eos: u32,
}

impl SentinelSet {
    pub fn from_tokenizer(tok: &TokenizerModel) -> Self {
        Self {
            ids: (0..tok.n_sentinels()).filter_map(|k| tok.sentinel_id(k)).collect(),
            eos: tok.eos_id(),
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.contains(&id)
    }
}

pub struct Corrupted {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

pub fn corrupt<R: Rng + ?Sized>(
    tokens: &[u32],
    config: &CorruptionConfig,
    sentinels: &SentinelSet,
    rng: &mut R,
) -> Result<Corrupted> {
    config.validate()?;
    let n = tokens.len();
    if n < 2 {
        return Err(Error::Corruption(format!("sequence of {n} tokens is too short to corrupt")));
    }
    if let Some(pos) = tokens.iter().position(|&t| sentinels.contains(t)) {
        return Err(Error::Corruption(format!("input already holds a sentinel at position {pos}")));
    }
    let (budget, spans) = config.span_plan(n);
    if spans > sentinels.ids.len() {
        return Err(Error::Corruption(format!(
            "{spans} spans needed but only {} sentinels exist",
            sentinels.ids.len()
        )));
    }

    let mut lengths: Vec<usize> = (0..spans).map(|i| budget / spans + usize::from(i < budget % spans)).collect();
    lengths.shuffle(rng);

    // Stars and bars over spans + 1 gaps; interior gaps get one extra kept
    // token so that spans never touch.
    let kept = n - budget;
    let free = kept + 1 - spans;
    let mut bars = index::sample(rng, free + spans, spans).into_vec();
    bars.sort_unstable();
    let mut gaps = Vec::with_capacity(spans + 1);
    let mut prev: Option<usize> = None;
    for &b in &bars {
        gaps.push(match prev {
            None => b,
            Some(p) => b - p,
        });
        prev = Some(b);
    }
    gaps.push(free + spans - 1 - bars[spans - 1]);

    let mut input = Vec::with_capacity(kept + spans);
    let mut target = Vec::with_capacity(budget + spans + 1);
    let mut pos = 0;
    for (k, &len) in lengths.iter().enumerate() {
        input.extend_from_slice(&tokens[pos..pos + gaps[k]]);
        pos += gaps[k];
        input.push(sentinels.ids[k]);
        target.push(sentinels.ids[k]);
        target.extend_from_slice(&tokens[pos..pos + len]);
        pos += len;
    }
    input.extend_from_slice(&tokens[pos..pos + gaps[spans]]);
    target.push(sentinels.eos);
    debug_assert_eq!(pos + gaps[spans], n);
    Ok(Corrupted { input, target })
}

/// Splits each rendered dialogue into `window`-token chunks and corrupts
/// every chunk. Records or chunks that cannot be used are counted in the
/// returned warnings and skipped.
pub fn build_denoise_dataset<'r, I>(
    records: I,
    tokenizer: &TokenizerModel,
    config: &CorruptionConfig,
    window: usize,
) -> Result<(Vec<PromptedExample>, BuildWarnings)>
where
    I: IntoIterator<Item = &'r DialogueRecord>,
{
    config.validate()?;
    if window < 2 {
        return Err(Error::config("window", "must be at least 2 tokens"));
    }
    let sentinels = SentinelSet::from_tokenizer(tokenizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    let mut warnings = BuildWarnings::default();
    for record in records {
        let text = match render_dialogue_history(&record.utterances) {
            Ok(t) => t,
            Err(_) => {
                warnings.count("denoise: empty dialogue");
                continue;
            }
        };
        let ids = tokenizer.encode(&text);
        for chunk in ids.chunks(window) {
            match corrupt(chunk, config, &sentinels, &mut rng) {
                Ok(c) => out.push(PromptedExample {
                    task_name: DENOISE_TASK.to_string(),
                    input_text: tokenizer.decode(&c.input)?,
                    target_text: tokenizer.decode(&c.target)?,
                    input_ids: c.input,
                    target_ids: c.target,
                }),
                Err(e) => warnings.count(format!("denoise: {e}")),
            }
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig, Utterance};
    use crate::tokenizer::{train, TrainOptions};

    fn sentinels() -> SentinelSet {
        SentinelSet {
            ids: (0..100).map(|k| 1000 - k).collect(),
            eos: 1,
        }
    }

    /// Splices each target span back at its sentinel.
    fn reconstruct(c: &Corrupted, s: &SentinelSet) -> Vec<u32> {
        let mut spans: Vec<(u32, Vec<u32>)> = Vec::new();
        for &t in &c.target {
            if s.contains(t) {
                spans.push((t, Vec::new()));
            } else if t != s.eos {
                spans.last_mut().unwrap().1.push(t);
            }
        }
        let mut out = Vec::new();
        for &t in &c.input {
            if s.contains(t) {
                let (_, body) = spans.iter().find(|(id, _)| *id == t).unwrap();
                out.extend(body);
            } else {
                out.push(t);
            }
        }
        out
    }

    #[test]
    fn ten_token_example() {
        let config = CorruptionConfig {
            corruption_rate: 0.3,
            ..Default::default()
        };
        let tokens: Vec<u32> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = corrupt(&tokens, &config, &sentinels(), &mut rng).unwrap();
        assert_eq!(c.input.len(), 8);
        assert_eq!(c.target.len(), 5);
        assert_eq!(c.target[0], 1000);
        assert_eq!(*c.target.last().unwrap(), 1);
        assert_eq!(reconstruct(&c, &sentinels()), tokens);
    }

    #[test]
    fn short_or_sentinel_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = CorruptionConfig::default();
        assert!(matches!(corrupt(&[5], &c, &sentinels(), &mut rng), Err(Error::Corruption(_))));
        assert!(matches!(corrupt(&[5, 1000, 6], &c, &sentinels(), &mut rng), Err(Error::Corruption(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        for bad in [0.0, 1.0, f64::NAN] {
            let c = CorruptionConfig {
                corruption_rate: bad,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn spans_never_touch() {
        let config = CorruptionConfig {
            corruption_rate: 0.5,
            mean_span_length: 1.0,
            ..Default::default()
        };
        let tokens: Vec<u32> = (10..30).collect();
        let s = sentinels();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = corrupt(&tokens, &config, &s, &mut rng).unwrap();
            assert!(c.input.windows(2).all(|w| !(s.contains(w[0]) && s.contains(w[1]))));
        }
    }

    #[test]
    fn fit_window_respects_target_limit() {
        let c = CorruptionConfig::default();
        let w = c.fit_window(512, 100);
        assert!(w < 512);
        assert!((2..=w).all(|n| c.target_len(n) <= 100));
        assert!(c.target_len(w + 1) > 100);
    }

    #[test]
    fn dataset_windows_and_shape() {
        let corpus = generate_corpus(&GeneratorConfig {
            n_dialogues: 30,
            ..Default::default()
        })
        .unwrap();
        let texts: Vec<String> = corpus
            .iter()
            .map(|r| render_dialogue_history(&r.utterances).unwrap())
            .collect();
        let tok = train(texts.iter().map(String::as_str), &TrainOptions::new(400)).unwrap();
        let config = CorruptionConfig::default();
        let (empty, _) = build_denoise_dataset(&[], &tok, &config, 512).unwrap();
        assert!(empty.is_empty());

        let (examples, warnings) = build_denoise_dataset(&corpus, &tok, &config, 512).unwrap();
        assert_eq!(examples.len(), corpus.len());
        assert_eq!(warnings.total(), 0);
        for e in &examples {
            assert_eq!(e.task_name, DENOISE_TASK);
            assert!(e.input_ids.iter().any(|&t| tok.is_sentinel(t)));
            assert!(tok.is_sentinel(e.target_ids[0]));
            assert!(!e.input_text.contains("[TASK]") && !e.input_text.contains("[GOAL]"));
        }

        let long_text: Vec<Utterance> = (0..400)
            .map(|i| if i % 2 == 0 { Utterance::customer("hello") } else { Utterance::agent("ok") })
            .collect();
        let mut long = corpus[0].clone();
        long.utterances = long_text;
        let n_tokens = tok.encode(&render_dialogue_history(&long.utterances).unwrap()).len();
        let (chunks, _) = build_denoise_dataset([&long], &tok, &config, 512).unwrap();
        assert_eq!(chunks.len(), n_tokens.div_ceil(512));
    }

    #[test]
    fn twelve_hundred_tokens_make_three_windows() {
        let tokens: Vec<u32> = (0..1200).map(|i| 10 + (i % 50)).collect();
        let config = CorruptionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pieces: Vec<_> = tokens
            .chunks(512)
            .map(|c| corrupt(c, &config, &sentinels(), &mut rng).unwrap())
            .collect();
        assert_eq!(pieces.len(), 3);
    }

    mod properties {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn reconstruction_conservation_and_sentinel_order(
                tokens in proptest::collection::vec(2u32..900, 2..120),
                seed in any::<u64>(),
                rate in 0.05f64..0.6,
            ) {
                let s = sentinels();
                let config = CorruptionConfig { corruption_rate: rate, ..Default::default() };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = corrupt(&tokens, &config, &s, &mut rng).unwrap();
                prop_assert_eq!(reconstruct(&c, &s), tokens.clone());

                let in_sent: Vec<u32> = c.input.iter().copied().filter(|&t| s.contains(t)).collect();
                let tgt_sent: Vec<u32> = c.target.iter().copied().filter(|&t| s.contains(t)).collect();
                prop_assert_eq!(&in_sent, &tgt_sent);
                prop_assert!(in_sent.windows(2).all(|w| w[0] > w[1]), "ids descend as k increases");
                prop_assert_eq!(&in_sent[..], &s.ids[..in_sent.len()]);

                let mut kept: Vec<u32> = c.input.iter().chain(&c.target).copied()
                    .filter(|&t| !s.contains(t) && t != s.eos).collect();
                let mut orig = tokens.clone();
                kept.sort_unstable();
                orig.sort_unstable();
                prop_assert_eq!(kept, orig);
            }
        }
    }

    #[test]
    fn removal_rate_over_many_sequences() {
        let config = CorruptionConfig::default();
        let s = sentinels();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let total = 10_000 * 200;
        let mut removed = 0usize;
        for _ in 0..10_000 {
            let tokens: Vec<u32> = (0..200).map(|_| rng.gen_range(2..900)).collect();
            let c = corrupt(&tokens, &config, &s, &mut rng).unwrap();
            let spans = c.target.iter().filter(|&&t| s.contains(t)).count();
            removed += c.target.len() - spans - 1;
        }
        let rate = removed as f64 / total as f64;
        assert!((rate - 0.15).abs() <= 0.02, "{rate}");
    }
}
