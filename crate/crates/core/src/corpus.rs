//! Synthetic code-switched clinical-style corpus: generation, statistics and
//! the line-delimited record format.
//!
//! A document is a sequence of words from three pools: local-script
//! pseudo-words, Latin-script words (a share of which are lexicon terms) and
//! other tokens such as numbers and symbols. A hidden label rule counts
//! "signal" words (emergency-indicative lexicon terms and local cue words)
//! against a length-dependent threshold.
//!
//! Two profiles share one vocabulary: the student profile reproduces the
//! target word-class ratios and mixes both kinds of signal, while the domain
//! profile is denser in Latin terms and labels depend on lexicon terms only.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{parse_key_values, write_atomic};
use crate::textprep::{classify_words, preprocess, Lexicon, LocalScript, Script};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "unknown split {other:?} (expected train, dev or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub split: Split,
    pub label: u8,
    pub text: String,
}

/// Per-profile generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub ratio_local: f64,
    pub ratio_domain: f64,
    pub ratio_other: f64,
    /// Share of Latin words that are lexicon terms.
    pub lexicon_rate: f64,
    /// Probability that a signal word is a lexicon term rather than a cue.
    pub term_share: f64,
    pub signal_strength: f64,
    pub label_noise: f64,
    /// Probability of a label-correlated distractor word per training
    /// document; dev and test documents get distractors independently of
    /// the label at half this rate.
    pub distractor_rate: f64,
}

impl ProfileConfig {
    fn student() -> Self {
        ProfileConfig {
            n_train: 2000,
            n_dev: 500,
            n_test: 1000,
            ratio_local: 0.4325,
            ratio_domain: 0.2329,
            ratio_other: 0.3346,
            lexicon_rate: 0.20,
            term_share: 0.6,
            signal_strength: 0.95,
            label_noise: 0.02,
            distractor_rate: 0.3,
        }
    }

    fn domain() -> Self {
        ProfileConfig {
            n_train: 4000,
            n_dev: 500,
            n_test: 500,
            ratio_local: 0.35,
            ratio_domain: 0.40,
            ratio_other: 0.25,
            lexicon_rate: 0.35,
            term_share: 1.0,
            signal_strength: 1.0,
            label_noise: 0.0,
            distractor_rate: 0.0,
        }
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::invalid(format!(
                "{prefix}n_train, {prefix}n_dev and {prefix}n_test must be positive"
            )));
        }
        let ratios = [self.ratio_local, self.ratio_domain, self.ratio_other];
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "{prefix}ratio_local, {prefix}ratio_domain, {prefix}ratio_other must lie in [0, 1] and sum to 1 (sum is {sum})"
            )));
        }
        let probs = [
            ("lexicon_rate", self.lexicon_rate),
            ("term_share", self.term_share),
            ("signal_strength", self.signal_strength),
            ("label_noise", self.label_noise),
            ("distractor_rate", self.distractor_rate),
        ];
        for (k, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{prefix}{k} = {v} must lie in [0, 1]")));
            }
        }
        if self.ratio_domain == 0.0 && self.term_share > 0.0 {
            return Err(Error::invalid(format!(
                "infeasible: {prefix}term_share > 0 needs Latin words but {prefix}ratio_domain is 0"
            )));
        }
        if self.ratio_local == 0.0 && (self.term_share < 1.0 || self.distractor_rate > 0.0) {
            return Err(Error::invalid(format!(
                "infeasible: cue and distractor words need local words but {prefix}ratio_local is 0"
            )));
        }
        Ok(())
    }

    fn to_key_values(&self, prefix: &str) -> Vec<(String, String)> {
        let f = |k: &str, v: String| (format!("{prefix}{k}"), v);
        vec![
            f("n_train", self.n_train.to_string()),
            f("n_dev", self.n_dev.to_string()),
            f("n_test", self.n_test.to_string()),
            f("ratio_local", self.ratio_local.to_string()),
            f("ratio_domain", self.ratio_domain.to_string()),
            f("ratio_other", self.ratio_other.to_string()),
            f("lexicon_rate", self.lexicon_rate.to_string()),
            f("term_share", self.term_share.to_string()),
            f("signal_strength", self.signal_strength.to_string()),
            f("label_noise", self.label_noise.to_string()),
            f("distractor_rate", self.distractor_rate.to_string()),
        ]
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_train" => self.n_train = parse(key, value)?,
            "n_dev" => self.n_dev = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "ratio_local" => self.ratio_local = parse(key, value)?,
            "ratio_domain" => self.ratio_domain = parse(key, value)?,
            "ratio_other" => self.ratio_other = parse(key, value)?,
            "lexicon_rate" => self.lexicon_rate = parse(key, value)?,
            "term_share" => self.term_share = parse(key, value)?,
            "signal_strength" => self.signal_strength = parse(key, value)?,
            "label_noise" => self.label_noise = parse(key, value)?,
            "distractor_rate" => self.distractor_rate = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub student: ProfileConfig,
    /// Keys carry a `domain_` prefix in configuration files.
    pub domain: ProfileConfig,
    pub lexicon_size: usize,
    pub emergency_size: usize,
    pub cue_size: usize,
    pub distractor_size: usize,
    pub local_pool: usize,
    pub latin_pool: usize,
    pub syllables: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Threshold is `1 + words / len_scale` signal words.
    pub len_scale: usize,
    /// Share of negatives that carry one signal word fewer than the threshold.
    pub hard_negative_rate: f64,
    /// Share of positives that carry one signal word more than the threshold.
    pub extra_signal_rate: f64,
    pub zipf_exponent: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 42,
            student: ProfileConfig::student(),
            domain: ProfileConfig::domain(),
            lexicon_size: 400,
            emergency_size: 120,
            cue_size: 8,
            distractor_size: 6,
            local_pool: 600,
            latin_pool: 400,
            syllables: 48,
            min_words: 10,
            max_words: 30,
            len_scale: 20,
            hard_negative_rate: 0.5,
            extra_signal_rate: 0.3,
            zipf_exponent: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate("")?;
        self.domain.validate("domain_")?;
        if self.lexicon_size == 0 || self.emergency_size == 0 || self.emergency_size >= self.lexicon_size {
            return Err(Error::invalid(
                "need 0 < emergency_size < lexicon_size",
            ));
        }
        if self.cue_size == 0 || self.local_pool == 0 || self.latin_pool == 0 {
            return Err(Error::invalid("cue_size, local_pool and latin_pool must be positive"));
        }
        if self.syllables < 4 || self.syllables > 11_172 {
            return Err(Error::invalid("syllables must lie in 4..=11172"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::invalid("need 1 <= min_words <= max_words"));
        }
        if self.len_scale == 0 {
            return Err(Error::invalid("len_scale must be positive"));
        }
        for (k, v) in [
            ("hard_negative_rate", self.hard_negative_rate),
            ("extra_signal_rate", self.extra_signal_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{k} = {v} must lie in [0, 1]")));
            }
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::invalid("zipf_exponent must be >= 0"));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![("seed".to_string(), self.seed.to_string())];
        kv.extend(self.student.to_key_values(""));
        kv.extend(self.domain.to_key_values("domain_"));
        let more = [
            ("lexicon_size", self.lexicon_size.to_string()),
            ("emergency_size", self.emergency_size.to_string()),
            ("cue_size", self.cue_size.to_string()),
            ("distractor_size", self.distractor_size.to_string()),
            ("local_pool", self.local_pool.to_string()),
            ("latin_pool", self.latin_pool.to_string()),
            ("syllables", self.syllables.to_string()),
            ("min_words", self.min_words.to_string()),
            ("max_words", self.max_words.to_string()),
            ("len_scale", self.len_scale.to_string()),
            ("hard_negative_rate", self.hard_negative_rate.to_string()),
            ("extra_signal_rate", self.extra_signal_rate.to_string()),
            ("zipf_exponent", self.zipf_exponent.to_string()),
        ];
        kv.extend(more.into_iter().map(|(k, v)| (k.to_string(), v)));
        kv
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        if let Some(rest) = key.strip_prefix("domain_") {
            return self.domain.apply(rest, value);
        }
        if self.student.apply(key, value)? {
            return Ok(true);
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "lexicon_size" => self.lexicon_size = parse(key, value)?,
            "emergency_size" => self.emergency_size = parse(key, value)?,
            "cue_size" => self.cue_size = parse(key, value)?,
            "distractor_size" => self.distractor_size = parse(key, value)?,
            "local_pool" => self.local_pool = parse(key, value)?,
            "latin_pool" => self.latin_pool = parse(key, value)?,
            "syllables" => self.syllables = parse(key, value)?,
            "min_words" => self.min_words = parse(key, value)?,
            "max_words" => self.max_words = parse(key, value)?,
            "len_scale" => self.len_scale = parse(key, value)?,
            "hard_negative_rate" => self.hard_negative_rate = parse(key, value)?,
            "extra_signal_rate" => self.extra_signal_rate = parse(key, value)?,
            "zipf_exponent" => self.zipf_exponent = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a flat `key = value` file on top of the defaults. Unknown keys
    /// are rejected.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = GeneratorConfig::default();
        for (k, v) in parse_key_values(text, path)? {
            if !cfg.apply(&k, &v)? {
                return Err(Error::invalid(format!("{path}: unknown generator key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// The hidden labelling rule: a document is positive when its signal-word
/// count reaches `1 + words / len_scale`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRule {
    pub emergency: BTreeSet<String>,
    pub cues: BTreeSet<String>,
    pub len_scale: usize,
}

impl LabelRule {
    pub fn threshold(&self, words: usize) -> usize {
        1 + words / self.len_scale
    }

    pub fn signal_count(&self, text: &str) -> usize {
        text.split_whitespace()
            .filter(|w| self.emergency.contains(*w) || self.cues.contains(*w))
            .count()
    }

    pub fn label(&self, text: &str) -> u8 {
        let words = text.split_whitespace().count();
        u8::from(self.signal_count(text) >= self.threshold(words))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("len_scale = {}\n", self.len_scale);
        s += &format!("emergency = {}\n", self.emergency.iter().cloned().collect::<Vec<_>>().join(" "));
        s += &format!("cues = {}\n", self.cues.iter().cloned().collect::<Vec<_>>().join(" "));
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut rule = LabelRule {
            emergency: BTreeSet::new(),
            cues: BTreeSet::new(),
            len_scale: 0,
        };
        for (k, v) in parse_key_values(text, path)? {
            match k.as_str() {
                "len_scale" => rule.len_scale = parse(&k, &v)?,
                "emergency" => rule.emergency = v.split_whitespace().map(str::to_string).collect(),
                "cues" => rule.cues = v.split_whitespace().map(str::to_string).collect(),
                other => return Err(Error::invalid(format!("{path}: unknown rule key {other:?}"))),
            }
        }
        if rule.len_scale == 0 {
            return Err(Error::invalid(format!("{path}: len_scale missing or zero")));
        }
        Ok(rule)
    }
}

/// Output of [`generate`]: the shared vocabulary artefacts plus the student
/// and domain corpora.
#[derive(Clone, Debug)]
pub struct Generated {
    pub lexicon: Lexicon,
    pub rule: LabelRule,
    pub student: Vec<Document>,
    pub domain: Vec<Document>,
}

struct Pool {
    words: Vec<String>,
    dist: WeightedIndex<f64>,
}

impl Pool {
    fn new(words: Vec<String>, exponent: f64) -> Self {
        let weights: Vec<f64> = (0..words.len()).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect();
        let dist = WeightedIndex::new(weights).expect("nonempty pool");
        Pool { words, dist }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> &str {
        &self.words[self.dist.sample(rng)]
    }
}

struct World {
    local: Pool,
    cues: Vec<String>,
    distractors: Vec<String>,
    latin: Pool,
    emergency: Pool,
    lexicon_rest: Pool,
}

const LATIN_ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cr", "ph", "st", "tr",
];
const LATIN_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "y", "ia", "io"];
const OTHER_SYMBOLS: &[&str] = &["/", "%", ":", "-", "+", "(", ")", ".", "=", ","];

fn unique_words<R: Rng>(rng: &mut R, n: usize, taken: &mut HashSet<String>, mut make: impl FnMut(&mut R) -> String) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * (n + 10), "word space exhausted");
        let w = make(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn build_world<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> World {
    let mut offsets: Vec<u32> = (0..11_172).collect();
    offsets.shuffle(rng);
    let syllables: Vec<char> = offsets[..cfg.syllables]
        .iter()
        .map(|&o| char::from_u32(0xAC00 + o).expect("hangul syllable"))
        .collect();
    let mut taken = HashSet::new();
    let local_word = |rng: &mut R| -> String {
        let n = rng.gen_range(1..=3);
        (0..n).map(|_| *syllables.choose(rng).expect("syllables")).collect()
    };
    let local_words = unique_words(rng, cfg.local_pool, &mut taken, local_word);
    let cues = unique_words(rng, cfg.cue_size, &mut taken, local_word);
    let distractors = unique_words(rng, cfg.distractor_size, &mut taken, local_word);

    let latin_word = |syl: std::ops::RangeInclusive<usize>| {
        move |rng: &mut R| -> String {
            let n = rng.gen_range(syl.clone());
            let mut w = String::new();
            for _ in 0..n {
                w += LATIN_ONSETS.choose(rng).expect("onsets");
                w += LATIN_VOWELS.choose(rng).expect("vowels");
            }
            if rng.gen_bool(0.4) {
                w += ["s", "l", "n", "x", "m"].choose(rng).expect("codas");
            }
            w
        }
    };
    let latin = unique_words(rng, cfg.latin_pool, &mut taken, latin_word(1..=2));
    let lexicon = unique_words(rng, cfg.lexicon_size, &mut taken, latin_word(2..=4));
    let (emergency, rest) = lexicon.split_at(cfg.emergency_size);
    World {
        local: Pool::new(local_words, cfg.zipf_exponent),
        cues,
        distractors,
        latin: Pool::new(latin, cfg.zipf_exponent),
        emergency: Pool::new(emergency.to_vec(), cfg.zipf_exponent),
        lexicon_rest: Pool::new(rest.to_vec(), cfg.zipf_exponent),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Local,
    Latin,
    Other,
}

/// Rounds `x` up with probability equal to its fractional part.
fn stochastic_round<R: Rng>(x: f64, rng: &mut R) -> usize {
    let f = x.floor();
    f as usize + usize::from(rng.gen::<f64>() < x - f)
}

/// A document before its ordinary Latin words are chosen: `None` marks a
/// Latin slot still to be filled with a lexicon term or a plain word.
struct Draft {
    words: Vec<Option<String>>,
    terms: usize,
    label: u8,
}

fn generate_document<R: Rng>(
    cfg: &GeneratorConfig,
    profile: &ProfileConfig,
    world: &World,
    split: Split,
    rng: &mut R,
) -> Draft {
    let n = rng.gen_range(cfg.min_words..=cfg.max_words);
    let threshold = 1 + n / cfg.len_scale;
    let intent = rng.gen_bool(0.5);
    let signal = if intent {
        threshold + usize::from(rng.gen_bool(cfg.extra_signal_rate))
    } else if rng.gen_bool(cfg.hard_negative_rate) {
        threshold - 1
    } else {
        0
    };
    let mut n_latin = stochastic_round(profile.ratio_domain * n as f64, rng).min(n);
    let mut n_other = stochastic_round(profile.ratio_other * n as f64, rng).min(n - n_latin);
    let mut terms = (0..signal).filter(|_| rng.gen_bool(profile.term_share)).count();
    let mut cues = signal - terms;
    if terms > n_latin {
        if profile.term_share < 1.0 {
            cues += terms - n_latin;
            terms = n_latin;
        } else {
            // Domain profile: lexicon-only signal, so borrow slots instead.
            let need = terms - n_latin;
            let from_other = need.min(n_other);
            n_other -= from_other;
            n_latin += from_other;
            n_latin += need - from_other;
        }
    }
    let n_local = n.saturating_sub(n_latin + n_other);
    if cues > n_local {
        cues = n_local;
    }
    let distractor = !world.distractors.is_empty()
        && n_local > cues
        && match split {
            Split::Train => intent && rng.gen_bool(profile.distractor_rate),
            _ => rng.gen_bool(profile.distractor_rate / 2.0),
        };

    let mut slots: Vec<Slot> = std::iter::repeat_n(Slot::Local, n_local)
        .chain(std::iter::repeat_n(Slot::Latin, n_latin))
        .chain(std::iter::repeat_n(Slot::Other, n_other))
        .collect();
    slots.shuffle(rng);

    let mut local_specials: Vec<String> = (0..cues)
        .map(|_| world.cues.choose(rng).expect("cues").clone())
        .collect();
    if distractor {
        local_specials.push(world.distractors.choose(rng).expect("distractors").clone());
    }
    let mut local_specials = local_specials.into_iter();
    let mut local_positions: Vec<usize> = (0..n).filter(|&i| slots[i] == Slot::Local).collect();
    local_positions.shuffle(rng);
    let special_local: HashSet<usize> = local_positions.into_iter().take(local_specials.len()).collect();
    let mut latin_positions: Vec<usize> = (0..n).filter(|&i| slots[i] == Slot::Latin).collect();
    latin_positions.shuffle(rng);
    let term_positions: HashSet<usize> = latin_positions.into_iter().take(terms).collect();

    let mut words: Vec<Option<String>> = Vec::with_capacity(n);
    for (i, slot) in slots.iter().enumerate() {
        let w = match slot {
            Slot::Local if special_local.contains(&i) => Some(local_specials.next().expect("special word")),
            Slot::Local => Some(world.local.draw(rng).to_string()),
            Slot::Latin if term_positions.contains(&i) => Some(world.emergency.draw(rng).to_string()),
            Slot::Latin => None,
            Slot::Other => Some(if rng.gen_bool(0.6) {
                rng.gen_range(0..200u32).to_string()
            } else {
                OTHER_SYMBOLS.choose(rng).expect("symbols").to_string()
            }),
        };
        words.push(w);
    }
    let rule_label = u8::from(intent);
    let mut label = if rng.gen_bool(profile.signal_strength) {
        rule_label
    } else {
        u8::from(rng.gen_bool(0.5))
    };
    if rng.gen_bool(profile.label_noise) {
        label = 1 - label;
    }
    Draft { words, terms, label }
}

fn generate_profile<R: Rng>(cfg: &GeneratorConfig, profile: &ProfileConfig, world: &World, prefix: &str, rng: &mut R) -> Vec<Document> {
    let mut docs = Vec::new();
    for split in Split::ALL {
        let drafts: Vec<Draft> = (0..profile.size(split))
            .map(|_| generate_document(cfg, profile, world, split, rng))
            .collect();
        // Signal terms count toward the split's lexicon rate; the remaining
        // hits are spread evenly over the open Latin slots so that a
        // document's lexicon density still follows its signal terms.
        let terms: usize = drafts.iter().map(|d| d.terms).sum();
        let open: usize = drafts.iter().map(|d| d.words.iter().filter(|w| w.is_none()).count()).sum();
        let wanted = profile.lexicon_rate * (terms + open) as f64 - terms as f64;
        let rate = if open == 0 { 0.0 } else { (wanted / open as f64).clamp(0.0, 1.0) };
        let (mut seen, mut hits) = (0usize, 0usize);
        for (i, d) in drafts.into_iter().enumerate() {
            let words: Vec<String> = d
                .words
                .into_iter()
                .map(|w| {
                    w.unwrap_or_else(|| {
                        seen += 1;
                        if (hits as f64) + rng.gen::<f64>() < rate * seen as f64 {
                            hits += 1;
                            world.lexicon_rest.draw(rng).to_string()
                        } else {
                            world.latin.draw(rng).to_string()
                        }
                    })
                })
                .collect();
            docs.push(Document {
                id: format!("{prefix}{split}-{i}"),
                split,
                label: d.label,
                text: words.join(" "),
            });
        }
    }
    docs
}

/// Generates the lexicon, the label rule and both corpora from one seeded
/// random stream.
pub fn generate(cfg: &GeneratorConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, &mut rng);
    let student = generate_profile(cfg, &cfg.student, &world, "", &mut rng);
    let domain = generate_profile(cfg, &cfg.domain, &world, "domain-", &mut rng);
    let lexicon = Lexicon::new(world.emergency.words.iter().chain(&world.lexicon_rest.words))?;
    let rule = LabelRule {
        emergency: world.emergency.words.iter().cloned().collect(),
        cues: world.cues.iter().cloned().collect(),
        len_scale: cfg.len_scale,
    };
    Ok(Generated {
        lexicon,
        rule,
        student,
        domain,
    })
}

// ----------------------------------------------------------------------
// record format

/// Serialises documents as `split<TAB>label<TAB>text` lines.
pub fn corpus_to_text(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        if d.text.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(format!("document {} contains a tab or newline", d.id)));
        }
        out += &format!("{}\t{}\t{}\n", d.split, d.label, d.text);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    write_atomic(path, corpus_to_text(docs)?.as_bytes())
}

/// Parses line-delimited records. Lines have either three fields
/// (`split, label, text`, id assigned as `<split>-<index>`) or four
/// (`id, split, label, text`). Blank lines are skipped.
pub fn parse_corpus(text: &str, path: &str, local: &LocalScript) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    let mut counters = [0usize; 3];
    for (n, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: n + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (id, split, label, raw) = match fields.as_slice() {
            [s, l, t] => (None, *s, *l, *t),
            [i, s, l, t] => (Some(*i), *s, *l, *t),
            _ => {
                return Err(err(format!(
                    "expected 3 fields (split, label, text) separated by tabs, found {}",
                    fields.len()
                )))
            }
        };
        let split: Split = split.trim().parse().map_err(|e: Error| err(e.to_string()))?;
        let label: u8 = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        let text = preprocess(raw, local);
        if text.is_empty() {
            return Err(err("empty text".into()));
        }
        let slot = &mut counters[split as usize];
        let id = id.map(str::to_string).unwrap_or_else(|| format!("{split}-{slot}"));
        *slot += 1;
        if !ids.insert(id.clone()) {
            return Err(Error::invalid(format!("{path}:{}: duplicate document id {id:?}", n + 1)));
        }
        docs.push(Document { id, split, label, text });
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path, local: &LocalScript) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string(), local)
}

/// Writes `train.tsv`, `dev.tsv` and `test.tsv` under `dir`.
pub fn write_corpus_dir(dir: &Path, docs: &[Document]) -> Result<()> {
    for split in Split::ALL {
        let part: Vec<Document> = docs.iter().filter(|d| d.split == split).cloned().collect();
        write_corpus(&dir.join(format!("{split}.tsv")), &part)?;
    }
    Ok(())
}

/// Loads the three split files written by [`write_corpus_dir`]. Each file
/// must only contain records of its own split.
pub fn load_corpus_dir(dir: &Path, local: &LocalScript) -> Result<Vec<Document>> {
    let mut all = Vec::new();
    let mut ids = HashSet::new();
    for split in Split::ALL {
        let path = dir.join(format!("{split}.tsv"));
        for d in load_corpus(&path, local)? {
            if d.split != split {
                return Err(Error::invalid(format!(
                    "{}: record {} is tagged {} in the {split} file",
                    path.display(),
                    d.id,
                    d.split
                )));
            }
            if !ids.insert(d.id.clone()) {
                return Err(Error::invalid(format!("duplicate document id {:?}", d.id)));
            }
            all.push(d);
        }
    }
    Ok(all)
}

pub fn split_docs(docs: &[Document], split: Split) -> Vec<&Document> {
    docs.iter().filter(|d| d.split == split).collect()
}

// ----------------------------------------------------------------------
// statistics

/// Word counts of one split. Lexicon hits are counted inside each script.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub documents: usize,
    pub positives: usize,
    pub words: usize,
    pub local: usize,
    pub local_lexicon: usize,
    pub latin: usize,
    pub latin_lexicon: usize,
    pub other: usize,
}

impl SplitStats {
    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn local_ratio(&self) -> f64 {
        Self::ratio(self.local, self.words)
    }

    pub fn latin_ratio(&self) -> f64 {
        Self::ratio(self.latin, self.words)
    }

    pub fn other_ratio(&self) -> f64 {
        Self::ratio(self.other, self.words)
    }

    pub fn latin_lexicon_rate(&self) -> f64 {
        Self::ratio(self.latin_lexicon, self.latin)
    }

    fn add(&mut self, o: &SplitStats) {
        self.documents += o.documents;
        self.positives += o.positives;
        self.words += o.words;
        self.local += o.local;
        self.local_lexicon += o.local_lexicon;
        self.latin += o.latin;
        self.latin_lexicon += o.latin_lexicon;
        self.other += o.other;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub splits: Vec<(Split, SplitStats)>,
    pub total: SplitStats,
}

pub fn corpus_stats(docs: &[Document], lexicon: &Lexicon, local: &LocalScript) -> CorpusStats {
    let mut splits: Vec<(Split, SplitStats)> = Split::ALL.iter().map(|&s| (s, SplitStats::default())).collect();
    for d in docs {
        let s = &mut splits[d.split as usize].1;
        s.documents += 1;
        s.positives += usize::from(d.label == 1);
        for a in classify_words(&d.text, lexicon, local) {
            s.words += 1;
            match a.script {
                Script::Local => {
                    s.local += 1;
                    s.local_lexicon += usize::from(a.is_lexicon_term);
                }
                Script::DomainLatin => {
                    s.latin += 1;
                    s.latin_lexicon += usize::from(a.is_lexicon_term);
                }
                Script::Other => s.other += 1,
            }
        }
    }
    let mut total = SplitStats::default();
    for (_, s) in &splits {
        total.add(s);
    }
    CorpusStats { splits, total }
}

impl CorpusStats {
    fn rows(&self) -> Vec<(String, SplitStats)> {
        let mut rows: Vec<(String, SplitStats)> = self.splits.iter().map(|(s, st)| (s.to_string(), *st)).collect();
        rows.push(("total".into(), self.total));
        rows
    }

    /// Aligned text table, one row per split plus a total row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<6} {:>6} {:>8} {:>14} {:>14} {:>8}   {:>6} {:>6} {:>6} {:>7}\n",
            "split", "docs", "words", "local(lex)", "latin(lex)", "other", "local", "latin", "other", "lexrate"
        );
        for (name, s) in self.rows() {
            out += &format!(
                "{:<6} {:>6} {:>8} {:>14} {:>14} {:>8}   {:>6.4} {:>6.4} {:>6.4} {:>7.4}\n",
                name,
                s.documents,
                s.words,
                format!("{}({})", s.local, s.local_lexicon),
                format!("{}({})", s.latin, s.latin_lexicon),
                s.other,
                s.local_ratio(),
                s.latin_ratio(),
                s.other_ratio(),
                s.latin_lexicon_rate()
            );
        }
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (name, s) in self.rows() {
            let fields = [
                ("documents", s.documents),
                ("positives", s.positives),
                ("words", s.words),
                ("local", s.local),
                ("local_lexicon", s.local_lexicon),
                ("latin", s.latin),
                ("latin_lexicon", s.latin_lexicon),
                ("other", s.other),
            ];
            for (k, v) in fields {
                out += &format!("{name}.{k} = {v}\n");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        let mut cfg = GeneratorConfig::default();
        cfg.student.n_train = 300;
        cfg.student.n_dev = 100;
        cfg.student.n_test = 100;
        cfg.domain.n_train = 200;
        cfg.domain.n_dev = 50;
        cfg.domain.n_test = 50;
        cfg
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.domain, b.domain);
        let mut c = small();
        c.seed = 7;
        assert_ne!(generate(&c).unwrap().student, a.student);
    }

    #[test]
    fn noiseless_labels_follow_rule() {
        let mut cfg = small();
        cfg.student.signal_strength = 1.0;
        cfg.student.label_noise = 0.0;
        let g = generate(&cfg).unwrap();
        for d in g.student.iter().chain(&g.domain) {
            assert_eq!(g.rule.label(&d.text), d.label, "{}", d.text);
        }
    }

    #[test]
    fn text_is_already_preprocessed() {
        let g = generate(&small()).unwrap();
        let local = LocalScript::default();
        for d in &g.student {
            assert_eq!(preprocess(&d.text, &local), d.text);
        }
    }

    #[test]
    fn domain_labels_ignore_cues() {
        let g = generate(&small()).unwrap();
        for d in &g.domain {
            assert!(!d.text.split_whitespace().any(|w| g.rule.cues.contains(w)));
        }
    }

    #[test]
    fn record_round_trip() {
        let g = generate(&small()).unwrap();
        let text = corpus_to_text(&g.student).unwrap();
        let back = parse_corpus(&text, "x", &LocalScript::default()).unwrap();
        assert_eq!(back, g.student);
    }

    #[test]
    fn malformed_records() {
        let local = LocalScript::default();
        let e = parse_corpus("train\t1\tok\ntrain\t2\tbad\n", "f.tsv", &local).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_corpus("1\thello\n", "f.tsv", &local).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_corpus("valid\t1\thello\n", "f.tsv", &local).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_corpus("train\t1\t   \n", "f.tsv", &local).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_corpus("a\ttrain\t1\tx\na\tdev\t0\ty\n", "f.tsv", &local).unwrap_err();
        assert!(matches!(e, Error::Validation(_)));
    }

    #[test]
    fn bad_ratios_named() {
        let e = GeneratorConfig::parse("ratio_local = 0.5\n", "g.cfg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("ratio_local") && msg.contains("ratio_other"), "{msg}");
        assert!(GeneratorConfig::parse("bogus = 1\n", "g.cfg").is_err());
        let ok = GeneratorConfig::parse("seed = 9\ndomain_n_train = 10\n", "g.cfg").unwrap();
        assert_eq!((ok.seed, ok.domain.n_train), (9, 10));
        let back = GeneratorConfig::parse(&ok.to_text(), "g.cfg").unwrap();
        assert_eq!(back, ok);
    }

    #[test]
    fn empty_split_stats_row_is_zero() {
        let docs = vec![Document {
            id: "a".into(),
            split: Split::Train,
            label: 1,
            text: "abc 12 가나".into(),
        }];
        let lex = Lexicon::new(["abc"]).unwrap();
        let st = corpus_stats(&docs, &lex, &LocalScript::default());
        assert_eq!(st.splits[1].1, SplitStats::default());
        assert_eq!(st.splits[0].1.latin_lexicon, 1);
        assert_eq!(st.total.words, 3);
    }
}
