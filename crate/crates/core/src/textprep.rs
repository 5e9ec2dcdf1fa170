//! Free-text cleanup, per-word script classification and knowledge-mask
//! construction.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::bpe::TokenizedInput;
use crate::error::{Error, Result};

/// Codepoint ranges treated as the local (non-Latin) script.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalScript {
    ranges: Vec<(u32, u32)>,
}

impl Default for LocalScript {
    /// Hangul syllables plus the Hangul Jamo block.
    fn default() -> Self {
        LocalScript {
            ranges: vec![(0xAC00, 0xD7A3), (0x1100, 0x11FF)],
        }
    }
}

impl LocalScript {
    pub fn new(ranges: Vec<(u32, u32)>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::invalid("local script needs at least one range"));
        }
        if let Some((lo, hi)) = ranges.iter().find(|(lo, hi)| lo > hi) {
            return Err(Error::invalid(format!("empty codepoint range {lo:X}-{hi:X}")));
        }
        Ok(LocalScript { ranges })
    }

    pub fn ranges(&self) -> &[(u32, u32)] {
        &self.ranges
    }

    pub fn contains(&self, c: char) -> bool {
        let c = c as u32;
        self.ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&c))
    }
}

impl fmt::Display for LocalScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .ranges
            .iter()
            .map(|(lo, hi)| format!("{lo:04X}-{hi:04X}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LocalScript {
    type Err = Error;

    /// Parses `AC00-D7A3,1100-11FF`.
    fn from_str(s: &str) -> Result<Self> {
        let mut ranges = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (lo, hi) = part
                .split_once('-')
                .ok_or_else(|| Error::invalid(format!("codepoint range {part:?} lacks '-'")))?;
            let parse = |h: &str| {
                u32::from_str_radix(h.trim().trim_start_matches("0x").trim_start_matches("U+"), 16)
                    .map_err(|_| Error::invalid(format!("bad hex codepoint {h:?}")))
            };
            ranges.push((parse(lo)?, parse(hi)?));
        }
        LocalScript::new(ranges)
    }
}

/// Character classes used for boundary insertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CharClass {
    Space,
    Local,
    Latin,
    Digit,
    OtherLetter,
    Symbol,
}

pub fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
        || (matches!(c as u32, 0xC0..=0x24F | 0x1E00..=0x1EFF) && c.is_alphabetic())
}

fn char_class(c: char, local: &LocalScript) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if local.contains(c) {
        CharClass::Local
    } else if is_latin_letter(c) {
        CharClass::Latin
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() {
        CharClass::OtherLetter
    } else {
        CharClass::Symbol
    }
}

/// Removes line breaks and separates script classes and symbols with single
/// spaces, collapsing all whitespace runs.
pub fn preprocess(raw: &str, local: &LocalScript) -> String {
    let mut out = String::with_capacity(raw.len() + raw.len() / 4);
    let mut prev: Option<CharClass> = None;
    let mut pending_space = false;
    for c in raw.chars() {
        let class = char_class(c, local);
        if class == CharClass::Space {
            pending_space = true;
            continue;
        }
        if let Some(p) = prev {
            if pending_space || p != class {
                out.push(' ');
            }
        }
        out.push(c);
        prev = Some(class);
        pending_space = false;
    }
    out
}

/// A set of lowercase single-word domain terms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    terms: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for t in terms {
            let t = t.as_ref().trim();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("lexicon term {t:?} must be one nonempty word")));
            }
            set.insert(t.to_lowercase());
        }
        Ok(Lexicon { terms: set })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.terms.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    /// One term per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let terms = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        Lexicon::new(terms)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# domain lexicon, one term per line\n");
        for t in &self.terms {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Script {
    Local,
    DomainLatin,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordAnnotation {
    pub surface: String,
    pub script: Script,
    pub is_lexicon_term: bool,
}

/// Script of a single word. Words mixing Latin and local letters count as
/// Latin; digits and punctuation never make a word Latin or local.
pub fn word_script(word: &str, local: &LocalScript) -> Script {
    let mut latin = false;
    let mut local_seen = false;
    let mut foreign = false;
    for c in word.chars() {
        if local.contains(c) {
            local_seen = true;
        } else if is_latin_letter(c) {
            latin = true;
        } else if c.is_alphabetic() {
            foreign = true;
        }
    }
    if latin && !foreign {
        Script::DomainLatin
    } else if local_seen && !latin {
        Script::Local
    } else {
        Script::Other
    }
}

pub fn classify_words(text: &str, lexicon: &Lexicon, local: &LocalScript) -> Vec<WordAnnotation> {
    text.split_whitespace()
        .map(|w| WordAnnotation {
            surface: w.to_string(),
            script: word_script(w, local),
            is_lexicon_term: lexicon.contains(w),
        })
        .collect()
}

/// Which words count as knowledge words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MaskPolicy {
    /// Every Latin-script word.
    #[default]
    AllDomainScript,
    /// Only words found in the lexicon.
    LexiconOnly,
}

impl MaskPolicy {
    fn selects(self, a: &WordAnnotation) -> bool {
        match self {
            MaskPolicy::AllDomainScript => a.script == Script::DomainLatin,
            MaskPolicy::LexiconOnly => a.is_lexicon_term,
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolicy::AllDomainScript => "all-domain",
            MaskPolicy::LexiconOnly => "lexicon",
        })
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-domain" | "all_domain_script" => Ok(MaskPolicy::AllDomainScript),
            "lexicon" | "lexicon_only" => Ok(MaskPolicy::LexiconOnly),
            other => Err(Error::invalid(format!(
                "unknown mask policy {other:?} (expected all-domain or lexicon)"
            ))),
        }
    }
}

/// Per-token knowledge-word index: 0 for ordinary tokens, `j` in `1..=k` for
/// every subword of the `j`-th knowledge word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeMask {
    values: Vec<u32>,
    k: usize,
}

impl KnowledgeMask {
    /// Builds a mask directly from values, checking the run structure.
    pub fn from_values(values: Vec<u32>) -> Result<Self> {
        let k = values.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; k + 1];
        let mut prev = 0u32;
        for &v in &values {
            if v != 0 && v != prev && seen[v as usize] {
                return Err(Error::invalid(format!("knowledge word {v} is not contiguous")));
            }
            seen[v as usize] = true;
            prev = v;
        }
        if let Some(missing) = (1..=k).find(|&j| !seen[j]) {
            return Err(Error::invalid(format!("knowledge word {missing} has no token")));
        }
        Ok(KnowledgeMask { values, k })
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Positions of knowledge tokens (the domain-token set).
    pub fn knowledge_positions(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// A copy restricted to the first `len` positions, with knowledge words
    /// that disappear entirely dropped from the numbering.
    pub fn truncated(&self, len: usize) -> KnowledgeMask {
        let values: Vec<u32> = self.values[..len.min(self.values.len())].to_vec();
        let k = values.iter().copied().max().unwrap_or(0) as usize;
        KnowledgeMask { values, k }
    }
}

/// Numbers the selected words 1..k in order of first appearance among the
/// tokens of `tok`.
pub fn build_mask(
    tok: &TokenizedInput,
    annotations: &[WordAnnotation],
    policy: MaskPolicy,
) -> Result<KnowledgeMask> {
    let mut values = vec![0u32; tok.word_ids.len()];
    let mut k = 0u32;
    let mut last_word: Option<usize> = None;
    for (pos, &wid) in tok.word_ids.iter().enumerate() {
        if wid < 0 {
            continue;
        }
        let wid = wid as usize;
        let ann = annotations.get(wid).ok_or_else(|| {
            Error::invalid(format!(
                "token {pos} points at word {wid} but only {} annotations were given",
                annotations.len()
            ))
        })?;
        if !policy.selects(ann) {
            continue;
        }
        if last_word != Some(wid) {
            k += 1;
            last_word = Some(wid);
        }
        values[pos] = k;
    }
    Ok(KnowledgeMask {
        values,
        k: k as usize,
    })
}
