//! Byte-pair-encoding subword tokenizer that remembers which whitespace
//! word every subword came from.
//!
//! Symbols are merged inside words only. A subword that does not start its
//! word is rendered with the `##` continuation marker, so `fever` split into
//! `fe`, `ver` is emitted as the tokens `fe` and `##ver`. Merges themselves
//! are position independent and stored without markers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const SPECIALS: [&str; 4] = [PAD, CLS, SEP, UNK];

pub const CONTINUATION: &str = "##";

/// Word index carried by special and padding tokens.
pub const NO_WORD: i32 = -1;

/// Token ids plus the source-word index of each token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInput {
    pub ids: Vec<u32>,
    pub word_ids: Vec<i32>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions before padding starts.
    pub fn unpadded_len(&self) -> usize {
        self.ids.iter().rposition(|&i| i != PAD_ID).map_or(0, |p| p + 1)
    }
}

fn form(symbol: &str, initial: bool) -> String {
    if initial {
        symbol.to_string()
    } else {
        format!("{CONTINUATION}{symbol}")
    }
}

/// A trained vocabulary: ordered merges plus a dense token table whose first
/// four ids are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
    parents: HashMap<String, (String, String)>,
}

impl BpeVocab {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid(format!("token id {i} must be {s}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        let mut parents = HashMap::with_capacity(merges.len());
        for (r, (a, b)) in merges.iter().enumerate() {
            merge_rank.entry((a.clone(), b.clone())).or_insert(r);
            parents
                .entry(format!("{a}{b}"))
                .or_insert_with(|| (a.clone(), b.clone()));
        }
        Ok(BpeVocab {
            merges,
            tokens,
            token_to_id,
            merge_rank,
            parents,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Splits one word into subword symbols by repeatedly applying the
    /// earliest-learned merge present.
    fn segment(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(&r) = self.merge_rank.get(&(syms[i].clone(), syms[i + 1].clone())) {
                    if best.is_none_or(|(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = merged;
        }
        syms
    }

    /// Maps a symbol to ids, splitting it back into its merge parents when
    /// the positional form was never seen during training.
    fn push_symbol_ids(&self, symbol: &str, initial: bool, out: &mut Vec<u32>) {
        if let Some(&id) = self.token_to_id.get(&form(symbol, initial)) {
            out.push(id);
        } else if let Some((a, b)) = self.parents.get(symbol) {
            self.push_symbol_ids(a, initial, out);
            self.push_symbol_ids(b, false, out);
        } else {
            out.push(UNK_ID);
        }
    }

    /// Subword ids of a single word, without specials.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, s) in self.segment(word).iter().enumerate() {
            self.push_symbol_ids(s, i == 0, &mut out);
        }
        out
    }

    /// `[CLS] subwords… [SEP] [PAD]…`, exactly `max_len` long. Overlong input
    /// is right-truncated so that `[SEP]` stays the last real token.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenizedInput {
        self.encode_with(text, max_len, &mut |w| self.encode_word(w))
    }

    fn encode_with(
        &self,
        text: &str,
        max_len: usize,
        word_ids_of: &mut dyn FnMut(&str) -> Vec<u32>,
    ) -> TokenizedInput {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let budget = max_len - 2;
        let mut ids = Vec::with_capacity(max_len);
        let mut word_ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        word_ids.push(NO_WORD);
        'words: for (w, word) in text.split_whitespace().enumerate() {
            for id in word_ids_of(word) {
                if ids.len() - 1 == budget {
                    break 'words;
                }
                ids.push(id);
                word_ids.push(w as i32);
            }
        }
        ids.push(SEP_ID);
        word_ids.push(NO_WORD);
        ids.resize(max_len, PAD_ID);
        word_ids.resize(max_len, NO_WORD);
        TokenizedInput { ids, word_ids }
    }

    /// Encodes many texts, memoising per-word segmentation.
    pub fn encode_all<S: AsRef<str>>(&self, texts: &[S], max_len: usize) -> Vec<TokenizedInput> {
        let mut cache: HashMap<String, Vec<u32>> = HashMap::new();
        texts
            .iter()
            .map(|t| {
                self.encode_with(t.as_ref(), max_len, &mut |w| {
                    cache
                        .entry(w.to_string())
                        .or_insert_with(|| self.encode_word(w))
                        .clone()
                })
            })
            .collect()
    }

    /// Serialises to the `#MERGES` / `#VOCAB` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("#MERGES\n");
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s.push_str("#VOCAB\n");
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Merges,
            Vocab,
        }
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut section = Section::None;
        let mut merges = Vec::new();
        let mut tokens: Vec<Option<String>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            match line {
                "#MERGES" => section = Section::Merges,
                "#VOCAB" => section = Section::Vocab,
                "" => {}
                _ => match section {
                    Section::None => return Err(perr(n, "content before #MERGES".into())),
                    Section::Merges => {
                        let (a, b) = line
                            .split_once(' ')
                            .filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains(' '))
                            .ok_or_else(|| perr(n, format!("expected two symbols, got {line:?}")))?;
                        merges.push((a.to_string(), b.to_string()));
                    }
                    Section::Vocab => {
                        let (t, id) = line
                            .rsplit_once('\t')
                            .ok_or_else(|| perr(n, "expected token<TAB>id".into()))?;
                        let id: usize = id
                            .parse()
                            .map_err(|_| perr(n, format!("bad id {id:?}")))?;
                        if id >= tokens.len() {
                            tokens.resize(id + 1, None);
                        }
                        if tokens[id].replace(t.to_string()).is_some() {
                            return Err(perr(n, format!("id {id} assigned twice")));
                        }
                    }
                },
            }
        }
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::invalid(format!("vocabulary id {i} missing"))))
            .collect::<Result<Vec<_>>>()?;
        BpeVocab::from_parts(merges, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BpeVocab::parse(&text, &path.display().to_string())
    }
}

/// Learns merges greedily, most frequent adjacent pair first, ties broken by
/// the lexicographically smaller pair, until the vocabulary would exceed
/// `vocab_size`.
///
/// The base alphabet holds both the word-initial and continuation form of
/// every character in the corpus, so any in-alphabet word can be encoded.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<BpeVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::invalid("cannot train a tokenizer on an empty corpus"));
    }
    let chars: BTreeSet<char> = freq.keys().flat_map(|w| w.chars()).collect();
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut alphabet: Vec<String> = chars
        .iter()
        .flat_map(|c| [form(&c.to_string(), true), form(&c.to_string(), false)])
        .filter(|t| !SPECIALS.contains(&t.as_str()))
        .collect();
    alphabet.sort();
    tokens.extend(alphabet);
    if vocab_size < tokens.len() {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} is smaller than specials plus alphabet ({})",
            tokens.len()
        )));
    }
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut words: Vec<(Vec<String>, u64)> = freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();
    let mut merges = Vec::new();

    loop {
        // pair -> (count, occurs word-initially, occurs later)
        let mut pairs: HashMap<(&str, &str), (u64, bool, bool)> = HashMap::new();
        for (syms, f) in &words {
            for i in 0..syms.len().saturating_sub(1) {
                let e = pairs
                    .entry((syms[i].as_str(), syms[i + 1].as_str()))
                    .or_insert((0, false, false));
                e.0 += f;
                if i == 0 {
                    e.1 = true;
                } else {
                    e.2 = true;
                }
            }
        }
        let Some((&(a, b), &(_, at_start, later))) = pairs
            .iter()
            .max_by(|x, y| x.1 .0.cmp(&y.1 .0).then_with(|| y.0.cmp(x.0)))
        else {
            break;
        };
        let merged = format!("{a}{b}");
        let new_forms: Vec<String> = [(at_start, true), (later, false)]
            .into_iter()
            .filter(|(occurs, _)| *occurs)
            .map(|(_, initial)| form(&merged, initial))
            .filter(|f| !known.contains(f) && !SPECIALS.contains(&f.as_str()))
            .collect();
        if tokens.len() + new_forms.len() > vocab_size {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        for f in new_forms {
            known.insert(f.clone());
            tokens.push(f);
        }
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((a, b));
    }
    BpeVocab::from_parts(merges, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn most_frequent_pair_first() {
        let v = train_bpe(["aa aa aa"], 100).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn alphabet_only_budget_learns_nothing() {
        // alphabet {a, b} in both positions -> 4 specials + 4 forms
        let v = train_bpe(["ab ab ba"], 8).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 8);
        assert!(train_bpe(["ab"], 7).is_err());
    }

    #[test]
    fn ties_go_to_smaller_pair() {
        // ("a","b") and ("c","d") both occur twice
        let v = train_bpe(["cd ab cd ab"], 100).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b".to_string()));
        assert_eq!(v.merges()[1], ("c".to_string(), "d".to_string()));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train_bpe(["", "   "], 50), Err(Error::Validation(_))));
    }

    #[test]
    fn specials_first_and_dense() {
        let v = train_bpe(["hello world"], 40).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
        for i in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn empty_text_encodes_to_cls_sep() {
        let v = train_bpe(["abc"], 30).unwrap();
        let t = v.encode("", 5);
        assert_eq!(t.ids, vec![CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(t.word_ids, vec![NO_WORD; 5]);
    }

    #[test]
    fn hand_merged_word_ids() {
        // merges learned: (x,y) then (z,z); "xyzzw" with no further merges
        // splits into xy ##zz ##w.
        let v = BpeVocab::from_parts(
            vec![("x".into(), "y".into()), ("z".into(), "z".into())],
            ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "q", "x", "##y", "##z", "##w", "xy", "##zz"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let t = v.encode("q xyzzw", 8);
        assert_eq!(t.word_ids, vec![-1, 0, 1, 1, 1, -1, -1, -1]);
        let toks: Vec<&str> = t.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["[CLS]", "q", "xy", "##zz", "##w", "[SEP]", "[PAD]", "[PAD]"]);
    }

    #[test]
    fn truncation_keeps_sep_last() {
        let v = train_bpe(["a b c d e f g"], 30).unwrap();
        let t = v.encode("a b c d e f g", 5);
        assert_eq!(t.ids.len(), 5);
        assert_eq!(t.ids[4], SEP_ID);
        assert_eq!(t.word_ids, vec![-1, 0, 1, 2, -1]);
    }

    #[test]
    fn unknown_characters_become_unk_with_word_id() {
        let v = train_bpe(["abc"], 30).unwrap();
        let t = v.encode("ab 한", 6);
        let unk = t.ids.iter().position(|&i| i == UNK_ID).unwrap();
        assert_eq!(t.word_ids[unk], 1);
        assert_eq!(t.ids[unk + 1], SEP_ID);
    }

    #[test]
    fn file_round_trip() {
        let v = train_bpe(["the theme then thesis", "x y"], 40).unwrap();
        let back = BpeVocab::parse(&v.to_text(), "mem").unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_file_names_line() {
        let err = BpeVocab::parse("#MERGES\na b\nbroken\n#VOCAB\n", "vocab.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn word_level_round_trip(
            words in proptest::collection::vec("[a-e가나다]{1,7}", 1..12),
            size in 20usize..80,
        ) {
            let text = words.join(" ");
            let v = train_bpe([text.as_str()], size).unwrap();
            let t = v.encode(&text, 200);
            prop_assert_eq!(t.len(), 200);
            let mut rebuilt = vec![String::new(); words.len()];
            let mut last = -1;
            for (&id, &w) in t.ids.iter().zip(&t.word_ids) {
                if w < 0 { continue; }
                prop_assert!(w >= last);
                last = w;
                let tok = v.token(id).unwrap();
                rebuilt[w as usize].push_str(tok.strip_prefix(CONTINUATION).unwrap_or(tok));
            }
            prop_assert_eq!(rebuilt, words);
            let batch = v.encode_all(std::slice::from_ref(&text), 200);
            prop_assert_eq!(&batch[0], &t);
        }

        #[test]
        fn encode_length_is_max_len(text in "[a-c ]{0,30}", max_len in 2usize..12) {
            let v = train_bpe(["abc cab"], 30).unwrap();
            let t = v.encode(&text, max_len);
            prop_assert_eq!(t.ids.len(), max_len);
            prop_assert_eq!(t.word_ids.len(), max_len);
            prop_assert_eq!(t.ids[t.unpadded_len() - 1], SEP_ID);
        }
    }
}
