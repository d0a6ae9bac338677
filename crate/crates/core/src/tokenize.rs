//! Subword vocabularies, greedy longest-match tokenization and token-level
//! match matrices between two tokenizations of related text.
//!
//! Teacher and student each own a [`SubwordVocab`]. The same English word can
//! segment differently under the two vocabularies, and [`match_matrix`] finds
//! the subword positions that agree so that distillation only compares
//! embeddings of identical subwords.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become a single unknown token.
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocab {
    entries: Vec<String>,
    id_of: HashMap<String, usize>,
    specials: SpecialIds,
}

impl SubwordVocab {
    /// Builds a vocabulary from ordered entries; `origin` labels format errors.
    pub fn from_entries(entries: Vec<String>, origin: &Path) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.is_empty() || e.chars().any(char::is_whitespace) {
                return Err(Error::format(origin, i + 1, format!("invalid vocabulary entry {e:?}")));
            }
            if let Some(prev) = id_of.insert(e.clone(), i) {
                return Err(Error::format(
                    origin,
                    i + 1,
                    format!("duplicate entry {e:?} (first on line {})", prev + 1),
                ));
            }
        }
        let special = |name: &str| {
            id_of
                .get(name)
                .copied()
                .ok_or_else(|| Error::format(origin, 0, format!("missing special token {name}")))
        };
        let specials = SpecialIds {
            pad: special(PAD)?,
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
        };
        Ok(Self {
            entries,
            id_of,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.id_of.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.id_of.contains_key(piece)
    }

    /// One entry per line, newline-terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(e);
            s.push('\n');
        }
        s
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// Segments one already-normalized word by greedy longest match.
    pub fn segment(&self, word: &str) -> Vec<(String, usize)> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![(UNK.to_string(), self.specials.unk)];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let candidate = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some((candidate, id, end));
                    break;
                }
            }
            match found {
                Some((piece, id, end)) => {
                    pieces.push((piece, id));
                    start = end;
                }
                None => return vec![(UNK.to_string(), self.specials.unk)],
            }
        }
        pieces
    }
}

pub fn load_vocab(path: &Path) -> Result<SubwordVocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    SubwordVocab::from_entries(entries, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subword {
    pub text: String,
    pub id: usize,
}

/// Inclusive subword range produced by one source word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: usize,
    pub first: usize,
    pub last: usize,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub subwords: Vec<Subword>,
    pub word_spans: Vec<WordSpan>,
    pub source_words: Vec<String>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.subwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subwords.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.subwords.iter().map(|s| s.id).collect()
    }

    pub fn pieces(&self) -> Vec<&str> {
        self.subwords.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn span_of_word(&self, word: usize) -> Option<WordSpan> {
        self.word_spans.iter().copied().find(|s| s.word == word)
    }

    /// Subword strings of one source word.
    pub fn word_pieces(&self, word: usize) -> Option<Vec<&str>> {
        self.span_of_word(word).map(|s| {
            self.subwords[s.first..=s.last]
                .iter()
                .map(|p| p.text.as_str())
                .collect()
        })
    }

    /// Keeps the first `n` subwords; a word cut in the middle keeps its prefix.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.subwords.len() {
            return;
        }
        self.subwords.truncate(n);
        self.word_spans.retain(|s| s.first < n);
        if let Some(last) = self.word_spans.last_mut() {
            last.last = last.last.min(n.saturating_sub(1));
        }
    }

    /// Concatenates several texts into one, renumbering words consecutively.
    /// Used to lay object tags out as one tag sequence whose word index is the
    /// tag index.
    pub fn concat(parts: &[TokenizedText]) -> TokenizedText {
        let mut out = TokenizedText::default();
        for p in parts {
            let sub_off = out.subwords.len();
            let word_off = out.source_words.len();
            out.subwords.extend(p.subwords.iter().cloned());
            out.word_spans.extend(p.word_spans.iter().map(|s| WordSpan {
                word: s.word + word_off,
                first: s.first + sub_off,
                last: s.last + sub_off,
            }));
            out.source_words.extend(p.source_words.iter().cloned());
        }
        out
    }

    /// Checks that spans tile the subword sequence in order without gaps.
    pub fn spans_are_consistent(&self) -> bool {
        let mut next = 0;
        for s in &self.word_spans {
            if s.first != next || s.last < s.first || s.word >= self.source_words.len() {
                return false;
            }
            next = s.last + 1;
        }
        next == self.subwords.len()
    }
}

/// Lowercases and splits on whitespace, with punctuation split into
/// standalone words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut words = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && is_unicode_punct(ch)) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

fn is_unicode_punct(ch: char) -> bool {
    matches!(
        ch,
        '。' | '、' | '？' | '！' | '，' | '।' | '¿' | '¡' | '«' | '»' | '“' | '”' | '‘' | '’'
    )
}

pub fn tokenize(text: &str, vocab: &SubwordVocab) -> TokenizedText {
    tokenize_words(&pre_tokenize(text), vocab)
}

/// Tokenizes an already-split word sequence (words are lowercased here).
pub fn tokenize_words<S: AsRef<str>>(words: &[S], vocab: &SubwordVocab) -> TokenizedText {
    let mut out = TokenizedText::default();
    for (w, word) in words.iter().enumerate() {
        let word = word.as_ref().to_lowercase();
        let pieces = vocab.segment(&word);
        let first = out.subwords.len();
        out.subwords
            .extend(pieces.into_iter().map(|(text, id)| Subword { text, id }));
        out.word_spans.push(WordSpan {
            word: w,
            first,
            last: out.subwords.len() - 1,
        });
        out.source_words.push(word);
    }
    out
}

/// Binary student×teacher token matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    rows: usize,
    cols: usize,
    ones: BTreeSet<(usize, usize)>,
}

impl AlignmentMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ones: BTreeSet::new(),
        }
    }

    pub fn from_ones(rows: usize, cols: usize, ones: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::zeros(rows, cols);
        for &(i, j) in ones {
            m.set(i, j)?;
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            ones: (0..n).map(|i| (i, i)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn set(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::contract(format!(
                "alignment entry ({i}, {j}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        self.ones.insert((i, j));
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        u8::from(self.ones.contains(&(i, j)))
    }

    /// Coordinates of the ones in row-major order.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ones.iter().copied()
    }

    pub fn count(&self) -> usize {
        self.ones.len()
    }

    pub fn is_zero(&self) -> bool {
        self.ones.is_empty()
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            ones: self.ones.iter().map(|&(i, j)| (j, i)).collect(),
        }
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.ones.iter().filter(|&&(r, _)| r == i).count()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        self.ones.iter().filter(|&&(_, c)| c == j).count()
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

/// Which (student word, teacher word) span pairs may produce matches.
#[derive(Clone, Copy, Debug)]
pub enum SpanScope<'a> {
    /// Word `k` of the student pairs with word `k` of the teacher (tag lists).
    SameWordIndex,
    /// Explicit `(student_word, teacher_word)` pairs (aligned code-switched words).
    Pairs(&'a [(usize, usize)]),
}

/// Marks `(i, j)` when student subword `i` and teacher subword `j` have the
/// same string, lie in a candidate span pair and sit at the same offset
/// within their spans.
pub fn match_matrix(student: &TokenizedText, teacher: &TokenizedText, scope: SpanScope<'_>) -> Result<AlignmentMatrix> {
    let pairs: Vec<(usize, usize)> = match scope {
        SpanScope::SameWordIndex => student
            .word_spans
            .iter()
            .filter(|s| teacher.span_of_word(s.word).is_some())
            .map(|s| (s.word, s.word))
            .collect(),
        SpanScope::Pairs(p) => {
            let mut seen_s = BTreeSet::new();
            let mut seen_t = BTreeSet::new();
            for &(s, t) in p {
                if s >= student.source_words.len() || t >= teacher.source_words.len() {
                    return Err(Error::contract(format!(
                        "span pair ({s}, {t}) outside word ranges {} and {}",
                        student.source_words.len(),
                        teacher.source_words.len()
                    )));
                }
                if !seen_s.insert(s) || !seen_t.insert(t) {
                    return Err(Error::contract(format!("span pair ({s}, {t}) reuses a word")));
                }
            }
            p.to_vec()
        }
    };

    let mut m = AlignmentMatrix::zeros(student.len(), teacher.len());
    for (sw, tw) in pairs {
        // Words dropped by truncation have no span and contribute nothing.
        let (Some(ss), Some(ts)) = (student.span_of_word(sw), teacher.span_of_word(tw)) else {
            continue;
        };
        for k in 0..ss.len().min(ts.len()) {
            let (i, j) = (ss.first + k, ts.first + k);
            if student.subwords[i].text == teacher.subwords[j].text {
                m.set(i, j)?;
            }
        }
    }
    Ok(m)
}
