//! Word alignments (Pharaoh `i-j` format) and contextual code-switching of
//! target-language sentences with their aligned English words.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{SubwordVocab, UNK};

/// Links between source (English) and target word indices. Serialized as a
/// Pharaoh line.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WordAlignment {
    pairs: BTreeSet<(usize, usize)>,
}

impl WordAlignment {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            pairs: pairs.into_iter().collect(),
        }
    }

    /// `(source_word, target_word)` links in ascending order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, source: usize, target: usize) -> bool {
        self.pairs.contains(&(source, target))
    }

    pub fn sources_of(&self, target: usize) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.1 == target).map(|p| p.0).collect()
    }

    pub fn targets_of(&self, source: usize) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.0 == source).map(|p| p.1).collect()
    }

    pub fn check_bounds(&self, source_len: usize, target_len: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(s, t)| s >= source_len || t >= target_len) {
            Some(&(s, t)) => Err(Error::contract(format!(
                "alignment link {s}-{t} outside sentence lengths {source_len}/{target_len}"
            ))),
            None => Ok(()),
        }
    }

    pub fn to_pharaoh(&self) -> String {
        self.pairs
            .iter()
            .map(|(s, t)| format!("{s}-{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses one Pharaoh line; `line_no` is 1-based and only used in errors.
    pub fn parse_pharaoh(line: &str, path: &Path, line_no: usize) -> Result<Self> {
        let mut pairs = BTreeSet::new();
        for tok in line.split_whitespace() {
            let parsed = tok
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
            match parsed {
                Some(p) => {
                    pairs.insert(p);
                }
                None => {
                    return Err(Error::format(
                        path,
                        line_no,
                        format!("malformed alignment token {tok:?}"),
                    ))
                }
            }
        }
        Ok(Self { pairs })
    }
}

impl TryFrom<String> for WordAlignment {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse_pharaoh(&s, Path::new("<alignment>"), 1)
    }
}

impl From<WordAlignment> for String {
    fn from(a: WordAlignment) -> String {
        a.to_pharaoh()
    }
}

pub fn load_alignments(path: &Path) -> Result<Vec<WordAlignment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| WordAlignment::parse_pharaoh(line, path, i + 1))
        .collect()
}

/// Source (English) and target words of one parallel sentence.
#[derive(Clone, Copy, Debug)]
pub struct SentencePair<'a> {
    pub source: &'a [String],
    pub target: &'a [String],
}

/// Target words whose single aligned English word tokenizes to the same
/// subword sequence under both vocabularies.
///
/// A target word qualifies only through a one-to-one link: it has exactly
/// one aligned source word, and that source word links to no other target.
/// English words that fall back to the unknown token never qualify.
pub fn eligible_words(
    pair: SentencePair<'_>,
    align: &WordAlignment,
    student: &SubwordVocab,
    teacher: &SubwordVocab,
) -> Vec<usize> {
    (0..pair.target.len())
        .filter(|&t| {
            let sources = align.sources_of(t);
            let [s] = sources.as_slice() else { return false };
            if *s >= pair.source.len() || align.targets_of(*s).len() != 1 {
                return false;
            }
            same_segmentation(&pair.source[*s], student, teacher)
        })
        .collect()
}

/// True when `word` splits into identical subword strings under both vocabularies.
pub fn same_segmentation(word: &str, student: &SubwordVocab, teacher: &SubwordVocab) -> bool {
    let word = word.to_lowercase();
    let s = student.segment(&word);
    let t = teacher.segment(&word);
    !s.is_empty() && s.iter().all(|(p, _)| p != UNK) && s.len() == t.len() && s.iter().zip(&t).all(|(a, b)| a.0 == b.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixDenominator {
    /// The ratio applies to all target words; selection is capped by eligibility.
    #[default]
    AllWords,
    /// The ratio applies to eligible words only.
    EligibleWords,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSampling {
    /// Exactly `round(ratio × denominator)` words, capped by eligibility.
    #[default]
    ExactCount,
    /// Independent per-word draws with the same expected count.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPolicy {
    #[serde(default)]
    pub denominator: MixDenominator,
    #[serde(default)]
    pub sampling: MixSampling,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMixedSentence {
    pub words: Vec<String>,
    /// `(target_word, source_word)` for every replaced position, ascending.
    pub replaced: Vec<(usize, usize)>,
    /// Index of the parallel pair this sentence came from.
    pub origin: usize,
}

impl CodeMixedSentence {
    /// The unmodified target sentence.
    pub fn identity(pair: SentencePair<'_>, origin: usize) -> Self {
        Self {
            words: pair.target.to_vec(),
            replaced: Vec::new(),
            origin,
        }
    }
}

/// Seed for sentence `index` derived from a corpus-level seed.
pub fn sentence_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Replaces a seeded random subset of `eligible` target words with their
/// aligned English words.
pub fn code_mix(
    pair: SentencePair<'_>,
    align: &WordAlignment,
    eligible: &[usize],
    ratio: f64,
    seed: u64,
    policy: MixPolicy,
    origin: usize,
) -> Result<CodeMixedSentence> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("code-mix ratio {ratio} outside [0, 1]")));
    }
    let denom = match policy.denominator {
        MixDenominator::AllWords => pair.target.len(),
        MixDenominator::EligibleWords => eligible.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = match policy.sampling {
        MixSampling::ExactCount => {
            let k = ((ratio * denom as f64).round() as usize).min(eligible.len());
            index::sample(&mut rng, eligible.len(), k)
                .into_iter()
                .map(|i| eligible[i])
                .collect()
        }
        MixSampling::Bernoulli => {
            let p = if eligible.is_empty() {
                0.0
            } else {
                (ratio * denom as f64 / eligible.len() as f64).min(1.0)
            };
            eligible.iter().copied().filter(|_| rng.random_bool(p)).collect()
        }
    };
    chosen.sort_unstable();

    let mut out = CodeMixedSentence::identity(pair, origin);
    for t in chosen {
        let sources = align.sources_of(t);
        let [s] = sources.as_slice() else {
            return Err(Error::contract(format!("target word {t} is not one-to-one aligned")));
        };
        out.words[t] = pair.source[*s].clone();
        out.replaced.push((t, *s));
    }
    Ok(out)
}

/// Bundles the two vocabularies, the ratio and the policy for corpus-level use.
#[derive(Clone, Copy, Debug)]
pub struct CodeMixer<'a> {
    pub student: &'a SubwordVocab,
    pub teacher: &'a SubwordVocab,
    pub ratio: f64,
    pub policy: MixPolicy,
}

impl CodeMixer<'_> {
    pub fn mix(
        &self,
        pair: SentencePair<'_>,
        align: &WordAlignment,
        seed: u64,
        origin: usize,
    ) -> Result<CodeMixedSentence> {
        let eligible = eligible_words(pair, align, self.student, self.teacher);
        code_mix(pair, align, &eligible, self.ratio, seed, self.policy, origin)
    }
}
