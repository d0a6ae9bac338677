//! Answer classes: frequency ranking, merging of classes that share a
//! translation, coverage and training targets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerVocabulary {
    /// Canonical string of each class, indexed by class id.
    classes: Vec<String>,
    /// Surface answers merged into each class.
    members: Vec<BTreeSet<String>>,
    /// Occurrence count of each class in the build data.
    frequency: Vec<u64>,
    /// Fraction of build-data answer occurrences that some class covers.
    coverage: f64,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    fn assemble(
        classes: Vec<String>,
        members: Vec<BTreeSet<String>>,
        frequency: Vec<u64>,
        coverage: f64,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (id, m) in members.iter().enumerate() {
            for a in m {
                if index.insert(a.clone(), id).is_some() {
                    return Err(Error::contract(format!("answer {a:?} belongs to two classes")));
                }
            }
        }
        let distinct: BTreeSet<&String> = classes.iter().collect();
        if distinct.len() != classes.len() {
            return Err(Error::contract("answer classes are not distinct"));
        }
        Ok(Self {
            classes,
            members,
            frequency,
            coverage,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn canonical(&self, class: usize) -> Option<&str> {
        self.classes.get(class).map(String::as_str)
    }

    pub fn members(&self, class: usize) -> Option<&BTreeSet<String>> {
        self.members.get(class)
    }

    pub fn frequency(&self, class: usize) -> u64 {
        self.frequency.get(class).copied().unwrap_or(0)
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    /// Class of a surface answer.
    pub fn class_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    /// TSV lines: `class_id  canonical  members…  frequency`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, c) in self.classes.iter().enumerate() {
            let members: Vec<&str> = self.members[id].iter().map(String::as_str).collect();
            let _ = writeln!(out, "{id}\t{c}\t{}\t{}", members.join("\t"), self.frequency[id]);
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut classes = Vec::new();
        let mut members = Vec::new();
        let mut frequency = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 4 {
                return Err(Error::format(
                    path,
                    i + 1,
                    "expected class_id, canonical, members, frequency",
                ));
            }
            let id: usize = f[0]
                .parse()
                .map_err(|_| Error::format(path, i + 1, format!("bad class id {:?}", f[0])))?;
            if id != classes.len() {
                return Err(Error::format(path, i + 1, format!("class id {id} out of order")));
            }
            let freq: u64 = f[f.len() - 1]
                .parse()
                .map_err(|_| Error::format(path, i + 1, format!("bad frequency {:?}", f[f.len() - 1])))?;
            classes.push(f[1].to_string());
            members.push(f[2..f.len() - 1].iter().map(|s| s.to_string()).collect());
            frequency.push(freq);
        }
        // Coverage is not persisted; it is recomputed against data when needed.
        Self::assemble(classes, members, frequency, 0.0).map_err(|e| Error::format(path, 0, e.to_string()))
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

fn counts<'a>(answers: impl IntoIterator<Item = &'a str>) -> BTreeMap<&'a str, u64> {
    let mut c = BTreeMap::new();
    for a in answers {
        *c.entry(a).or_insert(0) += 1;
    }
    c
}

/// Top-`k` answers by frequency, ties broken lexicographically.
pub fn build_answer_vocab<'a>(answers: impl IntoIterator<Item = &'a str>, k: usize) -> Result<AnswerVocabulary> {
    if k == 0 {
        return Err(Error::contract("answer vocabulary size must be at least 1"));
    }
    let freq = counts(answers);
    let total: u64 = freq.values().sum();
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if ranked.len() < k {
        log::warn!("only {} distinct answers for {k} requested classes", ranked.len());
    }
    ranked.truncate(k);
    let covered: u64 = ranked.iter().map(|r| r.1).sum();
    let coverage = if total == 0 { 0.0 } else { covered as f64 / total as f64 };
    AnswerVocabulary::assemble(
        ranked.iter().map(|r| r.0.to_string()).collect(),
        ranked.iter().map(|r| BTreeSet::from([r.0.to_string()])).collect(),
        ranked.iter().map(|r| r.1).collect(),
        coverage,
    )
}

/// Merges classes whose canonical strings translate identically. The merged
/// class takes the translation as its canonical string and sits where its
/// first member class was.
pub fn merge_by_translation(
    vocab: &AnswerVocabulary,
    translations: &BTreeMap<String, String>,
) -> Result<AnswerVocabulary> {
    let missing: Vec<&str> = vocab
        .classes
        .iter()
        .filter(|c| !translations.contains_key(*c))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "no translation for answers: {}",
            missing.join(", ")
        )));
    }
    let mut position: HashMap<&str, usize> = HashMap::new();
    let mut classes: Vec<String> = Vec::new();
    let mut members: Vec<BTreeSet<String>> = Vec::new();
    let mut frequency: Vec<u64> = Vec::new();
    for (id, c) in vocab.classes.iter().enumerate() {
        let t = translations[c].as_str();
        let slot = *position.entry(t).or_insert_with(|| {
            classes.push(t.to_string());
            members.push(BTreeSet::new());
            frequency.push(0);
            classes.len() - 1
        });
        members[slot].extend(vocab.members[id].iter().cloned());
        frequency[slot] += vocab.frequency[id];
    }
    AnswerVocabulary::assemble(classes, members, frequency, vocab.coverage)
}

/// Fraction of answer occurrences that belong to some class.
pub fn coverage<'a>(answers: impl IntoIterator<Item = &'a str>, vocab: &AnswerVocabulary) -> Result<f64> {
    let (mut total, mut hit) = (0u64, 0u64);
    for a in answers {
        total += 1;
        if vocab.class_of(a).is_some() {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::contract("coverage of an empty answer set"));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// One answer per question, one-hot target.
    #[default]
    Single,
    /// Annotator multiset, per-class score `min(count / 3, 1)`.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTarget {
    pub scores: Vec<f64>,
    /// False when no answer falls in the vocabulary.
    pub covered: bool,
}

impl EncodedTarget {
    /// Class index of a covered single-answer target.
    pub fn class(&self) -> Option<usize> {
        if !self.covered {
            return None;
        }
        self.scores.iter().position(|&s| s == 1.0)
    }
}

/// Per-class score from annotator counts.
pub fn soft_score(count: u32) -> f64 {
    (count as f64 / 3.0).min(1.0)
}

pub fn encode_targets(answers: &[(String, u32)], vocab: &AnswerVocabulary, mode: TargetMode) -> Result<EncodedTarget> {
    let mut scores = vec![0.0; vocab.len()];
    match mode {
        TargetMode::Single => {
            let [(a, _)] = answers else {
                return Err(Error::contract(format!(
                    "single-label target needs one answer, got {}",
                    answers.len()
                )));
            };
            let class = vocab.class_of(a);
            if let Some(c) = class {
                scores[c] = 1.0;
            }
            Ok(EncodedTarget {
                scores,
                covered: class.is_some(),
            })
        }
        TargetMode::Soft => {
            let mut per_class: BTreeMap<usize, u32> = BTreeMap::new();
            for (a, n) in answers {
                if let Some(c) = vocab.class_of(a) {
                    *per_class.entry(c).or_insert(0) += n;
                }
            }
            for (&c, &n) in &per_class {
                scores[c] = soft_score(n);
            }
            Ok(EncodedTarget {
                scores,
                covered: !per_class.is_empty(),
            })
        }
    }
}

/// The answer with the largest annotator count (first on ties); used as
/// the single reference of a multi-annotator record.
pub fn majority_answer(answers: &[(String, u32)]) -> Option<&str> {
    let mut best: Option<(&str, u32)> = None;
    for (a, n) in answers {
        if best.is_none_or(|b| *n > b.1) {
            best = Some((a, *n));
        }
    }
    best.map(|b| b.0)
}
