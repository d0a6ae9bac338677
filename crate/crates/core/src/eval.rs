//! Accuracy, answer BLEU, question-type buckets and embedding export.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PositionRole, WordTagImageTriple};
use crate::scalar::Scalar;
use crate::vocab::AnswerVocabulary;

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{a} predictions for {b} {what}")));
    }
    if a == 0 {
        return Err(Error::contract(format!("no {what} to score")));
    }
    Ok(())
}

fn is_member(vocab: &AnswerVocabulary, class: usize, answer: &str) -> bool {
    vocab.members(class).is_some_and(|m| m.contains(answer))
}

/// 1 when the predicted class contains the reference string, else 0.
pub fn exact_scores(predictions: &[usize], references: &[&str], vocab: &AnswerVocabulary) -> Result<Vec<f64>> {
    check_lengths(predictions.len(), references.len(), "references")?;
    Ok(predictions
        .iter()
        .zip(references)
        .map(|(&p, r)| if is_member(vocab, p, r) { 1.0 } else { 0.0 })
        .collect())
}

pub fn accuracy_exact(predictions: &[usize], references: &[&str], vocab: &AnswerVocabulary) -> Result<f64> {
    let s = exact_scores(predictions, references, vocab)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// `min(matches / 3, 1)` per item over exactly ten annotations.
pub fn soft_scores(predictions: &[usize], annotations: &[Vec<String>], vocab: &AnswerVocabulary) -> Result<Vec<f64>> {
    check_lengths(predictions.len(), annotations.len(), "annotation sets")?;
    predictions
        .iter()
        .zip(annotations)
        .enumerate()
        .map(|(i, (&p, ann))| {
            if ann.len() != 10 {
                return Err(Error::contract(format!(
                    "item {i} has {} annotations, expected 10",
                    ann.len()
                )));
            }
            let matches = ann.iter().filter(|a| is_member(vocab, p, a)).count();
            Ok((matches as f64 / 3.0).min(1.0))
        })
        .collect()
}

pub fn accuracy_vqa_soft(predictions: &[usize], annotations: &[Vec<String>], vocab: &AnswerVocabulary) -> Result<f64> {
    let s = soft_scores(predictions, annotations, vocab)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Expands `(answer, count)` pairs into the annotator multiset.
pub fn annotation_multiset(answers: &[(String, u32)]) -> Vec<String> {
    answers
        .iter()
        .flat_map(|(a, n)| std::iter::repeat_n(a.clone(), *n as usize))
        .collect()
}

pub fn whitespace_split(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub const BLEU_MAX_ORDER: usize = 4;
pub const BLEU_EPSILON: f64 = 1e-9;

/// Corpus BLEU in `[0, 100]` with clipped n-gram precisions up to order 4
/// and a brevity penalty. A zero match count at some order is replaced by
/// `1e-9`. Orders for which no candidate has any n-gram (answers shorter
/// than n words) are left out and the remaining orders weighted uniformly.
pub fn bleu(predictions: &[&str], references: &[&str], split: impl Fn(&str) -> Vec<String>) -> Result<f64> {
    check_lengths(predictions.len(), references.len(), "references")?;
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        let (p, r) = (split(p), split(r));
        cand_len += p.len();
        ref_len += r.len();
        for n in 1..=BLEU_MAX_ORDER {
            let grams = |w: &[String]| -> HashMap<Vec<String>, usize> {
                let mut m = HashMap::new();
                for g in w.windows(n) {
                    *m.entry(g.to_vec()).or_insert(0) += 1;
                }
                m
            };
            let (pc, rc) = (grams(&p), grams(&r));
            totals[n - 1] += p.len().saturating_sub(n - 1);
            matches[n - 1] += pc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let orders: Vec<usize> = (0..BLEU_MAX_ORDER).filter(|&k| totals[k] > 0).collect();
    let log_precision: f64 = orders
        .iter()
        .map(|&k| {
            let m = if matches[k] == 0 {
                BLEU_EPSILON
            } else {
                matches[k] as f64
            };
            (m / totals[k] as f64).ln()
        })
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision.exp())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRule {
    pub name: String,
    /// Lowercase substring; empty matches every question.
    pub trigger: String,
}

impl QuestionRule {
    pub fn new(name: &str, trigger: &str) -> Self {
        Self {
            name: name.into(),
            trigger: trigger.into(),
        }
    }
}

/// Buckets for English questions, checked in order.
pub fn default_question_rules() -> Vec<QuestionRule> {
    vec![
        QuestionRule::new("number", "how many"),
        QuestionRule::new("color", "what color"),
        QuestionRule::new("yes/no", "is there"),
        QuestionRule::new("other", ""),
    ]
}

pub const CATCH_ALL: &str = "other";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub count: usize,
    pub accuracy: f64,
}

/// Assigns each question to the first rule whose trigger it contains
/// (case-insensitive) and averages the scores per bucket. Questions that
/// match nothing land in an `other` bucket. Empty buckets are omitted.
pub fn question_type_breakdown(questions: &[&str], scores: &[f64], rules: &[QuestionRule]) -> Result<Vec<Bucket>> {
    if questions.len() != scores.len() {
        return Err(Error::contract(format!(
            "{} questions for {} scores",
            questions.len(),
            scores.len()
        )));
    }
    let mut names: Vec<String> = rules.iter().map(|r| r.name.clone()).collect();
    let implicit = names.len();
    names.push(CATCH_ALL.into());
    let mut sums = vec![(0usize, 0.0f64); names.len()];
    for (q, &s) in questions.iter().zip(scores) {
        let q = q.to_lowercase();
        let b = rules
            .iter()
            .position(|r| r.trigger.is_empty() || q.contains(&r.trigger.to_lowercase()))
            .unwrap_or(implicit);
        sums[b].0 += 1;
        sums[b].1 += s;
    }
    Ok(names
        .into_iter()
        .zip(sums)
        .filter(|(_, (n, _))| *n > 0)
        .map(|(name, (count, sum))| Bucket {
            name,
            count,
            accuracy: sum / count as f64,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy_exact: f64,
    /// Present when every item carries ten annotations.
    pub accuracy_soft: Option<f64>,
    pub per_type: Vec<Bucket>,
    pub bleu: f64,
    /// Share of reference answers the class vocabulary can represent.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub predicted_class: usize,
    pub predicted_string: String,
}

/// Index of the largest logit (first on ties).
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Scalar>(model: &Model<T>, inputs: &[WordTagImageTriple<T>]) -> Result<Vec<usize>> {
    let last = BTreeSet::from([model.config().num_layers]);
    inputs
        .iter()
        .map(|t| Ok(argmax(&model.classify(&model.forward(t, &last, None)?)?)))
        .collect()
}

/// One exported hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow<T> {
    pub token: String,
    pub role: &'static str,
    pub label: String,
    pub vector: Vec<T>,
}

/// Hidden states at `layer` of every question or tag subword in `filter`,
/// plus every image region whose object label is in `filter`.
pub fn collect_embeddings<T: Scalar>(
    model: &Model<T>,
    inputs: &[WordTagImageTriple<T>],
    filter: &BTreeSet<String>,
    layer: usize,
) -> Result<Vec<EmbeddingRow<T>>> {
    if layer == 0 || layer > model.config().num_layers {
        return Err(Error::contract(format!(
            "layer {layer} outside 1..={}",
            model.config().num_layers
        )));
    }
    let mut rows = Vec::new();
    if filter.is_empty() {
        return Ok(rows);
    }
    let retain = BTreeSet::from([layer]);
    for t in inputs {
        let out = model.forward(t, &retain, None)?;
        let hidden = out.layer(layer)?;
        let q_pos = out.positions_with(PositionRole::QuestionWord);
        let t_pos = out.positions_with(PositionRole::TagSubword);
        let r_pos = out.positions_with(PositionRole::ImageRegion);
        let tags = t.tag_text();
        for (text, positions) in [(&t.question, &q_pos), (&tags, &t_pos)] {
            for span in &text.word_spans {
                let range = span.first..=span.last;
                for (sub, &pos) in text.subwords[range.clone()].iter().zip(&positions[range]) {
                    let piece = &sub.text;
                    if filter.contains(piece) {
                        rows.push(EmbeddingRow {
                            token: piece.clone(),
                            role: "word",
                            label: text.source_words[span.word].clone(),
                            vector: hidden.row(pos).to_vec(),
                        });
                    }
                }
            }
        }
        for (r, &pos) in r_pos.iter().enumerate() {
            let Some(label) = t.region_labels.get(r) else { continue };
            if filter.contains(label) {
                rows.push(EmbeddingRow {
                    token: label.clone(),
                    role: "region",
                    label: label.clone(),
                    vector: hidden.row(pos).to_vec(),
                });
            }
        }
    }
    Ok(rows)
}

/// TSV with a header; vector components use the shortest text that parses
/// back to the same value.
pub fn embeddings_tsv<T: Scalar>(rows: &[EmbeddingRow<T>], hidden: usize) -> String {
    let mut out = String::from("token\trole\tlabel");
    for d in 0..hidden {
        let _ = write!(out, "\tdim{d}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.token, r.role, r.label);
        for v in &r.vector {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub fn export_embeddings<T: Scalar>(
    model: &Model<T>,
    inputs: &[WordTagImageTriple<T>],
    filter: &BTreeSet<String>,
    layer: usize,
    path: &Path,
) -> Result<usize> {
    let rows = collect_embeddings(model, inputs, filter, layer)?;
    std::fs::write(path, embeddings_tsv(&rows, model.config().hidden_size)).map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}
