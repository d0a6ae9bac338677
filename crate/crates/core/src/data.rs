//! Dataset records, JSONL ingestion, region-feature files and assembly of
//! encoder inputs under the sequence budgets.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codemix::{sentence_seed, CodeMixedSentence, CodeMixer, SentencePair, WordAlignment};
use crate::distill::DistillationBatchItem;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RegionFeatures, WordTagImageTriple};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenize::{pre_tokenize, tokenize_words, SubwordVocab, TokenizedText};

/// One question about one image, in one language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub lang: String,
    /// `(answer, annotator count)` pairs.
    #[serde(default)]
    pub answers: Vec<(String, u32)>,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Inline region features, one vector per region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    /// Key into a [`FeatureStore`] when features are not inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<String>,
    /// Object label of each region, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub region_labels: Vec<String>,
}

impl ExampleRecord {
    pub fn words(&self) -> Vec<String> {
        pre_tokenize(&self.question)
    }

    fn validate(&self, require_answers: bool) -> std::result::Result<(), String> {
        if require_answers && self.answers.is_empty() {
            return Err(format!("record {} has no answers", self.question_id));
        }
        match (&self.features, &self.feature_ref) {
            (None, None) => Err(format!(
                "record {} has neither features nor a feature reference",
                self.question_id
            )),
            (Some(f), _) => {
                if let Some(first) = f.first() {
                    if f.iter().any(|v| v.len() != first.len()) {
                        return Err(format!("record {} has ragged feature vectors", self.question_id));
                    }
                }
                if f.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(format!("record {} has non-finite features", self.question_id));
                }
                if !self.region_labels.is_empty() && self.region_labels.len() != f.len() {
                    return Err(format!(
                        "record {} has {} region labels for {} regions",
                        self.question_id,
                        self.region_labels.len(),
                        f.len()
                    ));
                }
                Ok(())
            }
            (None, Some(_)) => Ok(()),
        }
    }

    /// Region feature rows, inline or from `store`.
    pub fn region_rows(&self, store: Option<&FeatureStore>) -> Result<Vec<Vec<f64>>> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        let key = self
            .feature_ref
            .as_deref()
            .ok_or_else(|| Error::contract(format!("record {} has no features", self.question_id)))?;
        let store = store.ok_or_else(|| {
            Error::contract(format!(
                "record {} references features but no feature file was given",
                self.question_id
            ))
        })?;
        store.get(key)
    }
}

/// An English record and its translation over the same image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelRecord {
    pub source: ExampleRecord,
    pub target: ExampleRecord,
    /// `(source_word, target_word)` links over pre-tokenized questions.
    pub alignment: WordAlignment,
}

impl ParallelRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        self.source.validate(false)?;
        self.target.validate(false)?;
        let (s, t) = (&self.source, &self.target);
        if s.image_id != t.image_id || s.tags != t.tags || s.features != t.features || s.feature_ref != t.feature_ref {
            return Err(format!("pair {}: image side differs between languages", s.question_id));
        }
        self.alignment
            .check_bounds(s.words().len(), t.words().len())
            .map_err(|e| format!("pair {}: {e}", s.question_id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Task,
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Task(Vec<ExampleRecord>),
    Parallel(Vec<ParallelRecord>),
}

/// A rejected JSONL line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<R> {
    pub records: Vec<R>,
    pub errors: Vec<LineError>,
}

trait Validate {
    fn check(&self) -> std::result::Result<(), String>;
}

impl Validate for ExampleRecord {
    fn check(&self) -> std::result::Result<(), String> {
        self.validate(true)
    }
}

impl Validate for ParallelRecord {
    fn check(&self) -> std::result::Result<(), String> {
        self.validate()
    }
}

fn load_jsonl<R: DeserializeOwned + Validate>(path: &Path, strict: bool) -> Result<Loaded<R>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<R>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.check().map(|_| r))
        {
            Ok(r) => records.push(r),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    if strict && !errors.is_empty() {
        let lines: Vec<String> = errors.iter().map(|e| e.line.to_string()).collect();
        return Err(Error::format(
            path,
            errors[0].line,
            format!(
                "{} malformed line(s): {}; first: {}",
                errors.len(),
                lines.join(", "),
                errors[0].message
            ),
        ));
    }
    Ok(Loaded { records, errors })
}

pub fn load_task(path: &Path, strict: bool) -> Result<Loaded<ExampleRecord>> {
    load_jsonl(path, strict)
}

pub fn load_parallel(path: &Path, strict: bool) -> Result<Loaded<ParallelRecord>> {
    load_jsonl(path, strict)
}

/// Loads either schema; malformed lines abort (strict) or are dropped with
/// a warning.
pub fn load_dataset(path: &Path, schema: Schema, strict: bool) -> Result<Dataset> {
    fn warn<R>(path: &Path, l: Loaded<R>) -> Vec<R> {
        for e in &l.errors {
            log::warn!("{}:{}: {}", path.display(), e.line, e.message);
        }
        l.records
    }
    Ok(match schema {
        Schema::Task => Dataset::Task(warn(path, load_task(path, strict)?)),
        Schema::Parallel => Dataset::Parallel(warn(path, load_parallel(path, strict)?)),
    })
}

pub fn dump_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Region features keyed by image id: a little-endian `f32` blob plus a
/// tab-separated text index (`image_id  offset  rows  cols`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    entries: HashMap<String, Vec<Vec<f64>>>,
}

impl FeatureStore {
    pub fn from_map(entries: HashMap<String, Vec<Vec<f64>>>) -> Self {
        Self { entries }
    }

    pub fn get(&self, key: &str) -> Result<Vec<Vec<f64>>> {
        self.entries
            .get(key)
            .cloned()
            .ok_or_else(|| Error::contract(format!("no features for image {key}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn index_path(blob: &Path) -> PathBuf {
        blob.with_extension("idx")
    }

    pub fn write(&self, blob: &Path) -> Result<()> {
        let idx_path = Self::index_path(blob);
        let mut bytes = Vec::new();
        let mut index = String::new();
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for key in keys {
            let rows = &self.entries[key];
            let cols = rows.first().map_or(0, Vec::len);
            index.push_str(&format!("{key}\t{}\t{}\t{cols}\n", bytes.len(), rows.len()));
            for v in rows.iter().flatten() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
        fs::write(&idx_path, index).map_err(|e| Error::io(&idx_path, e))
    }

    pub fn open(blob: &Path) -> Result<Self> {
        let idx_path = Self::index_path(blob);
        let mut bytes = Vec::new();
        File::open(blob)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(blob, e))?;
        let index = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
        let mut entries = HashMap::new();
        for (i, line) in index.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = (f.len() == 4)
                .then(|| {
                    Some((
                        f[1].parse::<usize>().ok()?,
                        f[2].parse::<usize>().ok()?,
                        f[3].parse::<usize>().ok()?,
                    ))
                })
                .flatten();
            let Some((offset, rows, cols)) = parsed else {
                return Err(Error::format(&idx_path, i + 1, "expected image_id, offset, rows, cols"));
            };
            let end = offset + rows * cols * 4;
            if end > bytes.len() {
                return Err(Error::format(
                    &idx_path,
                    i + 1,
                    "entry runs past the end of the feature blob",
                ));
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let matrix = values.chunks(cols.max(1)).take(rows).map(<[f64]>::to_vec).collect();
            entries.insert(f[0].to_string(), matrix);
        }
        Ok(Self { entries })
    }
}

/// `[CLS] question [SEP] tags [SEP]` within `max_text_tokens`, dropping
/// trailing tag subwords first and trailing question subwords second;
/// regions keep their first `max_image_tokens` rows.
pub fn assemble_triple<T: Scalar>(
    question: &TokenizedText,
    tags: &[TokenizedText],
    regions: &[Vec<f64>],
    region_labels: &[String],
    vocab: &SubwordVocab,
    config: &ModelConfig,
) -> Result<WordTagImageTriple<T>> {
    let budget = config.max_text_tokens.saturating_sub(3);
    let mut question = question.clone();
    let mut tags: Vec<TokenizedText> = tags.to_vec();
    let tag_total: usize = tags.iter().map(TokenizedText::len).sum();
    let mut excess = (question.len() + tag_total).saturating_sub(budget);

    while excess > 0 {
        let Some(last) = tags.last_mut() else { break };
        let drop = excess.min(last.len());
        let keep = last.len() - drop;
        last.truncate(keep);
        excess -= drop;
        if last.is_empty() {
            tags.pop();
        }
    }
    if excess > 0 {
        let keep = question.len() - excess;
        question.truncate(keep);
    }

    let n_regions = regions.len().min(config.max_image_tokens);
    let rows: Vec<Vec<T>> = regions[..n_regions]
        .iter()
        .map(|r| r.iter().map(|&x| T::of(x)).collect())
        .collect();
    let vectors = if rows.is_empty() {
        Matrix::zeros(0, config.feature_dim)
    } else {
        Matrix::from_rows(&rows)
    };
    Ok(WordTagImageTriple {
        question,
        tags,
        regions: RegionFeatures::new(vectors)?,
        region_labels: region_labels.iter().take(n_regions).cloned().collect(),
        specials: vocab.specials(),
    })
}

/// Tokenizes and assembles one record.
pub fn assemble_record<T: Scalar>(
    record: &ExampleRecord,
    vocab: &SubwordVocab,
    config: &ModelConfig,
    store: Option<&FeatureStore>,
) -> Result<WordTagImageTriple<T>> {
    let question = tokenize_words(&record.words(), vocab);
    let tags: Vec<TokenizedText> = record
        .tags
        .iter()
        .map(|t| tokenize_words(&pre_tokenize(t), vocab))
        .collect();
    let regions = record.region_rows(store)?;
    assemble_triple(&question, &tags, &regions, &record.region_labels, vocab, config)
}

/// Everything needed to turn parallel records into distillation items.
pub struct DistillationInputs<'a> {
    pub teacher_vocab: &'a SubwordVocab,
    pub student_vocab: &'a SubwordVocab,
    pub teacher_config: &'a ModelConfig,
    pub student_config: &'a ModelConfig,
    pub ratio: f64,
    pub policy: crate::codemix::MixPolicy,
    pub seed: u64,
    /// Also assemble the plain target question (two-pass distillation).
    pub with_plain: bool,
    pub store: Option<&'a FeatureStore>,
}

/// Code-mixes every target question (seed = base seed + pair index) and
/// builds the teacher/student inputs and match matrices.
pub fn prepare_distillation<T: Scalar>(
    records: &[ParallelRecord],
    inputs: &DistillationInputs<'_>,
) -> Result<(Vec<DistillationBatchItem<T>>, Vec<CodeMixedSentence>)> {
    let mixer = CodeMixer {
        student: inputs.student_vocab,
        teacher: inputs.teacher_vocab,
        ratio: inputs.ratio,
        policy: inputs.policy,
    };
    let mut items = Vec::with_capacity(records.len());
    let mut mixed_all = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let source = rec.source.words();
        let target = rec.target.words();
        let pair = SentencePair {
            source: &source,
            target: &target,
        };
        let mixed = mixer.mix(pair, &rec.alignment, sentence_seed(inputs.seed, i), i)?;
        let regions = rec.source.region_rows(inputs.store)?;
        let labels = &rec.source.region_labels;
        let tag_words: Vec<Vec<String>> = rec.source.tags.iter().map(|t| pre_tokenize(t)).collect();

        let tags_for =
            |v: &SubwordVocab| -> Vec<TokenizedText> { tag_words.iter().map(|w| tokenize_words(w, v)).collect() };
        let teacher_input = assemble_triple(
            &tokenize_words(&source, inputs.teacher_vocab),
            &tags_for(inputs.teacher_vocab),
            &regions,
            labels,
            inputs.teacher_vocab,
            inputs.teacher_config,
        )?;
        let student_tags = tags_for(inputs.student_vocab);
        let student_input = assemble_triple(
            &tokenize_words(&mixed.words, inputs.student_vocab),
            &student_tags,
            &regions,
            labels,
            inputs.student_vocab,
            inputs.student_config,
        )?;
        let plain = if inputs.with_plain {
            Some(assemble_triple(
                &tokenize_words(&target, inputs.student_vocab),
                &student_tags,
                &regions,
                labels,
                inputs.student_vocab,
                inputs.student_config,
            )?)
        } else {
            None
        };
        items.push(DistillationBatchItem::new(
            teacher_input,
            student_input,
            plain,
            &mixed.replaced,
        )?);
        mixed_all.push(mixed);
    }
    Ok((items, mixed_all))
}

/// Sizes and rates of a synthetic bilingual corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub pairs: usize,
    pub task_examples: usize,
    pub feature_dim: usize,
    /// Number of object classes drawn from the built-in lexicon.
    pub objects: usize,
    /// Maximum regions per image.
    pub max_regions: usize,
    /// Probability that an English word segments identically under the
    /// student vocabulary.
    pub eligibility_rate: f64,
    /// Probability that a sentence carries an unaligned particle or a
    /// many-to-one link.
    pub alignment_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pairs: 64,
            task_examples: 32,
            feature_dim: 16,
            objects: 12,
            max_regions: 4,
            eligibility_rate: 0.8,
            alignment_noise: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub teacher_vocab: SubwordVocab,
    pub student_vocab: SubwordVocab,
    pub parallel: Vec<ParallelRecord>,
    pub task: Vec<ExampleRecord>,
    /// English answer → target-language answer.
    pub answer_translations: BTreeMap<String, String>,
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    crate::synth::generate(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{CLS, PAD, SEP, UNK};

    fn vocab() -> SubwordVocab {
        let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        entries.extend(["q", "t", "##x"].iter().map(|s| s.to_string()));
        SubwordVocab::from_entries(entries, Path::new("<test>")).unwrap()
    }

    fn config(max_text: usize, max_image: usize) -> ModelConfig {
        let mut c = ModelConfig::new(8, 1, 1, 2, 7, 2);
        c.max_text_tokens = max_text;
        c.max_image_tokens = max_image;
        c
    }

    fn record(id: &str) -> ExampleRecord {
        ExampleRecord {
            question_id: id.into(),
            image_id: "img".into(),
            question: "q q".into(),
            lang: "en".into(),
            answers: vec![("yes".into(), 10)],
            tags: vec!["t".into()],
            features: Some(vec![vec![0.5, 1.0]]),
            feature_ref: None,
            region_labels: vec!["t".into()],
        }
    }

    #[test]
    fn short_inputs_are_not_truncated() {
        let v = vocab();
        let q = tokenize_words(&["q", "q"], &v);
        let tags = vec![tokenize_words(&["tx"], &v)];
        let t: WordTagImageTriple<f64> =
            assemble_triple(&q, &tags, &[vec![1.0, 2.0]], &[], &v, &config(128, 50)).unwrap();
        assert_eq!(t.question.len(), 2);
        assert_eq!(t.tag_token_count(), 2);
        assert_eq!(t.text_len(), 7);
        let lay = crate::model::layout(&t, 0, 0);
        assert_eq!(lay.token_ids, vec![2, 4, 4, 3, 5, 6, 3]);
    }

    #[test]
    fn long_question_drops_tags_then_question() {
        let v = vocab();
        let q = tokenize_words(&vec!["q"; 200], &v);
        let tags = vec![tokenize_words(&["t"], &v), tokenize_words(&["tx"], &v)];
        let t: WordTagImageTriple<f64> = assemble_triple(&q, &tags, &[], &[], &v, &config(128, 50)).unwrap();
        // 128 - 3 specials = 125 question subwords; every tag dropped first.
        assert_eq!(t.question.len(), 125);
        assert_eq!(t.tag_token_count(), 0);
        assert!(t.question.spans_are_consistent());

        // A budget that fits the question but only part of the tags.
        let q = tokenize_words(&["q"; 10], &v);
        let t: WordTagImageTriple<f64> = assemble_triple(&q, &tags, &[], &[], &v, &config(15, 50)).unwrap();
        assert_eq!(t.question.len(), 10);
        assert_eq!(t.tag_token_count(), 2);
        assert_eq!(t.tags.len(), 2);
        assert_eq!(t.tags[1].pieces(), vec!["t"]);
    }

    #[test]
    fn regions_keep_prefix() {
        let v = vocab();
        let regions: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64, 0.0]).collect();
        let t: WordTagImageTriple<f64> =
            assemble_triple(&TokenizedText::default(), &[], &regions, &[], &v, &config(128, 50)).unwrap();
        assert_eq!(t.regions.count(), 50);
        assert_eq!(t.regions.vectors.get(49, 0), 49.0);
    }

    #[test]
    fn empty_file_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        assert_eq!(load_dataset(&p, Schema::Task, true).unwrap(), Dataset::Task(vec![]));
    }

    #[test]
    fn missing_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut r = record("a");
        r.features = None;
        dump_jsonl(&p, &[record("ok"), r]).unwrap();
        match load_task(&p, true) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
        let loaded = load_task(&p, false).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.errors[0].line, 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut b = record("b");
        b.features = None;
        b.feature_ref = Some("img".into());
        b.region_labels.clear();
        let recs = vec![record("a"), b];
        dump_jsonl(&p, &recs).unwrap();
        let once = load_task(&p, true).unwrap().records;
        assert_eq!(once, recs);
        dump_jsonl(&p, &once).unwrap();
        assert_eq!(load_task(&p, true).unwrap().records, once);

        let pr = ParallelRecord {
            source: record("s"),
            target: ExampleRecord {
                question: "t q".into(),
                lang: "hi".into(),
                ..record("t")
            },
            alignment: WordAlignment::new([(0, 1), (1, 0)]),
        };
        let pp = dir.path().join("p.jsonl");
        dump_jsonl(&pp, std::slice::from_ref(&pr)).unwrap();
        let text = fs::read_to_string(&pp).unwrap();
        assert!(text.contains("\"alignment\":\"0-1 1-0\""));
        assert_eq!(load_parallel(&pp, true).unwrap().records, vec![pr]);
    }

    #[test]
    fn parallel_image_side_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let pp = dir.path().join("p.jsonl");
        let mut target = record("t");
        target.tags = vec!["other".into()];
        let pr = ParallelRecord {
            source: record("s"),
            target,
            alignment: WordAlignment::new([(0, 0)]),
        };
        dump_jsonl(&pp, &[pr]).unwrap();
        assert!(load_parallel(&pp, true).is_err());
    }

    #[test]
    fn feature_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let blob = dir.path().join("feats.bin");
        let mut m = HashMap::new();
        m.insert("a".to_string(), vec![vec![0.5, -1.25], vec![2.0, 3.0]]);
        m.insert("b".to_string(), vec![vec![1.0, 1.0]]);
        let store = FeatureStore::from_map(m);
        store.write(&blob).unwrap();
        let back = FeatureStore::open(&blob).unwrap();
        assert_eq!(back, store);
        let mut r = record("x");
        r.features = None;
        r.feature_ref = Some("a".into());
        assert_eq!(r.region_rows(Some(&back)).unwrap().len(), 2);
        assert!(r.region_rows(None).is_err());
    }
}
