//! Deterministic synthetic bilingual VQA corpus.
//!
//! English questions come from three templates over a small object/color
//! lexicon. The target language is a pseudo-language written in Devanagari
//! syllables, so its words never collide with English subwords. Each English
//! word is independently made eligible (identical segmentation under both
//! vocabularies) with the requested probability.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codemix::{same_segmentation, WordAlignment};
use crate::data::{ExampleRecord, ParallelRecord, SynthCorpus, SynthSpec};
use crate::error::{Error, Result};
use crate::tokenize::{SubwordVocab, CLS, CONTINUATION, PAD, SEP, UNK};

const OBJECTS: &[&str] = &[
    "cat",
    "dog",
    "snowboard",
    "bird",
    "car",
    "horse",
    "table",
    "chair",
    "pizza",
    "umbrella",
    "bicycle",
    "bottle",
    "kite",
    "clock",
    "boat",
    "train",
    "bus",
    "apple",
    "banana",
    "laptop",
    "sheep",
    "cake",
    "phone",
    "bench",
];

/// Objects whose teacher segmentation has two pieces.
const SPLITS: &[(&str, &str, &str)] = &[
    ("snowboard", "snow", "board"),
    ("umbrella", "umb", "rella"),
    ("bicycle", "bi", "cycle"),
    ("laptop", "lap", "top"),
    ("banana", "ban", "ana"),
];

const COLORS: &[&str] = &["red", "blue", "green", "white", "black", "yellow"];
const NUMBERS: &[&str] = &["zero", "one", "two", "three", "four", "five", "six"];
const FUNCTION_WORDS: &[&str] = &[
    "what", "color", "is", "the", "how", "many", "are", "there", "a", "in", "picture",
];

const CONSONANTS: &[char] = &[
    'क', 'ख', 'ग', 'च', 'ज', 'ट', 'ड', 'त', 'द', 'न', 'प', 'ब', 'म', 'र', 'ल', 'स', 'ह', 'व', 'य',
];
const VOWEL_SIGNS: &[&str] = &["", "ा", "ि", "ी", "ु", "ू", "े", "ो"];
const PARTICLE: &str = "को";

struct Lexicon {
    /// English word → pseudo-translation.
    translation: BTreeMap<String, String>,
    eligible: BTreeSet<String>,
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    seen.insert(PARTICLE.to_string());
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                let c = *CONSONANTS.choose(rng).expect("non-empty");
                let v = *VOWEL_SIGNS.choose(rng).expect("non-empty");
                format!("{c}{v}")
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn english_words(objects: &[&str]) -> Vec<String> {
    let mut all: BTreeSet<String> = objects.iter().map(|s| s.to_string()).collect();
    all.extend(
        COLORS
            .iter()
            .chain(NUMBERS)
            .chain(FUNCTION_WORDS)
            .chain(["yes", "no"].iter())
            .map(|s| s.to_string()),
    );
    all.into_iter().collect()
}

fn teacher_pieces(word: &str) -> Vec<String> {
    match SPLITS.iter().find(|s| s.0 == word) {
        Some((_, a, b)) => vec![a.to_string(), format!("{CONTINUATION}{b}")],
        None => vec![word.to_string()],
    }
}

/// Student pieces of an ineligible word: everything but the last character,
/// then the last character as a continuation. Single characters are left
/// out and fall back to the unknown token.
fn divergent_pieces(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 2 {
        return Vec::new();
    }
    let head: String = chars[..chars.len() - 1].iter().collect();
    vec![head, format!("{CONTINUATION}{}", chars[chars.len() - 1])]
}

fn vocab_from(pieces: BTreeSet<String>, origin: &str) -> Result<SubwordVocab> {
    let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    entries.extend(pieces);
    SubwordVocab::from_entries(entries, Path::new(origin))
}

struct Scene {
    /// `(object, color)` per region.
    regions: Vec<(usize, usize)>,
}

struct Question {
    source: Vec<String>,
    target: Vec<String>,
    alignment: Vec<(usize, usize)>,
    answer: String,
}

/// One English template instance and its translation. `noise` adds either an
/// unaligned particle or a one-to-two link on the object word.
fn make_question(scene: &Scene, objects: &[&str], lex: &Lexicon, noise: bool, rng: &mut ChaCha8Rng) -> Question {
    let tr = |w: &str| lex.translation[w].clone();
    let kind = rng.random_range(0..3);
    // `order[k]` is the source index of the k-th target word.
    let (source, order, answer): (Vec<String>, Vec<usize>, String) = match kind {
        0 => {
            let &(o, c) = scene.regions.choose(rng).expect("scene has regions");
            let src = ["what", "color", "is", "the", objects[o]];
            (
                src.iter().map(|s| s.to_string()).collect(),
                vec![4, 1, 0, 2],
                COLORS[c].to_string(),
            )
        }
        1 => {
            let o = rng.random_range(0..objects.len());
            let count = scene.regions.iter().filter(|r| r.0 == o).count();
            let src = ["how", "many", objects[o], "are", "there"];
            (
                src.iter().map(|s| s.to_string()).collect(),
                vec![2, 4, 0, 1, 3],
                NUMBERS[count].to_string(),
            )
        }
        _ => {
            let o = rng.random_range(0..objects.len());
            let present = scene.regions.iter().any(|r| r.0 == o);
            let src = ["is", "there", "a", objects[o], "in", "the", "picture"];
            let ans = if present { "yes" } else { "no" };
            (
                src.iter().map(|s| s.to_string()).collect(),
                vec![6, 4, 3, 1, 0],
                ans.to_string(),
            )
        }
    };
    let object_src = match kind {
        0 => 4,
        1 => 2,
        _ => 3,
    };
    let mut target = Vec::new();
    let mut alignment = Vec::new();
    for &s in &order {
        alignment.push((s, target.len()));
        target.push(tr(&source[s]));
        if noise && s == object_src {
            if rng.random_bool(0.5) {
                target.push(PARTICLE.to_string());
            } else {
                alignment.push((s, target.len()));
                target.push(PARTICLE.to_string());
            }
        }
    }
    Question {
        source,
        target,
        alignment,
        answer,
    }
}

fn answers(main: &str, pool: &[&str], rng: &mut ChaCha8Rng) -> Vec<(String, u32)> {
    if rng.random_bool(0.25) {
        let alt = pool.iter().filter(|a| **a != main).collect::<Vec<_>>();
        if let Some(alt) = alt.choose(rng) {
            let k = rng.random_range(1..=4);
            return vec![(main.to_string(), 10 - k), (alt.to_string(), k)];
        }
    }
    vec![(main.to_string(), 10)]
}

fn answer_pool(answer: &str) -> &'static [&'static str] {
    if COLORS.contains(&answer) {
        COLORS
    } else if NUMBERS.contains(&answer) {
        NUMBERS
    } else {
        &["yes", "no"]
    }
}

pub(crate) fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.feature_dim == 0 || spec.objects == 0 || spec.max_regions == 0 {
        return Err(Error::config(
            "synthetic corpus needs positive feature_dim, objects and max_regions",
        ));
    }
    if spec.objects > OBJECTS.len() {
        return Err(Error::config(format!(
            "at most {} object classes are available",
            OBJECTS.len()
        )));
    }
    if spec.max_regions >= NUMBERS.len() {
        return Err(Error::config(format!("max_regions must be below {}", NUMBERS.len())));
    }
    for (name, p) in [
        ("eligibility_rate", spec.eligibility_rate),
        ("alignment_noise", spec.alignment_noise),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("{name} {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = &OBJECTS[..spec.objects];
    let english = english_words(objects);

    let translations = pseudo_words(english.len(), &mut rng);
    let translation: BTreeMap<String, String> = english.iter().cloned().zip(translations).collect();
    let eligible: BTreeSet<String> = english
        .iter()
        .filter(|_| rng.random_bool(spec.eligibility_rate))
        .cloned()
        .collect();
    let lex = Lexicon { translation, eligible };

    let mut teacher_set = BTreeSet::new();
    let mut student_set: BTreeSet<String> = lex.translation.values().cloned().collect();
    student_set.insert(PARTICLE.to_string());
    for w in &english {
        let pieces = teacher_pieces(w);
        teacher_set.extend(pieces.iter().cloned());
        if lex.eligible.contains(w) {
            student_set.extend(pieces);
        } else {
            student_set.extend(divergent_pieces(w));
        }
    }
    let teacher_vocab = vocab_from(teacher_set, "<synthetic teacher vocabulary>")?;
    let student_vocab = vocab_from(student_set, "<synthetic student vocabulary>")?;
    for w in &english {
        if same_segmentation(w, &student_vocab, &teacher_vocab) != lex.eligible.contains(w) {
            return Err(Error::contract(format!(
                "synthetic vocabularies disagree on eligibility of {w}"
            )));
        }
    }

    let proto =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..spec.feature_dim).map(|_| StandardNormal.sample(rng)).collect() };
    let object_protos: Vec<Vec<f64>> = (0..objects.len()).map(|_| proto(&mut rng)).collect();
    let color_protos: Vec<Vec<f64>> = (0..COLORS.len()).map(|_| proto(&mut rng)).collect();

    let scene = |rng: &mut ChaCha8Rng| -> (Scene, Vec<Vec<f64>>) {
        let n = rng.random_range(1..=spec.max_regions);
        let regions: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..objects.len()), rng.random_range(0..COLORS.len())))
            .collect();
        let feats = regions
            .iter()
            .map(|&(o, c)| {
                (0..spec.feature_dim)
                    .map(|d| {
                        let noise: f64 = StandardNormal.sample(rng);
                        object_protos[o][d] + 0.5 * color_protos[c][d] + 0.05 * noise
                    })
                    .collect()
            })
            .collect();
        (Scene { regions }, feats)
    };

    let tags_of = |s: &Scene| -> Vec<String> {
        let mut seen = Vec::new();
        for &(o, _) in &s.regions {
            if !seen.contains(&objects[o].to_string()) {
                seen.push(objects[o].to_string());
            }
        }
        seen
    };

    let translate_answers = |a: &[(String, u32)]| -> Vec<(String, u32)> {
        a.iter().map(|(s, c)| (lex.translation[s].clone(), *c)).collect()
    };

    let mut parallel = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let (sc, feats) = scene(&mut rng);
        let noise = rng.random_bool(spec.alignment_noise);
        let q = make_question(&sc, objects, &lex, noise, &mut rng);
        let ans = answers(&q.answer, answer_pool(&q.answer), &mut rng);
        let image_id = format!("img-p{i:05}");
        let labels: Vec<String> = sc.regions.iter().map(|r| objects[r.0].to_string()).collect();
        let source = ExampleRecord {
            question_id: format!("p{i:05}"),
            image_id: image_id.clone(),
            question: q.source.join(" "),
            lang: "en".into(),
            answers: ans.clone(),
            tags: tags_of(&sc),
            features: Some(feats),
            feature_ref: None,
            region_labels: labels,
        };
        let target = ExampleRecord {
            question: q.target.join(" "),
            lang: "xx".into(),
            answers: translate_answers(&ans),
            ..source.clone()
        };
        parallel.push(ParallelRecord {
            source,
            target,
            alignment: WordAlignment::new(q.alignment),
        });
    }

    let mut task = Vec::with_capacity(spec.task_examples);
    for i in 0..spec.task_examples {
        let (sc, feats) = scene(&mut rng);
        let q = make_question(&sc, objects, &lex, false, &mut rng);
        let ans = answers(&q.answer, answer_pool(&q.answer), &mut rng);
        task.push(ExampleRecord {
            question_id: format!("t{i:05}"),
            image_id: format!("img-t{i:05}"),
            question: q.target.join(" "),
            lang: "xx".into(),
            answers: translate_answers(&ans),
            tags: tags_of(&sc),
            features: Some(feats),
            feature_ref: None,
            region_labels: sc.regions.iter().map(|r| objects[r.0].to_string()).collect(),
        });
    }

    let answer_translations = COLORS
        .iter()
        .chain(NUMBERS)
        .chain(["yes", "no"].iter())
        .map(|a| (a.to_string(), lex.translation[*a].clone()))
        .collect();

    Ok(SynthCorpus {
        teacher_vocab,
        student_vocab,
        parallel,
        task,
        answer_translations,
    })
}

/// Shuffled copy of `items` under `seed`; used to split synthetic data.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Per-word eligibility of a corpus's English lexicon.
pub fn eligibility_table(corpus: &SynthCorpus) -> HashMap<String, bool> {
    let mut words = BTreeSet::new();
    for p in &corpus.parallel {
        words.extend(p.source.words());
    }
    words
        .into_iter()
        .map(|w| {
            let e = same_segmentation(&w, &corpus.student_vocab, &corpus.teacher_vocab);
            (w, e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codemix::{eligible_words, SentencePair};

    fn spec(rate: f64, noise: f64) -> SynthSpec {
        SynthSpec {
            pairs: 64,
            task_examples: 16,
            eligibility_rate: rate,
            alignment_noise: noise,
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&spec(0.8, 0.2)).unwrap();
        let b = generate(&spec(0.8, 0.2)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec {
            seed: 8,
            ..spec(0.8, 0.2)
        })
        .unwrap();
        assert_ne!(a.parallel, c.parallel);
    }

    #[test]
    fn requested_counts() {
        let c = generate(&spec(0.8, 0.2)).unwrap();
        assert_eq!(c.parallel.len(), 64);
        assert_eq!(c.task.len(), 16);
        for p in &c.parallel {
            assert_eq!(p.source.image_id, p.target.image_id);
            assert_eq!(p.source.features, p.target.features);
            p.alignment
                .check_bounds(p.source.words().len(), p.target.words().len())
                .unwrap();
            assert_eq!(p.source.answers.iter().map(|a| a.1).sum::<u32>(), 10);
        }
    }

    #[test]
    fn full_eligibility_without_noise() {
        let c = generate(&spec(1.0, 0.0)).unwrap();
        for p in &c.parallel {
            let (s, t) = (p.source.words(), p.target.words());
            let pair = SentencePair { source: &s, target: &t };
            let e = eligible_words(pair, &p.alignment, &c.student_vocab, &c.teacher_vocab);
            assert_eq!(e.len(), t.len());
        }
    }

    #[test]
    fn partial_eligibility_mixes_both_kinds() {
        let c = generate(&spec(0.5, 0.0)).unwrap();
        let table = eligibility_table(&c);
        assert!(table.values().any(|&e| e));
        assert!(table.values().any(|&e| !e));
    }

    #[test]
    fn noise_breaks_one_to_one_links() {
        let c = generate(&spec(1.0, 1.0)).unwrap();
        for p in &c.parallel {
            let (s, t) = (p.source.words(), p.target.words());
            let pair = SentencePair { source: &s, target: &t };
            let e = eligible_words(pair, &p.alignment, &c.student_vocab, &c.teacher_vocab);
            assert!(e.len() < t.len());
        }
    }

    #[test]
    fn split_words_segment_in_two() {
        let c = generate(&SynthSpec {
            objects: 24,
            ..spec(1.0, 0.0)
        })
        .unwrap();
        let pieces: Vec<String> = c.teacher_vocab.segment("snowboard").into_iter().map(|p| p.0).collect();
        assert_eq!(pieces, vec!["snow", "##board"]);
    }
}
