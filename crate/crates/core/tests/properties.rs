//! Cross-module properties over generated inputs.

use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use xlkd::codemix::{eligible_words, sentence_seed, CodeMixer, MixPolicy, SentencePair};
use xlkd::data::{assemble_triple, prepare_distillation, synth_corpus, DistillationInputs, SynthCorpus, SynthSpec};
use xlkd::distill::{item_loss, loss_img, DistillationConfig, Objective};
use xlkd::eval::accuracy_exact;
use xlkd::model::{Model, ModelConfig, WordTagImageTriple};
use xlkd::tensor::Matrix;
use xlkd::tokenize::{tokenize_words, SubwordVocab, CLS, PAD, SEP, UNK};
use xlkd::vocab::{build_answer_vocab, coverage};

fn corpus(seed: u64, pairs: usize) -> SynthCorpus {
    synth_corpus(&SynthSpec {
        pairs,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::new(16, 3, 2, 16, vocab, 3);
    c.max_text_tokens = 32;
    c.max_image_tokens = 8;
    c.init_std = 0.2;
    c
}

fn items(
    c: &SynthCorpus,
    tc: &ModelConfig,
    sc: &ModelConfig,
    seed: u64,
) -> Vec<xlkd::distill::DistillationBatchItem<f64>> {
    let inputs = DistillationInputs {
        teacher_vocab: &c.teacher_vocab,
        student_vocab: &c.student_vocab,
        teacher_config: tc,
        student_config: sc,
        ratio: 0.3,
        policy: MixPolicy::default(),
        seed,
        with_plain: false,
        store: None,
    };
    prepare_distillation(&c.parallel, &inputs).unwrap().0
}

fn letters_vocab() -> SubwordVocab {
    let mut entries: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    for c in 'a'..='e' {
        entries.push(c.to_string());
        entries.push(format!("##{c}"));
    }
    SubwordVocab::from_entries(entries, Path::new("<letters>")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn code_mix_counts_and_segmentation(seed in 0u64..500, ratio in 0.0f64..=1.0, corpus_seed in 0u64..4) {
        let c = synth_corpus(&SynthSpec {
            pairs: 30,
            seed: corpus_seed,
            eligibility_rate: 1.0,
            alignment_noise: 0.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let mixer = CodeMixer { student: &c.student_vocab, teacher: &c.teacher_vocab, ratio, policy: MixPolicy::default() };
        for (i, p) in c.parallel.iter().enumerate() {
            let (src, tgt) = (p.source.words(), p.target.words());
            let pair = SentencePair { source: &src, target: &tgt };
            prop_assert_eq!(eligible_words(pair, &p.alignment, &c.student_vocab, &c.teacher_vocab).len(), tgt.len());
            let mixed = mixer.mix(pair, &p.alignment, sentence_seed(seed, i), i).unwrap();
            let again = mixer.mix(pair, &p.alignment, sentence_seed(seed, i), i).unwrap();
            prop_assert_eq!(&mixed, &again);
            // Within rounding of the requested fraction.
            prop_assert!((mixed.replaced.len() as f64 - ratio * tgt.len() as f64).abs() <= 0.5 + 1e-9);
            let positions: BTreeSet<usize> = mixed.replaced.iter().map(|r| r.0).collect();
            prop_assert_eq!(positions.len(), mixed.replaced.len());
            for (t, w) in mixed.words.iter().enumerate() {
                if !positions.contains(&t) {
                    prop_assert_eq!(w, &tgt[t]);
                }
            }
            for &(t, s) in &mixed.replaced {
                prop_assert_eq!(&mixed.words[t], &src[s]);
                let a = tokenize_words(&[&src[s]], &c.student_vocab);
                let b = tokenize_words(&[&src[s]], &c.teacher_vocab);
                prop_assert_eq!(a.pieces(), b.pieces());
            }
        }
    }

    #[test]
    fn assembled_triples_fit_the_budget(
        question in proptest::collection::vec("[a-e]{1,4}", 0..40),
        tags in proptest::collection::vec(proptest::collection::vec("[a-e]{1,3}", 1..3), 0..10),
        regions in 0usize..15,
        max_text in 4usize..40,
        max_image in 1usize..10,
    ) {
        let v = letters_vocab();
        let mut config = ModelConfig::new(8, 1, 2, 2, v.len(), 2);
        config.max_text_tokens = max_text;
        config.max_image_tokens = max_image;
        let q = tokenize_words(&question, &v);
        let t: Vec<_> = tags.iter().map(|w| tokenize_words(w, &v)).collect();
        let rows: Vec<Vec<f64>> = (0..regions).map(|r| vec![r as f64, 1.0]).collect();
        let triple: WordTagImageTriple<f64> = assemble_triple(&q, &t, &rows, &[], &v, &config).unwrap();
        prop_assert!(triple.text_len() <= max_text);
        prop_assert!(triple.regions.count() <= max_image);
        prop_assert_eq!(triple.regions.count(), regions.min(max_image));
        prop_assert!(triple.question.spans_are_consistent());
        // Prefix rule, and tags are gone before the question is cut.
        prop_assert_eq!(&q.ids()[..triple.question.len()], &triple.question.ids()[..]);
        if triple.question.len() < q.len() {
            prop_assert_eq!(triple.tag_token_count(), 0);
        }
        let all_tags: Vec<usize> = t.iter().flat_map(|x| x.ids()).collect();
        prop_assert_eq!(&all_tags[..triple.tag_token_count()], &triple.tag_text().ids()[..]);
    }

    #[test]
    fn trailing_padding_never_leaks(seed in 0u64..50, index in 0usize..12, text_pad in 0usize..12, region_pad in 0usize..5) {
        let c = corpus(seed, 12);
        let config = small_config(c.student_vocab.len());
        let model: Model<f64> = Model::init(config.clone(), seed).unwrap();
        let record = &c.parallel[index].target;
        let triple = xlkd::data::assemble_record::<f64>(record, &c.student_vocab, &config, None).unwrap();
        let text_pad = text_pad.min(config.max_text_tokens - triple.text_len());
        let region_pad = region_pad.min(config.max_image_tokens - triple.regions.count());
        let retain: BTreeSet<usize> = [1, 2, 3].into();
        let base = model.forward(&triple, &retain, None).unwrap();
        let padded = model.forward_padded(&triple, (text_pad, region_pad), &retain, None).unwrap();
        let text = triple.text_len();
        for (m, a) in &base.layers {
            for r in 0..a.rows() {
                let pr = if r < text { r } else { r + text_pad };
                for (x, y) in a.row(r).iter().zip(padded.layers[m].row(pr)) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn image_loss_is_nonnegative_and_zero_only_on_equality(
        rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..6),
        row in 0usize..6,
        col in 0usize..4,
        delta in 1e-3f64..1.0,
    ) {
        let s = Matrix::from_rows(&rows);
        prop_assert_eq!(loss_img(&s, &s).unwrap(), 0.0);
        let mut t = s.clone();
        let r = row % rows.len();
        t.row_mut(r)[col] += delta;
        prop_assert!(loss_img(&s, &t).unwrap() > 0.0);
    }

    #[test]
    fn distillation_loss_is_additive_over_layers_and_ablations(seed in 0u64..40, off in proptest::collection::vec(any::<bool>(), 4)) {
        let c = corpus(seed, 6);
        let tc = small_config(c.teacher_vocab.len());
        let sc = small_config(c.student_vocab.len());
        let teacher: Model<f64> = Model::init(tc.clone(), seed + 100).unwrap();
        let student: Model<f64> = Model::init(sc.clone(), seed + 200).unwrap();
        let mut cfg = DistillationConfig::with_layers([1, 2], true);
        for (o, &disabled) in Objective::ALL.iter().zip(&off) {
            cfg.set_enabled(*o, !disabled);
        }
        for item in items(&c, &tc, &sc, seed) {
            let joint = item_loss(&item, &teacher, &student, &cfg, &[1, 3].into()).unwrap();
            let one = item_loss(&item, &teacher, &student, &cfg, &[1].into()).unwrap();
            let three = item_loss(&item, &teacher, &student, &cfg, &[3].into()).unwrap();
            prop_assert!((joint.total - one.total - three.total).abs() <= 1e-12 * (1.0 + joint.total));
            prop_assert!(joint.terms.iter().all(|t| t.value >= 0.0));
            let disabled: f64 = joint.terms.iter().filter(|t| !t.enabled).map(|t| t.value).sum();
            prop_assert!((joint.all_terms_sum() - disabled - joint.total).abs() <= 1e-12 * (1.0 + joint.total));
            // Teacher and student see the same image.
            prop_assert_eq!(&item.teacher_input.regions, &item.student_input.regions);
        }
    }

    #[test]
    fn exact_accuracy_never_exceeds_coverage(
        answers in proptest::collection::vec(0u8..12, 1..60),
        k in 1usize..8,
        picks in proptest::collection::vec(0usize..8, 60),
    ) {
        let refs: Vec<String> = answers.iter().map(|a| format!("a{a}")).collect();
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        let vocab = build_answer_vocab(refs.iter().copied(), k).unwrap();
        let preds: Vec<usize> = picks[..refs.len()].iter().map(|p| p % vocab.len()).collect();
        let acc = accuracy_exact(&preds, &refs, &vocab).unwrap();
        let cov = coverage(refs.iter().copied(), &vocab).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!(acc <= cov + 1e-12);
    }
}

#[test]
fn evaluation_forward_is_pure() {
    let c = corpus(3, 4);
    let config = small_config(c.student_vocab.len());
    let model: Model<f32> = Model::init(config.clone(), 1).unwrap();
    let triple = xlkd::data::assemble_record::<f32>(&c.parallel[0].target, &c.student_vocab, &config, None).unwrap();
    let retain: BTreeSet<usize> = [3].into();
    assert_eq!(
        model.forward(&triple, &retain, None).unwrap(),
        model.forward(&triple, &retain, None).unwrap()
    );
}
