//! Acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line each and exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use serde_json::Value;
use xlkd::autograd::Graph;
use xlkd::codemix::{eligible_words, SentencePair, WordAlignment};
use xlkd::data::{
    assemble_record, load_parallel, load_task, prepare_distillation, synth_corpus, DistillationInputs, ParallelRecord,
    SynthCorpus, SynthSpec,
};
use xlkd::distill::{
    kd_objective, loss_cls, loss_cm, loss_distil, loss_distil_graph, loss_img, loss_tag, DistillationConfig, Objective,
};
use xlkd::eval::{bleu, question_type_breakdown, soft_scores, whitespace_split, QuestionRule};
use xlkd::model::{EncoderOutput, Model, ModelConfig, ParamGroup};
use xlkd::tensor::Matrix;
use xlkd::tokenize::{load_vocab, tokenize_words, AlignmentMatrix, UNK};
use xlkd::train::{prepare_task_examples, run_finetune_stage, TrainConfig};
use xlkd::vocab::{build_answer_vocab, coverage, merge_by_translation, TargetMode};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs the binary with `--out root` and returns stdout.
fn xlkd(root: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_xlkd"))
        .arg("--out")
        .arg(root)
        .args(args)
        .output()
        .map_err(fail)?;
    if !out.status.success() {
        return Err(format!(
            "xlkd {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_lines(path: &Path) -> Result<Vec<Value>, String> {
    fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(fail))
        .collect()
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(fail)
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing number {key:?} in {v}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A synthetic corpus written by the binary.
struct Synth {
    dir: PathBuf,
}

impl Synth {
    fn create(root: &Path, args: &[&str]) -> Result<Self, String> {
        let mut all = vec!["synth"];
        all.extend_from_slice(args);
        xlkd(root, &all)?;
        Ok(Self {
            dir: root.join("synth"),
        })
    }

    fn file(&self, name: &str) -> String {
        s(&self.dir.join(name)).to_string()
    }
}

fn desk_config(vocab: usize, classes: usize) -> ModelConfig {
    let mut c = ModelConfig::new(32, 4, 2, 16, vocab, classes);
    c.max_text_tokens = 32;
    c.max_image_tokens = 8;
    c
}

fn inputs<'a>(corpus: &'a SynthCorpus, tc: &'a ModelConfig, sc: &'a ModelConfig, ratio: f64) -> DistillationInputs<'a> {
    DistillationInputs {
        teacher_vocab: &corpus.teacher_vocab,
        student_vocab: &corpus.student_vocab,
        teacher_config: tc,
        student_config: sc,
        ratio,
        policy: Default::default(),
        seed: 3,
        with_plain: false,
        store: None,
    }
}

fn self_distillation() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(&SynthSpec {
        pairs: 16,
        ..SynthSpec::default()
    })
    .map_err(fail)?;
    // English on both sides, identity alignment.
    let english: Vec<ParallelRecord> = corpus
        .parallel
        .iter()
        .map(|p| {
            let n = p.source.words().len();
            ParallelRecord {
                source: p.source.clone(),
                target: p.source.clone(),
                alignment: WordAlignment::new((0..n).map(|i| (i, i))),
            }
        })
        .collect();
    let config = desk_config(corpus.teacher_vocab.len(), 4);
    let teacher: Model<f32> = Model::init(config.clone(), 11).map_err(fail)?;
    let student = teacher.clone();
    let mut same = inputs(&corpus, &config, &config, 0.0);
    same.student_vocab = &corpus.teacher_vocab;
    let (items, _) = prepare_distillation::<f32>(&english, &same).map_err(fail)?;
    let cfg = DistillationConfig::with_layers([1, 2, 3], true);
    let kd = kd_objective(&items, &teacher, &student, &cfg).map_err(fail)?;
    let elapsed = start.elapsed();
    ensure(kd.sum == 0.0, || format!("loss is {} over {} items", kd.sum, kd.count))?;
    ensure(items.iter().all(|i| i.word_matrix.is_zero()), || {
        "code-mix matrix not empty".into()
    })?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("loss 0 over {} items in {elapsed:.2?}", kd.count))
}

/// Relative error with a floor on the scale so that gradients that are zero
/// up to rounding compare in absolute terms.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(&SynthSpec {
        pairs: 8,
        seed: 4,
        eligibility_rate: 1.0,
        alignment_noise: 0.0,
        ..SynthSpec::default()
    })
    .map_err(fail)?;
    let mk = |v: usize| {
        let mut c = ModelConfig::new(16, 4, 2, 16, v, 3);
        c.max_text_tokens = 32;
        c.max_image_tokens = 8;
        c.dropout = 0.0;
        c.attention_dropout = 0.0;
        c.init_std = 0.2;
        c
    };
    let tc = mk(corpus.teacher_vocab.len());
    let sc = mk(corpus.student_vocab.len());
    let teacher: Model<f64> = Model::init(tc.clone(), 21).map_err(fail)?;
    let mut student: Model<f64> = Model::init(sc.clone(), 22).map_err(fail)?;
    let (items, _) = prepare_distillation::<f64>(&corpus.parallel, &inputs(&corpus, &tc, &sc, 0.5)).map_err(fail)?;
    let item = items
        .iter()
        .find(|i| i.word_matrix.count() > 0 && i.tag_matrix.count() > 0)
        .ok_or("no item with both tag and code-mix matches")?
        .clone();
    let layers: BTreeSet<usize> = [1, 2, 3, 4].into();
    let all = DistillationConfig::with_layers([1, 2, 3], true);
    let t_out = teacher.forward(&item.teacher_input, &layers, None).map_err(fail)?;

    // Analytic gradients: one per objective and the combined loss.
    let mut cases: Vec<(String, DistillationConfig)> = Objective::ALL
        .iter()
        .map(|&o| {
            let mut c = all.clone();
            for other in Objective::ALL {
                c.set_enabled(other, other == o);
            }
            (o.name().to_string(), c)
        })
        .collect();
    cases.push(("combined".into(), all.clone()));
    let mut analytic = Vec::new();
    for (_, cfg) in &cases {
        let (_, g) = student
            .gradients(
                |_| true,
                |graph, bound| Ok(loss_distil_graph(graph, &student, bound, &item, &t_out, cfg, &layers, None)?.total),
            )
            .map_err(fail)?;
        analytic.push(g);
    }

    // Central differences; one perturbed pass yields every objective.
    let values = |m: &Model<f64>| -> Result<Vec<f64>, String> {
        let s_out = m.forward(&item.student_input, &layers, None).map_err(fail)?;
        let b = loss_distil(&item, &t_out, &s_out, None, &all, &layers).map_err(fail)?;
        let mut v: Vec<f64> = Objective::ALL.iter().map(|&o| b.objective_sum(o)).collect();
        v.push(b.total);
        Ok(v)
    };
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let mut worst_at = String::new();
    let mut nonzero = vec![0usize; cases.len()];
    for id in 0..student.params().len() {
        for k in 0..student.params()[id].value.data().len() {
            let orig = student.params()[id].value.data()[k];
            student.params_mut()[id].value.data_mut()[k] = orig + h;
            let up = values(&student)?;
            student.params_mut()[id].value.data_mut()[k] = orig - h;
            let down = values(&student)?;
            student.params_mut()[id].value.data_mut()[k] = orig;
            for (c, (name, _)) in cases.iter().enumerate() {
                let numeric = (up[c] - down[c]) / (2.0 * h);
                let a = analytic[c].get(id).map_or(0.0, |g| g.data()[k]);
                let e = rel_err(a, numeric);
                if e > 1e-3 {
                    return Err(format!(
                        "{name}: {}[{k}] analytic {a:e} numeric {numeric:e} rel {e:e}",
                        student.params()[id].name
                    ));
                }
                if a != 0.0 {
                    nonzero[c] += 1;
                }
                if e > worst {
                    worst = e;
                    worst_at = format!("{name} {}[{k}] {a:.3e}", student.params()[id].name);
                }
                checked += 1;
            }
        }
    }
    ensure(nonzero.iter().all(|&n| n > 0), || {
        format!("an objective has an all-zero gradient: {nonzero:?}")
    })?;

    // Teacher bound in the same graph with gradients requested.
    let mut graph = Graph::<f64>::new();
    let tb = teacher.bind(&mut graph, |_| true);
    let t_graph = teacher
        .forward_graph(&mut graph, &tb, &item.teacher_input, (0, 0), &layers, None)
        .map_err(fail)?;
    let t_vals = EncoderOutput {
        layers: t_graph
            .layers
            .iter()
            .map(|(&m, &v)| (m, graph.value(v).clone()))
            .collect(),
        roles: t_graph.roles.clone(),
    };
    let sb = student.bind(&mut graph, |_| true);
    let loss = loss_distil_graph(&mut graph, &student, &sb, &item, &t_vals, &all, &layers, None).map_err(fail)?;
    let mut grads = graph.backward(loss.total);
    let tg = teacher.collect_gradients(&tb, &mut grads);
    ensure(
        tg.grads.iter().flatten().all(|g| g.data().iter().all(|&x| x == 0.0)),
        || "teacher received a gradient".into(),
    )?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "{checked} entries over {} objectives, worst rel {worst:.1e} ({worst_at}), teacher grads zero, {elapsed:.1?}",
        cases.len()
    ))
}

fn normalization_oracles() -> Outcome {
    let zeros = |r: usize| Matrix::<f64>::zeros(r, 2);
    let rows = |r: &[[f64; 2]]| Matrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>());
    // Token MSEs 0.2 and 0.4: squared rows summing to 0.4 and 0.8 over 2 dims.
    let img = loss_img(&rows(&[[0.4f64.sqrt(), 0.0], [0.8f64.sqrt(), 0.0]]), &zeros(2)).map_err(fail)?;
    // One matched pair with MSE 0.8, t = 2.
    let a = AlignmentMatrix::from_ones(2, 2, &[(0, 1)]).map_err(fail)?;
    let tag = loss_tag(&zeros(2), &rows(&[[7.0, 7.0], [1.6f64.sqrt(), 0.0]]), &a, 2).map_err(fail)?;
    // One matched pair with MSE 0.9, n = 3.
    let b = AlignmentMatrix::from_ones(3, 3, &[(1, 2)]).map_err(fail)?;
    let cm = loss_cm(&zeros(3), &rows(&[[7.0, 7.0], [7.0, 7.0], [1.8f64.sqrt(), 0.0]]), &b, 3).map_err(fail)?;
    let cls = loss_cls(&[1.0, 3.0], &[1.0, 1.0]).map_err(fail)?;
    for (name, got, want) in [("img", img, 0.3), ("tag", tag, 0.2), ("cm", cm, 0.1), ("cls", cls, 2.0)] {
        ensure((got - want).abs() <= 1e-9, || format!("{name}: {got} != {want}"))?;
    }
    Ok(format!("img {img:.12} tag {tag:.12} cm {cm:.12}"))
}

fn kd_convergence(root: &Path) -> Outcome {
    let synth = Synth::create(&root.join("a"), &["--pairs", "64"])?;
    let start = Instant::now();
    let out = root.join("b");
    xlkd(
        &out,
        &[
            "distill",
            "--parallel",
            &synth.file("parallel.jsonl"),
            "--teacher-vocab",
            &synth.file("teacher.vocab"),
            "--student-vocab",
            &synth.file("student.vocab"),
        ],
    )?;
    let elapsed = start.elapsed();
    let record = read_json(&out.join("distill/record.json"))?;
    let (initial, last) = (num(&record, "initial_loss")?, num(&record, "final_loss")?);
    let steps = record["steps"].as_u64().unwrap_or(0);
    ensure(steps == 500, || format!("{steps} steps, expected 500"))?;
    let ratio = last / initial;
    ensure(ratio <= 0.05, || {
        format!("final/initial = {last}/{initial} = {ratio:.4}")
    })?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "{initial:.4} -> {last:.4} (ratio {ratio:.4}) in {steps} steps, {elapsed:.1?}"
    ))
}

/// `(layer, objective, value, contribution, enabled)`.
type Term = (u64, String, f64, f64, bool);

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct AblationRun {
    totals: BTreeMap<u64, f64>,
    terms: BTreeMap<u64, Vec<Term>>,
}

fn ablation_run(root: &Path, synth: &Synth, name: &str, flags: &[&str]) -> Result<AblationRun, String> {
    let out = root.join(name);
    let (p, tv, sv) = (
        synth.file("parallel.jsonl"),
        synth.file("teacher.vocab"),
        synth.file("student.vocab"),
    );
    let mut args = vec![
        "distill",
        "--parallel",
        &p,
        "--teacher-vocab",
        &tv,
        "--student-vocab",
        &sv,
        "--max-steps",
        "12",
    ];
    args.extend_from_slice(flags);
    xlkd(&out, &args)?;
    let mut totals = BTreeMap::new();
    for l in read_lines(&out.join("distill/steps.jsonl"))? {
        totals.insert(l["step"].as_u64().ok_or("step")?, num(&l, "total")?);
    }
    let mut terms: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for l in read_lines(&out.join("distill/breakdown.jsonl"))? {
        terms.entry(l["step"].as_u64().ok_or("step")?).or_default().push((
            l["layer"].as_u64().ok_or("layer")?,
            l["objective"].as_str().ok_or("objective")?.to_string(),
            num(&l, "value")?,
            num(&l, "contribution")?,
            l["enabled"].as_bool().ok_or("enabled")?,
        ));
    }
    ensure(!totals.is_empty() && totals.len() == terms.len(), || {
        format!("{name}: inconsistent logs")
    })?;
    Ok(AblationRun { totals, terms })
}

fn ablation_consistency(root: &Path) -> Outcome {
    let synth = Synth::create(&root.join("synth"), &["--pairs", "24"])?;
    let base = ablation_run(root, &synth, "base", &[])?;
    let mut checks = 0;
    for o in Objective::ALL {
        let flag = format!("--no-{}", o.name());
        let run = ablation_run(root, &synth, o.name(), &[&flag])?;
        for (step, terms) in &run.terms {
            let all: f64 = terms.iter().map(|t| t.2).sum();
            let dropped: f64 = terms.iter().filter(|t| t.1 == o.name()).map(|t| t.2).sum();
            let total = run.totals[step];
            ensure((all - dropped - total).abs() <= 1e-9, || {
                format!("{flag} step {step}: total {total} != {all} - {dropped}")
            })?;
            ensure(
                terms.iter().all(|t| (t.1 == o.name()) == !t.4 && (t.4 || t.3 == 0.0)),
                || format!("{flag} step {step}: wrong enabled flags or non-zero contribution"),
            )?;
            checks += 1;
        }
        // Same parameters at the first step, so the runs differ by exactly
        // the dropped objective.
        let first = *base.terms.keys().next().ok_or("no steps")?;
        let dropped: f64 = base.terms[&first].iter().filter(|t| t.1 == o.name()).map(|t| t.2).sum();
        let diff = base.totals[&first] - run.totals[&first];
        ensure((diff - dropped).abs() <= 1e-9, || {
            format!("{flag}: step-{first} totals differ by {diff}, objective sum {dropped}")
        })?;
    }
    let last = ablation_run(root, &synth, "last", &["--last-layer-only"])?;
    let layers: BTreeSet<u64> = last.terms.values().flatten().map(|t| t.0).collect();
    ensure(layers == BTreeSet::from([4]), || {
        format!("--last-layer-only logged layers {layers:?}")
    })?;
    let base_layers: BTreeSet<u64> = base.terms.values().flatten().map(|t| t.0).collect();
    ensure(base_layers.len() > 1, || {
        format!("baseline logged layers {base_layers:?}")
    })?;
    Ok(format!(
        "{checks} step checks over 4 ablations, last-layer-only logs {{4}}"
    ))
}

fn codemix_contract(root: &Path) -> Outcome {
    let synth = Synth::create(
        &root.join("synth"),
        &["--pairs", "1000", "--eligibility", "1", "--noise", "0", "--seed", "5"],
    )?;
    let (p, tv, sv) = (
        synth.file("parallel.jsonl"),
        synth.file("teacher.vocab"),
        synth.file("student.vocab"),
    );
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = root.join(name);
        xlkd(
            &out,
            &[
                "codemix",
                "--parallel",
                &p,
                "--teacher-vocab",
                &tv,
                "--student-vocab",
                &sv,
                "--ratio",
                "0.15",
                "--seed",
                "9",
            ],
        )?;
        fs::read(out.join("codemix/codemixed.jsonl")).map_err(fail)
    };
    let (first, second) = (run("one")?, run("two")?);
    ensure(first == second, || "reruns differ".into())?;

    let records = load_parallel(Path::new(&p), true).map_err(fail)?.records;
    let (teacher, student) = (
        load_vocab(Path::new(&tv)).map_err(fail)?,
        load_vocab(Path::new(&sv)).map_err(fail)?,
    );
    let lines: Vec<Value> = String::from_utf8_lossy(&first)
        .lines()
        .map(|l| serde_json::from_str(l).map_err(fail))
        .collect::<Result<_, _>>()?;
    ensure(lines.len() == 1000 && records.len() == 1000, || {
        format!("{} lines", lines.len())
    })?;
    let mut replaced_total = 0;
    for (r, line) in records.iter().zip(&lines) {
        let (source, target) = (r.source.words(), r.target.words());
        let pair = SentencePair {
            source: &source,
            target: &target,
        };
        let eligible = eligible_words(pair, &r.alignment, &student, &teacher);
        ensure(eligible.len() == target.len(), || {
            format!("{}: not fully eligible", r.target.question_id)
        })?;
        let n = target.len();
        // round(0.15 n), halves rounded up, in integer arithmetic.
        let want = (15 * n + 50) / 100;
        let replaced = line["replaced"].as_array().ok_or("replaced")?;
        ensure(replaced.len() == want, || {
            format!(
                "{}: {} replacements for {n} words, expected {want}",
                r.target.question_id,
                replaced.len()
            )
        })?;
        let words = line["words"].as_array().ok_or("words")?;
        for pos in replaced {
            let t = pos[0].as_u64().ok_or("position")? as usize;
            let w = words[t].as_str().ok_or("word")?;
            let (a, b) = (tokenize_words(&[w], &student), tokenize_words(&[w], &teacher));
            ensure(a.pieces() == b.pieces() && !a.pieces().contains(&UNK), || {
                format!("{w:?} splits as {:?} vs {:?}", a.pieces(), b.pieces())
            })?;
        }
        replaced_total += replaced.len();
    }
    Ok(format!(
        "1000 sentences, {replaced_total} replacements, byte-identical rerun"
    ))
}

fn vocabulary_merging() -> Outcome {
    let translate = |pairs: &[(&str, &str)]| -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    };
    let answers = ["up", "up", "up", "above", "above", "down", "left"];
    let v = build_answer_vocab(answers, 10).map_err(fail)?;
    let merged = merge_by_translation(
        &v,
        &translate(&[
            ("up", "upar"),
            ("above", "upar"),
            ("down", "neeche"),
            ("left", "baayen"),
        ]),
    )
    .map_err(fail)?;
    let (up, above) = (merged.class_of("up"), merged.class_of("above"));
    ensure(up.is_some() && up == above, || "up and above are not one class".into())?;
    ensure(merged.canonical(up.unwrap_or(0)) == Some("upar"), || {
        "canonical is not upar".into()
    })?;
    ensure(merged.len() == 3, || format!("{} classes", merged.len()))?;

    // Five classes, two collisions.
    let answers = ["a", "a", "a", "b", "b", "c", "d", "d", "e", "f"];
    let v = build_answer_vocab(answers, 5).map_err(fail)?;
    let merged = merge_by_translation(
        &v,
        &translate(&[("a", "x"), ("b", "x"), ("c", "y"), ("d", "y"), ("e", "z"), ("f", "w")]),
    )
    .map_err(fail)?;
    ensure(v.len() == 5 && merged.len() == 3, || {
        format!("{} -> {} classes", v.len(), merged.len())
    })?;
    let before = coverage(answers, &v).map_err(fail)?;
    let after = coverage(answers, &merged).map_err(fail)?;
    ensure((before - after).abs() <= 1e-12, || {
        format!("coverage {before} -> {after}")
    })?;
    ensure((before - 0.9).abs() <= 1e-12, || {
        format!("coverage {before}, expected 0.9")
    })?;
    Ok(format!("{{up, above}} -> upar; 5 -> 3 classes; coverage {before} kept"))
}

fn metrics_oracles() -> Outcome {
    let v = build_answer_vocab(["yes", "no", "two"], 3).map_err(fail)?;
    let yes = v.class_of("yes").ok_or("yes")?;
    let sets: Vec<Vec<String>> = (0..=5)
        .map(|m| (0..10).map(|i| if i < m { "yes" } else { "no" }.to_string()).collect())
        .collect();
    let scores = soft_scores(&vec![yes; sets.len()], &sets, &v).map_err(fail)?;
    for (m, got) in scores.iter().enumerate() {
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0][m];
        ensure(*got == want, || format!("{m} matches scored {got}, expected {want}"))?;
    }

    // Precisions 7/7, 3/5, 2/3, 1/2; lengths c = 7, r = 9.
    let got = bleu(
        &["the cat is on mat", "a dog"],
        &["the cat is on the mat", "a big dog"],
        whitespace_split,
    )
    .map_err(fail)?;
    let want = 100.0 * (1.0f64 - 9.0 / 7.0).exp() * (1.0 * 0.6 * (2.0 / 3.0) * 0.5f64).powf(0.25);
    ensure((got - want).abs() <= 1e-6, || format!("BLEU {got}, expected {want}"))?;

    let questions: Vec<String> = (0..37)
        .map(|i| match i % 4 {
            0 => format!("how many things {i}"),
            1 => format!("what color is {i}"),
            2 => format!("is there a {i}"),
            _ => format!("why {i}"),
        })
        .collect();
    let q: Vec<&str> = questions.iter().map(String::as_str).collect();
    let per_item: Vec<f64> = (0..37).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let rules = vec![
        QuestionRule::new("number", "how many"),
        QuestionRule::new("color", "what color"),
        QuestionRule::new("yes/no", "is there"),
    ];
    let buckets = question_type_breakdown(&q, &per_item, &rules).map_err(fail)?;
    let overall = per_item.iter().sum::<f64>() / per_item.len() as f64;
    let weighted = buckets.iter().map(|b| b.accuracy * b.count as f64).sum::<f64>() / per_item.len() as f64;
    ensure(buckets.len() == 4, || format!("{} buckets", buckets.len()))?;
    ensure((overall - weighted).abs() <= 1e-12, || {
        format!("weighted {weighted} vs overall {overall}")
    })?;
    Ok(format!("soft scores, BLEU {got:.6}, {} buckets", buckets.len()))
}

fn schedule_contracts(root: &Path) -> Outcome {
    // Classifier-only stage.
    let corpus = synth_corpus(&SynthSpec::default()).map_err(fail)?;
    let majority: Vec<&str> = corpus
        .task
        .iter()
        .filter_map(|r| xlkd::vocab::majority_answer(&r.answers))
        .collect();
    let answers = build_answer_vocab(majority, 100).map_err(fail)?;
    let mut model: Model<f32> = Model::init(desk_config(corpus.student_vocab.len(), answers.len()), 7).map_err(fail)?;
    let before = model.clone();
    let (examples, _) = prepare_task_examples::<f32>(
        &corpus.task,
        &corpus.student_vocab,
        &answers,
        TargetMode::Single,
        model.config(),
        None,
    )
    .map_err(fail)?;
    let mut head = TrainConfig::desk_finetune();
    head.stages.truncate(1);
    run_finetune_stage(&mut model, &examples, &[], &answers, TargetMode::Single, &head).map_err(fail)?;
    for (a, b) in before.params().iter().zip(model.params()) {
        if a.group == ParamGroup::Classifier {
            ensure(a.value != b.value, || format!("{} did not move", a.name))?;
        } else {
            ensure(a.value.data() == b.value.data(), || format!("{} changed", a.name))?;
        }
    }

    // Distill, then fine-tune with validation every 500 steps.
    let synth = Synth::create(&root.join("synth"), &[])?;
    let start = Instant::now();
    let task = synth.file("task.jsonl");
    xlkd(root, &["vocab", "--data", &task])?;
    let answers_tsv = s(&root.join("vocab/answers.tsv")).to_string();
    let sv = synth.file("student.vocab");
    xlkd(
        root,
        &[
            "distill",
            "--parallel",
            &synth.file("parallel.jsonl"),
            "--teacher-vocab",
            &synth.file("teacher.vocab"),
            "--student-vocab",
            &sv,
            "--answers",
            &answers_tsv,
        ],
    )?;
    let config = root.join("finetune.toml");
    let mut schedule = TrainConfig::desk_finetune();
    schedule.validation_interval = 500;
    let toml_text = format!("[train.finetune]\n{}", toml_schedule(&schedule));
    fs::write(&config, toml_text).map_err(fail)?;
    let student = s(&root.join("distill/student.json")).to_string();
    xlkd(
        root,
        &[
            "--config",
            s(&config),
            "finetune",
            "--data",
            &task,
            "--valid",
            &task,
            "--vocab",
            &sv,
            "--answers",
            &answers_tsv,
            "--init",
            &student,
        ],
    )?;
    let model = s(&root.join("finetune/model.json")).to_string();
    let report: Value = serde_json::from_str(&xlkd(
        root,
        &[
            "eval",
            "--data",
            &task,
            "--vocab",
            &sv,
            "--answers",
            &answers_tsv,
            "--model",
            &model,
        ],
    )?)
    .map_err(fail)?;
    let elapsed = start.elapsed();

    let steps = read_lines(&root.join("finetune/steps.jsonl"))?.len() as u64;
    let at: Vec<u64> = read_lines(&root.join("finetune/validations.jsonl"))?
        .iter()
        .filter_map(|v| v["step"].as_u64())
        .collect();
    let want: Vec<u64> = (1..=steps / 500).map(|k| 500 * k).collect();
    ensure(steps >= 1000 && at == want, || {
        format!("validated at {at:?} over {steps} steps")
    })?;
    let accuracy = num(&report, "accuracy_exact")?;
    ensure(accuracy >= 0.95, || format!("training accuracy {accuracy}"))?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "head stage bit-identical; validations at {at:?}; training accuracy {accuracy:.3} in {elapsed:.1?}"
    ))
}

fn toml_schedule(t: &TrainConfig) -> String {
    let mut out = format!(
        "batch_size = {}\nvalidation_interval = {}\n",
        t.batch_size, t.validation_interval
    );
    for st in &t.stages {
        let frozen: Vec<String> = st
            .frozen
            .iter()
            .map(|g| serde_json::to_string(g).unwrap_or_default())
            .collect();
        out += &format!(
            "[[train.finetune.stages]]\nname = {:?}\nepochs = {}\nlearning_rate = {}\nobjective = \"task\"\nfrozen = [{}]\n",
            st.name,
            st.epochs,
            st.learning_rate,
            frozen.join(", ")
        );
    }
    out
}

fn padding_masking(root: &Path) -> Outcome {
    let synth = Synth::create(&root.join("synth"), &["--task-examples", "48", "--seed", "2"])?;
    let records = load_task(Path::new(&synth.file("task.jsonl")), true)
        .map_err(fail)?
        .records;
    let vocab = load_vocab(Path::new(&synth.file("student.vocab"))).map_err(fail)?;
    let config = desk_config(vocab.len(), 5);
    let model: Model<f32> = Model::init(config.clone(), 3).map_err(fail)?;
    let retain: BTreeSet<usize> = (1..=config.num_layers).collect();
    let (mut worst, mut compared) = (0.0f32, 0usize);
    for r in &records {
        let triple = assemble_record::<f32>(r, &vocab, &config, None).map_err(fail)?;
        let base = model.forward(&triple, &retain, None).map_err(fail)?;
        let text = triple.text_len();
        let text_room = config.max_text_tokens - text;
        let region_room = config.max_image_tokens - triple.regions.count();
        for pad in [(1, 0), (0, 1), (text_room / 2, region_room), (text_room, region_room)] {
            let padded = model.forward_padded(&triple, pad, &retain, None).map_err(fail)?;
            for (m, a) in &base.layers {
                let b = &padded.layers[m];
                for row in 0..a.rows() {
                    let prow = if row < text { row } else { row + pad.0 };
                    for (x, y) in a.row(row).iter().zip(b.row(prow)) {
                        worst = worst.max((x - y).abs());
                    }
                    compared += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("largest change {worst:e}"))?;
    Ok(format!("{compared} rows compared, largest change {worst:e}"))
}

fn main() -> ExitCode {
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("tempdir: {e}");
            return ExitCode::FAILURE;
        }
    };
    let dir = |name: &str| tmp.path().join(name);
    let criteria: Vec<(&str, Criterion)> = vec![
        ("self-distillation identity", Box::new(self_distillation)),
        ("gradient verification", Box::new(gradient_verification)),
        ("normalization oracles", Box::new(normalization_oracles)),
        ("KD convergence", Box::new(move || kd_convergence(&dir("kd")))),
        (
            "ablation consistency",
            Box::new(move || ablation_consistency(&dir("ablation"))),
        ),
        ("code-mix contract", Box::new(move || codemix_contract(&dir("codemix")))),
        ("vocabulary merging", Box::new(vocabulary_merging)),
        ("metrics oracles", Box::new(metrics_oracles)),
        (
            "schedule contracts",
            Box::new(move || schedule_contracts(&dir("schedule"))),
        ),
        (
            "padding and masking",
            Box::new(move || padding_masking(&dir("padding"))),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
