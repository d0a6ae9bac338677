//! Subcommand implementations. Every command writes into
//! `<output root>/<command>/` and echoes its resolved configuration there.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use xlkd::checkpoint::Checkpoint;
use xlkd::codemix::{sentence_seed, CodeMixer, SentencePair};
use xlkd::data::{
    assemble_record, dump_jsonl, load_parallel, load_task, prepare_distillation, synth_corpus, DistillationInputs,
    ExampleRecord, FeatureStore, ParallelRecord,
};
use xlkd::distill::{DistillationConfig, Objective};
use xlkd::eval::{
    annotation_multiset, bleu, exact_scores, export_embeddings, predict, question_type_breakdown, soft_scores,
    whitespace_split, EvalReport, Prediction,
};
use xlkd::model::{Model, ParamGroup, WordTagImageTriple};
use xlkd::tokenize::{load_vocab, SubwordVocab};
use xlkd::train::{
    mean_distillation_loss, prepare_task_examples, run_aug_stage, run_finetune_stage, run_kd_stage, task_accuracy,
    RunRecord, TrainConfig,
};
use xlkd::vocab::{build_answer_vocab, coverage, majority_answer, merge_by_translation, AnswerVocabulary, TargetMode};
use xlkd::{Error, Result, Scalar};

use crate::config::{output_root, Precision, RunConfig};
use crate::{Cli, CodemixArgs, Command, DistillArgs, EvalArgs, ExportArgs, SynthArgs, TaskArgs, VocabArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        cli,
        root: output_root(cli.out.as_deref()),
        store: cli.features.as_deref().map(FeatureStore::open).transpose()?,
    };
    match (&cli.command, cfg.precision) {
        (Command::Synth(a), _) => synth(&ctx, cfg, a),
        (Command::Vocab(a), _) => vocab(&ctx, cfg, a),
        (Command::Codemix(a), _) => codemix(&ctx, cfg, a),
        (Command::Distill(a), Precision::F32) => distill::<f32>(&ctx, cfg, a),
        (Command::Distill(a), Precision::F64) => distill::<f64>(&ctx, cfg, a),
        (Command::Finetune(a), Precision::F32) => task::<f32>(&ctx, cfg, a, TaskKind::Finetune),
        (Command::Finetune(a), Precision::F64) => task::<f64>(&ctx, cfg, a, TaskKind::Finetune),
        (Command::Aug(a), Precision::F32) => task::<f32>(&ctx, cfg, a, TaskKind::Aug),
        (Command::Aug(a), Precision::F64) => task::<f64>(&ctx, cfg, a, TaskKind::Aug),
        (Command::Eval(a), Precision::F32) => eval::<f32>(&ctx, cfg, a),
        (Command::Eval(a), Precision::F64) => eval::<f64>(&ctx, cfg, a),
        (Command::ExportEmbeddings(a), Precision::F32) => export::<f32>(&ctx, a),
        (Command::ExportEmbeddings(a), Precision::F64) => export::<f64>(&ctx, a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    root: PathBuf,
    store: Option<FeatureStore>,
}

impl Ctx<'_> {
    fn dir(&self, command: &str) -> Result<PathBuf> {
        let d = self.root.join(command);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn task_records(&self, path: &Path) -> Result<Vec<ExampleRecord>> {
        let loaded = load_task(path, self.cli.strict)?;
        for e in &loaded.errors {
            log::warn!("{}:{}: {}", path.display(), e.line, e.message);
        }
        Ok(loaded.records)
    }

    fn parallel_records(&self, path: &Path) -> Result<Vec<ParallelRecord>> {
        let loaded = load_parallel(path, self.cli.strict)?;
        for e in &loaded.errors {
            log::warn!("{}:{}: {}", path.display(), e.line, e.message);
        }
        Ok(loaded.records)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, values: impl IntoIterator<Item = Value>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn echo(dir: &Path, cfg: &RunConfig, command: Value) -> Result<Value> {
    let v = json!({ "config": cfg, "command": command });
    write_json(&dir.join("resolved_config.json"), &v)?;
    Ok(v)
}

fn synth(ctx: &Ctx, mut cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    s.pairs = a.pairs.unwrap_or(s.pairs);
    s.task_examples = a.task_examples.unwrap_or(s.task_examples);
    s.eligibility_rate = a.eligibility.unwrap_or(s.eligibility_rate);
    s.alignment_noise = a.noise.unwrap_or(s.alignment_noise);
    s.seed = a.seed.unwrap_or(s.seed);
    let corpus = synth_corpus(&cfg.synth)?;
    let dir = ctx.dir("synth")?;
    dump_jsonl(&dir.join("parallel.jsonl"), &corpus.parallel)?;
    dump_jsonl(&dir.join("task.jsonl"), &corpus.task)?;
    let translated: Vec<&ExampleRecord> = corpus.parallel.iter().map(|p| &p.target).collect();
    dump_jsonl(&dir.join("aug.jsonl"), &translated)?;
    let english: Vec<&ExampleRecord> = corpus.parallel.iter().map(|p| &p.source).collect();
    dump_jsonl(&dir.join("teacher_task.jsonl"), &english)?;
    corpus.teacher_vocab.dump(&dir.join("teacher.vocab"))?;
    corpus.student_vocab.dump(&dir.join("student.vocab"))?;
    write_json(&dir.join("answer_translations.json"), &corpus.answer_translations)?;
    echo(&dir, &cfg, json!({ "name": "synth" }))?;
    println!("{}", dir.display());
    Ok(())
}

/// Answer occurrences used for ranking: the majority answer per record in
/// single mode, every annotation in soft mode.
fn answer_occurrences(records: &[ExampleRecord], mode: TargetMode) -> Vec<String> {
    match mode {
        TargetMode::Single => records
            .iter()
            .filter_map(|r| majority_answer(&r.answers).map(str::to_string))
            .collect(),
        TargetMode::Soft => records.iter().flat_map(|r| annotation_multiset(&r.answers)).collect(),
    }
}

fn vocab(ctx: &Ctx, mut cfg: RunConfig, a: &VocabArgs) -> Result<()> {
    cfg.task.classes = a.k.unwrap_or(cfg.task.classes);
    let records = ctx.task_records(&a.data)?;
    let occurrences = answer_occurrences(&records, cfg.task.mode);
    let built = build_answer_vocab(occurrences.iter().map(String::as_str), cfg.task.classes)?;
    let mut report = json!({
        "records": records.len(),
        "classes": built.len(),
        "coverage": built.coverage(),
    });
    let answers = match &a.translations {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
            let merged = merge_by_translation(&built, &map)?;
            report["merged_classes"] = json!(merged.len());
            report["merged_coverage"] = json!(coverage(occurrences.iter().map(String::as_str), &merged)?);
            merged
        }
        None => built,
    };
    let dir = ctx.dir("vocab")?;
    answers.dump(&dir.join("answers.tsv"))?;
    write_json(&dir.join("vocab_report.json"), &report)?;
    echo(
        &dir,
        &cfg,
        json!({ "name": "vocab", "data": a.data, "translations": a.translations }),
    )?;
    println!("{report}");
    Ok(())
}

fn codemix(ctx: &Ctx, mut cfg: RunConfig, a: &CodemixArgs) -> Result<()> {
    cfg.codemix.ratio = a.ratio.unwrap_or(cfg.codemix.ratio);
    cfg.codemix.seed = a.seed.unwrap_or(cfg.codemix.seed);
    let records = ctx.parallel_records(&a.parallel)?;
    let teacher = load_vocab(&a.teacher_vocab)?;
    let student = load_vocab(&a.student_vocab)?;
    let mixer = CodeMixer {
        student: &student,
        teacher: &teacher,
        ratio: cfg.codemix.ratio,
        policy: cfg.codemix.policy,
    };
    let mut lines = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (source, target) = (r.source.words(), r.target.words());
        let pair = SentencePair {
            source: &source,
            target: &target,
        };
        let mixed = mixer.mix(pair, &r.alignment, sentence_seed(cfg.codemix.seed, i), i)?;
        lines.push(json!({
            "origin": i,
            "question_id": r.target.question_id,
            "text": mixed.words.join(" "),
            "words": mixed.words,
            "replaced": mixed.replaced,
        }));
    }
    let dir = ctx.dir("codemix")?;
    write_lines(&dir.join("codemixed.jsonl"), lines)?;
    echo(&dir, &cfg, json!({ "name": "codemix", "parallel": a.parallel }))?;
    Ok(())
}

/// Replaces the classifier when the class count changes; every other
/// parameter is kept.
fn with_classes<T: Scalar>(model: Model<T>, classes: usize, seed: u64) -> Result<Model<T>> {
    if model.config().num_classes == classes {
        return Ok(model);
    }
    log::info!(
        "re-initializing classifier: {} -> {classes} classes",
        model.config().num_classes
    );
    let mut c = model.config().clone();
    c.num_classes = classes;
    let mut fresh = Model::init(c, seed)?;
    for (dst, src) in fresh.params_mut().iter_mut().zip(model.params()) {
        if dst.group != ParamGroup::Classifier {
            dst.value = src.value.clone();
        }
    }
    Ok(fresh)
}

fn cap_steps(t: &mut TrainConfig, max_steps: Option<u64>) {
    if let Some(n) = max_steps {
        for s in &mut t.stages {
            s.max_steps = Some(n);
        }
    }
}

fn record_files(dir: &Path, record: &RunRecord) -> Result<()> {
    write_lines(
        &dir.join("steps.jsonl"),
        record.steps.iter().map(|s| {
            json!({
                "step": s.step,
                "stage": s.stage,
                "loss": s.loss,
                "total": s.breakdown.as_ref().map(|b| b.total),
            })
        }),
    )?;
    write_lines(
        &dir.join("validations.jsonl"),
        record
            .validations
            .iter()
            .map(|v| serde_json::to_value(v).unwrap_or(Value::Null)),
    )
}

fn distillation_settings(cfg: &RunConfig, a: &DistillArgs, num_layers: usize) -> DistillationConfig {
    let mut d = cfg.distill_for(num_layers);
    if a.last_layer_only {
        d.layers.clear();
        d.include_last = true;
    }
    for (off, o) in [
        (a.no_cls, Objective::Cls),
        (a.no_img, Objective::Img),
        (a.no_tag, Objective::Tag),
        (a.no_cm, Objective::Cm),
    ] {
        if off {
            d.set_enabled(o, false);
        }
    }
    d
}

fn distill<T: Scalar>(ctx: &Ctx, mut cfg: RunConfig, a: &DistillArgs) -> Result<()> {
    cfg.codemix.ratio = a.ratio.unwrap_or(cfg.codemix.ratio);
    let records = ctx.parallel_records(&a.parallel)?;
    let valid_records = a.valid.as_deref().map(|p| ctx.parallel_records(p)).transpose()?;
    let teacher_vocab = load_vocab(&a.teacher_vocab)?;
    let student_vocab = load_vocab(&a.student_vocab)?;
    let classes = match &a.answers {
        Some(p) => AnswerVocabulary::load(p)?.len(),
        None => 1,
    };

    let dir = ctx.dir("distill")?;
    let teacher: Model<T> = match &a.teacher {
        Some(p) => Checkpoint::load(p)?.to_model()?,
        None => {
            let t = Model::init(cfg.model.build(teacher_vocab.len(), classes), cfg.model.teacher_seed)?;
            Checkpoint::from_model(&t, 0, json!({ "random_teacher_seed": cfg.model.teacher_seed }))
                .save(&dir.join("teacher.json"))?;
            t
        }
    };
    let student: Model<T> = match &a.init {
        Some(p) => Checkpoint::load(p)?.to_model()?,
        None => Model::init(cfg.model.build(student_vocab.len(), classes), cfg.model.seed)?,
    };
    let mut student = with_classes(student, classes, cfg.model.seed)?;

    let dcfg = distillation_settings(&cfg, a, student.config().num_layers);
    let mut tcfg = cfg.train.kd.resolve()?;
    cap_steps(&mut tcfg, a.max_steps);
    let inputs = DistillationInputs {
        teacher_vocab: &teacher_vocab,
        student_vocab: &student_vocab,
        teacher_config: teacher.config(),
        student_config: student.config(),
        ratio: cfg.codemix.ratio,
        policy: cfg.codemix.policy,
        seed: cfg.codemix.seed,
        with_plain: cfg.codemix.with_plain || dcfg.student_passes == xlkd::distill::StudentPasses::Dual,
        store: ctx.store.as_ref(),
    };
    let (items, _) = prepare_distillation::<T>(&records, &inputs)?;
    let valid = match &valid_records {
        Some(v) => prepare_distillation::<T>(v, &inputs)?.0,
        None => Vec::new(),
    };

    let resolved = echo(
        &dir,
        &cfg,
        json!({ "name": "distill", "distillation": dcfg, "schedule": tcfg, "args": format!("{a:?}") }),
    )?;
    let initial = mean_distillation_loss(&teacher, &student, &items, &dcfg)?;
    let record = run_kd_stage(&teacher, &mut student, &items, &valid, &dcfg, &tcfg)?;
    let final_loss = mean_distillation_loss(&teacher, &student, &items, &dcfg)?;

    record_files(&dir, &record)?;
    let mut rows = Vec::new();
    for s in &record.steps {
        for t in s.breakdown.iter().flat_map(|b| &b.terms) {
            rows.push(json!({
                "step": s.step,
                "layer": t.layer,
                "objective": t.objective,
                "value": t.value,
                "contribution": if t.enabled { t.value } else { 0.0 },
                "enabled": t.enabled,
            }));
        }
    }
    write_lines(&dir.join("breakdown.jsonl"), rows)?;
    Checkpoint::from_model(&student, record.last_step(), resolved).save(&dir.join("student.json"))?;
    let summary = json!({
        "steps": record.steps.len(),
        "initial_loss": initial,
        "final_loss": final_loss,
        "best": record.best,
        "layers": dcfg.resolve(student.config().num_layers)?,
    });
    write_json(&dir.join("record.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

#[derive(Clone, Copy)]
enum TaskKind {
    Finetune,
    Aug,
}

fn task<T: Scalar>(ctx: &Ctx, cfg: RunConfig, a: &TaskArgs, kind: TaskKind) -> Result<()> {
    let (name, schedule) = match kind {
        TaskKind::Finetune => ("finetune", &cfg.train.finetune),
        TaskKind::Aug => ("aug", &cfg.train.aug),
    };
    let mut tcfg = schedule.resolve()?;
    cap_steps(&mut tcfg, a.max_steps);
    let vocab = load_vocab(&a.vocab)?;
    let answers = AnswerVocabulary::load(&a.answers)?;
    let model: Model<T> = match &a.init {
        Some(p) => Checkpoint::load(p)?.to_model()?,
        None => Model::init(cfg.model.build(vocab.len(), answers.len()), cfg.model.seed)?,
    };
    let mut model = with_classes(model, answers.len(), cfg.model.seed)?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "model expects {} subwords, vocabulary {} has {}",
            model.config().vocab_size,
            a.vocab.display(),
            vocab.len()
        )));
    }
    let mode = cfg.task.mode;
    let records = ctx.task_records(&a.data)?;
    let (train, dropped) =
        prepare_task_examples::<T>(&records, &vocab, &answers, mode, model.config(), ctx.store.as_ref())?;
    if dropped > 0 {
        log::warn!("{dropped} training records have no answer class and were skipped");
    }
    let valid = match &a.valid {
        Some(p) => {
            let v = ctx.task_records(p)?;
            prepare_task_examples::<T>(&v, &vocab, &answers, mode, model.config(), ctx.store.as_ref())?.0
        }
        None => Vec::new(),
    };
    let dir = ctx.dir(name)?;
    let resolved = echo(
        &dir,
        &cfg,
        json!({ "name": name, "schedule": tcfg, "args": format!("{a:?}") }),
    )?;
    let record = match kind {
        TaskKind::Finetune => run_finetune_stage(&mut model, &train, &valid, &answers, mode, &tcfg)?,
        TaskKind::Aug => run_aug_stage(&mut model, &train, &valid, &answers, mode, &tcfg)?,
    };
    record_files(&dir, &record)?;
    Checkpoint::from_model(&model, record.last_step(), resolved).save(&dir.join("model.json"))?;
    let summary = json!({
        "steps": record.steps.len(),
        "train_examples": train.len(),
        "skipped": dropped,
        "train_accuracy": task_accuracy(&model, &train, &answers)?,
        "best": record.best,
    });
    write_json(&dir.join("record.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn model_inputs<T: Scalar>(
    ctx: &Ctx,
    records: &[ExampleRecord],
    vocab: &SubwordVocab,
    model: &Model<T>,
) -> Result<Vec<WordTagImageTriple<T>>> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::config("model and subword vocabulary sizes differ"));
    }
    records
        .iter()
        .map(|r| assemble_record(r, vocab, model.config(), ctx.store.as_ref()))
        .collect()
}

fn eval<T: Scalar>(ctx: &Ctx, cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    let model: Model<T> = Checkpoint::load(&a.model)?.to_model()?;
    let vocab = load_vocab(&a.vocab)?;
    let answers = AnswerVocabulary::load(&a.answers)?;
    if model.config().num_classes != answers.len() {
        return Err(Error::config("model and answer vocabulary class counts differ"));
    }
    let records = ctx.task_records(&a.data)?;
    let inputs = model_inputs(ctx, &records, &vocab, &model)?;
    let preds = predict(&model, &inputs)?;
    let references: Vec<&str> = records
        .iter()
        .map(|r| majority_answer(&r.answers).unwrap_or_default())
        .collect();
    let exact = exact_scores(&preds, &references, &answers)?;
    let annotations: Vec<Vec<String>> = records.iter().map(|r| annotation_multiset(&r.answers)).collect();
    let soft = if annotations.iter().all(|a| a.len() == 10) {
        Some(soft_scores(&preds, &annotations, &answers)?)
    } else {
        None
    };
    let predicted: Vec<&str> = preds
        .iter()
        .map(|&p| answers.canonical(p).unwrap_or_default())
        .collect();
    let questions: Vec<&str> = records.iter().map(|r| r.question.as_str()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let report = EvalReport {
        count: records.len(),
        accuracy_exact: mean(&exact),
        accuracy_soft: soft.as_deref().map(mean),
        per_type: question_type_breakdown(&questions, &exact, &cfg.eval.question_rules)?,
        bleu: bleu(&predicted, &references, whitespace_split)?,
        coverage: coverage(references.iter().copied(), &answers)?,
    };
    let dir = ctx.dir("eval")?;
    write_json(&dir.join("report.json"), &report)?;
    write_lines(
        &dir.join("predictions.jsonl"),
        records.iter().zip(&preds).map(|(r, &p)| {
            serde_json::to_value(Prediction {
                question_id: r.question_id.clone(),
                predicted_class: p,
                predicted_string: answers.canonical(p).unwrap_or_default().to_string(),
            })
            .unwrap_or(Value::Null)
        }),
    )?;
    echo(&dir, &cfg, json!({ "name": "eval", "args": format!("{a:?}") }))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn export<T: Scalar>(ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    let model: Model<T> = Checkpoint::load(&a.model)?.to_model()?;
    let vocab = load_vocab(&a.vocab)?;
    let records = ctx.task_records(&a.data)?;
    let inputs = model_inputs(ctx, &records, &vocab, &model)?;
    let filter: BTreeSet<String> = a.tokens.iter().filter(|t| !t.is_empty()).cloned().collect();
    let layer = a.layer.unwrap_or(model.config().num_layers);
    let dir = ctx.dir("export-embeddings")?;
    let n = export_embeddings(&model, &inputs, &filter, layer, &dir.join("embeddings.tsv"))?;
    println!("{n} rows");
    Ok(())
}
