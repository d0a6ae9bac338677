//! Distillation objectives between a frozen teacher and a student.
//!
//! Four embedding-matching terms are computed on every layer of the
//! configured layer set and combined with per-layer weights:
//!
//! * `[CLS]`: MSE between the classification-marker embeddings;
//! * image: mean over the `p` image regions of the per-region MSE;
//! * tag: `(1/t²) Σ A_ij · MSE(O_i^S, O_j^T)` over matched tag subwords;
//! * code-mix: `(1/n²) Σ B_ij · MSE(H_i^S, H_j^T)` over matched question
//!   subwords of code-switched words.
//!
//! MSE is the mean over hidden dimensions. `t` and `n` count student tokens.
//! Each term exists in two forms that share the same weights: a plain
//! function over matrices and a graph form used for training.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, EncoderOutput, GraphOutput, Model, ModelConfig, PositionRole, WordTagImageTriple};
use crate::scalar::Scalar;
use crate::tensor::{mse, Matrix};
use crate::tokenize::{match_matrix, AlignmentMatrix, SpanScope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cls,
    Img,
    Tag,
    Cm,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Cls, Objective::Img, Objective::Tag, Objective::Cm];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Cls => "cls",
            Objective::Img => "img",
            Objective::Tag => "tag",
            Objective::Cm => "cm",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the tag and code-mix sums are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNormalization {
    /// Divide by the squared student token count.
    #[default]
    SquaredTokenCount,
    /// Divide by the number of matched pairs.
    MatchedPairs,
}

/// Which student passes feed the objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentPasses {
    /// One pass on the code-switched sentence feeds all four objectives.
    #[default]
    Single,
    /// The plain target sentence feeds `[CLS]`/image/tag; the code-switched
    /// sentence feeds the code-mix term.
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeight {
    pub layer: usize,
    pub weight: f64,
}

fn default_layers() -> Vec<usize> {
    vec![3, 6, 9]
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    /// Explicit 1-based layers of the distillation set.
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    /// Adds the model's last layer to the set.
    #[serde(default = "yes")]
    pub include_last: bool,
    /// Per-layer weights; layers not listed weigh 1.
    #[serde(default)]
    pub layer_weights: Vec<LayerWeight>,
    #[serde(default = "yes")]
    pub enable_cls: bool,
    #[serde(default = "yes")]
    pub enable_img: bool,
    #[serde(default = "yes")]
    pub enable_tag: bool,
    #[serde(default = "yes")]
    pub enable_cm: bool,
    #[serde(default)]
    pub normalization: PairNormalization,
    #[serde(default)]
    pub student_passes: StudentPasses,
}

impl Default for DistillationConfig {
    /// Layers 3, 6, 9 and the last layer, unit weights, all objectives on.
    fn default() -> Self {
        Self {
            layers: default_layers(),
            include_last: true,
            layer_weights: Vec::new(),
            enable_cls: true,
            enable_img: true,
            enable_tag: true,
            enable_cm: true,
            normalization: PairNormalization::default(),
            student_passes: StudentPasses::default(),
        }
    }
}

impl DistillationConfig {
    pub fn with_layers(layers: impl IntoIterator<Item = usize>, include_last: bool) -> Self {
        Self {
            layers: layers.into_iter().collect(),
            include_last,
            ..Self::default()
        }
    }

    pub fn last_layer_only() -> Self {
        Self::with_layers([], true)
    }

    pub fn enabled(&self, o: Objective) -> bool {
        match o {
            Objective::Cls => self.enable_cls,
            Objective::Img => self.enable_img,
            Objective::Tag => self.enable_tag,
            Objective::Cm => self.enable_cm,
        }
    }

    pub fn set_enabled(&mut self, o: Objective, on: bool) {
        match o {
            Objective::Cls => self.enable_cls = on,
            Objective::Img => self.enable_img = on,
            Objective::Tag => self.enable_tag = on,
            Objective::Cm => self.enable_cm = on,
        }
    }

    pub fn weight(&self, layer: usize) -> f64 {
        self.layer_weights
            .iter()
            .rev()
            .find(|w| w.layer == layer)
            .map_or(1.0, |w| w.weight)
    }

    /// Concrete layer set for a model with `num_layers` layers.
    pub fn resolve(&self, num_layers: usize) -> Result<BTreeSet<usize>> {
        let mut set: BTreeSet<usize> = self.layers.iter().copied().collect();
        if self.include_last {
            set.insert(num_layers);
        }
        if set.is_empty() {
            return Err(Error::config("distillation layer set is empty"));
        }
        if let Some(&bad) = set.iter().find(|&&m| m == 0 || m > num_layers) {
            return Err(Error::config(format!(
                "distillation layer {bad} outside 1..={num_layers}"
            )));
        }
        if let Some(w) = self.layer_weights.iter().find(|w| w.weight.is_nan() || w.weight < 0.0) {
            return Err(Error::config(format!(
                "layer {} has negative weight {}",
                w.layer, w.weight
            )));
        }
        Ok(set)
    }
}

/// Teacher and student must share hidden size and depth of every distilled layer.
pub fn check_compatible(
    teacher: &ModelConfig,
    student: &ModelConfig,
    cfg: &DistillationConfig,
) -> Result<BTreeSet<usize>> {
    if teacher.hidden_size != student.hidden_size {
        return Err(Error::config(format!(
            "teacher hidden size {} differs from student hidden size {}",
            teacher.hidden_size, student.hidden_size
        )));
    }
    let set = cfg.resolve(student.num_layers)?;
    if let Some(&bad) = set.iter().find(|&&m| m > teacher.num_layers) {
        return Err(Error::config(format!(
            "distillation layer {bad} exceeds the teacher's {} layers",
            teacher.num_layers
        )));
    }
    Ok(set)
}

pub fn loss_cls<T: Scalar>(student: &[T], teacher: &[T]) -> Result<T> {
    if student.len() != teacher.len() {
        return Err(Error::contract(format!(
            "[CLS] embeddings differ in width: {} vs {}",
            student.len(),
            teacher.len()
        )));
    }
    Ok(mse(student, teacher))
}

/// Mean per-region MSE; row `i` of each matrix is image token `i`.
pub fn loss_img<T: Scalar>(student: &Matrix<T>, teacher: &Matrix<T>) -> Result<T> {
    if student.shape() != teacher.shape() {
        return Err(Error::contract(format!(
            "image token blocks differ: {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let p = student.rows();
    if p == 0 {
        log::debug!("image distillation on an input without regions");
        return Ok(T::zero());
    }
    let sum: T = (0..p).map(|i| mse(student.row(i), teacher.row(i))).sum();
    Ok(sum / T::of(p as f64))
}

fn pair_scale(norm: PairNormalization, matrix: &AlignmentMatrix, count: usize) -> f64 {
    match norm {
        PairNormalization::SquaredTokenCount if count > 0 => 1.0 / (count * count) as f64,
        PairNormalization::MatchedPairs if matrix.count() > 0 => 1.0 / matrix.count() as f64,
        _ => 0.0,
    }
}

fn matched_loss<T: Scalar>(
    student: &Matrix<T>,
    teacher: &Matrix<T>,
    matrix: &AlignmentMatrix,
    count: usize,
    norm: PairNormalization,
    what: &str,
) -> Result<T> {
    if matrix.rows() != student.rows() || matrix.cols() != teacher.rows() {
        return Err(Error::contract(format!(
            "{what} matrix is {}x{} for {} student and {} teacher tokens",
            matrix.rows(),
            matrix.cols(),
            student.rows(),
            teacher.rows()
        )));
    }
    if student.cols() != teacher.cols() {
        return Err(Error::contract(format!("{what} embeddings differ in width")));
    }
    if matrix.is_zero() {
        return Ok(T::zero());
    }
    let sum: T = matrix.ones().map(|(i, j)| mse(student.row(i), teacher.row(j))).sum();
    Ok(sum * T::of(pair_scale(norm, matrix, count)))
}

/// `(1/t²) Σ A_ij · MSE(student tag i, teacher tag j)`.
pub fn loss_tag<T: Scalar>(student: &Matrix<T>, teacher: &Matrix<T>, a: &AlignmentMatrix, t: usize) -> Result<T> {
    matched_loss(student, teacher, a, t, PairNormalization::SquaredTokenCount, "tag")
}

/// `(1/n²) Σ B_ij · MSE(student word i, teacher word j)`.
pub fn loss_cm<T: Scalar>(student: &Matrix<T>, teacher: &Matrix<T>, b: &AlignmentMatrix, n: usize) -> Result<T> {
    matched_loss(student, teacher, b, n, PairNormalization::SquaredTokenCount, "code-mix")
}

/// One teacher/student training example for distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillationBatchItem<T> {
    /// English question with tags and regions.
    pub teacher_input: WordTagImageTriple<T>,
    /// Code-switched target question with the same tags and regions.
    pub student_input: WordTagImageTriple<T>,
    /// Plain target question, used only with [`StudentPasses::Dual`].
    pub student_plain: Option<WordTagImageTriple<T>>,
    /// Student × teacher matches over tag subwords.
    pub tag_matrix: AlignmentMatrix,
    /// Student × teacher matches over question subwords of replaced words.
    pub word_matrix: AlignmentMatrix,
}

impl<T: Scalar> DistillationBatchItem<T> {
    /// Builds both matrices. `replaced` holds `(student_word, teacher_word)`
    /// pairs of the code-switched positions.
    pub fn new(
        teacher_input: WordTagImageTriple<T>,
        student_input: WordTagImageTriple<T>,
        student_plain: Option<WordTagImageTriple<T>>,
        replaced: &[(usize, usize)],
    ) -> Result<Self> {
        if teacher_input.regions != student_input.regions
            || student_plain
                .as_ref()
                .is_some_and(|p| p.regions != teacher_input.regions)
        {
            return Err(Error::contract("teacher and student inputs must share image regions"));
        }
        let tag_matrix = match_matrix(
            &student_input.tag_text(),
            &teacher_input.tag_text(),
            SpanScope::SameWordIndex,
        )?;
        let word_matrix = match_matrix(
            &student_input.question,
            &teacher_input.question,
            SpanScope::Pairs(replaced),
        )?;
        Ok(Self {
            teacher_input,
            student_input,
            student_plain,
            tag_matrix,
            word_matrix,
        })
    }
}

/// One `(layer, objective)` entry of a loss breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTerm {
    pub layer: usize,
    pub objective: Objective,
    /// Layer-weighted objective value, computed even when disabled.
    pub value: f64,
    /// Whether the term counts towards the total.
    pub enabled: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<BreakdownTerm>,
}

impl LossBreakdown {
    /// Sum of one objective's terms, enabled or not.
    pub fn objective_sum(&self, o: Objective) -> f64 {
        self.terms.iter().filter(|t| t.objective == o).map(|t| t.value).sum()
    }

    /// Sum of all terms, enabled or not.
    pub fn all_terms_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.value).sum()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.terms.iter().map(|t| t.layer).collect()
    }

    /// Term-wise mean of several breakdowns with identical layout.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = items.first() else {
            return LossBreakdown::default();
        };
        let n = items.len() as f64;
        let mut out = first.clone();
        out.total = items.iter().map(|b| b.total).sum::<f64>() / n;
        for (k, term) in out.terms.iter_mut().enumerate() {
            term.value = items.iter().map(|b| b.terms[k].value).sum::<f64>() / n;
        }
        out
    }
}

/// Token positions the objectives read in one encoder output.
struct Positions {
    cls: usize,
    img: Vec<usize>,
    tag: Vec<usize>,
    word: Vec<usize>,
}

impl Positions {
    fn of(roles: &[PositionRole]) -> Result<Self> {
        let find = |r: PositionRole| -> Vec<usize> {
            roles
                .iter()
                .enumerate()
                .filter(|(_, x)| **x == r)
                .map(|(i, _)| i)
                .collect()
        };
        let cls = *find(PositionRole::Cls)
            .first()
            .ok_or_else(|| Error::contract("input has no classification marker"))?;
        Ok(Self {
            cls,
            img: find(PositionRole::ImageRegion),
            tag: find(PositionRole::TagSubword),
            word: find(PositionRole::QuestionWord),
        })
    }
}

fn rows<T: Scalar>(m: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Row pairs and scale for each objective on one layer.
struct TermPlan<T> {
    objective: Objective,
    /// `(student_row, teacher_row, weight)`; weight already includes λ_m and
    /// normalization.
    pairs: Vec<(usize, usize, T)>,
    from_plain: bool,
}

fn plan_layer<T: Scalar>(
    item: &DistillationBatchItem<T>,
    student: &Positions,
    plain: Option<&Positions>,
    teacher: &Positions,
    cfg: &DistillationConfig,
    lambda: f64,
) -> Result<Vec<TermPlan<T>>> {
    let dual = cfg.student_passes == StudentPasses::Dual;
    let base = if dual {
        plain.ok_or_else(|| Error::contract("dual-pass distillation needs the plain student input"))?
    } else {
        student
    };

    let mut plans = Vec::with_capacity(4);
    plans.push(TermPlan {
        objective: Objective::Cls,
        pairs: vec![(base.cls, teacher.cls, T::of(lambda))],
        from_plain: dual,
    });

    if base.img.len() != teacher.img.len() {
        return Err(Error::contract(format!(
            "student has {} image tokens, teacher has {}",
            base.img.len(),
            teacher.img.len()
        )));
    }
    let p = base.img.len();
    let img_pairs = if p == 0 {
        log::debug!("no image tokens; image term is zero");
        Vec::new()
    } else {
        let w = T::of(lambda / p as f64);
        base.img.iter().zip(&teacher.img).map(|(&s, &t)| (s, t, w)).collect()
    };
    plans.push(TermPlan {
        objective: Objective::Img,
        pairs: img_pairs,
        from_plain: dual,
    });

    let a = &item.tag_matrix;
    if a.rows() != base.tag.len() || a.cols() != teacher.tag.len() {
        return Err(Error::contract(format!(
            "tag matrix is {}x{} for {} student and {} teacher tag tokens",
            a.rows(),
            a.cols(),
            base.tag.len(),
            teacher.tag.len()
        )));
    }
    let w = T::of(lambda * pair_scale(cfg.normalization, a, base.tag.len()));
    plans.push(TermPlan {
        objective: Objective::Tag,
        pairs: a.ones().map(|(i, j)| (base.tag[i], teacher.tag[j], w)).collect(),
        from_plain: dual,
    });

    let b = &item.word_matrix;
    if b.rows() != student.word.len() || b.cols() != teacher.word.len() {
        return Err(Error::contract(format!(
            "word matrix is {}x{} for {} student and {} teacher question tokens",
            b.rows(),
            b.cols(),
            student.word.len(),
            teacher.word.len()
        )));
    }
    let w = T::of(lambda * pair_scale(cfg.normalization, b, student.word.len()));
    plans.push(TermPlan {
        objective: Objective::Cm,
        pairs: b.ones().map(|(i, j)| (student.word[i], teacher.word[j], w)).collect(),
        from_plain: false,
    });
    Ok(plans)
}

/// `Σ_{m∈L} λ_m (L_CLS + L_img + L_tag + L_CM)` from finished forward passes.
pub fn loss_distil<T: Scalar>(
    item: &DistillationBatchItem<T>,
    teacher_out: &EncoderOutput<T>,
    student_out: &EncoderOutput<T>,
    student_plain_out: Option<&EncoderOutput<T>>,
    cfg: &DistillationConfig,
    layers: &BTreeSet<usize>,
) -> Result<LossBreakdown> {
    let sp = Positions::of(&student_out.roles)?;
    let pp = student_plain_out.map(|o| Positions::of(&o.roles)).transpose()?;
    let tp = Positions::of(&teacher_out.roles)?;
    let mut out = LossBreakdown::default();
    for &m in layers {
        let lambda = cfg.weight(m);
        let t_layer = teacher_out.layer(m)?;
        let s_layer = student_out.layer(m)?;
        let p_layer = student_plain_out.map(|o| o.layer(m)).transpose()?;
        for plan in plan_layer(item, &sp, pp.as_ref(), &tp, cfg, lambda)? {
            let src = if plan.from_plain {
                p_layer.expect("planned from plain pass")
            } else {
                s_layer
            };
            let value: T = plan
                .pairs
                .iter()
                .map(|&(i, j, w)| w * mse(src.row(i), t_layer.row(j)))
                .sum();
            let enabled = cfg.enabled(plan.objective);
            if enabled {
                out.total += value.as_f64();
            }
            out.terms.push(BreakdownTerm {
                layer: m,
                objective: plan.objective,
                value: value.as_f64(),
                enabled,
            });
        }
    }
    Ok(out)
}

/// Unweighted objective values for one layer, computed through the
/// standalone loss functions. Mostly useful for inspection and tests.
pub fn layer_objectives<T: Scalar>(
    item: &DistillationBatchItem<T>,
    teacher_out: &EncoderOutput<T>,
    student_out: &EncoderOutput<T>,
    layer: usize,
) -> Result<[T; 4]> {
    let sp = Positions::of(&student_out.roles)?;
    let tp = Positions::of(&teacher_out.roles)?;
    let s = student_out.layer(layer)?;
    let t = teacher_out.layer(layer)?;
    Ok([
        loss_cls(s.row(sp.cls), t.row(tp.cls))?,
        loss_img(&rows(s, &sp.img), &rows(t, &tp.img))?,
        loss_tag(&rows(s, &sp.tag), &rows(t, &tp.tag), &item.tag_matrix, sp.tag.len())?,
        loss_cm(&rows(s, &sp.word), &rows(t, &tp.word), &item.word_matrix, sp.word.len())?,
    ])
}

/// Graph nodes of one item's distillation loss.
#[derive(Clone, Debug)]
pub struct GraphLoss {
    pub total: Var,
    /// `(layer, objective, node, enabled)`; disabled nodes are not part of `total`.
    pub terms: Vec<(usize, Objective, Var, bool)>,
}

impl GraphLoss {
    pub fn breakdown<T: Scalar>(&self, graph: &Graph<T>) -> LossBreakdown {
        let terms: Vec<BreakdownTerm> = self
            .terms
            .iter()
            .map(|&(layer, objective, v, enabled)| BreakdownTerm {
                layer,
                objective,
                value: graph.value(v).item().as_f64(),
                enabled,
            })
            .collect();
        // Summed in f64 so the total equals the enabled terms exactly.
        LossBreakdown {
            total: terms.iter().filter(|t| t.enabled).map(|t| t.value).sum(),
            terms,
        }
    }
}

/// Records the student's forward pass(es) and the distillation loss against
/// fixed teacher hidden states.
#[allow(clippy::too_many_arguments)]
pub fn loss_distil_graph<T: Scalar>(
    graph: &mut Graph<T>,
    student: &Model<T>,
    bound: &Bound,
    item: &DistillationBatchItem<T>,
    teacher_out: &EncoderOutput<T>,
    cfg: &DistillationConfig,
    layers: &BTreeSet<usize>,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<GraphLoss> {
    let s_out = student.forward_graph(
        graph,
        bound,
        &item.student_input,
        (0, 0),
        layers,
        dropout_rng.as_deref_mut(),
    )?;
    let p_out: Option<GraphOutput> = match (cfg.student_passes, &item.student_plain) {
        (StudentPasses::Dual, Some(plain)) => {
            Some(student.forward_graph(graph, bound, plain, (0, 0), layers, dropout_rng)?)
        }
        (StudentPasses::Dual, None) => {
            return Err(Error::contract("dual-pass distillation needs the plain student input"))
        }
        (StudentPasses::Single, _) => None,
    };
    distil_terms(graph, item, &s_out, p_out.as_ref(), teacher_out, cfg, layers)
}

/// Builds loss nodes from already-recorded student outputs.
pub fn distil_terms<T: Scalar>(
    graph: &mut Graph<T>,
    item: &DistillationBatchItem<T>,
    s_out: &GraphOutput,
    p_out: Option<&GraphOutput>,
    teacher_out: &EncoderOutput<T>,
    cfg: &DistillationConfig,
    layers: &BTreeSet<usize>,
) -> Result<GraphLoss> {
    let sp = Positions::of(&s_out.roles)?;
    let pp = p_out.map(|o| Positions::of(&o.roles)).transpose()?;
    let tp = Positions::of(&teacher_out.roles)?;
    let mut terms = Vec::new();
    for &m in layers {
        let lambda = cfg.weight(m);
        let t_layer = teacher_out.layer(m)?;
        let s_var = *s_out
            .layers
            .get(&m)
            .ok_or_else(|| Error::contract(format!("student layer {m} was not retained")))?;
        let p_var = p_out
            .map(|o| {
                o.layers
                    .get(&m)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("student layer {m} was not retained")))
            })
            .transpose()?;
        for plan in plan_layer(item, &sp, pp.as_ref(), &tp, cfg, lambda)? {
            let src = if plan.from_plain {
                p_var.expect("planned from plain pass")
            } else {
                s_var
            };
            let node = graph.row_mse(src, t_layer.clone(), plan.pairs);
            terms.push((m, plan.objective, node, cfg.enabled(plan.objective)));
        }
    }
    let enabled: Vec<(Var, T)> = terms.iter().filter(|t| t.3).map(|t| (t.2, T::one())).collect();
    let total = graph.lin_comb(&enabled);
    Ok(GraphLoss { total, terms })
}

/// Dataset-level distillation objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdObjective {
    pub sum: f64,
    pub mean: f64,
    pub count: usize,
}

/// Sums the evaluation-mode distillation loss over a parallel dataset.
pub fn kd_objective<T: Scalar>(
    dataset: &[DistillationBatchItem<T>],
    teacher: &Model<T>,
    student: &Model<T>,
    cfg: &DistillationConfig,
) -> Result<KdObjective> {
    if dataset.is_empty() {
        return Err(Error::contract("distillation objective over an empty dataset"));
    }
    let layers = check_compatible(teacher.config(), student.config(), cfg)?;
    let mut sum = 0.0;
    for item in dataset {
        sum += item_loss(item, teacher, student, cfg, &layers)?.total;
    }
    Ok(KdObjective {
        sum,
        mean: sum / dataset.len() as f64,
        count: dataset.len(),
    })
}

/// Evaluation-mode breakdown of one item.
pub fn item_loss<T: Scalar>(
    item: &DistillationBatchItem<T>,
    teacher: &Model<T>,
    student: &Model<T>,
    cfg: &DistillationConfig,
    layers: &BTreeSet<usize>,
) -> Result<LossBreakdown> {
    let t_out = teacher.forward(&item.teacher_input, layers, None)?;
    let s_out = student.forward(&item.student_input, layers, None)?;
    let p_out = match cfg.student_passes {
        StudentPasses::Dual => Some(
            student.forward(
                item.student_plain
                    .as_ref()
                    .ok_or_else(|| Error::contract("dual-pass distillation needs the plain student input"))?,
                layers,
                None,
            )?,
        ),
        StudentPasses::Single => None,
    };
    loss_distil(item, &t_out, &s_out, p_out.as_ref(), cfg, layers)
}
