//! A small fusion encoder over Word-Tag-Image triples.
//!
//! Text positions (`[CLS]`, question subwords, `[SEP]`, tag subwords,
//! `[SEP]`, text padding) are followed by image-region positions. Text tokens
//! get word, position and segment embeddings; regions get a learned linear
//! projection of their raw feature vector, one shared region-position vector
//! and the segment-1 embedding. A post-LN transformer stack runs over the
//! joint sequence with padding masked out of attention.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenize::{SpecialIds, TokenizedText};

fn default_max_text() -> usize {
    128
}
fn default_max_image() -> usize {
    50
}
fn default_dropout() -> f64 {
    0.3
}
fn default_attention_dropout() -> f64 {
    0.1
}
fn default_ln_eps() -> f64 {
    1e-12
}
fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Feed-forward width; four times `hidden_size` when absent.
    #[serde(default)]
    pub intermediate_size: Option<usize>,
    pub feature_dim: usize,
    #[serde(default = "default_max_text")]
    pub max_text_tokens: usize,
    #[serde(default = "default_max_image")]
    pub max_image_tokens: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_attention_dropout")]
    pub attention_dropout: f64,
    pub vocab_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Configuration with the default budgets and dropout rates.
    pub fn new(
        hidden_size: usize,
        num_layers: usize,
        num_heads: usize,
        feature_dim: usize,
        vocab_size: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            hidden_size,
            num_layers,
            num_heads,
            intermediate_size: None,
            feature_dim,
            max_text_tokens: default_max_text(),
            max_image_tokens: default_max_image(),
            dropout: default_dropout(),
            attention_dropout: default_attention_dropout(),
            vocab_size,
            num_classes,
            layer_norm_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    pub fn ffn_size(&self) -> usize {
        self.intermediate_size.unwrap_or(4 * self.hidden_size)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("feature_dim", self.feature_dim),
            ("max_text_tokens", self.max_text_tokens),
            ("max_image_tokens", self.max_image_tokens),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("intermediate_size", self.ffn_size()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.max_text_tokens < 3 {
            return Err(Error::config("max_text_tokens must leave room for [CLS] and two [SEP]"));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Coarse parameter groups used for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    ImageProjection,
    Encoder,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embeddings,
        ParamGroup::ImageProjection,
        ParamGroup::Encoder,
        ParamGroup::Classifier,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    word: usize,
    position: usize,
    region_position: usize,
    segment: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    img_w: usize,
    img_b: usize,
    layers: Vec<LayerIds>,
    cls_w: usize,
    cls_b: usize,
}

/// Role of one position in the encoder's input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRole {
    Cls,
    QuestionWord,
    Separator,
    TagSubword,
    ImageRegion,
    Padding,
}

/// Region feature vectors of one image, one row per region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures<T> {
    pub vectors: Matrix<T>,
}

impl<T: Scalar> RegionFeatures<T> {
    pub fn new(vectors: Matrix<T>) -> Result<Self> {
        if !vectors.all_finite() {
            return Err(Error::contract("region features contain non-finite values"));
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if let Some(r) = rows.first() {
            if rows.iter().any(|v| v.len() != r.len()) {
                return Err(Error::contract("region feature vectors differ in dimensionality"));
            }
        }
        Self::new(Matrix::from_rows(rows))
    }

    pub fn count(&self) -> usize {
        self.vectors.rows()
    }
}

/// Question subwords, object-tag subwords and image regions of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTagImageTriple<T> {
    pub question: TokenizedText,
    /// One tokenization per object tag.
    pub tags: Vec<TokenizedText>,
    pub regions: RegionFeatures<T>,
    /// Object label of every region, when known (embedding export).
    pub region_labels: Vec<String>,
    pub specials: SpecialIds,
}

impl<T: Scalar> WordTagImageTriple<T> {
    pub fn tag_text(&self) -> TokenizedText {
        TokenizedText::concat(&self.tags)
    }

    pub fn tag_token_count(&self) -> usize {
        self.tags.iter().map(TokenizedText::len).sum()
    }

    /// Textual tokens including the three special markers.
    pub fn text_len(&self) -> usize {
        3 + self.question.len() + self.tag_token_count()
    }

    pub fn check_budget(&self, config: &ModelConfig) -> Result<()> {
        if self.text_len() > config.max_text_tokens {
            return Err(Error::contract(format!(
                "{} text tokens exceed the budget of {}",
                self.text_len(),
                config.max_text_tokens
            )));
        }
        if self.regions.count() > config.max_image_tokens {
            return Err(Error::contract(format!(
                "{} regions exceed the budget of {}",
                self.regions.count(),
                config.max_image_tokens
            )));
        }
        if self.regions.count() > 0 && self.regions.vectors.cols() != config.feature_dim {
            return Err(Error::contract(format!(
                "region features have dimension {}, model expects {}",
                self.regions.vectors.cols(),
                config.feature_dim
            )));
        }
        Ok(())
    }
}

/// Flattened encoder input: text slots then region slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub token_ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub roles: Vec<PositionRole>,
    /// Number of text slots (including text padding).
    pub text_slots: usize,
    /// Number of region slots (including region padding).
    pub region_slots: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn positions_with(&self, role: PositionRole) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Builds the position layout with `text_pad` extra text padding slots and
/// `region_pad` extra region padding slots.
pub fn layout<T: Scalar>(triple: &WordTagImageTriple<T>, text_pad: usize, region_pad: usize) -> SequenceLayout {
    let sp = triple.specials;
    let mut ids = vec![sp.cls];
    let mut roles = vec![PositionRole::Cls];
    let mut segments = vec![0];
    for s in &triple.question.subwords {
        ids.push(s.id);
        roles.push(PositionRole::QuestionWord);
        segments.push(0);
    }
    ids.push(sp.sep);
    roles.push(PositionRole::Separator);
    segments.push(0);
    for tag in &triple.tags {
        for s in &tag.subwords {
            ids.push(s.id);
            roles.push(PositionRole::TagSubword);
            segments.push(1);
        }
    }
    ids.push(sp.sep);
    roles.push(PositionRole::Separator);
    segments.push(1);
    for _ in 0..text_pad {
        ids.push(sp.pad);
        roles.push(PositionRole::Padding);
        segments.push(0);
    }
    let text_slots = ids.len();
    let regions = triple.regions.count();
    roles.extend(std::iter::repeat_n(PositionRole::ImageRegion, regions));
    roles.extend(std::iter::repeat_n(PositionRole::Padding, region_pad));
    segments.extend(std::iter::repeat_n(1, regions + region_pad));
    SequenceLayout {
        token_ids: ids,
        segments,
        roles,
        text_slots,
        region_slots: regions + region_pad,
    }
}

/// Hidden states of the retained layers, as plain matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// 1-based layer index → `sequence_length × hidden_size`.
    pub layers: BTreeMap<usize, Matrix<T>>,
    pub roles: Vec<PositionRole>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn layer(&self, m: usize) -> Result<&Matrix<T>> {
        self.layers
            .get(&m)
            .ok_or_else(|| Error::contract(format!("layer {m} was not retained")))
    }

    pub fn positions_with(&self, role: PositionRole) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Hidden-state nodes of a forward pass recorded on a [`Graph`].
#[derive(Clone, Debug)]
pub struct GraphOutput {
    pub layers: BTreeMap<usize, Var>,
    pub roles: Vec<PositionRole>,
}

/// Parameters bound as graph leaves for one optimization step.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-parameter gradients; `None` for frozen parameters.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: usize) -> Option<&Matrix<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Accumulates `scale · other` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                let b = b.map(|v| v * scale);
                match a {
                    Some(a) => a.add_assign(&b),
                    None => *a = Some(b),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization: normal(0, init_std) weights, zero biases,
    /// unit layer-norm gains. Values are drawn in `f64`, so `f32` and `f64`
    /// models from the same seed agree up to rounding.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(format!("init_std: {e}")))?;
        let mut params: Vec<Param<T>> = Vec::new();
        let mut add = |name: String, group: ParamGroup, rows: usize, cols: usize, init: Init| -> usize {
            let data = (0..rows * cols)
                .map(|_| match init {
                    Init::Gaussian => T::of(normal.sample(&mut rng)),
                    Init::Zeros => T::zero(),
                    Init::Ones => T::one(),
                })
                .collect();
            params.push(Param {
                name,
                group,
                value: Matrix::from_vec(rows, cols, data),
            });
            params.len() - 1
        };

        let h = config.hidden_size;
        let ff = config.ffn_size();
        use Init::*;
        use ParamGroup::*;
        let word = add("embeddings.word".into(), Embeddings, config.vocab_size, h, Gaussian);
        let position = add(
            "embeddings.position".into(),
            Embeddings,
            config.max_text_tokens,
            h,
            Gaussian,
        );
        let region_position = add("embeddings.region_position".into(), Embeddings, 1, h, Gaussian);
        let segment = add("embeddings.segment".into(), Embeddings, 2, h, Gaussian);
        let emb_ln_g = add("embeddings.norm.gain".into(), Embeddings, 1, h, Ones);
        let emb_ln_b = add("embeddings.norm.bias".into(), Embeddings, 1, h, Zeros);
        let img_w = add(
            "image.projection.weight".into(),
            ImageProjection,
            config.feature_dim,
            h,
            Gaussian,
        );
        let img_b = add("image.projection.bias".into(), ImageProjection, 1, h, Zeros);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = |s: &str| format!("encoder.{l}.{s}");
            layers.push(LayerIds {
                q_w: add(p("query.weight"), Encoder, h, h, Gaussian),
                q_b: add(p("query.bias"), Encoder, 1, h, Zeros),
                k_w: add(p("key.weight"), Encoder, h, h, Gaussian),
                k_b: add(p("key.bias"), Encoder, 1, h, Zeros),
                v_w: add(p("value.weight"), Encoder, h, h, Gaussian),
                v_b: add(p("value.bias"), Encoder, 1, h, Zeros),
                o_w: add(p("attention_output.weight"), Encoder, h, h, Gaussian),
                o_b: add(p("attention_output.bias"), Encoder, 1, h, Zeros),
                ln1_g: add(p("attention_norm.gain"), Encoder, 1, h, Ones),
                ln1_b: add(p("attention_norm.bias"), Encoder, 1, h, Zeros),
                ff1_w: add(p("intermediate.weight"), Encoder, h, ff, Gaussian),
                ff1_b: add(p("intermediate.bias"), Encoder, 1, ff, Zeros),
                ff2_w: add(p("output.weight"), Encoder, ff, h, Gaussian),
                ff2_b: add(p("output.bias"), Encoder, 1, h, Zeros),
                ln2_g: add(p("output_norm.gain"), Encoder, 1, h, Ones),
                ln2_b: add(p("output_norm.bias"), Encoder, 1, h, Zeros),
            });
        }
        let cls_w = add("classifier.weight".into(), Classifier, h, config.num_classes, Gaussian);
        let cls_b = add("classifier.bias".into(), Classifier, 1, config.num_classes, Zeros);

        let layout = Layout {
            word,
            position,
            region_position,
            segment,
            emb_ln_g,
            emb_ln_b,
            img_w,
            img_b,
            layers,
            cls_w,
            cls_b,
        };
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classifier_ids(&self) -> [usize; 2] {
        [self.layout.cls_w, self.layout.cls_b]
    }

    /// Replaces all parameter values; shapes and names must match.
    pub fn load_values(&mut self, values: Vec<(String, Matrix<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, v)) in self.params.iter().zip(&values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(Error::contract(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, v)) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf; `trainable` decides which
    /// leaves receive gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        Bound { vars }
    }

    fn check_retain(&self, retain: &BTreeSet<usize>) -> Result<()> {
        match retain.iter().find(|&&m| m == 0 || m > self.config.num_layers) {
            Some(m) => Err(Error::contract(format!(
                "layer {m} outside 1..={}",
                self.config.num_layers
            ))),
            None => Ok(()),
        }
    }

    /// Records a forward pass on `graph`. Dropout is active iff `dropout_rng`
    /// is given.
    pub fn forward_graph(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        triple: &WordTagImageTriple<T>,
        padding: (usize, usize),
        retain: &BTreeSet<usize>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutput> {
        self.check_retain(retain)?;
        triple.check_budget(&self.config)?;
        let cfg = &self.config;
        let seq = layout(triple, padding.0, padding.1);
        if seq.text_slots > cfg.max_text_tokens || seq.region_slots > cfg.max_image_tokens {
            return Err(Error::contract("padded input exceeds the sequence budget"));
        }
        if let Some(&bad) = seq.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let lay = &self.layout;
        let p = |id: usize| bound.var(id);
        let eps = T::of(cfg.layer_norm_eps);

        // Text embeddings.
        let n_text = seq.text_slots;
        let words = graph.gather(p(lay.word), &seq.token_ids);
        let positions: Vec<usize> = (0..n_text).collect();
        let pos = graph.gather(p(lay.position), &positions);
        let seg = graph.gather(p(lay.segment), &seq.segments[..n_text]);
        let text = graph.add(words, pos);
        let text = graph.add(text, seg);

        // Region embeddings.
        let n_reg = seq.region_slots;
        let mut parts = vec![text];
        if n_reg > 0 {
            let mut feats = Matrix::zeros(n_reg, cfg.feature_dim);
            for r in 0..triple.regions.count() {
                feats.row_mut(r).copy_from_slice(triple.regions.vectors.row(r));
            }
            let feats = graph.constant(feats);
            let proj = graph.matmul(feats, p(lay.img_w));
            let proj = graph.add_bias(proj, p(lay.img_b));
            let rpos = graph.gather(p(lay.region_position), &vec![0; n_reg]);
            let rseg = graph.gather(p(lay.segment), &vec![1; n_reg]);
            let img = graph.add(proj, rpos);
            parts.push(graph.add(img, rseg));
        }
        let x = graph.concat_rows(&parts);
        let x = graph.layer_norm(x, p(lay.emb_ln_g), p(lay.emb_ln_b), eps);
        let mut x = self.dropout(graph, x, cfg.dropout, dropout_rng.as_deref_mut());

        // Additive key mask: padding keys get a large negative score.
        let n = seq.len();
        let mut mask = Matrix::zeros(n, n);
        for (j, role) in seq.roles.iter().enumerate() {
            if *role == PositionRole::Padding {
                for i in 0..n {
                    mask.set(i, j, T::mask_value());
                }
            }
        }

        let mut out = BTreeMap::new();
        for (li, ids) in lay.layers.iter().enumerate() {
            x = self.encoder_layer(graph, bound, ids, x, &mask, dropout_rng.as_deref_mut());
            if retain.contains(&(li + 1)) {
                out.insert(li + 1, x);
            }
        }
        Ok(GraphOutput {
            layers: out,
            roles: seq.roles,
        })
    }

    fn dropout(&self, graph: &mut Graph<T>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = graph.value(x).shape();
                let keep = T::of(1.0 / (1.0 - rate));
                let data = (0..r * c)
                    .map(|_| if rng.random_bool(rate) { T::zero() } else { keep })
                    .collect();
                graph.mul_const(x, Matrix::from_vec(r, c, data))
            }
            _ => x,
        }
    }

    fn encoder_layer(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        ids: &LayerIds,
        x: Var,
        mask: &Matrix<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let cfg = &self.config;
        let p = |id: usize| bound.var(id);
        let eps = T::of(cfg.layer_norm_eps);
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let q = graph.matmul(x, p(ids.q_w));
        let q = graph.add_bias(q, p(ids.q_b));
        let k = graph.matmul(x, p(ids.k_w));
        let k = graph.add_bias(k, p(ids.k_b));
        let v = graph.matmul(x, p(ids.v_w));
        let v = graph.add_bias(v, p(ids.v_b));

        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = graph.slice_cols(q, h * dh, dh);
            let kh = graph.slice_cols(k, h * dh, dh);
            let vh = graph.slice_cols(v, h * dh, dh);
            let scores = graph.matmul_t(qh, kh);
            let scores = graph.scale(scores, scale);
            let scores = graph.add_const(scores, mask);
            let probs = graph.softmax_rows(scores);
            let probs = self.dropout(graph, probs, cfg.attention_dropout, rng.as_deref_mut());
            heads.push(graph.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            graph.concat_cols(&heads)
        };
        let attn = graph.matmul(ctx, p(ids.o_w));
        let attn = graph.add_bias(attn, p(ids.o_b));
        let attn = self.dropout(graph, attn, cfg.dropout, rng.as_deref_mut());
        let h1 = graph.add(x, attn);
        let h1 = graph.layer_norm(h1, p(ids.ln1_g), p(ids.ln1_b), eps);

        let ff = graph.matmul(h1, p(ids.ff1_w));
        let ff = graph.add_bias(ff, p(ids.ff1_b));
        let ff = graph.gelu(ff);
        let ff = graph.matmul(ff, p(ids.ff2_w));
        let ff = graph.add_bias(ff, p(ids.ff2_b));
        let ff = self.dropout(graph, ff, cfg.dropout, rng);
        let h2 = graph.add(h1, ff);
        graph.layer_norm(h2, p(ids.ln2_g), p(ids.ln2_b), eps)
    }

    /// Logits (`1 × num_classes`) from the final-layer `[CLS]` row.
    pub fn classify_graph(&self, graph: &mut Graph<T>, bound: &Bound, out: &GraphOutput) -> Result<Var> {
        let last = *out
            .layers
            .get(&self.config.num_layers)
            .ok_or_else(|| Error::contract("classification needs the last layer"))?;
        let cls = graph.gather(last, &[0]);
        let logits = graph.matmul(cls, bound.var(self.layout.cls_w));
        Ok(graph.add_bias(logits, bound.var(self.layout.cls_b)))
    }

    /// Evaluation-mode (`training == false`) or dropout-enabled forward pass
    /// returning plain hidden states.
    pub fn forward(
        &self,
        triple: &WordTagImageTriple<T>,
        retain: &BTreeSet<usize>,
        training: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput<T>> {
        self.forward_padded(triple, (0, 0), retain, training)
    }

    pub fn forward_padded(
        &self,
        triple: &WordTagImageTriple<T>,
        padding: (usize, usize),
        retain: &BTreeSet<usize>,
        training: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput<T>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, |_| false);
        let out = self.forward_graph(&mut graph, &bound, triple, padding, retain, training)?;
        Ok(EncoderOutput {
            layers: out.layers.iter().map(|(&m, &v)| (m, graph.value(v).clone())).collect(),
            roles: out.roles,
        })
    }

    /// Logits as the linear map `W·c + b` of the final-layer `[CLS]` embedding.
    pub fn classify(&self, out: &EncoderOutput<T>) -> Result<Vec<T>> {
        let last = out
            .layers
            .get(&self.config.num_layers)
            .ok_or_else(|| Error::contract("classification needs the last layer"))?;
        let cls = Matrix::from_vec(1, last.cols(), last.row(0).to_vec());
        let w = &self.params[self.layout.cls_w].value;
        let b = &self.params[self.layout.cls_b].value;
        let mut logits = cls.matmul(w);
        logits.add_assign(b);
        Ok(logits.into_vec())
    }

    /// Extracts per-parameter gradients from a backward sweep.
    pub fn collect_gradients(&self, bound: &Bound, grads: &mut Grads<T>) -> Gradients<T> {
        Gradients {
            grads: bound.vars().iter().map(|&v| grads.take(v)).collect(),
        }
    }

    /// Builds a loss with `build`, differentiates it and returns
    /// `(loss, gradients)`. Parameters whose group is not `trainable` get no
    /// gradient.
    pub fn gradients(
        &self,
        trainable: impl Fn(ParamGroup) -> bool,
        build: impl FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
    ) -> Result<(T, Gradients<T>)> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, trainable);
        let loss = build(&mut graph, &bound)?;
        let value = graph.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let mut grads = graph.backward(loss);
        let g = self.collect_gradients(&bound, &mut grads);
        if !g.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok((value, g))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Gaussian,
    Zeros,
    Ones,
}
