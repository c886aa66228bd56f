//! The two-branch guided-embedding network.
//!
//! Images enter as NHWC rasters flattened to `(B*H*W) x 3`. A strided
//! convolutional backbone and a transformer encoder produce visual tokens.
//! The instance decoder refines paired human/object queries; each of its
//! layers yields interaction queries for the matching interaction decoder
//! layer. Every decoder layer feeds the prediction heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::label_space::LabelSpace;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vlkt::{cosine_logits, DEFAULT_THETA};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    /// One output per HOI triplet, scored against text-embedding rows.
    #[default]
    Triplet,
    /// One linear output per verb; triplet scores reuse their verb's score.
    Verb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    /// Shared visual-token and query width.
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    /// Text-embedding width of the classifier rows.
    pub text_dim: usize,
    pub theta: f64,
    pub classifier_mode: ClassifierMode,
    pub use_pge: bool,
    pub use_ige: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 1,
            decoder_layers: 3,
            num_queries: 16,
            text_dim: 64,
            theta: DEFAULT_THETA,
            classifier_mode: ClassifierMode::Triplet,
            use_pge: true,
            use_ige: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even for 2-d position encodings".into());
        }
        if self.decoder_layers == 0 || self.num_queries == 0 {
            return bad("decoder_layers and num_queries must be at least 1".into());
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone_channels and backbone_strides must be non-empty and equally long".into());
        }
        if self.backbone_strides.contains(&0) || self.text_dim == 0 || self.ffn_dim == 0 {
            return bad("strides, text_dim and ffn_dim must be positive".into());
        }
        if self.image_size < self.total_stride() {
            return bad(format!("image_size {} smaller than backbone stride {}", self.image_size, self.total_stride()));
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    /// Side length of the token grid.
    pub fn feature_size(&self) -> usize {
        self.backbone_strides.iter().fold(self.image_size, |s, &st| (s - 1) / st + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mha {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Mha,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    /// Absent in the first layer, whose target starts at zero: self-attention
    /// over identical zero rows is a query-independent constant and its
    /// near-zero LayerNorm input only amplifies gradient noise.
    self_attn: Option<(Mha, Norm)>,
    cross_attn: Mha,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
    norm3: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Mlp3 {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    in_ch: usize,
}

#[derive(Clone, Debug)]
enum InteractionHead {
    Triplet { rows: ParamId },
    /// `select` maps verb scores to triplet columns (`N_verbs x N_a`).
    Verb { head: Linear, select: Tensor },
}

#[derive(Clone, Debug)]
enum QuerySource {
    Paired { q_h: ParamId, q_o: ParamId, p_q: ParamId },
    Unified { q_u: ParamId },
}

/// Classifier rows and their optimizer treatment.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInit {
    /// `N_a x c_t`; ignored in verb mode.
    pub interaction_rows: Tensor,
    pub interaction_group: ParamGroup,
    /// `N_o x c_t`.
    pub object_rows: Tensor,
    pub object_group: ParamGroup,
}

impl HeadInit {
    /// Random unit rows trained at the main rate.
    pub fn random(ls: &LabelSpace, text_dim: usize, seed: u64) -> Self {
        let r = |n, s| crate::vlkt::Classifier::random(n, text_dim, DEFAULT_THETA, true, s).weights;
        HeadInit {
            interaction_rows: r(ls.num_triplets(), seed),
            interaction_group: ParamGroup::Main,
            object_rows: r(ls.num_objects(), seed ^ 0x5bd1_e995),
            object_group: ParamGroup::Main,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    num_objects: usize,
    num_triplets: usize,
    store: ParamStore,
    backbone: Vec<Conv>,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    instance_decoder: Vec<DecoderLayer>,
    interaction_decoder: Vec<DecoderLayer>,
    queries: QuerySource,
    /// Learnable interaction queries used when i-GE is off.
    interaction_embed: Option<ParamId>,
    human_box: Mlp3,
    object_box: Mlp3,
    object_proj: Linear,
    object_rows: ParamId,
    no_object_row: ParamId,
    interaction_proj: Linear,
    interaction: InteractionHead,
}

/// Per-layer graph outputs of the heads.
#[derive(Clone, Debug)]
pub struct LayerHeads {
    /// `(B*N_q) x 4`, normalized cx, cy, w, h.
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// `(B*N_q) x (N_o + 1)`, last column is no-object.
    pub object_logits: Var,
    /// `(B*N_q) x N_active`.
    pub interaction_logits: Var,
}

/// Per-layer decoder features (all `(B*N_q) x C`).
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    pub human: Var,
    pub object: Var,
    pub interaction_query: Var,
    pub interaction: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub heads: Vec<LayerHeads>,
    pub features: Vec<LayerFeatures>,
    /// Last-layer interaction features projected to the text width.
    pub interaction_embedding: Var,
}

/// Materialized head outputs for one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub human_boxes: Tensor,
    pub object_boxes: Tensor,
    pub object_logits: Tensor,
    pub interaction_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub batch: usize,
    pub num_queries: usize,
    pub layers: Vec<LayerPrediction>,
}

/// Materialized decoder features for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub human: Tensor,
    pub object: Tensor,
    pub interaction_query: Tensor,
    pub interaction: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::uniform(fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = xavier(&mut self.rng, din, dout);
        Linear {
            w: self.store.add(format!("{name}.weight"), w, ParamGroup::Main, false),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(1, dout), ParamGroup::Main, true),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(1, d, 1.0), ParamGroup::Main, true),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(1, d), ParamGroup::Main, true),
        }
    }

    fn mha(&mut self, name: &str, d: usize) -> Mha {
        Mha {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn decoder_layer(&mut self, name: &str, d: usize, ffn: usize, first: bool) -> DecoderLayer {
        DecoderLayer {
            self_attn: (!first).then(|| (self.mha(&format!("{name}.self_attn"), d), self.norm(&format!("{name}.norm1"), d))),
            cross_attn: self.mha(&format!("{name}.cross_attn"), d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            ff1: self.linear(&format!("{name}.ffn1"), d, ffn),
            ff2: self.linear(&format!("{name}.ffn2"), ffn, d),
            norm3: self.norm(&format!("{name}.norm3"), d),
        }
    }

    fn mlp3(&mut self, name: &str, d: usize, out: usize) -> Mlp3 {
        Mlp3 {
            l1: self.linear(&format!("{name}.0"), d, d),
            l2: self.linear(&format!("{name}.1"), d, d),
            l3: self.linear(&format!("{name}.2"), d, out),
        }
    }

    fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = Tensor::randn(rows, cols, 1.0, &mut self.rng);
        self.store.add(name, t, ParamGroup::Main, true)
    }
}

/// Sinusoidal 2-d position encoding for a `side x side` grid: the first half
/// of the channels encodes the row, the second half the column.
pub fn position_encoding(side: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let scale = 2.0 * std::f64::consts::PI;
    let mut t = Tensor::zeros(side * side, dim);
    for y in 0..side {
        for x in 0..side {
            let row = t.row_mut(y * side + x);
            for (offset, coord) in [(0, y), (half, x)] {
                let p = (coord as f64 + 1.0) / side as f64 * scale;
                for j in 0..half {
                    let freq = 10000f64.powf(2.0 * (j / 2) as f64 / half as f64);
                    row[offset + j] = if j % 2 == 0 { (p / freq).sin() } else { (p / freq).cos() };
                }
            }
        }
    }
    t
}

impl Model {
    pub fn new(config: ModelConfig, ls: &LabelSpace, init: HeadInit, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, ct, nq) = (config.hidden_dim, config.text_dim, config.num_queries);
        if init.object_rows.shape() != (ls.num_objects(), ct) {
            return Err(Error::Shape(format!(
                "object rows {:?}, expected ({}, {ct})",
                init.object_rows.shape(),
                ls.num_objects()
            )));
        }
        if config.classifier_mode == ClassifierMode::Triplet && init.interaction_rows.shape() != (ls.num_triplets(), ct)
        {
            return Err(Error::Shape(format!(
                "interaction rows {:?}, expected ({}, {ct})",
                init.interaction_rows.shape(),
                ls.num_triplets()
            )));
        }
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };

        let mut backbone = Vec::new();
        let mut in_ch = 3;
        for (i, (&out_ch, &stride)) in config.backbone_channels.iter().zip(&config.backbone_strides).enumerate() {
            let fan_in = 9 * in_ch;
            let w = Tensor::randn(fan_in, out_ch, (2.0 / fan_in as f64).sqrt(), &mut b.rng);
            backbone.push(Conv {
                w: b.store.add(format!("backbone.{i}.weight"), w, ParamGroup::Main, false),
                b: b.store.add(format!("backbone.{i}.bias"), Tensor::zeros(1, out_ch), ParamGroup::Main, true),
                stride,
                in_ch,
            });
            in_ch = out_ch;
        }
        let input_proj = b.linear("input_proj", in_ch, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                attn: b.mha(&format!("encoder.{i}.self_attn"), d),
                norm1: b.norm(&format!("encoder.{i}.norm1"), d),
                ff1: b.linear(&format!("encoder.{i}.ffn1"), d, config.ffn_dim),
                ff2: b.linear(&format!("encoder.{i}.ffn2"), config.ffn_dim, d),
                norm2: b.norm(&format!("encoder.{i}.norm2"), d),
            })
            .collect();
        let instance_decoder =
            (0..config.decoder_layers).map(|i| b.decoder_layer(&format!("instance_decoder.{i}"), d, config.ffn_dim, i == 0)).collect();
        let interaction_decoder = (0..config.decoder_layers)
            .map(|i| b.decoder_layer(&format!("interaction_decoder.{i}"), d, config.ffn_dim, i == 0))
            .collect();
        let queries = if config.use_pge {
            QuerySource::Paired {
                q_h: b.embedding("queries.human", nq, d),
                q_o: b.embedding("queries.object", nq, d),
                p_q: b.embedding("queries.position", nq, d),
            }
        } else {
            QuerySource::Unified { q_u: b.embedding("queries.unified", nq, d) }
        };
        let interaction_embed = (!config.use_ige).then(|| b.embedding("queries.interaction", nq, d));
        let human_box = b.mlp3("human_box", d, 4);
        let object_box = b.mlp3("object_box", d, 4);
        let object_proj = b.linear("object_proj", d, ct);
        let object_rows = b.store.add("object_classifier.rows", init.object_rows, init.object_group, true);
        let nr = Tensor::randn(1, ct, 1.0 / (ct as f64).sqrt(), &mut b.rng);
        let no_object_row = b.store.add("object_classifier.no_object", nr, ParamGroup::Main, true);
        let interaction_proj = b.linear("interaction_proj", d, ct);
        let interaction = match config.classifier_mode {
            ClassifierMode::Triplet => InteractionHead::Triplet {
                rows: b.store.add("interaction_classifier.rows", init.interaction_rows, init.interaction_group, true),
            },
            ClassifierMode::Verb => {
                let head = b.linear("verb_head", ct, ls.num_verbs());
                let mut select = Tensor::zeros(ls.num_verbs(), ls.num_triplets());
                for t in ls.triplets() {
                    select.set(t.verb_id, t.id, 1.0);
                }
                InteractionHead::Verb { head, select }
            }
        };
        Ok(Model {
            num_objects: ls.num_objects(),
            num_triplets: ls.num_triplets(),
            config,
            store,
            backbone,
            input_proj,
            encoder,
            instance_decoder,
            interaction_decoder,
            queries,
            interaction_embed,
            human_box,
            object_box,
            object_proj,
            object_rows,
            no_object_row,
            interaction_proj,
            interaction,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn num_triplets(&self) -> usize {
        self.num_triplets
    }

    /// Parameter holding the interaction classifier rows (triplet mode).
    pub fn interaction_rows_id(&self) -> Option<ParamId> {
        match self.interaction {
            InteractionHead::Triplet { rows } => Some(rows),
            InteractionHead::Verb { .. } => None,
        }
    }

    pub fn object_rows_id(&self) -> ParamId {
        self.object_rows
    }

    /// Replaces the interaction classifier rows, keeping their group.
    pub fn set_interaction_rows(&mut self, rows: Tensor) -> Result<()> {
        let id = self.interaction_rows_id().ok_or_else(|| Error::Config("verb mode has no classifier rows".into()))?;
        if rows.shape() != self.store.value(id).shape() {
            return Err(Error::Shape(format!("rows {:?}, expected {:?}", rows.shape(), self.store.value(id).shape())));
        }
        *self.store.value_mut(id) = rows;
        Ok(())
    }

    fn linear(&self, g: &Graph, p: &Bound, l: Linear, x: Var) -> Var {
        g.add_row(g.matmul(x, p.var(l.w)), p.var(l.b))
    }

    fn norm(&self, g: &Graph, p: &Bound, n: Norm, x: Var) -> Var {
        g.layer_norm(x, p.var(n.gamma), p.var(n.beta))
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(&self, g: &Graph, p: &Bound, m: Mha, q: Var, k: Var, v: Var, batch: usize) -> Var {
        let q = self.linear(g, p, m.q, q);
        let k = self.linear(g, p, m.k, k);
        let v = self.linear(g, p, m.v, v);
        let a = g.attention(q, k, v, batch, self.config.heads);
        self.linear(g, p, m.o, a)
    }

    fn ffn(&self, g: &Graph, p: &Bound, ff1: Linear, ff2: Linear, x: Var) -> Var {
        let h = g.relu(self.linear(g, p, ff1, x));
        self.linear(g, p, ff2, h)
    }

    fn mlp3(&self, g: &Graph, p: &Bound, m: Mlp3, x: Var) -> Var {
        let h = g.relu(self.linear(g, p, m.l1, x));
        let h = g.relu(self.linear(g, p, m.l2, h));
        g.sigmoid(self.linear(g, p, m.l3, h))
    }

    /// Backbone plus transformer encoder: returns `(B*HW) x C` tokens and
    /// the tiled position encoding.
    pub fn encode(&self, g: &Graph, p: &Bound, images: Var, batch: usize) -> Result<(Var, Var)> {
        let s = self.config.image_size;
        if g.shape(images) != (batch * s * s, 3) {
            return Err(Error::Shape(format!(
                "images {:?}, expected ({}, 3) for batch {batch} of {s}x{s}",
                g.shape(images),
                batch * s * s
            )));
        }
        let (mut x, mut side) = (images, s);
        for c in &self.backbone {
            let geom =
                ConvGeometry { batch, height: side, width: side, channels: c.in_ch, kernel: 3, stride: c.stride, padding: 1 };
            let cols = g.im2col(x, geom);
            x = g.relu(g.add_row(g.matmul(cols, p.var(c.w)), p.var(c.b)));
            side = geom.out_height();
        }
        let mut src = self.linear(g, p, self.input_proj, x);
        let pos = g.constant(position_encoding(side, self.config.hidden_dim).clone());
        let pos = g.tile_rows(pos, batch);
        for l in &self.encoder {
            let qk = g.add(src, pos);
            let a = self.mha(g, p, l.attn, qk, qk, src, batch);
            src = self.norm(g, p, l.norm1, g.add(src, a));
            let f = self.ffn(g, p, l.ff1, l.ff2, src);
            src = self.norm(g, p, l.norm2, g.add(src, f));
        }
        Ok((src, pos))
    }

    /// Instance queries `[Q_h + P_q; Q_o + P_q]` (`2N_q x C`), or `[Q_u; Q_u]`
    /// without position guidance.
    pub fn instance_queries(&self, g: &Graph, p: &Bound) -> Var {
        match self.queries {
            QuerySource::Paired { q_h, q_o, p_q } => build_instance_queries(g, p.var(q_h), p.var(q_o), Some(p.var(p_q))),
            QuerySource::Unified { q_u } => g.concat_rows(&[p.var(q_u), p.var(q_u)]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        g: &Graph,
        p: &Bound,
        l: &DecoderLayer,
        tgt: Var,
        query_pos: Var,
        memory: Var,
        memory_key: Var,
        batch: usize,
    ) -> Var {
        let tgt = match l.self_attn {
            Some((attn, norm)) => {
                let q = g.add(tgt, query_pos);
                let a = self.mha(g, p, attn, q, q, tgt, batch);
                self.norm(g, p, norm, g.add(tgt, a))
            }
            None => tgt,
        };
        let a = self.mha(g, p, l.cross_attn, g.add(tgt, query_pos), memory_key, memory, batch);
        let tgt = self.norm(g, p, l.norm2, g.add(tgt, a));
        let f = self.ffn(g, p, l.ff1, l.ff2, tgt);
        self.norm(g, p, l.norm3, g.add(tgt, f))
    }

    /// Regroups `(B*2N_q) x C` decoder rows into human and object halves.
    fn split_instances(&self, g: &Graph, x: Var, batch: usize) -> (Var, Var) {
        let nq = self.config.num_queries;
        let mut h = Vec::with_capacity(batch);
        let mut o = Vec::with_capacity(batch);
        for b in 0..batch {
            h.push(g.slice_rows(x, b * 2 * nq, nq));
            o.push(g.slice_rows(x, b * 2 * nq + nq, nq));
        }
        (g.concat_rows(&h), g.concat_rows(&o))
    }

    /// Full forward pass. `active` restricts the interaction outputs to a
    /// subset of triplet ids (columns in the given order).
    pub fn forward(&self, g: &Graph, p: &Bound, images: &Tensor, batch: usize, active: Option<&[usize]>) -> Result<Forward> {
        let nq = self.config.num_queries;
        let img = g.constant(images.clone());
        let (memory, pos) = self.encode(g, p, img, batch)?;
        let memory_key = g.add(memory, pos);

        let q_ins = g.tile_rows(self.instance_queries(g, p), batch);
        let mut tgt = g.constant(Tensor::zeros(batch * 2 * nq, self.config.hidden_dim));
        let mut inter = g.constant(Tensor::zeros(batch * nq, self.config.hidden_dim));
        let obj_rows = g.concat_rows(&[p.var(self.object_rows), p.var(self.no_object_row)]);
        let (int_rows, select) = match &self.interaction {
            InteractionHead::Triplet { rows } => {
                let r = p.var(*rows);
                (Some(active.map_or(r, |ids| g.gather_rows(r, ids))), None)
            }
            InteractionHead::Verb { head, select } => {
                let s = match active {
                    Some(ids) => {
                        let mut t = Tensor::zeros(select.rows(), ids.len());
                        for (j, &h) in ids.iter().enumerate() {
                            for v in 0..select.rows() {
                                t.set(v, j, select.get(v, h));
                            }
                        }
                        t
                    }
                    None => select.clone(),
                };
                (None, Some((*head, g.constant(s))))
            }
        };

        let mut heads = Vec::with_capacity(self.config.decoder_layers);
        let mut features = Vec::with_capacity(self.config.decoder_layers);
        let mut embedding = None;
        for k in 0..self.config.decoder_layers {
            tgt = self.decoder_layer(g, p, &self.instance_decoder[k], tgt, q_ins, memory, memory_key, batch);
            let (v_h, v_o) = self.split_instances(g, tgt, batch);
            let q_a = match self.interaction_embed {
                None => make_interaction_queries(g, v_h, v_o),
                Some(e) => {
                    let pq = match self.queries {
                        QuerySource::Paired { p_q, .. } => g.add(p.var(e), p.var(p_q)),
                        QuerySource::Unified { .. } => p.var(e),
                    };
                    g.tile_rows(pq, batch)
                }
            };
            inter = self.decoder_layer(g, p, &self.interaction_decoder[k], inter, q_a, memory, memory_key, batch);

            let obj_feat = self.linear(g, p, self.object_proj, v_o);
            let int_feat = self.linear(g, p, self.interaction_proj, inter);
            let interaction_logits = match (int_rows, &select) {
                (Some(r), _) => cosine_logits(g, int_feat, r, self.config.theta),
                (None, Some((head, s))) => g.matmul(self.linear(g, p, *head, int_feat), *s),
                _ => unreachable!(),
            };
            heads.push(LayerHeads {
                human_boxes: self.mlp3(g, p, self.human_box, v_h),
                object_boxes: self.mlp3(g, p, self.object_box, v_o),
                object_logits: cosine_logits(g, obj_feat, obj_rows, self.config.theta),
                interaction_logits,
            });
            features.push(LayerFeatures { human: v_h, object: v_o, interaction_query: q_a, interaction: inter });
            embedding = Some(int_feat);
        }
        Ok(Forward { batch, heads, features, interaction_embedding: embedding.expect("at least one decoder layer") })
    }

    /// Evaluation-mode forward returning materialized outputs.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<(PredictionSet, Vec<LayerOutputs>)> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let f = self.forward(&g, &p, images, batch, None)?;
        let layers = f
            .heads
            .iter()
            .map(|h| LayerPrediction {
                human_boxes: g.value(h.human_boxes).clone(),
                object_boxes: g.value(h.object_boxes).clone(),
                object_logits: g.value(h.object_logits).clone(),
                interaction_logits: g.value(h.interaction_logits).clone(),
            })
            .collect();
        let outputs = f
            .features
            .iter()
            .map(|x| LayerOutputs {
                human: g.value(x.human).clone(),
                object: g.value(x.object).clone(),
                interaction_query: g.value(x.interaction_query).clone(),
                interaction: g.value(x.interaction).clone(),
            })
            .collect();
        Ok((PredictionSet { batch, num_queries: self.config.num_queries, layers }, outputs))
    }
}

/// `[Q_h + P_q; Q_o + P_q]`, or `[Q_h; Q_o]` without `P_q`.
pub fn build_instance_queries(g: &Graph, q_h: Var, q_o: Var, p_q: Option<Var>) -> Var {
    match p_q {
        Some(pq) => g.concat_rows(&[g.add(q_h, pq), g.add(q_o, pq)]),
        None => g.concat_rows(&[q_h, q_o]),
    }
}

/// Instance-guided interaction queries `(V_h + V_o) / 2`.
pub fn make_interaction_queries(g: &Graph, v_h: Var, v_o: Var) -> Var {
    g.scale(g.add(v_h, v_o), 0.5)
}

/// Uniform random image batch in `[0, 1]`, mostly for tests and benchmarks.
pub fn random_images(batch: usize, side: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(batch * side * side, 3, (0..batch * side * side * 3).map(|_| rng.gen::<f64>()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::{Article, ObjectRecord, TripletRecord, VerbRecord};

    pub(crate) fn tiny_ls() -> LabelSpace {
        let objects = (0..2).map(|i| ObjectRecord { id: i, name: format!("o{i}"), article: Article::A }).collect();
        let verbs = (0..2)
            .map(|i| VerbRecord { id: i, name: format!("v{i}"), gerund: Some(format!("v{i}ing")), is_no_interaction: false })
            .collect();
        let triplets = vec![
            TripletRecord { id: 0, verb_id: 0, object_id: 0 },
            TripletRecord { id: 1, verb_id: 1, object_id: 0 },
            TripletRecord { id: 2, verb_id: 0, object_id: 1 },
        ];
        LabelSpace::new(objects, verbs, triplets).unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            backbone_channels: vec![4, 8],
            backbone_strides: vec![2, 2],
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            num_queries: 3,
            text_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_model(cfg: ModelConfig) -> Model {
        let ls = tiny_ls();
        Model::new(cfg.clone(), &ls, HeadInit::random(&ls, cfg.text_dim, 1), 7).unwrap()
    }

    #[test]
    fn default_config_token_shape() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_stride(), 8);
        assert_eq!(cfg.feature_size() * cfg.feature_size(), 64);
    }

    #[test]
    fn encoder_shapes_and_zero_image() {
        let m = tiny_model(tiny_config());
        let g = Graph::new();
        let p = m.params().bind(&g, false);
        let img = g.constant(Tensor::zeros(16 * 16, 3));
        let (tokens, _) = m.encode(&g, &p, img, 1).unwrap();
        assert_eq!(g.shape(tokens), (16, 8));
        assert!(g.value(tokens).is_finite());
        let small = g.constant(Tensor::zeros(8 * 8, 3));
        assert!(m.encode(&g, &p, small, 1).is_err());
    }

    #[test]
    fn one_pixel_changes_tokens() {
        let m = tiny_model(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_images(1, 16, &mut rng);
        let mut b = a.clone();
        b.set(37, 1, 1.0 - b.get(37, 1));
        let g = Graph::new();
        let p = m.params().bind(&g, false);
        let (ta, _) = m.encode(&g, &p, g.constant(a), 1).unwrap();
        let (tb, _) = m.encode(&g, &p, g.constant(b), 1).unwrap();
        assert!(g.value(ta).max_abs_diff(&g.value(tb)) > 0.0);
    }

    #[test]
    fn instance_query_arithmetic() {
        let g = Graph::new();
        let q_h = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]));
        let q_o = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let p_q = g.constant(Tensor::from_rows(&[vec![10.0], vec![20.0]]));
        let q = build_instance_queries(&g, q_h, q_o, Some(p_q));
        assert_eq!(g.value(q).data(), &[11.0, 22.0, 13.0, 24.0]);
        let zero = g.constant(Tensor::zeros(2, 1));
        let q = build_instance_queries(&g, q_h, q_o, Some(zero));
        assert_eq!(g.value(q).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn interaction_query_arithmetic() {
        let g = Graph::new();
        let c = |v: f64| g.constant(Tensor::scalar(v));
        assert_eq!(g.scalar_value(make_interaction_queries(&g, c(2.0), c(4.0))), 3.0);
        assert_eq!(g.scalar_value(make_interaction_queries(&g, c(1.5), c(1.5))), 1.5);
        assert_eq!(g.scalar_value(make_interaction_queries(&g, c(-2.5), c(2.5))), 0.0);
    }

    #[test]
    fn forward_shapes_ranges_and_determinism() {
        let m = tiny_model(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let imgs = random_images(2, 16, &mut rng);
        let (a, outs) = m.predict(&imgs, 2).unwrap();
        let (b, _) = m.predict(&imgs, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 2);
        for l in &a.layers {
            assert_eq!(l.human_boxes.shape(), (6, 4));
            assert_eq!(l.object_logits.shape(), (6, 3));
            assert_eq!(l.interaction_logits.shape(), (6, 3));
            assert!(l.human_boxes.data().iter().chain(l.object_boxes.data()).all(|&v| v > 0.0 && v < 1.0));
        }
        for o in &outs {
            let expect = o.human.data().iter().zip(o.object.data()).map(|(h, o)| (h + o) * 0.5);
            assert!(expect.zip(o.interaction_query.data()).all(|(e, &q)| e == q));
        }
    }

    #[test]
    fn batch_matches_single_calls() {
        let m = tiny_model(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs = random_images(2, 16, &mut rng);
        let (both, _) = m.predict(&imgs, 2).unwrap();
        for b in 0..2 {
            let (one, _) = m.predict(&imgs.slice_rows(b * 256, 256), 1).unwrap();
            for (l1, l2) in both.layers.iter().zip(&one.layers) {
                let d = l1.interaction_logits.slice_rows(b * 3, 3).max_abs_diff(&l2.interaction_logits);
                assert!(d < 1e-5, "{d}");
                assert!(l1.human_boxes.slice_rows(b * 3, 3).max_abs_diff(&l2.human_boxes) < 1e-5);
            }
        }
    }

    #[test]
    fn ablation_variants_run() {
        for (pge, ige, mode) in [
            (false, true, ClassifierMode::Triplet),
            (true, false, ClassifierMode::Triplet),
            (true, true, ClassifierMode::Verb),
        ] {
            let m = tiny_model(ModelConfig { use_pge: pge, use_ige: ige, classifier_mode: mode, ..tiny_config() });
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (p, _) = m.predict(&random_images(1, 16, &mut rng), 1).unwrap();
            assert_eq!(p.layers[1].interaction_logits.shape(), (3, 3));
            assert!(p.layers[1].interaction_logits.is_finite());
        }
    }

    #[test]
    fn verb_mode_copies_verb_scores_to_triplets() {
        let m = tiny_model(ModelConfig { classifier_mode: ClassifierMode::Verb, ..tiny_config() });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, _) = m.predict(&random_images(1, 16, &mut rng), 1).unwrap();
        let s = &p.layers[1].interaction_logits;
        // triplets 0 and 2 share verb 0
        for q in 0..3 {
            assert_eq!(s.get(q, 0), s.get(q, 2));
        }
    }

    #[test]
    fn active_rows_select_columns() {
        let m = tiny_model(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs = random_images(1, 16, &mut rng);
        let g = Graph::new();
        let p = m.params().bind(&g, false);
        let full = m.forward(&g, &p, &imgs, 1, None).unwrap();
        let sub = m.forward(&g, &p, &imgs, 1, Some(&[2, 0])).unwrap();
        let (f, s) = (g.value(full.heads[1].interaction_logits), g.value(sub.heads[1].interaction_logits));
        for q in 0..3 {
            assert_eq!(s.get(q, 0), f.get(q, 2));
            assert_eq!(s.get(q, 1), f.get(q, 0));
        }
    }

    #[test]
    fn self_similarity_row_scores_theta() {
        let mut m = tiny_model(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs = random_images(1, 16, &mut rng);
        let g = Graph::new();
        let p = m.params().bind(&g, false);
        let f = m.forward(&g, &p, &imgs, 1, None).unwrap();
        let v = g.value(f.interaction_embedding).row(0).to_vec();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut rows = m.params().value(m.interaction_rows_id().unwrap()).clone();
        rows.row_mut(1).iter_mut().zip(&v).for_each(|(r, x)| *r = x / n);
        m.set_interaction_rows(rows).unwrap();
        let (pred, _) = m.predict(&imgs, 1).unwrap();
        assert!((pred.layers[1].interaction_logits.get(0, 1) - m.config().theta).abs() < 1e-9);
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let pe = position_encoding(4, 8);
        assert_eq!(pe.shape(), (16, 8));
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(pe.row(a), pe.row(b));
            }
        }
    }
}
