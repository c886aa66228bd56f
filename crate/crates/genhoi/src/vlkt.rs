//! Visual-linguistic knowledge transfer: prompt templates, text-embedding
//! providers, cosine classifiers initialized from text embeddings, and the
//! global visual-embedding mimic loss.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, ObjectRecord, VerbRecord};
use crate::tensor::{standard_normal, Tensor};

/// CLIP's converged logit scale.
pub const DEFAULT_THETA: f64 = 100.0;

const PHOTO_PREFIX: &str = "A photo of ";
const PERSON_PREFIX: &str = "A photo of a person ";

/// Prompt used for images without any annotated interaction.
pub const BACKGROUND_PROMPT: &str = "A photo of an empty scene";

pub fn hoi_prompt(verb: &VerbRecord, object: &ObjectRecord) -> Result<String> {
    if verb.is_no_interaction {
        return Ok(format!("{PERSON_PREFIX}and {} {}", object.article, object.name));
    }
    let gerund = verb.gerund.as_deref().ok_or_else(|| Error::Provider {
        prompt: format!("<{} {}>", verb.name, object.name),
        reason: format!("verb {:?} has no gerund form", verb.name),
    })?;
    Ok(format!("{PERSON_PREFIX}{gerund} {} {}", object.article, object.name))
}

pub fn object_prompt(object: &ObjectRecord) -> String {
    format!("{PHOTO_PREFIX}{} {}", object.article, object.name)
}

/// One prompt per triplet, in triplet-id order.
pub fn hoi_prompts(ls: &LabelSpace) -> Result<Vec<String>> {
    ls.triplets().iter().map(|t| hoi_prompt(&ls.verbs()[t.verb_id], &ls.objects()[t.object_id])).collect()
}

pub fn object_prompts(ls: &LabelSpace) -> Vec<String> {
    ls.objects().iter().map(object_prompt).collect()
}

/// Source of unit-norm text embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn fnv1a(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Compositional stand-in for a CLIP text encoder.
///
/// Each token (verb phrase, object name, "person", "photo") maps to a fixed
/// random unit vector derived from `(seed, token)`. An HOI prompt embeds as
/// `normalize(a*E_verb + b*E_object + c*E_person)`, an object prompt as
/// `normalize(E_object + c*E_photo)`. Triplets that share a verb or an
/// object therefore get correlated embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTextProvider {
    pub seed: u64,
    pub dim: usize,
    pub verb_weight: f64,
    pub object_weight: f64,
    pub context_weight: f64,
}

impl SyntheticTextProvider {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::InvalidArgument(format!("synthetic provider needs dim >= 8, got {dim}")));
        }
        Ok(SyntheticTextProvider { seed, dim, verb_weight: 1.0, object_weight: 1.0, context_weight: 0.5 })
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, token));
        normalize((0..self.dim).map(|_| standard_normal(&mut rng)).collect())
    }

    fn mix(&self, parts: &[(f64, Vec<f64>)]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, v) in parts {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        normalize(out)
    }
}

/// Splits `"<verb words> a|an <object words>"`.
fn split_article(rest: &str) -> Option<(String, String)> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    let pos = words.iter().position(|w| *w == "a" || *w == "an")?;
    if pos + 1 >= words.len() {
        return None;
    }
    Some((words[..pos].join(" "), words[pos + 1..].join(" ")))
}

impl EmbeddingProvider for SyntheticTextProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        if let Some(rest) = prompt.strip_prefix(PERSON_PREFIX) {
            if let Some((verb, object)) = split_article(rest) {
                if !verb.is_empty() {
                    return Ok(self.mix(&[
                        (self.verb_weight, self.token_vector(&format!("verb:{verb}"))),
                        (self.object_weight, self.token_vector(&format!("object:{object}"))),
                        (self.context_weight, self.token_vector("context:person")),
                    ]));
                }
            }
        }
        if let Some(rest) = prompt.strip_prefix(PHOTO_PREFIX) {
            if let Some((lead, object)) = split_article(rest) {
                if lead.is_empty() {
                    return Ok(self.mix(&[
                        (1.0, self.token_vector(&format!("object:{object}"))),
                        (self.context_weight, self.token_vector("context:photo")),
                    ]));
                }
            }
        }
        Ok(self.token_vector(&format!("prompt:{prompt}")))
    }
}

/// Provider backed by precomputed embeddings, looked up by exact prompt.
#[derive(Clone, Debug)]
pub struct TableProvider {
    prompts: Vec<String>,
    embeddings: Tensor,
}

impl TableProvider {
    pub fn new(prompts: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if prompts.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} prompts but {} embedding rows",
                prompts.len(),
                embeddings.rows()
            )));
        }
        Ok(TableProvider { prompts, embeddings })
    }
}

impl EmbeddingProvider for TableProvider {
    fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let i = self.prompts.iter().position(|p| p == prompt).ok_or_else(|| Error::Provider {
            prompt: prompt.to_string(),
            reason: "prompt not present in the embedding table".into(),
        })?;
        Ok(normalize(self.embeddings.row(i).to_vec()))
    }
}

/// Embedding-row classifier scored by scaled cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weights: Tensor,
    pub theta: f64,
    pub trainable: bool,
    /// Rows scored during training; `None` means all rows.
    pub active_rows: Option<Vec<usize>>,
}

impl Classifier {
    pub fn num_rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Random unit rows, the non-text baseline.
    pub fn random(rows: usize, dim: usize, theta: f64, trainable: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Tensor::randn(rows, dim, 1.0, &mut rng);
        for r in 0..rows {
            let n = weights.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            weights.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        Classifier { weights, theta, trainable, active_rows: None }
    }

    pub fn active(&self) -> Vec<usize> {
        self.active_rows.clone().unwrap_or_else(|| (0..self.num_rows()).collect())
    }
}

/// Builds a classifier whose row `j` is the embedding of `prompts[j]`.
pub fn init_classifier(
    prompts: &[String],
    provider: &dyn EmbeddingProvider,
    theta: f64,
    trainable: bool,
) -> Result<Classifier> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to initialize a classifier".into()));
    }
    let dim = provider.dim();
    let mut data = Vec::with_capacity(prompts.len() * dim);
    for p in prompts {
        let v = provider.embed_text(p)?;
        if v.len() != dim {
            return Err(Error::Provider { prompt: p.clone(), reason: format!("returned dim {} != {dim}", v.len()) });
        }
        data.extend(v);
    }
    Ok(Classifier { weights: Tensor::from_vec(prompts.len(), dim, data), theta, trainable, active_rows: None })
}

/// `out[j] = theta * cos(v, w_j)` over every row of the classifier.
pub fn cosine_scores(v: &[f64], cls: &Classifier) -> Result<Vec<f64>> {
    if v.len() != cls.dim() {
        return Err(Error::Shape(format!("query dim {} != classifier dim {}", v.len(), cls.dim())));
    }
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((0..cls.num_rows())
        .map(|j| {
            let w = cls.weights.row(j);
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
            cls.theta * dot / (vn * wn)
        })
        .collect())
}

/// Graph version: `theta * normalize(features) * normalize(rows)^T`.
pub fn cosine_logits(g: &Graph, features: Var, rows: Var, theta: f64) -> Var {
    let f = g.normalize_rows(features);
    let w = g.normalize_rows(rows);
    g.scale(g.matmul_nt(f, w), theta)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MimicNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherSource {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEmbedding {
    pub vector: Vec<f64>,
    pub source: TeacherSource,
}

impl TeacherEmbedding {
    pub fn new(vector: Vec<f64>, source: TeacherSource) -> Self {
        TeacherEmbedding { vector: normalize(vector), source }
    }
}

/// Dimension-mean distance between the teacher and the average of the
/// `N_q` interaction features (absolute for L1, squared for L2).
pub fn mimic_loss(teacher: &TeacherEmbedding, features: &Tensor, norm: MimicNorm) -> Result<f64> {
    let dim = teacher.vector.len();
    if features.cols() != dim {
        return Err(Error::Shape(format!("feature dim {} != teacher dim {dim}", features.cols())));
    }
    if features.rows() == 0 {
        return Err(Error::Shape("mimic loss needs at least one query feature".into()));
    }
    let nq = features.rows() as f64;
    let mut total = 0.0;
    for c in 0..dim {
        let pooled: f64 = (0..features.rows()).map(|r| features.get(r, c)).sum::<f64>() / nq;
        let d = teacher.vector[c] - pooled;
        total += match norm {
            MimicNorm::L1 => d.abs(),
            MimicNorm::L2 => d * d,
        };
    }
    Ok(total / dim as f64)
}

/// Batched graph version of [`mimic_loss`], averaged over the batch.
///
/// `features` is `(B*N_q) x c_t`, `teachers` is `B x c_t`.
pub fn mimic_loss_graph(g: &Graph, features: Var, teachers: &Tensor, nq: usize, norm: MimicNorm) -> Var {
    let pooled = g.mean_row_groups(features, nq);
    let t = g.constant(teachers.clone());
    let diff = g.sub(t, pooled);
    let per = match norm {
        MimicNorm::L1 => g.abs(diff),
        MimicNorm::L2 => g.square(diff),
    };
    g.mean(per)
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Writes `EMB1 | rows u64 | cols u64 | rows*cols f32`, all little-endian.
pub fn save_embedding_matrix(matrix: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * matrix.len());
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_embedding_matrix(path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::EmbeddingFile { path: path.to_path_buf(), reason };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != EMB_MAGIC {
        return Err(bad("missing EMB1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(20));
    if expected != Some(bytes.len()) {
        return Err(bad(format!("header says {rows}x{cols} but payload is {} bytes", bytes.len() - 20)));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[20..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(bad(format!("non-finite value at element {}", data.len())));
        }
        data.push(f64::from(v));
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

/// Loads a text-embedding export for classifier initialization,
/// renormalizing rows whose norm deviates from 1 by more than `1e-3`.
pub fn load_text_embeddings(path: &Path) -> Result<Tensor> {
    let mut m = load_embedding_matrix(path)?;
    let mut fixed = 0;
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::EmbeddingFile { path: path.to_path_buf(), reason: format!("row {r} is all zeros") });
        }
        if (n - 1.0).abs() > 1e-3 {
            m.row_mut(r).iter_mut().for_each(|x| *x /= n);
            fixed += 1;
        }
    }
    if fixed > 0 {
        log::warn!("{}: renormalized {fixed} of {} embedding rows", path.display(), m.rows());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::Article;
    use proptest::prelude::*;

    fn verb(name: &str, gerund: Option<&str>, none: bool) -> VerbRecord {
        VerbRecord { id: 0, name: name.into(), gerund: gerund.map(Into::into), is_no_interaction: none }
    }

    fn obj(name: &str, article: Article) -> ObjectRecord {
        ObjectRecord { id: 0, name: name.into(), article }
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(
            hoi_prompt(&verb("ride", Some("riding"), false), &obj("bicycle", Article::A)).unwrap(),
            "A photo of a person riding a bicycle"
        );
        assert_eq!(
            hoi_prompt(&verb("no_interaction", None, true), &obj("apple", Article::An)).unwrap(),
            "A photo of a person and an apple"
        );
        assert_eq!(
            hoi_prompt(&verb("eat", Some("eating"), false), &obj("apple", Article::An)).unwrap(),
            "A photo of a person eating an apple"
        );
        assert!(hoi_prompt(&verb("eat", None, false), &obj("apple", Article::An)).is_err());
        assert_eq!(object_prompt(&obj("bicycle", Article::A)), "A photo of a bicycle");
        assert_eq!(object_prompt(&obj("apple", Article::An)), "A photo of an apple");
        assert_eq!(object_prompt(&obj("orange", Article::An)), "A photo of an orange");
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn synthetic_provider_is_deterministic_and_normalized() {
        let p = SyntheticTextProvider::new(7, 64).unwrap();
        let a = p.embed_text("A photo of a person riding a bicycle").unwrap();
        let b = p.embed_text("A photo of a person riding a bicycle").unwrap();
        assert_eq!(a, b);
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-12);
        assert!(SyntheticTextProvider::new(7, 4).is_err());
    }

    #[test]
    fn synthetic_provider_shares_structure() {
        let p = SyntheticTextProvider::new(3, 64).unwrap();
        let ride_bike = p.embed_text("A photo of a person riding a bicycle").unwrap();
        let ride_horse = p.embed_text("A photo of a person riding a horse").unwrap();
        let eat_apple = p.embed_text("A photo of a person eating an apple").unwrap();
        assert!(dot(&ride_bike, &ride_horse) > dot(&ride_bike, &eat_apple));
        // the object prompt shares the object token with the HOI prompt
        let bike = p.embed_text("A photo of a bicycle").unwrap();
        assert!(dot(&bike, &ride_bike) > dot(&bike, &eat_apple));
    }

    #[test]
    fn unrelated_triplets_have_small_cosine() {
        // Expected cosine for disjoint pairs is c^2/(a^2+b^2+c^2) = 0.111; at
        // dim 64 each random token inner product has std 1/8.
        let p = SyntheticTextProvider::new(11, 64).unwrap();
        let mut small = 0;
        let total = 1000;
        for i in 0..total {
            let a = p.embed_text(&format!("A photo of a person verbing{i} a thing{i}")).unwrap();
            let b = p.embed_text(&format!("A photo of a person doing{i} a stuff{i}")).unwrap();
            if dot(&a, &b).abs() < 0.3 {
                small += 1;
            }
        }
        assert!(small as f64 / total as f64 > 0.9, "{small}/{total}");
    }

    #[test]
    fn classifier_from_prompts() {
        let p = SyntheticTextProvider::new(5, 16).unwrap();
        let prompts = vec!["A photo of a person holding a cup".to_string()];
        let c = init_classifier(&prompts, &p, DEFAULT_THETA, true).unwrap();
        assert_eq!(c.weights.row(0), p.embed_text(&prompts[0]).unwrap().as_slice());
        assert!(init_classifier(&[], &p, 1.0, true).is_err());
    }

    #[test]
    fn classifier_rows_share_verbs() {
        // 12 triplets over 4 verbs x 3 objects
        let p = SyntheticTextProvider::new(9, 64).unwrap();
        let verbs = ["holding", "riding", "kicking", "carrying"];
        let objects = ["ball", "bike", "box"];
        let prompts: Vec<String> = verbs
            .iter()
            .flat_map(|v| objects.iter().map(move |o| format!("A photo of a person {v} a {o}")))
            .collect();
        let c = init_classifier(&prompts, &p, 1.0, true).unwrap();
        assert_eq!(c.num_rows(), 12);
        for r in 0..12 {
            assert!((dot(c.weights.row(r), c.weights.row(r)) - 1.0).abs() < 1e-12);
        }
        // rows 0 and 1 share "holding"; rows 0 and 4 share nothing
        assert!(dot(c.weights.row(0), c.weights.row(1)) > dot(c.weights.row(0), c.weights.row(4)));
    }

    #[test]
    fn cosine_score_examples() {
        let eye = Classifier {
            weights: Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
            theta: 1.0,
            trainable: false,
            active_rows: None,
        };
        assert_eq!(cosine_scores(&[1.0, 0.0, 0.0], &eye).unwrap(), vec![1.0, 0.0, 0.0]);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = Classifier {
            weights: Tensor::from_rows(&[vec![1.0, 0.0], vec![h, h]]),
            theta: 2.0,
            trainable: false,
            active_rows: None,
        };
        let s = cosine_scores(&[1.0, 0.0], &c).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-15 && (s[1] - 2.0_f64.sqrt()).abs() < 1e-15);
        let doubled = Classifier { theta: 4.0, ..c.clone() };
        let s2 = cosine_scores(&[1.0, 0.0], &doubled).unwrap();
        assert!((s2[1] - 2.0 * s[1]).abs() < 1e-15);
        assert!(matches!(cosine_scores(&[0.0, 0.0], &c), Err(Error::ZeroNorm)));
        assert!(cosine_scores(&[1.0], &c).is_err());
    }

    #[test]
    fn mimic_examples() {
        let t = TeacherEmbedding { vector: vec![0.6, 0.8], source: TeacherSource::Synthetic };
        let exact = Tensor::from_rows(&[vec![0.6, 0.8]]);
        assert_eq!(mimic_loss(&t, &exact, MimicNorm::L1).unwrap(), 0.0);

        // v - t = (0.2, -0.4)
        let v = Tensor::from_rows(&[vec![0.8, 0.4]]);
        assert!((mimic_loss(&t, &v, MimicNorm::L1).unwrap() - 0.3).abs() < 1e-12);

        let t2 = TeacherEmbedding { vector: vec![1.0, 0.0], source: TeacherSource::Synthetic };
        let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((mimic_loss(&t2, &two, MimicNorm::L1).unwrap() - 0.5).abs() < 1e-12);
        assert!((mimic_loss(&t2, &two, MimicNorm::L2).unwrap() - 0.25).abs() < 1e-12);
        assert!(mimic_loss(&t2, &Tensor::zeros(1, 3), MimicNorm::L1).is_err());
    }

    #[test]
    fn mimic_l1_gradient_entries() {
        // away from ties each entry is +-1/(N_q * c_t)
        let nq = 3;
        let ct = 4;
        let feats = Tensor::from_rows(&[
            vec![0.1, 0.9, -0.3, 0.2],
            vec![0.4, 0.1, 0.3, -0.5],
            vec![-0.2, 0.6, 0.0, 0.7],
        ]);
        let teacher = Tensor::from_rows(&[vec![0.5, 0.1, 0.2, -0.4]]);
        let g = Graph::new();
        let f = g.leaf(feats, true);
        let l = mimic_loss_graph(&g, f, &teacher, nq, MimicNorm::L1);
        let grads = g.backward(l);
        let unit = 1.0 / (nq * ct) as f64;
        for &x in grads.get(f).unwrap().data() {
            assert!((x.abs() - unit).abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn graph_mimic_matches_scalar() {
        let feats = Tensor::from_rows(&[vec![0.3, -0.1], vec![0.2, 0.5], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let teachers = Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let g = Graph::new();
        let f = g.constant(feats.clone());
        for norm in [MimicNorm::L1, MimicNorm::L2] {
            let l = g.scalar_value(mimic_loss_graph(&g, f, &teachers, 2, norm));
            let a = mimic_loss(
                &TeacherEmbedding { vector: vec![0.6, 0.8], source: TeacherSource::File },
                &feats.slice_rows(0, 2),
                norm,
            )
            .unwrap();
            let b = mimic_loss(
                &TeacherEmbedding { vector: vec![1.0, 0.0], source: TeacherSource::File },
                &feats.slice_rows(2, 2),
                norm,
            )
            .unwrap();
            assert!((l - (a + b) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emb");
        let m = Tensor::from_vec(3, 4, vec![0.5, -1.25, 3.0, 0.0, 1e-3_f32 as f64, 7.0, -0.125, 2.5, 9.0, 1.0, -4.0, 0.75]);
        save_embedding_matrix(&m, &path).unwrap();
        let back = load_embedding_matrix(&path).unwrap();
        assert_eq!(back.shape(), (3, 4));
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_embedding_matrix(&path).is_err());
        std::fs::write(&path, b"EMB0aaaaaaaaaaaaaaaa").unwrap();
        assert!(load_embedding_matrix(&path).is_err());

        let mut nan = bytes.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &nan).unwrap();
        assert!(load_embedding_matrix(&path).is_err());
    }

    #[test]
    fn text_embedding_rows_are_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let m = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8]]);
        save_embedding_matrix(&m, &path).unwrap();
        let t = load_text_embeddings(&path).unwrap();
        for r in 0..2 {
            assert!((dot(t.row(r), t.row(r)) - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn cosine_scale_invariance(v in proptest::collection::vec(-3.0f64..3.0, 6), alpha in 0.01f64..50.0) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let c = Classifier::random(5, 6, DEFAULT_THETA, false, 1);
            let s = cosine_scores(&v, &c).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let s2 = cosine_scores(&scaled, &c).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn cosine_row_permutation_equivariance(v in proptest::collection::vec(-3.0f64..3.0, 4), seed in 0u64..100) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let c = Classifier::random(5, 4, 10.0, false, seed);
            let perm = [3usize, 0, 4, 1, 2];
            let permuted = Classifier {
                weights: Tensor::from_rows(&perm.iter().map(|&p| c.weights.row(p).to_vec()).collect::<Vec<_>>()),
                ..c.clone()
            };
            let s = cosine_scores(&v, &c).unwrap();
            let sp = cosine_scores(&v, &permuted).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((sp[i] - s[p]).abs() < 1e-12);
            }
        }

        #[test]
        fn mimic_nonnegative(f in proptest::collection::vec(-2.0f64..2.0, 8), t in proptest::collection::vec(-1.0f64..1.0, 4)) {
            prop_assume!(t.iter().any(|x| *x != 0.0));
            let teacher = TeacherEmbedding::new(t, TeacherSource::Synthetic);
            let feats = Tensor::from_vec(2, 4, f);
            prop_assert!(mimic_loss(&teacher, &feats, MimicNorm::L1).unwrap() >= 0.0);
            prop_assert!(mimic_loss(&teacher, &feats, MimicNorm::L2).unwrap() >= 0.0);
        }
    }
}
