//! Training loop: batching, target construction, zero-shot filtering,
//! optimization, metrics and checkpoints.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::data::{augment, synthetic_teacher, Manifest, SceneSample};
use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, SplitSpec};
use crate::loss::{compute_losses, match_layers, LossBreakdown, Target};
use crate::model::{ClassifierMode, HeadInit, Model};
use crate::optim::AdamW;
use crate::params::{load_checkpoint, save_checkpoint, ParamGroup};
use crate::tensor::Tensor;
use crate::vlkt::{
    hoi_prompts, init_classifier, load_embedding_matrix, load_text_embeddings, object_prompts, EmbeddingProvider,
    SyntheticTextProvider, TeacherEmbedding, TeacherSource,
};

/// One line of the metrics log. Loss components are summed over decoder
/// layers and unweighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_box_human: f64,
    pub loss_box_object: f64,
    pub loss_giou_human: f64,
    pub loss_giou_object: f64,
    pub loss_class_object: f64,
    pub loss_class_interaction: f64,
    pub loss_mimic: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    fn new(step: usize, epoch: usize, lr: f64, b: &LossBreakdown, grad_norm: f64) -> Self {
        let sum = |f: fn(&crate::loss::LayerLoss) -> f64| b.layers.iter().map(f).sum();
        StepMetrics {
            step,
            epoch,
            lr,
            loss_total: b.total,
            loss_box_human: sum(|l| l.box_human),
            loss_box_object: sum(|l| l.box_object),
            loss_giou_human: sum(|l| l.giou_human),
            loss_giou_object: sum(|l| l.giou_object),
            loss_class_object: sum(|l| l.class_object),
            loss_class_interaction: sum(|l| l.class_interaction),
            loss_mimic: b.mimic,
            grad_norm,
        }
    }
}

/// Synthetic text encoder for the run.
pub fn text_provider(cfg: &RunConfig) -> Result<SyntheticTextProvider> {
    SyntheticTextProvider::new(cfg.text.provider_seed, cfg.model.text_dim)
}

fn text_rows(file: Option<&PathBuf>, prompts: &[String], provider: &dyn EmbeddingProvider, dim: usize) -> Result<Tensor> {
    let rows = match file {
        Some(path) => load_text_embeddings(path)?,
        None => init_classifier(prompts, provider, 1.0, true)?.weights,
    };
    if rows.shape() != (prompts.len(), dim) {
        return Err(Error::Shape(format!("text embeddings {:?}, expected ({}, {dim})", rows.shape(), prompts.len())));
    }
    Ok(rows)
}

/// Classifier initialization according to the ablation switches. Text rows
/// train at the classifier rate, or stay fixed when frozen or zero-shot.
pub fn head_init(cfg: &RunConfig, ls: &LabelSpace, zero_shot: bool) -> Result<HeadInit> {
    let dim = cfg.model.text_dim;
    let mut init = HeadInit::random(ls, dim, cfg.seed ^ 0x243f_6a88_85a3_08d3);
    let provider = text_provider(cfg)?;
    let text_group = if cfg.ablation.freeze_text_classifiers || zero_shot {
        ParamGroup::Frozen
    } else {
        ParamGroup::Classifier
    };
    if cfg.ablation.use_interaction_text && cfg.model.classifier_mode == ClassifierMode::Triplet {
        init.interaction_rows = text_rows(cfg.text.interaction_embeddings.as_ref(), &hoi_prompts(ls)?, &provider, dim)?;
        init.interaction_group = text_group;
    } else if zero_shot {
        return Err(Error::Config("zero-shot training needs text-initialized interaction rows".into()));
    }
    if cfg.ablation.use_object_text {
        init.object_rows = text_rows(cfg.text.object_embeddings.as_ref(), &object_prompts(ls), &provider, dim)?;
        init.object_group = text_group;
    }
    Ok(init)
}

/// Images used for training: with a split, every image carrying an unseen
/// triplet is dropped.
pub fn training_subset<'a>(samples: &'a [SceneSample], split: Option<&SplitSpec>) -> Vec<&'a SceneSample> {
    samples
        .iter()
        .filter(|s| match split {
            None => true,
            Some(sp) => s.annotations.iter().flat_map(|a| &a.hoi_ids).all(|&h| sp.is_seen(h)),
        })
        .collect()
}

/// Targets in normalized cxcywh with HOI ids mapped to classifier columns.
pub fn targets_for(sample: &SceneSample, columns: &[Option<usize>]) -> Result<Vec<Target>> {
    let (w, h) = (sample.width as f64, sample.height as f64);
    sample
        .annotations
        .iter()
        .map(|a| {
            let hoi_ids = a
                .hoi_ids
                .iter()
                .map(|&id| {
                    columns.get(id).copied().flatten().ok_or_else(|| {
                        Error::Dataset(format!("image {}: triplet {id} has no training column", sample.image_id))
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Target {
                human_box: a.human_box.to_normalized_cxcywh(w, h),
                object_box: a.object_box.to_normalized_cxcywh(w, h),
                object_id: a.object_id,
                hoi_ids,
            })
        })
        .collect()
}

/// Source of per-image teacher embeddings for the mimic loss.
pub enum Teachers<'a> {
    Synthetic(&'a dyn EmbeddingProvider),
    /// Row `image_id` of an embedding matrix.
    Table(Tensor),
}

impl Teachers<'_> {
    pub fn get(&self, s: &SceneSample, ls: &LabelSpace) -> Result<TeacherEmbedding> {
        match self {
            Teachers::Synthetic(p) => synthetic_teacher(s, ls, *p),
            Teachers::Table(t) => {
                let r = s.image_id as usize;
                if r >= t.rows() {
                    return Err(Error::Dataset(format!("no teacher embedding for image_id {}", s.image_id)));
                }
                Ok(TeacherEmbedding::new(t.row(r).to_vec(), TeacherSource::File))
            }
        }
    }
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_metrics(&mut self, _m: &StepMetrics) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the 1-based epoch count.
    fn on_epoch_end(&mut self, _epoch: usize, _step: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Quiet;

impl TrainObserver for Quiet {}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
}

/// Trains a fresh model on `samples`.
pub fn train(
    cfg: &RunConfig,
    ls: &LabelSpace,
    samples: &[SceneSample],
    split: Option<&SplitSpec>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(sp) = split {
        sp.validate(ls.num_triplets())?;
    }
    let init = head_init(cfg, ls, split.is_some())?;
    let mut model = Model::new(cfg.model.clone(), ls, init, cfg.seed)?;

    let active: Option<Vec<usize>> = split.map(|sp| sp.seen.iter().copied().collect());
    let mut columns: Vec<Option<usize>> = vec![None; ls.num_triplets()];
    match &active {
        Some(ids) => ids.iter().enumerate().for_each(|(c, &h)| columns[h] = Some(c)),
        None => columns.iter_mut().enumerate().for_each(|(h, c)| *c = Some(h)),
    }
    let pool = training_subset(samples, split);
    if pool.is_empty() {
        return Err(Error::Dataset("no training images left after filtering".into()));
    }
    let provider = text_provider(cfg)?;
    let teachers = if !cfg.ablation.use_mimic {
        None
    } else if let Some(path) = &cfg.text.teacher_embeddings {
        Some(Teachers::Table(load_embedding_matrix(path)?))
    } else {
        Some(Teachers::Synthetic(&provider))
    };

    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let tc = &cfg.training;
    let side = cfg.model.image_size;
    let mut metrics = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..tc.epochs {
        let scale = cfg.optimizer.schedule(epoch, tc.epochs);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| if tc.augment { augment(pool[i], tc.scale_jitter, &mut rng) } else { pool[i].clone() })
                .collect();
            let mut images = Vec::with_capacity(batch.len() * side * side * 3);
            let mut targets = Vec::with_capacity(batch.len());
            let mut teacher_rows = Vec::new();
            for s in &batch {
                if (s.width, s.height) != (side, side) {
                    return Err(Error::Dataset(format!("image {} is not {side}x{side}", s.image_id)));
                }
                images.extend_from_slice(s.image.data());
                targets.push(targets_for(s, &columns)?);
                if let Some(t) = &teachers {
                    teacher_rows.push(t.get(s, ls)?.vector);
                }
            }
            let images = Tensor::from_vec(batch.len() * side * side, 3, images);
            let teacher_tensor = (!teacher_rows.is_empty()).then(|| Tensor::from_rows(&teacher_rows));

            let g = Graph::new();
            let p = model.params().bind(&g, true);
            let fwd = model.forward(&g, &p, &images, batch.len(), active.as_deref())?;
            // non-finite outputs surface first as matching costs
            let matches = match_layers(&g, &fwd, &targets, &cfg.loss).map_err(|e| match e {
                Error::NonFiniteCost { .. } => Error::Diverged { step },
                e => e,
            })?;
            let losses = compute_losses(
                &g,
                &fwd,
                &targets,
                &matches,
                &cfg.loss,
                teacher_tensor.as_ref().map(|t| (t, cfg.ablation.mimic_norm)),
            )?;
            if !losses.breakdown.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let mut grads = g.backward(losses.total);
            let grads: Vec<Option<Tensor>> = p.vars().iter().map(|&v| grads.take(v)).collect();
            let norm = opt.step(model.params_mut(), &grads, scale);
            if !norm.is_finite() {
                return Err(Error::Diverged { step });
            }
            if step % tc.log_every.max(1) == 0 {
                let m = StepMetrics::new(step, epoch, cfg.optimizer.lr * scale, &losses.breakdown, norm);
                observer.on_metrics(&m)?;
                metrics.push(m);
            }
            step += 1;
        }
        observer.on_epoch_end(epoch + 1, step, &model)?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// Document stored alongside checkpoint parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub config_hash: String,
    pub step: usize,
}

pub fn save_model(path: &Path, model: &Model, cfg: &RunConfig, step: usize) -> Result<()> {
    let meta = CheckpointMeta { config: cfg.clone(), config_hash: cfg.hash(), step };
    save_checkpoint(path, model.params(), &serde_json::to_string(&meta).expect("meta serializes"))
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path, ls: &LabelSpace) -> Result<(Model, CheckpointMeta)> {
    let (store, json) = load_checkpoint(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }
    let init = HeadInit::random(ls, meta.config.model.text_dim, 0);
    let mut model = Model::new(meta.config.model.clone(), ls, init, 0)?;
    model.params_mut().load_values(&store)?;
    Ok((model, meta))
}

struct FileObserver<'a> {
    cfg: &'a RunConfig,
    log: std::io::BufWriter<std::fs::File>,
    metrics_path: PathBuf,
}

impl TrainObserver for FileObserver<'_> {
    fn on_metrics(&mut self, m: &StepMetrics) -> Result<()> {
        log::info!("step {} epoch {} loss {:.4}", m.step, m.epoch, m.loss_total);
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.log, "{line}").map_err(|e| Error::io(&self.metrics_path, e))
    }

    fn on_epoch_end(&mut self, epoch: usize, step: usize, model: &Model) -> Result<()> {
        let every = self.cfg.training.checkpoint_every;
        if every > 0 && epoch % every == 0 && epoch < self.cfg.training.epochs {
            save_model(&self.cfg.out_dir.join(format!("checkpoint_epoch{epoch}.bin")), model, self.cfg, step)?;
        }
        Ok(())
    }
}

/// File-level training: reads the dataset named by the config, writes
/// `metrics.ndjson` and `checkpoint.bin` (plus `checkpoint_epoch*.bin`
/// when periodic checkpoints are enabled) to `out_dir`.
pub fn run_training(cfg: &RunConfig) -> Result<(PathBuf, TrainOutcome)> {
    let (ls, _) = LabelSpace::load(&cfg.data.label_space())?;
    let manifest_path = cfg.data.train_manifest();
    let manifest = Manifest::load(&manifest_path)?;
    manifest.validate(&ls)?;
    let samples = crate::data::load_samples(&manifest, &Manifest::root(&manifest_path))?;
    let split = cfg.split.path.as_ref().map(|p| SplitSpec::load(p)).transpose()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.ndjson");
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut files = FileObserver { cfg, log: std::io::BufWriter::new(file), metrics_path: metrics_path.clone() };
    let outcome = train(cfg, &ls, &samples, split.as_ref(), &mut files)?;
    files.log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt = cfg.out_dir.join("checkpoint.bin");
    let steps = outcome.metrics.last().map_or(0, |m| m.step + 1);
    save_model(&ckpt, &outcome.model, cfg, steps)?;
    Ok((ckpt, outcome))
}

/// Ids of seen triplets that actually occur in the filtered training pool.
pub fn trained_triplets(samples: &[SceneSample], split: Option<&SplitSpec>) -> BTreeSet<usize> {
    training_subset(samples, split).iter().flat_map(|s| s.annotations.iter().flat_map(|a| a.hoi_ids.clone())).collect()
}
