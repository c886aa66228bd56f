//! Set-prediction losses with per-layer supervision and the total objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::box_losses;
use crate::error::{Error, Result};
use crate::matching::{cost_matrix, hungarian_match, MatchResult};
use crate::model::Forward;
use crate::tensor::Tensor;
use crate::vlkt::{mimic_loss_graph, MimicNorm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_u: f64,
    pub lambda_c_o: f64,
    pub lambda_c_a: f64,
    pub lambda_mimic: f64,
    /// Cross-entropy weight of queries assigned to no-object.
    pub no_object_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_b: 2.5,
            lambda_u: 1.0,
            lambda_c_o: 1.0,
            lambda_c_a: 1.0,
            lambda_mimic: 20.0,
            no_object_weight: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_b,
            self.lambda_u,
            self.lambda_c_o,
            self.lambda_c_a,
            self.lambda_mimic,
            self.no_object_weight,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Ground-truth pair in network coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    /// Normalized cx, cy, w, h.
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub object_id: usize,
    /// Interaction columns (indices into the active classifier rows).
    pub hoi_ids: Vec<usize>,
}

/// Unweighted loss terms of one decoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub box_human: f64,
    pub box_object: f64,
    pub giou_human: f64,
    pub giou_object: f64,
    pub class_object: f64,
    pub class_interaction: f64,
}

impl LayerLoss {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_b * (self.box_human + self.box_object)
            + w.lambda_u * (self.giou_human + self.giou_object)
            + w.lambda_c_o * self.class_object
            + w.lambda_c_a * self.class_interaction
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    /// Unweighted mimic term, 0 when disabled.
    pub mimic: f64,
    pub total: f64,
}

pub struct Losses {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Matches every decoder layer independently on detached outputs.
/// Returns `[layer][image]`.
pub fn match_layers(g: &Graph, fwd: &Forward, targets: &[Vec<Target>], w: &LossWeights) -> Result<Vec<Vec<MatchResult>>> {
    if targets.len() != fwd.batch {
        return Err(Error::Shape(format!("{} target lists for batch {}", targets.len(), fwd.batch)));
    }
    let nq = g.shape(fwd.heads[0].human_boxes).0 / fwd.batch;
    fwd.heads
        .iter()
        .map(|h| {
            let (hb, ob, ol, il) = (
                g.value(h.human_boxes),
                g.value(h.object_boxes),
                g.value(h.object_logits),
                g.value(h.interaction_logits),
            );
            targets
                .iter()
                .enumerate()
                .map(|(b, t)| {
                    let c = cost_matrix(
                        &hb.slice_rows(b * nq, nq),
                        &ob.slice_rows(b * nq, nq),
                        &ol.slice_rows(b * nq, nq),
                        &il.slice_rows(b * nq, nq),
                        t,
                        w,
                    );
                    hungarian_match(&c)
                })
                .collect()
        })
        .collect()
}

/// Total objective: per-layer set losses under the given matchings plus the
/// weighted mimic term on the last layer's projected interaction features.
///
/// `teachers` is `B x c_t` when the mimic term is enabled.
pub fn compute_losses(
    g: &Graph,
    fwd: &Forward,
    targets: &[Vec<Target>],
    matches: &[Vec<MatchResult>],
    w: &LossWeights,
    teachers: Option<(&Tensor, MimicNorm)>,
) -> Result<Losses> {
    let batch = fwd.batch;
    if matches.len() != fwd.heads.len() || targets.len() != batch {
        return Err(Error::Shape("matchings or targets do not fit the forward pass".into()));
    }
    let nq = g.shape(fwd.heads[0].human_boxes).0 / batch;
    let num_gt = targets.iter().map(Vec::len).sum::<usize>();
    let norm = num_gt.max(1) as f64;

    let mut total: Option<Var> = None;
    let mut add = |v: Var, scale: f64| {
        if scale != 0.0 {
            let s = g.scale(v, scale);
            total = Some(total.map_or(s, |t| g.add(t, s)));
        }
    };
    let mut layers = Vec::with_capacity(fwd.heads.len());
    for (heads, layer_matches) in fwd.heads.iter().zip(matches) {
        let (num_obj_cls, ncols) = (g.shape(heads.object_logits).1, g.shape(heads.interaction_logits).1);
        let no_object = num_obj_cls - 1;
        let mut rows = Vec::new();
        let mut th = Vec::new();
        let mut to = Vec::new();
        let mut cls = vec![no_object; batch * nq];
        let mut cls_w = vec![w.no_object_weight; batch * nq];
        let mut multi_hot = Tensor::zeros(batch * nq, ncols);
        for (b, m) in layer_matches.iter().enumerate() {
            for &(q, gi) in &m.pairs {
                let t = &targets[b][gi];
                let r = b * nq + q;
                rows.push(r);
                th.push(t.human_box.to_vec());
                to.push(t.object_box.to_vec());
                if t.object_id >= no_object {
                    return Err(Error::Shape(format!("object id {} outside {no_object} classes", t.object_id)));
                }
                cls[r] = t.object_id;
                cls_w[r] = 1.0;
                for &h in &t.hoi_ids {
                    if h >= ncols {
                        return Err(Error::Shape(format!("interaction target {h} outside {ncols} columns")));
                    }
                    multi_hot.set(r, h, 1.0);
                }
            }
        }
        let mut ll = LayerLoss::default();
        if !rows.is_empty() {
            let (l1h, gh) = box_losses(g, g.gather_rows(heads.human_boxes, &rows), &Tensor::from_rows(&th));
            let (l1o, go) = box_losses(g, g.gather_rows(heads.object_boxes, &rows), &Tensor::from_rows(&to));
            for (v, slot, lambda) in [
                (l1h, &mut ll.box_human, w.lambda_b),
                (l1o, &mut ll.box_object, w.lambda_b),
                (gh, &mut ll.giou_human, w.lambda_u),
                (go, &mut ll.giou_object, w.lambda_u),
            ] {
                *slot = g.scalar_value(v) / norm;
                add(v, lambda / norm);
            }
        }
        let wsum: f64 = cls_w.iter().sum();
        let ce = g.softmax_cross_entropy(heads.object_logits, &cls, &cls_w, wsum);
        ll.class_object = g.scalar_value(ce);
        add(ce, w.lambda_c_o);
        let focal = g.sigmoid_focal(heads.interaction_logits, &multi_hot, w.focal_alpha, w.focal_gamma, norm);
        ll.class_interaction = g.scalar_value(focal);
        add(focal, w.lambda_c_a);
        layers.push(ll);
    }

    let mut mimic = 0.0;
    if let Some((t, mnorm)) = teachers {
        if t.rows() != batch {
            return Err(Error::Shape(format!("{} teacher rows for batch {batch}", t.rows())));
        }
        if t.cols() != g.shape(fwd.interaction_embedding).1 {
            return Err(Error::Shape(format!(
                "teacher dim {} != interaction embedding dim {}",
                t.cols(),
                g.shape(fwd.interaction_embedding).1
            )));
        }
        let m = mimic_loss_graph(g, fwd.interaction_embedding, t, nq, mnorm);
        mimic = g.scalar_value(m);
        add(m, w.lambda_mimic);
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    let breakdown = LossBreakdown { layers, mimic, total: g.scalar_value(total) };
    Ok(Losses { total, breakdown })
}
