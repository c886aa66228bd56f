//! Score composition, top-K selection and triplet NMS on the last decoder
//! layer.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::CornerBox;
use crate::config::InferenceConfig;
use crate::data::{save_png, SceneSample};
use crate::error::{read_json, write_json, Error, Result};
use crate::label_space::{LabelSpace, SplitSpec};
use crate::matching::sigmoid;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    /// Pixel corners.
    pub human_box: CornerBox,
    pub object_box: CornerBox,
    pub object_id: usize,
    pub hoi_id: usize,
    pub score: f64,
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_json(path, &dets)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    read_json(path)
}

/// Softmax over the real object columns of `N_q x (N_o + 1)` logits; the
/// trailing no-object column is dropped before normalizing.
pub fn object_probabilities(logits: &Tensor) -> Tensor {
    let no = logits.cols() - 1;
    let mut out = Tensor::zeros(logits.rows(), no);
    for r in 0..logits.rows() {
        let row = &logits.row(r)[..no];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for (c, x) in row.iter().enumerate() {
            out.set(r, c, (x - m).exp() / z);
        }
    }
    out
}

/// `out[i][h] = s_a[i][h] + s_o[i][object_of(h)]^2`.
pub fn compose_scores(interaction: &Tensor, objects: &Tensor, ls: &LabelSpace) -> Result<Tensor> {
    if interaction.cols() != ls.num_triplets() || objects.cols() != ls.num_objects() || interaction.rows() != objects.rows()
    {
        return Err(Error::Shape(format!(
            "interaction {:?} and object {:?} scores do not fit {} triplets / {} objects",
            interaction.shape(),
            objects.shape(),
            ls.num_triplets(),
            ls.num_objects()
        )));
    }
    let mut out = Tensor::zeros(interaction.rows(), interaction.cols());
    for i in 0..interaction.rows() {
        let e = ls.expand_object_scores(objects.row(i))?;
        for (h, (o, (&a, &eh))) in out.row_mut(i).iter_mut().zip(interaction.row(i).iter().zip(&e)).enumerate() {
            debug_assert!(h < ls.num_triplets());
            *o = a + eh * eh;
        }
    }
    Ok(out)
}

/// Global top-K over `(query, hoi)` cells, ties broken by query then hoi id.
/// Boxes are normalized cxcywh rows, denormalized to `width x height`.
#[allow(clippy::too_many_arguments)]
pub fn select_topk(
    composed: &Tensor,
    human_boxes: &Tensor,
    object_boxes: &Tensor,
    ls: &LabelSpace,
    k: usize,
    width: f64,
    height: f64,
    image_id: u64,
) -> Vec<Detection> {
    let mut cells: Vec<(usize, usize)> =
        (0..composed.rows()).flat_map(|q| (0..composed.cols()).map(move |h| (q, h))).collect();
    cells.sort_by(|a, b| {
        composed.get(b.0, b.1).partial_cmp(&composed.get(a.0, a.1)).unwrap_or(Ordering::Equal).then(a.cmp(b))
    });
    cells.truncate(k);
    let corner = |t: &Tensor, q: usize| {
        let r = t.row(q);
        CornerBox::from_normalized_cxcywh([r[0], r[1], r[2], r[3]], width, height)
    };
    cells
        .into_iter()
        .map(|(q, h)| Detection {
            image_id,
            human_box: corner(human_boxes, q),
            object_box: corner(object_boxes, q),
            object_id: ls.object_of(h),
            hoi_id: h,
            score: composed.get(q, h),
        })
        .collect()
}

/// Greedy per-HOI suppression: a detection is dropped when both its human
/// and object IoU with a kept, higher-scoring detection of the same HOI
/// exceed `threshold`. Output keeps descending score order.
pub fn triplet_nms(dets: &[Detection], threshold: f64) -> Result<Vec<Detection>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("NMS threshold {threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<&Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.image_id == d.image_id
                && k.hoi_id == d.hoi_id
                && k.human_box.iou(&d.human_box) > threshold
                && k.object_box.iou(&d.object_box) > threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept.into_iter().cloned().collect())
}

/// Runs the model on each sample and post-processes the last layer.
/// Inference always scores every classifier row.
pub fn detect(model: &Model, samples: &[SceneSample], ls: &LabelSpace, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let side = model.config().image_size;
    let nq = model.config().num_queries;
    let mut out = Vec::new();
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * side * side * 3);
        for s in chunk {
            if (s.width, s.height) != (side, side) {
                return Err(Error::Dataset(format!("image {} is {}x{}, model expects {side}", s.image_id, s.width, s.height)));
            }
            data.extend_from_slice(s.image.data());
        }
        let images = Tensor::from_vec(chunk.len() * side * side, 3, data);
        let (pred, _) = model.predict(&images, chunk.len())?;
        let last = pred.layers.last().expect("at least one decoder layer");
        for (b, s) in chunk.iter().enumerate() {
            let inter = last.interaction_logits.slice_rows(b * nq, nq).map(sigmoid);
            let objs = object_probabilities(&last.object_logits.slice_rows(b * nq, nq));
            let composed = compose_scores(&inter, &objs, ls)?;
            let top = select_topk(
                &composed,
                &last.human_boxes.slice_rows(b * nq, nq),
                &last.object_boxes.slice_rows(b * nq, nq),
                ls,
                cfg.top_k,
                s.width as f64,
                s.height as f64,
                s.image_id,
            );
            out.extend(triplet_nms(&top, cfg.nms_threshold)?);
        }
    }
    Ok(out)
}

/// Overwrites the unseen interaction rows with seeded random unit vectors.
pub fn randomize_unseen_rows(model: &mut Model, split: &SplitSpec, seed: u64) -> Result<()> {
    let id = model.interaction_rows_id().ok_or_else(|| Error::Config("verb mode has no classifier rows".into()))?;
    let mut rows = model.params().value(id).clone();
    let random = Tensor::randn(rows.rows(), rows.cols(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    for &h in &split.unseen {
        let n = random.row(h).iter().map(|x| x * x).sum::<f64>().sqrt();
        for (dst, src) in rows.row_mut(h).iter_mut().zip(random.row(h)) {
            *dst = src / n;
        }
    }
    model.set_interaction_rows(rows)
}

/// Draws the top `n` detections of a sample as box outlines (human in
/// black, object in white) and writes a PNG.
pub fn render_detections(path: &Path, sample: &SceneSample, dets: &[Detection], n: usize) -> Result<()> {
    let mut img = sample.image.clone();
    let (w, h) = (sample.width, sample.height);
    let mut outline = |b: &CornerBox, color: [f64; 3]| {
        let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
        let (x1, y1, x2, y2) = (clamp(b.x1, w), clamp(b.y1, h), clamp(b.x2 - 1.0, w), clamp(b.y2 - 1.0, h));
        for x in x1..=x2 {
            img.row_mut(y1 * w + x).copy_from_slice(&color);
            img.row_mut(y2 * w + x).copy_from_slice(&color);
        }
        for y in y1..=y2 {
            img.row_mut(y * w + x1).copy_from_slice(&color);
            img.row_mut(y * w + x2).copy_from_slice(&color);
        }
    };
    for d in dets.iter().filter(|d| d.image_id == sample.image_id).take(n) {
        outline(&d.human_box, [0.0; 3]);
        outline(&d.object_box, [1.0; 3]);
    }
    save_png(path, &img, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_label_space;
    use proptest::prelude::*;
    use rand::Rng;

    fn det(hoi: usize, score: f64, hb: [f64; 4], ob: [f64; 4]) -> Detection {
        Detection {
            image_id: 0,
            human_box: CornerBox::new(hb[0], hb[1], hb[2], hb[3]),
            object_box: CornerBox::new(ob[0], ob[1], ob[2], ob[3]),
            object_id: 0,
            hoi_id: hoi,
            score,
        }
    }

    #[test]
    fn composition_examples() {
        let ls = toy_label_space();
        let mut sa = Tensor::zeros(1, 12);
        sa.set(0, 0, 0.2);
        let so = Tensor::from_rows(&[vec![0.5, 0.5, 0.0, 0.0]]);
        let c = compose_scores(&sa, &so, &ls).unwrap();
        assert_eq!(c.get(0, 0), 0.2 + 0.25);
        let one = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]);
        let c = compose_scores(&sa, &one, &ls).unwrap();
        for h in 0..12 {
            let expect = sa.get(0, h) + if ls.object_of(h) == 1 { 1.0 } else { 0.0 };
            assert_eq!(c.get(0, h), expect);
        }
    }

    #[test]
    fn composition_matches_reference() {
        let ls = toy_label_space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sa = Tensor::uniform(6, 12, 1.0, &mut rng).map(f64::abs);
        let so = Tensor::uniform(6, 4, 1.0, &mut rng).map(f64::abs);
        let c = compose_scores(&sa, &so, &ls).unwrap();
        for i in 0..6 {
            for t in ls.triplets() {
                let e = so.get(i, t.object_id);
                assert_eq!(c.get(i, t.id), sa.get(i, t.id) + e * e);
            }
        }
        assert!(compose_scores(&sa, &Tensor::zeros(6, 3), &ls).is_err());
    }

    #[test]
    fn topk_hand_grid_and_ties() {
        let objects = (0..1)
            .map(|i| crate::label_space::ObjectRecord { id: i, name: "o".into(), article: crate::label_space::Article::A })
            .collect();
        let verbs = (0..3)
            .map(|i| crate::label_space::VerbRecord { id: i, name: format!("v{i}"), gerund: None, is_no_interaction: false })
            .collect();
        let triplets = (0..3).map(|i| crate::label_space::TripletRecord { id: i, verb_id: i, object_id: 0 }).collect();
        let ls = LabelSpace::new(objects, verbs, triplets).unwrap();
        let scores = Tensor::from_rows(&[vec![0.1, 0.9, 0.3], vec![0.8, 0.2, 0.7]]);
        let boxes = Tensor::from_rows(&[vec![0.5, 0.5, 0.2, 0.2], vec![0.3, 0.3, 0.2, 0.2]]);
        let top = select_topk(&scores, &boxes, &boxes, &ls, 2, 10.0, 10.0, 3);
        let cells: Vec<_> = top.iter().map(|d| (d.hoi_id, d.score)).collect();
        assert_eq!(cells, vec![(1, 0.9), (0, 0.8)]);
        assert!((top[0].human_box.x1 - 4.0).abs() < 1e-12);
        let all = select_topk(&scores, &boxes, &boxes, &ls, 100, 10.0, 10.0, 3);
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        let flat = Tensor::full(2, 3, 0.5);
        let tied: Vec<_> = select_topk(&flat, &boxes, &boxes, &ls, 4, 10.0, 10.0, 0).iter().map(|d| d.hoi_id).collect();
        assert_eq!(tied, vec![0, 1, 2, 0]);
    }

    #[test]
    fn nms_examples() {
        let a = det(0, 0.9, [0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]);
        assert_eq!(triplet_nms(&[a.clone(), a.clone()], 0.7).unwrap().len(), 1);
        let b = Detection { hoi_id: 1, ..a.clone() };
        assert_eq!(triplet_nms(&[a.clone(), b], 0.7).unwrap().len(), 2);
        // human IoU 0.9, object IoU 0.2
        let c = det(0, 0.8, [0.0, 0.0, 10.0, 9.0], [20.0, 20.0, 30.0, 30.0]);
        let c = Detection { object_box: CornerBox::new(20.0, 20.0, 30.0, 22.0), ..c };
        assert!((a.human_box.iou(&c.human_box) - 0.9).abs() < 1e-12);
        assert!((a.object_box.iou(&c.object_box) - 0.2).abs() < 1e-12);
        assert_eq!(triplet_nms(&[a.clone(), c], 0.7).unwrap().len(), 2);
        assert!(triplet_nms(&[a.clone()], 0.0).is_err());
        assert!(triplet_nms(&[a], 1.5).is_err());
    }

    fn random_dets(seed: u64, n: usize) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut b = || {
                    let x = rng.gen_range(0.0..10.0);
                    let y = rng.gen_range(0.0..10.0);
                    [x, y, x + rng.gen_range(3.0..6.0), y + rng.gen_range(3.0..6.0)]
                };
                let (hb, ob) = (b(), b());
                det(rng.gen_range(0..3), rng.gen_range(0.0..1.0), hb, ob)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn nms_is_ordered_idempotent_subset(seed in 0u64..500, thr in 0.05f64..1.0) {
            let d = random_dets(seed, 30);
            let once = triplet_nms(&d, thr).unwrap();
            prop_assert!(once.iter().all(|x| d.contains(x)));
            prop_assert!(once.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert_eq!(triplet_nms(&once, thr).unwrap(), once);
        }

        #[test]
        fn composition_is_monotone(seed in 0u64..500, q in 0usize..3, h in 0usize..12, bump in 0.0f64..0.5) {
            let ls = toy_label_space();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sa = Tensor::uniform(3, 12, 0.5, &mut rng).map(|x| x + 0.5);
            let so = Tensor::uniform(3, 4, 0.5, &mut rng).map(|x| x + 0.5);
            let base = compose_scores(&sa, &so, &ls).unwrap();
            let mut sa2 = sa.clone();
            sa2.set(q, h, sa.get(q, h) + bump);
            let mut so2 = so.clone();
            let o = ls.object_of(h);
            so2.set(q, o, so.get(q, o) + bump);
            for (a, b) in [(&sa2, &so), (&sa, &so2)] {
                let c = compose_scores(a, b, &ls).unwrap();
                prop_assert!(c.data().iter().zip(base.data()).all(|(x, y)| x >= y));
            }
        }
    }

    #[test]
    fn object_probabilities_drop_no_object() {
        let p = object_probabilities(&Tensor::from_rows(&[vec![0.0, 0.0, 50.0]]));
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }
}
