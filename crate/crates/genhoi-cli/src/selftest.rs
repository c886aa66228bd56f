//! Oracle suites run by `genhoi selftest`. Each suite checks the library
//! against a brute-force or closed-form reference written here.

use std::collections::HashMap;
use std::time::Instant;

use genhoi::boxes::CornerBox;
use genhoi::config::RunConfig;
use genhoi::data::{generate_scenes, toy_label_space, Annotation, DatasetSpec, ImageRecord, Manifest};
use genhoi::evaluation::evaluate;
use genhoi::inference::{compose_scores, Detection};
use genhoi::label_space::{
    make_zero_shot_split, rare_split, Article, LabelSpace, LabelSpaceFile, ObjectRecord, SplitRequest, TripletRecord,
    VerbRecord,
};
use genhoi::loss::{compute_losses, match_layers, LossWeights, Target};
use genhoi::matching::{hungarian_match, matched_cost};
use genhoi::model::{random_images, HeadInit, Model, ModelConfig};
use genhoi::train::{head_init, train, Quiet};
use genhoi::vlkt::{cosine_scores, mimic_loss, Classifier, MimicNorm, TeacherEmbedding, TeacherSource};
use genhoi::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HICO_FIXTURE: &str = include_str!("../../../fixtures/hico_label_space.json");

pub struct SuiteOutcome {
    pub name: &'static str,
    pub result: Result<String, String>,
    pub seconds: f64,
}

type Suite = fn(u64) -> Result<String, String>;

pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    let suites: [(&'static str, Suite); 5] = [
        ("hungarian", hungarian),
        ("gradient", gradient),
        ("map", map),
        ("splits", splits),
        ("invariants", invariants),
    ];
    suites
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let result = f(seed);
            SuiteOutcome { name, result, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: genhoi::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Minimum over every injective map from columns to rows.
fn brute_min(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == cost.cols() {
            *best = best.min(acc);
            return;
        }
        for r in 0..cost.rows() {
            if !used[r] {
                used[r] = true;
                go(cost, col + 1, used, acc + cost.get(r, col), best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
    best
}

fn hungarian(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..200 {
        let nq = rng.gen_range(1..=7);
        let ng = rng.gen_range(0..=nq);
        // Integer costs keep every summation order exact.
        let cost = Tensor::from_vec(nq, ng, (0..nq * ng).map(|_| f64::from(rng.gen_range(-50..50))).collect());
        let m = lib(hungarian_match(&cost))?;
        let (got, want) = (matched_cost(&cost, &m), if ng == 0 { 0.0 } else { brute_min(&cost) });
        ensure(got == want, || format!("case {case} ({nq}x{ng}): matched {got}, optimum {want}"))?;
    }
    Ok("200 matrices".into())
}

fn gradient(seed: u64) -> Result<String, String> {
    let objects = (0..2).map(|i| ObjectRecord { id: i, name: format!("o{i}"), article: Article::A }).collect();
    let verbs = (0..2)
        .map(|i| VerbRecord { id: i, name: format!("v{i}"), gerund: Some(format!("g{i}")), is_no_interaction: false })
        .collect();
    let triplets = (0..3).map(|i| TripletRecord { id: i, verb_id: i % 2, object_id: i / 2 }).collect();
    let ls = lib(LabelSpace::new(objects, verbs, triplets))?;
    let cfg = ModelConfig {
        image_size: 16,
        backbone_channels: vec![8, 16],
        backbone_strides: vec![2, 2],
        hidden_dim: 16,
        heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        decoder_layers: 2,
        num_queries: 4,
        text_dim: 16,
        ..ModelConfig::default()
    };
    let mut m = lib(Model::new(cfg, &ls, HeadInit::random(&ls, 16, 2), seed))?;
    // Offsets move biases and norm gains off their symmetric init values.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
    let ids: Vec<_> = m.params().iter().map(|(id, _)| id).collect();
    for &id in &ids {
        for v in m.params_mut().value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let imgs = random_images(2, 16, &mut rng);
    let targets = vec![
        vec![Target { human_box: [0.3, 0.4, 0.2, 0.5], object_box: [0.6, 0.6, 0.3, 0.2], object_id: 1, hoi_ids: vec![2] }],
        vec![Target { human_box: [0.5, 0.4, 0.3, 0.5], object_box: [0.3, 0.6, 0.2, 0.2], object_id: 0, hoi_ids: vec![0, 1] }],
    ];
    let teachers = Tensor::from_rows(&[vec![0.25; 16], vec![-0.25; 16]]);
    let w = LossWeights::default();
    let g = Graph::new();
    let p = m.params().bind(&g, true);
    let f = lib(m.forward(&g, &p, &imgs, 2, None))?;
    // The assignment is held fixed; it is piecewise constant in the parameters.
    let matches = lib(match_layers(&g, &f, &targets, &w))?;
    let l = lib(compute_losses(&g, &f, &targets, &matches, &w, Some((&teachers, MimicNorm::L1))))?;
    let grads = g.backward(l.total);
    let loss_at = |m: &Model| -> Result<f64, String> {
        let g = Graph::new();
        let p = m.params().bind(&g, false);
        let f = lib(m.forward(&g, &p, &imgs, 2, None))?;
        let l = lib(compute_losses(&g, &f, &targets, &matches, &w, Some((&teachers, MimicNorm::L1))))?;
        Ok(g.scalar_value(l.total))
    };
    let eps = 1e-5;
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for &id in &ids {
        let analytic = grads.get(p.var(id)).cloned().unwrap_or_else(|| Tensor::zeros(1, 0));
        for k in 0..m.params().value(id).len() {
            let orig = m.params().value(id).data()[k];
            m.params_mut().value_mut(id).data_mut()[k] = orig + eps;
            let up = loss_at(&m)?;
            m.params_mut().value_mut(id).data_mut()[k] = orig - eps;
            let down = loss_at(&m)?;
            m.params_mut().value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data().get(k).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}]", m.params().param(id).name));
            }
            checked += 1;
        }
    }
    ensure(worst.0 < 1e-4, || format!("max relative error {:.3e} at {}", worst.0, worst.1))?;
    Ok(format!("{checked} parameters, max relative error {:.2e}", worst.0))
}

fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

/// Reference AP: greedy best-overlap matching in score order, then the sum
/// over true positives of the best precision at any later rank.
fn reference_ap(dets: &[&Detection], gts: &HashMap<u64, Vec<(CornerBox, CornerBox)>>, n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken: HashMap<u64, Vec<bool>> = HashMap::new();
    let mut tp = Vec::new();
    for d in order {
        let list = gts.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let used = taken.entry(d.image_id).or_insert_with(|| vec![false; list.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (i, (h, o)) in list.iter().enumerate() {
            let (a, b) = (iou(&d.human_box, h), iou(&d.object_box, o));
            if !used[i] && a > 0.5 && b > 0.5 && best.is_none_or(|(_, m)| a.min(b) > m) {
                best = Some((i, a.min(b)));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
        }
        tp.push(best.is_some());
    }
    let prec: Vec<f64> = tp
        .iter()
        .scan(0usize, |hits, &t| {
            *hits += usize::from(t);
            Some(*hits)
        })
        .enumerate()
        .map(|(i, h)| h as f64 / (i + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            ap += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    Some(ap / n_gt as f64)
}

fn jitter(b: &CornerBox, s: f64, rng: &mut ChaCha8Rng) -> CornerBox {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let mut d = || rng.gen_range(-s..s);
    let x1 = (b.x1 + d() * w).clamp(0.0, 62.0);
    let y1 = (b.y1 + d() * h).clamp(0.0, 62.0);
    CornerBox::new(x1, y1, (b.x2 + d() * w).clamp(x1 + 1.0, 64.0), (b.y2 + d() * h).clamp(y1 + 1.0, 64.0))
}

fn random_box(rng: &mut ChaCha8Rng) -> CornerBox {
    let x1 = rng.gen_range(0.0..40.0);
    let y1 = rng.gen_range(0.0..40.0);
    CornerBox::new(x1, y1, x1 + rng.gen_range(6.0..24.0), y1 + rng.gen_range(6.0..24.0))
}

fn map(seed: u64) -> Result<String, String> {
    let ls = toy_label_space();
    let n = ls.num_triplets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..20u64 {
        let mut annotations = Vec::new();
        for _ in 0..rng.gen_range(0..4) {
            let h = rng.gen_range(0..n);
            let object_id = ls.object_of(h);
            let mut hoi_ids: Vec<usize> = (0..n).filter(|&k| ls.object_of(k) == object_id && rng.gen_bool(0.3)).collect();
            if !hoi_ids.contains(&h) {
                hoi_ids.push(h);
                hoi_ids.sort_unstable();
            }
            annotations.push(Annotation { human_box: random_box(&mut rng), object_box: random_box(&mut rng), object_id, hoi_ids });
        }
        for a in &annotations {
            for &h in &a.hoi_ids {
                for _ in 0..rng.gen_range(0..3) {
                    let s = if rng.gen_bool(0.5) { 0.1 } else { 0.5 };
                    dets.push(Detection {
                        image_id,
                        human_box: jitter(&a.human_box, s, &mut rng),
                        object_box: jitter(&a.object_box, s, &mut rng),
                        object_id: a.object_id,
                        hoi_id: h,
                        score: rng.gen(),
                    });
                }
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let h = rng.gen_range(0..n);
            dets.push(Detection {
                image_id,
                human_box: random_box(&mut rng),
                object_box: random_box(&mut rng),
                object_id: ls.object_of(h),
                hoi_id: h,
                score: rng.gen(),
            });
        }
        images.push(ImageRecord { image_id, file: String::new(), width: 64, height: 64, annotations });
    }
    dets.shuffle(&mut rng);
    let manifest = Manifest { label_space_path: String::new(), images };
    let report = lib(evaluate(&dets, &manifest, &ls, None, None))?;
    let mut worst: f64 = 0.0;
    for h in 0..n {
        let mut gts: HashMap<u64, Vec<(CornerBox, CornerBox)>> = HashMap::new();
        let mut n_gt = 0;
        for im in &manifest.images {
            for a in im.annotations.iter().filter(|a| a.hoi_ids.contains(&h)) {
                gts.entry(im.image_id).or_default().push((a.human_box, a.object_box));
                n_gt += 1;
            }
        }
        let mine: Vec<&Detection> = dets.iter().filter(|d| d.hoi_id == h).collect();
        match (reference_ap(&mine, &gts, n_gt), report.per_hoi_ap[h]) {
            (None, None) => {}
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (a, b) => return Err(format!("hoi {h}: reference {a:?}, evaluator {b:?}")),
        }
    }
    ensure(worst <= 1e-9, || format!("max AP difference {worst:.3e}"))?;
    Ok(format!("20 scenes, {} detections, max AP difference {worst:.1e}", dets.len()))
}

fn splits(_seed: u64) -> Result<String, String> {
    let file: LabelSpaceFile = serde_json::from_str(HICO_FIXTURE).map_err(|e| e.to_string())?;
    let ls = lib(LabelSpace::new(file.objects.clone(), file.verbs.clone(), file.triplets.clone()))?;
    let counts = file.train_counts.clone().ok_or("fixture lacks train_counts")?;
    let check = |req: SplitRequest, unseen: usize| -> Result<(), String> {
        let s = lib(make_zero_shot_split(&ls, &req, &counts))?;
        ensure((s.unseen.len(), s.seen.len()) == (unseen, 600 - unseen), || {
            format!("{req:?}: {} unseen / {} seen", s.unseen.len(), s.seen.len())
        })
    };
    check(SplitRequest::RareFirst { n_unseen: 120 }, 120)?;
    check(SplitRequest::NonRareFirst { n_unseen: 120 }, 120)?;
    check(SplitRequest::UnseenObjects(file.uo_objects.clone().unwrap_or_default()), 100)?;
    check(SplitRequest::UnseenVerbs(file.uv_verbs.clone().unwrap_or_default()), 84)?;
    let rare = rare_split(&counts).0.len();
    ensure(rare == 138, || format!("{rare} rare categories"))?;
    Ok("RF-UC/NF-UC 120/480, UO 100/500, UV 84/516, 138 rare".into())
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone_channels: vec![8, 16],
        backbone_strides: vec![2, 2],
        hidden_dim: 16,
        heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        decoder_layers: 2,
        num_queries: 4,
        text_dim: 16,
        ..ModelConfig::default()
    }
}

fn invariants(seed: u64) -> Result<String, String> {
    let ls = toy_label_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let nq = cfg.num_queries;
    let model = lib(Model::new(cfg.clone(), &ls, HeadInit::random(&ls, 16, seed), seed))?;
    let imgs = random_images(2, 32, &mut rng);
    let (pred, feats) = lib(model.predict(&imgs, 2))?;

    // Interaction queries are exactly the mean of the paired instance features.
    for f in &feats {
        for i in 0..f.human.len() {
            let want = (f.human.data()[i] + f.object.data()[i]) * 0.5;
            ensure(f.interaction_query.data()[i] == want, || "interaction query differs from instance mean".into())?;
        }
    }

    // Permuting human, object and position queries together permutes every output row.
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..nq).collect();
        p.shuffle(&mut rng);
        p
    };
    let mut permuted = model.clone();
    for name in ["queries.human", "queries.object", "queries.position"] {
        let id = permuted.params().id(name).ok_or(format!("no parameter {name}"))?;
        let v = permuted.params().value(id).clone();
        let out = permuted.params_mut().value_mut(id);
        for (i, &src) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(v.row(src));
        }
    }
    let (ppred, _) = lib(permuted.predict(&imgs, 2))?;
    let mut dev: f64 = 0.0;
    for (a, b) in pred.layers.iter().zip(&ppred.layers) {
        for (x, y) in [
            (&a.human_boxes, &b.human_boxes),
            (&a.object_boxes, &b.object_boxes),
            (&a.object_logits, &b.object_logits),
            (&a.interaction_logits, &b.interaction_logits),
        ] {
            for img in 0..2 {
                for (i, &src) in perm.iter().enumerate() {
                    for (u, v) in x.row(img * nq + src).iter().zip(y.row(img * nq + i)) {
                        dev = dev.max((u - v).abs());
                    }
                }
            }
        }
    }
    ensure(dev <= 1e-5, || format!("query permutation changed outputs by {dev:.3e}"))?;

    // Composition and expansion against direct formulas.
    let sa = Tensor::uniform(5, ls.num_triplets(), 1.0, &mut rng).map(f64::abs);
    let so = Tensor::uniform(5, ls.num_objects(), 1.0, &mut rng).map(f64::abs);
    let c = lib(compose_scores(&sa, &so, &ls))?;
    for i in 0..5 {
        let e = lib(ls.expand_object_scores(so.row(i)))?;
        for h in 0..ls.num_triplets() {
            let o = ls.triplets()[h].object_id;
            ensure(e[h] == so.get(i, o), || format!("expansion of hoi {h}"))?;
            ensure(c.get(i, h) == sa.get(i, h) + so.get(i, o) * so.get(i, o), || format!("composition of hoi {h}"))?;
        }
    }

    // Frozen text rows survive training bit for bit.
    let mut run = RunConfig::toy();
    run.seed = seed;
    run.model = cfg;
    run.data.spec = DatasetSpec { image_size: 32, ..DatasetSpec::default() };
    run.ablation.freeze_text_classifiers = true;
    run.training.epochs = 1;
    run.training.batch_size = 4;
    let before = lib(head_init(&run, &ls, false))?;
    let samples = lib(generate_scenes(&ls, &run.data.spec, 8, 0.0, 0, 0))?;
    let out = lib(train(&run, &ls, &samples, None, &mut Quiet))?;
    let rows = out.model.interaction_rows_id().ok_or("no triplet rows")?;
    ensure(out.model.params().value(rows).data() == before.interaction_rows.data(), || "frozen interaction rows moved".into())?;
    ensure(out.model.params().value(out.model.object_rows_id()).data() == before.object_rows.data(), || {
        "frozen object rows moved".into()
    })?;

    // Mimic loss vanishes when the pooled features equal the teacher.
    let t = TeacherEmbedding::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), TeacherSource::Synthetic);
    let feats = Tensor::from_rows(&[t.vector.clone(), t.vector.clone()]);
    for norm in [MimicNorm::L1, MimicNorm::L2] {
        let l = lib(mimic_loss(&t, &feats, norm))?;
        ensure(l == 0.0, || format!("{norm:?} mimic loss {l} at the teacher"))?;
    }

    // Cosine scores ignore the feature scale.
    let cls = Classifier::random(7, 16, 100.0, false, seed);
    let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = lib(cosine_scores(&v, &cls))?;
    for s in [1e-3, 0.5, 7.0, 1e3] {
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        let got = lib(cosine_scores(&scaled, &cls))?;
        let d = base.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(d <= 1e-6, || format!("scale {s} moved cosine scores by {d:.3e}"))?;
    }
    Ok(format!("7 checks, permutation deviation {dev:.1e}"))
}
