//! HICO-style mean average precision.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::CornerBox;
use crate::data::Manifest;
use crate::error::{write_json, Error, Result};
use crate::inference::Detection;
use crate::label_space::{rare_split, LabelSpace, SplitSpec};

/// Ground-truth pair for one HOI category.
#[derive(Clone, Debug, PartialEq)]
pub struct GtPair {
    pub human_box: CornerBox,
    pub object_box: CornerBox,
}

/// Index of the unused ground truth with the largest `min(IoU_h, IoU_o)`
/// among those where both IoUs exceed 0.5.
pub fn is_true_positive(det: &Detection, gts: &[GtPair], used: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        if used[i] {
            continue;
        }
        let (ih, io) = (det.human_box.iou(&g.human_box), det.object_box.iou(&g.object_box));
        if ih > 0.5 && io > 0.5 {
            let m = ih.min(io);
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Area under the precision envelope for a score-ordered TP/FP sequence.
/// `None` when there is no ground truth.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        rec.push(hits as f64 / n_gt as f64);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_rec = 0.0;
    for (r, p) in rec.iter().zip(&prec) {
        if *r > last_rec {
            ap += (r - last_rec) * p;
            last_rec = *r;
        }
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for categories without test ground truth.
    pub per_hoi_ap: Vec<Option<f64>>,
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub map_seen: Option<f64>,
    pub map_unseen: Option<f64>,
    /// Test ground-truth pairs per category.
    pub counts: Vec<u64>,
    pub rare: BTreeSet<usize>,
    #[serde(default)]
    pub unseen: BTreeSet<usize>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// One row per category: `hoi_id,verb,object,n_gt,ap,rare,unseen`.
    pub fn to_csv(&self, ls: &LabelSpace) -> String {
        let mut s = String::from("hoi_id,verb,object,n_gt,ap,rare,unseen\n");
        for t in ls.triplets() {
            let ap = self.per_hoi_ap[t.id].map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{ap},{},{}",
                t.id,
                ls.verbs()[t.verb_id].name,
                ls.objects()[t.object_id].name,
                self.counts[t.id],
                self.rare.contains(&t.id),
                self.unseen.contains(&t.id)
            );
        }
        s
    }
}

fn mean_over(aps: &[Option<f64>], set: impl IntoIterator<Item = usize>) -> Option<f64> {
    let v: Vec<f64> = set.into_iter().filter_map(|h| aps[h]).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates detections against a test manifest. Rare categories come from
/// `train_counts` (or the split's rare set when given).
pub fn evaluate(
    dets: &[Detection],
    gt: &Manifest,
    ls: &LabelSpace,
    train_counts: Option<&[u64]>,
    split: Option<&SplitSpec>,
) -> Result<EvalReport> {
    let n = ls.num_triplets();
    // (image, hoi) -> gt pairs
    let mut gts: HashMap<(u64, usize), Vec<GtPair>> = HashMap::new();
    let mut counts = vec![0u64; n];
    let mut images = BTreeSet::new();
    for im in &gt.images {
        images.insert(im.image_id);
        for a in &im.annotations {
            for &h in &a.hoi_ids {
                if h >= n {
                    return Err(Error::Dataset(format!("image {}: hoi_id {h} outside {n}", im.image_id)));
                }
                counts[h] += 1;
                gts.entry((im.image_id, h))
                    .or_default()
                    .push(GtPair { human_box: a.human_box, object_box: a.object_box });
            }
        }
    }
    let mut by_hoi: Vec<Vec<&Detection>> = vec![Vec::new(); n];
    for d in dets {
        if !images.contains(&d.image_id) {
            return Err(Error::Dataset(format!("detection for unknown image_id {}", d.image_id)));
        }
        if d.hoi_id >= n {
            return Err(Error::Dataset(format!("detection hoi_id {} outside {n}", d.hoi_id)));
        }
        if !d.human_box.is_valid() || !d.object_box.is_valid() || !d.score.is_finite() {
            return Err(Error::Dataset(format!("malformed detection on image {}", d.image_id)));
        }
        by_hoi[d.hoi_id].push(d);
    }
    let mut per_hoi_ap = vec![None; n];
    for (h, list) in by_hoi.iter_mut().enumerate() {
        // stable: ties keep file order
        list.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        let mut used: HashMap<u64, Vec<bool>> = HashMap::new();
        let tp: Vec<bool> = list
            .iter()
            .map(|d| {
                let Some(g) = gts.get(&(d.image_id, h)) else { return false };
                let u = used.entry(d.image_id).or_insert_with(|| vec![false; g.len()]);
                match is_true_positive(d, g, u) {
                    Some(i) => {
                        u[i] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_hoi_ap[h] = average_precision(&tp, counts[h] as usize);
    }
    let (rare, non_rare) = match (split, train_counts) {
        (Some(sp), _) if !sp.rare.is_empty() || !sp.non_rare.is_empty() => (sp.rare.clone(), sp.non_rare.clone()),
        (_, Some(c)) => rare_split(c),
        _ => (BTreeSet::new(), (0..n).collect()),
    };
    let unseen = split.map(|s| s.unseen.clone()).unwrap_or_default();
    Ok(EvalReport {
        map_full: mean_over(&per_hoi_ap, 0..n),
        map_rare: mean_over(&per_hoi_ap, rare.iter().copied()),
        map_nonrare: mean_over(&per_hoi_ap, non_rare.iter().copied()),
        map_seen: split.and_then(|s| mean_over(&per_hoi_ap, s.seen.iter().copied())),
        map_unseen: split.and_then(|s| mean_over(&per_hoi_ap, s.unseen.iter().copied())),
        per_hoi_ap,
        counts,
        rare,
        unseen,
        config_hash: None,
    })
}
