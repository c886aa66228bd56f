//! Bipartite matching between decoder queries and ground-truth pairs.

use crate::boxes::CornerBox;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, Target};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-8;

/// Query-to-ground-truth assignment for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), returning the column per row.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let at = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn total(cost: &[f64], cols: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

/// Optimal assignment of ground truths (columns of the `N_q x G` cost
/// matrix) to queries.
///
/// Among optimal assignments the one whose query list (in ground-truth
/// order) is lexicographically smallest is returned; costs within a relative
/// `1e-12` of the optimum count as optimal.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let (nq, ng) = cost.shape();
    for r in 0..nq {
        for c in 0..ng {
            if !cost.get(r, c).is_finite() {
                return Err(Error::NonFiniteCost { row: r, col: c });
            }
        }
    }
    if ng > nq {
        return Err(Error::InvalidArgument(format!("{ng} ground truths but only {nq} queries")));
    }
    if ng == 0 {
        return Ok(MatchResult { pairs: vec![], unmatched_queries: (0..nq).collect() });
    }
    // rows = ground truths, cols = queries
    let t = cost.transpose();
    let best = solve(t.data(), ng, nq);
    let optimum = total(t.data(), nq, &best);
    let tol = 1e-12 * (1.0 + optimum.abs());

    let mut fixed: Vec<usize> = Vec::with_capacity(ng);
    let mut fixed_cost = 0.0;
    for g in 0..ng {
        let rest_rows = ng - g - 1;
        let mut chosen = None;
        for q in 0..nq {
            if fixed.contains(&q) {
                continue;
            }
            let head = fixed_cost + t.get(g, q);
            let remaining = if rest_rows == 0 {
                0.0
            } else {
                let free: Vec<usize> = (0..nq).filter(|c| *c != q && !fixed.contains(c)).collect();
                let mut sub = Vec::with_capacity(rest_rows * free.len());
                for r in g + 1..ng {
                    sub.extend(free.iter().map(|&c| t.get(r, c)));
                }
                let a = solve(&sub, rest_rows, free.len());
                total(&sub, free.len(), &a)
            };
            if head + remaining <= optimum + tol {
                chosen = Some(q);
                fixed_cost = head;
                break;
            }
        }
        // the solver's own choice is always a fallback
        fixed.push(chosen.unwrap_or(best[g]));
        if chosen.is_none() {
            fixed_cost += t.get(g, best[g]);
        }
    }
    let mut pairs: Vec<(usize, usize)> = fixed.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    pairs.sort_unstable();
    let unmatched_queries = (0..nq).filter(|q| !fixed.contains(q)).collect();
    Ok(MatchResult { pairs, unmatched_queries })
}

/// Sum of matched costs.
pub fn matched_cost(cost: &Tensor, m: &MatchResult) -> f64 {
    m.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
}

fn focal_prob_cost(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    y * alpha * (1.0 - p).powf(gamma) * -p.ln() + (1.0 - y) * (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln()
}

/// One query's predictions in probability space.
#[derive(Clone, Copy, Debug)]
pub struct QueryPrediction<'a> {
    /// Normalized cx, cy, w, h.
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    /// Softmax over `N_o + 1` classes.
    pub object_probs: &'a [f64],
    /// Sigmoid interaction scores, one per interaction column.
    pub interaction_probs: &'a [f64],
}

/// Weighted box, GIoU, object and interaction cost of assigning `gt` to a
/// query.
pub fn pair_cost(pred: &QueryPrediction<'_>, gt: &Target, w: &LossWeights) -> f64 {
    let l1 = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let giou = |a: &[f64; 4], b: &[f64; 4]| CornerBox::from_cxcywh(*a).giou(&CornerBox::from_cxcywh(*b));
    let box_cost = l1(&pred.human_box, &gt.human_box) + l1(&pred.object_box, &gt.object_box);
    let giou_cost = (1.0 - giou(&pred.human_box, &gt.human_box)) + (1.0 - giou(&pred.object_box, &gt.object_box));
    let obj_cost = -pred.object_probs[gt.object_id];
    let int_cost: f64 = pred
        .interaction_probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let y = if gt.hoi_ids.contains(&j) { 1.0 } else { 0.0 };
            focal_prob_cost(p, y, w.focal_alpha, w.focal_gamma)
        })
        .sum();
    w.lambda_b * box_cost + w.lambda_u * giou_cost + w.lambda_c_o * obj_cost + w.lambda_c_a * int_cost
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `N_q x G` cost matrix for one image. Inputs are the image's own rows of
/// one decoder layer's outputs.
pub fn cost_matrix(
    human_boxes: &Tensor,
    object_boxes: &Tensor,
    object_logits: &Tensor,
    interaction_logits: &Tensor,
    targets: &[Target],
    w: &LossWeights,
) -> Tensor {
    let nq = human_boxes.rows();
    let probs = softmax_rows(object_logits);
    let sig = interaction_logits.map(sigmoid);
    let mut c = Tensor::zeros(nq, targets.len());
    for q in 0..nq {
        let pred = QueryPrediction {
            human_box: human_boxes.row(q).try_into().unwrap(),
            object_box: object_boxes.row(q).try_into().unwrap(),
            object_probs: probs.row(q),
            interaction_probs: sig.row(q),
        };
        for (g, t) in targets.iter().enumerate() {
            c.set(q, g, pair_cost(&pred, t, w));
        }
    }
    c
}
