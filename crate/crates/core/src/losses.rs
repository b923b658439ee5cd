//! Bipartite matching of queries to ground truth, and the classification and
//! mask losses.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{bce_with_logit, sigmoid, Mat};

pub const DICE_EPS: f64 = 1.0;

/// Ground-truth instances at mask-head resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub class_ids: Vec<usize>,
    /// `G×(height·width)`, entries 0 or 1.
    pub masks: Mat,
    pub height: usize,
    pub width: usize,
}

impl TargetSet {
    pub fn new(class_ids: Vec<usize>, masks: Mat, height: usize, width: usize) -> Result<Self> {
        if masks.rows != class_ids.len() {
            return Err(Error::Dimension { what: "target masks".into(), expected: class_ids.len(), found: masks.rows });
        }
        if masks.cols != height * width {
            return Err(Error::Dimension { what: "target mask pixels".into(), expected: height * width, found: masks.cols });
        }
        if masks.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("target masks must be binary".into()));
        }
        Ok(Self { class_ids, masks, height, width })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// `(query, target)` pairs; queries absent from `pairs` are no-object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl Assignment {
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ClassLoss {
    /// Per-class sigmoid BCE; unmatched queries target all zeros.
    #[default]
    Sigmoid,
    /// Softmax cross-entropy on matched queries only.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub class_weight: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub class_loss: ClassLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { class_weight: 2.0, dice_weight: 5.0, bce_weight: 5.0, class_loss: ClassLoss::Sigmoid }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub class_weight: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    /// Mask costs use this many sampled pixels when the map is larger than
    /// `dense_limit` pixels.
    pub num_points: usize,
    pub dense_limit: usize,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { class_weight: 2.0, dice_weight: 5.0, bce_weight: 5.0, num_points: 112, dense_limit: 1024, seed: 0 }
    }
}

impl MatcherConfig {
    /// Pixel indices the mask costs are evaluated on, or `None` for all.
    pub fn cost_points(&self, pixels: usize) -> Option<Vec<usize>> {
        if pixels <= self.dense_limit || self.num_points >= pixels {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = sample(&mut rng, pixels, self.num_points).into_vec();
        idx.sort_unstable();
        Some(idx)
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows ≤ cols`), by shortest augmenting paths with potentials.
pub fn hungarian(cost: &Mat) -> Vec<usize> {
    let (n, m) = (cost.rows, cost.cols);
    assert!(n <= m, "hungarian needs rows <= cols");
    let a = |i: usize, j: usize| {
        let c = cost.get(i - 1, j - 1);
        if c.is_nan() {
            f64::MAX / 4.0
        } else {
            c
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut ans = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

fn class_probs(logits: &Mat, mode: ClassLoss) -> Mat {
    match mode {
        ClassLoss::Sigmoid => logits.map(sigmoid),
        ClassLoss::Softmax => {
            let mut out = logits.clone();
            for r in 0..out.rows {
                let row = out.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            out
        }
    }
}

fn dice_value(p: &[f64], t: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let (sp, st): (f64, f64) = (p.iter().sum(), t.iter().sum());
    1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

/// `N_Q×G` matching cost.
pub fn matching_cost(
    class_logits: &Mat,
    mask_logits: &Mat,
    targets: &TargetSet,
    cfg: &MatcherConfig,
    class_loss: ClassLoss,
) -> Mat {
    let probs = class_probs(class_logits, class_loss);
    let points = cfg.cost_points(mask_logits.cols);
    let pick = |row: &[f64]| -> Vec<f64> {
        match &points {
            Some(idx) => idx.iter().map(|&i| row[i]).collect(),
            None => row.to_vec(),
        }
    };
    let tgt: Vec<Vec<f64>> = (0..targets.len()).map(|j| pick(targets.masks.row(j))).collect();
    Mat::from_fn(class_logits.rows, targets.len(), |q, j| {
        let logits = pick(mask_logits.row(q));
        let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let bce = logits.iter().zip(&tgt[j]).map(|(&x, &t)| bce_with_logit(x, t)).sum::<f64>() / logits.len() as f64;
        -cfg.class_weight * probs.get(q, targets.class_ids[j]) + cfg.dice_weight * dice_value(&p, &tgt[j]) + cfg.bce_weight * bce
    })
}

fn check_inputs(class_logits: &Mat, mask_logits: &Mat, targets: &TargetSet) -> Result<()> {
    if mask_logits.rows != class_logits.rows {
        return Err(Error::Dimension { what: "mask logit queries".into(), expected: class_logits.rows, found: mask_logits.rows });
    }
    if mask_logits.cols != targets.masks.cols {
        return Err(Error::Dimension { what: "mask logit pixels".into(), expected: targets.masks.cols, found: mask_logits.cols });
    }
    if let Some(&c) = targets.class_ids.iter().find(|&&c| c >= class_logits.cols) {
        return Err(Error::Dimension { what: "target class id".into(), expected: class_logits.cols, found: c });
    }
    if targets.len() > class_logits.rows {
        return Err(Error::Capacity { targets: targets.len(), queries: class_logits.rows });
    }
    Ok(())
}

pub fn hungarian_match(
    class_logits: &Mat,
    mask_logits: &Mat,
    targets: &TargetSet,
    cfg: &MatcherConfig,
    class_loss: ClassLoss,
) -> Result<Assignment> {
    check_inputs(class_logits, mask_logits, targets)?;
    let cost = matching_cost(class_logits, mask_logits, targets, cfg, class_loss);
    Ok(assign_from_cost(&cost))
}

/// Optimal assignment for an `N_Q×G` cost with `G ≤ N_Q`, pairs sorted by query.
pub fn assign_from_cost(cost: &Mat) -> Assignment {
    let cols = hungarian(&cost.transpose());
    let mut pairs: Vec<(usize, usize)> = cols.into_iter().enumerate().map(|(j, q)| (q, j)).collect();
    pairs.sort_unstable();
    Assignment { pairs, num_queries: cost.rows }
}

fn one_hot_targets(num_queries: usize, num_classes: usize, targets: &TargetSet, assignment: &Assignment) -> Mat {
    let mut t = Mat::zeros(num_queries, num_classes);
    for &(q, j) in &assignment.pairs {
        t.set(q, targets.class_ids[j], 1.0);
    }
    t
}

pub fn classification_loss(
    g: &mut Graph,
    class_logits: Var,
    targets: &TargetSet,
    assignment: &Assignment,
    mode: ClassLoss,
) -> Var {
    let (nq, k) = g.value(class_logits).shape();
    match mode {
        ClassLoss::Sigmoid => {
            let t = one_hot_targets(nq, k, targets, assignment);
            let l = g.bce_with_logits(class_logits, &t);
            g.mean_all(l)
        }
        ClassLoss::Softmax => {
            if assignment.pairs.is_empty() {
                return g.constant(Mat::zeros(1, 1));
            }
            let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
            let rows = g.gather_rows(class_logits, &qs);
            let ls = g.log_softmax_rows(rows);
            let mut pick = Mat::zeros(qs.len(), k);
            for (i, &(_, j)) in assignment.pairs.iter().enumerate() {
                pick.set(i, targets.class_ids[j], -1.0 / qs.len() as f64);
            }
            let pick = g.constant(pick);
            let picked = g.mul(ls, pick);
            g.sum_all(picked)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskLossTerms {
    pub dice: Var,
    pub bce: Var,
}

/// Dice and pixel-mean BCE, each averaged over matched pairs.
pub fn mask_loss_terms(g: &mut Graph, mask_logits: Var, targets: &TargetSet, assignment: &Assignment) -> MaskLossTerms {
    if assignment.pairs.is_empty() {
        let z = g.constant(Mat::zeros(1, 1));
        return MaskLossTerms { dice: z, bce: z };
    }
    let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let t = targets.masks.select_rows(&js);
    let m = g.gather_rows(mask_logits, &qs);
    let p = g.sigmoid(m);
    let tc = g.constant(t.clone());
    let pt = g.mul(p, tc);
    let inter = g.sum_rows(pt);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sp = g.sum_rows(p);
    let st = Mat::from_fn(js.len(), 1, |r, _| t.row(r).iter().sum::<f64>() + DICE_EPS);
    let st = g.constant(st);
    let den = g.add(sp, st);
    let ratio = g.div(num, den);
    let mean_ratio = g.mean_all(ratio);
    let neg = g.scale(mean_ratio, -1.0);
    let dice = g.add_scalar(neg, 1.0);
    let b = g.bce_with_logits(m, &t);
    let bce = g.mean_all(b);
    MaskLossTerms { dice, bce }
}

pub fn mask_loss(g: &mut Graph, mask_logits: Var, targets: &TargetSet, assignment: &Assignment) -> Var {
    let t = mask_loss_terms(g, mask_logits, targets, assignment);
    g.add(t.dice, t.bce)
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub class: Var,
    pub dice: Var,
    pub bce: Var,
    pub assignment: Assignment,
}

/// Matches, then returns `w_cls·L_cls + w_dice·L_dice + w_bce·L_bce`.
pub fn total_loss(
    g: &mut Graph,
    class_logits: Var,
    mask_logits: Var,
    targets: &TargetSet,
    loss: &LossConfig,
    matcher: &MatcherConfig,
) -> Result<LossOutput> {
    let assignment = if targets.is_empty() {
        Assignment { pairs: Vec::new(), num_queries: g.value(class_logits).rows }
    } else {
        hungarian_match(g.value(class_logits), g.value(mask_logits), targets, matcher, loss.class_loss)?
    };
    let class = classification_loss(g, class_logits, targets, &assignment, loss.class_loss);
    let MaskLossTerms { dice, bce } = mask_loss_terms(g, mask_logits, targets, &assignment);
    let a = g.scale(class, loss.class_weight);
    let b = g.scale(dice, loss.dice_weight);
    let c = g.scale(bce, loss.bce_weight);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    Ok(LossOutput { total, class, dice, bce, assignment })
}

// Value-level forms.

pub fn classification_loss_value(class_logits: &Mat, targets: &TargetSet, assignment: &Assignment, mode: ClassLoss) -> f64 {
    let mut g = Graph::new();
    let y = g.constant(class_logits.clone());
    let l = classification_loss(&mut g, y, targets, assignment, mode);
    g.scalar(l)
}

pub fn mask_loss_value(mask_logits: &Mat, targets: &TargetSet, assignment: &Assignment) -> (f64, f64) {
    let mut g = Graph::new();
    let m = g.constant(mask_logits.clone());
    let t = mask_loss_terms(&mut g, m, targets, assignment);
    (g.scalar(t.dice), g.scalar(t.bce))
}

pub fn total_loss_value(
    class_logits: &Mat,
    mask_logits: &Mat,
    targets: &TargetSet,
    loss: &LossConfig,
    matcher: &MatcherConfig,
) -> Result<(f64, Assignment)> {
    let mut g = Graph::new();
    let y = g.constant(class_logits.clone());
    let m = g.constant(mask_logits.clone());
    let out = total_loss(&mut g, y, m, targets, loss, matcher)?;
    Ok((g.scalar(out.total), out.assignment))
}
