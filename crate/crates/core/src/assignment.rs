//! Set matching between predictions and high-quality ground truths, the
//! per-role training loss, and a full optimization step.
//!
//! Each prediction ends up in exactly one role:
//!
//! * `Matched`: paired by the Hungarian solver with a ground truth whose MOS
//!   is at least [`GOOD_MOS`]; supervised on box and score.
//! * `Soft`: unmatched, but overlapping some ground truth at IoU ≥ τ; its
//!   score target is that neighbor's normalized MOS discounted by the IoU.
//! * `Negative`: everything else; its score target is zero.

use serde::{Deserialize, Serialize};

use crate::composition::CompositionPrior;
use crate::decoder::{forward_graph, read_predictions, DecoderError, ModelInput, ModelState, Prediction};
use crate::geometry::{giou, giou_columns, iou, l1_box, l1_sum, BoxColumns, ScoredCrop, MOS_MAX, MOS_MIN};
use crate::tensor::{Graph, Optimizer, Tensor, TensorError, Var};

/// Ground truths at or above this MOS are matching targets.
pub const GOOD_MOS: f64 = 4.0;

/// Predicted scores are kept inside `[FOCAL_CLAMP, 1 - FOCAL_CLAMP]` before logs.
pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssignmentError {
    #[error("MOS {0} outside [1, 5]")]
    OutOfRange(f64),
    #[error("cost matrix is not square: {rows} rows, row {row} has {cols} columns")]
    NonSquare { rows: usize, row: usize, cols: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("{targets} high-quality targets but only {predictions} predictions")]
    TooManyTargets { targets: usize, predictions: usize },
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_giou: f64,
    pub lambda_focal: f64,
    pub gamma: f64,
    /// IoU at or above which an unmatched prediction gets a soft label.
    pub soft_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_giou: 0.4,
            lambda_focal: 0.4,
            gamma: 2.0,
            soft_iou: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), AssignmentError> {
        if self.lambda_giou < 0.0 || self.lambda_focal < 0.0 {
            return Err(AssignmentError::BadWeights("negative loss weight".into()));
        }
        if self.gamma < 1.0 {
            return Err(AssignmentError::BadWeights(format!("gamma {} below 1", self.gamma)));
        }
        if !(self.soft_iou > 0.0 && self.soft_iou <= 1.0) {
            return Err(AssignmentError::BadWeights(format!(
                "soft-label IoU threshold {} outside (0, 1]",
                self.soft_iou
            )));
        }
        Ok(())
    }
}

/// Indices of ground truths with MOS ≥ [`GOOD_MOS`], in their original order.
pub fn good_indices(ground_truths: &[ScoredCrop]) -> Vec<usize> {
    ground_truths
        .iter()
        .enumerate()
        .filter(|(_, gt)| gt.mos >= GOOD_MOS)
        .map(|(i, _)| i)
        .collect()
}

pub fn select_good(ground_truths: &[ScoredCrop]) -> Vec<ScoredCrop> {
    good_indices(ground_truths)
        .into_iter()
        .map(|i| ground_truths[i])
        .collect()
}

/// Maps a MOS in `[1, 5]` linearly onto `[0, 1]`.
pub fn normalize_mos(mos: f64) -> Result<f64, AssignmentError> {
    if !(MOS_MIN..=MOS_MAX).contains(&mos) {
        return Err(AssignmentError::OutOfRange(mos));
    }
    Ok((mos - MOS_MIN) / (MOS_MAX - MOS_MIN))
}

/// Quality focal loss `-|v - v̂|^γ · [v ln v̂ + (1 - v) ln(1 - v̂)]`.
pub fn focal(pred: f64, target: f64, gamma: f64) -> f64 {
    let p = pred.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let bce = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    (target - p).abs().powf(gamma) * bce
}

/// Elementwise focal loss on the graph; `scores` and `targets` are `[n]`.
pub fn focal_graph(g: &mut Graph, scores: Var, targets: &[f64], gamma: f64) -> Result<Var, TensorError> {
    let n = targets.len();
    let t = g.constant(Tensor::new(vec![n], targets.to_vec())?);
    let one_minus_t = g.constant(Tensor::new(vec![n], targets.iter().map(|v| 1.0 - v).collect())?);
    let p = g.clamp(scores, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let log_q = g.log(q)?;
    let pos = g.mul(t, log_p)?;
    let negt = g.mul(one_minus_t, log_q)?;
    let bce = g.add(pos, negt)?;
    let bce = g.neg(bce)?;
    let gap = g.sub(t, p)?;
    let modulation = g.pow_abs(gap, gamma)?;
    g.mul(modulation, bce)
}

/// Matching cost between one prediction and a target; `None` is a padding
/// slot, which only charges the score for not being zero.
pub fn match_cost(pred: &Prediction, target: Option<&ScoredCrop>, w: &LossWeights) -> Result<f64, AssignmentError> {
    Ok(match target {
        Some(t) => {
            l1_box(&pred.crop, &t.crop)
                + w.lambda_giou * (1.0 - giou(&pred.crop, &t.crop))
                + w.lambda_focal * focal(pred.score, normalize_mos(t.mos)?, w.gamma)
        }
        None => w.lambda_focal * focal(pred.score, 0.0, w.gamma),
    })
}

/// Square matrix of finite costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let n = rows.len();
        for (row, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(AssignmentError::NonSquare { rows: n, row, cols: r.len() });
            }
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(AssignmentError::NonFinite { row, col });
            }
        }
        Ok(CostMatrix { n, data: rows.concat() })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    /// Sum of `cost[i, perm[i]]` in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// Minimum-cost perfect assignment (Kuhn-Munkres with row/column potentials,
/// O(n³)). Returns `perm` with row `i` assigned to column `perm[i]`.
pub fn hungarian(costs: &CostMatrix) -> Vec<usize> {
    let n = costs.n;
    if n == 0 {
        return Vec::new();
    }
    // 1-based columns; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Role {
    /// Index into the full ground-truth list.
    Matched { target: usize },
    Soft { neighbor: usize, score: f64 },
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    roles: Vec<Role>,
    permutation: Vec<usize>,
    good: Vec<usize>,
}

impl Assignment {
    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    /// Row-to-column permutation over the padded target list; columns below
    /// `good().len()` are real targets.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Ground-truth indices of the matching targets, in column order.
    pub fn good(&self) -> &[usize] {
        &self.good
    }

    /// Score target for each prediction.
    pub fn score_targets(&self, ground_truths: &[ScoredCrop]) -> Vec<f64> {
        self.roles
            .iter()
            .map(|r| match *r {
                Role::Matched { target } => (ground_truths[target].mos - MOS_MIN) / (MOS_MAX - MOS_MIN),
                Role::Soft { score, .. } => score,
                Role::Negative => 0.0,
            })
            .collect()
    }

    pub fn matched(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.roles.iter().enumerate().filter_map(|(i, r)| match r {
            Role::Matched { target } => Some((i, *target)),
            _ => None,
        })
    }
}

/// Builds the padded cost matrix for `preds` against the high-quality subset.
pub fn padded_costs(
    preds: &[Prediction],
    ground_truths: &[ScoredCrop],
    good: &[usize],
    w: &LossWeights,
) -> Result<CostMatrix, AssignmentError> {
    let rows = preds
        .iter()
        .map(|p| {
            (0..preds.len())
                .map(|j| match good.get(j) {
                    Some(&gi) => match_cost(p, Some(&ground_truths[gi]), w),
                    None => match_cost(p, None, w),
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    CostMatrix::from_rows(&rows)
}

/// Hungarian matching over padded targets, then soft and negative roles for
/// the predictions left on padding slots.
pub fn assign(
    preds: &[Prediction],
    ground_truths: &[ScoredCrop],
    w: &LossWeights,
) -> Result<Assignment, AssignmentError> {
    let good = good_indices(ground_truths);
    if good.len() > preds.len() {
        return Err(AssignmentError::TooManyTargets {
            targets: good.len(),
            predictions: preds.len(),
        });
    }
    let costs = padded_costs(preds, ground_truths, &good, w)?;
    let permutation = hungarian(&costs);
    let roles = preds
        .iter()
        .zip(&permutation)
        .map(|(p, &col)| {
            if let Some(&target) = good.get(col) {
                return Ok(Role::Matched { target });
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in ground_truths.iter().enumerate() {
                let o = iou(&p.crop, &gt.crop);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            Ok(match best {
                Some((neighbor, o)) if o >= w.soft_iou => Role::Soft {
                    neighbor,
                    score: normalize_mos(ground_truths[neighbor].mos)? * o,
                },
                _ => Role::Negative,
            })
        })
        .collect::<Result<Vec<_>, AssignmentError>>()?;
    Ok(Assignment {
        roles,
        permutation,
        good,
    })
}

/// Loss on the graph for one image: box terms for matched predictions, a
/// focal score term for every prediction, all divided by the prediction count.
pub fn training_loss(
    g: &mut Graph,
    boxes: Var,
    scores: Var,
    assignment: &Assignment,
    ground_truths: &[ScoredCrop],
    w: &LossWeights,
) -> Result<Var, AssignmentError> {
    let n = assignment.roles.len();
    let targets = assignment.score_targets(ground_truths);
    let f = focal_graph(g, scores, &targets, w.gamma)?;
    let f = g.sum(f)?;
    let mut total = g.scale(f, w.lambda_focal)?;

    let (rows, cols): (Vec<usize>, Vec<usize>) = assignment.matched().unzip();
    if !rows.is_empty() {
        let pred = g.gather_rows(boxes, &rows)?;
        let target_data: Vec<f64> = cols
            .iter()
            .flat_map(|&t| ground_truths[t].crop.to_array())
            .collect();
        let target = g.constant(Tensor::new(vec![rows.len(), 4], target_data)?);
        let l1 = l1_sum(g, pred, target)?;
        let pc = BoxColumns::split(g, pred)?;
        let tc = BoxColumns::split(g, target)?;
        let gi = giou_columns(g, &pc, &tc)?;
        let gi = g.sum(gi)?;
        // Σ (1 - giou) = k - Σ giou
        let giou_loss = g.neg(gi)?;
        let giou_loss = g.add_scalar(giou_loss, rows.len() as f64)?;
        let giou_loss = g.scale(giou_loss, w.lambda_giou)?;
        total = g.add(total, l1)?;
        total = g.add(total, giou_loss)?;
    }
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Value of the training loss computed from plain predictions.
pub fn training_loss_value(
    preds: &[Prediction],
    assignment: &Assignment,
    ground_truths: &[ScoredCrop],
    w: &LossWeights,
) -> Result<f64, AssignmentError> {
    let mut g = Graph::new();
    let boxes = g.constant(Tensor::new(
        vec![preds.len(), 4],
        preds.iter().flat_map(|p| p.crop.to_array()).collect(),
    )?);
    let scores = g.constant(Tensor::new(vec![preds.len()], preds.iter().map(|p| p.score).collect())?);
    let l = training_loss(&mut g, boxes, scores, assignment, ground_truths, w)?;
    Ok(g.item(l))
}

/// One training image: model input, optional prior, annotated crops.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub input: Tensor,
    /// `true` when `input` holds precomputed embeddings rather than an image.
    pub is_embedding: bool,
    pub prior: Option<CompositionPrior>,
    pub ground_truths: Vec<ScoredCrop>,
}

impl TrainExample {
    pub fn model_input(&self) -> ModelInput<'_> {
        if self.is_embedding {
            ModelInput::Embeddings(&self.input)
        } else {
            ModelInput::Image(&self.input)
        }
    }
}

/// Forward pass, matching and loss for one example, with gradients added to
/// the model's accumulators. Returns the loss value.
pub fn accumulate_example(
    state: &mut ModelState,
    example: &TrainExample,
    w: &LossWeights,
) -> Result<f64, AssignmentError> {
    let mut g = Graph::new();
    let fwd = forward_graph(&mut g, state, example.model_input(), example.prior.as_ref())?;
    let preds = read_predictions(&g, fwd.boxes, fwd.scores);
    let a = assign(&preds, &example.ground_truths, w)?;
    let loss = training_loss(&mut g, fwd.boxes, fwd.scores, &a, &example.ground_truths, w)?;
    g.backward(loss)?;
    state.params_mut().accumulate_grads(&g);
    Ok(g.item(loss))
}

/// forward → assign → loss → backward → update over a batch. Gradients are
/// averaged over the batch. Returns the mean pre-update loss.
pub fn train_step(
    state: &mut ModelState,
    batch: &[TrainExample],
    w: &LossWeights,
    optimizer: &mut dyn Optimizer,
    lr: f64,
) -> Result<f64, AssignmentError> {
    state.params_mut().zero_grad();
    let mut total = 0.0;
    for ex in batch {
        total += accumulate_example(state, ex, w)?;
    }
    let b = batch.len().max(1) as f64;
    state.params_mut().scale_grads(1.0 / b);
    optimizer.step(state.params_mut().tensors_mut(), lr)?;
    Ok(total / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CropBox;

    fn crop(cx: f64, cy: f64, w: f64, h: f64, mos: f64) -> ScoredCrop {
        ScoredCrop::new(CropBox::new(cx, cy, w, h).unwrap(), mos).unwrap()
    }

    fn pred(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Prediction {
        Prediction {
            crop: CropBox::new(cx, cy, w, h).unwrap(),
            score,
        }
    }

    fn brute_force(c: &CostMatrix) -> f64 {
        fn go(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: &mut Vec<usize>, best: &mut f64) {
            if row == c.size() {
                *best = best.min(c.total(acc));
                return;
            }
            for j in 0..c.size() {
                if !used[j] {
                    used[j] = true;
                    acc.push(j);
                    go(c, row + 1, used, acc, best);
                    acc.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(c, 0, &mut vec![false; c.size()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn good_selection_is_inclusive_and_ordered() {
        let gts = [crop(0.5, 0.5, 0.5, 0.5, 4.0), crop(0.5, 0.5, 0.4, 0.4, 3.9), crop(0.4, 0.4, 0.5, 0.5, 5.0)];
        assert_eq!(good_indices(&gts), vec![0, 2]);
        assert_eq!(select_good(&gts), vec![gts[0], gts[2]]);
        assert!(select_good(&gts[1..2]).is_empty());
    }

    #[test]
    fn mos_normalization() {
        assert_eq!(normalize_mos(1.0).unwrap(), 0.0);
        assert_eq!(normalize_mos(5.0).unwrap(), 1.0);
        assert_eq!(normalize_mos(4.0).unwrap(), 0.75);
        assert!(normalize_mos(0.5).is_err());
        assert!(normalize_mos(5.01).is_err());
    }

    #[test]
    fn focal_values() {
        assert_eq!(focal(0.3, 0.3, 2.0), 0.0);
        assert!((focal(0.5, 0.0, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!(focal(0.31, 0.3, 2.0) > 0.0);
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![3], vec![0.5, 0.2, 0.9]).unwrap());
        let f = focal_graph(&mut g, s, &[0.0, 0.2, 0.4], 2.0).unwrap();
        for (k, (p, t)) in [(0.5, 0.0), (0.2, 0.2), (0.9, 0.4)].iter().enumerate() {
            assert!((g.data(f)[k] - focal(*p, *t, 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn match_cost_terms() {
        let w = LossWeights::default();
        let t = crop(0.5, 0.5, 0.4, 0.4, 5.0);
        let p = pred(0.5, 0.5, 0.4, 0.4, 1.0 - FOCAL_CLAMP);
        assert!(match_cost(&p, Some(&t), &w).unwrap() < 1e-12);

        let p = pred(0.55, 0.5, 0.4, 0.3, 0.6);
        let t = crop(0.5, 0.5, 0.4, 0.4, 3.0);
        let l1 = 0.05 + 0.0 + 0.0 + 0.1;
        // pred corners x 0.35..0.75, y 0.35..0.65; target 0.3..0.7 both axes
        let inter = 0.35 * 0.3;
        let union = 0.12 + 0.16 - inter;
        let encl = 0.45 * 0.4;
        let g = inter / union - (encl - union) / encl;
        let v = 0.5;
        let fl = (v - 0.6f64).abs().powi(2) * -(v * 0.6f64.ln() + (1.0 - v) * 0.4f64.ln());
        let want = l1 + 0.4 * (1.0 - g) + 0.4 * fl;
        assert!((match_cost(&p, Some(&t), &w).unwrap() - want).abs() < 1e-12);
        assert!((match_cost(&p, None, &w).unwrap() - 0.4 * focal(0.6, 0.0, 2.0)).abs() < 1e-15);
    }

    #[test]
    fn hungarian_small_cases() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(hungarian(&c), vec![0, 1, 2]);
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let p = hungarian(&c);
        assert_eq!(p, vec![1, 0]);
        assert_eq!(c.total(&p), 4.0);
        assert!(hungarian(&CostMatrix::from_rows(&[]).unwrap()).is_empty());
    }

    #[test]
    fn cost_matrix_errors() {
        assert!(matches!(
            CostMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]),
            Err(AssignmentError::NonSquare { row: 1, .. })
        ));
        assert!(matches!(
            CostMatrix::from_rows(&[vec![1.0, f64::NAN], vec![1.0, 1.0]]),
            Err(AssignmentError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn hungarian_matches_brute_force_on_small_random() {
        let mut s: u64 = 12345;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for n in 1..=5 {
            for _ in 0..50 {
                let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
                let c = CostMatrix::from_rows(&rows).unwrap();
                assert_eq!(c.total(&hungarian(&c)), brute_force(&c));
            }
        }
    }

    #[test]
    fn assign_single_target() {
        let w = LossWeights::default();
        let gts = [crop(0.5, 0.5, 0.5, 0.5, 5.0), crop(0.2, 0.2, 0.2, 0.2, 2.0)];
        let preds = [
            pred(0.9, 0.9, 0.1, 0.1, 0.1),
            pred(0.5, 0.5, 0.5, 0.5, 0.9),
            pred(0.51, 0.5, 0.5, 0.5, 0.5),
        ];
        let a = assign(&preds, &gts, &w).unwrap();
        assert_eq!(a.roles()[1], Role::Matched { target: 0 });
        assert_eq!(a.roles()[0], Role::Negative);
        match a.roles()[2] {
            Role::Soft { neighbor, score } => {
                assert_eq!(neighbor, 0);
                let o = iou(&preds[2].crop, &gts[0].crop);
                assert!((score - o).abs() < 1e-15);
            }
            r => panic!("expected soft role, got {r:?}"),
        }
    }

    #[test]
    fn assign_without_good_targets() {
        let w = LossWeights::default();
        let gts = [crop(0.5, 0.5, 0.5, 0.5, 3.0)];
        let preds = [pred(0.5, 0.5, 0.5, 0.5, 0.4), pred(0.1, 0.1, 0.1, 0.1, 0.4)];
        let a = assign(&preds, &gts, &w).unwrap();
        assert!(a.good().is_empty());
        assert_eq!(a.roles()[0], Role::Soft { neighbor: 0, score: 0.5 });
        assert_eq!(a.roles()[1], Role::Negative);
    }

    #[test]
    fn assign_rejects_too_many_targets() {
        let gts = [crop(0.5, 0.5, 0.5, 0.5, 5.0), crop(0.4, 0.5, 0.5, 0.5, 4.5)];
        let preds = [pred(0.5, 0.5, 0.5, 0.5, 0.4)];
        assert!(matches!(
            assign(&preds, &gts, &LossWeights::default()),
            Err(AssignmentError::TooManyTargets { .. })
        ));
    }

    fn random_pred(next: &mut impl FnMut() -> f64) -> Prediction {
        let w = 0.1 + 0.6 * next();
        let h = 0.1 + 0.6 * next();
        pred(w / 2.0 + (1.0 - w) * next(), h / 2.0 + (1.0 - h) * next(), w, h, next())
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    /// Enumerates every injective target → prediction map directly, then
    /// labels leftovers by scanning all ground truths.
    fn naive_roles(preds: &[Prediction], gts: &[ScoredCrop], w: &LossWeights) -> Vec<Role> {
        let good: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].mos >= 4.0).collect();
        let empty: Vec<f64> = preds.iter().map(|p| match_cost(p, None, w).unwrap()).collect();
        #[allow(clippy::too_many_arguments)]
        fn search(
            preds: &[Prediction], gts: &[ScoredCrop], good: &[usize], empty: &[f64], w: &LossWeights,
            k: usize, used: &mut Vec<Option<usize>>, cost: f64, best: &mut (f64, Vec<Option<usize>>),
        ) {
            if k == good.len() {
                let total = cost + (0..preds.len()).filter(|&i| used[i].is_none()).map(|i| empty[i]).sum::<f64>();
                if total < best.0 {
                    *best = (total, used.clone());
                }
                return;
            }
            for i in 0..preds.len() {
                if used[i].is_none() {
                    used[i] = Some(good[k]);
                    let c = match_cost(&preds[i], Some(&gts[good[k]]), w).unwrap();
                    search(preds, gts, good, empty, w, k + 1, used, cost + c, best);
                    used[i] = None;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        search(preds, gts, &good, &empty, w, 0, &mut vec![None; preds.len()], 0.0, &mut best);
        preds
            .iter()
            .zip(best.1)
            .map(|(p, m)| {
                if let Some(target) = m {
                    return Role::Matched { target };
                }
                let mut nb = 0;
                for j in 1..gts.len() {
                    if iou(&p.crop, &gts[j].crop) > iou(&p.crop, &gts[nb].crop) {
                        nb = j;
                    }
                }
                let o = iou(&p.crop, &gts[nb].crop);
                if o >= w.soft_iou {
                    Role::Soft { neighbor: nb, score: (gts[nb].mos - 1.0) / 4.0 * o }
                } else {
                    Role::Negative
                }
            })
            .collect()
    }

    #[test]
    fn assign_matches_naive_oracle() {
        let w = LossWeights::default();
        let mut next = lcg(99);
        for _ in 0..30 {
            let gts: Vec<ScoredCrop> = (0..6)
                .map(|k| {
                    let p = random_pred(&mut next);
                    let mos = if k < 4 { 4.0 + next() } else { 1.0 + 2.9 * next() };
                    ScoredCrop::new(p.crop, mos).unwrap()
                })
                .collect();
            let mut preds: Vec<Prediction> = (0..10).map(|_| random_pred(&mut next)).collect();
            // nudge a few predictions onto ground truths so soft labels occur
            for k in 0..3 {
                let c = gts[k + 2].crop;
                preds[k * 3] = pred(c.cx() + 0.005, c.cy(), c.w(), c.h(), next());
            }
            let a = assign(&preds, &gts, &w).unwrap();
            assert_eq!(a.roles(), naive_roles(&preds, &gts, &w).as_slice());
        }
    }

    proptest::proptest! {
        #[test]
        fn roles_partition_predictions(seed in 0u64..10_000, n_pred in 1usize..9, n_gt in 0usize..6) {
            let mut next = lcg(seed);
            let gts: Vec<ScoredCrop> = (0..n_gt)
                .map(|_| ScoredCrop::new(random_pred(&mut next).crop, 1.0 + 4.0 * next()).unwrap())
                .collect();
            let preds: Vec<Prediction> = (0..n_pred).map(|_| random_pred(&mut next)).collect();
            let w = LossWeights::default();
            match assign(&preds, &gts, &w) {
                Ok(a) => {
                    proptest::prop_assert_eq!(a.roles().len(), n_pred);
                    let mut matched: Vec<usize> = a.matched().map(|(_, t)| t).collect();
                    matched.sort();
                    proptest::prop_assert_eq!(matched, good_indices(&gts));
                    let mut cols = a.permutation().to_vec();
                    cols.sort();
                    proptest::prop_assert_eq!(cols, (0..n_pred).collect::<Vec<_>>());
                    let l = training_loss_value(&preds, &a, &gts, &w).unwrap();
                    proptest::prop_assert!(l.is_finite() && l >= 0.0);
                }
                Err(AssignmentError::TooManyTargets { .. }) => {
                    proptest::prop_assert!(good_indices(&gts).len() > n_pred);
                }
                Err(e) => return Err(proptest::test_runner::TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn positive_scaling_keeps_assignment(seed in 0u64..10_000, n in 1usize..8, k in 0.01f64..100.0) {
            let mut next = lcg(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
            let a = hungarian(&CostMatrix::from_rows(&rows).unwrap());
            let b = hungarian(&CostMatrix::from_rows(&scaled).unwrap());
            proptest::prop_assert_eq!(a, b);
        }

        #[test]
        fn focal_zero_only_at_target(p in 0.001f64..0.999, t in 0.0f64..1.0) {
            let f = focal(p, t, 2.0);
            if p == t {
                proptest::prop_assert_eq!(f, 0.0);
            } else {
                proptest::prop_assert!(f > 0.0);
            }
        }
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let w = LossWeights::default();
        let gts = [crop(0.5, 0.5, 0.5, 0.5, 5.0), crop(0.3, 0.3, 0.2, 0.2, 1.0)];
        let preds = [
            pred(0.5, 0.5, 0.5, 0.5, 1.0),
            pred(0.9, 0.9, 0.1, 0.1, 0.0),
            pred(0.1, 0.9, 0.1, 0.1, 0.0),
        ];
        let a = assign(&preds, &gts, &w).unwrap();
        let l = training_loss_value(&preds, &a, &gts, &w).unwrap();
        assert!((0.0..1e-12).contains(&l), "loss {l}");
    }
}
