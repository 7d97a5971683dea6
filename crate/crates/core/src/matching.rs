//! Set-prediction loss: ∅ padding, optimal assignment between padded
//! targets and query predictions, and the deep-supervised training loss.
//!
//! Class indices are 0-based: activity `a` is class `a - 1` and ∅ is the
//! last class, `n_act`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::csi::ActivityId;
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

/// Class index of ∅ for `n_act` activities.
pub fn empty_class(n_act: usize) -> usize {
    n_act
}

/// Real labels (as class indices) followed by ∅ up to `n_q` entries.
pub fn pad_targets(labels: &[ActivityId], n_q: usize, n_act: usize) -> Result<Vec<usize>> {
    if labels.len() > n_q {
        return Err(Error::Invalid(format!(
            "{} people exceed the model's {n_q} queries",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(n_q);
    for &a in labels {
        if a == 0 || a as usize > n_act {
            return Err(Error::Invalid(format!(
                "activity id {a} outside 1..={n_act}"
            )));
        }
        out.push(a as usize - 1);
    }
    out.resize(n_q, empty_class(n_act));
    Ok(out)
}

/// `cost[i][j] = −ln max(p_j[class(ỹ_i)], 1e−12)` for probability rows `probs` (`[n, classes]`).
pub fn build_cost_matrix(
    targets: &[usize],
    probs: &[f64],
    classes: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = targets.len();
    if probs.len() != n * classes {
        return Err(Error::shape(
            "build_cost_matrix",
            format!(
                "{n} targets, {} probabilities for {classes} classes",
                probs.len()
            ),
        ));
    }
    if let Some(&c) = targets.iter().find(|&&c| c >= classes) {
        return Err(Error::Invalid(format!("target class {c} >= {classes}")));
    }
    Ok(targets
        .iter()
        .map(|&c| {
            (0..n)
                .map(|j| -probs[j * classes + c].max(PROB_FLOOR).ln())
                .collect()
        })
        .collect())
}

/// `perm[i]` is the prediction slot matched to target slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect assignment. Among optimal permutations the
/// lexicographically smallest `perm` is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::Invalid("assignment needs at least one row".into()));
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "hungarian",
            format!(
                "cost matrix must be square, got {n} rows of lengths {:?}",
                cost.iter().map(Vec::len).collect::<Vec<_>>()
            ),
        ));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    let (mut row_of_col, u, v) = potentials(cost);
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-11 * scale * n as f64;
    let tight = |i: usize, j: usize| cost[i][j] - u[i] - v[j] <= tol;

    // walk rows in order, moving each to its smallest tight column that still
    // admits a perfect tight matching on the unfixed rows
    let mut col_of_row = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            if col_of_row[i] == j {
                break;
            }
            // give j to i; the row holding j must reach i's old column
            let holder = row_of_col[j];
            let free_col = col_of_row[i];
            let mut seen = vec![false; n];
            seen[j] = true;
            let mut trial_row_of_col = row_of_col.clone();
            trial_row_of_col[j] = i;
            trial_row_of_col[free_col] = usize::MAX;
            if augment(holder, &mut trial_row_of_col, &mut seen, &fixed_col, &tight) {
                row_of_col = trial_row_of_col;
                for (c, &r) in row_of_col.iter().enumerate() {
                    col_of_row[r] = c;
                }
                break;
            }
        }
        fixed_col[col_of_row[i]] = true;
    }
    let total = (0..n).map(|i| cost[i][col_of_row[i]]).sum();
    Ok(Assignment {
        perm: col_of_row,
        cost: total,
    })
}

/// Kuhn augmenting search over tight, unfixed edges.
fn augment(
    row: usize,
    row_of_col: &mut [usize],
    seen: &mut [bool],
    fixed: &[bool],
    tight: &impl Fn(usize, usize) -> bool,
) -> bool {
    for j in 0..row_of_col.len() {
        if seen[j] || fixed[j] || !tight(row, j) {
            continue;
        }
        seen[j] = true;
        let other = row_of_col[j];
        if other == usize::MAX || augment(other, row_of_col, seen, fixed, tight) {
            row_of_col[j] = row;
            return true;
        }
    }
    false
}

/// Shortest-augmenting-path Hungarian method with dual potentials.
/// Returns the row matched to each column and the duals `(u, v)`.
fn potentials(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-based internally; column 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (row_of_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Sum in ascending order, so equal multisets of terms give equal bits.
pub fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Hungarian-optimal total cross-entropy between padded targets and
/// probability rows (`[n_q, classes]`).
pub fn matching_loss(
    targets: &[usize],
    probs: &[f64],
    classes: usize,
) -> Result<(f64, Assignment)> {
    let cost = build_cost_matrix(targets, probs, classes)?;
    let a = hungarian(&cost)?;
    let mut terms: Vec<f64> = a
        .perm
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .collect();
    Ok((canonical_sum(&mut terms), a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha_aux: f64,
    /// Weight of ∅ target terms in the classification loss.
    pub empty_weight: f64,
    /// Match auxiliary layers on their own instead of reusing the final assignment.
    pub aux_independent: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_aux: 0.25,
            empty_weight: 1.0,
            aux_independent: false,
        }
    }
}

/// Deep-supervised set loss in the graph, averaged over the batch.
///
/// `logits[l]` is layer `l`'s `[batch, N_q, classes]` output and
/// `targets[b]` the padded class indices of sample `b`. The final layer is
/// matched by [`hungarian`]; earlier layers reuse that assignment and are
/// weighted by `alpha_aux`. Returns the loss and the final assignments.
pub fn set_loss<S: Scalar>(
    fw: &mut Forward<S>,
    cfg: &LossConfig,
    logits: &[Var],
    targets: &[Vec<usize>],
) -> Result<(Var, Vec<Assignment>)> {
    let last = *logits
        .last()
        .ok_or_else(|| Error::Invalid("no decoder outputs".into()))?;
    let shape = fw.graph.shape(last).to_vec();
    let [batch, n_q, classes] = shape[..] else {
        return Err(Error::shape(
            "set_loss",
            format!("expected [batch, N_q, classes], got {shape:?}"),
        ));
    };
    if targets.len() != batch || targets.iter().any(|t| t.len() != n_q) {
        return Err(Error::shape(
            "set_loss",
            format!(
                "{} target rows for batch {batch} x {n_q} queries",
                targets.len()
            ),
        ));
    }
    let empty = classes - 1;
    let assign_for = |fw: &Forward<S>, v: Var| -> Result<Vec<Assignment>> {
        let mut probs = fw.graph.value(v).cast::<f64>().into_data();
        for row in probs.chunks_mut(classes) {
            crate::autodiff::softmax_in_place(row);
        }
        (0..batch)
            .map(|b| {
                let cost = build_cost_matrix(
                    &targets[b],
                    &probs[b * n_q * classes..(b + 1) * n_q * classes],
                    classes,
                )?;
                hungarian(&cost)
            })
            .collect()
    };
    let final_assign = assign_for(fw, last)?;
    let weights: Vec<S> = targets
        .iter()
        .flat_map(|t| {
            t.iter()
                .map(|&c| S::of(if c == empty { cfg.empty_weight } else { 1.0 }))
        })
        .collect();
    let weighted = weights.iter().any(|&w| w != S::one());
    let mut total: Option<Var> = None;
    for (l, &lg) in logits.iter().enumerate() {
        let is_last = l + 1 == logits.len();
        let own;
        let assign = if is_last || !cfg.aux_independent {
            &final_assign
        } else {
            own = assign_for(fw, lg)?;
            &own
        };
        let logp = fw.graph.log_softmax_last(lg)?;
        let flat: Vec<usize> = (0..batch)
            .flat_map(|b| {
                assign[b]
                    .perm
                    .iter()
                    .enumerate()
                    .map(move |(i, &j)| (b * n_q + j) * classes + targets[b][i])
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut picked = fw.graph.select(logp, &flat)?;
        if weighted {
            let w = fw
                .graph
                .constant(Tensor::new(vec![weights.len()], weights.clone())?);
            picked = fw.graph.mul(picked, w)?;
        }
        let s = fw.graph.sum(picked);
        let coef = if is_last { 1.0 } else { cfg.alpha_aux };
        let term = fw.graph.scale(s, S::of(-coef / batch as f64));
        total = Some(match total {
            Some(t) => fw.graph.add(t, term)?,
            None => term,
        });
    }
    Ok((total.unwrap(), final_assign))
}

/// `(N_act^N_p ordered label tuples, C(N_act + N_p − 1, N_p) multisets)`.
pub fn hypothesis_space(n_act: u32, n_p: u32) -> (u128, u128) {
    let ordered = (n_act as u128).pow(n_p);
    let mut multisets: u128 = 1;
    for i in 0..n_p as u128 {
        multisets = multisets * (n_act as u128 + i) / (i + 1);
    }
    (ordered, multisets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding() {
        assert_eq!(pad_targets(&[2, 5], 4, 9).unwrap(), vec![1, 4, 9, 9]);
        assert_eq!(pad_targets(&[], 3, 9).unwrap(), vec![9, 9, 9]);
        assert_eq!(pad_targets(&[1, 1, 1], 3, 9).unwrap(), vec![0, 0, 0]);
        assert!(pad_targets(&[1, 2, 3, 4], 3, 9).is_err());
    }

    #[test]
    fn worked_assignment() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = hungarian(&c).unwrap();
        assert_eq!(a.perm, vec![1, 0, 2]);
        assert_eq!(a.cost, 5.0);
    }

    #[test]
    fn diagonal_and_ties() {
        let n = 4;
        let c: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        assert_eq!(hungarian(&c).unwrap().perm, vec![0, 1, 2, 3]);
        // all-equal costs: every permutation is optimal, identity is smallest
        let c = vec![vec![1.0; 3]; 3];
        assert_eq!(hungarian(&c).unwrap().perm, vec![0, 1, 2]);
        // reversed anti-diagonal optimum is unique
        let c = vec![
            vec![1.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ];
        assert_eq!(hungarian(&c).unwrap().perm, vec![2, 1, 0]);
        // optima (0,2,1) and (1,2,0) tie at cost 1; the first is smaller
        let c = vec![
            vec![0.0, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
            vec![1.0, 1.0, 5.0],
        ];
        let a = hungarian(&c).unwrap();
        assert_eq!((a.perm, a.cost), (vec![0, 2, 1], 1.0));
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn cost_matrix_values() {
        let probs = vec![0.1; 20];
        let cost = build_cost_matrix(&[3, 9], &probs, 10).unwrap();
        for row in &cost {
            for &c in row {
                assert!((c - 10f64.ln()).abs() < 1e-12);
            }
        }
        let mut onehot = vec![0.0; 20];
        onehot[3] = 1.0;
        let cost = build_cost_matrix(&[3, 9], &onehot, 10).unwrap();
        assert_eq!(cost[0][0], 0.0);
        assert!((cost[1][0] - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_any_order_have_zero_loss() {
        let targets = vec![2, 9, 0];
        let mut probs = vec![0.0; 30];
        for (j, &c) in [0usize, 2, 9].iter().enumerate() {
            probs[j * 10 + c] = 1.0;
        }
        let (loss, a) = matching_loss(&targets, &probs, 10).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(a.perm, vec![1, 2, 0]);
    }

    #[test]
    fn multiset_reduction() {
        let (ordered, multi) = hypothesis_space(9, 5);
        assert_eq!((ordered, multi), (59_049, 1_287));
        assert_eq!((ordered as f64 / multi as f64 * 10.0).round() / 10.0, 45.9);
    }

    #[test]
    fn identical_layers_scale_by_supervision_weight() {
        use crate::params::ParamStore;
        use rand::SeedableRng;
        let store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::<f64>::randn(&[2, 3, 5], 1.0, &mut rng);
        let targets = vec![vec![1, 4, 4], vec![0, 2, 4]];
        let cfg = LossConfig::default();
        let mut fw = Forward::new(&store, true);
        let l = fw.graph.constant(logits.clone());
        let (single, _) = set_loss(&mut fw, &cfg, &[l], &targets).unwrap();
        let single = fw.graph.value(single).item();
        let layers: Vec<Var> = (0..4).map(|_| fw.graph.constant(logits.clone())).collect();
        let (deep, _) = set_loss(&mut fw, &cfg, &layers, &targets).unwrap();
        let deep = fw.graph.value(deep).item();
        assert!((deep - (1.0 + 0.25 * 3.0) * single).abs() < 1e-12);
        let no_aux = LossConfig {
            alpha_aux: 0.0,
            ..cfg
        };
        let (only_last, _) = set_loss(&mut fw, &no_aux, &layers, &targets).unwrap();
        assert!((fw.graph.value(only_last).item() - single).abs() < 1e-15);
        // batch mean of per-sample matching losses
        let mut probs = logits.data().to_vec();
        for row in probs.chunks_mut(5) {
            crate::autodiff::softmax_in_place(row);
        }
        let per: f64 = (0..2)
            .map(|b| {
                matching_loss(&targets[b], &probs[b * 15..(b + 1) * 15], 5)
                    .unwrap()
                    .0
            })
            .sum();
        assert!((single - per / 2.0).abs() < 1e-12);
    }
}
