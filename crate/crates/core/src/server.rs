//! Server-side round logic: overlap statistics, collaborator selection, and
//! the two aggregations.
//!
//! Element-wise means sort the contributing values before summing, so every
//! aggregate is exactly invariant to client order. That makes the global
//! mean and a customized mean over "everyone" bit-identical, and keeps
//! results independent of how clients were scheduled.

use std::borrow::Borrow;
use std::collections::BTreeSet;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::{self, CriticalMask};
use crate::nn::ParameterSet;

/// Pairwise mask overlap. The diagonal is 1 and never used.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix(Array2<f64>);

impl OverlapMatrix {
    pub fn from_masks(masks: &[&CriticalMask]) -> Result<Self> {
        let n = masks.len();
        let mut m = Array2::from_elem((n, n), 1.0);
        for i in 0..n {
            for j in 0..i {
                let o = mask::overlap_ratio(masks[i], masks[j])?;
                m[[i, j]] = o;
                m[[j, i]] = o;
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::config("overlap matrix must be square"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Self(Array2::from_shape_vec((n, n), flat).expect("square")))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| self.0[[i, j]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdStats {
    pub o_avg: f64,
    pub o_max: f64,
    pub threshold: f64,
}

/// `o_avg + (t / beta) * (o_max - o_avg)` with the mean taken over all
/// ordered pairs `i != j`.
///
/// For overlaps in `[1/2, 1]` the difference `o_max - o_avg` is exact
/// (Sterbenz), so at `t == beta` the threshold equals `o_max` bit for bit.
pub fn compute_threshold(overlap: &OverlapMatrix, t: usize, beta: f64) -> Result<ThresholdStats> {
    let n = overlap.len();
    if n < 2 {
        return Err(Error::config(format!("threshold needs at least two clients, got {n}")));
    }
    if t < 1 || !(beta >= 1.0) || !beta.is_finite() {
        return Err(Error::config(format!("need t >= 1 and beta >= 1, got t={t}, beta={beta}")));
    }
    let mut values: Vec<f64> = overlap.off_diagonal().collect();
    let o_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let o_avg = sorted_mean(&mut values);
    let threshold = o_avg + (t as f64 / beta) * (o_max - o_avg);
    Ok(ThresholdStats { o_avg, o_max, threshold })
}

/// `C_i = { j != i : O[i][j] >= threshold }`.
pub fn select_collaborators(overlap: &OverlapMatrix, threshold: f64) -> Vec<BTreeSet<usize>> {
    let n = overlap.len();
    (0..n)
        .map(|i| (0..n).filter(|&j| j != i && overlap.get(i, j) >= threshold).collect())
        .collect()
}

/// The time-varying schedule for round `t`: the threshold, and collaborator
/// sets from it while `t <= beta`. Past `beta` every set is empty. The
/// threshold already exceeds `o_max` there unless all overlaps are equal, in
/// which case `>=` alone would keep everyone.
pub fn time_varying_collaborators(
    overlap: &OverlapMatrix,
    t: usize,
    beta: f64,
) -> Result<(ThresholdStats, Vec<BTreeSet<usize>>)> {
    let stats = compute_threshold(overlap, t, beta)?;
    let sets = if t as f64 > beta {
        vec![BTreeSet::new(); overlap.len()]
    } else {
        select_collaborators(overlap, stats.threshold)
    };
    Ok((stats, sets))
}

/// The `k` clients with the highest overlap to each client, ties to the
/// lowest id.
pub fn fixed_number_collaborators(overlap: &OverlapMatrix, k: usize) -> Result<Vec<BTreeSet<usize>>> {
    let n = overlap.len();
    if k < 1 || k >= n {
        return Err(Error::config(format!("collaborator count must be in [1, {}], got {k}", n.saturating_sub(1))));
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| overlap.get(i, b).total_cmp(&overlap.get(i, a)).then(a.cmp(&b)));
            others.into_iter().take(k).collect()
        })
        .collect())
}

fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Uniform element-wise mean of the selected models.
fn mean_of<M: Borrow<ParameterSet>>(models: &[M], members: &[usize]) -> Result<ParameterSet> {
    let first = models
        .get(*members.first().ok_or_else(|| Error::config("cannot average zero models"))?)
        .ok_or_else(|| Error::config("member index out of range"))?
        .borrow();
    for &m in members {
        let other = models.get(m).ok_or_else(|| Error::config(format!("member {m} out of range")))?;
        first.ensure_same_structure(other.borrow())?;
    }
    let mut out = first.clone();
    let mut scratch = Vec::with_capacity(members.len());
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        for (vi, v) in layer.values.iter_mut().enumerate() {
            scratch.clear();
            scratch.extend(members.iter().map(|&m| models[m].borrow().layers()[li].values[vi]));
            *v = sorted_mean(&mut scratch);
        }
    }
    Ok(out)
}

/// `(1/N) * sum_i w_i`.
pub fn aggregate_global<M: Borrow<ParameterSet>>(models: &[M]) -> Result<ParameterSet> {
    let all: Vec<usize> = (0..models.len()).collect();
    mean_of(models, &all)
}

/// `(1 / (|C|+1)) * sum over C and self`.
pub fn aggregate_custom<M: Borrow<ParameterSet>>(
    models: &[M],
    collaborators: &BTreeSet<usize>,
    self_id: usize,
) -> Result<ParameterSet> {
    if self_id >= models.len() {
        return Err(Error::config(format!("client {self_id} out of range")));
    }
    if collaborators.contains(&self_id) {
        return Err(Error::config(format!("client {self_id} listed as its own collaborator")));
    }
    let members: Vec<usize> = std::iter::once(self_id).chain(collaborators.iter().copied()).collect();
    mean_of(models, &members)
}

/// Everything the server produced in one round.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub round: usize,
    pub overlap: OverlapMatrix,
    /// Present when the time-varying threshold was used.
    pub stats: Option<ThresholdStats>,
    pub collaborators: Vec<BTreeSet<usize>>,
    pub global_model: ParameterSet,
    pub custom_models: Vec<ParameterSet>,
}

impl RoundPlan {
    pub fn mean_collab_size(&self) -> f64 {
        let n = self.collaborators.len().max(1);
        self.collaborators.iter().map(BTreeSet::len).sum::<usize>() as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerKind};

    fn three() -> OverlapMatrix {
        OverlapMatrix::from_rows(vec![vec![1.0, 0.9, 0.6], vec![0.9, 1.0, 0.7], vec![0.6, 0.7, 1.0]]).unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn flat(vals: Vec<f64>) -> ParameterSet {
        ParameterSet::new(vec![Layer::new("w", vec![vals.len()], LayerKind::Trainable, vals).unwrap()]).unwrap()
    }

    #[test]
    fn threshold_arithmetic() {
        // o_avg = (0.9+0.6+0.7)*2/6, o_max = 0.9.
        let s = compute_threshold(&three(), 2, 2.0).unwrap();
        assert_eq!(s.threshold, s.o_max);
        let flat = OverlapMatrix::from_rows(vec![vec![1.0, 0.8], vec![0.8, 1.0]]).unwrap();
        for t in 1..10 {
            assert_eq!(compute_threshold(&flat, t, 3.0).unwrap().threshold, 0.8);
        }
        let lone = OverlapMatrix::from_rows(vec![vec![1.0]]).unwrap();
        assert!(matches!(compute_threshold(&lone, 1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn threshold_midpoint() {
        // Four clients whose off-diagonal overlaps average 0.6 with max 0.9.
        let rows = vec![
            vec![1.0, 0.9, 0.5, 0.5],
            vec![0.9, 1.0, 0.5, 0.6],
            vec![0.5, 0.5, 1.0, 0.6],
            vec![0.5, 0.6, 0.6, 1.0],
        ];
        let s = compute_threshold(&OverlapMatrix::from_rows(rows).unwrap(), 50, 100.0).unwrap();
        assert!((s.o_avg - 0.6).abs() < 1e-15);
        assert_eq!(s.o_max, 0.9);
        assert!((s.threshold - 0.75).abs() < 1e-15);
    }

    #[test]
    fn collaborators_by_threshold() {
        let c = select_collaborators(&three(), 0.7);
        assert_eq!(c, vec![set(&[1]), set(&[0, 2]), set(&[1])]);
        assert_eq!(select_collaborators(&three(), 0.6), vec![set(&[1, 2]), set(&[0, 2]), set(&[0, 1])]);
        assert!(select_collaborators(&three(), 0.91).iter().all(BTreeSet::is_empty));
    }

    #[test]
    fn past_beta_nobody_collaborates() {
        let equal = OverlapMatrix::from_rows(vec![vec![1.0; 3]; 3]).unwrap();
        let (_, at_beta) = time_varying_collaborators(&equal, 2, 2.0).unwrap();
        assert!(at_beta.iter().all(|c| c.len() == 2));
        let (s, after) = time_varying_collaborators(&equal, 3, 2.0).unwrap();
        assert_eq!(s.threshold, 1.0);
        assert!(after.iter().all(BTreeSet::is_empty));
        let (s, after) = time_varying_collaborators(&three(), 3, 2.0).unwrap();
        assert!(s.threshold > s.o_max);
        assert_eq!(after, select_collaborators(&three(), s.threshold));
    }

    #[test]
    fn fixed_number_selection() {
        assert_eq!(fixed_number_collaborators(&three(), 1).unwrap(), vec![set(&[1]), set(&[0]), set(&[1])]);
        assert_eq!(fixed_number_collaborators(&three(), 2).unwrap(), vec![set(&[1, 2]), set(&[0, 2]), set(&[0, 1])]);
        assert!(fixed_number_collaborators(&three(), 0).is_err());
        assert!(fixed_number_collaborators(&three(), 3).is_err());
    }

    #[test]
    fn fixed_number_need_not_be_symmetric() {
        // 2's best partner is 1, but 1 prefers 0.
        let c = fixed_number_collaborators(&three(), 1).unwrap();
        assert!(c[2].contains(&1) && !c[1].contains(&2));
    }

    #[test]
    fn aggregation_examples() {
        let a = flat(vec![0.0; 3]);
        let b = flat(vec![2.0; 3]);
        assert_eq!(aggregate_global(&[&a]).unwrap(), a);
        assert_eq!(aggregate_global(&[&a, &b]).unwrap(), flat(vec![1.0; 3]));
        assert_eq!(aggregate_global(&[&b, &a]).unwrap(), flat(vec![1.0; 3]));

        let ms = [flat(vec![0.0; 2]), flat(vec![3.0; 2]), flat(vec![6.0; 2])];
        assert_eq!(aggregate_custom(&ms, &set(&[1]), 0).unwrap(), flat(vec![1.5; 2]));
        assert_eq!(aggregate_custom(&ms, &set(&[]), 2).unwrap(), ms[2]);
        assert_eq!(aggregate_custom(&ms, &set(&[0, 2]), 1).unwrap(), aggregate_global(&ms).unwrap());
        assert!(aggregate_custom(&ms, &set(&[1]), 1).is_err());
    }

    #[test]
    fn aggregation_rejects_structure_mismatch() {
        let a = flat(vec![0.0; 2]);
        let b = flat(vec![0.0; 3]);
        assert!(matches!(aggregate_global(&[&a, &b]), Err(Error::Structure(_))));
    }
}
