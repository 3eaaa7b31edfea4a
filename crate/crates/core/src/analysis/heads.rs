//! Per-head diagnostics: key cosines, greedy pruning, attention maps and
//! specialization metrics on trajectories.

use nalgebra::{DMatrix, DVector};

use crate::activations::{scores, ActivationKind};
use crate::error::{Error, Result};
use crate::flow::evaluate;
use crate::latent::{sample_mc_set_in, McSampleSet, ThetaDistribution};
use crate::linalg;
use crate::rng::Domain;
use crate::state::{OrderState, Trajectory};

/// q_{hh'}/√(q_{hh} q_{h'h'}) with q = m mᵀ + r². Zero-norm heads give `None`.
pub fn head_cosine_matrix(state: &OrderState) -> DMatrix<Option<f64>> {
    let q = state.q();
    let h = q.nrows();
    let tiny = 1e-14 * q.diagonal().amax().max(f64::MIN_POSITIVE);
    DMatrix::from_fn(h, h, |i, j| {
        let (a, b) = (q[(i, i)], q[(j, j)]);
        if a <= tiny || b <= tiny {
            None
        } else {
            Some(q[(i, j)] / (a * b).sqrt())
        }
    })
}

/// Mean of the off-diagonal defined entries of a cosine matrix.
pub fn mean_off_diagonal(cos: &DMatrix<Option<f64>>) -> Option<f64> {
    let h = cos.nrows();
    let vals: Vec<f64> =
        (0..h).flat_map(|i| (0..h).filter(move |&j| j != i).map(move |j| (i, j))).filter_map(|ij| cos[ij]).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// The surviving heads as a smaller model. The residual noise of the kept
/// heads has covariance (r²)_{kept,kept}, so r' is its PSD root; the 1/H'
/// prefactor and the B-softmax normalization follow from H' = keep.len().
pub fn reduced_state(state: &OrderState, keep: &[usize]) -> OrderState {
    let mut s = state.select_heads(keep);
    let r2 = &state.r * state.r.transpose();
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| r2[(keep[i], keep[j])]);
    s.r = linalg::psd_sqrt(&sub).0;
    s
}

#[derive(Debug, Clone)]
pub struct PruneStage {
    /// Number of heads removed so far (H̃).
    pub pruned: usize,
    /// Original index of the head removed at this stage (None for the unpruned model).
    pub removed: Option<usize>,
    pub kept: Vec<usize>,
    pub loss: f64,
    pub se: f64,
    /// Output prefactor applied to the survivors, 1/(H − H̃).
    pub rescale: f64,
}

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub kind: ActivationKind,
    pub heads: usize,
    /// Stage 0 is the unpruned model.
    pub stages: Vec<PruneStage>,
}

impl PruneReport {
    pub fn removal_order(&self) -> Vec<usize> {
        self.stages.iter().filter_map(|s| s.removed).collect()
    }

    pub fn loss_at(&self, pruned: usize) -> Option<f64> {
        self.stages.get(pruned).map(|s| s.loss)
    }
}

/// Greedy pruning: at each stage remove the head whose removal gives the
/// lowest loss on `mc`, evaluating survivors with prefactor 1/(H − H̃) (and
/// H − H̃ in the B-softmax normalization). Stops after `max_removals` stages
/// or when one head is left.
pub fn prune_heads(
    state: &OrderState,
    kind: ActivationKind,
    mc: &McSampleSet,
    max_removals: Option<usize>,
) -> Result<PruneReport> {
    let h = state.heads();
    let limit = max_removals.unwrap_or(h.saturating_sub(1));
    if h <= 1 || limit >= h {
        return Err(Error::LastHead);
    }
    let base = evaluate(state, kind, mc, false)?;
    let mut kept: Vec<usize> = (0..h).collect();
    let mut stages =
        vec![PruneStage { pruned: 0, removed: None, kept: kept.clone(), loss: base.loss, se: base.loss_se, rescale: 1.0 / h as f64 }];
    for stage in 1..=limit {
        let mut best: Option<(usize, f64, f64)> = None;
        for (pos, &cand) in kept.iter().enumerate() {
            let trial: Vec<usize> = kept.iter().copied().filter(|&k| k != cand).collect();
            let ev = evaluate(&reduced_state(state, &trial), kind, mc, false)?;
            if best.is_none_or(|(_, l, _)| ev.loss < l) {
                best = Some((pos, ev.loss, ev.loss_se));
            }
        }
        let (pos, loss, se) = best.expect("at least two heads remain");
        let removed = kept.remove(pos);
        log::debug!("{kind}: pruned head {removed} at stage {stage}, loss {loss:.5}");
        stages.push(PruneStage {
            pruned: stage,
            removed: Some(removed),
            kept: kept.clone(),
            loss,
            se,
            rescale: 1.0 / kept.len() as f64,
        });
    }
    Ok(PruneReport { kind, heads: h, stages })
}

#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// H×L scores.
    pub scores: DMatrix<f64>,
    pub row_sums: DVector<f64>,
    /// 0-based position of the relevant token.
    pub epsilon: usize,
}

/// Per-head scores on `n_sequences` low-dimensional draws at `state`.
pub fn attention_maps(
    state: &OrderState,
    kind: ActivationKind,
    dist: &ThetaDistribution,
    seq_len: usize,
    n_sequences: usize,
    seed: u64,
) -> Result<Vec<AttentionMap>> {
    let (h, f) = (state.heads(), state.features());
    if f != dist.features() {
        return Err(Error::DimensionMismatch(format!("state has {f} features, distribution {}", dist.features())));
    }
    let mc = sample_mc_set_in(dist, seq_len, h, 2 * n_sequences, seed, Domain::Maps);
    let mut out = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let chi_star = DMatrix::from_row_slice(f, seq_len, mc.chi(i));
        let xi = DMatrix::from_row_slice(mc.max_heads, seq_len, mc.xi_of(i));
        let chi = &state.m * chi_star + &state.r * xi.rows(0, h);
        let field = scores(&chi, &state.b, state.v, kind)?;
        out.push(AttentionMap { scores: field.scores, row_sums: field.row_sums, epsilon: mc.epsilons[i] });
    }
    Ok(out)
}

/// Eigenvalues (descending) and eigenvectors (columns) of cov θ, with the
/// largest-magnitude entry of each vector positive.
pub fn covariance_eigenbasis(dist: &ThetaDistribution) -> (DVector<f64>, DMatrix<f64>) {
    linalg::sorted_eigen(&dist.covariance())
}

/// m expressed in the basis: H×F matrix of m_h · s_f.
pub fn eigen_components(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    m * basis
}

/// For each basis direction f, the first recorded τ at which the column norm
/// ‖(m s_f)_{h=1..H}‖ reaches `threshold`.
pub fn eigen_crossing_times(traj: &Trajectory, basis: &DMatrix<f64>, threshold: f64) -> Vec<Option<f64>> {
    (0..basis.ncols())
        .map(|f| {
            let s = basis.column(f).clone_owned();
            traj.first_time(|st| (&st.m * &s).norm() >= threshold)
        })
        .collect()
}

/// Per head: first τ at which the component of m_h along E θ reaches
/// `threshold`, and first τ at which its orthogonal part does.
pub fn phase_crossing_times(
    traj: &Trajectory,
    mean: &DVector<f64>,
    threshold: f64,
) -> Vec<(Option<f64>, Option<f64>)> {
    let heads = traj.rows.first().map(|r| r.state.heads()).unwrap_or(0);
    let unit = mean / mean.norm().max(f64::MIN_POSITIVE);
    (0..heads)
        .map(|h| {
            let along = traj.first_time(|st| st.m.row(h).transpose().dot(&unit) >= threshold);
            let ortho = traj.first_time(|st| {
                let row = st.m.row(h).transpose();
                (&row - &unit * row.dot(&unit)).norm() >= threshold
            });
            (along, ortho)
        })
        .collect()
}

/// Greedy single-linkage clustering of the rows of m: a head joins the first
/// cluster containing a head with cosine above `threshold`. Zero rows form
/// their own clusters.
pub fn cluster_heads(m: &DMatrix<f64>, threshold: f64) -> Vec<Vec<usize>> {
    let rows: Vec<DVector<f64>> = (0..m.nrows()).map(|h| m.row(h).transpose()).collect();
    let cos = |a: usize, b: usize| {
        let d = rows[a].norm() * rows[b].norm();
        if d <= f64::MIN_POSITIVE {
            f64::NAN
        } else {
            rows[a].dot(&rows[b]) / d
        }
    };
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for h in 0..rows.len() {
        match clusters.iter_mut().find(|c| c.iter().any(|&k| cos(h, k) > threshold)) {
            Some(c) => c.push(h),
            None => clusters.push(vec![h]),
        }
    }
    clusters
}

/// Per head: index of the dominant basis component and its share
/// |c_max| / ‖m_h‖ of the row norm.
pub fn dominant_components(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let comps = eigen_components(m, basis);
    (0..comps.nrows())
        .map(|h| {
            let row = comps.row(h);
            let norm = row.norm();
            let (idx, val) =
                row.iter().enumerate().fold((0, 0.0f64), |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            (idx, if norm > 0.0 { val / norm } else { 0.0 })
        })
        .collect()
}
