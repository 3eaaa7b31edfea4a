//! Bayes posterior over the relevant token, the Bayes risk, and the
//! B-softmax parameters that realize the Bayes estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::activations::ActivationKind;
use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::flow;
use crate::latent::{sample_mc_set, McSampleSet, SpikeEnsemble, ThetaDistribution, CHUNK};
use crate::state::OrderState;

#[derive(Debug, Clone, PartialEq)]
pub struct BayesPosterior {
    pub probabilities: DVector<f64>,
}

fn softmax_in_place(w: &mut [f64]) {
    let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in w.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    w.iter_mut().for_each(|x| *x /= s);
}

/// Log-weights log ∫ exp(θᵀu − ‖θ‖²/2) dP(θ) up to a constant shared by all
/// tokens, for u given as an F×L column-per-token slice (index f·L + ℓ).
enum Prior {
    Atoms { atoms: Vec<Vec<f64>>, log_w: Vec<f64> },
    Gaussian { half_gain: Vec<f64> },
}

impl Prior {
    fn new(dist: &ThetaDistribution) -> Self {
        match dist.support() {
            Some(sup) => Prior::Atoms {
                log_w: sup.iter().map(|(a, p)| p.ln() - 0.5 * a.norm_squared()).collect(),
                atoms: sup.into_iter().map(|(a, _)| a.iter().cloned().collect()).collect(),
            },
            None => Prior::Gaussian {
                // ∫ e^{θu − θ²/2} N(θ; 0, ν) dθ = (1+ν)^{-1/2} exp(ν u² / (2(1+ν))).
                half_gain: dist.gaussian_variances().expect("gaussian kind").iter().map(|nu| 0.5 * nu / (1.0 + nu)).collect(),
            },
        }
    }

    fn posterior_into(&self, u: &[f64], f: usize, l: usize, out: &mut [f64]) {
        match self {
            Prior::Atoms { atoms, log_w } => {
                for (ll, o) in out.iter_mut().enumerate().take(l) {
                    let mut mx = f64::NEG_INFINITY;
                    let mut terms = [0.0f64; 64];
                    let mut big = Vec::new();
                    let t: &mut [f64] = if atoms.len() <= 64 {
                        &mut terms[..atoms.len()]
                    } else {
                        big.resize(atoms.len(), 0.0);
                        &mut big
                    };
                    for (k, a) in atoms.iter().enumerate() {
                        let dot: f64 = (0..f).map(|ff| a[ff] * u[ff * l + ll]).sum();
                        t[k] = log_w[k] + dot;
                        mx = mx.max(t[k]);
                    }
                    *o = mx + t.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                }
            }
            Prior::Gaussian { half_gain } => {
                for (ll, o) in out.iter_mut().enumerate().take(l) {
                    *o = (0..f).map(|ff| half_gain[ff] * u[ff * l + ll].powi(2)).sum();
                }
            }
        }
        softmax_in_place(&mut out[..l]);
    }
}

/// P(ε = ℓ | u) ∝ ∫ exp(θᵀu_{:ℓ} − ‖θ‖²/2) dP(θ), for u = spike projections
/// of the tokens (F×L).
pub fn bayes_posterior_lowdim(u: &DMatrix<f64>, dist: &ThetaDistribution) -> Result<BayesPosterior> {
    let (f, l) = u.shape();
    if f != dist.features() {
        return Err(Error::DimensionMismatch(format!("u has {f} rows, distribution has {} features", dist.features())));
    }
    let flat: Vec<f64> = u.transpose().as_slice().to_vec();
    let mut out = vec![0.0; l];
    Prior::new(dist).posterior_into(&flat, f, l, &mut out);
    Ok(BayesPosterior { probabilities: DVector::from_vec(out) })
}

/// Per-draw Bayes losses Σ_ℓ (δ_{ℓε} − P(ε=ℓ|χ*))².
pub fn bayes_losses(dist: &ThetaDistribution, mc: &McSampleSet) -> Result<Vec<f64>> {
    if mc.features != dist.features() {
        return Err(Error::DimensionMismatch("sample set and distribution disagree on F".into()));
    }
    let prior = Prior::new(dist);
    let (f, l) = (mc.features, mc.seq_len);
    let mut out = vec![0.0; mc.n];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, dst)| {
        let mut post = vec![0.0; l];
        for (j, d) in dst.iter_mut().enumerate() {
            let i = c * CHUNK + j;
            prior.posterior_into(mc.chi(i), f, l, &mut post);
            let eps = mc.epsilons[i];
            *d = post.iter().enumerate().map(|(ll, p)| (if ll == eps { 1.0 } else { 0.0 } - p).powi(2)).sum();
        }
    });
    Ok(out)
}

pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo Bayes risk over `n_mc` independent draws, with its standard error.
pub fn bayes_risk(dist: &ThetaDistribution, seq_len: usize, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    let mc = sample_mc_set(dist, seq_len, 0, 2 * n_mc, seed);
    Ok(mean_and_se(&bayes_losses(dist, &mc)?))
}

fn optimal_heads(dist: &ThetaDistribution) -> Result<(Vec<(DVector<f64>, f64)>, DVector<f64>)> {
    let sup = dist.support().ok_or(Error::ContinuousSupport("optimal B-softmax parameters"))?;
    let raw: Vec<f64> = sup.iter().map(|(a, p)| p.ln() - 0.5 * a.norm_squared()).collect();
    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let b = DVector::from_iterator(raw.len(), raw.iter().map(|x| x - mx));
    Ok((sup, b))
}

/// One B-softmax head per atom θ^h: k_h = Σ_f θ^h_f k*_f and
/// b_h = log P(θ^h) − ‖θ^h‖²/2, shifted so that max_h b_h = 0.
pub fn optimal_bsoftmax_params(dist: &ThetaDistribution, spikes: &SpikeEnsemble) -> Result<AttentionParams> {
    let (sup, b) = optimal_heads(dist)?;
    let atoms = DMatrix::from_fn(sup.len(), dist.features(), |h, f| sup[h].0[f]);
    Ok(AttentionParams { keys: atoms * &spikes.spikes, biases: b, scale: 1.0, kind: ActivationKind::BSoftmax })
}

/// The order parameters of [`optimal_bsoftmax_params`] in the large-D limit:
/// m = atom matrix, r = 0.
pub fn optimal_bsoftmax_state(dist: &ThetaDistribution) -> Result<OrderState> {
    let (sup, b) = optimal_heads(dist)?;
    let h = sup.len();
    Ok(OrderState {
        m: DMatrix::from_fn(h, dist.features(), |i, f| sup[i].0[f]),
        r: DMatrix::zeros(h, h),
        b,
        v: 1.0,
        loss: None,
    })
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub model_loss: f64,
    pub bayes_risk: f64,
    pub bayes_se: f64,
    /// Standard error of the paired per-draw difference.
    pub diff_se: f64,
    /// (model_loss − bayes_risk) / bayes_se.
    pub z_score: f64,
}

/// Compares a model state against the Bayes risk on shared draws.
pub fn compare_with_bayes(
    state: &OrderState,
    kind: ActivationKind,
    dist: &ThetaDistribution,
    seq_len: usize,
    n_mc: usize,
    seed: u64,
) -> Result<OptimalityReport> {
    let mc = sample_mc_set(dist, seq_len, state.heads(), 2 * n_mc, seed);
    let model = flow::per_sample_losses(state, kind, &mc)?;
    let bayes = bayes_losses(dist, &mc)?;
    let (model_loss, _) = mean_and_se(&model);
    let (bayes_risk, bayes_se) = mean_and_se(&bayes);
    let diffs: Vec<f64> = model.iter().zip(&bayes).map(|(a, b)| a - b).collect();
    let (_, diff_se) = mean_and_se(&diffs);
    Ok(OptimalityReport { model_loss, bayes_risk, bayes_se, diff_se, z_score: (model_loss - bayes_risk) / bayes_se })
}

/// B-softmax at the optimal parameters against the Bayes risk.
pub fn verify_optimality(dist: &ThetaDistribution, seq_len: usize, n_mc: usize, seed: u64) -> Result<OptimalityReport> {
    let state = optimal_bsoftmax_state(dist)?;
    compare_with_bayes(&state, ActivationKind::BSoftmax, dist, seq_len, n_mc, seed)
}
