//! Finite-dimensional multi-head attention: prediction, empirical loss,
//! online SGD and order-parameter extraction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::activations::{scores_into, vjp_into, ActivationKind};
use crate::error::{Error, Result};
use crate::latent::{sample_sequences, SequenceBatch, SpikeEnsemble, ThetaDistribution};
use crate::linalg;
use crate::rng::{self, Domain, LabRng};
use crate::state::{OrderState, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// H×D, row h is the key k_h.
    pub keys: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub scale: f64,
    pub kind: ActivationKind,
}

impl AttentionParams {
    /// Keys with i.i.d. N(0, η²/D) entries, zero biases, unit scale.
    pub fn init(heads: usize, dim: usize, eta: f64, kind: ActivationKind, rng: &mut LabRng) -> Self {
        let s = eta / (dim as f64).sqrt();
        AttentionParams {
            keys: DMatrix::from_fn(heads, dim, |_, _| s * rng.sample::<f64, _>(StandardNormal)),
            biases: DVector::zeros(heads),
            scale: 1.0,
            kind,
        }
    }

    pub fn heads(&self) -> usize {
        self.keys.nrows()
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradients {
    pub keys: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub scale: f64,
}

fn check_tokens(params: &AttentionParams, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != params.dim() {
        return Err(Error::DimensionMismatch(format!("tokens have dimension {}, keys {}", x.ncols(), params.dim())));
    }
    Ok(())
}

/// Row-major H×L pre-activations χ_{hℓ} = k_h·X_ℓ.
fn preactivations(params: &AttentionParams, x: &DMatrix<f64>) -> Vec<f64> {
    let c = &params.keys * x.transpose(); // H×L
    c.transpose().as_slice().to_vec()
}

/// ŷ = (1/H) Σ_h σ(Xk, b, v; h)ᵀ X.
pub fn predict(params: &AttentionParams, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_tokens(params, x)?;
    let (h, l) = (params.heads(), x.nrows());
    let chi = preactivations(params, x);
    if chi.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("pre-activations".into()));
    }
    let mut s = vec![0.0; h * l];
    let mut sink = vec![0.0; h];
    scores_into(params.kind, &chi, h, l, params.biases.as_slice(), params.scale, &mut s, &mut sink);
    let agg = DVector::from_fn(l, |ll, _| (0..h).map(|hh| s[hh * l + ll]).sum::<f64>() / h as f64);
    Ok(x.transpose() * agg)
}

/// (1/N_b) Σ_μ (1/D) ‖y^μ − ŷ(X^μ)‖².
pub fn empirical_loss(params: &AttentionParams, batch: &SequenceBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let d = params.dim() as f64;
    let mut total = 0.0;
    for (mu, x) in batch.tokens.iter().enumerate() {
        let yhat = predict(params, x)?;
        let diff = batch.labels.row(mu).transpose() - yhat;
        total += diff.norm_squared() / d;
    }
    Ok(total / batch.len() as f64)
}

/// Per-sample loss and score-space gradient given the token Gram matrix.
/// Writes ∂loss/∂σ into `g` and returns (1/D) wᵀ G w with w = s̄ − e_ε.
fn gram_loss(gram: &DMatrix<f64>, s: &[f64], h: usize, l: usize, eps: usize, dim: f64, g: &mut [f64]) -> f64 {
    let w = DVector::from_fn(l, |ll, _| {
        (0..h).map(|hh| s[hh * l + ll]).sum::<f64>() / h as f64 - if ll == eps { 1.0 } else { 0.0 }
    });
    let gw = gram * &w;
    for ll in 0..l {
        let gl = 2.0 * gw[ll] / (dim * h as f64);
        for hh in 0..h {
            g[hh * l + ll] = gl;
        }
    }
    w.dot(&gw) / dim
}

/// Exact gradient of [`empirical_loss`] with respect to keys, biases and
/// scale. Components the kind ignores are zero.
pub fn gradients(params: &AttentionParams, batch: &SequenceBatch) -> Result<(f64, AttentionGradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (h, dim) = (params.heads(), params.dim());
    let mut gk = DMatrix::zeros(h, dim);
    let mut gb = DVector::zeros(h);
    let mut gv = 0.0;
    let mut loss = 0.0;
    for (mu, x) in batch.tokens.iter().enumerate() {
        check_tokens(params, x)?;
        let l = x.nrows();
        let chi = preactivations(params, x);
        let mut s = vec![0.0; h * l];
        let mut sink = vec![0.0; h];
        scores_into(params.kind, &chi, h, l, params.biases.as_slice(), params.scale, &mut s, &mut sink);
        let gram = x * x.transpose();
        let mut g = vec![0.0; h * l];
        loss += gram_loss(&gram, &s, h, l, batch.epsilons[mu], dim as f64, &mut g);
        let mut dchi = vec![0.0; h * l];
        let mut db = vec![0.0; h];
        gv += vjp_into(params.kind, &s, &sink, h, l, params.scale, &g, &mut dchi, &mut db);
        for hh in 0..h {
            gb[hh] += db[hh];
        }
        let dchi_m = DMatrix::from_row_slice(h, l, &dchi);
        gk += dchi_m * x;
    }
    let n = batch.len() as f64;
    let mut grads = AttentionGradients { keys: gk / n, biases: gb / n, scale: gv / n };
    if !params.kind.uses_bias() {
        grads.biases.fill(0.0);
    }
    if !params.kind.uses_scale() {
        grads.scale = 0.0;
    }
    Ok((loss / n, grads))
}

fn apply(params: &AttentionParams, g: &AttentionGradients, lr: f64) -> AttentionParams {
    let mut next = params.clone();
    next.keys -= &g.keys * lr;
    if params.kind.uses_bias() {
        next.biases -= &g.biases * lr;
    }
    if params.kind.uses_scale() {
        next.scale -= g.scale * lr;
    }
    next
}

/// One SGD update with the exact gradient of the batch loss.
pub fn sgd_step(params: &AttentionParams, batch: &SequenceBatch, lr: f64) -> Result<AttentionParams> {
    let (_, g) = gradients(params, batch)?;
    Ok(apply(params, &g, lr))
}

/// m = k k*ᵀ, q = k kᵀ and r = (q − m p⁻¹ mᵀ)^{1/2} with the finite-D gram p.
pub fn extract_order_state(params: &AttentionParams, spikes: &SpikeEnsemble) -> Result<OrderState> {
    if spikes.dim() != params.dim() {
        return Err(Error::DimensionMismatch("spikes and keys live in different dimensions".into()));
    }
    let m = &params.keys * spikes.spikes.transpose();
    let q = &params.keys * params.keys.transpose();
    let p_inv = spikes.gram.clone().try_inverse().ok_or(Error::SingularGram)?;
    if !p_inv.iter().all(|x| x.is_finite()) {
        return Err(Error::SingularGram);
    }
    let resid = &q - &m * p_inv * m.transpose();
    let (r, _) = linalg::psd_sqrt(&resid);
    Ok(OrderState { m, r, b: params.biases.clone(), v: params.scale, loss: None })
}

/// How SGD batches are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgdMode {
    /// Materialize every N_b×L×D batch and apply the exact gradient.
    Dense,
    /// Sample only what the update depends on: token coordinates inside
    /// span{k*, k} exactly, the complementary token Gram matrix exactly
    /// (Bartlett-decomposed Wishart), and the complementary part of the
    /// batch gradient as a Gaussian with its exact conditional covariance.
    Projected,
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub record_every: usize,
    pub mode: SgdMode,
}

impl SgdConfig {
    /// γ = 0.02 and N_b = D.
    pub fn defaults(dim: usize, steps: usize, seed: u64) -> Self {
        SgdConfig { learning_rate: 0.02, batch_size: dim, steps, seed, record_every: 50, mode: SgdMode::Projected }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Orthonormal rows spanning the given rows (modified Gram–Schmidt, twice).
fn orthonormal_rows(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let d = rows.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..rows.nrows() {
        let mut v = rows.row(i).transpose();
        let norm0 = v.norm();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-10 * norm0.max(1e-300) && n > 0.0 {
            basis.push(v / n);
        }
    }
    let mut out = DMatrix::zeros(basis.len(), d);
    for (i, q) in basis.iter().enumerate() {
        out.set_row(i, &q.transpose());
    }
    out
}

const PROJ_CHUNK: usize = 1024;

struct ProjectedPartial {
    loss: f64,
    /// H×n in-span key gradient, summed.
    span: DMatrix<f64>,
    /// Σ_μ B^μ B^μᵀ.
    comp_cov: DMatrix<f64>,
    gb: DVector<f64>,
    gv: f64,
}

/// One projected SGD step; returns the batch loss and the updated params.
fn projected_step(
    params: &AttentionParams,
    spikes: &SpikeEnsemble,
    dist: &ThetaDistribution,
    seq_len: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    step: u64,
    update: bool,
) -> Result<(f64, AttentionParams)> {
    let (h, dim, f, l) = (params.heads(), params.dim(), spikes.features(), seq_len);
    let mut stacked = DMatrix::zeros(f + h, dim);
    stacked.rows_mut(0, f).copy_from(&spikes.spikes);
    stacked.rows_mut(f, h).copy_from(&params.keys);
    let q = orthonormal_rows(&stacked);
    let n = q.nrows();
    if n >= dim {
        return Err(Error::InvalidConfig(format!("projected SGD needs D > F + H, got D = {dim}")));
    }
    let kc = &params.keys * q.transpose(); // H×n
    let ks = &spikes.spikes * q.transpose(); // F×n
    let comp_dim = dim - n;
    let chis: Vec<ChiSquared<f64>> =
        (0..l).map(|i| ChiSquared::new((comp_dim - i) as f64).expect("positive degrees of freedom")).collect();
    let chunks = batch_size.div_ceil(PROJ_CHUNK);
    let chunks_per_step = (batch_size.div_ceil(PROJ_CHUNK) as u64).max(1);
    let parts: Vec<ProjectedPartial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, Domain::SgdBatch, step * chunks_per_step + c as u64);
            let mut acc = ProjectedPartial {
                loss: 0.0,
                span: DMatrix::zeros(h, n),
                comp_cov: DMatrix::zeros(h, h),
                gb: DVector::zeros(h),
                gv: 0.0,
            };
            let mut theta = vec![0.0; f];
            let mut s = vec![0.0; h * l];
            let mut sink = vec![0.0; h];
            let mut g = vec![0.0; h * l];
            let mut dchi = vec![0.0; h * l];
            let mut db = vec![0.0; h];
            for _ in c * PROJ_CHUNK..((c + 1) * PROJ_CHUNK).min(batch_size) {
                let eps = r.random_range(0..l);
                dist.sample_into(&mut r, &mut theta);
                // In-span token coordinates, L×n.
                let mut x = DMatrix::from_fn(l, n, |_, _| r.sample::<f64, _>(StandardNormal));
                for ff in 0..f {
                    for j in 0..n {
                        x[(eps, j)] += theta[ff] * ks[(ff, j)];
                    }
                }
                // Complement Gram W = T Tᵀ, Bartlett factor T.
                let mut t = DMatrix::zeros(l, l);
                for i in 0..l {
                    t[(i, i)] = chis[i].sample(&mut r).sqrt();
                    for j in 0..i {
                        t[(i, j)] = r.sample::<f64, _>(StandardNormal);
                    }
                }
                let chi_m = &kc * x.transpose(); // H×L
                let chi: Vec<f64> = chi_m.transpose().as_slice().to_vec();
                scores_into(params.kind, &chi, h, l, params.biases.as_slice(), params.scale, &mut s, &mut sink);
                let gram = &x * x.transpose() + &t * t.transpose();
                acc.loss += gram_loss(&gram, &s, h, l, eps, dim as f64, &mut g);
                acc.gv += vjp_into(params.kind, &s, &sink, h, l, params.scale, &g, &mut dchi, &mut db);
                for hh in 0..h {
                    acc.gb[hh] += db[hh];
                }
                let dm = DMatrix::from_row_slice(h, l, &dchi);
                acc.span += &dm * &x;
                let bmat = &dm * &t;
                acc.comp_cov += &bmat * bmat.transpose();
            }
            acc
        })
        .collect();
    let mut loss = 0.0;
    let mut span = DMatrix::zeros(h, n);
    let mut comp_cov = DMatrix::zeros(h, h);
    let mut gb = DVector::zeros(h);
    let mut gv = 0.0;
    for p in &parts {
        loss += p.loss;
        span += &p.span;
        comp_cov += &p.comp_cov;
        gb += &p.gb;
        gv += p.gv;
    }
    let nb = batch_size as f64;
    loss /= nb;
    if !update {
        return Ok((loss, params.clone()));
    }
    // Complement part: Σ_μ B^μ O^μ with Haar frames O^μ, replaced by a
    // Gaussian H×(D−n) matrix whose columns have covariance Σ BBᵀ/(D−n).
    let (c_root, _) = linalg::psd_sqrt(&(comp_cov / comp_dim as f64));
    let mut r = rng::stream(seed, Domain::SgdBatch, (1u64 << 47) | step);
    let z = DMatrix::from_fn(h, dim, |_, _| r.sample::<f64, _>(StandardNormal));
    let z_perp = &z - (&z * q.transpose()) * &q;
    let grad_keys = (span * &q + c_root * z_perp) / nb;
    let grads = AttentionGradients { keys: grad_keys, biases: gb / nb, scale: gv / nb };
    Ok((loss, apply(params, &grads, lr)))
}

fn batch_loss_and_step(
    params: &AttentionParams,
    spikes: &SpikeEnsemble,
    dist: &ThetaDistribution,
    seq_len: usize,
    config: &SgdConfig,
    step: usize,
    update: bool,
) -> Result<(f64, AttentionParams)> {
    match config.mode {
        SgdMode::Dense => {
            let mut r = rng::stream(config.seed, Domain::SgdBatch, step as u64);
            let batch = sample_sequences(spikes, dist, seq_len, config.batch_size, &mut r);
            let (loss, g) = gradients(params, &batch)?;
            let next = if update { apply(params, &g, config.learning_rate) } else { params.clone() };
            Ok((loss, next))
        }
        SgdMode::Projected => projected_step(
            params,
            spikes,
            dist,
            seq_len,
            config.batch_size,
            config.learning_rate,
            config.seed,
            step as u64,
            update,
        ),
    }
}

/// Online SGD with a fresh batch per step. Records the order parameters
/// (with that step's batch loss) every `record_every` steps at τ = γt.
pub fn train(
    params: &AttentionParams,
    spikes: &SpikeEnsemble,
    dist: &ThetaDistribution,
    seq_len: usize,
    config: &SgdConfig,
) -> Result<(AttentionParams, Trajectory)> {
    config.validate()?;
    let mut traj = Trajectory::default();
    let mut current = params.clone();
    for t in 0..=config.steps {
        let last = t == config.steps;
        let record = t % config.record_every == 0 || last;
        if last && !record {
            break;
        }
        let (loss, next) = batch_loss_and_step(&current, spikes, dist, seq_len, config, t, !last)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        if record {
            let mut st = extract_order_state(&current, spikes)?;
            st.loss = Some(loss);
            traj.push(t as f64 * config.learning_rate, st);
        }
        current = next;
    }
    Ok((current, traj))
}
