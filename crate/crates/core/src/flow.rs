//! Population loss in order-parameter space, its exact Monte-Carlo gradient
//! and the Euler-discretized gradient flow.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::activations::{scores_into, vjp_into, ActivationKind};
use crate::error::{Error, Result};
use crate::latent::{sample_mc_set_in, McSampleSet, ThetaDistribution, CHUNK};
use crate::linalg;
use crate::rng::{self, Domain};
use crate::state::{OrderGradients, OrderState, Trajectory};

/// Loss estimate with its CLT standard error, and optionally the gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub loss_se: f64,
    pub grad: Option<OrderGradients>,
    /// Per-entry standard error of the m-gradient.
    pub grad_m_se: Option<DMatrix<f64>>,
}

struct Ctx<'a> {
    kind: ActivationKind,
    h: usize,
    f: usize,
    l: usize,
    m: Vec<f64>,
    r: Vec<f64>,
    r_zero: bool,
    b: &'a [f64],
    v: f64,
    mc: &'a McSampleSet,
}

struct Scratch {
    /// m χ* and r ξ for the current draw, H×L.
    sig: Vec<f64>,
    noise: Vec<f64>,
    chi: Vec<f64>,
    s: Vec<f64>,
    sink: Vec<f64>,
    g: Vec<f64>,
    /// Sum and difference of ∂/∂χ over the ±ξ pair.
    dsum: Vec<f64>,
    ddiff: Vec<f64>,
    dchi: Vec<f64>,
    db: Vec<f64>,
}

impl Scratch {
    fn new(h: usize, l: usize) -> Self {
        let z = || vec![0.0; h * l];
        Scratch {
            sig: z(),
            noise: z(),
            chi: z(),
            s: z(),
            sink: vec![0.0; h],
            g: z(),
            dsum: z(),
            ddiff: z(),
            dchi: z(),
            db: vec![0.0; h],
        }
    }
}

#[derive(Clone)]
struct Partial {
    loss: f64,
    loss_sq: f64,
    gm: Vec<f64>,
    gm_sq: Vec<f64>,
    gr: Vec<f64>,
    gb: Vec<f64>,
    gv: f64,
}

impl Partial {
    fn new(h: usize, f: usize) -> Self {
        Partial { loss: 0.0, loss_sq: 0.0, gm: vec![0.0; h * f], gm_sq: vec![0.0; h * f], gr: vec![0.0; h * h], gb: vec![0.0; h], gv: 0.0 }
    }

    fn add(&mut self, o: &Partial) {
        self.loss += o.loss;
        self.loss_sq += o.loss_sq;
        self.gv += o.gv;
        for (a, b) in self.gm.iter_mut().zip(&o.gm) {
            *a += b;
        }
        for (a, b) in self.gm_sq.iter_mut().zip(&o.gm_sq) {
            *a += b;
        }
        for (a, b) in self.gr.iter_mut().zip(&o.gr) {
            *a += b;
        }
        for (a, b) in self.gb.iter_mut().zip(&o.gb) {
            *a += b;
        }
    }
}

impl<'a> Ctx<'a> {
    fn new(state: &'a OrderState, kind: ActivationKind, mc: &'a McSampleSet) -> Result<Self> {
        let (h, f) = (state.heads(), state.features());
        if f != mc.features {
            return Err(Error::DimensionMismatch(format!("state has {f} features, samples have {}", mc.features)));
        }
        if h > mc.max_heads {
            return Err(Error::DimensionMismatch(format!("state has {h} heads, samples support {}", mc.max_heads)));
        }
        if state.r.shape() != (h, h) || state.b.len() != h {
            return Err(Error::DimensionMismatch("r must be H×H and b of length H".into()));
        }
        if h == 0 || mc.n == 0 {
            return Err(Error::Empty("heads or samples"));
        }
        let m = (0..h * f).map(|i| state.m[(i / f, i % f)]).collect();
        let r: Vec<f64> = (0..h * h).map(|i| state.r[(i / h, i % h)]).collect();
        let r_zero = r.iter().all(|&x| x == 0.0);
        Ok(Ctx { kind, h, f, l: mc.seq_len, m, r, r_zero, b: state.b.as_slice(), v: state.v, mc })
    }

    /// Fills `w.sig` = m χ* and `w.noise` = r ξ for draw i.
    #[inline]
    fn preactivations(&self, i: usize, w: &mut Scratch) {
        let (h, f, l) = (self.h, self.f, self.l);
        let chi_star = self.mc.chi(i);
        let xi = self.mc.xi_of(i);
        for hh in 0..h {
            let out = &mut w.sig[hh * l..(hh + 1) * l];
            out.iter_mut().for_each(|x| *x = 0.0);
            for ff in 0..f {
                let c = self.m[hh * f + ff];
                let src = &chi_star[ff * l..(ff + 1) * l];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
            let out = &mut w.noise[hh * l..(hh + 1) * l];
            out.iter_mut().for_each(|x| *x = 0.0);
            if self.r_zero {
                continue;
            }
            for hp in 0..h {
                let c = self.r[hh * h + hp];
                let src = &xi[hp * l..(hp + 1) * l];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        }
    }

    /// Scores and loss at χ = sig + sign·noise; leaves ∂loss/∂σ in `w.g`.
    #[inline]
    fn forward(&self, i: usize, sign: f64, w: &mut Scratch) -> f64 {
        let (h, l) = (self.h, self.l);
        for k in 0..h * l {
            w.chi[k] = w.sig[k] + sign * w.noise[k];
        }
        scores_into(self.kind, &w.chi, h, l, self.b, self.v, &mut w.s, &mut w.sink);
        let eps = self.mc.epsilons[i];
        let inv_h = 1.0 / h as f64;
        let mut loss = 0.0;
        for ll in 0..l {
            let mut agg = 0.0;
            for hh in 0..h {
                agg += w.s[hh * l + ll];
            }
            let e = agg * inv_h - if ll == eps { 1.0 } else { 0.0 };
            loss += e * e;
            // ∂loss/∂σ_{hℓ} = 2 e_ℓ / H for every head.
            let gl = 2.0 * e * inv_h;
            for hh in 0..h {
                w.g[hh * l + ll] = gl;
            }
        }
        loss
    }

    /// Loss of draw i averaged over ξ and −ξ; with `acc` also accumulates
    /// its gradient.
    #[inline]
    fn draw(&self, i: usize, w: &mut Scratch, acc: Option<&mut Partial>) -> f64 {
        let (h, f, l) = (self.h, self.f, self.l);
        self.preactivations(i, w);
        let Some(acc) = acc else {
            if self.r_zero {
                return self.forward(i, 1.0, w);
            }
            return 0.5 * (self.forward(i, 1.0, w) + self.forward(i, -1.0, w));
        };
        if self.r_zero {
            // Both members of the pair coincide.
            let loss = self.forward(i, 1.0, w);
            let dv = vjp_into(self.kind, &w.s, &w.sink, h, l, self.v, &w.g, &mut w.dchi, &mut w.db);
            acc.gv += dv;
            for hh in 0..h {
                acc.gb[hh] += w.db[hh];
            }
            let chi_star = self.mc.chi(i);
            for hh in 0..h {
                let d = &w.dchi[hh * l..(hh + 1) * l];
                for ff in 0..f {
                    let src = &chi_star[ff * l..(ff + 1) * l];
                    let g = d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    acc.gm[hh * f + ff] += g;
                    acc.gm_sq[hh * f + ff] += g * g;
                }
            }
            return loss;
        }
        let mut loss = 0.0;
        for (sign, first) in [(1.0, true), (-1.0, false)] {
            loss += 0.5 * self.forward(i, sign, w);
            let dv = vjp_into(self.kind, &w.s, &w.sink, h, l, self.v, &w.g, &mut w.dchi, &mut w.db);
            acc.gv += 0.5 * dv;
            for hh in 0..h {
                acc.gb[hh] += 0.5 * w.db[hh];
            }
            if first {
                w.dsum.copy_from_slice(&w.dchi);
                w.ddiff.copy_from_slice(&w.dchi);
            } else {
                for k in 0..h * l {
                    w.dsum[k] += w.dchi[k];
                    w.ddiff[k] -= w.dchi[k];
                }
            }
        }
        let chi_star = self.mc.chi(i);
        let xi = self.mc.xi_of(i);
        for hh in 0..h {
            let d = &w.dsum[hh * l..(hh + 1) * l];
            for ff in 0..f {
                let src = &chi_star[ff * l..(ff + 1) * l];
                let g = 0.5 * d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                acc.gm[hh * f + ff] += g;
                acc.gm_sq[hh * f + ff] += g * g;
            }
            let d = &w.ddiff[hh * l..(hh + 1) * l];
            for hp in 0..h {
                let src = &xi[hp * l..(hp + 1) * l];
                acc.gr[hh * h + hp] += 0.5 * d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        loss
    }

    fn run(&self, want_grad: bool) -> Partial {
        let n = self.mc.n;
        let chunks = n.div_ceil(CHUNK);
        let parts: Vec<Partial> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut w = Scratch::new(self.h, self.l);
                let mut acc = Partial::new(self.h, self.f);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let loss = if want_grad {
                        self.draw(i, &mut w, Some(&mut acc))
                    } else {
                        self.draw(i, &mut w, None)
                    };
                    acc.loss += loss;
                    acc.loss_sq += loss * loss;
                }
                acc
            })
            .collect();
        let mut total = Partial::new(self.h, self.f);
        for p in &parts {
            total.add(p);
        }
        total
    }
}

fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Loss (and gradient if requested) of the frozen-sample estimator.
pub fn evaluate(state: &OrderState, kind: ActivationKind, mc: &McSampleSet, want_grad: bool) -> Result<Evaluation> {
    let ctx = Ctx::new(state, kind, mc)?;
    let p = ctx.run(want_grad);
    let n = mc.n;
    let (loss, loss_se) = mean_se(p.loss, p.loss_sq, n);
    if !loss.is_finite() {
        return Err(Error::NonFinite("population loss".into()));
    }
    if !want_grad {
        return Ok(Evaluation { loss, loss_se, grad: None, grad_m_se: None });
    }
    let (h, f) = (ctx.h, ctx.f);
    let nf = n as f64;
    let m = DMatrix::from_row_slice(h, f, &p.gm) / nf;
    let m_se = DMatrix::from_fn(h, f, |i, j| mean_se(p.gm[i * f + j], p.gm_sq[i * f + j], n).1);
    let r = linalg::symmetrize(&(DMatrix::from_row_slice(h, h, &p.gr) / nf));
    let b = nalgebra::DVector::from_vec(p.gb) / nf;
    let mut grad = OrderGradients { m, r, b, v: p.gv / nf };
    grad.mask_for(kind);
    Ok(Evaluation { loss, loss_se, grad: Some(grad), grad_m_se: Some(m_se) })
}

/// MC estimate of E[Σ_ℓ (δ_{ℓε} − (1/H) Σ_h σ_{hℓ})²].
pub fn reparam_loss(state: &OrderState, kind: ActivationKind, mc: &McSampleSet) -> Result<f64> {
    Ok(evaluate(state, kind, mc, false)?.loss)
}

/// Exact gradient of [`reparam_loss`] on the same samples; ∂r symmetrized.
pub fn reparam_gradients(state: &OrderState, kind: ActivationKind, mc: &McSampleSet) -> Result<OrderGradients> {
    Ok(evaluate(state, kind, mc, true)?.grad.expect("gradient requested"))
}

/// Per-draw losses (each averaged over ±ξ), in sample order.
pub fn per_sample_losses(state: &OrderState, kind: ActivationKind, mc: &McSampleSet) -> Result<Vec<f64>> {
    let ctx = Ctx::new(state, kind, mc)?;
    let mut out = vec![0.0; mc.n];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, dst)| {
        let mut w = Scratch::new(ctx.h, ctx.l);
        for (j, d) in dst.iter_mut().enumerate() {
            *d = ctx.draw(c * CHUNK + j, &mut w, None);
        }
    });
    Ok(out)
}

/// Moves `state` by −δ·grad, leaving parameters the kind ignores untouched.
pub fn apply_step(state: &OrderState, grad: &OrderGradients, kind: ActivationKind, step: f64) -> OrderState {
    let mut next = state.clone();
    next.m -= &grad.m * step;
    next.r -= &grad.r * step;
    if kind.uses_bias() {
        next.b -= &grad.b * step;
    }
    if kind.uses_scale() {
        next.v -= grad.v * step;
    }
    next.loss = None;
    next
}

/// One explicit Euler step of the order-parameter gradient flow.
pub fn flow_step(state: &OrderState, kind: ActivationKind, mc: &McSampleSet, step: f64) -> Result<OrderState> {
    let grad = reparam_gradients(state, kind, mc)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("flow gradient".into()));
    }
    Ok(apply_step(state, &grad, kind, step))
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    /// Effective-time increment δ.
    pub step: f64,
    pub n_mc: usize,
    pub tau_max: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian perturbation added to m and r.
    pub init_noise: f64,
    pub record_every: usize,
    /// Redraw the Monte-Carlo set at every step instead of freezing it.
    pub fresh_mc: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { step: 0.02, n_mc: 100_000, tau_max: 40.0, seed: 0, init_noise: 1e-2, record_every: 5, fresh_mc: false }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig(format!("flow step must be positive, got {}", self.step)));
        }
        if self.n_mc == 0 {
            return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
        }
        if !(self.init_noise >= 0.0) {
            return Err(Error::InvalidConfig(format!("init_noise must be non-negative, got {}", self.init_noise)));
        }
        if !(self.tau_max >= 0.0) {
            return Err(Error::InvalidConfig(format!("tau_max must be non-negative, got {}", self.tau_max)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.tau_max / self.step).round() as usize
    }
}

/// Adds N(0, s²) noise to every entry of m and to r (kept symmetric).
pub fn perturb(state: &OrderState, std: f64, seed: u64) -> OrderState {
    let mut out = state.clone();
    if std == 0.0 {
        return out;
    }
    let mut r = rng::stream(seed, Domain::FlowInit, 0);
    for x in out.m.iter_mut() {
        *x += std * r.sample::<f64, _>(StandardNormal);
    }
    let h = out.heads();
    for i in 0..h {
        for j in i..h {
            let z = std * r.sample::<f64, _>(StandardNormal);
            out.r[(i, j)] += z;
            if i != j {
                out.r[(j, i)] += z;
            }
        }
    }
    out
}

/// Stopping rule checked after each step.
pub(crate) trait StopRule {
    fn should_stop(&mut self, tau: f64, loss: f64) -> bool;
}

struct Never;

impl StopRule for Never {
    fn should_stop(&mut self, _: f64, _: f64) -> bool {
        false
    }
}

/// Relative loss change below `rtol` over a τ-window.
pub(crate) struct Plateau {
    window_steps: usize,
    rtol: f64,
    history: Vec<f64>,
}

impl Plateau {
    pub(crate) fn new(window: f64, step: f64, rtol: f64) -> Self {
        Plateau { window_steps: ((window / step).round() as usize).max(1), rtol, history: Vec::new() }
    }
}

impl StopRule for Plateau {
    fn should_stop(&mut self, _tau: f64, loss: f64) -> bool {
        self.history.push(loss);
        let n = self.history.len();
        if n <= self.window_steps {
            return false;
        }
        let old = self.history[n - 1 - self.window_steps];
        (loss - old).abs() <= self.rtol * loss.abs().max(f64::MIN_POSITIVE)
    }
}

pub(crate) fn run_flow(
    start: OrderState,
    kind: ActivationKind,
    dist: &ThetaDistribution,
    seq_len: usize,
    config: &FlowConfig,
    stop: &mut dyn StopRule,
) -> Result<Trajectory> {
    config.validate()?;
    let heads = start.heads();
    let frozen =
        if config.fresh_mc { None } else { Some(sample_mc_set_in(dist, seq_len, heads, config.n_mc, config.seed, Domain::McSamples)) };
    let mut traj = Trajectory::default();
    let mut state = start;
    let n_steps = config.n_steps();
    let mut initial_loss = None;
    let mut warned_psd = false;
    let mut stopped = false;
    for t in 0..=n_steps {
        let tau = t as f64 * config.step;
        let fresh;
        let mc = match &frozen {
            Some(mc) => mc,
            None => {
                let seed = rng::derive_seed(config.seed, t as u64);
                fresh = sample_mc_set_in(dist, seq_len, heads, config.n_mc, seed, Domain::FreshMc);
                &fresh
            }
        };
        let last = t == n_steps;
        let ev = evaluate(&state, kind, mc, !last)?;
        let init = *initial_loss.get_or_insert(ev.loss);
        if ev.loss > 10.0 * init {
            return Err(Error::Diverged { step: t, loss: ev.loss });
        }
        state.loss = Some(ev.loss);
        if !warned_psd && state.min_r_eigenvalue() < -1e-6 {
            log::warn!("r left the PSD cone at tau={tau:.3} (min eigenvalue {:.3e})", state.min_r_eigenvalue());
            warned_psd = true;
        }
        let done = !last && stop.should_stop(tau, ev.loss);
        if t % config.record_every == 0 || last || done {
            traj.push(tau, state.clone());
        }
        if last || done {
            stopped = done;
            break;
        }
        let grad = ev.grad.expect("gradient requested");
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("flow gradient at step {t}")));
        }
        state = apply_step(&state, &grad, kind, config.step);
    }
    traj.converged = Some(stopped);
    Ok(traj)
}

/// Integrates the flow from `initial` (perturbed by `config.init_noise`)
/// up to `config.tau_max`. Samples are drawn once from `config.seed` unless
/// `fresh_mc` is set.
pub fn integrate_flow(
    initial: &OrderState,
    kind: ActivationKind,
    dist: &ThetaDistribution,
    seq_len: usize,
    config: &FlowConfig,
) -> Result<Trajectory> {
    let start = perturb(initial, config.init_noise, config.seed);
    let mut traj = run_flow(start, kind, dist, seq_len, config, &mut Never)?;
    traj.converged = None;
    Ok(traj)
}

#[derive(Debug, Clone)]
pub struct TerminalConfig {
    pub flow: FlowConfig,
    /// Initial key norm η: the flow starts at m = 0, r = η I.
    pub eta: f64,
    /// Size of the independent sample set the final loss is measured on.
    pub eval_n_mc: usize,
    pub plateau_window: f64,
    pub plateau_rtol: f64,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig {
            flow: FlowConfig { tau_max: 400.0, record_every: 50, ..FlowConfig::default() },
            eta: 1.0,
            eval_n_mc: 100_000,
            plateau_window: 5.0,
            plateau_rtol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerminalLoss {
    /// Loss of the final state on the independent evaluation set.
    pub loss: f64,
    pub se: f64,
    /// Loss on the training samples at the final state.
    pub train_loss: f64,
    pub converged: bool,
    pub tau: f64,
    pub state: OrderState,
    pub trajectory: Trajectory,
}

/// Trains from a random initialization until the loss plateaus and reports
/// the reached loss on fresh samples.
pub fn terminal_loss(
    kind: ActivationKind,
    dist: &ThetaDistribution,
    heads: usize,
    seq_len: usize,
    config: &TerminalConfig,
) -> Result<TerminalLoss> {
    let init = OrderState::initial(heads, dist.features(), config.eta);
    let start = perturb(&init, config.flow.init_noise, config.flow.seed);
    let mut rule = Plateau::new(config.plateau_window, config.flow.step, config.plateau_rtol);
    let traj = run_flow(start, kind, dist, seq_len, &config.flow, &mut rule)?;
    let last = traj.last().expect("trajectory has the initial row");
    let converged = traj.converged.unwrap_or(false);
    if !converged {
        log::warn!("{kind}: no plateau by tau={} (H={heads})", config.flow.tau_max);
    }
    let eval_seed = rng::derive_seed(config.flow.seed, 0xE7A1);
    let eval = sample_mc_set_in(dist, seq_len, heads, config.eval_n_mc, eval_seed, Domain::Evaluation);
    let ev = evaluate(&last.state, kind, &eval, false)?;
    Ok(TerminalLoss {
        loss: ev.loss,
        se: ev.loss_se,
        train_loss: last.state.loss.unwrap_or(f64::NAN),
        converged,
        tau: last.tau,
        state: last.state.clone(),
        trajectory: traj,
    })
}
