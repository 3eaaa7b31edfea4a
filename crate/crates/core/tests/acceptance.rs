//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- A3 A5`.

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use headlab::activations::{scores, ActivationKind};
use headlab::analysis::heads::{covariance_eigenbasis, eigen_components, phase_crossing_times};
use headlab::analysis::{check_softmax1_fixed_point, estimate_hessian_coefficients, prune_heads};
use headlab::attention::{self, empirical_loss, AttentionParams, SgdConfig, SgdMode};
use headlab::bayes::{bayes_posterior_lowdim, optimal_bsoftmax_state, verify_optimality};
use headlab::flow::{
    evaluate, flow_step, integrate_flow, perturb, reparam_gradients, reparam_loss, terminal_loss, FlowConfig,
    TerminalConfig, TerminalLoss,
};
use headlab::latent::{sample_mc_set, sample_mc_set_in, sample_sequences, sample_spikes, ThetaDistribution};
use headlab::rng::{self, Domain};
use headlab::{OrderState, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use ActivationKind::{BSoftmax, Softmax, SoftmaxOne};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Criterion = (&'static str, &'static str, fn() -> Result<Outcome>);

const CRITERIA: &[Criterion] = &[
    ("A1", "SGD and flow agree", a1_sgd_flow_agreement),
    ("A2", "gradient oracles", a2_gradient_oracles),
    ("A3", "Hessian coefficients", a3_hessian),
    ("A4", "softmax-1 fixed point", a4_softmax1_fixed_point),
    ("A5", "Bayes optimality", a5_bayes_optimality),
    ("A6", "expressivity separation", a6_expressivity),
    ("A7", "B-softmax head plateau", a7_head_plateau),
    ("A8", "phase ordering", a8_phase_ordering),
    ("A9", "pruning", a9_pruning),
    ("A10", "invariant suites", a10_invariants),
];

fn main() {
    // libtest flags (--nocapture, --test-threads, ...) are accepted and ignored.
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_uppercase()).collect();
    let selected: Vec<&Criterion> =
        CRITERIA.iter().filter(|(id, ..)| wanted.is_empty() || wanted.iter().any(|w| w == id)).collect();
    if selected.is_empty() {
        println!("no acceptance criteria selected");
        return;
    }
    panic::set_hook(Box::new(|info| eprintln!("{info}")));
    let mut failed = Vec::new();
    for (id, name, check) in selected {
        let t = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e}")),
            Err(_) => Outcome::new(false, "panicked"),
        };
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{id:<4} {status} {name}: {} [{:.1}s]", outcome.detail, t.elapsed().as_secs_f64());
        if !outcome.pass {
            failed.push(*id);
        }
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

fn kinds() -> [ActivationKind; 3] {
    ActivationKind::ALL
}

/// Terminal runs shared between criteria, keyed by their full setting.
fn terminal(
    kind: ActivationKind,
    dist: &ThetaDistribution,
    heads: usize,
    seed: u64,
    n_mc: usize,
    eval_n_mc: usize,
) -> Result<TerminalLoss> {
    static CACHE: OnceLock<Mutex<HashMap<String, TerminalLoss>>> = OnceLock::new();
    let key = format!("{kind}/{dist:?}/{heads}/{seed}/{n_mc}/{eval_n_mc}");
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return Ok(t.clone());
    }
    let cfg = TerminalConfig {
        flow: FlowConfig { step: 0.5, n_mc, tau_max: 3000.0, seed, record_every: 100, ..FlowConfig::default() },
        eval_n_mc,
        ..TerminalConfig::default()
    };
    let t = terminal_loss(kind, dist, heads, 5, &cfg)?;
    cache.lock().unwrap().insert(key, t.clone());
    Ok(t)
}

fn combined_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn a1_sgd_flow_agreement() -> Result<Outcome> {
    let dist = ThetaDistribution::flipping_spike(2.0, 2.0)?;
    let (dim, seq_len, heads, seed) = (10_000, 10, 2, 1);
    let spikes = sample_spikes(2, dim, &mut rng::stream(seed, Domain::Spikes, 0));
    let params = AttentionParams::init(heads, dim, 1.0, Softmax, &mut rng::stream(seed, Domain::SgdInit, 0));
    let sgd_cfg = SgdConfig { record_every: 25, mode: SgdMode::Projected, ..SgdConfig::defaults(dim, 2000, seed) };
    let (_, sgd) = attention::train(&params, &spikes, &dist, seq_len, &sgd_cfg)?;
    let start = sgd.rows[0].state.clone();
    let cfg = FlowConfig { step: 0.02, n_mc: 100_000, tau_max: 40.0, seed, init_noise: 0.0, record_every: 25, fresh_mc: false };
    let flow = integrate_flow(&start, Softmax, &dist, seq_len, &cfg)?;
    let mut max_dm: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    let mut matched = 0;
    for row in &sgd.rows {
        let Some(other) = flow.rows.iter().find(|r| (r.tau - row.tau).abs() < 1e-9) else { continue };
        matched += 1;
        max_dm = max_dm.max((&row.state.m - &other.state.m).amax());
        max_gap = max_gap.max((row.state.loss.unwrap() - other.state.loss.unwrap()).abs());
    }
    let pass = matched == sgd.rows.len() && max_dm <= 0.1 && max_gap <= 0.05;
    Ok(Outcome::new(pass, format!("{matched} shared τ, max |Δm| = {max_dm:.4} (≤ 0.1), max loss gap = {max_gap:.4} (≤ 0.05)")))
}

fn random_state(h: usize, f: usize, seed: u64) -> OrderState {
    let mut r = rng::stream(seed, Domain::Evaluation, 7);
    let mut n = || r.sample::<f64, _>(StandardNormal);
    let m = DMatrix::from_fn(h, f, |_, _| n());
    let a = DMatrix::from_fn(h, h, |_, _| 0.5 * n());
    let b = DVector::from_fn(h, |_, _| 0.5 * n());
    let v = 1.0 + 0.3 * n();
    OrderState { m, r: (&a + a.transpose()) * 0.5, b, v, loss: None }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn a2_gradient_oracles() -> Result<Outcome> {
    let dist = ThetaDistribution::flipping_basis(3.0, 3)?;
    let (h, f, step) = (3, 3, 1e-5);
    let mut worst: f64 = 0.0;
    for kind in kinds() {
        for seed in 0..20u64 {
            let mc = sample_mc_set(&dist, 4, h, 500, 100 + seed);
            let s = random_state(h, f, seed);
            let g = reparam_gradients(&s, kind, &mc)?;
            let loss = |st: &OrderState| reparam_loss(st, kind, &mc);
            let fd = |p: OrderState, q: OrderState| -> Result<f64> { Ok((loss(&p)? - loss(&q)?) / (2.0 * step)) };
            let mut check = |analytic: f64, numeric: f64| worst = worst.max(rel_err(analytic, numeric, 1e-2));
            for i in 0..h {
                for j in 0..f {
                    let (mut p, mut q) = (s.clone(), s.clone());
                    p.m[(i, j)] += step;
                    q.m[(i, j)] -= step;
                    check(g.m[(i, j)], fd(p, q)?);
                }
                for j in 0..h {
                    let (mut p, mut q) = (s.clone(), s.clone());
                    let d = if i == j { step } else { step / 2.0 };
                    p.r[(i, j)] += d;
                    q.r[(i, j)] -= d;
                    if i != j {
                        p.r[(j, i)] += d;
                        q.r[(j, i)] -= d;
                    }
                    check(g.r[(i, j)], fd(p, q)?);
                }
                let (mut p, mut q) = (s.clone(), s.clone());
                p.b[i] += step;
                q.b[i] -= step;
                check(g.b[i], fd(p, q)?);
            }
            let (mut p, mut q) = (s.clone(), s.clone());
            p.v += step;
            q.v -= step;
            check(g.v, fd(p, q)?);
        }
    }

    let mut worst_sgd: f64 = 0.0;
    for kind in kinds() {
        let dim = 20;
        let spikes = sample_spikes(2, dim, &mut rng::stream(3, Domain::Spikes, 0));
        let mut p = AttentionParams::init(2, dim, 1.0, kind, &mut rng::stream(3, Domain::SgdInit, 0));
        p.biases = DVector::from_vec(vec![0.3, -0.2]);
        p.scale = 1.2;
        let batch = sample_sequences(&spikes, &dist_for_sgd()?, 4, 16, &mut rng::stream(3, Domain::SgdBatch, 0));
        let (_, g) = attention::gradients(&p, &batch)?;
        let loss = |a: &AttentionParams| empirical_loss(a, &batch);
        for hh in 0..2 {
            for j in 0..dim {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.keys[(hh, j)] += step;
                b.keys[(hh, j)] -= step;
                worst_sgd = worst_sgd.max(rel_err(g.keys[(hh, j)], (loss(&a)? - loss(&b)?) / (2.0 * step), 1e-2));
            }
            if kind.uses_bias() {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.biases[hh] += step;
                b.biases[hh] -= step;
                worst_sgd = worst_sgd.max(rel_err(g.biases[hh], (loss(&a)? - loss(&b)?) / (2.0 * step), 1e-2));
            }
        }
        if kind.uses_scale() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.scale += step;
            b.scale -= step;
            worst_sgd = worst_sgd.max(rel_err(g.scale, (loss(&a)? - loss(&b)?) / (2.0 * step), 1e-2));
        }
    }
    let pass = worst <= 1e-6 && worst_sgd <= 1e-5;
    Ok(Outcome::new(
        pass,
        format!("reparametrized max rel err = {worst:.2e} (≤ 1e-6), finite-D max rel err = {worst_sgd:.2e} (≤ 1e-5)"),
    ))
}

fn dist_for_sgd() -> Result<ThetaDistribution> {
    ThetaDistribution::flipping_spike(2.0, 2.0)
}

fn a3_hessian() -> Result<Outcome> {
    let dist = ThetaDistribution::flipping_spike(4.0, 1.0)?;
    let mc = sample_mc_set(&dist, 5, 2, 1_000_000, 3);
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in kinds() {
        let rep = estimate_hessian_coefficients(kind, &dist, 2, 5, &mc)?;
        match kind {
            Softmax => {
                let ok = rel_err(rep.c3, 0.048, 0.0) <= 0.1 && rep.c4.abs() <= 0.002;
                pass &= ok;
                parts.push(format!("softmax c3 = {:.5} (0.048 ± 10%), c4 = {:+.5}", rep.c3, rep.c4));
            }
            SoftmaxOne => {
                let ok = rep.c4.abs() <= 0.002;
                pass &= ok;
                parts.push(format!("softmax-1 c4 = {:+.5}", rep.c4));
            }
            BSoftmax => {
                let ok = rel_err(rep.c4, 0.016, 0.0) <= 0.1;
                pass &= ok;
                parts.push(format!("b-softmax c4 = {:.5} (0.016 ± 10%)", rep.c4));
            }
        }
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn a4_softmax1_fixed_point() -> Result<Outcome> {
    let cfg = FlowConfig { step: 0.5, tau_max: 2000.0, ..FlowConfig::default() };
    let mut pass = true;
    let mut parts = Vec::new();
    for l in [4, 5, 10] {
        let rep = check_softmax1_fixed_point(l, 2, 0.0, 1.0, &cfg)?;
        // Attraction: restart from a perturbed point on the line.
        let back = check_softmax1_fixed_point(l, 2, rep.b + 0.1, rep.v - 0.1, &cfg)?;
        pass &= rep.residual.abs() <= 1e-3 && back.residual.abs() <= 1e-3;
        parts.push(format!("L={l}: residual {:.1e}, after kick {:.1e}", rep.residual, back.residual));
    }
    let rep = check_softmax1_fixed_point(5, 2, 0.0, 1.0, &cfg)?;
    let (db, dv) = headlab::analysis::gradients::softmax1_zero_gradients(5, 2, 0.0, 1.0);
    let err = [(rep.initial_db - 1.0 / 216.0).abs(), (rep.initial_dv + 1.0 / 18.0).abs(), (db - 1.0 / 216.0).abs(), (dv + 1.0 / 18.0).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    pass &= err <= 1e-9;
    parts.push(format!("initial (∂b, ∂v) = ({:.6}, {:.6}), max err vs (1/216, -1/18) = {err:.1e}", rep.initial_db, rep.initial_dv));
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn a5_bayes_optimality() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, dist) in [
        ("FS(2,2)", ThetaDistribution::flipping_spike(2.0, 2.0)?),
        ("FB(10,4)", ThetaDistribution::flipping_basis(10.0, 4)?),
    ] {
        let rep = verify_optimality(&dist, 5, 200_000, 5)?;
        pass &= rep.z_score.abs() <= 3.0;

        let state = optimal_bsoftmax_state(&dist)?;
        let f = dist.features();
        let mut r = rng::stream(17, Domain::Evaluation, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let u = DMatrix::from_fn(f, 5, |_, _| 2.0 * r.sample::<f64, _>(StandardNormal));
            let chi = &state.m * &u;
            let s = scores(&chi, &state.b, state.v, BSoftmax)?;
            let post = bayes_posterior_lowdim(&u, &dist)?;
            for l in 0..5 {
                let agg = s.scores.column(l).sum() / state.heads() as f64;
                worst = worst.max((agg - post.probabilities[l]).abs());
            }
        }
        pass &= worst <= 1e-10;
        parts.push(format!("{name}: z = {:+.2}, aggregated-score err = {worst:.1e}", rep.z_score));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn a6_expressivity() -> Result<Outcome> {
    let dist = ThetaDistribution::isotropic_gaussian(16.0, 2)?;
    let run = |kind| terminal(kind, &dist, 4, 1, 100_000, 1_000_000);
    let (sm, s1, bs) = (run(Softmax)?, run(SoftmaxOne)?, run(BSoftmax)?);
    let pass = sm.loss >= 0.05 && s1.loss <= 0.5 * sm.loss && bs.loss <= s1.loss + 3.0 * combined_se(bs.se, s1.se);
    Ok(Outcome::new(
        pass,
        format!(
            "softmax {:.5} ± {:.5}, softmax-1 {:.5} ± {:.5} (ratio {:.4}, ≤ 0.5), b-softmax {:.5} ± {:.5}",
            sm.loss,
            sm.se,
            s1.loss,
            s1.se,
            s1.loss / sm.loss,
            bs.loss,
            bs.se
        ),
    ))
}

fn a7_head_plateau() -> Result<Outcome> {
    let dist = ThetaDistribution::flipping_basis(10.0, 4)?;
    let base = terminal(BSoftmax, &dist, 4, 1, 20_000, 100_000)?;
    let (risk, risk_se) = headlab::bayes::bayes_risk(&dist, 5, 100_000, rng::derive_seed(1, 0xBA7E5))?;
    let mut pass = (base.loss - risk).abs() <= 3.0 * combined_se(base.se, risk_se);
    let mut parts = vec![format!("E(4) = {:.5} ± {:.5}, Bayes {risk:.5} ± {risk_se:.5}", base.loss, base.se)];
    for h in [5, 6, 8] {
        let t = terminal(BSoftmax, &dist, h, 1, 20_000, 100_000)?;
        let z = (t.loss - base.loss) / combined_se(t.se, base.se);
        pass &= z.abs() <= 3.0;
        parts.push(format!("E({h}) = {:.5} (z {z:+.2})", t.loss));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn a8_phase_ordering() -> Result<Outcome> {
    let spike = ThetaDistribution::flipping_spike(2.0, 2.0)?;
    let cfg = FlowConfig { step: 0.05, n_mc: 20_000, tau_max: 80.0, seed: 1, init_noise: 0.01, record_every: 1, fresh_mc: false };
    let traj = integrate_flow(&OrderState::initial(2, 2, 1.0), Softmax, &spike, 10, &cfg)?;
    let phases = phase_crossing_times(&traj, &spike.mean(), 0.5);
    let mut pass = phases.iter().all(|p| matches!(p, (Some(a), Some(b)) if *a < 5.0 && a < b));
    let mut parts: Vec<String> =
        phases.iter().map(|(a, b)| format!("head mean/orth crossing {a:?}/{b:?}")).collect();

    // Sequential specialization, stopped once all three directions have crossed.
    let dist = ThetaDistribution::aniso_gaussian(20.0, 1.0, 3)?;
    let (_, basis) = covariance_eigenbasis(&dist);
    let (step, seed) = (0.5, 1);
    let mc = sample_mc_set(&dist, 5, 8, 20_000, seed);
    let mut state = perturb(&OrderState::initial(8, 3, 1.0), 0.01, seed);
    let mut crossed: [Option<f64>; 3] = [None; 3];
    let mut tau = 0.0;
    while tau <= 3000.0 && crossed.iter().any(Option::is_none) {
        let c = eigen_components(&state.m, &basis);
        for (j, slot) in crossed.iter_mut().enumerate() {
            if slot.is_none() && c.column(j).norm() > 0.5 {
                *slot = Some(tau);
            }
        }
        state = flow_step(&state, Softmax, &mc, step)?;
        tau += step;
    }
    let ordered = matches!(crossed, [Some(a), Some(b), Some(c)] if a < b && b < c);
    pass &= ordered;
    parts.push(format!("eigen-direction crossings {crossed:?}"));
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn a9_pruning() -> Result<Outcome> {
    let dist = ThetaDistribution::flipping_basis(10.0, 4)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in kinds() {
        let mut ok = 0;
        let mut ratios = Vec::new();
        for seed in 1..=5u64 {
            let t = terminal(kind, &dist, 8, seed, 20_000, 100_000)?;
            let mc = sample_mc_set_in(&dist, 5, 8, 100_000, rng::derive_seed(seed, 0x9A0E), Domain::Evaluation);
            let rep = prune_heads(&t.state, kind, &mc, Some(5))?;
            let full = rep.loss_at(0).unwrap();
            let (four, five) = (rep.loss_at(4).unwrap() / full, rep.loss_at(5).unwrap() / full);
            if four <= 1.10 && five > 1.25 {
                ok += 1;
            }
            ratios.push(format!("{four:.3}/{five:.3}"));
        }
        pass &= ok >= 4;
        parts.push(format!("{kind} {ok}/5 [{}]", ratios.join(" ")));
    }
    Ok(Outcome::new(pass, format!("loss ratio after 4/5 pruned: {}", parts.join("; "))))
}

fn a10_invariants() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;

    // Score normalizations on random pre-activations.
    let mut r = rng::stream(23, Domain::Evaluation, 0);
    let mut norm_err: f64 = 0.0;
    for _ in 0..200 {
        let (h, l) = (r.random_range(1..6), r.random_range(2..9));
        let amp = 30.0 * r.random::<f64>();
        let chi = DMatrix::from_fn(h, l, |_, _| amp * r.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(h, |_, _| 3.0 * r.sample::<f64, _>(StandardNormal));
        let v = 0.5 + r.random::<f64>();
        for kind in kinds() {
            let s = scores(&chi, &b, v, kind)?;
            pass &= s.scores.iter().all(|&x| x >= 0.0 && x.is_finite());
            let e = match kind {
                Softmax => s.row_sums.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max),
                SoftmaxOne => s.row_sums.iter().map(|x| (x - v).max(0.0)).fold(0.0, f64::max),
                BSoftmax => (s.row_sums.sum() - h as f64).abs() / h as f64,
            };
            norm_err = norm_err.max(e);
        }
    }
    pass &= norm_err <= 1e-12;
    parts.push(format!("normalization err {norm_err:.1e}"));

    // Permutation equivariance: exact at r = 0, in law otherwise.
    let dist = ThetaDistribution::flipping_basis(4.0, 3)?;
    let mc = sample_mc_set(&dist, 5, 4, 4000, 2);
    let perm = [2, 0, 3, 1];
    let mut perm_err: f64 = 0.0;
    let mut law_ok = true;
    for kind in kinds() {
        let mut s = random_state(4, 3, 9);
        s.r.fill(0.0);
        let p = s.permute_heads(&perm);
        perm_err = perm_err.max((reparam_loss(&s, kind, &mc)? - reparam_loss(&p, kind, &mc)?).abs());
        let (ga, gb) = (reparam_gradients(&s, kind, &mc)?, reparam_gradients(&p, kind, &mc)?);
        for (i, &pi) in perm.iter().enumerate() {
            perm_err = perm_err.max((gb.m.row(i) - ga.m.row(pi)).amax()).max((gb.b[i] - ga.b[pi]).abs());
        }
        let wide = sample_mc_set(&dist, 5, 4, 200_000, 3);
        let s = random_state(4, 3, 10);
        let (a, b) = (evaluate(&s, kind, &wide, false)?, evaluate(&s.permute_heads(&perm), kind, &wide, false)?);
        law_ok &= (a.loss - b.loss).abs() <= 5.0 * combined_se(a.loss_se, b.loss_se);
    }
    pass &= perm_err <= 1e-12 && law_ok;
    parts.push(format!("permutation err {perm_err:.1e}, in law {law_ok}"));

    // r = 0 is preserved exactly.
    let mut r_kept = true;
    let spike = ThetaDistribution::flipping_spike(2.0, 2.0)?;
    let mc = sample_mc_set(&spike, 5, 2, 4000, 4);
    for kind in kinds() {
        let mut s = random_state(2, 2, 5);
        s.r.fill(0.0);
        for _ in 0..100 {
            s = flow_step(&s, kind, &mc, 0.05)?;
            r_kept &= s.r.iter().all(|&x| x == 0.0);
        }
    }
    pass &= r_kept;
    parts.push(format!("r = 0 kept {r_kept}"));

    // Frozen against fresh samples.
    let init = OrderState::initial(2, 2, 1.0);
    let diffs: Vec<f64> = (0..20u64)
        .map(|seed| -> Result<f64> {
            let cfg = FlowConfig { step: 0.05, n_mc: 4000, tau_max: 5.0, seed, record_every: 1000, ..FlowConfig::default() };
            let frozen = integrate_flow(&init, Softmax, &spike, 5, &cfg)?;
            let fresh = integrate_flow(&init, Softmax, &spike, 5, &FlowConfig { fresh_mc: true, ..cfg })?;
            let eval = sample_mc_set_in(&spike, 5, 2, 100_000, 1000 + seed, Domain::Evaluation);
            Ok(reparam_loss(&frozen.last().unwrap().state, Softmax, &eval)?
                - reparam_loss(&fresh.last().unwrap().state, Softmax, &eval)?)
        })
        .collect::<Result<_>>()?;
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let se = (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let centered = mean.abs() <= 5.0 * se;
    pass &= centered;
    parts.push(format!("frozen-fresh mean diff {mean:+.2e} (5 SE = {:.2e})", 5.0 * se));

    Ok(Outcome::new(pass, parts.join(", ")))
}
