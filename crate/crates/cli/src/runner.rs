//! Executes one experiment and writes its tables.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use headlab::analysis::{self, SweepConfig};
use headlab::attention::{self, AttentionParams};
use headlab::bayes;
use headlab::flow::{self, FlowConfig};
use headlab::latent::{sample_mc_set, sample_mc_set_in, sample_spikes};
use headlab::rng::{self, Domain};
use headlab::{ActivationKind, OrderState, Trajectory};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Experiment, ExperimentConfig};
use crate::output::{self, fmt_f64, state_columns, state_values, trajectory_header, Sidecar, Table};

/// Command-line overrides; `None`/`false` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub fresh_mc: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if !self.seeds.is_empty() {
            config.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            config.out = o.clone();
        }
        if self.fresh_mc {
            config.flow.fresh_mc = true;
        }
    }
}

struct Output {
    name: String,
    kind: Option<ActivationKind>,
    seed: Option<u64>,
    table: Table,
    wall: f64,
    summary: serde_json::Value,
}

fn jobs(config: &ExperimentConfig) -> Vec<(ActivationKind, u64)> {
    config.kinds.iter().flat_map(|&k| config.seeds.iter().map(move |&s| (k, s))).collect()
}

fn trajectory_table(traj: &Trajectory, heads: usize, features: usize) -> Table {
    let mut t = Table::new(trajectory_header(heads, features));
    for row in &traj.rows {
        let mut r = vec![fmt_f64(row.tau)];
        r.extend(state_values(&row.state));
        t.push(r);
    }
    t
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn run_flow(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let f = c.distribution.features();
    jobs(c)
        .par_iter()
        .map(|&(kind, seed)| {
            let (traj, wall) = timed(|| {
                let init = OrderState::initial(c.heads, f, c.eta);
                Ok(flow::integrate_flow(&init, kind, &c.distribution, c.seq_len, &c.flow.to_config(seed))?)
            })?;
            let last = traj.last().map(|r| r.state.loss).flatten();
            Ok(Output {
                name: format!("flow_{kind}_s{seed}"),
                kind: Some(kind),
                seed: Some(seed),
                table: trajectory_table(&traj, c.heads, f),
                wall,
                summary: json!({ "final_loss": last }),
            })
        })
        .collect()
}

fn sgd_trajectory(c: &ExperimentConfig, kind: ActivationKind, seed: u64) -> Result<Trajectory> {
    let s = c.sgd.as_ref().ok_or_else(|| anyhow!("missing [sgd] block"))?;
    let mut spike_rng = rng::stream(seed, Domain::Spikes, 0);
    let spikes = sample_spikes(c.distribution.features(), s.dim, &mut spike_rng);
    let mut init_rng = rng::stream(seed, Domain::SgdInit, 0);
    let params = AttentionParams::init(c.heads, s.dim, c.eta, kind, &mut init_rng);
    let (_, traj) = attention::train(&params, &spikes, &c.distribution, c.seq_len, &s.to_config(seed))?;
    Ok(traj)
}

fn run_sgd(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let f = c.distribution.features();
    jobs(c)
        .par_iter()
        .map(|&(kind, seed)| {
            let (traj, wall) = timed(|| sgd_trajectory(c, kind, seed))?;
            Ok(Output {
                name: format!("sgd_{kind}_s{seed}"),
                kind: Some(kind),
                seed: Some(seed),
                table: trajectory_table(&traj, c.heads, f),
                wall,
                summary: json!({ "records": traj.len() }),
            })
        })
        .collect()
}

/// SGD and the flow started from SGD's empirical order parameters at τ = 0,
/// on a shared τ grid.
fn run_compare(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let f = c.distribution.features();
    let s = c.sgd.as_ref().ok_or_else(|| anyhow!("missing [sgd] block"))?;
    let sgd_cfg = s.to_config(0);
    let record_tau = sgd_cfg.record_every as f64 * sgd_cfg.learning_rate;
    let ratio = record_tau / c.flow.step;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio < 0.5 {
        bail!("sgd record interval {record_tau} is not a multiple of the flow step {}", c.flow.step);
    }
    jobs(c)
        .par_iter()
        .map(|&(kind, seed)| {
            let ((sgd, fl), wall) = timed(|| {
                let sgd = sgd_trajectory(c, kind, seed)?;
                let start = sgd.rows.first().ok_or_else(|| anyhow!("empty SGD trajectory"))?.state.clone();
                let cfg = FlowConfig {
                    tau_max: sgd.last().map(|r| r.tau).unwrap_or(0.0),
                    record_every: ratio.round() as usize,
                    init_noise: 0.0,
                    ..c.flow.to_config(seed)
                };
                let fl = flow::integrate_flow(&start, kind, &c.distribution, c.seq_len, &cfg)?;
                Ok((sgd, fl))
            })?;
            let mut header = vec!["tau".to_string()];
            header.extend(state_columns(c.heads, f, "_sgd"));
            header.extend(state_columns(c.heads, f, "_flow"));
            let mut table = Table::new(header);
            let mut max_dm: f64 = 0.0;
            let mut max_gap: f64 = 0.0;
            for row in &sgd.rows {
                let Some(other) = fl.rows.iter().find(|r| (r.tau - row.tau).abs() < 1e-9) else { continue };
                let mut r = vec![fmt_f64(row.tau)];
                r.extend(state_values(&row.state));
                r.extend(state_values(&other.state));
                table.push(r);
                max_dm = max_dm.max((&row.state.m - &other.state.m).amax());
                if let (Some(a), Some(b)) = (row.state.loss, other.state.loss) {
                    max_gap = max_gap.max((a - b).abs());
                }
            }
            Ok(Output {
                name: format!("compare_{kind}_s{seed}"),
                kind: Some(kind),
                seed: Some(seed),
                table,
                wall,
                summary: json!({ "max_abs_m_diff": max_dm, "max_loss_gap": max_gap }),
            })
        })
        .collect()
}

fn run_bayes(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let start = Instant::now();
    let mut table = Table::new(["seed", "model_loss", "bayes_risk", "bayes_se", "diff_se", "z_score"]);
    let mut worst: f64 = 0.0;
    for &seed in &c.seeds {
        let r = bayes::verify_optimality(&c.distribution, c.seq_len, c.bayes.n_mc, seed)?;
        worst = worst.max(r.z_score.abs());
        table.push(vec![
            seed.to_string(),
            fmt_f64(r.model_loss),
            fmt_f64(r.bayes_risk),
            fmt_f64(r.bayes_se),
            fmt_f64(r.diff_se),
            fmt_f64(r.z_score),
        ]);
    }
    Ok(vec![Output {
        name: "bayes".into(),
        kind: Some(ActivationKind::BSoftmax),
        seed: None,
        table,
        wall: start.elapsed().as_secs_f64(),
        summary: json!({ "max_abs_z": worst }),
    }])
}

fn run_hessian(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let mut out = Vec::new();
    for &seed in &c.seeds {
        let start = Instant::now();
        let mc = sample_mc_set(&c.distribution, c.seq_len, c.heads, c.hessian.n_mc, seed);
        let mut table = Table::new(["kind", "coefficient", "estimate", "reference"]);
        let mut flags = serde_json::Map::new();
        for &kind in &c.kinds {
            let r = analysis::estimate_hessian_coefficients(kind, &c.distribution, c.heads, c.seq_len, &mc)?;
            let rows = [
                ("c1", r.c1, r.c1_exact),
                ("c2_plus_c4", r.c2_plus_c4, r.c2_exact + r.predicted_c4),
                ("c3_plus_c4", r.c3_plus_c4, r.predicted_c3 + r.predicted_c4),
                ("c3", r.c3, r.predicted_c3),
                ("c4", r.c4, r.predicted_c4),
                ("residual", r.residual, analysis::gradients::HESSIAN_RESIDUAL_FLAG),
            ];
            for (name, est, reference) in rows {
                table.push(vec![kind.to_string(), name.into(), fmt_f64(est), fmt_f64(reference)]);
            }
            flags.insert(kind.to_string(), json!({ "flagged": r.flagged, "c1_pinned": r.c1_pinned }));
        }
        out.push(Output {
            name: format!("hessian_s{seed}"),
            kind: None,
            seed: Some(seed),
            table,
            wall: start.elapsed().as_secs_f64(),
            summary: serde_json::Value::Object(flags),
        });
    }
    Ok(out)
}

fn run_prune(c: &ExperimentConfig) -> Result<Vec<Output>> {
    jobs(c)
        .par_iter()
        .map(|&(kind, seed)| {
            let ((trained, rep), wall) = timed(|| {
                let t = flow::terminal_loss(kind, &c.distribution, c.heads, c.seq_len, &c.terminal_config(seed))?;
                let mc = sample_mc_set_in(
                    &c.distribution,
                    c.seq_len,
                    c.heads,
                    c.prune.n_mc,
                    rng::derive_seed(seed, 0x9A0E),
                    Domain::Evaluation,
                );
                let rep = analysis::prune_heads(&t.state, kind, &mc, c.prune.max_removals)?;
                Ok((t, rep))
            })?;
            let mut table = Table::new(["stage", "pruned", "removed_head", "loss", "se", "rescale"]);
            for (i, s) in rep.stages.iter().enumerate() {
                table.push(vec![
                    i.to_string(),
                    s.pruned.to_string(),
                    s.removed.map(|h| (h + 1).to_string()).unwrap_or_default(),
                    fmt_f64(s.loss),
                    fmt_f64(s.se),
                    fmt_f64(s.rescale),
                ]);
            }
            Ok(Output {
                name: format!("prune_{kind}_s{seed}"),
                kind: Some(kind),
                seed: Some(seed),
                table,
                wall,
                summary: json!({
                    "terminal_loss": trained.loss,
                    "terminal_se": trained.se,
                    "converged": trained.converged,
                    "tau": trained.tau,
                    "rescale_convention": "survivors averaged with 1/(H - pruned); B-softmax normalization uses H - pruned",
                }),
            })
        })
        .collect()
}

fn run_sweep(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let s = c.sweep.as_ref().ok_or_else(|| anyhow!("missing [sweep] block"))?;
    let cfg = SweepConfig {
        axis: s.axis,
        grid: s.grid.clone(),
        kinds: c.kinds.clone(),
        dist: c.distribution.clone(),
        heads: c.heads,
        seq_len: c.seq_len,
        seeds: c.seeds.clone(),
        terminal: c.terminal_config(c.seeds[0]),
        bayes_n_mc: s.bayes_n_mc,
        prune_n_mc: s.prune_n_mc,
    };
    let (rep, wall) = timed(|| Ok(analysis::sweep(&cfg)?))?;
    let axis = serde_json::to_value(s.axis)?.as_str().unwrap_or_default().to_string();
    let mut table = Table::new(["axis", "value", "kind", "mean", "std", "mc_se", "runs", "unconverged"]);
    let mut unconverged = 0;
    for r in &rep.rows {
        unconverged += r.unconverged;
        table.push(vec![
            axis.clone(),
            fmt_f64(r.value),
            r.kind.map(|k| k.to_string()).unwrap_or_else(|| "bayes".into()),
            fmt_f64(r.mean),
            fmt_f64(r.std),
            fmt_f64(r.mc_se),
            r.losses.len().to_string(),
            r.unconverged.to_string(),
        ]);
    }
    Ok(vec![Output {
        name: "sweep".into(),
        kind: None,
        seed: None,
        table,
        wall,
        summary: json!({ "unconverged_runs": unconverged }),
    }])
}

fn run_maps(c: &ExperimentConfig) -> Result<Vec<Output>> {
    let f = c.distribution.features();
    jobs(c)
        .par_iter()
        .map(|&(kind, seed)| {
            let (maps, wall) = timed(|| {
                let state = if c.maps.train {
                    flow::terminal_loss(kind, &c.distribution, c.heads, c.seq_len, &c.terminal_config(seed))?.state
                } else {
                    OrderState::initial(c.heads, f, c.eta)
                };
                Ok(analysis::attention_maps(&state, kind, &c.distribution, c.seq_len, c.maps.n_sequences, seed)?)
            })?;
            let mut table = Table::new(["sequence", "epsilon", "head", "position", "score"]);
            for (i, m) in maps.iter().enumerate() {
                for h in 0..m.scores.nrows() {
                    for l in 0..m.scores.ncols() {
                        table.push(vec![
                            (i + 1).to_string(),
                            (m.epsilon + 1).to_string(),
                            (h + 1).to_string(),
                            (l + 1).to_string(),
                            fmt_f64(m.scores[(h, l)]),
                        ]);
                    }
                }
            }
            Ok(Output {
                name: format!("maps_{kind}_s{seed}"),
                kind: Some(kind),
                seed: Some(seed),
                table,
                wall,
                summary: json!({ "sequences": maps.len(), "trained": c.maps.train }),
            })
        })
        .collect()
}

/// Runs `exp` and returns the CSV paths written (each with a `.json` sidecar).
pub fn run(exp: Experiment, config: &ExperimentConfig, threads: usize) -> Result<Vec<PathBuf>> {
    config.require_for(exp).map_err(|e| anyhow!(e))?;
    let outputs = match exp {
        Experiment::Flow => run_flow(config),
        Experiment::Sgd => run_sgd(config),
        Experiment::Compare => run_compare(config),
        Experiment::Bayes => run_bayes(config),
        Experiment::Hessian => run_hessian(config),
        Experiment::Prune => run_prune(config),
        Experiment::Sweep => run_sweep(config),
        Experiment::Maps => run_maps(config),
    }
    .with_context(|| format!("experiment `{exp}` failed"))?;
    write_outputs(exp, config, threads, &outputs)
}

fn write_outputs(exp: Experiment, config: &ExperimentConfig, threads: usize, outputs: &[Output]) -> Result<Vec<PathBuf>> {
    let dir: &Path = &config.out;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut echo = config.clone();
    echo.experiment = Some(exp);
    let mut paths = Vec::new();
    for o in outputs {
        let path = dir.join(format!("{}.csv", o.name));
        o.table.write(&path)?;
        output::write_sidecar(
            &path,
            &Sidecar {
                experiment: exp.name(),
                file: format!("{}.csv", o.name),
                kind: o.kind.map(|k| k.to_string()),
                seed: o.seed,
                seeds: &config.seeds,
                threads,
                version: env!("CARGO_PKG_VERSION"),
                wall_time_s: o.wall,
                config: &echo,
                summary: o.summary.clone(),
            },
        )?;
        log::info!("wrote {}", path.display());
        paths.push(path);
    }
    Ok(paths)
}
