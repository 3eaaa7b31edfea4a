//! Terminal-loss sweeps over the number of heads, the signal strength or
//! the number of pruned heads, with the Bayes risk alongside.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::analysis::heads::prune_heads;
use crate::bayes::bayes_risk;
use crate::error::{Error, Result};
use crate::flow::{terminal_loss, TerminalConfig};
use crate::latent::{sample_mc_set_in, ThetaDistribution};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of heads H.
    Heads,
    /// Signal strength ν (see [`ThetaDistribution::with_signal`]).
    Signal,
    /// Number of pruned heads H̃ of a model trained at `heads`.
    Pruned,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub kinds: Vec<ActivationKind>,
    pub dist: ThetaDistribution,
    pub heads: usize,
    pub seq_len: usize,
    pub seeds: Vec<u64>,
    /// Template; the flow seed is replaced by each entry of `seeds`.
    pub terminal: TerminalConfig,
    pub bayes_n_mc: usize,
    /// Samples used for the greedy pruning decisions and losses.
    pub prune_n_mc: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    /// None for the Bayes-risk row.
    pub kind: Option<ActivationKind>,
    pub mean: f64,
    /// Run-to-run standard deviation over seeds.
    pub std: f64,
    /// Monte-Carlo standard error of `mean`.
    pub mc_se: f64,
    pub losses: Vec<f64>,
    pub unconverged: usize,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn get(&self, value: f64, kind: Option<ActivationKind>) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.kind == kind && (r.value - value).abs() < 1e-12)
    }
}

struct Run {
    loss: f64,
    se: f64,
    converged: bool,
}

fn as_count(x: f64, what: &str) -> Result<usize> {
    if x.is_finite() && x >= 0.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(Error::InvalidConfig(format!("{what} grid value {x} is not a non-negative integer")))
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Empty("sweep grid"));
        }
        if self.kinds.is_empty() {
            return Err(Error::Empty("sweep kinds"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("sweep seeds"));
        }
        self.terminal.flow.validate()?;
        for &x in &self.grid {
            match self.axis {
                SweepAxis::Heads => {
                    if as_count(x, "heads")? == 0 {
                        return Err(Error::InvalidConfig("heads grid value must be at least 1".into()));
                    }
                }
                SweepAxis::Pruned => {
                    if as_count(x, "pruned")? >= self.heads {
                        return Err(Error::InvalidConfig(format!("cannot prune {x} of {} heads", self.heads)));
                    }
                }
                SweepAxis::Signal => {
                    self.dist.with_signal(x)?;
                }
            }
        }
        Ok(())
    }

    fn dist_at(&self, value: f64) -> Result<ThetaDistribution> {
        match self.axis {
            SweepAxis::Signal => self.dist.with_signal(value),
            _ => Ok(self.dist.clone()),
        }
    }

    fn terminal_for(&self, seed: u64) -> TerminalConfig {
        let mut t = self.terminal.clone();
        t.flow.seed = seed;
        t
    }
}

fn summarize(value: f64, kind: Option<ActivationKind>, runs: &[Run]) -> SweepRow {
    let n = runs.len() as f64;
    let losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
    let mean = losses.iter().sum::<f64>() / n;
    let std = if runs.len() > 1 {
        (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mc_se = runs.iter().map(|r| r.se * r.se).sum::<f64>().sqrt() / n;
    let unconverged = runs.iter().filter(|r| !r.converged).count();
    SweepRow { value, kind, mean, std, mc_se, losses, unconverged }
}

/// Runs every (grid point, kind, seed) job in parallel and merges results in
/// grid order, kinds in the configured order, then the Bayes row.
pub fn sweep(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let l = config.seq_len;
    let mut per_point: Vec<Vec<(ActivationKind, Vec<Run>)>> = Vec::new();
    match config.axis {
        SweepAxis::Heads | SweepAxis::Signal => {
            let jobs: Vec<(usize, usize, u64)> = (0..config.grid.len())
                .flat_map(|g| (0..config.kinds.len()).flat_map(move |k| config.seeds.iter().map(move |&s| (g, k, s))))
                .collect();
            let results: Vec<Result<Run>> = jobs
                .par_iter()
                .map(|&(g, k, seed)| {
                    let value = config.grid[g];
                    let dist = config.dist_at(value)?;
                    let heads = if config.axis == SweepAxis::Heads { value as usize } else { config.heads };
                    let t = terminal_loss(config.kinds[k], &dist, heads, l, &config.terminal_for(seed))?;
                    Ok(Run { loss: t.loss, se: t.se, converged: t.converged })
                })
                .collect();
            let mut it = results.into_iter();
            for _ in &config.grid {
                let mut kinds = Vec::new();
                for &kind in &config.kinds {
                    let runs = (0..config.seeds.len()).map(|_| it.next().expect("one result per job")).collect::<Result<Vec<_>>>()?;
                    kinds.push((kind, runs));
                }
                per_point.push(kinds);
            }
        }
        SweepAxis::Pruned => {
            let max_pruned = config.grid.iter().map(|&x| x as usize).max().unwrap_or(0);
            let jobs: Vec<(usize, u64)> =
                (0..config.kinds.len()).flat_map(|k| config.seeds.iter().map(move |&s| (k, s))).collect();
            let results: Vec<Result<Vec<Run>>> = jobs
                .par_iter()
                .map(|&(k, seed)| {
                    let kind = config.kinds[k];
                    let t = terminal_loss(kind, &config.dist, config.heads, l, &config.terminal_for(seed))?;
                    let mc = sample_mc_set_in(
                        &config.dist,
                        l,
                        config.heads,
                        config.prune_n_mc,
                        rng::derive_seed(seed, 0x9A0E),
                        Domain::Evaluation,
                    );
                    let rep = prune_heads(&t.state, kind, &mc, Some(max_pruned.max(1).min(config.heads - 1)))?;
                    Ok(config
                        .grid
                        .iter()
                        .map(|&x| {
                            let st = &rep.stages[x as usize];
                            Run { loss: st.loss, se: st.se, converged: t.converged }
                        })
                        .collect())
                })
                .collect();
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            for g in 0..config.grid.len() {
                let mut kinds = Vec::new();
                for (k, &kind) in config.kinds.iter().enumerate() {
                    let runs = (0..config.seeds.len())
                        .map(|s| {
                            let r = &results[k * config.seeds.len() + s][g];
                            Run { loss: r.loss, se: r.se, converged: r.converged }
                        })
                        .collect();
                    kinds.push((kind, runs));
                }
                per_point.push(kinds);
            }
        }
    }

    let bayes_seed = rng::derive_seed(config.seeds[0], 0xBA7E5);
    let mut rows = Vec::new();
    let mut fixed_bayes = None;
    for (g, kinds) in per_point.into_iter().enumerate() {
        let value = config.grid[g];
        for (kind, runs) in kinds {
            let row = summarize(value, Some(kind), &runs);
            if row.unconverged > 0 {
                log::warn!("{kind} at {value}: {} of {} runs did not plateau", row.unconverged, runs.len());
            }
            rows.push(row);
        }
        let (risk, se) = match (config.axis, fixed_bayes) {
            (SweepAxis::Signal, _) => bayes_risk(&config.dist_at(value)?, l, config.bayes_n_mc, bayes_seed)?,
            (_, Some(b)) => b,
            (_, None) => *fixed_bayes.insert(bayes_risk(&config.dist, l, config.bayes_n_mc, bayes_seed)?),
        };
        rows.push(SweepRow { value, kind: None, mean: risk, std: 0.0, mc_se: se, losses: vec![risk], unconverged: 0 });
    }
    Ok(SweepReport { axis: config.axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

    fn small(axis: SweepAxis, grid: Vec<f64>) -> SweepConfig {
        SweepConfig {
            axis,
            grid,
            kinds: vec![ActivationKind::Softmax, ActivationKind::BSoftmax],
            dist: ThetaDistribution::flipping_basis(4.0, 2).unwrap(),
            heads: 3,
            seq_len: 4,
            seeds: vec![1, 2],
            terminal: TerminalConfig {
                flow: FlowConfig { step: 0.1, n_mc: 2000, tau_max: 3.0, record_every: 10, ..FlowConfig::default() },
                eval_n_mc: 2000,
                ..TerminalConfig::default()
            },
            bayes_n_mc: 2000,
            prune_n_mc: 2000,
        }
    }

    #[test]
    fn rejects_empty_inputs() {
        let mut c = small(SweepAxis::Heads, vec![]);
        assert!(matches!(sweep(&c), Err(Error::Empty(_))));
        c.grid = vec![2.0];
        c.kinds.clear();
        assert!(matches!(sweep(&c), Err(Error::Empty(_))));
        let c = small(SweepAxis::Pruned, vec![3.0]);
        assert!(c.validate().is_err());
        let c = small(SweepAxis::Heads, vec![1.5]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn rows_in_grid_order_with_bayes() {
        let c = small(SweepAxis::Heads, vec![1.0, 2.0]);
        let rep = sweep(&c).unwrap();
        assert_eq!(rep.rows.len(), 2 * 3);
        let kinds: Vec<_> = rep.rows.iter().map(|r| r.kind).collect();
        assert_eq!(kinds[2], None);
        assert_eq!(kinds[0], Some(ActivationKind::Softmax));
        assert_eq!(rep.rows[3].value, 2.0);
        let bayes = rep.get(1.0, None).unwrap().mean;
        for r in &rep.rows {
            assert_eq!(r.losses.len(), if r.kind.is_some() { 2 } else { 1 });
            assert!(r.mean >= bayes - 0.05);
        }
        // deterministic given seeds
        let again = sweep(&c).unwrap();
        assert_eq!(rep.rows[0].losses, again.rows[0].losses);
    }

    #[test]
    fn pruned_axis_starts_from_the_full_model() {
        let c = small(SweepAxis::Pruned, vec![0.0, 1.0, 2.0]);
        let rep = sweep(&c).unwrap();
        assert_eq!(rep.rows.len(), 3 * 3);
        assert!(rep.get(2.0, Some(ActivationKind::Softmax)).is_some());
    }
}
