//! TOML experiment configuration.
//!
//! Precedence: command-line flags override the file, the file overrides the
//! defaults below.

use std::fmt;
use std::path::{Path, PathBuf};

use headlab::analysis::SweepAxis;
use headlab::attention::{SgdConfig, SgdMode};
use headlab::flow::{FlowConfig, TerminalConfig};
use headlab::{ActivationKind, ThetaDistribution};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Flow,
    Sgd,
    Compare,
    Bayes,
    Prune,
    Hessian,
    Sweep,
    Maps,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Flow => "flow",
            Experiment::Sgd => "sgd",
            Experiment::Compare => "compare",
            Experiment::Bayes => "bayes",
            Experiment::Prune => "prune",
            Experiment::Hessian => "hessian",
            Experiment::Sweep => "sweep",
            Experiment::Maps => "maps",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_seq_len() -> usize {
    5
}
fn default_heads() -> usize {
    2
}
fn default_eta() -> f64 {
    1.0
}
fn default_kinds() -> Vec<ActivationKind> {
    vec![ActivationKind::Softmax]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_n_mc() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; when present it must match the subcommand.
    #[serde(default)]
    pub experiment: Option<Experiment>,
    pub distribution: ThetaDistribution,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<ActivationKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub sgd: Option<SgdSection>,
    #[serde(default)]
    pub terminal: TerminalSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub hessian: McSection,
    #[serde(default)]
    pub bayes: McSection,
    #[serde(default)]
    pub maps: MapsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub step: f64,
    pub n_mc: usize,
    pub tau_max: f64,
    pub init_noise: f64,
    pub record_every: usize,
    pub fresh_mc: bool,
}

impl Default for FlowSection {
    fn default() -> Self {
        let f = FlowConfig::default();
        FlowSection {
            step: f.step,
            n_mc: f.n_mc,
            tau_max: f.tau_max,
            init_noise: f.init_noise,
            record_every: f.record_every,
            fresh_mc: f.fresh_mc,
        }
    }
}

impl FlowSection {
    pub fn to_config(&self, seed: u64) -> FlowConfig {
        FlowConfig {
            step: self.step,
            n_mc: self.n_mc,
            tau_max: self.tau_max,
            seed,
            init_noise: self.init_noise,
            record_every: self.record_every,
            fresh_mc: self.fresh_mc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgdModeName {
    Dense,
    Projected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    pub dim: usize,
    pub steps: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Defaults to `dim`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub mode: Option<SgdModeName>,
}

impl SgdSection {
    pub fn to_config(&self, seed: u64) -> SgdConfig {
        let mut c = SgdConfig::defaults(self.dim, self.steps, seed);
        if let Some(x) = self.learning_rate {
            c.learning_rate = x;
        }
        if let Some(x) = self.batch_size {
            c.batch_size = x;
        }
        if let Some(x) = self.record_every {
            c.record_every = x;
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                SgdModeName::Dense => SgdMode::Dense,
                SgdModeName::Projected => SgdMode::Projected,
            };
        }
        c
    }
}

/// Settings for runs that train to a plateau (prune, sweep, maps). The flow
/// block supplies step, n_mc, init_noise and fresh_mc.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalSection {
    pub tau_max: f64,
    pub eval_n_mc: usize,
    pub plateau_window: f64,
    pub plateau_rtol: f64,
}

impl Default for TerminalSection {
    fn default() -> Self {
        let t = TerminalConfig::default();
        TerminalSection {
            tau_max: t.flow.tau_max,
            eval_n_mc: t.eval_n_mc,
            plateau_window: t.plateau_window,
            plateau_rtol: t.plateau_rtol,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    #[serde(default = "default_n_mc")]
    pub bayes_n_mc: usize,
    #[serde(default = "default_n_mc")]
    pub prune_n_mc: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub n_mc: usize,
    /// Defaults to pruning down to a single head.
    pub max_removals: Option<usize>,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection { n_mc: default_n_mc(), max_removals: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_mc: usize,
}

impl Default for McSection {
    fn default() -> Self {
        McSection { n_mc: default_n_mc() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapsSection {
    pub n_sequences: usize,
    /// Train to a plateau first; otherwise maps are taken at the initial state.
    pub train: bool,
}

impl Default for MapsSection {
    fn default() -> Self {
        MapsSection { n_sequences: 20, train: true }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Syntax { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}{}: {message}", .line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid { path: PathBuf, line: Option<usize>, message: String },
}

/// Closest candidate within edit distance 3.
fn suggest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(word, c), c))
        .filter(|(d, _)| *d <= 3)
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

/// Adds a "did you mean" hint to serde's unknown-field/variant messages,
/// which list the candidates in backticks after "expected".
fn with_suggestion(message: &str) -> String {
    let unknown = ["unknown field `", "unknown variant `"].iter().find_map(|p| {
        let start = message.find(p)? + p.len();
        let end = start + message[start..].find('`')?;
        Some(&message[start..end])
    });
    let Some(word) = unknown else { return message.to_string() };
    let Some(idx) = message.find("expected") else { return message.to_string() };
    let candidates: Vec<&str> = message[idx..].split('`').skip(1).step_by(2).collect();
    match suggest(word, candidates) {
        Some(c) => format!("{}; did you mean `{c}`?", message.trim_end()),
        None => message.to_string(),
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

/// Line of `key = ...` inside `[table]` (or at top level when `table` is empty).
fn locate(src: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == table {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

pub fn parse_str(src: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(src, s.start)).unwrap_or((0, 0));
        ConfigError::Syntax { path: path.to_path_buf(), line, column, message: with_suggestion(e.message()) }
    })?;
    cfg.validate().map_err(|(table, key, message)| ConfigError::Invalid {
        path: path.to_path_buf(),
        line: locate(src, table, key),
        message: if table.is_empty() { format!("{key}: {message}") } else { format!("{table}.{key}: {message}") },
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_str(&src, path)
}

type Invalid = (&'static str, &'static str, String);

fn check(ok: bool, table: &'static str, key: &'static str, msg: impl Into<String>) -> Result<(), Invalid> {
    if ok {
        Ok(())
    } else {
        Err((table, key, msg.into()))
    }
}

fn distribution_key(d: &ThetaDistribution) -> &'static str {
    match d {
        ThetaDistribution::FlippingSpike { nu1, .. } if !(nu1.is_finite() && *nu1 > 0.0) => "nu1",
        ThetaDistribution::FlippingSpike { .. } => "nu2",
        ThetaDistribution::FlippingBasis { nu, .. } if !(nu.is_finite() && *nu > 0.0) => "nu",
        ThetaDistribution::FlippingBasis { .. } => "features",
        ThetaDistribution::AnisoGaussian { nu1, .. } if !(nu1.is_finite() && *nu1 > 0.0) => "nu1",
        ThetaDistribution::AnisoGaussian { features, .. } if *features < 1 => "features",
        ThetaDistribution::AnisoGaussian { .. } => "nu2",
    }
}

impl ExperimentConfig {
    /// Returns (table, key, message) of the first problem found.
    fn validate(&self) -> Result<(), Invalid> {
        if let Err(e) = self.distribution.validate() {
            return Err(("distribution", distribution_key(&self.distribution), e.to_string()));
        }
        check(self.seq_len >= 2, "", "seq_len", "must be at least 2")?;
        check(self.heads >= 1, "", "heads", "must be at least 1")?;
        check(self.eta.is_finite() && self.eta >= 0.0, "", "eta", "must be finite and non-negative")?;
        check(!self.kinds.is_empty(), "", "kinds", "must list at least one activation")?;
        check(!self.seeds.is_empty(), "", "seeds", "must list at least one seed")?;
        if let Err(e) = self.flow.to_config(0).validate() {
            return Err(("flow", "step", e.to_string()));
        }
        check(self.terminal.tau_max > 0.0, "terminal", "tau_max", "must be positive")?;
        check(self.terminal.eval_n_mc >= 2, "terminal", "eval_n_mc", "must be at least 2")?;
        if let Some(s) = &self.sgd {
            check(s.dim >= 1, "sgd", "dim", "must be positive")?;
            if let Err(e) = s.to_config(0).validate() {
                return Err(("sgd", "steps", e.to_string()));
            }
        }
        if let Some(s) = &self.sweep {
            check(!s.grid.is_empty(), "sweep", "grid", "must not be empty")?;
        }
        check(self.maps.n_sequences >= 1, "maps", "n_sequences", "must be positive")?;
        Ok(())
    }

    /// Checks that the blocks the experiment needs are present.
    pub fn require_for(&self, exp: Experiment) -> Result<(), String> {
        if let Some(e) = self.experiment {
            if e != exp {
                return Err(format!("config declares experiment = \"{e}\" but `{exp}` was requested"));
            }
        }
        match exp {
            Experiment::Sgd | Experiment::Compare if self.sgd.is_none() => {
                Err(format!("experiment `{exp}` needs an [sgd] block"))
            }
            Experiment::Sweep if self.sweep.is_none() => Err("experiment `sweep` needs a [sweep] block".into()),
            _ => Ok(()),
        }
    }

    pub fn terminal_config(&self, seed: u64) -> TerminalConfig {
        let mut flow = self.flow.to_config(seed);
        flow.tau_max = self.terminal.tau_max;
        flow.record_every = ((10.0 / flow.step).round() as usize).max(1);
        TerminalConfig {
            flow,
            eta: self.eta,
            eval_n_mc: self.terminal.eval_n_mc,
            plateau_window: self.terminal.plateau_window,
            plateau_rtol: self.terminal.plateau_rtol,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> Result<ExperimentConfig, ConfigError> {
        parse_str(src, Path::new("test.toml"))
    }

    #[test]
    fn minimal_flow_config_uses_defaults() {
        let c = parse("[distribution]\nkind = \"flipping_spike\"\nnu1 = 2.0\nnu2 = 2.0\n").unwrap();
        assert_eq!(c.flow.step, 0.02);
        assert_eq!(c.flow.n_mc, 100_000);
        assert_eq!(c.seq_len, 5);
        assert_eq!(c.kinds, vec![ActivationKind::Softmax]);
        assert!(c.require_for(Experiment::Flow).is_ok());
        assert!(c.require_for(Experiment::Sgd).is_err());
    }

    #[test]
    fn negative_nu_rejected_with_line() {
        let err = parse("heads = 2\n[distribution]\nkind = \"flipping_basis\"\nnu = -1.0\nfeatures = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.toml:4"), "{msg}");
        assert!(msg.contains("distribution.nu"), "{msg}");
    }

    #[test]
    fn unknown_key_gets_suggestion() {
        let src = "[distribution]\nkind = \"flipping_spike\"\nnu1 = 2.0\nnu2 = 2.0\n[flow]\ntau_mx = 3.0\n";
        let msg = parse(src).unwrap_err().to_string();
        assert!(msg.contains("test.toml:6"), "{msg}");
        assert!(msg.contains("did you mean `tau_max`"), "{msg}");
        let msg = parse("temperture = 1.0\n[distribution]\nkind = \"flipping_spike\"\nnu1 = 1.0\nnu2 = 1.0\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("unknown field `temperture`"), "{msg}");
    }

    #[test]
    fn unknown_variant_gets_suggestion() {
        let msg = parse("kinds = [\"sofmax\"]\n[distribution]\nkind = \"flipping_spike\"\nnu1 = 1.0\nnu2 = 1.0\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("did you mean `softmax`"), "{msg}");
    }

    #[test]
    fn experiment_mismatch() {
        let c = parse("experiment = \"bayes\"\n[distribution]\nkind = \"flipping_spike\"\nnu1 = 1.0\nnu2 = 1.0\n").unwrap();
        assert!(c.require_for(Experiment::Bayes).is_ok());
        assert!(c.require_for(Experiment::Flow).is_err());
    }

    #[test]
    fn empty_seed_list_rejected() {
        let msg = parse("seeds = []\n[distribution]\nkind = \"flipping_spike\"\nnu1 = 1.0\nnu2 = 1.0\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains(":1:") || msg.contains("test.toml:1"), "{msg}");
    }
}
