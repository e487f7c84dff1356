//! Run configuration: a TOML document whose tables mirror [`RunConfig`].
//!
//! Grammar (every table except `mdp`, `features`, `improve`, `federation` and `schedule`
//! may be omitted):
//!
//! ```toml
//! output_path = "runs/small.csv"     # raw per-replication CSV
//! replications = [1, 2, 3]           # one federated run per seed
//! constants_report = true            # solve fixed points and write the constants block
//! summary = true                     # also write <output>.summary.csv with 95% bands
//!
//! [mdp]
//! num_states = 25                    # >= 2
//! num_actions = 25                   # >= 2
//! kernel_seed = 1
//! reward_seed = 2
//! reward_cap = 10.0                  # > 0
//! discount = 0.2                     # in [0, 1)
//!
//! [features]
//! kind = "tiled"                     # "tiled" (needs d1 <= S, d2 <= A) or "full_indicator"
//! d1 = 5
//! d2 = 5
//!
//! [improve]
//! variant = "softmax"                # "softmax" (needs temperature > 0), "greedy", or "fixed"
//! temperature = 100.0
//! # policy_file = "pi.txt"           # "fixed" only; the uniform policy when absent
//!
//! [heterogeneity]
//! eps_p = 0.0                        # in [0, 2]
//! eps_r = 0.0                        # in [0, 2]
//! family_seed = 0
//!
//! [federation]
//! n_agents = 10                      # >= 1
//! sync_period = 10                   # K >= 1
//! total_iters = 50000                # T >= 1
//! projection_radius = 1000.0         # > 0
//! master_seed = 0                    # seeds the long-run reference
//!
//! [schedule]
//! variant = "constant"               # "constant" (alpha0 >= 0) or "linear_decay"
//! alpha0 = 0.01
//! # w = 0.1                          # linear_decay: oracle w when absent
//! # offset = 1000.0                  # linear_decay: smallest admissible offset when absent
//!
//! [reference]
//! mode = "oracle"                    # "oracle" or "long_run"
//! target = "agent1"                  # "agent1" or "central"
//! long_run_iters = 1000000
//! # decay_w = 0.1                    # long_run: w at the zero parameter when absent
//! # decay_offset = 1000.0
//!
//! [mixing]
//! # m = 2.0                          # give both m and rho to skip estimation
//! # rho = 0.5
//! horizon = 200
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_path: String,
    pub replications: Vec<u64>,
    #[serde(default = "yes")]
    pub constants_report: bool,
    #[serde(default = "yes")]
    pub summary: bool,
    pub mdp: MdpSection,
    pub features: FeatureSection,
    pub improve: ImproveSection,
    #[serde(default)]
    pub heterogeneity: HeterogeneitySection,
    pub federation: FederationSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub mixing: MixingSection,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSection {
    pub num_states: usize,
    pub num_actions: usize,
    pub kernel_seed: u64,
    pub reward_seed: u64,
    pub reward_cap: f64,
    pub discount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSection {
    Tiled { d1: usize, d2: usize },
    FullIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImproveSection {
    Softmax {
        temperature: f64,
    },
    Greedy,
    Fixed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy_file: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneitySection {
    #[serde(default)]
    pub eps_p: f64,
    #[serde(default)]
    pub eps_r: f64,
    #[serde(default)]
    pub family_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub n_agents: usize,
    pub sync_period: usize,
    pub total_iters: u64,
    pub projection_radius: f64,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Constant {
        alpha0: f64,
    },
    LinearDecay {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    #[default]
    Oracle,
    LongRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceTarget {
    #[default]
    Agent1,
    Central,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    #[serde(default)]
    pub mode: ReferenceMode,
    #[serde(default)]
    pub target: ReferenceTarget,
    #[serde(default = "default_long_run_iters")]
    pub long_run_iters: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_offset: Option<f64>,
}

fn default_long_run_iters() -> u64 {
    1_000_000
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self {
            mode: ReferenceMode::default(),
            target: ReferenceTarget::default(),
            long_run_iters: default_long_run_iters(),
            decay_w: None,
            decay_offset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default = "default_mixing_horizon")]
    pub horizon: usize,
}

fn default_mixing_horizon() -> usize {
    200
}

impl Default for MixingSection {
    fn default() -> Self {
        Self {
            m: None,
            rho: None,
            horizon: default_mixing_horizon(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", located(*line, *column, message))]
    Parse {
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
    #[error("{}field `{field}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        field: String,
        line: Option<usize>,
        message: String,
    },
}

fn located(line: Option<usize>, column: Option<usize>, message: &str) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!("line {l}, column {c}: {message}"),
        (Some(l), None) => format!("line {l}: {message}"),
        _ => message.to_string(),
    }
}

/// A failed range check before it is tied to a source line.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn issue(field: &'static str, message: impl Into<String>) -> FieldIssue {
    FieldIssue {
        field,
        message: message.into(),
    }
}

fn finite_positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl RunConfig {
    /// Parse and range-check; diagnostics point at the offending line when possible.
    pub fn from_toml_str(source: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(source).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => {
                    let (l, c) = line_col(source, span.start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            ConfigError::Parse {
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })?;
        if let Err(FieldIssue { field, message }) = config.validate() {
            return Err(ConfigError::Invalid {
                line: locate_field(source, field),
                field: field.to_string(),
                message,
            });
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&source)
    }

    /// Canonical serialisation; parsing it back yields an equal config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configs always serialise")
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), FieldIssue> {
        if self.output_path.trim().is_empty() {
            return Err(issue("output_path", "must not be empty"));
        }
        if self.replications.is_empty() {
            return Err(issue("replications", "need at least one seed"));
        }
        let mut seen = self.replications.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(issue("replications", "seeds must be distinct"));
        }

        let m = &self.mdp;
        if m.num_states < 2 {
            return Err(issue("mdp.num_states", "must be at least 2"));
        }
        if m.num_actions < 2 {
            return Err(issue("mdp.num_actions", "must be at least 2"));
        }
        if !finite_positive(m.reward_cap) {
            return Err(issue("mdp.reward_cap", "must be finite and positive"));
        }
        if !(0.0..1.0).contains(&m.discount) {
            return Err(issue("mdp.discount", "must lie in [0, 1)"));
        }

        if let FeatureSection::Tiled { d1, d2 } = self.features {
            if d1 == 0 || d1 > m.num_states {
                return Err(issue("features.d1", format!("must lie in 1..={}", m.num_states)));
            }
            if d2 == 0 || d2 > m.num_actions {
                return Err(issue("features.d2", format!("must lie in 1..={}", m.num_actions)));
            }
        }

        if let ImproveSection::Softmax { temperature } = self.improve {
            if !finite_positive(temperature) {
                return Err(issue("improve.temperature", "must be finite and positive"));
            }
        }

        let h = &self.heterogeneity;
        if !(0.0..=2.0).contains(&h.eps_p) {
            return Err(issue("heterogeneity.eps_p", "must lie in [0, 2]"));
        }
        if !(0.0..=2.0).contains(&h.eps_r) {
            return Err(issue("heterogeneity.eps_r", "must lie in [0, 2]"));
        }

        let f = &self.federation;
        if f.n_agents == 0 {
            return Err(issue("federation.n_agents", "must be at least 1"));
        }
        if f.sync_period == 0 {
            return Err(issue("federation.sync_period", "must be at least 1"));
        }
        if f.total_iters == 0 {
            return Err(issue("federation.total_iters", "must be at least 1"));
        }
        if !finite_positive(f.projection_radius) {
            return Err(issue("federation.projection_radius", "must be finite and positive"));
        }

        match self.schedule {
            ScheduleSection::Constant { alpha0 } => {
                if !(alpha0.is_finite() && alpha0 >= 0.0) {
                    return Err(issue("schedule.alpha0", "must be finite and non-negative"));
                }
            }
            ScheduleSection::LinearDecay { w, offset } => {
                if w.is_some_and(|w| !finite_positive(w)) {
                    return Err(issue("schedule.w", "must be finite and positive"));
                }
                if offset.is_some_and(|a| !finite_positive(a)) {
                    return Err(issue("schedule.offset", "must be finite and positive"));
                }
            }
        }

        let r = &self.reference;
        if r.mode == ReferenceMode::LongRun && r.long_run_iters == 0 {
            return Err(issue("reference.long_run_iters", "must be at least 1"));
        }
        if r.decay_w.is_some_and(|w| !finite_positive(w)) {
            return Err(issue("reference.decay_w", "must be finite and positive"));
        }
        if r.decay_offset.is_some_and(|a| !finite_positive(a)) {
            return Err(issue("reference.decay_offset", "must be finite and positive"));
        }

        let x = &self.mixing;
        match (x.m, x.rho) {
            (None, None) => {}
            (Some(m), Some(rho)) => {
                if !(m.is_finite() && m >= 1.0) {
                    return Err(issue("mixing.m", "must be finite and at least 1"));
                }
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(issue("mixing.rho", "must lie in (0, 1)"));
                }
            }
            (Some(_), None) => return Err(issue("mixing.rho", "required when mixing.m is given")),
            (None, Some(_)) => return Err(issue("mixing.m", "required when mixing.rho is given")),
        }
        if x.horizon == 0 {
            return Err(issue("mixing.horizon", "must be at least 1"));
        }
        Ok(())
    }
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// 1-based line defining the dotted key `table.key` (or a top-level `key`).
pub fn locate_field(source: &str, field: &str) -> Option<usize> {
    let (table, key) = match field.rsplit_once('.') {
        Some((t, k)) => (t, k),
        None => ("", field),
    };
    let mut current = "";
    let mut table_line = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.split(']').next().unwrap_or("").trim();
            if current == table {
                table_line = Some(i + 1);
            }
            continue;
        }
        if current != table {
            continue;
        }
        if let Some((lhs, _)) = line.split_once('=') {
            if lhs.trim() == key {
                return Some(i + 1);
            }
        }
    }
    table_line
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
output_path = "out.csv"
replications = [1, 2]

[mdp]
num_states = 6
num_actions = 3
kernel_seed = 1
reward_seed = 2
reward_cap = 1.5
discount = 0.3

[features]
kind = "tiled"
d1 = 3
d2 = 1

[improve]
variant = "softmax"
temperature = 10.0

[federation]
n_agents = 2
sync_period = 5
total_iters = 100
projection_radius = 50.0

[schedule]
variant = "constant"
alpha0 = 0.05
"#;

    #[test]
    fn defaults_fill_optional_tables() {
        let c = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(c.heterogeneity, HeterogeneitySection::default());
        assert_eq!(c.reference.mode, ReferenceMode::Oracle);
        assert_eq!(c.reference.target, ReferenceTarget::Agent1);
        assert_eq!(c.mixing.horizon, 200);
        assert!(c.constants_report);
    }

    #[test]
    fn serialisation_round_trips() {
        let mut c = RunConfig::from_toml_str(SAMPLE).unwrap();
        c.mdp.discount = 0.1 + 0.2;
        c.schedule = ScheduleSection::LinearDecay {
            w: Some(1.0 / 3.0),
            offset: None,
        };
        c.improve = ImproveSection::Fixed {
            policy_file: Some("p.txt".into()),
        };
        c.mixing.m = Some(2.5);
        c.mixing.rho = Some(0.7);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml_str(SAMPLE).unwrap();
        let mut b = a.clone();
        b.replications.push(3);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn range_errors_name_field_and_line() {
        let src = SAMPLE.replace("sync_period = 5", "sync_period = 0");
        match RunConfig::from_toml_str(&src) {
            Err(ConfigError::Invalid { field, line, .. }) => {
                assert_eq!(field, "federation.sync_period");
                assert_eq!(line, Some(src.lines().position(|l| l.starts_with("sync_period")).unwrap() + 1));
            }
            other => panic!("{other:?}"),
        }
        let src = SAMPLE.replace("discount = 0.3", "discount = 1.0");
        let err = RunConfig::from_toml_str(&src).unwrap_err().to_string();
        assert!(err.contains("mdp.discount"), "{err}");
        assert!(err.starts_with("line "), "{err}");
    }

    #[test]
    fn syntax_and_unknown_keys_report_position() {
        let src = SAMPLE.replace("d2 = 1", "d2 = ");
        assert!(matches!(RunConfig::from_toml_str(&src), Err(ConfigError::Parse { line: Some(_), .. })));
        let src = SAMPLE.replace("alpha0 = 0.05", "alpha0 = 0.05\nbogus = 1");
        let err = RunConfig::from_toml_str(&src).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn mixing_pair_required() {
        let src = format!("{SAMPLE}\n[mixing]\nm = 2.0\n");
        let err = RunConfig::from_toml_str(&src).unwrap_err();
        assert!(err.to_string().contains("mixing.rho"), "{err}");
    }
}
