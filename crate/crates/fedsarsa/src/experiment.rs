//! Building experiments from a [`RunConfig`], computing references and constants, and
//! running replicated federated simulations into a CSV run record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use fedsarsa_core::oracle::{curvature_at, report_from_fixed_points, BoundSettings};
use fedsarsa_core::{
    build_shifted_mdp, improve_policy, perturb_family, run_federation_with, run_single_agent, sarsa_fixed_point,
    Error as CoreError, FeatureMap, FederationConfig, FederationOutcome, FederationSetup, FixedPointOptions, Mdp,
    MdpFamily, MixingConstants, Parameter, PerturbationReport, PolicyImprovementOp, PolicyTable, Sequential,
    StepSchedule,
};
use rayon::prelude::*;

use crate::config::{
    ConfigError, FeatureSection, ImproveSection, ReferenceMode, ReferenceTarget, RunConfig, ScheduleSection,
};
use crate::formats::{parse_policy, FormatError};
use crate::parallel::{pool, RayonExecutor};

pub const CSV_HEADER: &str = "replication,t,mse,client_drift";
pub const SUMMARY_HEADER: &str = "t,mse_mean,mse_band_low,mse_band_high,client_drift_mean";
pub const META_MAGIC: &str = "fedsarsa-run v1";
/// Normal quantile for two-sided 95% bands.
pub const BAND_Z: f64 = 1.96;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] CoreError),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} belongs to a different configuration (hash {found}, expected {expected}); refusing to overwrite")]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error(
        "oracle reference did not converge after {iterations} iterations (residual {residual:.3e}); \
         set reference.mode = \"long_run\" instead"
    )]
    ReferenceNoConvergence { iterations: usize, residual: f64 },
}

impl RunError {
    /// Whether the failure is a bad input rather than a runtime problem.
    pub fn is_validation(&self) -> bool {
        match self {
            RunError::Config(_) | RunError::Format { .. } => true,
            RunError::Model(e) => matches!(
                e,
                CoreError::InvalidArgument(_) | CoreError::DimensionMismatch { .. } | CoreError::IndexOutOfRange { .. }
            ),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The simulated world described by a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub family: MdpFamily,
    pub features: FeatureMap,
    pub op: PolicyImprovementOp,
}

impl Experiment {
    pub fn build(cfg: &RunConfig) -> Result<Self, RunError> {
        let m = &cfg.mdp;
        let nominal = build_shifted_mdp(
            m.num_states,
            m.num_actions,
            m.kernel_seed,
            m.reward_seed,
            m.discount,
            m.reward_cap,
        )?;
        let h = &cfg.heterogeneity;
        let family = perturb_family(&nominal, cfg.federation.n_agents, h.eps_p, h.eps_r, h.family_seed)?;
        let features = match cfg.features {
            FeatureSection::Tiled { d1, d2 } => FeatureMap::tiled(m.num_states, m.num_actions, d1, d2)?,
            FeatureSection::FullIndicator => FeatureMap::full_indicator(m.num_states, m.num_actions)?,
        };
        let op = match &cfg.improve {
            ImproveSection::Softmax { temperature } => PolicyImprovementOp::softmax(*temperature)?,
            ImproveSection::Greedy => PolicyImprovementOp::Greedy,
            ImproveSection::Fixed { policy_file: None } => {
                PolicyImprovementOp::Fixed(PolicyTable::uniform(m.num_states, m.num_actions))
            }
            ImproveSection::Fixed {
                policy_file: Some(path),
            } => {
                let path = PathBuf::from(path);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let table = parse_policy(&text).map_err(|source| RunError::Format { path, source })?;
                PolicyImprovementOp::Fixed(table)
            }
        };
        Ok(Self { family, features, op })
    }

    pub fn reference_mdp(&self, target: ReferenceTarget) -> &Mdp {
        match target {
            ReferenceTarget::Agent1 => &self.family.agents()[0],
            ReferenceTarget::Central => self.family.central(),
        }
    }

    pub fn zero(&self) -> Parameter {
        Parameter::zeros(self.features.dim())
    }

    fn fixed_point(&self, mdp: &Mdp) -> Result<Parameter, RunError> {
        sarsa_fixed_point(mdp, &self.features, &self.op, &self.zero(), FixedPointOptions::default())
            .map(|fp| fp.theta)
            .map_err(|e| match e {
                CoreError::NoConvergence { iterations, residual } => {
                    RunError::ReferenceNoConvergence { iterations, residual }
                }
                other => other.into(),
            })
    }

    /// Fixed points of every agent, then the central MDP; solved in parallel.
    pub fn all_fixed_points(&self) -> Result<Vec<Parameter>, RunError> {
        let mdps: Vec<&Mdp> = self.family.all_with_central().collect();
        mdps.par_iter().map(|mdp| self.fixed_point(mdp)).collect()
    }

    /// `min_i w_i` over agents and the central MDP, each at its own fixed point.
    pub fn oracle_w(&self) -> Result<f64, RunError> {
        let points = self.all_fixed_points()?;
        let mut w = f64::INFINITY;
        for (mdp, theta) in self.family.all_with_central().zip(&points) {
            w = w.min(curvature_at(mdp, &self.features, &self.op, theta)?.0);
        }
        Ok(w)
    }
}

/// `θ_ref` for MSE rows: the oracle fixed point or a long decaying single-agent run.
pub fn compute_reference(cfg: &RunConfig, exp: &Experiment) -> Result<Parameter, RunError> {
    let r = &cfg.reference;
    let mdp = exp.reference_mdp(r.target);
    match r.mode {
        ReferenceMode::Oracle => exp.fixed_point(mdp),
        ReferenceMode::LongRun => {
            let w = match r.decay_w {
                Some(w) => w,
                None => curvature_at(mdp, &exp.features, &exp.op, &exp.zero())?.0,
            };
            let schedule = match r.decay_offset {
                Some(offset) => StepSchedule::linear_decay(w, offset, 1)?,
                None => StepSchedule::linear_decay_min_offset(w, 1)?,
            };
            Ok(run_single_agent(
                mdp,
                &exp.features,
                &exp.op,
                &schedule,
                r.long_run_iters,
                cfg.federation.master_seed,
                exp.zero(),
            )?)
        }
    }
}

pub fn resolve_schedule(cfg: &RunConfig, exp: &Experiment) -> Result<StepSchedule, RunError> {
    let k = cfg.federation.sync_period;
    Ok(match cfg.schedule {
        ScheduleSection::Constant { alpha0 } => StepSchedule::constant(alpha0)?,
        ScheduleSection::LinearDecay { w, offset } => {
            let w = match w {
                Some(w) => w,
                None => exp.oracle_w()?,
            };
            match offset {
                Some(a) => StepSchedule::linear_decay(w, a, k)?,
                None => StepSchedule::linear_decay_min_offset(w, k)?,
            }
        }
    })
}

/// Fixed points, problem constants and the perturbation-bound comparison for a config.
pub fn constants_report(cfg: &RunConfig, exp: &Experiment) -> Result<PerturbationReport, RunError> {
    let schedule = resolve_schedule(cfg, exp)?;
    let mixing = match (cfg.mixing.m, cfg.mixing.rho) {
        (Some(m), Some(rho)) => Some(MixingConstants::new(m, rho)?),
        _ => None,
    };
    let settings = BoundSettings {
        mixing,
        mixing_horizon: cfg.mixing.horizon,
        alpha0: schedule.step_size(0),
        sync_period: cfg.federation.sync_period,
        projection_radius: cfg.federation.projection_radius,
        fixed_point: FixedPointOptions::default(),
    };
    let points = exp.all_fixed_points()?;
    Ok(report_from_fixed_points(&exp.family, &exp.features, &exp.op, points, settings)?)
}

fn sci(x: f64) -> String {
    format!("{x:.16e}")
}

/// `key = value` lines describing a perturbation report.
pub fn format_report(report: &PerturbationReport) -> String {
    let c = &report.constants;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
    kv("m", sci(c.m));
    kv("rho", sci(c.rho));
    kv("sigma_prime", sci(c.sigma_prime));
    kv("sigma", sci(c.sigma));
    kv("G", sci(c.g));
    kv("H", sci(c.h));
    kv("w", sci(c.w));
    kv("lambda", sci(c.lambda));
    kv("eps_p", sci(c.eps_p));
    kv("eps_r", sci(c.eps_r));
    kv("Lambda", sci(c.lambda_het));
    kv("bound", sci(report.bound));
    kv("observed", sci(report.observed));
    kv("bound_holds", report.passed.to_string());
    kv("lipschitz_estimate", sci(report.lipschitz_estimate));
    kv("lipschitz_condition", report.lipschitz_condition.to_string());
    kv("radius_covers_fixed_points", report.radius_covers_fixed_points.to_string());
    out
}

fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| sci(*x)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads; results never depend on it.
    pub workers: usize,
    /// Overrides `output_path`.
    pub out: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1, out: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub seed: u64,
    pub final_mse: f64,
    pub max_sync_norm: f64,
    pub sync_count: u64,
    pub max_client_drift: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_hash: String,
    pub csv_path: PathBuf,
    pub meta_path: PathBuf,
    pub summary_path: Option<PathBuf>,
    pub rows: u64,
    pub reference: Parameter,
    pub replications: Vec<ReplicationSummary>,
    /// Constants block, or why it could not be produced.
    pub constants: Option<Result<PerturbationReport, String>>,
}

pub fn meta_path(csv: &Path) -> PathBuf {
    sidecar(csv, "meta")
}

pub fn summary_path(csv: &Path) -> PathBuf {
    sidecar(csv, "summary.csv")
}

fn sidecar(csv: &Path, ext: &str) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

/// `config_hash` recorded in an existing meta file.
pub fn recorded_hash(meta: &Path) -> Result<Option<String>, RunError> {
    if !meta.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(meta).map_err(io_err(meta))?;
    Ok(text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == "config_hash").then(|| v.trim().to_string())
    }))
}

fn guard_outputs(csv: &Path, meta: &Path, hash: &str) -> Result<(), RunError> {
    match recorded_hash(meta)? {
        Some(found) if found == hash => Ok(()),
        Some(found) => Err(RunError::HashMismatch {
            path: csv.to_path_buf(),
            found,
            expected: hash.to_string(),
        }),
        None if csv.exists() => Err(RunError::HashMismatch {
            path: csv.to_path_buf(),
            found: "none".into(),
            expected: hash.to_string(),
        }),
        None => Ok(()),
    }
}

struct ReplicationResult {
    rows: Vec<(f64, f64)>,
    outcome: FederationOutcome,
}

fn run_replication(
    cfg: &RunConfig,
    exp: &Experiment,
    schedule: &StepSchedule,
    reference: &Parameter,
    seed: u64,
    parallel_agents: bool,
) -> Result<ReplicationResult, RunError> {
    let f = &cfg.federation;
    let fed = FederationConfig {
        n_agents: f.n_agents,
        sync_period: f.sync_period,
        total_iters: f.total_iters,
        projection_radius: f.projection_radius,
        master_seed: seed,
    };
    let theta0 = exp.zero();
    let setup = FederationSetup {
        family: &exp.family,
        features: &exp.features,
        op: &exp.op,
        schedule,
        config: &fed,
        theta0: &theta0,
        reference,
    };
    let mut rows = Vec::with_capacity(f.total_iters as usize);
    let observer = |v: &fedsarsa_core::IterationView<'_>| rows.push((v.mse, v.client_drift));
    let outcome = if parallel_agents {
        run_federation_with(setup, &RayonExecutor, observer)?
    } else {
        run_federation_with(setup, &Sequential, observer)?
    };
    Ok(ReplicationResult { rows, outcome })
}

fn write_meta(
    path: &Path,
    cfg: &RunConfig,
    hash: &str,
    reference: &Parameter,
    reps: &[ReplicationSummary],
    constants: Option<&Result<PerturbationReport, String>>,
) -> Result<(), RunError> {
    let mut out = String::new();
    writeln!(out, "{META_MAGIC}").unwrap();
    writeln!(out, "config_hash = {hash}").unwrap();
    writeln!(
        out,
        "replications = {}",
        cfg.replications.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    )
    .unwrap();
    writeln!(out, "iterations = {}", cfg.federation.total_iters).unwrap();
    writeln!(out, "rows = {}", reps.len() as u64 * cfg.federation.total_iters).unwrap();
    writeln!(out, "reference_norm = {}", sci(reference.norm())).unwrap();
    writeln!(out, "reference = {}", format_vector(reference.as_slice())).unwrap();
    for r in reps {
        writeln!(out, "\n[replication {}]", r.seed).unwrap();
        writeln!(out, "final_mse = {}", sci(r.final_mse)).unwrap();
        writeln!(out, "max_client_drift = {}", sci(r.max_client_drift)).unwrap();
        writeln!(out, "max_sync_norm = {}", sci(r.max_sync_norm)).unwrap();
        writeln!(out, "sync_count = {}", r.sync_count).unwrap();
    }
    match constants {
        Some(Ok(report)) => {
            out.push_str("\n[constants]\n");
            out.push_str(&format_report(report));
        }
        Some(Err(reason)) => {
            out.push_str("\n[constants]\n");
            writeln!(out, "error = {}", reason.replace('\n', " ")).unwrap();
        }
        None => {}
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Run every replication and write `<out>`, `<out>.meta` and optionally `<out>.summary.csv`.
///
/// Replications run in parallel on `workers` threads; rows are written in replication order
/// by a single writer, so the bytes are independent of `workers`.
pub fn run_suite(cfg: &RunConfig, opts: &RunOptions) -> Result<RunRecord, RunError> {
    cfg.validate().map_err(|i| ConfigError::Invalid {
        field: i.field.to_string(),
        line: None,
        message: i.message,
    })?;
    let csv_path = opts.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_path));
    let meta = meta_path(&csv_path);
    let hash = cfg.hash();
    guard_outputs(&csv_path, &meta, &hash)?;

    let exp = Experiment::build(cfg)?;
    let reference = compute_reference(cfg, &exp)?;
    let schedule = resolve_schedule(cfg, &exp)?;
    // ergodicity and setup errors surface before any file is touched
    let pi0 = improve_policy(&exp.op, &exp.features, &exp.zero())?;
    for mdp in exp.family.agents() {
        fedsarsa_core::markov::check_ergodic(&mdp.induced_chain(&pi0)?, mdp.num_states())?;
    }

    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_meta(&meta, cfg, &hash, &reference, &[], None)?;

    let workers = opts.workers.max(1);
    let parallel_agents = workers > 1 && cfg.replications.len() == 1;
    let t_len = cfg.federation.total_iters as usize;
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "{CSV_HEADER}").map_err(io_err(&csv_path))?;

    let mut sums = if cfg.summary { vec![[0.0f64; 3]; t_len] } else { Vec::new() };
    let mut summaries = Vec::with_capacity(cfg.replications.len());
    let mut first_error: Option<RunError> = None;
    let (tx, rx) = mpsc::channel::<(usize, Result<ReplicationResult, RunError>)>();
    let thread_pool = pool(workers);
    std::thread::scope(|scope| {
        let (exp, schedule, reference) = (&exp, &schedule, &reference);
        scope.spawn(move || {
            thread_pool.install(|| {
                cfg.replications
                    .par_iter()
                    .enumerate()
                    .for_each_with(tx, |tx, (idx, &seed)| {
                        let res = run_replication(cfg, exp, schedule, reference, seed, parallel_agents);
                        let _ = tx.send((idx, res));
                    });
            });
        });

        let mut pending = BTreeMap::new();
        let mut next = 0usize;
        for (idx, res) in rx {
            pending.insert(idx, res);
            while let Some(res) = pending.remove(&next) {
                let seed = cfg.replications[next];
                next += 1;
                if first_error.is_some() {
                    continue;
                }
                match res {
                    Ok(rep) => {
                        let mut line = String::with_capacity(64);
                        for (i, &(mse, drift)) in rep.rows.iter().enumerate() {
                            line.clear();
                            writeln!(line, "{seed},{},{mse:.16e},{drift:.16e}", i + 1).unwrap();
                            if let Err(e) = writer.write_all(line.as_bytes()) {
                                first_error = Some(io_err(&csv_path)(e));
                                break;
                            }
                            if let Some(acc) = sums.get_mut(i) {
                                acc[0] += mse;
                                acc[1] += mse * mse;
                                acc[2] += drift;
                            }
                        }
                        summaries.push(ReplicationSummary {
                            seed,
                            final_mse: rep.rows.last().map_or(0.0, |r| r.0),
                            max_sync_norm: rep.outcome.max_sync_norm,
                            sync_count: rep.outcome.sync_count,
                            max_client_drift: rep.rows.iter().map(|r| r.1).fold(0.0, f64::max),
                        });
                    }
                    Err(e) => first_error = Some(e),
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    writer.flush().map_err(io_err(&csv_path))?;
    drop(writer);

    let summary = if cfg.summary {
        let path = summary_path(&csv_path);
        write_summary(&path, &sums, cfg.replications.len())?;
        Some(path)
    } else {
        None
    };

    let constants = cfg
        .constants_report
        .then(|| constants_report(cfg, &exp).map_err(|e| e.to_string()));
    write_meta(&meta, cfg, &hash, &reference, &summaries, constants.as_ref())?;

    Ok(RunRecord {
        config_hash: hash,
        csv_path,
        meta_path: meta,
        summary_path: summary,
        rows: summaries.len() as u64 * cfg.federation.total_iters,
        reference,
        replications: summaries,
        constants,
    })
}

/// Per-iteration mean and `mean ± 1.96 · s / √n` across replications (sample `s`; zero
/// width for a single replication).
fn write_summary(path: &Path, sums: &[[f64; 3]], n: usize) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{SUMMARY_HEADER}").map_err(io_err(path))?;
    let nf = n as f64;
    for (i, &[s, sq, drift]) in sums.iter().enumerate() {
        let mean = s / nf;
        let half = if n > 1 {
            let var = ((sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
            BAND_Z * (var / nf).sqrt()
        } else {
            0.0
        };
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            i + 1,
            mean,
            mean - half,
            mean + half,
            drift / nf
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
