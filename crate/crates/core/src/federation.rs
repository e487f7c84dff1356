//! The federated outer loop: `N` agents take local SARSA steps and every `K` iterations the
//! server averages their parameters and projects the mean onto the `Ḡ`-ball.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap, Parameter};
use crate::linalg::norm2;
use crate::markov::check_ergodic;
use crate::mdp::MdpFamily;
use crate::policy::{improve_policy, PolicyImprovementOp};
use crate::sarsa::{local_step, AgentState, StepSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub n_agents: usize,
    /// Synchronisation period `K`.
    pub sync_period: usize,
    /// Number of iterations `T`.
    pub total_iters: u64,
    /// Projection radius `Ḡ`.
    pub projection_radius: f64,
    pub master_seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(invalid("federation needs at least one agent"));
        }
        if self.sync_period == 0 {
            return Err(invalid("sync period K must be at least 1"));
        }
        if self.total_iters == 0 {
            return Err(invalid("total iterations T must be at least 1"));
        }
        if !(self.projection_radius > 0.0) {
            return Err(invalid("projection radius must be positive"));
        }
        Ok(())
    }
}

/// Scale `theta` onto the Euclidean ball of the given radius if it lies outside.
///
/// Post: `norm2(theta) <= radius` exactly in floating point.
pub fn project_to_ball(theta: &mut [f64], radius: f64) {
    let norm = norm2(theta);
    if norm > radius {
        let mut scale = radius / norm;
        loop {
            let scaled = norm2(&theta.iter().map(|x| x * scale).collect::<Vec<_>>());
            if scaled <= radius {
                break;
            }
            scale *= 1.0 - f64::EPSILON;
        }
        theta.iter_mut().for_each(|x| *x *= scale);
    }
}

fn mean_into<'a>(locals: impl Iterator<Item = &'a [f64]>, out: &mut [f64]) -> usize {
    out.fill(0.0);
    let mut count = 0;
    for theta in locals {
        for (o, x) in out.iter_mut().zip(theta) {
            *o += x;
        }
        count += 1;
    }
    let scale = 1.0 / count as f64;
    out.iter_mut().for_each(|x| *x *= scale);
    count
}

/// Mean of the local parameters, projected onto the `radius`-ball.
pub fn aggregate(locals: &[Parameter], radius: f64) -> Result<Parameter> {
    let first = locals.first().ok_or_else(|| invalid("aggregate of an empty set"))?;
    let d = first.dim();
    if let Some(bad) = locals.iter().find(|p| p.dim() != d) {
        return Err(Error::DimensionMismatch {
            what: "local parameter length",
            expected: d,
            found: bad.dim(),
        });
    }
    if !(radius > 0.0) {
        return Err(invalid("projection radius must be positive"));
    }
    let mut mean = vec![0.0; d];
    mean_into(locals.iter().map(|p| p.as_slice()), &mut mean);
    project_to_ball(&mut mean, radius);
    Ok(Parameter::new(mean))
}

/// `Ω = (1/N) Σ ‖θ_i − θ̄‖²`
pub fn client_drift(locals: &[Parameter], central: &Parameter) -> f64 {
    drift_of(locals.iter().map(|p| p.as_slice()), central.as_slice())
}

fn drift_of<'a>(locals: impl Iterator<Item = &'a [f64]>, central: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for theta in locals {
        total += theta
            .iter()
            .zip(central)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// What the loop reports after every iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationView<'a> {
    /// Iteration count after the update, in `1..=T`.
    pub t: u64,
    /// `θ̄_t`: the projected aggregate on sync steps, the plain mean of locals otherwise.
    pub central_theta: &'a [f64],
    /// `‖θ̄_t − θ_ref‖²`
    pub mse: f64,
    pub client_drift: f64,
    pub synced: bool,
}

/// Owned per-iteration trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub t: u64,
    pub central_theta: Parameter,
    pub mse: f64,
    pub client_drift: f64,
    pub synced: bool,
}

impl From<&IterationView<'_>> for RoundTrace {
    fn from(v: &IterationView<'_>) -> Self {
        Self {
            t: v.t,
            central_theta: Parameter::new(v.central_theta.to_vec()),
            mse: v.mse,
            client_drift: v.client_drift,
            synced: v.synced,
        }
    }
}

/// One agent's state plus the parameter log of its current segment.
#[derive(Debug, Clone)]
pub struct AgentSlot {
    pub state: AgentState,
    /// `θ` after each step of the segment, concatenated.
    pub log: Vec<f64>,
}

/// Runs a closure over every agent slot between two synchronisation barriers.
///
/// Implementations may run agents concurrently; the loop's output does not depend on
/// scheduling because every agent owns its state and random stream.
pub trait AgentExecutor {
    fn for_each_agent<F>(&self, slots: &mut [AgentSlot], f: F)
    where
        F: Fn(usize, &mut AgentSlot) + Sync + Send;
}

/// Runs agents one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl AgentExecutor for Sequential {
    fn for_each_agent<F>(&self, slots: &mut [AgentSlot], f: F)
    where
        F: Fn(usize, &mut AgentSlot) + Sync + Send,
    {
        for (i, slot) in slots.iter_mut().enumerate() {
            f(i, slot);
        }
    }
}

/// Everything the loop needs besides the executor and observer.
#[derive(Debug, Clone, Copy)]
pub struct FederationSetup<'a> {
    pub family: &'a MdpFamily,
    pub features: &'a FeatureMap,
    pub op: &'a PolicyImprovementOp,
    pub schedule: &'a StepSchedule,
    pub config: &'a FederationConfig,
    pub theta0: &'a Parameter,
    /// MSE reference `θ_ref`.
    pub reference: &'a Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    /// `θ̄_T`
    pub final_theta: Parameter,
    /// Largest `‖θ̄‖₂` seen right after an aggregation.
    pub max_sync_norm: f64,
    pub sync_count: u64,
}

/// Execute the federated loop, calling `observer` once per iteration in order `t = 1..=T`.
pub fn run_federation_with<E, O>(setup: FederationSetup<'_>, executor: &E, mut observer: O) -> Result<FederationOutcome>
where
    E: AgentExecutor,
    O: FnMut(&IterationView<'_>),
{
    let FederationSetup {
        family,
        features,
        op,
        schedule,
        config,
        theta0,
        reference,
    } = setup;
    config.validate()?;
    if family.len() != config.n_agents {
        return Err(Error::DimensionMismatch {
            what: "agents in family",
            expected: config.n_agents,
            found: family.len(),
        });
    }
    features.check_theta(reference)?;
    // best-effort ergodicity check at θ₀
    let pi0 = improve_policy(op, features, theta0)?;
    for mdp in family.agents() {
        check_ergodic(&mdp.induced_chain(&pi0)?, mdp.num_states())?;
    }

    let d = features.dim();
    let k = config.sync_period as u64;
    let mut slots = family
        .agents()
        .iter()
        .enumerate()
        .map(|(i, mdp)| {
            Ok(AgentSlot {
                state: AgentState::new(i as u64, config.master_seed, theta0.clone(), mdp, features, op)?,
                log: Vec::with_capacity(config.sync_period * d),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut central = theta0.weights.clone();
    let mut max_sync_norm = 0.0f64;
    let mut sync_count = 0;
    let mut t = 0u64;
    while t < config.total_iters {
        let seg = (k - t % k).min(config.total_iters - t) as usize;
        executor.for_each_agent(&mut slots, |i, slot| {
            let mdp = &family.agents()[i];
            slot.log.clear();
            for _ in 0..seg {
                local_step(&mut slot.state, mdp, features, op, schedule);
                slot.log.extend_from_slice(&slot.state.theta.weights);
            }
        });
        for j in 0..seg {
            let now = t + j as u64 + 1;
            let synced = now % k == 0;
            let drift;
            if synced {
                mean_into(slots.iter().map(|s| &s.log[j * d..(j + 1) * d]), &mut central);
                project_to_ball(&mut central, config.projection_radius);
                for slot in slots.iter_mut() {
                    slot.state.theta.weights.copy_from_slice(&central);
                }
                max_sync_norm = max_sync_norm.max(norm2(&central));
                sync_count += 1;
                drift = 0.0;
            } else {
                mean_into(slots.iter().map(|s| &s.log[j * d..(j + 1) * d]), &mut central);
                drift = drift_of(slots.iter().map(|s| &s.log[j * d..(j + 1) * d]), &central);
            }
            let mse = central
                .iter()
                .zip(&reference.weights)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            observer(&IterationView {
                t: now,
                central_theta: &central,
                mse,
                client_drift: drift,
                synced,
            });
        }
        t += seg as u64;
    }
    Ok(FederationOutcome {
        final_theta: Parameter::new(central),
        max_sync_norm,
        sync_count,
    })
}

/// [`run_federation_with`] collecting the full trace.
pub fn run_federation(setup: FederationSetup<'_>) -> Result<Vec<RoundTrace>> {
    let mut traces = Vec::with_capacity(setup.config.total_iters as usize);
    run_federation_with(setup, &Sequential, |v| traces.push(RoundTrace::from(v)))?;
    Ok(traces)
}
