//! Proactive message passing: confidence-prioritized voting over the factor
//! sets (abstaining, vote-changing, reacting, dissatisfied), with serial and
//! simultaneous schedules and rollback.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    active_mismatch_cost, optimal_assignment, Assignment, CostError, CostTuple, FactorId,
    Network, Payload, Value, Votes,
};
use crate::kernels::{summarize, ColumnKernel, KernelError, Summary};
use crate::subspace::{subspace_opinion, ConfidenceTerm, SubspaceConfig, SubspaceError};
use crate::table::{table_opinion, TableError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no evidence factors and no seed factors: nothing can vote")]
    NoInitialVoters,
    #[error("seed factor {0} out of range")]
    BadSeed(FactorId),
    #[error("resume votes cover {got} factors, network has {expected}")]
    ResumeShape { got: usize, expected: usize },
    #[error("resume vote for factor {0} has the wrong width or is infeasible")]
    ResumeVote(FactorId),
    #[error("simultaneous fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
    #[error("factor {factor}: {source}")]
    Kernel {
        factor: FactorId,
        source: KernelError,
    },
    #[error("factor {factor}: {source}")]
    Table {
        factor: FactorId,
        source: TableError,
    },
    #[error("factor {factor}: {source}")]
    Subspace {
        factor: FactorId,
        source: SubspaceError,
    },
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Serial,
    Simultaneous { fraction: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Serial
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub schedule: Schedule,
    pub rollback: bool,
    /// Safety bound on loop passes; `None` means 10 times the factor count.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    pub subspace: SubspaceConfig,
    /// Recompute the opinion of every factor reached so far on each pass
    /// instead of only the reacting set.
    pub recompute_all: bool,
    pub trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            schedule: Schedule::Serial,
            rollback: true,
            max_iterations: None,
            seed: 0,
            subspace: SubspaceConfig::default(),
            recompute_all: false,
            trace: false,
        }
    }
}

/// How the first vote-changing set is formed.
#[derive(Clone, Debug, Default)]
pub enum Init {
    /// Evidence factors vote their observations.
    #[default]
    Evidence,
    /// Evidence factors plus the given factors, which vote their opinions
    /// formed from the evidence alone.
    Seeded(Vec<FactorId>),
    /// Start from an earlier run's votes; every memory factor reacts.
    Resume(Votes),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Opinion {
    pub opinion: Vec<Value>,
    pub confidence: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub iterations: usize,
    pub opinion_updates: usize,
    pub rollbacks: usize,
    pub votes_cast: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub abstain_count: usize,
    pub active_cost: f64,
    pub votes_cast: usize,
    pub rollback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    NonConverged,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub assignment: Assignment,
    pub votes: Votes,
    pub tuple: CostTuple,
    pub status: Status,
    pub stats: Stats,
    pub trace: Vec<TraceRow>,
}

/// Votes, opinions and the factor sets.
#[derive(Clone, Debug)]
pub struct VoteState {
    pub votes: Votes,
    pub opinions: Vec<Option<Vec<Value>>>,
    pub abstaining: Vec<bool>,
    pub vote_changing: Vec<FactorId>,
    pub reacting: Vec<FactorId>,
    /// Dissatisfied factors and their last confidence.
    pub dissatisfied: BTreeMap<FactorId, f64>,
    pub stats: Stats,
}

impl VoteState {
    pub fn abstain_count(&self) -> usize {
        self.abstaining.iter().filter(|&&a| a).count()
    }
}

/// Opinion, confidence and satisfaction of factor `a` under the current votes.
pub fn compute_opinion(
    net: &Network,
    state: &VoteState,
    a: FactorId,
    cfg: &SubspaceConfig,
) -> Result<Opinion, EngineError> {
    let f = net.factor(a);
    let previous = state.votes[a].as_deref();
    if let Some(obs) = f.observation() {
        return Ok(Opinion {
            opinion: obs.to_vec(),
            confidence: f64::INFINITY,
            satisfied: previous == Some(obs),
        });
    }
    let mut kernels = Vec::with_capacity(f.degree());
    let mut terms = Vec::with_capacity(f.degree());
    let mut ext = Vec::new();
    for (slot, &i) in f.neighbors.iter().enumerate() {
        let w = f.weights[slot];
        ext.clear();
        let mut total = w;
        let mut n_active = 0;
        for e in net.edges_of(i) {
            if state.abstaining[e.factor] {
                continue;
            }
            n_active += 1;
            if e.factor == a {
                continue;
            }
            let wb = net.factor(e.factor).weights[e.slot];
            if wb <= 0.0 {
                continue;
            }
            let v = state.votes[e.factor].as_ref().expect("active factor has votes")[e.slot];
            ext.push((v, wb));
            total += wb;
        }
        let kind = net.kind(i);
        let summary = summarize(&kind, &ext).map_err(|source| EngineError::Kernel { factor: a, source })?;
        terms.push(ConfidenceTerm {
            mean: match summary {
                Summary::Empty => None,
                _ => summary.mean(),
            },
            n_external: ext.len(),
            n_active,
        });
        kernels.push(
            ColumnKernel::new(&summary, w, total)
                .map_err(|source| EngineError::Kernel { factor: a, source })?,
        );
    }
    match &f.payload {
        Payload::Table { table, columns } => {
            let op = table_opinion(table, columns.as_deref().map(|c| c.as_slice()), &kernels, previous)
                .map_err(|source| EngineError::Table { factor: a, source })?;
            Ok(Opinion {
                opinion: op.opinion,
                confidence: op.confidence,
                satisfied: op.satisfied,
            })
        }
        Payload::Subspace(s) => {
            let op = subspace_opinion(s, &kernels, &terms, previous, cfg)
                .map_err(|source| EngineError::Subspace { factor: a, source })?;
            Ok(Opinion {
                opinion: op.opinion,
                confidence: op.confidence,
                satisfied: op.satisfied,
            })
        }
    }
}

/// Cost tuple of the current votes, evaluated at the optimal assignment.
pub fn cost_tuple(net: &Network, votes: &Votes, abstaining: &[bool]) -> Result<CostTuple, EngineError> {
    let x = optimal_assignment(net, votes, abstaining);
    Ok(CostTuple {
        abstain_count: abstaining.iter().filter(|&&a| a).count(),
        active_cost: active_mismatch_cost(net, votes, &x, abstaining)?,
    })
}

fn tuple_tolerance(t: &CostTuple) -> f64 {
    1e-9 * t.active_cost.abs().max(1.0)
}

/// Outcome of one loop pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub votes_cast: usize,
    pub rolled_back: bool,
    pub tuple: CostTuple,
}

pub struct Engine<'n> {
    net: &'n Network,
    cfg: EngineConfig,
    state: VoteState,
    rng: ChaCha8Rng,
    tuple: CostTuple,
    trace: Vec<TraceRow>,
    all_memory: Vec<FactorId>,
}

impl<'n> Engine<'n> {
    pub fn new(net: &'n Network, cfg: EngineConfig, init: Init) -> Result<Self, EngineError> {
        if let Schedule::Simultaneous { fraction } = cfg.schedule {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(EngineError::Fraction(fraction));
            }
        }
        let m = net.n_factors();
        let state = VoteState {
            votes: vec![None; m],
            opinions: vec![None; m],
            abstaining: vec![true; m],
            vote_changing: Vec::new(),
            reacting: Vec::new(),
            dissatisfied: BTreeMap::new(),
            stats: Stats::default(),
        };
        let all_memory = (0..m).filter(|&a| !net.factor(a).is_evidence()).collect();
        let mut engine = Engine {
            net,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            state,
            tuple: CostTuple {
                abstain_count: m,
                active_cost: 0.0,
            },
            trace: Vec::new(),
            all_memory,
        };
        let evidence: Vec<FactorId> = net.evidence_factors().collect();
        match init {
            Init::Evidence => {
                if evidence.is_empty() {
                    return Err(EngineError::NoInitialVoters);
                }
                engine.set_observations(&evidence);
                engine.cast(evidence);
            }
            Init::Seeded(seeds) => {
                if let Some(&bad) = seeds.iter().find(|&&a| a >= m) {
                    return Err(EngineError::BadSeed(bad));
                }
                if evidence.is_empty() && seeds.is_empty() {
                    return Err(EngineError::NoInitialVoters);
                }
                engine.set_observations(&evidence);
                let seeds: BTreeSet<FactorId> = seeds.into_iter().collect();
                // seeded memory factors form their opinions from the evidence only
                let mut probe = engine.state.clone();
                for &a in &evidence {
                    probe.votes[a] = probe.opinions[a].clone();
                    probe.abstaining[a] = false;
                }
                for &a in &seeds {
                    let op = compute_opinion(net, &probe, a, &engine.cfg.subspace)?;
                    engine.state.stats.opinion_updates += 1;
                    engine.state.opinions[a] = Some(op.opinion);
                }
                let mut v: BTreeSet<FactorId> = evidence.into_iter().collect();
                v.extend(seeds);
                engine.cast(v.into_iter().collect());
            }
            Init::Resume(votes) => {
                if votes.len() != m {
                    return Err(EngineError::ResumeShape {
                        got: votes.len(),
                        expected: m,
                    });
                }
                for (a, v) in votes.into_iter().enumerate() {
                    let f = net.factor(a);
                    let v = match (f.observation(), v) {
                        (Some(obs), _) => Some(obs.to_vec()),
                        (None, v) => v,
                    };
                    if let Some(v) = &v {
                        if v.len() != f.degree() || !f.payload.is_feasible(v) {
                            return Err(EngineError::ResumeVote(a));
                        }
                        engine.state.abstaining[a] = false;
                    }
                    engine.state.opinions[a] = v.clone();
                    engine.state.votes[a] = v;
                }
                engine.state.reacting = engine.all_memory.clone();
            }
        }
        engine.tuple = cost_tuple(net, &engine.state.votes, &engine.state.abstaining)?;
        if engine.cfg.trace {
            engine.trace.push(TraceRow {
                iter: 0,
                abstain_count: engine.tuple.abstain_count,
                active_cost: engine.tuple.active_cost,
                votes_cast: engine.state.vote_changing.len(),
                rollback: false,
            });
        }
        Ok(engine)
    }

    fn set_observations(&mut self, evidence: &[FactorId]) {
        for &a in evidence {
            let obs = self.net.factor(a).observation().expect("evidence").to_vec();
            self.state.opinions[a] = Some(obs);
        }
    }

    /// Copy opinions to votes for `v`, update the sets and the reacting set.
    fn cast(&mut self, v: Vec<FactorId>) {
        for &a in &v {
            self.state.votes[a] = self.state.opinions[a].clone();
            self.state.abstaining[a] = false;
            self.state.dissatisfied.remove(&a);
        }
        self.state.stats.votes_cast += v.len();
        self.state.vote_changing = v;
        let mut reacting = self.reacting_of(&self.state.vote_changing);
        if self.cfg.recompute_all {
            // every factor reached so far, not only the neighbors of the voters
            let reached = self.all_memory.iter().copied().filter(|&a| self.state.opinions[a].is_some());
            reacting = reached.chain(reacting).collect::<BTreeSet<_>>().into_iter().collect();
        }
        self.state.reacting = reacting;
    }

    fn reacting_of(&self, v: &[FactorId]) -> Vec<FactorId> {
        let mut r = BTreeSet::new();
        for &a in v {
            for &i in &self.net.factor(a).neighbors {
                for e in self.net.edges_of(i) {
                    if e.factor != a && !self.net.factor(e.factor).is_evidence() {
                        r.insert(e.factor);
                    }
                }
            }
        }
        r.into_iter().collect()
    }

    pub fn state(&self) -> &VoteState {
        &self.state
    }

    pub fn tuple(&self) -> CostTuple {
        self.tuple
    }

    fn max_iterations(&self) -> usize {
        self.cfg
            .max_iterations
            .unwrap_or(10 * self.net.n_factors().max(1))
    }

    /// Single most confident dissatisfied factor, ties broken by the RNG.
    fn pick_serial(&mut self) -> Vec<FactorId> {
        let best = self
            .state
            .dissatisfied
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<FactorId> = self
            .state
            .dissatisfied
            .iter()
            .filter(|(_, &k)| k == best)
            .map(|(&a, _)| a)
            .collect();
        match ties.len() {
            0 => Vec::new(),
            1 => ties,
            n => vec![ties[self.rng.random_range(0..n)]],
        }
    }

    fn pick_fraction(&mut self, fraction: f64) -> Vec<FactorId> {
        let mut d: Vec<(FactorId, f64)> = self.state.dissatisfied.iter().map(|(&a, &k)| (a, k)).collect();
        if d.is_empty() {
            return Vec::new();
        }
        d.shuffle(&mut self.rng);
        d.sort_by(|x, y| y.1.total_cmp(&x.1));
        let take = ((fraction * d.len() as f64).ceil() as usize).clamp(1, d.len());
        let mut v: Vec<FactorId> = d[..take].iter().map(|&(a, _)| a).collect();
        v.sort_unstable();
        v
    }

    /// One pass: react, pick voters, vote.
    pub fn step(&mut self) -> Result<StepReport, EngineError> {
        let net = self.net;
        let scfg = &self.cfg.subspace;
        let state = &self.state;
        let results: Vec<Result<(FactorId, Opinion), EngineError>> = state
            .reacting
            .par_iter()
            .map(|&a| compute_opinion(net, state, a, scfg).map(|o| (a, o)))
            .collect();
        for r in results {
            let (a, op) = r?;
            self.state.stats.opinion_updates += 1;
            if op.satisfied {
                self.state.dissatisfied.remove(&a);
            } else {
                self.state.dissatisfied.insert(a, op.confidence);
            }
            self.state.opinions[a] = Some(op.opinion);
        }
        self.state.stats.iterations += 1;

        let mut rolled_back = false;
        let v = match self.cfg.schedule {
            Schedule::Serial => self.pick_serial(),
            Schedule::Simultaneous { fraction } => self.pick_fraction(fraction),
        };
        if v.is_empty() {
            self.state.vote_changing.clear();
            self.state.reacting.clear();
        } else if matches!(self.cfg.schedule, Schedule::Simultaneous { .. }) && self.cfg.rollback {
            let before = self.tuple;
            let snapshot: Vec<(FactorId, Option<Vec<Value>>, bool, Option<f64>)> = v
                .iter()
                .map(|&a| {
                    (
                        a,
                        self.state.votes[a].clone(),
                        self.state.abstaining[a],
                        self.state.dissatisfied.get(&a).copied(),
                    )
                })
                .collect();
            let votes_before = self.state.stats.votes_cast;
            self.cast(v);
            let after = cost_tuple(net, &self.state.votes, &self.state.abstaining)?;
            // A joint step that does not strictly lower the tuple is undone as
            // well: factors can otherwise trade votes at equal cost forever.
            let stalled = snapshot.len() > 1 && !before.exceeds(&after, tuple_tolerance(&before));
            if stalled || after.exceeds(&before, tuple_tolerance(&before)) {
                for (a, vote, abst, kappa) in snapshot {
                    self.state.votes[a] = vote;
                    self.state.abstaining[a] = abst;
                    if let Some(k) = kappa {
                        self.state.dissatisfied.insert(a, k);
                    }
                }
                self.state.stats.votes_cast = votes_before;
                self.state.stats.rollbacks += 1;
                rolled_back = true;
                let v = self.pick_serial();
                self.cast(v);
                self.tuple = cost_tuple(net, &self.state.votes, &self.state.abstaining)?;
            } else {
                self.tuple = after;
            }
        } else {
            self.cast(v);
            self.tuple = cost_tuple(net, &self.state.votes, &self.state.abstaining)?;
        }
        let report = StepReport {
            votes_cast: self.state.vote_changing.len(),
            rolled_back,
            tuple: self.tuple,
        };
        if self.cfg.trace {
            self.trace.push(TraceRow {
                iter: self.state.stats.iterations,
                abstain_count: self.tuple.abstain_count,
                active_cost: self.tuple.active_cost,
                votes_cast: report.votes_cast,
                rollback: rolled_back,
            });
        }
        Ok(report)
    }

    /// Whether the last pass cast no votes.
    pub fn finished(&self) -> bool {
        self.state.vote_changing.is_empty() && self.state.reacting.is_empty()
    }

    pub fn run(mut self) -> Result<RunResult, EngineError> {
        let max = self.max_iterations();
        let mut status = Status::Converged;
        while !self.finished() {
            if self.state.stats.iterations >= max {
                status = Status::NonConverged;
                break;
            }
            self.step()?;
        }
        let assignment = optimal_assignment(self.net, &self.state.votes, &self.state.abstaining);
        Ok(RunResult {
            assignment,
            votes: self.state.votes,
            tuple: self.tuple,
            status,
            stats: self.state.stats,
            trace: self.trace,
        })
    }
}

/// Initialize and run to termination.
pub fn run(net: &Network, cfg: &EngineConfig, init: Init) -> Result<RunResult, EngineError> {
    Engine::new(net, cfg.clone(), init)?.run()
}
