//! The memory factor network data model and the global / active cost functions.
//!
//! A [`Network`] is an immutable, edge-weighted bipartite graph of variables and
//! factors. Factors are either memory factors (table or subspace payloads) or
//! evidence factors, which are stored as one-row memory tables attached to a
//! single variable.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels;
use crate::subspace::{HiddenDomain, SubspaceFactor};
use crate::table::MemoryTable;

pub type VarId = usize;
pub type FactorId = usize;

/// Alphabet of a variable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    /// Real value with quadratic mismatch cost. `upper` is only applied when
    /// values are serialized (images are truncated to one), never while
    /// optimizing.
    Real { nonneg: bool, upper: Option<f64> },
    /// Complex value with squared-modulus mismatch cost.
    Complex,
    /// Integer with absolute-difference cost; `range` is inclusive.
    Integer { range: Option<(i64, i64)> },
    /// Label in `0..domain` with indicator cost.
    Label { domain: u32 },
}

impl VariableKind {
    pub const REAL_NONNEG: VariableKind = VariableKind::Real {
        nonneg: true,
        upper: None,
    };

    pub fn validate(&self) -> Result<(), GraphError> {
        match *self {
            VariableKind::Label { domain } if domain < 2 => {
                Err(GraphError::InvalidKind(format!("label domain {domain} < 2")))
            }
            VariableKind::Integer { range: Some((lo, hi)) } if lo > hi => Err(
                GraphError::InvalidKind(format!("empty integer range [{lo}, {hi}]")),
            ),
            VariableKind::Real {
                upper: Some(u), ..
            } if !u.is_finite() => Err(GraphError::InvalidKind("non-finite upper clamp".into())),
            _ => Ok(()),
        }
    }

    /// Whether `value` lies in this alphabet.
    pub fn admits(&self, value: &Value) -> bool {
        match (*self, *value) {
            (VariableKind::Real { nonneg, .. }, Value::Real(v)) => {
                v.is_finite() && (!nonneg || v >= 0.0)
            }
            (VariableKind::Complex, Value::Complex(c)) => c.re.is_finite() && c.im.is_finite(),
            (VariableKind::Integer { range }, Value::Int(z)) => match range {
                Some((lo, hi)) => lo <= z && z <= hi,
                None => true,
            },
            (VariableKind::Label { domain }, Value::Label(k)) => k < domain,
            _ => false,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, VariableKind::Integer { .. } | VariableKind::Label { .. })
    }
}

/// A variable value or vote.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Real(f64),
    Complex(Complex64),
    Int(i64),
    Label(u32),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match *self {
            Value::Real(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_complex(&self) -> Option<Complex64> {
        match *self {
            Value::Complex(c) => Some(c),
            Value::Real(v) => Some(Complex64::new(v, 0.0)),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match *self {
            Value::Int(z) => Some(z),
            _ => None,
        }
    }

    pub fn as_label(&self) -> Option<u32> {
        match *self {
            Value::Label(k) => Some(k),
            _ => None,
        }
    }

    pub(crate) fn same_kind(&self, other: &Value) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v}"),
            Value::Complex(c) => write!(f, "{}{:+}i", c.re, c.im),
            Value::Int(z) => write!(f, "{z}"),
            Value::Label(k) => write!(f, "#{k}"),
        }
    }
}

/// Mismatch cost psi_i(x, v) for a variable setting and a vote.
///
/// Returns `None` when the two values are of incompatible kinds.
pub fn mismatch(x: &Value, v: &Value) -> Option<f64> {
    match (*x, *v) {
        (Value::Real(a), Value::Real(b)) => Some((a - b) * (a - b)),
        (Value::Complex(a), Value::Complex(b)) => Some((a - b).norm_sqr()),
        (Value::Int(a), Value::Int(b)) => Some((a - b).unsigned_abs() as f64),
        (Value::Label(a), Value::Label(b)) => Some(if a == b { 0.0 } else { 1.0 }),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorClass {
    Memory,
    Evidence,
}

/// What a factor knows: a memory table (optionally viewed through a column
/// map, used by truncated factors sharing a full-size table) or a subspace.
#[derive(Clone, Debug)]
pub enum Payload {
    Table {
        table: Arc<MemoryTable>,
        columns: Option<Arc<Vec<usize>>>,
    },
    Subspace(Arc<SubspaceFactor>),
}

impl Payload {
    pub fn table(table: Arc<MemoryTable>) -> Payload {
        Payload::Table {
            table,
            columns: None,
        }
    }

    /// Number of variables this payload covers.
    pub fn width(&self) -> usize {
        match self {
            Payload::Table { table, columns } => match columns {
                Some(c) => c.len(),
                None => table.n_cols(),
            },
            Payload::Subspace(s) => s.n(),
        }
    }

    /// Selection cost is zero exactly when this returns true.
    pub fn is_feasible(&self, vote: &[Value]) -> bool {
        match self {
            Payload::Table { table, columns } => {
                table.contains(vote, columns.as_ref().map(|c| c.as_slice()))
            }
            Payload::Subspace(s) => s.contains(vote),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Factor {
    pub class: FactorClass,
    pub payload: Payload,
    pub neighbors: Vec<VarId>,
    pub weights: Vec<f64>,
}

impl Factor {
    pub fn degree(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_evidence(&self) -> bool {
        self.class == FactorClass::Evidence
    }

    /// Observation carried by an evidence factor.
    pub fn observation(&self) -> Option<&[Value]> {
        match (&self.class, &self.payload) {
            (FactorClass::Evidence, Payload::Table { table, .. }) => Some(table.row(0)),
            _ => None,
        }
    }
}

/// Incident edge seen from a variable: the factor and the slot of the variable
/// in that factor's neighbor list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeRef {
    pub factor: FactorId,
    pub slot: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("invalid variable kind: {0}")]
    InvalidKind(String),
    #[error("factor {factor}: {reason}")]
    InvalidFactor { factor: FactorId, reason: String },
    #[error("variable {var}: unequal edge weights on a discrete variable")]
    UnequalDiscreteWeights { var: VarId },
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("factor {0} casts a vote outside its selection constraint (infinite cost)")]
    Infeasible(FactorId),
    #[error("factor {0} has no vote vector")]
    MissingVote(FactorId),
    #[error("variable {0} has no value in the assignment")]
    Unassigned(VarId),
    #[error("vote on variable {var} from factor {factor} has the wrong kind")]
    KindMismatch { var: VarId, factor: FactorId },
}

/// Immutable edge-weighted bipartite graph.
#[derive(Clone, Debug)]
pub struct Network {
    variables: Vec<VariableKind>,
    factors: Vec<Factor>,
    adjacency: Vec<Vec<EdgeRef>>,
}

impl Network {
    pub fn variables(&self) -> &[VariableKind] {
        &self.variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, a: FactorId) -> &Factor {
        &self.factors[a]
    }

    pub fn kind(&self, i: VarId) -> VariableKind {
        self.variables[i]
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Edges incident to variable `i`, ascending by factor id.
    pub fn edges_of(&self, i: VarId) -> &[EdgeRef] {
        &self.adjacency[i]
    }

    pub fn evidence_factors(&self) -> impl Iterator<Item = FactorId> + '_ {
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_evidence())
            .map(|(a, _)| a)
    }

    /// Copy of this network with every evidence edge weight replaced.
    pub fn with_evidence_weight(&self, weight: f64) -> Result<Network, GraphError> {
        let mut b = NetworkBuilder::with_variables(self.variables.clone());
        for f in &self.factors {
            let mut f = f.clone();
            if f.is_evidence() {
                f.weights.iter_mut().for_each(|w| *w = weight);
            }
            b.push_factor(f);
        }
        b.build()
    }
}

/// Incremental constructor; all validation happens in [`NetworkBuilder::build`].
#[derive(Clone, Debug, Default)]
pub struct NetworkBuilder {
    variables: Vec<VariableKind>,
    factors: Vec<Factor>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_variables(variables: Vec<VariableKind>) -> Self {
        NetworkBuilder {
            variables,
            factors: Vec::new(),
        }
    }

    pub fn add_variable(&mut self, kind: VariableKind) -> VarId {
        self.variables.push(kind);
        self.variables.len() - 1
    }

    pub fn add_memory_factor(
        &mut self,
        payload: Payload,
        neighbors: Vec<VarId>,
        weights: Vec<f64>,
    ) -> FactorId {
        self.push_factor(Factor {
            class: FactorClass::Memory,
            payload,
            neighbors,
            weights,
        })
    }

    pub fn add_evidence(&mut self, var: VarId, value: Value, weight: f64) -> FactorId {
        let table = Arc::new(MemoryTable::single(vec![value]));
        self.push_factor(Factor {
            class: FactorClass::Evidence,
            payload: Payload::table(table),
            neighbors: vec![var],
            weights: vec![weight],
        })
    }

    pub fn push_factor(&mut self, factor: Factor) -> FactorId {
        self.factors.push(factor);
        self.factors.len() - 1
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn build(self) -> Result<Network, GraphError> {
        let NetworkBuilder { variables, factors } = self;
        for kind in &variables {
            kind.validate()?;
        }
        let mut adjacency = vec![Vec::new(); variables.len()];
        for (a, f) in factors.iter().enumerate() {
            validate_factor(a, f, &variables)?;
            for (slot, &i) in f.neighbors.iter().enumerate() {
                adjacency[i].push(EdgeRef { factor: a, slot });
            }
        }
        for (i, edges) in adjacency.iter().enumerate() {
            if variables[i].is_discrete() {
                let mut ws = edges
                    .iter()
                    .map(|e| factors[e.factor].weights[e.slot]);
                if let Some(first) = ws.next() {
                    if ws.any(|w| w != first) {
                        return Err(GraphError::UnequalDiscreteWeights { var: i });
                    }
                }
            }
        }
        Ok(Network {
            variables,
            factors,
            adjacency,
        })
    }
}

fn validate_factor(a: FactorId, f: &Factor, variables: &[VariableKind]) -> Result<(), GraphError> {
    let bad = |reason: String| GraphError::InvalidFactor { factor: a, reason };
    if f.neighbors.is_empty() {
        return Err(bad("no neighbors".into()));
    }
    if f.weights.len() != f.neighbors.len() {
        return Err(bad(format!(
            "{} weights for {} neighbors",
            f.weights.len(),
            f.neighbors.len()
        )));
    }
    if let Some(w) = f.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(bad(format!("invalid weight {w}")));
    }
    let mut seen = f.neighbors.clone();
    seen.sort_unstable();
    if seen.windows(2).any(|p| p[0] == p[1]) {
        return Err(bad("duplicate neighbor".into()));
    }
    if let Some(i) = f.neighbors.iter().find(|&&i| i >= variables.len()) {
        return Err(bad(format!("neighbor {i} is not a variable")));
    }
    if f.payload.width() != f.neighbors.len() {
        return Err(bad(format!(
            "payload covers {} variables, factor has {}",
            f.payload.width(),
            f.neighbors.len()
        )));
    }
    match &f.payload {
        Payload::Table { table, columns } => {
            if f.class == FactorClass::Evidence {
                if table.n_rows() != 1 {
                    return Err(bad("evidence table must have exactly one row".into()));
                }
                if f.neighbors.len() != 1 {
                    return Err(bad("evidence attaches to a single variable".into()));
                }
            }
            if let Some(cols) = columns {
                if let Some(c) = cols.iter().find(|&&c| c >= table.n_cols()) {
                    return Err(bad(format!("column map entry {c} out of range")));
                }
            }
            let cols = columns.as_ref().map(|c| c.as_slice());
            for r in 0..table.n_rows() {
                let row = table.row(r);
                for (slot, &i) in f.neighbors.iter().enumerate() {
                    let cell = match cols {
                        Some(c) => &row[c[slot]],
                        None => &row[slot],
                    };
                    if !variables[i].admits(cell) {
                        return Err(bad(format!(
                            "row {r} value {cell} not in the alphabet of variable {i}"
                        )));
                    }
                }
            }
        }
        Payload::Subspace(s) => {
            if f.class == FactorClass::Evidence {
                return Err(bad("evidence factors must be tables".into()));
            }
            for &i in &f.neighbors {
                let ok = match (s.domain(), variables[i]) {
                    (HiddenDomain::Complex, VariableKind::Complex) => true,
                    (HiddenDomain::Reals, VariableKind::Real { nonneg: false, .. }) => true,
                    (HiddenDomain::NonnegReals, VariableKind::Real { .. }) => true,
                    _ => false,
                };
                if !ok {
                    return Err(bad(format!(
                        "variable {i} alphabet incompatible with {:?} subspace",
                        s.domain()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Per-factor vote vectors; `None` marks an abstaining factor.
pub type Votes = Vec<Option<Vec<Value>>>;

/// Variable settings; `None` is the "unknown" flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment(pub Vec<Option<Value>>);

impl Assignment {
    pub fn get(&self, i: VarId) -> Option<Value> {
        self.0[i]
    }

    pub fn known_count(&self) -> usize {
        self.0.iter().filter(|v| v.is_some()).count()
    }
}

/// The lexicographically ordered pair (|A|, Psi_A) decreased by PMP.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostTuple {
    pub abstain_count: usize,
    pub active_cost: f64,
}

impl CostTuple {
    /// Strictly greater than `other`, allowing `tol` of floating-point slack on
    /// the cost component.
    pub fn exceeds(&self, other: &CostTuple, tol: f64) -> bool {
        match self.abstain_count.cmp(&other.abstain_count) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.active_cost > other.active_cost + tol,
        }
    }
}

impl PartialEq for CostTuple {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CostTuple {}

impl PartialOrd for CostTuple {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CostTuple {
    fn cmp(&self, other: &Self) -> Ordering {
        self.abstain_count
            .cmp(&other.abstain_count)
            .then_with(|| self.active_cost.total_cmp(&other.active_cost))
    }
}

/// Psi over every factor. Every factor must have voted.
pub fn global_cost(net: &Network, votes: &Votes, x: &Assignment) -> Result<f64, CostError> {
    let none = vec![false; net.n_factors()];
    active_cost(net, votes, x, &none)
}

/// Psi_A: the sum restricted to non-abstaining factors, including the
/// selection-cost feasibility check.
pub fn active_cost(
    net: &Network,
    votes: &Votes,
    x: &Assignment,
    abstaining: &[bool],
) -> Result<f64, CostError> {
    for (a, f) in net.factors.iter().enumerate() {
        if abstaining[a] {
            continue;
        }
        let v = votes[a].as_ref().ok_or(CostError::MissingVote(a))?;
        if !f.payload.is_feasible(v) {
            return Err(CostError::Infeasible(a));
        }
    }
    active_mismatch_cost(net, votes, x, abstaining)
}

/// Mismatch part of Psi_A without the feasibility check; votes produced by
/// the engine are feasible by construction.
pub fn active_mismatch_cost(
    net: &Network,
    votes: &Votes,
    x: &Assignment,
    abstaining: &[bool],
) -> Result<f64, CostError> {
    let mut total = 0.0;
    for (a, f) in net.factors.iter().enumerate() {
        if abstaining[a] {
            continue;
        }
        let v = votes[a].as_ref().ok_or(CostError::MissingVote(a))?;
        for (slot, &i) in f.neighbors.iter().enumerate() {
            let xi = x.0[i].ok_or(CostError::Unassigned(i))?;
            let psi = mismatch(&xi, &v[slot]).ok_or(CostError::KindMismatch { var: i, factor: a })?;
            total += psi * f.weights[slot];
        }
    }
    Ok(total)
}

/// Optimal variable settings given the votes of non-abstaining factors.
/// Variables with no non-abstaining neighbor are left unknown.
pub fn optimal_assignment(net: &Network, votes: &Votes, abstaining: &[bool]) -> Assignment {
    let mut out = Vec::with_capacity(net.n_variables());
    let mut buf = Vec::new();
    for (i, edges) in net.adjacency.iter().enumerate() {
        buf.clear();
        for e in edges {
            if abstaining[e.factor] {
                continue;
            }
            if let Some(v) = &votes[e.factor] {
                buf.push((v[e.slot], net.factors[e.factor].weights[e.slot]));
            }
        }
        out.push(kernels::local_minimizer(&net.variables[i], &buf).ok());
    }
    Assignment(out)
}
