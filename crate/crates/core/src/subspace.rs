//! Subspace factors: votes constrained to the column space of a learned basis
//! `W`, optionally restricted to the nonnegative cone of hidden coordinates.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Value;
use crate::kernels::{ColumnKernel, KernelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HiddenDomain {
    Reals,
    NonnegReals,
    Complex,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Basis {
    Real(DMatrix<f64>),
    Complex(DMatrix<Complex64>),
}

impl Basis {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Basis::Real(m) => m.shape(),
            Basis::Complex(m) => m.shape(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubspaceError {
    #[error("basis must have fewer columns than rows (n = {n}, p = {p})")]
    Shape { n: usize, p: usize },
    #[error("{0:?} domain needs a matching basis scalar type")]
    ScalarKind(HiddenDomain),
    #[error("nonnegative subspace has a negative or non-finite basis entry")]
    NegativeEntry,
    #[error("non-finite basis entry")]
    NonFinite,
    #[error("{got} column kernels for a factor of width {expected}")]
    Width { got: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Where the per-variable information penalty sits in the confidence score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyPlacement {
    /// Penalty inside the per-variable sum, averaged with the mismatch terms.
    #[default]
    InsideSum,
    /// Only the mismatch terms are averaged; penalties are summed unscaled.
    OutsideSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceConfig {
    pub lambda: f64,
    /// Satisfaction threshold on the squared opinion/vote distance; `None`
    /// resolves to `1e-4 * n` per factor.
    pub alpha: Option<f64>,
    pub qp_max_iters: usize,
    pub qp_tolerance: f64,
    pub penalty: PenaltyPlacement,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig {
            lambda: 1.0,
            alpha: None,
            qp_max_iters: 2000,
            qp_tolerance: 1e-10,
            penalty: PenaltyPlacement::InsideSum,
        }
    }
}

impl SubspaceConfig {
    pub fn alpha_for(&self, n: usize) -> f64 {
        self.alpha.unwrap_or(1e-4 * n as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceFactor {
    basis: Basis,
    domain: HiddenDomain,
}

impl SubspaceFactor {
    pub fn new(basis: Basis, domain: HiddenDomain) -> Result<Self, SubspaceError> {
        let (n, p) = basis.shape();
        if p == 0 || p >= n {
            return Err(SubspaceError::Shape { n, p });
        }
        match (&basis, domain) {
            (Basis::Real(m), HiddenDomain::NonnegReals) => {
                if m.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(SubspaceError::NegativeEntry);
                }
            }
            (Basis::Real(m), HiddenDomain::Reals) => {
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(SubspaceError::NonFinite);
                }
            }
            (Basis::Complex(m), HiddenDomain::Complex) => {
                if m.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
                    return Err(SubspaceError::NonFinite);
                }
            }
            _ => return Err(SubspaceError::ScalarKind(domain)),
        }
        Ok(SubspaceFactor { basis, domain })
    }

    pub fn n(&self) -> usize {
        self.basis.shape().0
    }

    pub fn p(&self) -> usize {
        self.basis.shape().1
    }

    pub fn domain(&self) -> HiddenDomain {
        self.domain
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Whether `vote` equals `W z` for some admissible `z`, up to a relative
    /// tolerance on the squared residual.
    pub fn contains(&self, vote: &[Value]) -> bool {
        if vote.len() != self.n() {
            return false;
        }
        let kernels: Option<Vec<ColumnKernel>> = vote
            .iter()
            .map(|v| {
                v.as_complex().map(|mean| ColumnKernel::Quadratic { coeff: 1.0, mean })
            })
            .collect();
        let Some(kernels) = kernels else {
            return false;
        };
        let cfg = SubspaceConfig {
            qp_max_iters: 20_000,
            qp_tolerance: 1e-13,
            ..SubspaceConfig::default()
        };
        let Ok(proj) = self.solve_opinion(&kernels, &cfg) else {
            return false;
        };
        let scale: f64 = vote
            .iter()
            .map(|v| v.as_complex().map_or(0.0, |c| c.norm_sqr()))
            .sum();
        proj.objective <= 1e-8 * scale.max(1.0)
    }

    /// Solve the opinion quadratic program for the given per-column kernels.
    pub fn solve_opinion(
        &self,
        kernels: &[ColumnKernel],
        cfg: &SubspaceConfig,
    ) -> Result<SubspaceSolution, SubspaceError> {
        if kernels.len() != self.n() {
            return Err(SubspaceError::Width {
                got: kernels.len(),
                expected: self.n(),
            });
        }
        let coeffs: Vec<f64> = kernels.iter().map(|k| k.quadratic_coeff()).collect();
        let targets: Vec<Complex64> = kernels
            .iter()
            .map(|k| match k {
                ColumnKernel::Quadratic { mean, .. } => *mean,
                _ => Complex64::new(0.0, 0.0),
            })
            .collect();
        match &self.basis {
            Basis::Real(w) => {
                let x: Vec<f64> = targets.iter().map(|c| c.re).collect();
                let z = match self.domain {
                    HiddenDomain::NonnegReals => nonneg_least_squares(w, &coeffs, &x, cfg).0,
                    _ => weighted_lstsq_real(w, &coeffs, &x),
                };
                let o = w * &z;
                let opinion: Vec<Value> = o.iter().map(|&v| Value::Real(v)).collect();
                let objective = objective_of(kernels, &opinion)?;
                Ok(SubspaceSolution {
                    opinion,
                    hidden: z.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
                    objective,
                })
            }
            Basis::Complex(w) => {
                let z = weighted_lstsq_complex(w, &coeffs, &targets);
                let o = w * &z;
                let opinion: Vec<Value> = o.iter().map(|&v| Value::Complex(v)).collect();
                let objective = objective_of(kernels, &opinion)?;
                Ok(SubspaceSolution {
                    opinion,
                    hidden: z.iter().copied().collect(),
                    objective,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSolution {
    pub opinion: Vec<Value>,
    pub hidden: Vec<Complex64>,
    /// Sum of the column kernels at the opinion.
    pub objective: f64,
}

fn objective_of(kernels: &[ColumnKernel], v: &[Value]) -> Result<f64, KernelError> {
    kernels.iter().zip(v).map(|(k, x)| k.eval(x)).sum()
}

fn svd_eps(sv: &DVector<f64>, dims: usize) -> f64 {
    let max = sv.iter().cloned().fold(0.0, f64::max);
    (max * dims as f64 * f64::EPSILON).max(f64::MIN_POSITIVE)
}

/// Minimum-norm `z` minimizing `sum_i c_i |(W z)_i - x_i|^2`.
pub fn weighted_lstsq_real(w: &DMatrix<f64>, c: &[f64], x: &[f64]) -> DVector<f64> {
    let (n, p) = w.shape();
    let mut a = w.clone();
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let s = c[i].max(0.0).sqrt();
        a.row_mut(i).scale_mut(s);
        b[i] = s * x[i];
    }
    if c.iter().all(|&ci| ci <= 0.0) {
        return DVector::zeros(p);
    }
    let svd = a.svd(true, true);
    let eps = svd_eps(&svd.singular_values, n.max(p));
    svd.solve(&b, eps).unwrap_or_else(|_| DVector::zeros(p))
}

pub fn weighted_lstsq_complex(
    w: &DMatrix<Complex64>,
    c: &[f64],
    x: &[Complex64],
) -> DVector<Complex64> {
    let (n, p) = w.shape();
    let mut a = w.clone();
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let s = c[i].max(0.0).sqrt();
        for j in 0..p {
            a[(i, j)] *= s;
        }
        b[i] = x[i] * s;
    }
    if c.iter().all(|&ci| ci <= 0.0) {
        return DVector::zeros(p);
    }
    let svd = a.svd(true, true);
    let eps = svd_eps(&svd.singular_values, n.max(p));
    svd.solve(&b, eps).unwrap_or_else(|_| DVector::zeros(p))
}

/// Projected-gradient solve of `min_{z >= 0} sum_i c_i ((W z)_i - x_i)^2`.
/// Returns the minimizer and the objective after every iteration (the
/// first entry is the starting point).
pub fn nonneg_least_squares(
    w: &DMatrix<f64>,
    c: &[f64],
    x: &[f64],
    cfg: &SubspaceConfig,
) -> (DVector<f64>, Vec<f64>) {
    let (n, p) = w.shape();
    // Q = W^T C W, q = W^T C x, objective f(z) = z^T Q z - 2 q^T z + x^T C x
    let mut q_mat = DMatrix::<f64>::zeros(p, p);
    let mut q = DVector::<f64>::zeros(p);
    let mut k = 0.0;
    for i in 0..n {
        if c[i] <= 0.0 {
            continue;
        }
        let row = w.row(i);
        for a in 0..p {
            q[a] += c[i] * row[a] * x[i];
            for b in 0..p {
                q_mat[(a, b)] += c[i] * row[a] * row[b];
            }
        }
        k += c[i] * x[i] * x[i];
    }
    let f = |z: &DVector<f64>| -> f64 { (z.dot(&(&q_mat * z)) - 2.0 * q.dot(z) + k).max(0.0) };

    let mut z = weighted_lstsq_real(w, c, x).map(|v| v.max(0.0));
    let mut fz = f(&z);
    let mut trace = vec![fz];
    let trace_q: f64 = q_mat.diagonal().sum();
    if trace_q <= 0.0 {
        return (DVector::zeros(p), vec![f(&DVector::zeros(p))]);
    }
    let mut step = 1.0 / (2.0 * trace_q);
    for _ in 0..cfg.qp_max_iters {
        let grad = (&q_mat * &z - &q) * 2.0;
        let pg = (&z - (&z - &grad).map(|v| v.max(0.0))).norm();
        if pg <= cfg.qp_tolerance {
            break;
        }
        // try a larger step first, then halve until the Armijo test passes
        let mut t = step * 2.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = (&z - &grad * t).map(|v| v.max(0.0));
            let fc = f(&cand);
            if fc <= fz + 1e-4 * grad.dot(&(&cand - &z)) {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            break;
        };
        step = t;
        if fc >= fz && (&cand - &z).norm() == 0.0 {
            break;
        }
        z = cand;
        fz = fc;
        trace.push(fz);
    }
    (z, trace)
}

/// Per-neighbor context for the confidence score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceTerm {
    /// Summary mean of the external votes, `None` when there are none.
    pub mean: Option<Complex64>,
    /// Number of external non-abstaining voters `|S(i,a)|`.
    pub n_external: usize,
    /// Number of non-abstaining factors on the variable, `|N(i) \ A|`.
    pub n_active: usize,
}

pub fn subspace_confidence(
    opinion: &[Value],
    terms: &[ConfidenceTerm],
    lambda: f64,
    placement: PenaltyPlacement,
) -> f64 {
    let n = opinion.len().max(1) as f64;
    let mut mismatch = 0.0;
    let mut penalty = 0.0;
    for (o, t) in opinion.iter().zip(terms) {
        if let (Some(mean), Some(oc)) = (t.mean, o.as_complex()) {
            mismatch -= lambda * t.n_external as f64 * (oc - mean).norm_sqr();
        }
        penalty -= 1.0 / t.n_active.max(1) as f64;
    }
    match placement {
        PenaltyPlacement::InsideSum => (mismatch + penalty) / n,
        PenaltyPlacement::OutsideSum => mismatch / n + penalty,
    }
}

/// `||opinion - vote||^2 <= alpha`.
pub fn subspace_satisfied(opinion: &[Value], vote: &[Value], alpha: f64) -> bool {
    if opinion.len() != vote.len() {
        return false;
    }
    let d: f64 = opinion
        .iter()
        .zip(vote)
        .map(|(o, v)| match (o.as_complex(), v.as_complex()) {
            (Some(a), Some(b)) => (a - b).norm_sqr(),
            _ => f64::INFINITY,
        })
        .sum();
    d <= alpha
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceOpinion {
    pub opinion: Vec<Value>,
    pub objective: f64,
    pub confidence: f64,
    pub satisfied: bool,
}

/// Full opinion step for a subspace factor: solve, keep the current vote if
/// the solve does not improve on it, then score and test satisfaction.
pub fn subspace_opinion(
    factor: &SubspaceFactor,
    kernels: &[ColumnKernel],
    terms: &[ConfidenceTerm],
    previous: Option<&[Value]>,
    cfg: &SubspaceConfig,
) -> Result<SubspaceOpinion, SubspaceError> {
    let sol = factor.solve_opinion(kernels, cfg)?;
    let (opinion, objective) = match previous {
        Some(prev) => {
            let prev_obj = objective_of(kernels, prev)?;
            if prev_obj <= sol.objective {
                (prev.to_vec(), prev_obj)
            } else {
                (sol.opinion, sol.objective)
            }
        }
        None => (sol.opinion, sol.objective),
    };
    let confidence = subspace_confidence(&opinion, terms, cfg.lambda, cfg.penalty);
    let satisfied = previous.is_some_and(|p| subspace_satisfied(&opinion, p, cfg.alpha_for(factor.n())));
    Ok(SubspaceOpinion {
        opinion,
        objective,
        confidence,
        satisfied,
    })
}
