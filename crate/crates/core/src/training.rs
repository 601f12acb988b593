//! Building factor payloads from exemplars.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Payload, Value};
use crate::subspace::{Basis, HiddenDomain, SubspaceError, SubspaceFactor};
use crate::table::{MemoryTable, TableError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no exemplars were kept (subsample probability {prob}, seed {seed}); raise the probability or change the seed")]
    NothingKept { prob: f64, seed: u64 },
    #[error("subsample probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("hidden dimension {p} must be between 1 and n - 1 (n = {n})")]
    HiddenDim { p: usize, n: usize },
    #[error("exemplar matrix has a negative or non-finite entry")]
    Negative,
    #[error("exemplar matrix has no columns")]
    NoExemplars,
    #[error("position {position} has {got} rows, expected {expected}")]
    ShapeMismatch {
        position: usize,
        got: usize,
        expected: usize,
    },
    #[error("exemplar cell is not numeric of the required kind: {0}")]
    Kind(Value),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
}

/// Store exemplar rows, keeping each independently with probability `prob`.
pub fn ingest_table(exemplars: &[Vec<Value>], prob: f64, seed: u64) -> Result<MemoryTable, TrainError> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(TrainError::Probability(prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<Value>> = exemplars
        .iter()
        .filter(|_| prob >= 1.0 || rng.random_bool(prob))
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(TrainError::NothingKept { prob, seed });
    }
    Ok(MemoryTable::new(rows)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmfConfig {
    pub max_iters: usize,
    /// Stop once the relative objective improvement of an iteration drops
    /// below this.
    pub tol: f64,
    pub seed: u64,
    /// Multiplicative updates of H, then of W, per outer iteration. The
    /// repeats only touch p x p and p x m products.
    pub inner_updates: usize,
    /// Stretch every multiplicative step by an exact line search along its
    /// direction, kept inside the nonnegative orthant.
    pub extrapolate: bool,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            max_iters: 500,
            tol: 1e-9,
            seed: 0,
            inner_updates: 10,
            extrapolate: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NmfResult {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// Squared Frobenius residual at init and after every outer iteration.
    pub objective: Vec<f64>,
}

impl NmfResult {
    pub fn relative_residual(&self, x: &DMatrix<f64>) -> f64 {
        let norm = x.norm();
        if norm == 0.0 {
            return (x - &self.w * &self.h).norm();
        }
        (x - &self.w * &self.h).norm() / norm
    }
}

/// Step length `t >= 1` along `step = new - old` for a convex quadratic
/// `f(old + t step) = f(old) - 2 t lin + t^2 curv`, with every entry kept at
/// or above `eps`. `t = 1` is the plain multiplicative step, so the result
/// never does worse than it.
fn stretch(old: &DMatrix<f64>, new: &DMatrix<f64>, lin: f64, curv: f64, eps: f64) -> f64 {
    if curv <= 0.0 {
        return 1.0;
    }
    let mut t_max = f64::INFINITY;
    for (&o, &nv) in old.iter().zip(new.iter()) {
        if nv < o {
            t_max = t_max.min((o - eps) / (o - nv));
        }
    }
    (lin / curv).min(t_max).max(1.0)
}

fn frob2(x: &DMatrix<f64>, w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    (x - w * h).norm_squared()
}

/// Multiplicative-update factorization `X ~ W H` with `W, H >= 0`.
pub fn nmf(x: &DMatrix<f64>, p: usize, cfg: &NmfConfig) -> Result<NmfResult, TrainError> {
    let (n, m) = x.shape();
    if p == 0 || p >= n {
        return Err(TrainError::HiddenDim { p, n });
    }
    if m == 0 {
        return Err(TrainError::NoExemplars);
    }
    if x.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(TrainError::Negative);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = (x.mean() / p as f64).sqrt().max(1e-3);
    let mut w = DMatrix::from_fn(n, p, |_, _| scale * rng.random_range(0.1..1.0));
    let mut h = DMatrix::from_fn(p, m, |_, _| scale * rng.random_range(0.1..1.0));
    let wh = &w * &h;
    let fit = x.dot(&wh) / wh.norm_squared().max(f64::MIN_POSITIVE);
    if fit > 0.0 {
        w *= fit.sqrt();
        h *= fit.sqrt();
    }
    // entries are kept off zero, where a multiplicative update can never
    // move them again
    let eps = 1e-8 * scale;
    let mut objective = vec![frob2(x, &w, &h)];
    // below this the residual is rounding noise
    let floor = 1e-24 * x.norm_squared();
    let (mut w_prev, mut h_prev) = (w.clone(), h.clone());
    let mut beta = 0.5;
    let mut beta_cap = 1.0;
    for _ in 0..cfg.max_iters {
        // H block: W^T X and W^T W are fixed across the inner updates
        let wtx = w.transpose() * x;
        let wtw = w.transpose() * &w;
        for _ in 0..cfg.inner_updates.max(1) {
            let den = &wtw * &h;
            let mut h_new = h.clone();
            h_new.zip_zip_apply(&wtx, &den, |hv, nv, dv| {
                if dv > 0.0 {
                    *hv = (*hv * nv / dv).max(eps);
                }
            });
            if cfg.extrapolate {
                // residual terms through the Gram matrices: <X - WH, W D>, ||W D||^2
                let step = &h_new - &h;
                let lin = (&wtx - &den).dot(&step);
                let curv = step.dot(&(&wtw * &step));
                h += &step * stretch(&h, &h_new, lin, curv, eps);
            } else {
                h = h_new;
            }
        }
        let xht = x * h.transpose();
        let hht = &h * h.transpose();
        for _ in 0..cfg.inner_updates.max(1) {
            let den = &w * &hht;
            let mut w_new = w.clone();
            w_new.zip_zip_apply(&xht, &den, |wv, nv, dv| {
                if dv > 0.0 {
                    *wv = (*wv * nv / dv).max(eps);
                }
            });
            if cfg.extrapolate {
                let step = &w_new - &w;
                let lin = (&xht - &den).dot(&step);
                let curv = step.dot(&(&step * &hht));
                w += &step * stretch(&w, &w_new, lin, curv, eps);
            } else {
                w = w_new;
            }
        }
        let prev = *objective.last().expect("init");
        let mut cur = frob2(x, &w, &h);
        if cfg.extrapolate {
            // momentum from the previous iterate, kept only when it helps
            let push = |a: &DMatrix<f64>, b: &DMatrix<f64>, beta: f64| {
                a.zip_map(b, |v, u| (v + beta * (v - u)).max(eps))
            };
            let (w_try, h_try) = (push(&w, &w_prev, beta), push(&h, &h_prev, beta));
            let f_try = frob2(x, &w_try, &h_try);
            w_prev = w.clone();
            h_prev = h.clone();
            if f_try < cur {
                w = w_try;
                h = h_try;
                cur = f_try;
                beta_cap = (beta_cap * 1.01f64).min(1.0);
                beta = (beta * 1.05).min(beta_cap);
            } else {
                beta_cap = beta;
                beta /= 1.5;
            }
        }
        objective.push(cur);
        if cur <= floor || (prev - cur) <= cfg.tol * prev {
            break;
        }
    }
    Ok(NmfResult { w, h, objective })
}

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// Orthonormal columns, leading eigenvectors first.
    pub w: DMatrix<Complex64>,
    pub eigenvalues: Vec<f64>,
    /// Columns taken from the orthogonal complement because the covariance
    /// had rank below `p`.
    pub filled: usize,
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 200_000;

/// Leading eigenpair of a Hermitian positive semidefinite matrix by power
/// iteration from a deterministic start.
fn power_iteration(s: &DMatrix<Complex64>, rng: &mut ChaCha8Rng) -> (f64, nalgebra::DVector<Complex64>) {
    let n = s.nrows();
    let mut v = nalgebra::DVector::from_fn(n, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    v /= Complex64::new(v.norm(), 0.0);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let u = s * &v;
        let norm = u.norm();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next = u / Complex64::new(norm, 0.0);
        // align the phase before measuring the change
        let dot = v.dotc(&next);
        let phase = if dot.norm() > 0.0 { dot / dot.norm() } else { Complex64::new(1.0, 0.0) };
        let aligned = &next / phase;
        let delta = (&aligned - &v).norm();
        v = aligned;
        lambda = v.dotc(&(s * &v)).re;
        if delta < POWER_TOL {
            break;
        }
    }
    (lambda, v)
}

/// Top-`p` eigenvectors of `C = K K^H` for a Hermitian PSD Gram factor.
fn top_eigenvectors(c: &DMatrix<Complex64>, p: usize, seed: u64) -> (Vec<f64>, Vec<nalgebra::DVector<Complex64>>) {
    let mut s = c.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = c.diagonal().iter().map(|z| z.re).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut vals = Vec::new();
    let mut vecs: Vec<nalgebra::DVector<Complex64>> = Vec::new();
    for _ in 0..p {
        let (lambda, mut v) = power_iteration(&s, &mut rng);
        if lambda <= 1e-12 * scale {
            break;
        }
        for u in &vecs {
            let proj = u.dotc(&v);
            v -= u * proj;
        }
        let nv = v.norm();
        if nv < 1e-6 {
            break;
        }
        v /= Complex64::new(nv, 0.0);
        s -= &v * v.adjoint() * Complex64::new(lambda, 0.0);
        vals.push(lambda);
        vecs.push(v);
    }
    (vals, vecs)
}

/// Complex PCA: the `p` eigenvectors of `sum_t x_t x_t^H` with the largest
/// eigenvalues.
pub fn complex_pca(x: &DMatrix<Complex64>, p: usize) -> Result<PcaResult, TrainError> {
    let (n, m) = x.shape();
    if p == 0 || p >= n {
        return Err(TrainError::HiddenDim { p, n });
    }
    if m == 0 {
        return Err(TrainError::NoExemplars);
    }
    let (vals, mut vecs) = if m < n {
        // eigenvectors of X X^H from those of the smaller Gram matrix X^H X
        let g = x.adjoint() * x;
        let (vals, us) = top_eigenvectors(&g, p.min(m), 0x5eed);
        let vecs = vals
            .iter()
            .zip(us)
            .map(|(&l, u)| {
                let mut v = x * u;
                v /= Complex64::new(l.sqrt(), 0.0);
                let nv = v.norm();
                v / Complex64::new(nv, 0.0)
            })
            .collect::<Vec<_>>();
        (vals, vecs)
    } else {
        top_eigenvectors(&(x * x.adjoint()), p, 0x5eed)
    };
    // Gram-Schmidt to clean up rounding, then fill from the standard basis
    let mut cols: Vec<nalgebra::DVector<Complex64>> = Vec::with_capacity(p);
    for mut v in vecs.drain(..) {
        for _ in 0..2 {
            for u in &cols {
                let proj = u.dotc(&v);
                v -= u * proj;
            }
        }
        let nv = v.norm();
        cols.push(v / Complex64::new(nv, 0.0));
    }
    let found = cols.len();
    let mut e = 0;
    while cols.len() < p && e < n {
        let mut v = nalgebra::DVector::<Complex64>::zeros(n);
        v[e] = Complex64::new(1.0, 0.0);
        e += 1;
        for _ in 0..2 {
            for u in &cols {
                let proj = u.dotc(&v);
                v -= u * proj;
            }
        }
        let nv = v.norm();
        if nv > 1e-6 {
            cols.push(v / Complex64::new(nv, 0.0));
        }
    }
    let mut eigenvalues = vals;
    eigenvalues.resize(p, 0.0);
    Ok(PcaResult {
        w: DMatrix::from_columns(&cols),
        eigenvalues,
        filled: p - found,
    })
}

/// How a pooled exemplar set becomes a payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Trainer {
    Table { subsample_prob: f64, seed: u64 },
    Nmf { p: usize, config: NmfConfig },
    Pca { p: usize },
}

/// Exemplars for one factor position: one row per training sample, columns
/// aligned with the factor's neighbors.
pub type Exemplars = Vec<Vec<Value>>;

pub fn real_matrix(ex: &[Vec<Value>]) -> Result<DMatrix<f64>, TrainError> {
    let n = ex.first().map_or(0, |r| r.len());
    let mut m = DMatrix::zeros(n, ex.len());
    for (t, row) in ex.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            m[(i, t)] = v.as_real().ok_or(TrainError::Kind(*v))?;
        }
    }
    Ok(m)
}

pub fn complex_matrix(ex: &[Vec<Value>]) -> Result<DMatrix<Complex64>, TrainError> {
    let n = ex.first().map_or(0, |r| r.len());
    let mut m = DMatrix::zeros(n, ex.len());
    for (t, row) in ex.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            m[(i, t)] = v.as_complex().ok_or(TrainError::Kind(*v))?;
        }
    }
    Ok(m)
}

/// Per-payload training diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Stored rows for tables, exemplar count otherwise.
    pub rows: usize,
    /// NMF objective after each iteration.
    pub objective: Vec<f64>,
    pub relative_residual: Option<f64>,
    pub eigenvalues: Vec<f64>,
    /// PCA columns filled from the orthogonal complement.
    pub filled: usize,
}

/// Train one payload from exemplars.
pub fn train_payload(ex: &[Vec<Value>], trainer: &Trainer) -> Result<Payload, TrainError> {
    train_payload_report(ex, trainer).map(|(p, _)| p)
}

pub fn train_payload_report(ex: &[Vec<Value>], trainer: &Trainer) -> Result<(Payload, TrainReport), TrainError> {
    if ex.is_empty() {
        return Err(TrainError::NoExemplars);
    }
    match trainer {
        Trainer::Table { subsample_prob, seed } => {
            let t = ingest_table(ex, *subsample_prob, *seed)?;
            let report = TrainReport {
                rows: t.n_rows(),
                ..TrainReport::default()
            };
            Ok((Payload::table(Arc::new(t)), report))
        }
        Trainer::Nmf { p, config } => {
            let x = real_matrix(ex)?;
            let r = nmf(&x, *p, config)?;
            let report = TrainReport {
                rows: ex.len(),
                relative_residual: Some(r.relative_residual(&x)),
                objective: r.objective,
                ..TrainReport::default()
            };
            let s = SubspaceFactor::new(Basis::Real(r.w), HiddenDomain::NonnegReals)?;
            Ok((Payload::Subspace(Arc::new(s)), report))
        }
        Trainer::Pca { p } => {
            let x = complex_matrix(ex)?;
            let r = complex_pca(&x, *p)?;
            let report = TrainReport {
                rows: ex.len(),
                eigenvalues: r.eigenvalues,
                filled: r.filled,
                ..TrainReport::default()
            };
            let s = SubspaceFactor::new(Basis::Complex(r.w), HiddenDomain::Complex)?;
            Ok((Payload::Subspace(Arc::new(s)), report))
        }
    }
}

/// Pool exemplars from every position into one set; all positions must have
/// the same width.
pub fn pool_positions(positions: &[Exemplars]) -> Result<Exemplars, TrainError> {
    let expected = positions
        .iter()
        .find_map(|p| p.first().map(|r| r.len()))
        .ok_or(TrainError::NoExemplars)?;
    let mut pooled = Vec::new();
    for (position, ex) in positions.iter().enumerate() {
        for row in ex {
            if row.len() != expected {
                return Err(TrainError::ShapeMismatch {
                    position,
                    got: row.len(),
                    expected,
                });
            }
            pooled.push(row.clone());
        }
    }
    Ok(pooled)
}

/// One payload learned from all positions of a time-invariant layout.
pub fn train_shared(positions: &[Exemplars], trainer: &Trainer) -> Result<Payload, TrainError> {
    train_payload(&pool_positions(positions)?, trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reals(v: &[f64]) -> Vec<Value> {
        v.iter().map(|&x| Value::Real(x)).collect()
    }

    #[test]
    fn ingest_keeps_all_at_one() {
        let ex: Vec<_> = (0..5).map(|i| reals(&[i as f64])).collect();
        assert_eq!(ingest_table(&ex, 1.0, 0).unwrap().n_rows(), 5);
        assert!(matches!(
            ingest_table(&ex, 0.0, 0),
            Err(TrainError::NothingKept { .. })
        ));
    }

    #[test]
    fn ingest_subsample_is_binomial_and_deterministic() {
        let ex: Vec<_> = (0..1000).map(|i| reals(&[i as f64])).collect();
        let t = ingest_table(&ex, 0.3, 42).unwrap();
        let sd = (1000.0f64 * 0.3 * 0.7).sqrt();
        assert!((t.n_rows() as f64 - 300.0).abs() <= 3.0 * sd);
        assert_eq!(t, ingest_table(&ex, 0.3, 42).unwrap());
    }

    #[test]
    fn nmf_rank_one_and_monotone() {
        let w = DMatrix::from_fn(6, 1, |i, _| 0.2 + i as f64 * 0.1);
        let h = DMatrix::from_fn(1, 9, |_, j| 0.5 + (j % 4) as f64 * 0.3);
        let x = &w * &h;
        let r = nmf(&x, 1, &NmfConfig { tol: 0.0, ..NmfConfig::default() }).unwrap();
        for pair in r.objective.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-26 * x.norm_squared(), "{pair:?}");
        }
        assert!(r.relative_residual(&x) <= 1e-3);
        assert!(matches!(nmf(&x, 6, &NmfConfig::default()), Err(TrainError::HiddenDim { .. })));
    }

    #[test]
    fn pca_rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let x = DMatrix::from_fn(4, 5, |i, _| Complex64::new(u[i], 0.0));
        let r = complex_pca(&x, 2).unwrap();
        let dot: Complex64 = (0..4).map(|i| r.w[(i, 0)].conj() * u[i] / nu).sum();
        assert!((dot.norm() - 1.0).abs() < 1e-9);
        assert_eq!(r.filled, 1);
        let g = r.w.adjoint() * &r.w;
        assert!((g - DMatrix::identity(2, 2)).norm() < 1e-8);
    }

    #[test]
    fn pooling_counts_and_rejects_mismatch() {
        let pos: Vec<Exemplars> = (0..10).map(|_| vec![reals(&[0.0, 1.0]); 2]).collect();
        assert_eq!(pool_positions(&pos).unwrap().len(), 20);
        let mut bad = pos.clone();
        bad[3][0] = reals(&[0.0]);
        assert!(matches!(pool_positions(&bad), Err(TrainError::ShapeMismatch { position: 3, .. })));
    }
}
