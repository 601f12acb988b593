//! Per-variable message summaries, local minimizers and incremental opinion
//! costs for the supported alphabets.
//!
//! A factor forming an opinion never looks at individual external votes; it
//! only sees one [`Summary`] per neighboring variable:
//!
//! * real / complex with quadratic cost: the weighted mean of the external
//!   votes and their total weight,
//! * integer with absolute cost: the median interval `[l, u]`,
//! * label with indicator cost: the mode set.

use num_complex::Complex64;
use thiserror::Error;

use crate::graph::{mismatch, Value, VariableKind};

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("unequal vote weights on a discrete variable")]
    UnequalWeights,
    #[error("no votes to minimize over")]
    NoVotes,
    #[error("value {0} does not match the variable alphabet")]
    KindMismatch(Value),
    #[error("total weight {total} is smaller than the edge weight {edge}")]
    WeightTotal { total: f64, edge: f64 },
}

/// Fixed-size bit set over a label domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    bits: Vec<u64>,
    domain: u32,
}

impl LabelSet {
    pub fn empty(domain: u32) -> Self {
        LabelSet {
            bits: vec![0; (domain as usize).div_ceil(64)],
            domain,
        }
    }

    pub fn insert(&mut self, k: u32) {
        self.bits[(k / 64) as usize] |= 1 << (k % 64);
    }

    pub fn contains(&self, k: u32) -> bool {
        k < self.domain && self.bits[(k / 64) as usize] & (1 << (k % 64)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.domain).filter(|&k| self.contains(k))
    }

    pub fn first(&self) -> Option<u32> {
        self.iter().next()
    }
}

/// The message m(i -> a) a variable sends to one of its factors.
#[derive(Clone, Debug, PartialEq)]
pub enum Summary {
    /// No external votes.
    Empty,
    Real { mean: f64, weight: f64 },
    Complex { mean: Complex64, weight: f64 },
    Int { lo: i64, hi: i64 },
    Label { modes: LabelSet },
}

impl Summary {
    /// Weighted mean for quadratic summaries.
    pub fn mean(&self) -> Option<Complex64> {
        match *self {
            Summary::Real { mean, .. } => Some(Complex64::new(mean, 0.0)),
            Summary::Complex { mean, .. } => Some(mean),
            _ => None,
        }
    }

    /// Sum of external weights for quadratic summaries, zero otherwise.
    pub fn external_weight(&self) -> f64 {
        match *self {
            Summary::Real { weight, .. } | Summary::Complex { weight, .. } => weight,
            _ => 0.0,
        }
    }
}

fn check_equal_weights(votes: &[(Value, f64)]) -> Result<(), KernelError> {
    match votes.first() {
        Some(&(_, w0)) if votes.iter().any(|&(_, w)| w != w0) => Err(KernelError::UnequalWeights),
        _ => Ok(()),
    }
}

/// Median interval `[l, u]` of equally weighted integer votes: the values `v`
/// with at least ceil(n/2) votes `<= v` and at least ceil(n/2) votes `>= v`.
pub fn median_interval(values: &mut [i64]) -> Option<(i64, i64)> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    let half = n.div_ceil(2);
    Some((values[half - 1], values[n - half]))
}

/// Mode set of equally weighted label votes.
pub fn mode_set(domain: u32, labels: impl IntoIterator<Item = u32>) -> LabelSet {
    let mut counts = vec![0usize; domain as usize];
    for k in labels {
        counts[k as usize] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    let mut set = LabelSet::empty(domain);
    if best > 0 {
        for (k, &c) in counts.iter().enumerate() {
            if c == best {
                set.insert(k as u32);
            }
        }
    }
    set
}

/// Build the summary of a variable's external votes `(value, weight)`.
pub fn summarize(kind: &VariableKind, votes: &[(Value, f64)]) -> Result<Summary, KernelError> {
    if votes.is_empty() {
        return Ok(Summary::Empty);
    }
    match *kind {
        VariableKind::Real { .. } => {
            let (mut num, mut den) = (0.0, 0.0);
            for &(v, w) in votes {
                let v = v.as_real().ok_or(KernelError::KindMismatch(v))?;
                num += v * w;
                den += w;
            }
            if den <= 0.0 {
                return Ok(Summary::Empty);
            }
            Ok(Summary::Real {
                mean: num / den,
                weight: den,
            })
        }
        VariableKind::Complex => {
            let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
            for &(v, w) in votes {
                let c = match v {
                    Value::Complex(c) => c,
                    other => return Err(KernelError::KindMismatch(other)),
                };
                num += c * w;
                den += w;
            }
            if den <= 0.0 {
                return Ok(Summary::Empty);
            }
            Ok(Summary::Complex {
                mean: num / den,
                weight: den,
            })
        }
        VariableKind::Integer { .. } => {
            check_equal_weights(votes)?;
            let mut zs = votes
                .iter()
                .map(|&(v, _)| v.as_int().ok_or(KernelError::KindMismatch(v)))
                .collect::<Result<Vec<_>, _>>()?;
            let (lo, hi) = median_interval(&mut zs).expect("nonempty");
            Ok(Summary::Int { lo, hi })
        }
        VariableKind::Label { domain } => {
            check_equal_weights(votes)?;
            let labels = votes
                .iter()
                .map(|&(v, _)| match v {
                    Value::Label(k) if k < domain => Ok(k),
                    other => Err(KernelError::KindMismatch(other)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Summary::Label {
                modes: mode_set(domain, labels),
            })
        }
    }
}

/// Distance from `z` to the interval `[l, u]`.
pub fn interval_distance(z: i64, l: i64, u: i64) -> u64 {
    debug_assert!(l <= u);
    if z > u {
        (z - u) as u64
    } else if z < l {
        (l - z) as u64
    } else {
        0
    }
}

/// The per-column cost function phi(., m, w) with its parameters resolved
/// once, so scanning many candidate values is cheap.
#[derive(Clone, Debug)]
pub enum ColumnKernel {
    Zero,
    Quadratic { coeff: f64, mean: Complex64 },
    Interval { weight: f64, lo: i64, hi: i64 },
    Modes { weight: f64, modes: LabelSet },
}

impl ColumnKernel {
    /// `total` is W_i, the summed weight of all non-abstaining votes on the
    /// variable plus this factor's own edge weight `w`.
    pub fn new(summary: &Summary, w: f64, total: f64) -> Result<ColumnKernel, KernelError> {
        if total < w {
            return Err(KernelError::WeightTotal { total, edge: w });
        }
        Ok(match summary {
            Summary::Empty => ColumnKernel::Zero,
            Summary::Real { .. } | Summary::Complex { .. } => {
                let ext = total - w;
                if ext <= 0.0 || total <= 0.0 {
                    ColumnKernel::Zero
                } else {
                    ColumnKernel::Quadratic {
                        coeff: w * ext / total,
                        mean: summary.mean().expect("quadratic summary"),
                    }
                }
            }
            Summary::Int { lo, hi } => ColumnKernel::Interval {
                weight: w,
                lo: *lo,
                hi: *hi,
            },
            Summary::Label { modes } => ColumnKernel::Modes {
                weight: w,
                modes: modes.clone(),
            },
        })
    }

    #[inline]
    pub fn eval(&self, candidate: &Value) -> Result<f64, KernelError> {
        match (self, *candidate) {
            (ColumnKernel::Zero, _) => Ok(0.0),
            (ColumnKernel::Quadratic { coeff, mean }, Value::Real(v)) => {
                let d = v - mean.re;
                Ok(coeff * (d * d + mean.im * mean.im))
            }
            (ColumnKernel::Quadratic { coeff, mean }, Value::Complex(c)) => {
                Ok(coeff * (c - mean).norm_sqr())
            }
            (ColumnKernel::Interval { weight, lo, hi }, Value::Int(z)) => {
                Ok(weight * interval_distance(z, *lo, *hi) as f64)
            }
            (ColumnKernel::Modes { weight, modes }, Value::Label(k)) => {
                Ok(if modes.contains(k) { 0.0 } else { *weight })
            }
            (_, other) => Err(KernelError::KindMismatch(other)),
        }
    }

    /// Quadratic coefficient c_i = w(W - w)/W, zero for other kernels.
    pub fn quadratic_coeff(&self) -> f64 {
        match self {
            ColumnKernel::Quadratic { coeff, .. } => *coeff,
            _ => 0.0,
        }
    }
}

/// Incremental cost phi(candidate, m(i -> a), w) of a factor casting
/// `candidate` on a variable whose external votes are summarized by `summary`.
pub fn incremental_cost(
    candidate: &Value,
    summary: &Summary,
    w: f64,
    total: f64,
) -> Result<f64, KernelError> {
    ColumnKernel::new(summary, w, total)?.eval(candidate)
}

/// Minimizer of the summed mismatch cost over a fixed set of votes, with
/// deterministic representatives: lower end of the median interval, smallest
/// label in the mode set.
pub fn local_minimizer(kind: &VariableKind, votes: &[(Value, f64)]) -> Result<Value, KernelError> {
    match summarize(kind, votes)? {
        Summary::Empty => Err(KernelError::NoVotes),
        Summary::Real { mean, .. } => Ok(Value::Real(mean)),
        Summary::Complex { mean, .. } => Ok(Value::Complex(mean)),
        Summary::Int { lo, .. } => Ok(Value::Int(lo)),
        Summary::Label { modes } => Ok(Value::Label(modes.first().ok_or(KernelError::NoVotes)?)),
    }
}

/// The unreduced inner minimization
/// `min_x [psi(x, candidate) w + sum_b psi(x, v_b) w_b]`, evaluated directly:
/// closed form for real and complex values, exhaustive search otherwise.
/// Used as an oracle for [`incremental_cost`].
pub fn brute_force_inner_min(
    kind: &VariableKind,
    candidate: &Value,
    w: f64,
    external: &[(Value, f64)],
) -> f64 {
    let eval = |x: &Value| -> f64 {
        let mut s = mismatch(x, candidate).expect("kind") * w;
        for (v, wb) in external {
            s += mismatch(x, v).expect("kind") * wb;
        }
        s
    };
    match *kind {
        VariableKind::Real { .. } | VariableKind::Complex => {
            let mut num = candidate.as_complex().expect("quadratic") * w;
            let mut den = w;
            for (v, wb) in external {
                num += v.as_complex().expect("quadratic") * *wb;
                den += wb;
            }
            if den <= 0.0 {
                return 0.0;
            }
            let x = num / den;
            let x = match candidate {
                Value::Real(_) => Value::Real(x.re),
                _ => Value::Complex(x),
            };
            eval(&x)
        }
        VariableKind::Integer { .. } => {
            let vals = external
                .iter()
                .map(|(v, _)| v.as_int().expect("int"))
                .chain(std::iter::once(candidate.as_int().expect("int")));
            let (lo, hi) = vals.fold((i64::MAX, i64::MIN), |(l, h), z| (l.min(z), h.max(z)));
            (lo..=hi)
                .map(|z| eval(&Value::Int(z)))
                .fold(f64::INFINITY, f64::min)
        }
        VariableKind::Label { domain } => (0..domain)
            .map(|k| eval(&Value::Label(k)))
            .fold(f64::INFINITY, f64::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const INT: VariableKind = VariableKind::Integer { range: None };
    const REAL: VariableKind = VariableKind::Real {
        nonneg: false,
        upper: None,
    };

    fn ints(v: &[i64]) -> Vec<(Value, f64)> {
        v.iter().map(|&z| (Value::Int(z), 1.0)).collect()
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&REAL, &[(Value::Real(2.0), 1.0), (Value::Real(4.0), 3.0)]).unwrap();
        assert_eq!(
            s,
            Summary::Real {
                mean: 3.5,
                weight: 4.0
            }
        );
        assert_eq!(
            summarize(&INT, &ints(&[1, 2, 3, 6])).unwrap(),
            Summary::Int { lo: 2, hi: 3 }
        );
        let lab = VariableKind::Label { domain: 10 };
        let votes: Vec<_> = [4, 9, 4].iter().map(|&k| (Value::Label(k), 1.0)).collect();
        match summarize(&lab, &votes).unwrap() {
            Summary::Label { modes } => assert_eq!(modes.iter().collect::<Vec<_>>(), vec![4]),
            other => panic!("{other:?}"),
        }
        assert_eq!(summarize(&INT, &[]).unwrap(), Summary::Empty);
    }

    #[test]
    fn discrete_weights_validated() {
        let votes = [(Value::Int(1), 1.0), (Value::Int(2), 2.0)];
        assert_eq!(summarize(&INT, &votes), Err(KernelError::UnequalWeights));
    }

    #[test]
    fn interval_distance_cases() {
        assert_eq!(interval_distance(5, 2, 3), 2);
        assert_eq!(interval_distance(2, 2, 3), 0);
        assert_eq!(interval_distance(0, 2, 3), 2);
    }

    #[test]
    fn incremental_cost_examples() {
        let s = Summary::Real {
            mean: 3.0,
            weight: 2.0,
        };
        let c = incremental_cost(&Value::Real(5.0), &s, 1.0, 3.0).unwrap();
        assert!((c - 8.0 / 3.0).abs() < 1e-15);
        // brute force: min_x (x-5)^2 + 2 (x-3)^2 at x = 11/3. The external votes
        // {3, 3} contribute nothing at their own mean, so the offset is zero.
        let ext = [(Value::Real(3.0), 1.0), (Value::Real(3.0), 1.0)];
        let b = brute_force_inner_min(&REAL, &Value::Real(5.0), 1.0, &ext);
        assert!((b - 8.0 / 3.0).abs() < 1e-12);

        let c = incremental_cost(&Value::Int(5), &Summary::Int { lo: 2, hi: 3 }, 2.0, 6.0).unwrap();
        assert_eq!(c, 4.0);

        let mut modes = LabelSet::empty(4);
        modes.insert(1);
        let s = Summary::Label { modes };
        assert_eq!(incremental_cost(&Value::Label(1), &s, 7.0, 9.0).unwrap(), 0.0);
        assert_eq!(incremental_cost(&Value::Label(2), &s, 7.0, 9.0).unwrap(), 7.0);

        assert_eq!(
            incremental_cost(&Value::Real(9.0), &Summary::Empty, 1.0, 1.0).unwrap(),
            0.0
        );
        assert!(matches!(
            incremental_cost(&Value::Real(1.0), &s, 2.0, 1.0),
            Err(KernelError::WeightTotal { .. })
        ));
    }

    #[test]
    fn sole_voter_has_zero_cost() {
        let s = Summary::Real {
            mean: 0.0,
            weight: 0.0,
        };
        assert_eq!(incremental_cost(&Value::Real(4.0), &s, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn local_minimizer_examples() {
        let v = [(Value::Real(1.0), 1.0), (Value::Real(3.0), 1.0)];
        assert_eq!(local_minimizer(&REAL, &v).unwrap(), Value::Real(2.0));
        assert_eq!(local_minimizer(&INT, &ints(&[1, 2, 3, 6])).unwrap(), Value::Int(2));
        let lab = VariableKind::Label { domain: 3 };
        let v: Vec<_> = [1, 1, 2].iter().map(|&k| (Value::Label(k), 1.0)).collect();
        assert_eq!(local_minimizer(&lab, &v).unwrap(), Value::Label(1));
        assert_eq!(local_minimizer(&INT, &[]), Err(KernelError::NoVotes));
    }

    #[test]
    fn brute_offsets_trivial_cases() {
        // single integer vote: the inner min is |o - v| with zero offset
        for o in -3..8 {
            let b = brute_force_inner_min(&INT, &Value::Int(o), 1.0, &ints(&[2]));
            assert_eq!(b, (o - 2).abs() as f64);
        }
        let lab = VariableKind::Label { domain: 5 };
        let ext = [(Value::Label(3), 2.0), (Value::Label(3), 2.0)];
        assert_eq!(brute_force_inner_min(&lab, &Value::Label(3), 2.0, &ext), 0.0);
        assert_eq!(brute_force_inner_min(&lab, &Value::Label(1), 2.0, &ext), 2.0);
    }

    #[test]
    fn weighted_mean_is_a_minimum() {
        let votes = [(0.2, 1.0), (0.9, 2.5), (0.4, 0.3)];
        let cost = |x: f64| votes.iter().map(|(v, w)| w * (x - v) * (x - v)).sum::<f64>();
        let vv: Vec<_> = votes.iter().map(|&(v, w)| (Value::Real(v), w)).collect();
        let x = local_minimizer(&REAL, &vv).unwrap().as_real().unwrap();
        assert!(cost(x + 1e-3) > cost(x));
        assert!(cost(x - 1e-3) > cost(x));
    }

    #[test]
    fn complex_kernel() {
        let votes = [
            (Value::Complex(Complex64::new(1.0, 1.0)), 1.0),
            (Value::Complex(Complex64::new(3.0, -1.0)), 1.0),
        ];
        let s = summarize(&VariableKind::Complex, &votes).unwrap();
        assert_eq!(s.mean(), Some(Complex64::new(2.0, 0.0)));
        let cand = Value::Complex(Complex64::new(0.0, 2.0));
        let inc = incremental_cost(&cand, &s, 1.0, 3.0).unwrap();
        assert!((inc - (2.0 / 3.0) * 8.0).abs() < 1e-12);
    }

    /// Literal median-set definition, by enumeration.
    fn median_set_literal(votes: &[i64]) -> Vec<i64> {
        let half = votes.len().div_ceil(2);
        let lo = *votes.iter().min().unwrap();
        let hi = *votes.iter().max().unwrap();
        (lo..=hi)
            .filter(|&v| {
                votes.iter().filter(|&&b| b <= v).count() >= half
                    && votes.iter().filter(|&&b| b >= v).count() >= half
            })
            .collect()
    }

    proptest! {
        #[test]
        fn median_interval_matches_set_definition(votes in proptest::collection::vec(-5i64..=10, 1..8)) {
            let set = median_set_literal(&votes);
            let (l, u) = median_interval(&mut votes.clone()).unwrap();
            prop_assert_eq!(set, (l..=u).collect::<Vec<_>>());
        }

        #[test]
        fn real_incremental_differs_by_constant(
            ext in proptest::collection::vec((-5.0f64..5.0, 0.1f64..3.0), 1..6),
            w in 0.1f64..3.0,
            c1 in -10.0f64..10.0,
            c2 in -10.0f64..10.0,
        ) {
            let votes: Vec<_> = ext.iter().map(|&(v, w)| (Value::Real(v), w)).collect();
            let s = summarize(&REAL, &votes).unwrap();
            let total = s.external_weight() + w;
            let d = |c: f64| {
                brute_force_inner_min(&REAL, &Value::Real(c), w, &votes)
                    - incremental_cost(&Value::Real(c), &s, w, total).unwrap()
            };
            prop_assert!((d(c1) - d(c2)).abs() < 1e-9 * (1.0 + d(c1).abs()));
        }
    }
}
