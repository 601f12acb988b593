use mfn::graph::{Payload, Value};
use mfn::subspace::Basis;
use mfn::training::{train_payload, train_shared, Exemplars, Trainer};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean squared distance of the exemplars from the payload's column space.
fn projection_mse(payload: &Payload, ex: &Exemplars) -> f64 {
    let Payload::Subspace(s) = payload else { panic!("expected a subspace") };
    let Basis::Complex(w) = s.basis() else { panic!("expected a complex basis") };
    let mut total = 0.0;
    for row in ex {
        let x = DMatrix::from_iterator(row.len(), 1, row.iter().map(|v| v.as_complex().unwrap()));
        let r = &x - w * (w.adjoint() * &x);
        total += r.norm_squared();
    }
    total / (ex.len() * ex[0].len()) as f64
}

#[test]
fn per_position_training_beats_shared_on_position_dependent_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    // every position draws its exemplars along its own direction
    let positions: Vec<Exemplars> = (0..4)
        .map(|_| {
            let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..30)
                .map(|_| {
                    let a = rng.random_range(0.5..2.0);
                    dir.iter()
                        .map(|&d| Value::Complex(Complex64::new(a * d + rng.random_range(-0.01..0.01), 0.0)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let trainer = Trainer::Pca { p: 1 };
    let shared = train_shared(&positions, &trainer).unwrap();
    let (mut own, mut pooled) = (0.0, 0.0);
    for ex in &positions {
        own += projection_mse(&train_payload(ex, &trainer).unwrap(), ex);
        pooled += projection_mse(&shared, ex);
    }
    assert!(own * 10.0 < pooled, "per-position {own} vs shared {pooled}");
}

#[test]
fn shared_training_pools_every_position() {
    let positions: Vec<Exemplars> = (0..3)
        .map(|k| vec![vec![Value::Real(k as f64), Value::Real(1.0)]])
        .collect();
    let Payload::Table { table, .. } = train_shared(&positions, &Trainer::Table { subsample_prob: 1.0, seed: 0 }).unwrap() else {
        panic!("expected a table")
    };
    assert_eq!(table.n_rows(), 3);
}
