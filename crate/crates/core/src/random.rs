//! Random instances for property checks and the CLI probe command.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::generator::{OperatorSpec, OuterMap, ProbeFunction};
use crate::measures::{MeasureVec, PolyRep, SymCoeff};

/// Admissible spec with every ingredient switched on: immigration, a
/// quasi-monotone `B₁`, `α > 0`, a `(β,π)` coupling that is PSD but not
/// through `β` alone, and one loading.
pub fn admissible_spec<R: Rng + ?Sized>(m: usize, rng: &mut R) -> OperatorSpec {
    let b = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let b1 = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            rng.random_range(-3.0..0.0)
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let alpha = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut kappa = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = rng.random_range(0.0..0.5);
            kappa[(i, j)] = v;
            kappa[(j, i)] = v;
        }
    }
    let mut beta = -kappa.clone();
    for i in 0..m {
        beta[(i, i)] = rng.random_range(0.0..0.5);
    }
    let loading = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    OperatorSpec::zero(m)
        .with_b(b)
        .with_b1(b1)
        .with_alpha(alpha)
        .with_beta(beta)
        .with_pi(kappa)
        .with_loading(loading)
}

/// Admissible spec with `Q₂ ≡ 0`.
pub fn affine_spec<R: Rng + ?Sized>(m: usize, rng: &mut R) -> OperatorSpec {
    let b = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let b1 = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            rng.random_range(-2.0..0.5)
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let alpha = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    OperatorSpec::zero(m).with_b(b).with_b1(b1).with_alpha(alpha)
}

pub fn polynomial<R: Rng + ?Sized>(m: usize, degree: usize, rng: &mut R) -> PolyRep {
    let terms = (0..=degree)
        .map(|k| {
            let len = m.pow(k as u32);
            let values = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            SymCoeff::from_dense(m, k, values).expect("length matches")
        })
        .collect();
    PolyRep::from_terms(terms).expect("degrees in order")
}

pub fn measure<R: Rng + ?Sized>(m: usize, rng: &mut R) -> MeasureVec {
    MeasureVec::new((0..m).map(|_| rng.random_range(0.0..5.0)).collect()).expect("non-negative")
}

/// Bump-composed cylindrical function with `r` inner coefficients.
/// Inner coefficients are small so that the bump is resolved on the
/// default start box.
pub fn probe_function<R: Rng + ?Sized>(m: usize, r: usize, rng: &mut R) -> ProbeFunction {
    let inner = (0..r)
        .map(|_| (0..m).map(|_| rng.random_range(-0.1..0.1)).collect())
        .collect();
    let mut quadratic = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..=i {
            let v = rng.random_range(-1.0..1.0);
            quadratic[(i, j)] = v;
            quadratic[(j, i)] = v;
        }
    }
    let outer = OuterMap {
        constant: rng.random_range(0.0..1.0),
        linear: (0..r).map(|_| rng.random_range(-1.0..1.0)).collect(),
        quadratic,
        damped: true,
    };
    ProbeFunction::new(inner, outer).expect("shapes match")
}

/// `count` probe functions from a ChaCha8 stream seeded with `seed`.
pub fn probe_functions(m: usize, r: usize, count: usize, seed: u64) -> Vec<ProbeFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| probe_function(m, r, &mut rng)).collect()
}
