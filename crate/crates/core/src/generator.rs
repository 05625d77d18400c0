//! Polynomial generators on measures over a finite grid.
//!
//! An [`OperatorSpec`] fixes the generator
//!
//! ```text
//! Lf(ν) = ⟨∂f(ν), b⟩ + ⟨B₁ ∂f(ν), ν⟩ + ½(⟨Q₁(∂²f(ν)), ν⟩ + ⟨Q₂(∂²f(ν)), ν²⟩)
//! ```
//!
//! with `Q₁(g)(i) = α_i g(i,i)` and
//! `Q₂(g)(i,j) = ½(π_ij g(i,i) + π_ji g(j,j)) + (β_ij + Σ_k a_k(i) a_k(j)) g(i,j)`.
//! On the weights `c` of `ν` this is the diffusion on `ℝ^m₊` with drift
//! `b + B₁ᵀc` and diffusion matrix [`OperatorSpec::diffusion_matrix`].

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, psd_threshold};
use crate::measures::{
    flat_len, partial, partial2, tensor_len, unflatten, MeasureVec, PolyRep, DEFAULT_MAX_DEGREE,
};

/// Parameters `(b, B₁, α, β, π, loadings)` of a polynomial generator.
///
/// Loadings are the diagonal generators `A_k g(i) = a_k(i) g(i)` of positive
/// groups; they enter `Q₂` through `A_k ⊗ A_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    pub b: Vec<f64>,
    pub b1: DMatrix<f64>,
    pub alpha: Vec<f64>,
    pub beta: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub loadings: Vec<Vec<f64>>,
    /// Largest polynomial degree the generator will act on.
    pub max_degree: usize,
}

impl OperatorSpec {
    pub fn zero(m: usize) -> Self {
        Self {
            b: vec![0.0; m],
            b1: DMatrix::zeros(m, m),
            alpha: vec![0.0; m],
            beta: DMatrix::zeros(m, m),
            pi: DMatrix::zeros(m, m),
            loadings: Vec::new(),
            max_degree: DEFAULT_MAX_DEGREE,
        }
    }

    pub fn with_b(mut self, b: Vec<f64>) -> Self {
        self.b = b;
        self
    }

    pub fn with_b1(mut self, b1: DMatrix<f64>) -> Self {
        self.b1 = b1;
        self
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_beta(mut self, beta: DMatrix<f64>) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_pi(mut self, pi: DMatrix<f64>) -> Self {
        self.pi = pi;
        self
    }

    pub fn with_loading(mut self, a: Vec<f64>) -> Self {
        self.loadings.push(a);
        self
    }

    pub fn with_max_degree(mut self, cap: usize) -> Self {
        self.max_degree = cap;
        self
    }

    /// Lift of geometric Brownian motion: `X_t = S_t μ` with `dS = σ S dW`.
    pub fn gbm_lift(m: usize, sigma: f64) -> Self {
        Self::zero(m).with_loading(vec![sigma; m])
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let m = self.b.len();
        if m == 0 {
            return Err(Error::InvalidInput("operator on an empty grid".into()));
        }
        for (name, mat) in [("B1", &self.b1), ("beta", &self.beta), ("pi", &self.pi)] {
            check_dim(name, m, mat.nrows())?;
            check_dim(name, m, mat.ncols())?;
        }
        check_dim("alpha", m, self.alpha.len())?;
        for a in &self.loadings {
            check_dim("loading", m, a.len())?;
        }
        Ok(())
    }

    /// `K = β + Σ_k a_k a_kᵀ`, the coefficient of `g(i,j)` in `Q₂(g)(i,j)`.
    pub fn q2_kernel(&self) -> DMatrix<f64> {
        let mut k = self.beta.clone();
        for a in &self.loadings {
            for i in 0..a.len() {
                for j in 0..a.len() {
                    k[(i, j)] += a[i] * a[j];
                }
            }
        }
        k
    }

    /// `b + B₁ᵀc`.
    pub fn drift(&self, c: &[f64]) -> Vec<f64> {
        let m = self.dim();
        (0..m)
            .map(|j| self.b[j] + (0..m).map(|i| self.b1[(i, j)] * c[i]).sum::<f64>())
            .collect()
    }

    /// Diffusion matrix `a(c)` of the equivalent `ℝ^m₊` diffusion:
    /// `a_ii = α_i c_i + c_i Σ_ℓ π_iℓ c_ℓ + K_ii c_i²`, `a_ij = K_ij c_i c_j`.
    pub fn diffusion_matrix(&self, c: &[f64]) -> DMatrix<f64> {
        let k = self.q2_kernel();
        self.diffusion_matrix_with_kernel(&k, c)
    }

    pub(crate) fn diffusion_matrix_with_kernel(&self, k: &DMatrix<f64>, c: &[f64]) -> DMatrix<f64> {
        let m = self.dim();
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = k[(i, j)] * c[i] * c[j];
            }
            let pi_c: f64 = (0..m).map(|l| self.pi[(i, l)] * c[l]).sum();
            a[(i, i)] += self.alpha[i] * c[i] + c[i] * pi_c;
        }
        a
    }

    /// Bound on the spectral radius of the dual operator on coefficients of
    /// degree `degree`; used to pick stable RK4 steps.
    pub fn dual_rate(&self, degree: usize) -> f64 {
        let n = degree as f64;
        let m = self.dim();
        let row = (0..m)
            .map(|i| (0..m).map(|j| self.b1[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let k = self.q2_kernel().amax();
        n * row + 0.5 * n * (n - 1.0) * (k + 2.0 * self.pi.amax())
    }

    /// True when `Q₂ ≡ 0`.
    pub fn q2_vanishes(&self) -> bool {
        self.beta.iter().all(|v| *v == 0.0)
            && self.pi.iter().all(|v| *v == 0.0)
            && self.loadings.iter().all(|a| a.iter().all(|v| *v == 0.0))
    }
}

// ---------------------------------------------------------------------------
// Validation

pub const COND_IMMIGRATION: &str = "immigration non-negative";
pub const COND_MIN_PRINCIPLE: &str = "positive minimum principle";
pub const COND_ALPHA: &str = "alpha non-negative";
pub const COND_BETA: &str = "beta symmetric with non-negative diagonal";
pub const COND_PI: &str = "pi non-negative with zero diagonal";
pub const COND_MATRIX: &str = "(beta,pi) matrix condition";

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConditionReport {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValidationReport {
    pub passed: bool,
    pub conditions: Vec<ConditionReport>,
}

impl ValidationReport {
    pub fn failed(&self) -> impl Iterator<Item = &ConditionReport> {
        self.conditions.iter().filter(|c| !c.passed)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Number of random strictly positive weight vectors for the matrix condition.
    pub samples: usize,
    /// Log-uniform sampling range of the weights.
    pub range: (f64, f64),
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 256,
            range: (1e-3, 1e3),
            seed: 0x5eed_0001,
        }
    }
}

fn condition(name: &str, witness: Option<String>) -> ConditionReport {
    ConditionReport {
        name: name.to_string(),
        passed: witness.is_none(),
        witness,
        method: None,
    }
}

pub fn validate(spec: &OperatorSpec) -> Result<ValidationReport> {
    validate_with(spec, &ValidationOptions::default())
}

/// Checks the admissibility conditions one by one. The matrix condition
/// `β + Diag(πc)Diag(c)⁻¹ ⪰ 0` for all `c > 0` passes deterministically when
/// `β` itself is PSD; otherwise it is tested on sampled `c`, which can only
/// refute it.
pub fn validate_with(spec: &OperatorSpec, opts: &ValidationOptions) -> Result<ValidationReport> {
    spec.check_shapes()?;
    let m = spec.dim();
    let mut conditions = Vec::new();

    conditions.push(condition(
        COND_IMMIGRATION,
        spec.b
            .iter()
            .position(|v| !(*v >= 0.0))
            .map(|i| format!("b[{i}] = {}", spec.b[i])),
    ));

    let mut offdiag = None;
    'outer: for i in 0..m {
        for j in 0..m {
            let v = spec.b1[(i, j)];
            if (i != j && !(v >= 0.0)) || !v.is_finite() {
                offdiag = Some(format!("B1[{i},{j}] = {v}"));
                break 'outer;
            }
        }
    }
    conditions.push(condition(COND_MIN_PRINCIPLE, offdiag));

    conditions.push(condition(
        COND_ALPHA,
        spec.alpha
            .iter()
            .position(|v| !(*v >= 0.0))
            .map(|i| format!("alpha[{i}] = {}", spec.alpha[i])),
    ));

    let beta_sym = is_symmetric(&spec.beta, 1e-12 * spec.beta.amax().max(1.0));
    let beta_witness = if !beta_sym {
        Some("beta is not symmetric".to_string())
    } else {
        (0..m)
            .find(|&i| !(spec.beta[(i, i)] >= 0.0))
            .map(|i| format!("beta[{i},{i}] = {}", spec.beta[(i, i)]))
    };
    conditions.push(condition(COND_BETA, beta_witness));

    let mut pi_witness = None;
    'pi: for i in 0..m {
        for j in 0..m {
            let v = spec.pi[(i, j)];
            if (i == j && v != 0.0) || !(v >= 0.0) {
                pi_witness = Some(format!("pi[{i},{j}] = {v}"));
                break 'pi;
            }
        }
    }
    conditions.push(condition(COND_PI, pi_witness));

    for (k, a) in spec.loadings.iter().enumerate() {
        if a.iter().any(|v| !v.is_finite()) {
            conditions.push(condition("loadings finite", Some(format!("loading {k}"))));
        }
    }

    conditions.push(matrix_condition(spec, opts));

    let passed = conditions.iter().all(|c| c.passed);
    Ok(ValidationReport { passed, conditions })
}

/// `β + Diag(πc)Diag(c)⁻¹`, symmetrized.
pub fn copositivity_matrix(spec: &OperatorSpec, c: &[f64]) -> DMatrix<f64> {
    let m = spec.dim();
    let mut a = (&spec.beta + spec.beta.transpose()) * 0.5;
    for i in 0..m {
        let pi_c: f64 = (0..m).map(|l| spec.pi[(i, l)] * c[l]).sum();
        a[(i, i)] += pi_c / c[i];
    }
    a
}

fn matrix_condition(spec: &OperatorSpec, opts: &ValidationOptions) -> ConditionReport {
    let m = spec.dim();
    let sym_beta = (&spec.beta + spec.beta.transpose()) * 0.5;
    let pi_ok = spec.pi.iter().all(|v| *v >= 0.0);
    if pi_ok && min_eigenvalue(&sym_beta) >= psd_threshold(&sym_beta) {
        return ConditionReport {
            name: COND_MATRIX.into(),
            passed: true,
            witness: None,
            method: Some("beta positive semidefinite (sufficient)".into()),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (lo, hi) = (opts.range.0.ln(), opts.range.1.ln());
    let samples = std::iter::once(vec![1.0; m]).chain(
        (0..opts.samples).map(|_| (0..m).map(|_| rng.random_range(lo..hi).exp()).collect()),
    );
    for c in samples {
        let a = copositivity_matrix(spec, &c);
        let min = min_eigenvalue(&a);
        if !(min >= psd_threshold(&a)) {
            return ConditionReport {
                name: COND_MATRIX.into(),
                passed: false,
                witness: Some(format!("min eigenvalue {min:e} at c = {c:?}")),
                method: Some("sampled weights".into()),
            };
        }
    }
    ConditionReport {
        name: COND_MATRIX.into(),
        passed: true,
        witness: None,
        method: Some(format!(
            "sampled weights ({} draws, necessary condition only)",
            opts.samples + 1
        )),
    }
}

// ---------------------------------------------------------------------------
// Generator and dual operator

/// `Lf(ν)` from the first and second derivatives of `f` at `ν`
/// (`hess` is `m×m`, row-major).
pub fn generator_from_derivatives(spec: &OperatorSpec, c: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
    let m = spec.dim();
    let k = spec.q2_kernel();
    let h = |i: usize, j: usize| hess[i * m + j];

    let b0: f64 = spec.b.iter().zip(grad).map(|(b, g)| b * g).sum();
    let b1: f64 = (0..m)
        .map(|i| c[i] * (0..m).map(|j| spec.b1[(i, j)] * grad[j]).sum::<f64>())
        .sum();
    let q1: f64 = (0..m).map(|i| spec.alpha[i] * c[i] * h(i, i)).sum();
    let mut q2 = 0.0;
    for x in 0..m {
        for y in 0..m {
            let q = 0.5 * (spec.pi[(x, y)] * h(x, x) + spec.pi[(y, x)] * h(y, y)) + k[(x, y)] * h(x, y);
            q2 += c[x] * c[y] * q;
        }
    }
    b0 + b1 + 0.5 * (q1 + q2)
}

fn check_degree(spec: &OperatorSpec, p: &PolyRep) -> Result<()> {
    let degree = p.degree();
    if degree > spec.max_degree {
        return Err(Error::DegreeCap {
            degree,
            cap: spec.max_degree,
        });
    }
    Ok(())
}

pub fn apply_generator(spec: &OperatorSpec, p: &PolyRep, nu: &MeasureVec) -> Result<f64> {
    spec.check_shapes()?;
    check_dim("generator", spec.dim(), p.dim())?;
    check_degree(spec, p)?;
    let grad = partial(p, nu)?;
    let hess = partial2(p, nu)?;
    Ok(generator_from_derivatives(spec, nu.weights(), &grad, hess.values()))
}

/// Precomputed coefficients of the dual operator acting on flat coefficient
/// vectors.
pub(crate) struct DualOperator {
    dim: usize,
    b: Vec<f64>,
    b1: Vec<f64>,
    alpha: Vec<f64>,
    pi: Vec<f64>,
    has_pi: bool,
    kernel: Vec<f64>,
}

impl DualOperator {
    pub(crate) fn new(spec: &OperatorSpec) -> Self {
        let m = spec.dim();
        let row_major = |a: &DMatrix<f64>| -> Vec<f64> {
            (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect()
        };
        Self {
            dim: m,
            b: spec.b.clone(),
            b1: row_major(&spec.b1),
            alpha: spec.alpha.clone(),
            pi: row_major(&spec.pi),
            has_pi: spec.pi.iter().any(|v| *v != 0.0),
            kernel: row_major(&spec.q2_kernel()),
        }
    }

    /// `out = L_n input` on the flat layout up to `degree`. Linear in
    /// `input`; correct on symmetric inputs, for which the output is again
    /// symmetric.
    pub(crate) fn apply(&self, degree: usize, input: &[f64], out: &mut [f64]) {
        let m = self.dim;
        debug_assert_eq!(input.len(), flat_len(m, degree));
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut offsets = Vec::with_capacity(degree + 2);
        offsets.push(0);
        for k in 0..=degree {
            offsets.push(offsets[k] + tensor_len(m, k));
        }
        let mut index = vec![0usize; degree];
        for k in 1..=degree {
            let g = &input[offsets[k]..offsets[k + 1]];
            let strides: Vec<usize> = (0..k).map(|s| tensor_len(m, k - 1 - s)).collect();
            let index = &mut index[..k];
            let kf = k as f64;

            // Same degree: B₁ on every slot, Q₂ on every pair of slots.
            let (lower, upper) = out.split_at_mut(offsets[k]);
            let out_k = &mut upper[..tensor_len(m, k)];
            for (idx, o) in out_k.iter_mut().enumerate() {
                unflatten(idx, m, index);
                let mut acc = 0.0;
                for s in 0..k {
                    let (is, st) = (index[s], strides[s]);
                    let base = idx - is * st;
                    let row = &self.b1[is * m..(is + 1) * m];
                    for (j, bij) in row.iter().enumerate() {
                        acc += bij * g[base + j * st];
                    }
                }
                for s in 0..k {
                    for t in s + 1..k {
                        let (is, it) = (index[s], index[t]);
                        acc += self.kernel[is * m + it] * g[idx];
                        if self.has_pi {
                            let (ss, st) = (strides[s], strides[t]);
                            let t_to_s = idx - it * st + is * st;
                            let s_to_t = idx - is * ss + it * ss;
                            acc += 0.5 * self.pi[is * m + it] * g[t_to_s] + 0.5 * self.pi[it * m + is] * g[s_to_t];
                        }
                    }
                }
                *o = acc;
            }

            // One degree lower: B₀ contraction and the α-weighted diagonal.
            let out_km1 = &mut lower[offsets[k - 1]..offsets[k]];
            let lead = tensor_len(m, k - 1);
            let sub = &mut vec![0usize; k - 1];
            for (jdx, o) in out_km1.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, bj) in self.b.iter().enumerate() {
                    acc += kf * bj * g[j * lead + jdx];
                }
                if k >= 2 {
                    unflatten(jdx, m, sub);
                    for &js in sub.iter() {
                        acc += 0.5 * kf * self.alpha[js] * g[js * lead + jdx];
                    }
                }
                *o += acc;
            }
        }
    }
}

/// Coefficients of `Lp`; `deg(Lp) ≤ deg(p)`.
pub fn apply_dual(spec: &OperatorSpec, p: &PolyRep) -> Result<PolyRep> {
    spec.check_shapes()?;
    check_dim("dual operator", spec.dim(), p.dim())?;
    check_degree(spec, p)?;
    let degree = p.stored_degree();
    let input = p.to_flat();
    let mut out = vec![0.0; input.len()];
    DualOperator::new(spec).apply(degree, &input, &mut out);
    Ok(PolyRep::from_flat(p.dim(), degree, &out))
}

/// `Γ(p,q)(ν) = L(pq)(ν) − p(ν)Lq(ν) − q(ν)Lp(ν)`.
pub fn carre_du_champ(spec: &OperatorSpec, p: &PolyRep, q: &PolyRep, nu: &MeasureVec) -> Result<f64> {
    let pq = p.clone().trimmed().mul(&q.clone().trimmed(), spec.max_degree)?;
    let lpq = apply_generator(spec, &pq, nu)?;
    let lp = apply_generator(spec, p, nu)?;
    let lq = apply_generator(spec, q, nu)?;
    Ok(lpq - p.eval(nu)? * lq - q.eval(nu)? * lp)
}

// ---------------------------------------------------------------------------
// Positive maximum principle probe

/// Outer map `φ(y) = (c₀ + ℓᵀy + ½yᵀQy)·exp(−‖y‖²)` (or without the
/// Gaussian factor when `damped` is false).
#[derive(Debug, Clone, PartialEq)]
pub struct OuterMap {
    pub constant: f64,
    pub linear: Vec<f64>,
    pub quadratic: DMatrix<f64>,
    pub damped: bool,
}

impl OuterMap {
    pub fn value_grad_hess(&self, y: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let r = y.len();
        let q = &self.quadratic;
        let qy: Vec<f64> = (0..r).map(|i| (0..r).map(|j| q[(i, j)] * y[j]).sum()).collect();
        let poly = self.constant
            + self.linear.iter().zip(y).map(|(l, v)| l * v).sum::<f64>()
            + 0.5 * qy.iter().zip(y).map(|(a, v)| a * v).sum::<f64>();
        let dpoly: Vec<f64> = (0..r).map(|i| self.linear[i] + qy[i]).collect();
        if !self.damped {
            return (poly, dpoly, q.clone());
        }
        let e = (-y.iter().map(|v| v * v).sum::<f64>()).exp();
        let grad = (0..r).map(|i| e * (dpoly[i] - 2.0 * y[i] * poly)).collect();
        let hess = DMatrix::from_fn(r, r, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            e * (q[(i, j)] - 2.0 * dpoly[i] * y[j] - 2.0 * y[i] * dpoly[j]
                + poly * (4.0 * y[i] * y[j] - 2.0 * delta))
        });
        (e * poly, grad, hess)
    }
}

/// Cylindrical function `f(ν) = φ(⟨g₁,ν⟩, …, ⟨g_r,ν⟩)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFunction {
    pub inner: Vec<Vec<f64>>,
    pub outer: OuterMap,
}

impl ProbeFunction {
    pub fn new(inner: Vec<Vec<f64>>, outer: OuterMap) -> Result<Self> {
        let r = inner.len();
        check_dim("outer linear part", r, outer.linear.len())?;
        check_dim("outer quadratic part", r, outer.quadratic.nrows())?;
        check_dim("outer quadratic part", r, outer.quadratic.ncols())?;
        if let Some(m) = inner.first().map(Vec::len) {
            for g in &inner {
                check_dim("inner coefficient", m, g.len())?;
            }
        }
        Ok(Self { inner, outer })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            inner: Vec::new(),
            outer: OuterMap {
                constant: value,
                linear: Vec::new(),
                quadratic: DMatrix::zeros(0, 0),
                damped: false,
            },
        }
    }

    /// `f(ν) = ⟨g,ν⟩`.
    pub fn linear(g: Vec<f64>) -> Self {
        Self {
            inner: vec![g],
            outer: OuterMap {
                constant: 0.0,
                linear: vec![1.0],
                quadratic: DMatrix::zeros(1, 1),
                damped: false,
            },
        }
    }

    fn project(&self, c: &[f64]) -> Vec<f64> {
        self.inner
            .iter()
            .map(|g| g.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn value(&self, c: &[f64]) -> f64 {
        self.outer.value_grad_hess(&self.project(c)).0
    }

    /// Value, gradient and row-major Hessian with respect to the weights.
    pub fn derivatives(&self, c: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let m = c.len();
        let (v, dphi, hphi) = self.outer.value_grad_hess(&self.project(c));
        let r = self.inner.len();
        let grad = (0..m)
            .map(|i| (0..r).map(|a| self.inner[a][i] * dphi[a]).sum())
            .collect();
        let mut hess = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for a in 0..r {
                    for b in 0..r {
                        s += self.inner[a][i] * hphi[(a, b)] * self.inner[b][j];
                    }
                }
                hess[i * m + j] = s;
            }
        }
        (v, grad, hess)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub restarts: usize,
    /// Start points are drawn uniformly from `[0, start_box]^m`.
    pub start_box: f64,
    /// Tolerance of the optimality and generator checks.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            start_box: 100.0,
            tol: 1e-6,
            max_iter: 5000,
            seed: 0x9e37_79b9,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub maximizer: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub projected_gradient: f64,
    pub first_order_ok: bool,
    pub second_order_ok: bool,
    pub generator_value: f64,
    pub generator_ok: bool,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.first_order_ok && self.second_order_ok && self.generator_ok
    }

    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.first_order_ok {
            v.push("first-order condition");
        }
        if !self.second_order_ok {
            v.push("second-order condition");
        }
        if !self.generator_ok {
            v.push("Lf <= 0 at maximizer");
        }
        v
    }
}

struct Ascent {
    point: Vec<f64>,
    value: f64,
    residual: f64,
    converged: bool,
}

fn projected_residual(c: &[f64], grad: &[f64]) -> f64 {
    c.iter()
        .zip(grad)
        .map(|(x, g)| ((x + g).max(0.0) - x).abs())
        .fold(0.0, f64::max)
}

/// Projected gradient ascent with backtracking, switching to projected
/// Newton steps on the free coordinates once the restricted Hessian is
/// negative definite.
fn ascend(f: &ProbeFunction, start: Vec<f64>, opts: &ProbeOptions) -> Ascent {
    let m = start.len();
    let mut c = start;
    let (mut value, mut grad, mut hess) = f.derivatives(&c);
    let mut step: f64 = 1.0;
    let mut converged = false;
    let stop = 1e-13;
    for _ in 0..opts.max_iter {
        let residual = projected_residual(&c, &grad);
        if residual <= stop * (1.0 + value.abs()) {
            converged = true;
            break;
        }
        let mut moved = false;

        let free: Vec<usize> = (0..m).filter(|&i| c[i] > 0.0 || grad[i] > 0.0).collect();
        if !free.is_empty() {
            let nf = free.len();
            let neg_h = DMatrix::from_fn(nf, nf, |a, b| -hess[free[a] * m + free[b]]);
            if let Some(chol) = neg_h.cholesky() {
                let g = nalgebra::DVector::from_iterator(nf, free.iter().map(|&i| grad[i]));
                let d = chol.solve(&g);
                let mut t = 1.0;
                for _ in 0..30 {
                    let mut trial = c.clone();
                    for (a, &i) in free.iter().enumerate() {
                        trial[i] = (c[i] + t * d[a]).max(0.0);
                    }
                    let fv = f.value(&trial);
                    let gain: f64 = (0..m).map(|i| grad[i] * (trial[i] - c[i])).sum();
                    if fv >= value + 1e-4 * gain && fv >= value {
                        moved = fv > value || trial != c;
                        c = trial;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }

        if !moved {
            step = (step * 2.0).min(1e6);
            for _ in 0..80 {
                let trial: Vec<f64> = (0..m).map(|i| (c[i] + step * grad[i]).max(0.0)).collect();
                let fv = f.value(&trial);
                let gain: f64 = (0..m).map(|i| grad[i] * (trial[i] - c[i])).sum();
                if fv >= value + 1e-4 * gain && gain > 0.0 {
                    c = trial;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
        }
        let (v, g, h) = f.derivatives(&c);
        if !moved {
            // Stalled at round-off level.
            value = v;
            grad = g;
            converged = projected_residual(&c, &grad) <= 1e-9 * (1.0 + value.abs());
            return Ascent {
                residual: projected_residual(&c, &grad),
                point: c,
                value,
                converged,
            };
        }
        value = v;
        grad = g;
        hess = h;
    }
    Ascent {
        residual: projected_residual(&c, &grad),
        point: c,
        value,
        converged,
    }
}

pub fn pmp_probe(spec: &OperatorSpec, f: &ProbeFunction, restarts: usize) -> Result<ProbeReport> {
    pmp_probe_with(
        spec,
        f,
        &ProbeOptions {
            restarts,
            ..ProbeOptions::default()
        },
    )
}

/// Maximizes `f` over `ℝ^m₊` from several starts and checks the first and
/// second order optimality conditions and `Lf ≤ 0` at the best point found.
pub fn pmp_probe_with(spec: &OperatorSpec, f: &ProbeFunction, opts: &ProbeOptions) -> Result<ProbeReport> {
    spec.check_shapes()?;
    let m = spec.dim();
    for g in &f.inner {
        check_dim("probe inner coefficient", m, g.len())?;
    }
    let runs: Vec<Ascent> = (0..=opts.restarts as u64)
        .into_par_iter()
        .map(|i| {
            let start = if i == 0 {
                vec![0.0; m]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(i);
                (0..m).map(|_| rng.random_range(0.0..opts.start_box)).collect()
            };
            ascend(f, start, opts)
        })
        .collect();
    let best = runs
        .into_iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");

    let c = &best.point;
    let (_, grad, hess) = f.derivatives(c);
    let tol = opts.tol;
    let support: Vec<usize> = (0..m).filter(|&i| c[i] > tol).collect();
    let first_order_ok = (0..m).all(|i| grad[i] <= tol) && support.iter().all(|&i| grad[i].abs() <= tol);
    let second_order_ok = if support.is_empty() {
        true
    } else {
        let ns = support.len();
        let h = DMatrix::from_fn(ns, ns, |a, b| hess[support[a] * m + support[b]]);
        let scale = h.amax().max(1.0);
        SymmetricEigen::new(h).eigenvalues.max() <= tol * scale
    };
    let generator_value = generator_from_derivatives(spec, c, &grad, &hess);
    Ok(ProbeReport {
        maximizer: best.point.clone(),
        value: best.value,
        converged: best.converged,
        projected_gradient: best.residual,
        first_order_ok,
        second_order_ok,
        generator_value,
        generator_ok: generator_value <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::SymCoeff;
    use crate::random;
    use approx::assert_relative_eq;

    fn nu(c: &[f64]) -> MeasureVec {
        MeasureVec::new(c.to_vec()).unwrap()
    }

    fn cir() -> OperatorSpec {
        OperatorSpec::zero(1)
            .with_b(vec![0.1])
            .with_b1(DMatrix::from_element(1, 1, -0.5))
            .with_alpha(vec![1.0])
    }

    fn coupling_spec() -> OperatorSpec {
        // π_ij = π_ji = −β_ij = κ_ij for i ≠ j, β_ii = 0
        let kappa = DMatrix::from_row_slice(3, 3, &[0.0, 0.4, 1.1, 0.4, 0.0, 0.3, 1.1, 0.3, 0.0]);
        OperatorSpec::zero(3).with_pi(kappa.clone()).with_beta(-kappa)
    }

    #[test]
    fn validate_examples() {
        assert!(validate(&coupling_spec()).unwrap().passed);
        assert!(validate(&OperatorSpec::zero(4)).unwrap().passed);

        let bad = OperatorSpec::zero(2).with_beta(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
        let report = validate(&bad).unwrap();
        assert!(!report.passed);
        let failed: Vec<_> = report.failed().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec![COND_MATRIX]);
    }

    #[test]
    fn validate_names_each_violation() {
        let mut spec = cir();
        spec.b[0] = -0.1;
        assert_eq!(validate(&spec).unwrap().failed().next().unwrap().name, COND_IMMIGRATION);

        let spec = OperatorSpec::zero(2).with_b1(DMatrix::from_row_slice(2, 2, &[-1.0, -0.2, 0.3, -1.0]));
        let r = validate(&spec).unwrap();
        assert_eq!(r.failed().map(|c| c.name.clone()).collect::<Vec<_>>(), vec![COND_MIN_PRINCIPLE]);

        let spec = OperatorSpec::zero(2).with_alpha(vec![1.0, -1e-3]);
        let r = validate(&spec).unwrap();
        assert_eq!(r.failed().map(|c| c.name.clone()).collect::<Vec<_>>(), vec![COND_ALPHA]);

        let spec = OperatorSpec::zero(2).with_pi(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]));
        assert!(!validate(&spec).unwrap().condition(COND_PI).unwrap().passed);
    }

    #[test]
    fn validate_dimension_mismatch() {
        let spec = OperatorSpec::zero(2).with_alpha(vec![1.0]);
        assert!(matches!(validate(&spec), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn validation_report_serializes() {
        let bad = OperatorSpec::zero(2).with_alpha(vec![-1.0, 0.0]);
        let json = serde_json::to_value(validate(&bad).unwrap()).unwrap();
        assert_eq!(json["passed"], false);
        let alpha = json["conditions"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["name"] == COND_ALPHA)
            .unwrap();
        assert_eq!(alpha["passed"], false);
        assert_eq!(alpha["witness"], "alpha[0] = -1");
    }

    #[test]
    fn generator_examples() {
        let spec = cir();
        let c = PolyRep::constant(1, 3.0);
        assert_eq!(apply_generator(&spec, &c, &nu(&[2.0])).unwrap(), 0.0);

        let p = PolyRep::linear(&[1.0]);
        assert_relative_eq!(apply_generator(&spec, &p, &nu(&[2.0])).unwrap(), -0.9, epsilon = 1e-14);

        let sigma = 0.3;
        let g = [1.0, 2.0, -0.5];
        let spec = OperatorSpec::gbm_lift(3, sigma);
        let p = PolyRep::power(&g, 2);
        let x = nu(&[0.2, 1.5, 0.7]);
        let s: f64 = g.iter().zip(x.weights()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(
            apply_generator(&spec, &p, &x).unwrap(),
            sigma * sigma * s * s,
            max_relative = 1e-12
        );
    }

    #[test]
    fn dual_examples() {
        let sigma = 0.4;
        let g = [0.5, 1.0];
        let spec = OperatorSpec::gbm_lift(2, sigma);
        for n in 1..=5 {
            let q = apply_dual(&spec, &PolyRep::power(&g, n)).unwrap();
            let expected = SymCoeff::tensor_power(&g, n).scaled(sigma * sigma * (n * (n - 1)) as f64 / 2.0);
            for (a, b) in q.term(n).unwrap().values().iter().zip(expected.values()) {
                assert_relative_eq!(*a, *b, epsilon = 1e-14);
            }
            for k in 0..n {
                assert!(q.term(k).unwrap().is_zero());
            }
        }

        let q = apply_dual(&cir(), &PolyRep::constant(1, 2.0)).unwrap();
        assert!(q.is_zero());

        let q = apply_dual(&cir(), &PolyRep::linear(&[1.0])).unwrap();
        assert_relative_eq!(q.term(0).unwrap().values()[0], 0.1);
        assert_relative_eq!(q.term(1).unwrap().values()[0], -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = nu(&[rng.random_range(0.0..10.0)]);
            assert_relative_eq!(
                q.eval(&x).unwrap(),
                apply_generator(&cir(), &PolyRep::linear(&[1.0]), &x).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn degree_cap_enforced() {
        let spec = cir().with_max_degree(3);
        let p = PolyRep::power(&[1.0], 4);
        assert!(matches!(apply_dual(&spec, &p), Err(Error::DegreeCap { .. })));
        assert!(matches!(
            apply_generator(&spec, &p, &nu(&[1.0])),
            Err(Error::DegreeCap { .. })
        ));
        let p = PolyRep::power(&[1.0], 2);
        assert!(matches!(
            carre_du_champ(&spec, &p, &p, &nu(&[1.0])),
            Err(Error::DegreeCap { .. })
        ));
    }

    #[test]
    fn drift_and_diffusion_reproduce_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let spec = random::admissible_spec(3, &mut rng);
            let p = random::polynomial(3, 3, &mut rng);
            let x = random::measure(3, &mut rng);
            let grad = partial(&p, &x).unwrap();
            let hess = partial2(&p, &x).unwrap();
            let drift = spec.drift(x.weights());
            let a = spec.diffusion_matrix(x.weights());
            let mut expected: f64 = drift.iter().zip(&grad).map(|(d, g)| d * g).sum();
            for i in 0..3 {
                for j in 0..3 {
                    expected += 0.5 * a[(i, j)] * hess.get(&[i, j]);
                }
            }
            let got = apply_generator(&spec, &p, &x).unwrap();
            assert_relative_eq!(got, expected, max_relative = 1e-10, epsilon = 1e-10);
        }
    }

    #[test]
    fn carre_du_champ_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random::admissible_spec(3, &mut rng);
        let p = random::polynomial(3, 2, &mut rng);
        let x = random::measure(3, &mut rng);
        assert_relative_eq!(
            carre_du_champ(&spec, &p, &PolyRep::constant(3, 2.5), &x).unwrap(),
            0.0,
            epsilon = 1e-9
        );

        // Affine spec, p = q = ⟨g,ν⟩: Γ = ⟨α g², ν⟩
        let alpha = vec![0.5, 1.0, 2.0];
        let spec = OperatorSpec::zero(3)
            .with_alpha(alpha.clone())
            .with_b(vec![0.3, 0.0, 1.0])
            .with_b1(DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.2, -0.3, 0.1, 0.0, 0.0, -2.0]));
        let g = [1.0, -2.0, 0.5];
        let p = PolyRep::linear(&g);
        let c = [0.7, 1.3, 2.0];
        let expected: f64 = (0..3).map(|i| alpha[i] * g[i] * g[i] * c[i]).sum();
        assert_relative_eq!(carre_du_champ(&spec, &p, &p, &nu(&c)).unwrap(), expected, epsilon = 1e-12);

        // GBM lift, total mass: Γ = σ² s²
        let spec = OperatorSpec::gbm_lift(3, 0.3);
        let p = PolyRep::linear(&[1.0; 3]);
        assert_relative_eq!(
            carre_du_champ(&spec, &p, &p, &nu(&c)).unwrap(),
            0.09 * 4.0 * 4.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn generator_is_linear_and_gamma_bilinear_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let spec = random::admissible_spec(2, &mut rng);
            let p = random::polynomial(2, 2, &mut rng);
            let q = random::polynomial(2, 2, &mut rng);
            let r = random::polynomial(2, 2, &mut rng);
            let x = random::measure(2, &mut rng);
            let (a, b) = (1.7, -0.4);
            let comb = p.scaled(a).add(&q.scaled(b)).unwrap();
            let lhs = apply_generator(&spec, &comb, &x).unwrap();
            let rhs = a * apply_generator(&spec, &p, &x).unwrap() + b * apply_generator(&spec, &q, &x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));

            let gpr = carre_du_champ(&spec, &p, &r, &x).unwrap();
            let grp = carre_du_champ(&spec, &r, &p, &x).unwrap();
            assert!((gpr - grp).abs() <= 1e-12 * gpr.abs().max(1.0));
            let gcomb = carre_du_champ(&spec, &comb, &r, &x).unwrap();
            let gsum = a * gpr + b * carre_du_champ(&spec, &q, &r, &x).unwrap();
            assert!((gcomb - gsum).abs() <= 1e-12 * gcomb.abs().max(1.0) * 10.0);
        }
    }

    #[test]
    fn probe_constant_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random::admissible_spec(3, &mut rng);
        let r = pmp_probe(&spec, &ProbeFunction::constant(2.0), 4).unwrap();
        assert!(r.passed());
        assert_eq!(r.generator_value, 0.0);

        let g = [1.0, 0.5, 2.0];
        let r = pmp_probe(&spec, &ProbeFunction::linear(g.iter().map(|v| -v).collect()), 4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.maximizer, vec![0.0; 3]);
        let expected: f64 = -g.iter().zip(&spec.b).map(|(a, b)| a * b).sum::<f64>();
        assert_relative_eq!(r.generator_value, expected, epsilon = 1e-14);
    }

    #[test]
    fn probe_random_functions_have_no_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let spec = random::admissible_spec(3, &mut rng);
        assert!(validate(&spec).unwrap().passed);
        for _ in 0..25 {
            let f = random::probe_function(3, 2, &mut rng);
            let r = pmp_probe(&spec, &f, 10).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn probe_finds_violation_of_inadmissible_spec() {
        // B₁[0,1] < 0 drains point 1 in proportion to the mass at point 0;
        // f peaks at c = (0.5, 0) with ∂₁f < 0, so Lf > 0 there.
        let spec = OperatorSpec::zero(2).with_b1(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]));
        let f = ProbeFunction::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            OuterMap {
                constant: 1.0,
                linear: vec![2.0, -1.0],
                quadratic: DMatrix::zeros(2, 2),
                damped: true,
            },
        )
        .unwrap();
        let r = pmp_probe(&spec, &f, 8).unwrap();
        assert!(!r.generator_ok, "{r:?}");
    }
}
