//! Affine subclass (`Q₂ ≡ 0`): Riccati equation and Laplace transform.
//!
//! For `g ≤ 0`, `E[exp⟨g, X_T⟩ | X_0 = ν] = exp(φ_T + ⟨ψ_T, ν⟩)` where
//! `∂_t ψ = B₁ψ + ½αψ²`, `ψ_0 = g`, and `φ_t = ∫_0^t ⟨ψ_s, b⟩ ds`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::generator::OperatorSpec;
use crate::measures::MeasureVec;
use crate::ode::{stable_steps, Rk4};
use crate::simulate::{estimate_fn, PathEnsemble};
use crate::ComparisonReport;

pub const DEFAULT_STEPS: usize = 1000;
/// Sup-norm of `ψ` beyond which the trajectory is declared exploded.
pub const BLOWUP_NORM: f64 = 1e8;
/// Largest positive excursion of `ψ` tolerated before flagging.
pub const SIGN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    /// Set when the trajectory left `ψ ≤ 0` or exceeded [`BLOWUP_NORM`];
    /// the stored nodes stop at the last good one.
    pub blowup: bool,
    pub method: &'static str,
}

impl RiccatiSolution {
    pub fn terminal_psi(&self) -> &[f64] {
        self.psi.last().expect("at least one node")
    }

    pub fn terminal_phi(&self) -> f64 {
        *self.phi.last().expect("at least one node")
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("at least one node")
    }

    /// `exp(φ_t + ⟨ψ_t, ν⟩)` at every stored node.
    pub fn laplace_path(&self, nu: &MeasureVec) -> Vec<f64> {
        self.psi
            .iter()
            .zip(&self.phi)
            .map(|(psi, phi)| (phi + dot(psi, nu.weights())).exp())
            .collect()
    }

    /// CSV with columns `t,psi_1..psi_m,phi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let m = self.psi.first().map_or(0, Vec::len);
        let header: Vec<String> = (1..=m).map(|i| format!("psi_{i}")).collect();
        writeln!(w, "t,{},phi", header.join(","))?;
        for ((t, psi), phi) in self.times.iter().zip(&self.psi).zip(&self.phi) {
            let cols: Vec<String> = psi.iter().map(f64::to_string).collect();
            writeln!(w, "{t},{},{phi}", cols.join(","))?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn is_affine(spec: &OperatorSpec) -> bool {
    spec.q2_vanishes()
}

fn require_affine(spec: &OperatorSpec) -> Result<()> {
    spec.check_shapes()?;
    if is_affine(spec) {
        Ok(())
    } else {
        Err(Error::NotAffine(
            "Q2 does not vanish (beta, pi or loadings are non-zero)".into(),
        ))
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon >= 0.0 && horizon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("horizon must be >= 0, got {horizon}")))
    }
}

fn riccati_rhs(b1: &DMatrix<f64>, alpha: &[f64], b: &[f64], y: &[f64], out: &mut [f64]) {
    let m = alpha.len();
    let psi = &y[..m];
    for i in 0..m {
        let lin: f64 = (0..m).map(|j| b1[(i, j)] * psi[j]).sum();
        out[i] = lin + 0.5 * alpha[i] * psi[i] * psi[i];
    }
    out[m] = dot(b, psi);
}

/// [`DEFAULT_STEPS`], raised when `B₁` or the quadratic term is stiff.
pub fn auto_steps(spec: &OperatorSpec, g: &[f64], horizon: f64) -> usize {
    let g_max = g.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let a_max = spec.alpha.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    stable_steps(spec.dual_rate(1) + a_max * g_max, horizon, DEFAULT_STEPS)
}

pub fn solve_riccati(spec: &OperatorSpec, g: &[f64], horizon: f64) -> Result<RiccatiSolution> {
    solve_riccati_with(spec, g, horizon, auto_steps(spec, g, horizon))
}

/// RK4 on `(ψ, φ)`. The `φ` component is the RK4 quadrature of `⟨b, ψ⟩`,
/// which is Simpson's rule on each step.
pub fn solve_riccati_with(spec: &OperatorSpec, g: &[f64], horizon: f64, steps: usize) -> Result<RiccatiSolution> {
    require_affine(spec)?;
    check_dim("Riccati initial value", spec.dim(), g.len())?;
    if let Some(v) = g.iter().find(|v| !(**v <= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "Laplace argument must be <= 0 componentwise, got {v}"
        )));
    }
    check_horizon(horizon)?;
    Ok(integrate(spec, g, horizon, steps, true))
}

fn integrate(spec: &OperatorSpec, g: &[f64], horizon: f64, steps: usize, sign_check: bool) -> RiccatiSolution {
    let m = spec.dim();
    let steps = steps.max(1);
    let h = horizon / steps as f64;
    let mut y: Vec<f64> = g.iter().copied().chain([0.0]).collect();
    let mut rk = Rk4::new(m + 1);
    let mut sol = RiccatiSolution {
        times: vec![0.0],
        psi: vec![g.to_vec()],
        phi: vec![0.0],
        blowup: false,
        method: "rk4",
    };
    for i in 0..steps {
        rk.step(&mut y, h, |x, out| riccati_rhs(&spec.b1, &spec.alpha, &spec.b, x, out));
        let psi = &y[..m];
        let bad = y.iter().any(|v| !v.is_finite())
            || psi.iter().any(|v| v.abs() > BLOWUP_NORM)
            || (sign_check && psi.iter().any(|v| *v > SIGN_TOL));
        if bad {
            sol.blowup = true;
            break;
        }
        sol.times.push(h * (i + 1) as f64);
        sol.psi.push(psi.to_vec());
        sol.phi.push(y[m]);
    }
    sol
}

fn laplace_from(sol: &RiccatiSolution, nu0: &MeasureVec, horizon: f64) -> Result<f64> {
    if sol.blowup {
        return Err(Error::Blowup { t: sol.horizon() });
    }
    let _ = horizon;
    Ok((sol.terminal_phi() + dot(sol.terminal_psi(), nu0.weights())).exp())
}

/// `E[exp⟨g, X_T⟩ | X_0 = ν₀]` for `g ≤ 0`.
pub fn laplace(spec: &OperatorSpec, g: &[f64], nu0: &MeasureVec, horizon: f64) -> Result<f64> {
    laplace_with(spec, g, nu0, horizon, auto_steps(spec, g, horizon))
}

pub fn laplace_with(spec: &OperatorSpec, g: &[f64], nu0: &MeasureVec, horizon: f64, steps: usize) -> Result<f64> {
    check_dim("initial measure", spec.dim(), nu0.dim())?;
    let sol = solve_riccati_with(spec, g, horizon, steps)?;
    laplace_from(&sol, nu0, horizon)
}

/// Exponential moment `E[exp⟨g, X_T⟩]` without the sign restriction on `g`.
/// For small positive `g` the Riccati solution stays finite on bounded
/// horizons; explosion is reported as [`Error::Blowup`].
pub fn exponential_moment(
    spec: &OperatorSpec,
    g: &[f64],
    nu0: &MeasureVec,
    horizon: f64,
    steps: usize,
) -> Result<f64> {
    require_affine(spec)?;
    check_dim("Riccati initial value", spec.dim(), g.len())?;
    check_dim("initial measure", spec.dim(), nu0.dim())?;
    check_horizon(horizon)?;
    let sol = integrate(spec, g, horizon, steps, false);
    laplace_from(&sol, nu0, horizon)
}

/// Composite quadrature weights (in units of the step) on `k` intervals:
/// Simpson, with a 3/8 panel at the end when `k` is odd.
fn quadrature_weights(k: usize) -> Vec<f64> {
    let mut w = vec![0.0; k + 1];
    match k {
        0 => {}
        1 => {
            w[0] = 0.5;
            w[1] = 0.5;
        }
        _ => {
            let simpson_end = if k.is_multiple_of(2) { k } else { k - 3 };
            for panel in (0..simpson_end).step_by(2) {
                w[panel] += 1.0 / 3.0;
                w[panel + 1] += 4.0 / 3.0;
                w[panel + 2] += 1.0 / 3.0;
            }
            if k % 2 == 1 {
                let s = simpson_end;
                for (o, c) in [1.0, 3.0, 3.0, 1.0].iter().enumerate() {
                    w[s + o] += 3.0 / 8.0 * c;
                }
            }
        }
    }
    w
}

#[derive(Debug, Clone)]
pub struct MildOptions {
    pub steps: usize,
    pub iterations: usize,
    pub tol: f64,
}

impl Default for MildOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            iterations: 50,
            tol: 1e-10,
        }
    }
}

pub fn solve_riccati_mild(spec: &OperatorSpec, g: &[f64], horizon: f64) -> Result<RiccatiSolution> {
    solve_riccati_mild_with(spec, g, horizon, &MildOptions::default())
}

/// Picard iteration on the mild form
/// `ψ_t = Q_t g + ½∫_0^t Q_{t−s}(αψ_s²) ds`, `Q_t = exp(tB₁)`, on a uniform
/// grid with the semigroup tabulated as powers of `exp(hB₁)`.
pub fn solve_riccati_mild_with(
    spec: &OperatorSpec,
    g: &[f64],
    horizon: f64,
    opts: &MildOptions,
) -> Result<RiccatiSolution> {
    require_affine(spec)?;
    check_dim("Riccati initial value", spec.dim(), g.len())?;
    check_horizon(horizon)?;
    let m = spec.dim();
    let n = opts.steps.max(1);
    let h = horizon / n as f64;

    let q_step = (&spec.b1 * h).exp();
    let mut powers = Vec::with_capacity(n + 1);
    powers.push(DMatrix::<f64>::identity(m, m));
    for j in 1..=n {
        powers.push(&powers[j - 1] * &q_step);
    }
    let g_vec = DVector::from_column_slice(g);
    let free: Vec<DVector<f64>> = powers.iter().map(|p| p * &g_vec).collect();
    let weights: Vec<Vec<f64>> = (0..=n).map(quadrature_weights).collect();
    let alpha = DVector::from_column_slice(&spec.alpha);

    let mut psi = free.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.iterations {
        iterations += 1;
        let source: Vec<DVector<f64>> = psi.iter().map(|p| alpha.component_mul(&p.component_mul(p))).collect();
        let next: Vec<DVector<f64>> = (0..=n)
            .map(|k| {
                let mut acc = free[k].clone();
                for (j, w) in weights[k].iter().enumerate() {
                    if *w != 0.0 {
                        acc += (&powers[k - j] * &source[j]) * (0.5 * h * w);
                    }
                }
                acc
            })
            .collect();
        residual = next
            .iter()
            .zip(&psi)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        psi = next;
        if !residual.is_finite() || psi.iter().any(|p| p.amax() > BLOWUP_NORM) {
            return Err(Error::Blowup { t: horizon });
        }
        if residual <= opts.tol {
            break;
        }
    }
    if residual > opts.tol {
        return Err(Error::NonConvergence {
            iterations,
            residual,
        });
    }

    let bpsi: Vec<f64> = psi.iter().map(|p| dot(&spec.b, p.as_slice())).collect();
    let phi = (0..=n)
        .map(|k| h * weights[k].iter().zip(&bpsi).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Ok(RiccatiSolution {
        times: (0..=n).map(|k| h * k as f64).collect(),
        psi: psi.into_iter().map(|p| p.as_slice().to_vec()).collect(),
        phi,
        blowup: false,
        method: "mild-picard",
    })
}

/// Sup-norm distance of `ψ` between two solutions on their common nodes
/// (nodes are matched by time to within 1e-12).
pub fn sup_distance(a: &RiccatiSolution, b: &RiccatiSolution) -> f64 {
    let mut dist: f64 = 0.0;
    let mut j = 0;
    for (i, t) in a.times.iter().enumerate() {
        while j < b.times.len() && b.times[j] < t - 1e-12 {
            j += 1;
        }
        if j < b.times.len() && (b.times[j] - t).abs() <= 1e-12 {
            for (x, y) in a.psi[i].iter().zip(&b.psi[j]) {
                dist = dist.max((x - y).abs());
            }
        }
    }
    dist
}

/// Laplace transform against the Monte Carlo mean of `exp⟨g, X_T⟩`.
pub fn laplace_vs_mc(
    spec: &OperatorSpec,
    g: &[f64],
    nu0: &MeasureVec,
    horizon: f64,
    ensemble: &PathEnsemble,
) -> Result<ComparisonReport> {
    ensemble.check_matches(nu0, horizon)?;
    let engine = laplace(spec, g, nu0, horizon)?;
    let (mean, se) = estimate_fn(ensemble, |c| dot(g, c).exp());
    Ok(ComparisonReport::new(engine, mean, se))
}
