//! Conditional moments via the dual coefficient ODE.
//!
//! For a polynomial `p_g(ν) = Σ_k ⟨g_k, ν^k⟩` the coefficient flow
//! `∂_t ĝ_t = L_n ĝ_t, ĝ_0 = g` gives `E[p_g(X_T) | X_0 = ν] = p_{ĝ_T}(ν)`.
//! On a finite grid the flow is a linear ODE in dimension `Σ_{k≤n} m^k`, so
//! it has a global solution; it is integrated with fixed-step RK4 and the dual
//! operator is applied matrix-free.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::generator::{DualOperator, OperatorSpec};
use crate::measures::{flat_len, unflatten, MeasureVec, PolyRep};
use crate::ode::{stable_steps, Rk4};
use crate::simulate::{estimate, PathEnsemble};
use crate::ComparisonReport;

pub const DEFAULT_STEPS: usize = 1000;

/// Largest coefficient dimension for which the dense dual matrix is assembled.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone)]
pub struct MomentSolution {
    pub times: Vec<f64>,
    /// `coefficients[i]` is `ĝ` at `times[i]`; the first entry is the input.
    pub coefficients: Vec<PolyRep>,
    pub step: f64,
    pub method: &'static str,
}

impl MomentSolution {
    pub fn terminal(&self) -> &PolyRep {
        self.coefficients.last().expect("solution has at least one node")
    }

    /// `E[p_g(X_t) | X_0 = ν]` at every node.
    pub fn evaluate(&self, nu: &MeasureVec) -> Result<Vec<f64>> {
        self.coefficients.iter().map(|c| c.eval(nu)).collect()
    }

    /// CSV with columns `t,degree,index,value`; `index` lists 1-based grid
    /// labels joined by `.` and is empty for degree 0.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,degree,index,value")?;
        for (t, poly) in self.times.iter().zip(&self.coefficients) {
            for term in poly.terms() {
                let mut index = vec![0; term.degree()];
                for (idx, v) in term.values().iter().enumerate() {
                    unflatten(idx, term.dim(), &mut index);
                    let label: Vec<String> = index.iter().map(|i| (i + 1).to_string()).collect();
                    writeln!(w, "{t},{},{},{v}", term.degree(), label.join("."))?;
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(spec: &OperatorSpec, g: &PolyRep, horizon: f64) -> Result<()> {
    spec.check_shapes()?;
    check_dim("moment polynomial", spec.dim(), g.dim())?;
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidInput(format!("horizon must be >= 0, got {horizon}")));
    }
    let degree = g.degree();
    if degree > spec.max_degree {
        return Err(Error::DegreeCap {
            degree,
            cap: spec.max_degree,
        });
    }
    Ok(())
}

struct Flow {
    op: DualOperator,
    degree: usize,
    rk: Rk4,
}

impl Flow {
    fn new(spec: &OperatorSpec, degree: usize) -> Self {
        let n = flat_len(spec.dim(), degree);
        Self {
            op: DualOperator::new(spec),
            degree,
            rk: Rk4::new(n),
        }
    }

    fn advance(&mut self, y: &mut [f64], h: f64, steps: usize, t0: f64) -> Result<()> {
        let (op, degree) = (&self.op, self.degree);
        for i in 0..steps {
            self.rk.step(y, h, |x, out| op.apply(degree, x, out));
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    t: t0 + h * (i + 1) as f64,
                });
            }
        }
        Ok(())
    }
}

/// [`DEFAULT_STEPS`], raised when the operator is stiff.
pub fn auto_steps(spec: &OperatorSpec, g: &PolyRep, horizon: f64) -> usize {
    stable_steps(spec.dual_rate(g.degree()), horizon, DEFAULT_STEPS)
}

pub fn solve_moment_ode(spec: &OperatorSpec, g: &PolyRep, horizon: f64) -> Result<MomentSolution> {
    solve_moment_ode_with(spec, g, horizon, auto_steps(spec, g, horizon))
}

/// Integrates the coefficient ODE on `[0, horizon]` with `steps` RK4 steps,
/// keeping every node.
pub fn solve_moment_ode_with(
    spec: &OperatorSpec,
    g: &PolyRep,
    horizon: f64,
    steps: usize,
) -> Result<MomentSolution> {
    check_inputs(spec, g, horizon)?;
    let steps = steps.max(1);
    let g = g.clone().trimmed();
    let degree = g.stored_degree();
    let h = horizon / steps as f64;
    let mut flow = Flow::new(spec, degree);
    let mut y = g.to_flat();
    let mut times = vec![0.0];
    let mut coefficients = vec![g];
    for i in 0..steps {
        flow.advance(&mut y, h, 1, h * i as f64)?;
        times.push(h * (i + 1) as f64);
        coefficients.push(PolyRep::from_flat(spec.dim(), degree, &y));
    }
    Ok(MomentSolution {
        times,
        coefficients,
        step: h,
        method: "rk4",
    })
}

/// `ĝ_T` only, without storing the trajectory.
pub fn terminal_coefficients(spec: &OperatorSpec, g: &PolyRep, horizon: f64, steps: usize) -> Result<PolyRep> {
    check_inputs(spec, g, horizon)?;
    let steps = steps.max(1);
    let g = g.clone().trimmed();
    let degree = g.stored_degree();
    let mut y = g.to_flat();
    Flow::new(spec, degree).advance(&mut y, horizon / steps as f64, steps, 0.0)?;
    Ok(PolyRep::from_flat(spec.dim(), degree, &y))
}

/// `E[p_g(X_T) | X_0 = ν₀]`.
pub fn moment(spec: &OperatorSpec, g: &PolyRep, nu0: &MeasureVec, horizon: f64) -> Result<f64> {
    moment_with(spec, g, nu0, horizon, auto_steps(spec, g, horizon))
}

pub fn moment_with(spec: &OperatorSpec, g: &PolyRep, nu0: &MeasureVec, horizon: f64, steps: usize) -> Result<f64> {
    check_dim("initial measure", spec.dim(), nu0.dim())?;
    terminal_coefficients(spec, g, horizon, steps)?.eval(nu0)
}

/// Moments at several horizons from a single integration. The step is
/// `max(times)/steps`, shortened on each segment so that every requested
/// time is hit exactly.
pub fn moment_surface(
    spec: &OperatorSpec,
    g: &PolyRep,
    nu0: &MeasureVec,
    times: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    let t_max = times.iter().copied().fold(0.0, f64::max);
    check_inputs(spec, g, t_max)?;
    check_dim("initial measure", spec.dim(), nu0.dim())?;
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative time {t}")));
    }
    let g = g.clone().trimmed();
    let degree = g.stored_degree();
    let h_target = if t_max > 0.0 { t_max / steps.max(1) as f64 } else { 1.0 };
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));

    let mut flow = Flow::new(spec, degree);
    let mut y = g.to_flat();
    let mut t = 0.0;
    let mut out = vec![0.0; times.len()];
    for i in order {
        let dt = times[i] - t;
        if dt > 0.0 {
            let n = ((dt / h_target) - 1e-9).ceil().max(1.0) as usize;
            flow.advance(&mut y, dt / n as f64, n, t)?;
            t = times[i];
        }
        out[i] = PolyRep::from_flat(spec.dim(), degree, &y).eval(nu0)?;
    }
    Ok(out)
}

/// Dense matrix of the dual operator on the flat coefficient layout up to
/// `degree`.
pub fn dual_matrix(spec: &OperatorSpec, degree: usize) -> Result<DMatrix<f64>> {
    spec.check_shapes()?;
    let n = flat_len(spec.dim(), degree);
    if n > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!(
            "coefficient dimension {n} exceeds the dense limit {DENSE_LIMIT}"
        )));
    }
    let op = DualOperator::new(spec);
    let mut mat = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(degree, &e, &mut col);
        mat.set_column(j, &DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    Ok(mat)
}

/// Same moment through `exp(T·L_n)` applied to the coefficient vector.
pub fn moment_expm(spec: &OperatorSpec, g: &PolyRep, nu0: &MeasureVec, horizon: f64) -> Result<f64> {
    check_inputs(spec, g, horizon)?;
    check_dim("initial measure", spec.dim(), nu0.dim())?;
    let g = g.clone().trimmed();
    let degree = g.stored_degree();
    let mat = dual_matrix(spec, degree)? * horizon;
    let y = mat.exp() * DVector::from_vec(g.to_flat());
    PolyRep::from_flat(spec.dim(), degree, y.as_slice()).eval(nu0)
}

/// Moment engine against the terminal sample of an ensemble simulated from
/// the same spec and initial state.
pub fn check_against_mc(
    spec: &OperatorSpec,
    g: &PolyRep,
    nu0: &MeasureVec,
    horizon: f64,
    ensemble: &PathEnsemble,
) -> Result<ComparisonReport> {
    ensemble.check_matches(nu0, horizon)?;
    let engine = moment(spec, g, nu0, horizon)?;
    let (mean, se) = estimate(ensemble, g)?;
    Ok(ComparisonReport::new(engine, mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cir() -> OperatorSpec {
        OperatorSpec::zero(1)
            .with_b(vec![0.1])
            .with_b1(DMatrix::from_element(1, 1, -0.5))
            .with_alpha(vec![1.0])
    }

    fn nu(c: &[f64]) -> MeasureVec {
        MeasureVec::new(c.to_vec()).unwrap()
    }

    #[test]
    fn constant_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random::admissible_spec(3, &mut rng);
        let sol = solve_moment_ode(&spec, &PolyRep::constant(3, 5.0), 2.0).unwrap();
        for c in &sol.coefficients {
            assert_eq!(c, &PolyRep::constant(3, 5.0));
        }
        assert_eq!(moment(&spec, &PolyRep::constant(3, 5.0), &nu(&[1.0, 2.0, 3.0]), 1.0).unwrap(), 5.0);
    }

    #[test]
    fn gbm_lift_coefficients() {
        let (sigma, t) = (0.3, 0.8);
        let h = [0.5, 1.5];
        let spec = OperatorSpec::gbm_lift(2, sigma);
        for n in 1..=4 {
            let sol = solve_moment_ode_with(&spec, &PolyRep::power(&h, n), t, 200).unwrap();
            let factor = (sigma * sigma * t * (n * (n - 1)) as f64 / 2.0).exp();
            let expected = PolyRep::power(&h, n).scaled(factor);
            for (a, b) in sol.terminal().to_flat().iter().zip(expected.to_flat()) {
                assert_relative_eq!(*a, b, max_relative = 1e-10, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn cir_coefficients_closed_form() {
        let sol = solve_moment_ode(&cir(), &PolyRep::linear(&[1.0]), 1.0).unwrap();
        let fin = sol.terminal();
        let e = (-0.5f64).exp();
        assert_relative_eq!(fin.term(1).unwrap().values()[0], e, max_relative = 1e-12);
        assert_relative_eq!(fin.term(0).unwrap().values()[0], 0.1 * (1.0 - e) / 0.5, max_relative = 1e-12);
        assert_relative_eq!(fin.term(1).unwrap().values()[0], 0.606531, epsilon = 5e-7);
        assert_relative_eq!(fin.term(0).unwrap().values()[0], 0.078694, epsilon = 5e-7);
        assert_eq!(sol.times.len(), 1001);
        assert_eq!(sol.coefficients[0], PolyRep::linear(&[1.0]));
    }

    #[test]
    fn moment_examples() {
        // ⟨h,μ⟩ = 3, σ = 0.2, n = 2, T = 1
        let spec = OperatorSpec::gbm_lift(2, 0.2);
        let m = moment(&spec, &PolyRep::power(&[1.0, 2.0], 2), &nu(&[1.0, 1.0]), 1.0).unwrap();
        assert_relative_eq!(m, 9.0 * 0.04f64.exp(), max_relative = 1e-10);
        assert_relative_eq!(m, 9.367297, epsilon = 5e-7);

        let m = moment(&cir(), &PolyRep::linear(&[1.0]), &nu(&[1.0]), 1.0).unwrap();
        assert_relative_eq!(m, 0.685225, epsilon = 5e-7);
    }

    #[test]
    fn surface_examples() {
        let spec = OperatorSpec::gbm_lift(2, 0.2);
        let g = PolyRep::power(&[1.0, 2.0], 2);
        let x = nu(&[1.0, 1.0]);
        assert_eq!(moment_surface(&spec, &g, &x, &[0.0], 100).unwrap(), vec![9.0]);
        let s = moment_surface(&spec, &g, &x, &[1.0, 0.0, 0.5], 1000).unwrap();
        for (v, t) in s.iter().zip([1.0, 0.0, 0.5]) {
            assert_relative_eq!(*v, 9.0 * (0.04f64 * t).exp(), max_relative = 1e-10);
        }

        // b = 0: mean decays like z₀e^{b₁t}
        let spec = cir().with_b(vec![0.0]);
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.3).collect();
        let s = moment_surface(&spec, &PolyRep::linear(&[1.0]), &nu(&[2.0]), &times, 1000).unwrap();
        for (v, t) in s.iter().zip(&times) {
            assert_relative_eq!(*v, 2.0 * (-0.5 * t).exp(), max_relative = 1e-10);
        }
        assert!(s.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn semigroup_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random::admissible_spec(3, &mut rng);
        let g = random::polynomial(3, 3, &mut rng);
        let full = terminal_coefficients(&spec, &g, 1.0, 1000).unwrap();
        let half = terminal_coefficients(&spec, &g, 0.5, 500).unwrap();
        let restart = terminal_coefficients(&spec, &half, 0.5, 500).unwrap();
        for (a, b) in full.to_flat().iter().zip(restart.to_flat()) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn degree_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = random::admissible_spec(2, &mut rng);
        let g = PolyRep::power(&[1.0, -1.0], 3);
        let sol = solve_moment_ode_with(&spec, &g, 1.0, 50).unwrap();
        assert!(sol.coefficients.iter().all(|c| c.degree() <= 3 && c.stored_degree() == 3));
    }

    #[test]
    fn rk4_convergence_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = random::admissible_spec(2, &mut rng);
        let g = random::polynomial(2, 3, &mut rng);
        let x = nu(&[1.0, 2.0]);
        let at = |steps| moment_with(&spec, &g, &x, 2.0, steps).unwrap();
        let (a, b, c) = (at(10), at(20), at(40));
        let ratio = (a - b).abs() / (b - c).abs();
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dense_expm_path_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = random::admissible_spec(3, &mut rng);
        let g = random::polynomial(3, 3, &mut rng);
        let x = random::measure(3, &mut rng);
        let a = moment(&spec, &g, &x, 1.0).unwrap();
        let b = moment_expm(&spec, &g, &x, 1.0).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-9);
    }

    #[test]
    fn non_finite_reported() {
        let spec = OperatorSpec::zero(1).with_b1(DMatrix::from_element(1, 1, 1e9));
        let err = moment_with(&spec, &PolyRep::linear(&[1.0]), &nu(&[1.0]), 10.0, 10).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn csv_export() {
        let sol = solve_moment_ode_with(&cir(), &PolyRep::power(&[1.0], 2), 1.0, 2).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,degree,index,value");
        assert_eq!(lines.len(), 1 + 3 * 3);
        assert!(lines[3].starts_with("0,2,1.1,1"));
    }
}
