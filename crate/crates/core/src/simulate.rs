//! Euler Monte Carlo for the weight process on `ℝ^m₊`.
//!
//! `dc = (b + B₁ᵀc) dt + σ(c) dW` with `σσᵀ = a(c)` from
//! [`OperatorSpec::diffusion_matrix`]. Each step is evaluated at the current
//! (non-negative) state and the result is truncated at zero. Path `i` draws
//! from its own ChaCha8 stream `(seed, i)`, so ensembles do not depend on the
//! thread count.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::generator::{carre_du_champ, OperatorSpec};
use crate::linalg::{cholesky_into, psd_sqrt, PSD_TOL};
use crate::measures::{MeasureVec, PolyRep};

pub const SCHEME_EULER: &str = "full-truncation-euler";
pub const SCHEME_EXACT_GBM: &str = "exact-lognormal";

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub m: usize,
    pub n_steps: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub scheme: &'static str,
    /// States are stored every `record_stride` steps.
    pub record_stride: usize,
    /// Row-major `[n_paths][n_records][m]`.
    pub paths: Vec<f64>,
}

impl PathEnsemble {
    pub fn n_records(&self) -> usize {
        self.n_steps / self.record_stride + 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn record_times(&self) -> Vec<f64> {
        (0..self.n_records())
            .map(|r| self.dt * (r * self.record_stride) as f64)
            .collect()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.n_records() * self.m;
        &self.paths[p * len..(p + 1) * len]
    }

    pub fn state(&self, p: usize, r: usize) -> &[f64] {
        &self.path(p)[r * self.m..(r + 1) * self.m]
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0, 0)
    }

    pub fn terminal(&self, p: usize) -> &[f64] {
        self.state(p, self.n_records() - 1)
    }

    /// Errors unless the ensemble was started at `nu0` and ends at `horizon`.
    pub fn check_matches(&self, nu0: &MeasureVec, horizon: f64) -> Result<()> {
        check_dim("ensemble", nu0.dim(), self.m)?;
        if self.n_paths == 0 {
            return Err(Error::InvalidInput("ensemble has no paths".into()));
        }
        let same_start = self
            .initial()
            .iter()
            .zip(nu0.weights())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0));
        if !same_start {
            return Err(Error::InvalidInput(
                "ensemble initial state differs from the requested one".into(),
            ));
        }
        if (self.horizon() - horizon).abs() > 1e-9 * horizon.abs().max(1.0) {
            return Err(Error::InvalidInput(format!(
                "ensemble horizon {} differs from requested {horizon}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Flat binary layout: `m`, `n_steps`, `n_paths` as little-endian `u64`,
    /// `dt` as little-endian `f64`, then every stored weight as
    /// little-endian `f64` in `[path][step][grid point]` order. `n_steps` and
    /// `dt` describe the stored records, so a strided ensemble is written as
    /// one with `n_steps / stride` steps of size `dt * stride`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&((self.n_records() - 1) as u64).to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.dt * self.record_stride as f64).to_le_bytes())?;
        for v in &self.paths {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`write_binary`](Self::write_binary). Seed and scheme are
    /// not part of the layout and come back as `0` and `"binary"`.
    pub fn read_binary<R: Read>(mut r: R) -> io::Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> io::Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let m = u64::from_le_bytes(next(&mut r)?) as usize;
        let n_steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let n_paths = u64::from_le_bytes(next(&mut r)?) as usize;
        let dt = f64::from_le_bytes(next(&mut r)?);
        let len = n_paths
            .checked_mul(n_steps + 1)
            .and_then(|v| v.checked_mul(m))
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "header overflows"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != len * 8 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("expected {} data bytes, found {}", len * 8, bytes.len()),
            ));
        }
        let paths = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            m,
            n_steps,
            n_paths,
            dt,
            seed: 0,
            scheme: "binary",
            record_stride: 1,
            paths,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Must divide `n_steps`. `0` keeps only the initial and terminal states.
    pub record_stride: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { record_stride: 1 }
    }
}

/// Allocation-free Euler stepper for one path.
struct Stepper<'a> {
    spec: &'a OperatorSpec,
    m: usize,
    kernel: Vec<f64>,
    diagonal: bool,
    drift: Vec<f64>,
    a: Vec<f64>,
    root: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(spec: &'a OperatorSpec) -> Self {
        let m = spec.dim();
        let k = spec.q2_kernel();
        let kernel: Vec<f64> = (0..m * m).map(|idx| k[(idx / m, idx % m)]).collect();
        let diagonal = (0..m).all(|i| (0..m).all(|j| i == j || (kernel[i * m + j] == 0.0 && spec.pi[(i, j)] == 0.0)));
        Self {
            spec,
            m,
            kernel,
            diagonal,
            drift: vec![0.0; m],
            a: vec![0.0; m * m],
            root: vec![0.0; m * m],
        }
    }

    fn fill(&mut self, c: &[f64]) {
        let (m, spec) = (self.m, self.spec);
        for j in 0..m {
            self.drift[j] = spec.b[j] + (0..m).map(|i| spec.b1[(i, j)] * c[i]).sum::<f64>();
        }
        for i in 0..m {
            for j in 0..m {
                self.a[i * m + j] = self.kernel[i * m + j] * c[i] * c[j];
            }
            let pi_c: f64 = (0..m).map(|l| spec.pi[(i, l)] * c[l]).sum();
            self.a[i * m + i] += spec.alpha[i] * c[i] + c[i] * pi_c;
        }
    }

    /// Writes a square root of `a` into `root` (row-major).
    fn factor(&mut self, c: &[f64]) -> Result<()> {
        let m = self.m;
        let amax = self.a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        let threshold = -PSD_TOL * amax;
        if self.diagonal {
            self.root.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..m {
                let d = self.a[i * m + i];
                if d < threshold {
                    return Err(Error::NotPsd {
                        min_eigenvalue: d,
                        state: c.to_vec(),
                    });
                }
                self.root[i * m + i] = d.max(0.0).sqrt();
            }
            return Ok(());
        }
        if cholesky_into(&self.a, m, &mut self.root) {
            return Ok(());
        }
        let a = DMatrix::from_row_slice(m, m, &self.a);
        match psd_sqrt(&a) {
            Ok(s) => {
                for i in 0..m {
                    for j in 0..m {
                        self.root[i * m + j] = s[(i, j)];
                    }
                }
                Ok(())
            }
            Err(min_eigenvalue) => Err(Error::NotPsd {
                min_eigenvalue,
                state: c.to_vec(),
            }),
        }
    }

    /// One step `c ← max(c + drift·dt + σ·√dt·z, 0)`.
    fn step(&mut self, c: &mut [f64], dt: f64, z: &[f64]) -> Result<()> {
        let m = self.m;
        self.fill(c);
        self.factor(c)?;
        let sq = dt.sqrt();
        for (i, ci) in c.iter_mut().enumerate().take(m) {
            let noise: f64 = (0..m).map(|j| self.root[i * m + j] * z[j]).sum();
            *ci = (*ci + self.drift[i] * dt + sq * noise).max(0.0);
        }
        Ok(())
    }
}

fn check_sim_inputs(spec: &OperatorSpec, nu0: &MeasureVec, horizon: f64, n_steps: usize) -> Result<()> {
    spec.check_shapes()?;
    check_dim("initial measure", spec.dim(), nu0.dim())?;
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidInput(format!("horizon must be >= 0, got {horizon}")));
    }
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be positive".into()));
    }
    Ok(())
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

pub fn simulate(
    spec: &OperatorSpec,
    nu0: &MeasureVec,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_with(spec, nu0, horizon, n_steps, n_paths, seed, &SimOptions::default())
}

pub fn simulate_with(
    spec: &OperatorSpec,
    nu0: &MeasureVec,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    check_sim_inputs(spec, nu0, horizon, n_steps)?;
    let stride = if opts.record_stride == 0 { n_steps } else { opts.record_stride };
    if !n_steps.is_multiple_of(stride) {
        return Err(Error::InvalidInput(format!(
            "record stride {stride} does not divide n_steps {n_steps}"
        )));
    }
    let m = spec.dim();
    let dt = horizon / n_steps as f64;
    let n_records = n_steps / stride + 1;
    let mut paths = vec![0.0; n_paths * n_records * m];
    paths
        .par_chunks_mut((n_records * m).max(1))
        .enumerate()
        .try_for_each(|(p, out)| -> Result<()> {
            if m == 0 {
                return Ok(());
            }
            let mut rng = path_rng(seed, p);
            let mut stepper = Stepper::new(spec);
            let mut c = nu0.weights().to_vec();
            let mut z = vec![0.0; m];
            out[..m].copy_from_slice(&c);
            for s in 1..=n_steps {
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                stepper.step(&mut c, dt, &z)?;
                if s % stride == 0 {
                    let r = s / stride;
                    out[r * m..(r + 1) * m].copy_from_slice(&c);
                }
            }
            Ok(())
        })?;
    Ok(PathEnsemble {
        m,
        n_steps,
        n_paths,
        dt,
        seed,
        scheme: SCHEME_EULER,
        record_stride: stride,
        paths,
    })
}

type Pair = (Vec<f64>, Vec<f64>);

/// Coarse and fine Euler ensembles driven by the same Brownian increments:
/// the coarse step uses `(z₁ + z₂)/√2` where the fine steps use `z₁`, `z₂`.
/// Only initial and terminal states are kept. Returns `(coarse, fine)`.
pub fn simulate_coupled(
    spec: &OperatorSpec,
    nu0: &MeasureVec,
    horizon: f64,
    coarse_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(PathEnsemble, PathEnsemble)> {
    check_sim_inputs(spec, nu0, horizon, coarse_steps)?;
    let m = spec.dim();
    let dt = horizon / coarse_steps as f64;
    let terminals: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut rng = path_rng(seed, p);
            let mut stepper = Stepper::new(spec);
            let mut coarse = nu0.weights().to_vec();
            let mut fine = coarse.clone();
            let mut z1 = vec![0.0; m];
            let mut z2 = vec![0.0; m];
            let mut zc = vec![0.0; m];
            for _ in 0..coarse_steps {
                z1.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                z2.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                for i in 0..m {
                    zc[i] = (z1[i] + z2[i]) / std::f64::consts::SQRT_2;
                }
                stepper.step(&mut fine, 0.5 * dt, &z1)?;
                stepper.step(&mut fine, 0.5 * dt, &z2)?;
                stepper.step(&mut coarse, dt, &zc)?;
            }
            Ok((coarse, fine))
        })
        .collect::<Result<_>>()?;
    let assemble = |steps: usize, step: f64, pick: fn(&Pair) -> &Vec<f64>| {
        let mut paths = Vec::with_capacity(n_paths * 2 * m);
        for t in &terminals {
            paths.extend_from_slice(nu0.weights());
            paths.extend_from_slice(pick(t));
        }
        PathEnsemble {
            m,
            n_steps: steps,
            n_paths,
            dt: step,
            seed,
            scheme: SCHEME_EULER,
            record_stride: steps,
            paths,
        }
    };
    Ok((
        assemble(coarse_steps, dt, |t| &t.0),
        assemble(2 * coarse_steps, 0.5 * dt, |t| &t.1),
    ))
}

/// Exact sampler for `X_t = S_t μ`, `dS = σS dW`, `S_0 = 1`; stores `μ` and
/// `S_T μ` as a single step.
pub fn simulate_gbm_lift(mu: &MeasureVec, sigma: f64, horizon: f64, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if !(sigma >= 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "need sigma >= 0 and horizon >= 0, got {sigma}, {horizon}"
        )));
    }
    let m = mu.dim();
    let mut paths = vec![0.0; n_paths * 2 * m];
    paths.par_chunks_mut(2 * m).enumerate().for_each(|(p, out)| {
        let z: f64 = path_rng(seed, p).sample(StandardNormal);
        let s = (sigma * horizon.sqrt() * z - 0.5 * sigma * sigma * horizon).exp();
        for (i, w) in mu.weights().iter().enumerate() {
            out[i] = *w;
            out[m + i] = s * w;
        }
    });
    Ok(PathEnsemble {
        m,
        n_steps: 1,
        n_paths,
        dt: horizon,
        seed,
        scheme: SCHEME_EXACT_GBM,
        record_stride: 1,
        paths,
    })
}

fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in values {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    if n < 2.0 {
        return (mean, 0.0);
    }
    (mean, (m2 / (n - 1.0) / n).sqrt())
}

/// Sample mean and standard error of `f` over record `r`.
pub fn estimate_fn_at(ensemble: &PathEnsemble, r: usize, f: impl Fn(&[f64]) -> f64 + Sync) -> (f64, f64) {
    let values: Vec<f64> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| f(ensemble.state(p, r)))
        .collect();
    mean_se(values.into_iter())
}

/// Sample mean and standard error of `f` over terminal states.
pub fn estimate_fn(ensemble: &PathEnsemble, f: impl Fn(&[f64]) -> f64 + Sync) -> (f64, f64) {
    estimate_fn_at(ensemble, ensemble.n_records() - 1, f)
}

fn poly_fn(ensemble: &PathEnsemble, p: &PolyRep) -> Result<impl Fn(&[f64]) -> f64 + Sync + use<>> {
    check_dim("estimated polynomial", ensemble.m, p.dim())?;
    let p = p.clone();
    Ok(move |c: &[f64]| {
        let nu = MeasureVec::new(c.to_vec()).expect("stored states are non-negative");
        p.eval(&nu).expect("dimensions checked")
    })
}

/// `(mean, standard error)` of `p(X_T)`.
pub fn estimate(ensemble: &PathEnsemble, p: &PolyRep) -> Result<(f64, f64)> {
    Ok(estimate_fn(ensemble, poly_fn(ensemble, p)?))
}

fn linear_part(p: &PolyRep, what: &str) -> Result<Vec<f64>> {
    if p.degree() > 1 {
        return Err(Error::InvalidInput(format!(
            "{what} must have degree <= 1, got {}",
            p.degree()
        )));
    }
    Ok(match p.term(1) {
        Some(t) => t.values().to_vec(),
        None => vec![0.0; p.dim()],
    })
}

/// Realized covariation `Σ Δ⟨g,X⟩ Δ⟨h,X⟩` over the stored grid, averaged
/// over paths, for degree-1 `p = ⟨g,·⟩ + const`, `q = ⟨h,·⟩ + const`.
pub fn qv_estimate(ensemble: &PathEnsemble, p: &PolyRep, q: &PolyRep) -> Result<f64> {
    check_dim("qv polynomial", ensemble.m, p.dim())?;
    check_dim("qv polynomial", ensemble.m, q.dim())?;
    let g = linear_part(p, "p")?;
    let h = linear_part(q, "q")?;
    let dot = |v: &[f64], x: &[f64]| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let n_rec = ensemble.n_records();
    let total: f64 = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut s = 0.0;
            for r in 1..n_rec {
                let (x0, x1) = (ensemble.state(path, r - 1), ensemble.state(path, r));
                s += (dot(&g, x1) - dot(&g, x0)) * (dot(&h, x1) - dot(&h, x0));
            }
            s
        })
        .sum();
    Ok(total / ensemble.n_paths.max(1) as f64)
}

/// Path-average of `∫_0^T f(X_s) ds` by the trapezoid rule on the stored grid.
pub fn time_integral(ensemble: &PathEnsemble, f: impl Fn(&[f64]) -> f64 + Sync) -> (f64, f64) {
    let n_rec = ensemble.n_records();
    let h = ensemble.dt * ensemble.record_stride as f64;
    let values: Vec<f64> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let vals: Vec<f64> = (0..n_rec).map(|r| f(ensemble.state(p, r))).collect();
            let inner: f64 = vals.iter().skip(1).take(n_rec.saturating_sub(2)).sum();
            h * (inner + 0.5 * (vals[0] + vals[n_rec - 1]))
        })
        .collect();
    mean_se(values.into_iter())
}

/// Path-average of `∫_0^T Γ(p,q)(X_s) ds`.
pub fn gamma_integral(spec: &OperatorSpec, ensemble: &PathEnsemble, p: &PolyRep, q: &PolyRep) -> Result<f64> {
    check_dim("ensemble", spec.dim(), ensemble.m)?;
    let nu = MeasureVec::new(ensemble.initial().to_vec())?;
    carre_du_champ(spec, p, q, &nu)?;
    Ok(time_integral(ensemble, |c| {
        let nu = MeasureVec::new(c.to_vec()).expect("stored states are non-negative");
        carre_du_champ(spec, p, q, &nu).expect("inputs checked")
    })
    .0)
}

/// Per-record mean and standard error of each named polynomial. Columns:
/// `t`, then `<name>_mean,<name>_se` per polynomial.
pub fn write_summary_csv<W: Write>(ensemble: &PathEnsemble, polys: &[(String, PolyRep)], mut w: W) -> Result<()> {
    let fns = polys
        .iter()
        .map(|(_, p)| poly_fn(ensemble, p))
        .collect::<Result<Vec<_>>>()?;
    let io = |e: io::Error| Error::InvalidInput(format!("write failed: {e}"));
    let header: Vec<String> = polys
        .iter()
        .flat_map(|(name, _)| [format!("{name}_mean"), format!("{name}_se")])
        .collect();
    writeln!(w, "t,{}", header.join(",")).map_err(io)?;
    for (r, t) in ensemble.record_times().iter().enumerate() {
        let mut row = vec![t.to_string()];
        for f in &fns {
            let (mean, se) = estimate_fn_at(ensemble, r, f);
            row.push(mean.to_string());
            row.push(se.to_string());
        }
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random;

    fn cir() -> OperatorSpec {
        OperatorSpec::zero(1)
            .with_b(vec![0.1])
            .with_b1(DMatrix::from_element(1, 1, -0.5))
            .with_alpha(vec![1.0])
    }

    fn nu(c: &[f64]) -> MeasureVec {
        MeasureVec::new(c.to_vec()).unwrap()
    }

    fn mass(m: usize) -> PolyRep {
        PolyRep::linear(&vec![1.0; m])
    }

    #[test]
    fn zero_spec_is_constant() {
        let x0 = nu(&[1.0, 2.0, 0.5]);
        let ens = simulate(&OperatorSpec::zero(3), &x0, 1.0, 20, 50, 7).unwrap();
        assert!(ens.paths.chunks(3).all(|c| c == x0.weights()));
        let (mean, se) = estimate(&ens, &mass(3)).unwrap();
        assert_eq!((mean, se), (3.5, 0.0));
        assert_eq!(qv_estimate(&ens, &mass(3), &mass(3)).unwrap(), 0.0);
        let (c, _) = estimate(&ens, &PolyRep::constant(3, 2.5)).unwrap();
        assert_eq!(c, 2.5);
    }

    #[test]
    fn cir_mean() {
        let ens = simulate_with(&cir(), &nu(&[1.0]), 1.0, 1000, 20_000, 11, &SimOptions { record_stride: 0 }).unwrap();
        assert_eq!(ens.n_records(), 2);
        let (mean, se) = estimate(&ens, &mass(1)).unwrap();
        let exact = (-0.5f64).exp() + 0.2 * (1.0 - (-0.5f64).exp());
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn gbm_second_moment() {
        let spec = OperatorSpec::gbm_lift(2, 0.2);
        let x0 = nu(&[1.0, 2.0]);
        let g = [1.0, 1.0];
        let p = PolyRep::power(&g, 2);
        let exact = 9.0 * (0.04f64).exp();
        let ens = simulate_with(&spec, &x0, 1.0, 200, 20_000, 3, &SimOptions { record_stride: 0 }).unwrap();
        let (mean, se) = estimate(&ens, &p).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");

        let exact_ens = simulate_gbm_lift(&x0, 0.2, 1.0, 20_000, 3).unwrap();
        let (mean, se) = estimate(&exact_ens, &p).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se);
        let (s1, se1) = estimate_fn(&exact_ens, |c| c[0]);
        assert!((s1 - 1.0).abs() <= 3.0 * se1);
    }

    #[test]
    fn gbm_lift_zero_vol() {
        let x0 = nu(&[1.0, 3.0]);
        let ens = simulate_gbm_lift(&x0, 0.0, 1.0, 10, 1).unwrap();
        assert!(ens.paths.chunks(2).all(|c| c == x0.weights()));
    }

    #[test]
    fn seed_determinism_and_nonnegativity() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(5);
        let spec = random::admissible_spec(3, &mut rng);
        let x0 = random::measure(3, &mut rng);
        let a = simulate(&spec, &x0, 1.0, 50, 200, 42).unwrap();
        let b = simulate(&spec, &x0, 1.0, 50, 200, 42).unwrap();
        let c = simulate(&spec, &x0, 1.0, 50, 200, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.paths, c.paths);
        assert!(a.paths.iter().all(|v| *v >= 0.0));
        for p in 0..a.n_paths {
            assert_eq!(a.state(p, 0), x0.weights());
        }
    }

    #[test]
    fn martingale_mass() {
        let spec = OperatorSpec::zero(2).with_alpha(vec![1.0, 0.5]);
        let x0 = nu(&[1.0, 2.0]);
        let ens = simulate_with(&spec, &x0, 1.0, 200, 20_000, 9, &SimOptions { record_stride: 0 }).unwrap();
        let (mean, se) = estimate(&ens, &mass(2)).unwrap();
        assert!((mean - 3.0).abs() <= 3.0 * se);
    }

    #[test]
    fn indefinite_diffusion_aborts() {
        let spec = OperatorSpec::zero(2).with_beta(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
        let err = simulate(&spec, &nu(&[1.0, 1.0]), 1.0, 10, 4, 0).unwrap_err();
        assert!(matches!(err, Error::NotPsd { .. }));
    }

    #[test]
    fn stride_must_divide() {
        let err = simulate_with(&cir(), &nu(&[1.0]), 1.0, 10, 1, 0, &SimOptions { record_stride: 3 });
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn binary_round_trip() {
        let ens = simulate_with(&cir(), &nu(&[1.0]), 1.0, 10, 3, 0, &SimOptions { record_stride: 5 }).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 8 * 3 * 3);
        let back = PathEnsemble::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.paths, ens.paths);
        assert_eq!(back.n_steps, 2);
        assert_eq!(back.dt, 0.5);
        assert_eq!(back.record_times(), ens.record_times());
        assert!(PathEnsemble::read_binary(&buf[..40]).is_err());
    }

    #[test]
    fn summary_csv() {
        let ens = simulate_with(&cir(), &nu(&[1.0]), 1.0, 4, 10, 0, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&ens, &[("mass".into(), mass(1))], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,mass_mean,mass_se");
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().starts_with("0,1,0"));
    }

    #[test]
    fn coupled_pair_shares_noise() {
        let (coarse, fine) = simulate_coupled(&cir(), &nu(&[1.0]), 1.0, 4, 2000, 1).unwrap();
        assert_eq!(coarse.n_steps, 4);
        assert_eq!(fine.n_steps, 8);
        let (d, se) = estimate_fn(&coarse, |c| c[0]);
        let (f, _) = estimate_fn(&fine, |c| c[0]);
        let diff: Vec<f64> = (0..2000).map(|p| coarse.terminal(p)[0] - fine.terminal(p)[0]).collect();
        let spread = diff.iter().map(|v| v * v).sum::<f64>() / 2000.0;
        assert!(spread.sqrt() < 10.0 * se * (2000f64).sqrt());
        assert!((d - f).abs() < 0.1);
    }

    #[test]
    fn weak_order_one() {
        // Biases at dt = 1/4 and 1/8 against the closed-form mean.
        let exact = (-0.5f64).exp() + 0.2 * (1.0 - (-0.5f64).exp());
        let (coarse, fine) = simulate_coupled(&cir(), &nu(&[1.0]), 1.0, 4, 1_000_000, 2024).unwrap();
        let (mc, _) = estimate_fn(&coarse, |c| c[0]);
        let (mf, _) = estimate_fn(&fine, |c| c[0]);
        let ratio = (mc - exact) / (mf - exact);
        assert!((ratio - 2.0).abs() <= 0.6, "ratio {ratio}");
    }

    #[test]
    fn quadratic_variation_is_gamma() {
        let spec = OperatorSpec::gbm_lift(2, 0.3);
        let x0 = nu(&[1.0, 1.0]);
        let ens = simulate(&spec, &x0, 1.0, 500, 2000, 17).unwrap();
        let p = mass(2);
        let qv = qv_estimate(&ens, &p, &p).unwrap();
        let gamma = gamma_integral(&spec, &ens, &p, &p).unwrap();
        // Γ = σ²⟨1,X⟩²; [⟨1,X⟩] = ∫Γ ds, not 2∫Γ ds.
        assert!((qv / gamma - 1.0).abs() < 0.05, "qv {qv}, gamma {gamma}");

        let ens = simulate(&cir(), &nu(&[1.0]), 1.0, 500, 2000, 18).unwrap();
        let qv = qv_estimate(&ens, &mass(1), &mass(1)).unwrap();
        let (alpha_mass, _) = time_integral(&ens, |c| c[0]);
        assert!((qv / alpha_mass - 1.0).abs() < 0.05, "qv {qv}, int {alpha_mass}");
    }
}
