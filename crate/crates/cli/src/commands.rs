//! One function per subcommand. Each returns the files to write; nothing
//! touches the file system here.

use serde::Serialize;

use measpoly::affine::{self, solve_riccati_with};
use measpoly::generator::{self, pmp_probe_with, ProbeOptions, ValidationReport};
use measpoly::moments::{self, moment_surface};
use measpoly::random::probe_functions;
use measpoly::simulate::{estimate_fn, simulate_with, write_summary_csv, SimOptions};
use measpoly::{MeasureVec, OperatorSpec, PolyRep};

use crate::config::{DeliveryPeriod, Resolved, RunConfig, DEFAULT_PATHS, DEFAULT_SIM_STEPS};
use crate::{CliError, Outcome};

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn csv_raw(header: &[String], rows: &[Vec<f64>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r.iter().map(f64::to_string)).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn missing(block: &str) -> CliError {
    CliError::Schema(format!("config has no \"{block}\" block"))
}

fn require_admissible(spec: &OperatorSpec) -> Result<(), CliError> {
    let report = generator::validate(spec)?;
    if report.passed {
        return Ok(());
    }
    let failed: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
    Err(CliError::Domain(format!(
        "operator is not admissible; failed: {}",
        failed.join(", ")
    )))
}

pub fn validation_report(cfg: &RunConfig) -> Result<ValidationReport, CliError> {
    Ok(generator::validate(&cfg.resolve()?.spec)?)
}

pub fn validate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let report = validation_report(cfg)?;
    Ok(Outcome {
        files: Vec::new(),
        stdout: serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        failed: !report.passed,
    })
}

#[derive(Debug, Serialize)]
struct MomentRow {
    t: f64,
    value: f64,
}

pub fn moments(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Resolved { spec, initial, .. } = cfg.resolve()?;
    let block = cfg.moments.as_ref().ok_or_else(|| missing("moments"))?;
    let g = block.polynomial.build(spec.dim())?;
    let times = block.times.clone().unwrap_or_else(|| vec![cfg.horizon]);
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let steps = cfg
        .solver
        .steps
        .unwrap_or_else(|| moments::auto_steps(&spec, &g, t_max));
    let values = moment_surface(&spec, &g, &initial, &times, steps)?;
    let rows: Vec<MomentRow> = times.iter().zip(&values).map(|(t, v)| MomentRow { t: *t, value: *v }).collect();
    let stdout = rows.iter().map(|r| format!("t = {}: {}\n", r.t, r.value)).collect();
    Ok(Outcome {
        files: vec![("moments.csv".into(), csv_bytes(&rows)?)],
        stdout,
        failed: false,
    })
}

pub fn laplace(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Resolved { spec, initial, .. } = cfg.resolve()?;
    let block = cfg.laplace.as_ref().ok_or_else(|| missing("laplace"))?;
    if block.g.len() != spec.dim() {
        return Err(CliError::Schema(format!(
            "laplace.g must have {} entries, found {}",
            spec.dim(),
            block.g.len()
        )));
    }
    if !affine::is_affine(&spec) {
        return Err(CliError::Domain(
            "Laplace transform needs an affine operator, but Q2 != 0 (beta, pi or loadings are non-zero)".into(),
        ));
    }
    let steps = cfg
        .solver
        .steps
        .unwrap_or_else(|| affine::auto_steps(&spec, &block.g, cfg.horizon));
    let sol = solve_riccati_with(&spec, &block.g, cfg.horizon, steps)?;
    if sol.blowup {
        return Err(measpoly::Error::Blowup { t: sol.horizon() }.into());
    }
    let m = spec.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("psi_{i}")));
    header.extend(["phi".to_string(), "laplace".to_string()]);
    let values = sol.laplace_path(&initial);
    let rows: Vec<Vec<f64>> = (0..sol.times.len())
        .map(|i| {
            let mut r = vec![sol.times[i]];
            r.extend_from_slice(&sol.psi[i]);
            r.push(sol.phi[i]);
            r.push(values[i]);
            r
        })
        .collect();
    Ok(Outcome {
        files: vec![("laplace.csv".into(), csv_raw(&header, &rows)?)],
        stdout: format!("laplace at t = {}: {}\n", sol.horizon(), values.last().expect("one node")),
        failed: false,
    })
}

/// Smallest divisor of `steps` keeping at most 100 recorded intervals.
fn default_stride(steps: usize) -> usize {
    (1..=steps).find(|d| steps.is_multiple_of(*d) && steps / d <= 100).unwrap_or(steps)
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Resolved { spec, initial, .. } = cfg.resolve()?;
    require_admissible(&spec)?;
    let block = cfg.simulate.clone().unwrap_or_default();
    let m = spec.dim();
    let polys: Vec<(String, PolyRep)> = if block.polynomials.is_empty() {
        vec![("mass".into(), PolyRep::linear(&vec![1.0; m]))]
    } else {
        block
            .polynomials
            .iter()
            .map(|p| Ok((p.name.clone(), p.polynomial.build(m)?)))
            .collect::<Result<_, CliError>>()?
    };
    let steps = cfg.solver.steps.unwrap_or(DEFAULT_SIM_STEPS);
    let paths = cfg.solver.paths.unwrap_or(DEFAULT_PATHS);
    let stride = block.record_stride.unwrap_or_else(|| default_stride(steps));
    let ens = simulate_with(
        &spec,
        &initial,
        cfg.horizon,
        steps,
        paths,
        cfg.seed,
        &SimOptions { record_stride: stride },
    )?;
    let mut summary = Vec::new();
    write_summary_csv(&ens, &polys, &mut summary)?;
    let mut files = vec![("summary.csv".to_string(), summary)];
    if block.binary {
        let mut bin = Vec::new();
        ens.write_binary(&mut bin)?;
        files.push(("paths.bin".into(), bin));
    }
    Ok(Outcome {
        files,
        stdout: format!(
            "simulated {paths} paths, {steps} steps, seed {}, {} records\n",
            cfg.seed,
            ens.n_records()
        ),
        failed: false,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FuturesRow {
    pub period: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub mean: f64,
    pub std: f64,
    pub p05: Option<f64>,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub mc_mean: Option<f64>,
    pub mc_se: Option<f64>,
}

/// Weight vector of a delivery period on the grid (zero off the period).
pub fn period_weights(points: &[f64], period: &DeliveryPeriod) -> Result<Vec<f64>, CliError> {
    if !(period.tau1 < period.tau2) {
        return Err(CliError::Schema(format!(
            "delivery period needs tau1 < tau2, got [{}, {}]",
            period.tau1, period.tau2
        )));
    }
    let tol = 1e-12 * (period.tau2 - period.tau1).abs().max(1.0);
    let inside: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, u)| **u >= period.tau1 - tol && **u <= period.tau2 + tol)
        .map(|(i, _)| i)
        .collect();
    if inside.is_empty() {
        return Err(CliError::Domain(format!(
            "delivery period [{}, {}] contains no grid nodes",
            period.tau1, period.tau2
        )));
    }
    let local = match &period.weights {
        Some(w) if w.len() != inside.len() => {
            return Err(CliError::Schema(format!(
                "period [{}, {}] covers {} nodes but has {} weights",
                period.tau1,
                period.tau2,
                inside.len(),
                w.len()
            )))
        }
        Some(w) if w.iter().any(|v| !(*v >= 0.0)) => {
            return Err(CliError::Schema("delivery weights must be >= 0".into()))
        }
        Some(w) => w.clone(),
        None => vec![1.0 / inside.len() as f64; inside.len()],
    };
    let mut full = vec![0.0; points.len()];
    for (i, w) in inside.into_iter().zip(local) {
        full[i] = w;
    }
    Ok(full)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn futures_rows(cfg: &RunConfig) -> Result<Vec<FuturesRow>, CliError> {
    let Resolved { grid, spec, initial } = cfg.resolve()?;
    let block = cfg.futures.as_ref().ok_or_else(|| missing("futures"))?;
    let weights = block
        .periods
        .iter()
        .map(|p| period_weights(grid.points(), p))
        .collect::<Result<Vec<_>, _>>()?;
    require_admissible(&spec)?;
    let moment = |p: &PolyRep| -> Result<f64, CliError> {
        let steps = cfg
            .solver
            .steps
            .unwrap_or_else(|| moments::auto_steps(&spec, p, cfg.horizon));
        Ok(moments::moment_with(&spec, p, &initial, cfg.horizon, steps)?)
    };
    let mut rows = Vec::with_capacity(weights.len());
    for (k, (w, period)) in weights.iter().zip(&block.periods).enumerate() {
        let mean = moment(&PolyRep::linear(w))?;
        let second = moment(&PolyRep::power(w, 2))?;
        rows.push(FuturesRow {
            period: k + 1,
            tau1: period.tau1,
            tau2: period.tau2,
            mean,
            std: (second - mean * mean).max(0.0).sqrt(),
            p05: None,
            p50: None,
            p95: None,
            mc_mean: None,
            mc_se: None,
        });
    }
    if block.bands {
        add_bands(cfg, &spec, &initial, &weights, &mut rows)?;
    }
    Ok(rows)
}

fn add_bands(
    cfg: &RunConfig,
    spec: &OperatorSpec,
    initial: &MeasureVec,
    weights: &[Vec<f64>],
    rows: &mut [FuturesRow],
) -> Result<(), CliError> {
    let steps = cfg.solver.steps.unwrap_or(DEFAULT_SIM_STEPS);
    let paths = cfg.solver.paths.unwrap_or(DEFAULT_PATHS);
    if paths == 0 {
        return Ok(());
    }
    let ens = simulate_with(
        spec,
        initial,
        cfg.horizon,
        steps,
        paths,
        cfg.seed,
        &SimOptions { record_stride: 0 },
    )?;
    let dot = |w: &[f64], c: &[f64]| w.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
    for (row, w) in rows.iter_mut().zip(weights) {
        let mut sample: Vec<f64> = (0..paths).map(|p| dot(w, ens.terminal(p))).collect();
        sample.sort_by(f64::total_cmp);
        let (mean, se) = estimate_fn(&ens, |c| dot(w, c));
        row.p05 = Some(quantile(&sample, 0.05));
        row.p50 = Some(quantile(&sample, 0.50));
        row.p95 = Some(quantile(&sample, 0.95));
        row.mc_mean = Some(mean);
        row.mc_se = Some(se);
    }
    Ok(())
}

pub fn price_futures(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let rows = futures_rows(cfg)?;
    let stdout = rows
        .iter()
        .map(|r| format!("period {} [{}, {}]: mean {} std {}\n", r.period, r.tau1, r.tau2, r.mean, r.std))
        .collect();
    Ok(Outcome {
        files: vec![("futures.csv".into(), csv_bytes(&rows)?)],
        stdout,
        failed: false,
    })
}

#[derive(Debug, Serialize)]
struct ProbeRow {
    function: usize,
    value: f64,
    generator_value: f64,
    projected_gradient: f64,
    converged: bool,
    first_order_ok: bool,
    second_order_ok: bool,
    generator_ok: bool,
    maximizer: String,
}

pub fn probe(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Resolved { spec, .. } = cfg.resolve()?;
    let block = cfg.probe.as_ref().ok_or_else(|| missing("probe"))?;
    let defaults = ProbeOptions::default();
    let opts = ProbeOptions {
        restarts: block.restarts.unwrap_or(defaults.restarts),
        seed: cfg.seed,
        ..defaults
    };
    let functions = probe_functions(spec.dim(), block.inner, block.functions, cfg.seed);
    let mut rows = Vec::with_capacity(functions.len());
    let mut violations = 0;
    for (k, f) in functions.iter().enumerate() {
        let r = pmp_probe_with(&spec, f, &opts)?;
        if !r.passed() {
            violations += 1;
        }
        let maximizer: Vec<String> = r.maximizer.iter().map(f64::to_string).collect();
        rows.push(ProbeRow {
            function: k + 1,
            value: r.value,
            generator_value: r.generator_value,
            projected_gradient: r.projected_gradient,
            converged: r.converged,
            first_order_ok: r.first_order_ok,
            second_order_ok: r.second_order_ok,
            generator_ok: r.generator_ok,
            maximizer: maximizer.join(";"),
        });
    }
    Ok(Outcome {
        files: vec![("probe.csv".into(), csv_bytes(&rows)?)],
        stdout: format!("{} functions probed, {violations} violations\n", rows.len()),
        failed: violations > 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
        assert!((quantile(&s, 0.05) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn stride_choice() {
        assert_eq!(default_stride(1000), 10);
        assert_eq!(default_stride(50), 1);
        assert_eq!(default_stride(101), 101);
    }

    #[test]
    fn period_weight_rules() {
        let pts = [0.0, 0.5, 1.0, 1.5];
        let p = |tau1, tau2, weights| DeliveryPeriod { tau1, tau2, weights };
        assert_eq!(period_weights(&pts, &p(0.4, 1.1, None)).unwrap(), vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(
            period_weights(&pts, &p(1.0, 1.5, Some(vec![0.25, 0.75]))).unwrap(),
            vec![0.0, 0.0, 0.25, 0.75]
        );
        assert!(matches!(period_weights(&pts, &p(0.6, 0.9, None)), Err(CliError::Domain(_))));
        assert!(matches!(period_weights(&pts, &p(1.0, 0.5, None)), Err(CliError::Schema(_))));
        assert!(matches!(
            period_weights(&pts, &p(0.0, 0.5, Some(vec![1.0]))),
            Err(CliError::Schema(_))
        ));
    }
}
