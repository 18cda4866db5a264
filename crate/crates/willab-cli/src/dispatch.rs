//! Command pipelines: each subcommand builds its scenario objects, runs the
//! corresponding module pipeline, and writes CSV / JSON-lines / snapshot
//! outputs plus a run report to the output directory.

use crate::config::{ConfigError, RawConfig};
use crate::report::{self, RunReport};
use crate::scenario::{self, Scenario};
use crate::snapshot::{self, Snapshot};
use serde_json::json;
use std::path::Path;
use std::time::Instant;
use willab_core::chart::{self, GaussChart, HeightField};
use willab_core::exponents;
use willab_core::flow::{self, FlowTrace};
use willab_core::geometry::{build_geometry, willmore_energy, willmore_gradient};
use willab_core::linop;
use willab_core::lojasiewicz::{self, zoo, AnalyticFunctional, Diffeo};
use willab_core::Real;

/// Failure classes map to distinct process exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(Vec<ConfigError>),
    Reference(willab_core::Error),
    Runtime(willab_core::Error),
    Io(std::io::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 3,
            Self::Reference(_) => 4,
            Self::Runtime(_) => 5,
            Self::Io(_) => 6,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Config(errors) => {
                let mut out = String::from("configuration errors:\n");
                for e in errors {
                    out.push_str(&format!("  {e}\n"));
                }
                out
            }
            Self::Reference(e) => format!("reference/chart error: {e}"),
            Self::Runtime(e) => format!("runtime error: {e}"),
            Self::Io(e) => format!("io error: {e}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn classify(e: willab_core::Error) -> Failure {
    use willab_core::Error::*;
    match e {
        ReferenceNotFreeBoundary { .. }
        | CollarTooWide { .. }
        | ChartPerturbationTooLarge { .. }
        | DegenerateMetric { .. }
        | PoleInconsistency { .. }
        | InvalidParameter(_) => Failure::Reference(e),
        other => Failure::Runtime(other),
    }
}

fn chart_hash(chart: &GaussChart<Real>) -> u64 {
    let grid = chart.grid();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(grid.n_s as u64).to_le_bytes());
    bytes.extend_from_slice(&(grid.n_phi as u64).to_le_bytes());
    bytes.extend_from_slice(&chart.alpha0.to_le_bytes());
    bytes.extend_from_slice(&chart.r_bar.to_le_bytes());
    snapshot::fnv1a(&bytes)
}

/// Seed requirements: stochastic pipelines refuse to run unseeded.
fn require_seed(value: Option<u64>, field: &str) -> Result<u64, Failure> {
    value.ok_or_else(|| {
        Failure::Config(vec![ConfigError {
            line: 0,
            field: field.into(),
            message: "a seed is mandatory for stochastic operations".into(),
        }])
    })
}

pub struct Outcome {
    pub report: RunReport,
}

fn finish(
    out_dir: &Path,
    command: &str,
    hash: &str,
    started: Instant,
    status: &str,
    payload: serde_json::Value,
) -> Result<Outcome, Failure> {
    let report = RunReport {
        command: command.to_string(),
        config_hash: hash.to_string(),
        artifact_version: env!("CARGO_PKG_VERSION"),
        schema_version: report::JSONL_SCHEMA_VERSION,
        status: status.to_string(),
        wall_ms: started.elapsed().as_millis(),
        payload,
    };
    report::write_report(out_dir, &report)?;
    Ok(Outcome { report })
}

/// `geom check`: curvature/energy oracle deltas and reference residuals.
pub fn geom_check(raw: &RawConfig, out_dir: &Path) -> Result<Outcome, Failure> {
    let started = Instant::now();
    let hash = report::config_hash(&raw.canonical);
    let s = scenario::build_scenario(raw).map_err(Failure::Config)?;
    let geom = build_geometry(&s.reference).map_err(classify)?;
    let energy = willmore_energy(&geom);
    let grad = willmore_gradient(&geom);
    let grad_sup = grad.data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let grad_l2 = geom.l2_norm(&grad);

    // oracle deltas for the analytic references
    let kind = raw
        .sections
        .get("reference")
        .and_then(|s| s.get("kind"))
        .map(|(v, _)| v.clone())
        .unwrap_or_else(|| "hemisphere".into());
    let radius = raw
        .sections
        .get("reference")
        .and_then(|s| s.get("radius"))
        .and_then(|(v, _)| v.parse::<f64>().ok())
        .unwrap_or(1.0);
    let (h_oracle, w_oracle) = match kind.as_str() {
        "hemisphere" => (Some(2.0 / radius), Some(2.0 * std::f64::consts::PI)),
        "equatorial_disk" => (Some(0.0), Some(0.0)),
        "critical_catenoid" => (Some(0.0), Some(0.0)),
        _ => (None, None),
    };
    let h_delta = h_oracle.map(|h0| {
        geom.h.data.iter().map(|&h| (h - h0).abs()).fold(0.0, f64::max)
    });
    let w_delta = w_oracle.map(|w0| (energy - w0).abs());

    // chart build summary (may legitimately fail, e.g. tilted caps)
    let chart_summary = match scenario::build_chart(&s) {
        Ok(chart) => json!({
            "built": true,
            "alpha0": chart.alpha0,
            "r_bar": chart.r_bar,
            "c1_bound": chart.c1_bound,
        }),
        Err(e) => json!({ "built": false, "error": e.to_string() }),
    };

    let payload = json!({
        "n_s": s.grid.n_s,
        "n_phi": s.grid.n_phi,
        "area": geom.area(),
        "energy": energy,
        "h_oracle_delta_sup": h_delta,
        "energy_oracle_delta": w_delta,
        "willmore_gradient_sup": grad_sup,
        "willmore_gradient_l2": grad_l2,
        "chart": chart_summary,
    });
    finish(out_dir, "geom check", &hash, started, "ok", payload)
}

fn run_flow_once(
    s: &Scenario,
    chart: &GaussChart<Real>,
    w0: HeightField<Real>,
) -> Result<(HeightField<Real>, FlowTrace<Real>), Failure> {
    let w0 = chart::project_to_constraint(chart, &w0).map_err(classify)?;
    let trace = flow::run_flow(chart, w0.clone(), &s.flow).map_err(classify)?;
    Ok((w0, trace))
}

/// `flow run`: integrate the configured perturbation and emit the time
/// series, snapshots, and the dissipation report.
pub fn flow_run(raw: &RawConfig, out_dir: &Path) -> Result<Outcome, Failure> {
    let started = Instant::now();
    let hash = report::config_hash(&raw.canonical);
    let s = scenario::build_scenario(raw).map_err(Failure::Config)?;
    if s.perturbation.kind == "band_limited" {
        require_seed(s.perturbation.seed, "perturbation.seed")?;
    }
    let chart = scenario::build_chart(&s).map_err(classify)?;
    let w0 = scenario::build_perturbation(&chart, &s.perturbation).map_err(classify)?;
    let (_, trace) = run_flow_once(&s, &chart, w0)?;

    report::write_atomic(&out_dir.join("trace.csv"), report::trace_csv(&trace).as_bytes())?;
    let ch = chart_hash(&chart);
    for (k, (t, values)) in trace.snapshots.iter().enumerate() {
        let snap = Snapshot {
            grid: chart.grid().clone(),
            chart_hash: ch,
            t: *t,
            values: values.data.clone(),
        };
        let mut buf = Vec::new();
        snapshot::write_snapshot(&mut buf, &snap)
            .map_err(|e| Failure::Io(std::io::Error::other(e.to_string())))?;
        report::write_atomic(&out_dir.join(format!("snapshot_{k:04}.snap")), &buf)?;
    }
    let dissipation = flow::energy_dissipation_check(&trace, 0.2).ok();
    let f = &trace.final_state;
    let payload = json!({
        "termination": format!("{:?}", trace.termination),
        "steps": f.step_index,
        "t_final": f.t,
        "energy_final": f.energy,
        "grad_norm_final": f.grad_norm,
        "residuals_final": [f.boundary_residual.0, f.boundary_residual.1],
        "dissipation_check": dissipation.map(|d| json!({
            "max_rel_deviation": d.max_rel_deviation,
            "samples_used": d.samples_used,
            "stationary": d.stationary,
        })),
        "samples": trace.samples.len(),
        "snapshots": trace.snapshots.len(),
        "chart": { "alpha0": chart.alpha0, "r_bar": chart.r_bar, "hash": format!("{ch:016x}") },
    });
    finish(out_dir, "flow run", &hash, started, &format!("{:?}", trace.termination), payload)
}

/// `flow stability`: amplitude ladder and the stability exponent.
pub fn flow_stability(raw: &RawConfig, out_dir: &Path) -> Result<Outcome, Failure> {
    let started = Instant::now();
    let hash = report::config_hash(&raw.canonical);
    let s = scenario::build_scenario(raw).map_err(Failure::Config)?;
    let chart = scenario::build_chart(&s).map_err(classify)?;

    // reference energy as the critical level
    let e_star = flow::evaluate_state(&chart, &HeightField::zero(&chart))
        .map_err(classify)?
        .energy;

    let mut runs = Vec::new();
    for &amp in &s.analysis.ladder {
        let p = scenario::Perturbation { amplitude: amp, ..clone_perturbation(&s.perturbation) };
        let w0 = scenario::build_perturbation(&chart, &p).map_err(classify)?;
        let (w0, trace) = run_flow_once(&s, &chart, w0)?;
        runs.push((w0, trace));
    }
    let rep = exponents::stability_exponent(&chart, &runs, e_star).map_err(classify)?;

    report::write_atomic(
        &out_dir.join("stability_pairs.csv"),
        report::pairs_csv(("energy_deficit", "c4_distance"), &rep.pairs).as_bytes(),
    )?;
    let mut jsonl = report::jsonl_record("stability_fit", &rep);
    for (k, (_, trace)) in runs.iter().enumerate() {
        let f = &trace.final_state;
        jsonl.push_str(&report::jsonl_record(
            "ladder_run",
            &json!({
                "index": k,
                "amplitude": s.analysis.ladder[k],
                "termination": format!("{:?}", trace.termination),
                "energy_final": f.energy,
                "grad_norm_final": f.grad_norm,
            }),
        ));
    }
    report::write_atomic(&out_dir.join("stability.jsonl"), jsonl.as_bytes())?;
    let payload = json!({
        "gamma": rep.gamma,
        "c": rep.c,
        "monotone": rep.monotone,
        "pairs": rep.pairs,
        "caveat": rep.caveat,
        "e_star": e_star,
    });
    finish(out_dir, "flow stability", &hash, started, "ok", payload)
}

fn clone_perturbation(p: &scenario::Perturbation) -> scenario::Perturbation {
    scenario::Perturbation {
        kind: p.kind.clone(),
        amplitude: p.amplitude,
        center: p.center,
        width: p.width,
        band: p.band,
        seed: p.seed,
    }
}

/// `ls fit`: both Willmore exponent estimators plus their consistency gap.
pub fn ls_fit(raw: &RawConfig, out_dir: &Path) -> Result<Outcome, Failure> {
    let started = Instant::now();
    let hash = report::config_hash(&raw.canonical);
    let s = scenario::build_scenario(raw).map_err(Failure::Config)?;
    require_seed(s.analysis.seed, "analysis.seed")?;
    let chart = scenario::build_chart(&s).map_err(classify)?;

    // flow estimator: run the configured perturbation to convergence and
    // fit along the trace with the terminal energy as the critical level
    let w0 = scenario::build_perturbation(&chart, &s.perturbation).map_err(classify)?;
    let (_, trace) = run_flow_once(&s, &chart, w0)?;
    let e_star = trace.final_state.energy;
    let flow_fit =
        exponents::fit_theta_along_flow(&trace, e_star, s.analysis.tail_skip).map_err(classify)?;

    // perturbation estimator
    let plan = scenario::perturbation_plan(&s);
    let perturb_fit = exponents::fit_theta_by_perturbation(&chart, &plan).map_err(classify)?;

    report::write_atomic(
        &out_dir.join("flow_pairs.csv"),
        report::pairs_csv(("energy_gap", "willmore_grad_l2"), &flow_fit.pairs).as_bytes(),
    )?;
    report::write_atomic(
        &out_dir.join("perturbation_pairs.csv"),
        report::pairs_csv(("energy_gap", "willmore_grad_l2"), &perturb_fit.pairs).as_bytes(),
    )?;
    let mut jsonl = report::jsonl_record(
        "theta_flow",
        &json!({"theta": flow_fit.theta, "c": flow_fit.c, "violation_fraction": flow_fit.violation_fraction}),
    );
    jsonl.push_str(&report::jsonl_record(
        "theta_perturbation",
        &json!({"theta": perturb_fit.theta, "c": perturb_fit.c, "violation_fraction": perturb_fit.violation_fraction}),
    ));
    report::write_atomic(&out_dir.join("fits.jsonl"), jsonl.as_bytes())?;

    let payload = json!({
        "theta_flow": flow_fit.theta,
        "theta_perturbation": perturb_fit.theta,
        "difference": (flow_fit.theta - perturb_fit.theta).abs(),
        "violations_flow": flow_fit.violation_fraction,
        "violations_perturbation": perturb_fit.violation_fraction,
        "e_star": e_star,
        "flow_termination": format!("{:?}", trace.termination),
    });
    finish(out_dir, "ls fit", &hash, started, "ok", payload)
}

/// `ls abstract`: finite-dimensional laboratory.
pub fn ls_abstract(raw: &RawConfig, out_dir: &Path) -> Result<Outcome, Failure> {
    let started = Instant::now();
    let hash = report::config_hash(&raw.canonical);
    let cfg = scenario::build_ls_abstract(raw).map_err(Failure::Config)?;
    require_seed(cfg.seed, "ls_abstract.seed")?;

    let f: AnalyticFunctional<Real> = match cfg.functional.as_str() {
        "quadratic" => zoo::quadratic(nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])),
        "quartic_curved" => zoo::quartic_curved(),
        "polynomial" => zoo::bivariate_polynomial(cfg.coeffs.clone()),
        _ => zoo::quartic_flat(),
    };
    let v0 = vec![0.0; f.dim];
    let fit = lojasiewicz::estimate_theta(&f, &v0, &cfg.plan).map_err(classify)?;
    let hypotheses = lojasiewicz::check_hypotheses(&f, &v0, 0.3, cfg.plan.seed).map_err(classify)?;
    let reduction = lojasiewicz::kernel_split(&f, &v0, 1e-6).map(|r| r.x_basis.ncols());

    let mut jsonl = report::jsonl_record(
        "theta_fit",
        &json!({"theta": fit.theta, "c": fit.c, "violation_fraction": fit.violation_fraction}),
    );
    jsonl.push_str(&report::jsonl_record("hypotheses", &hypotheses));

    let diffeo_delta = match cfg.diffeo.as_str() {
        "none" => None,
        name => {
            let diffeo: Diffeo<Real> = match name {
                "identity" => Diffeo {
                    map: Box::new(|v: &[Real]| v.to_vec()),
                    preimage_of_center: v0.clone(),
                },
                "shear" => Diffeo {
                    map: Box::new(|v: &[Real]| vec![v[0], v[1] + v[0] * v[0]]),
                    preimage_of_center: v0.clone(),
                },
                _ => {
                    let (s30, c30) = (0.5f64, 3.0f64.sqrt() / 2.0);
                    Diffeo {
                        map: Box::new(move |v: &[Real]| {
                            vec![c30 * v[0] - s30 * v[1], s30 * v[0] + c30 * v[1]]
                        }),
                        preimage_of_center: v0.clone(),
                    }
                }
            };
            let rep =
                lojasiewicz::diffeo_invariance_test(&f, &v0, &diffeo, &cfg.plan).map_err(classify)?;
            jsonl.push_str(&report::jsonl_record("diffeo", &rep));
            Some(rep.delta)
        }
    };
    report::write_atomic(&out_dir.join("fits.jsonl"), jsonl.as_bytes())?;
    report::write_atomic(
        &out_dir.join("pairs.csv"),
        report::pairs_csv(("energy_gap", "delta_norm"), &fit.pairs).as_bytes(),
    )?;
    let payload = json!({
        "functional": cfg.functional,
        "theta": fit.theta,
        "c": fit.c,
        "violation_fraction": fit.violation_fraction,
        "kernel_dim": reduction.ok(),
        "hypothesis_bound_satisfied": hypotheses.bound_satisfied,
        "diffeo": cfg.diffeo,
        "diffeo_delta": diffeo_delta,
    });
    finish(out_dir, "ls abstract", &hash, started, "ok", payload)
}

/// `linop spectrum`: linearization assembly, near-kernel, shifted-operator
/// scan, invariance-candidate residuals.
pub fn linop_spectrum(raw: &RawConfig, out_dir: &Path) -> Result<Outcome, Failure> {
    let started = Instant::now();
    let hash = report::config_hash(&raw.canonical);
    let s = scenario::build_scenario(raw).map_err(Failure::Config)?;
    let chart = scenario::build_chart(&s).map_err(classify)?;
    let lin = linop::assemble_linearization(&chart, &linop::DiffOptions::default())
        .map_err(classify)?;
    let full = linop::verify_isomorphism(&lin, None, 4).map_err(classify)?;
    let kernel_tol = full.sigma_max * s.analysis.kernel_tol_factor;
    let nk = linop::near_kernel(&lin, Some(kernel_tol)).map_err(classify)?;

    let shifts: Vec<(Real, Real)> = s
        .analysis
        .c_scan
        .iter()
        .flat_map(|&a| s.analysis.c_scan.iter().map(move |&b| (a, b)))
        .collect();
    let scan = linop::scan_t_tilde(&chart, &lin, &shifts, None).map_err(classify)?;

    let mut residuals = Vec::new();
    for dir in chart::neutral_directions(&chart) {
        let r = linop::kernel_candidate_residual(&lin, full.sigma_max, &dir).map_err(classify)?;
        residuals.push(r);
    }

    let ch = chart_hash(&chart);
    for (k, basis) in nk.kernel_basis.iter().enumerate() {
        let snap = Snapshot {
            grid: chart.grid().clone(),
            chart_hash: ch,
            t: 0.0,
            values: basis.clone(),
        };
        let mut buf = Vec::new();
        snapshot::write_snapshot(&mut buf, &snap)
            .map_err(|e| Failure::Io(std::io::Error::other(e.to_string())))?;
        report::write_atomic(&out_dir.join(format!("kernel_{k}.snap")), &buf)?;
    }

    let mut jsonl = report::jsonl_record(
        "near_kernel",
        &json!({
            "dimension": nk.near_kernel_dim,
            "smallest": nk.smallest,
            "sigma_max": nk.sigma_max,
            "kernel_tol": nk.kernel_tol,
        }),
    );
    if let Some(((c1, c2), rep)) = &scan {
        jsonl.push_str(&report::jsonl_record(
            "t_tilde",
            &json!({
                "c1": c1, "c2": c2, "isomorphism": rep.isomorphism,
                "sigma_min": rep.smallest.first(), "sigma_max": rep.sigma_max,
            }),
        ));
    }
    jsonl.push_str(&report::jsonl_record(
        "invariance_candidates",
        &json!({ "relative_residuals": residuals }),
    ));
    report::write_atomic(&out_dir.join("spectrum.jsonl"), jsonl.as_bytes())?;

    let payload = json!({
        "near_kernel_dim": nk.near_kernel_dim,
        "smallest_singular_values": nk.smallest,
        "kernel_tol": nk.kernel_tol,
        "t_tilde": scan.map(|((c1, c2), rep)| json!({
            "c1": c1, "c2": c2, "sigma_min": rep.smallest.first().copied(),
        })),
        "invariance_residuals": residuals,
        "kernel_snapshots": nk.kernel_basis.len(),
    });
    finish(out_dir, "linop spectrum", &hash, started, "ok", payload)
}
