//! Building core objects (support, reference, chart, perturbation, flow
//! configuration) from a parsed scenario configuration.

use crate::config::{ConfigError, RawConfig, Reader};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use willab_core::chart::{
    build_gauss_chart, try_height_field, ChartOptions, GaussChart, HeightField,
};
use willab_core::exponents::{random_band_limited, PerturbationPlan};
use willab_core::flow::{FlowConfig, Scheme};
use willab_core::geometry::{samplers, Immersion};
use willab_core::grid::{Field, ParamGrid, Topology};
use willab_core::lojasiewicz::SamplingPlan;
use willab_core::support::SupportSurface;
use willab_core::Real;

/// Fully resolved scenario pieces.
pub struct Scenario {
    pub grid: ParamGrid,
    pub support: SupportSurface<Real>,
    pub reference: Immersion<Real>,
    pub chart_options: ChartOptions<Real>,
    pub flow: FlowConfig<Real>,
    pub perturbation: Perturbation,
    pub analysis: Analysis,
}

pub struct Perturbation {
    pub kind: String,
    pub amplitude: Real,
    pub center: Real,
    pub width: Real,
    pub band: usize,
    pub seed: Option<u64>,
}

pub struct Analysis {
    pub shells: usize,
    pub samples_per_shell: usize,
    pub amplitude_max: Real,
    pub amplitude_min: Real,
    pub band: usize,
    pub kernel_tol_factor: Real,
    pub c_scan: Vec<Real>,
    pub tail_skip: f64,
    pub ladder: Vec<Real>,
    pub seed: Option<u64>,
    pub spectrum_n_phi: usize,
}

pub struct LsAbstract {
    pub functional: String,
    pub coeffs: Vec<(u32, u32, Real)>,
    pub plan: SamplingPlan<Real>,
    pub diffeo: String,
    pub seed: Option<u64>,
}

pub fn build_scenario(raw: &RawConfig) -> Result<Scenario, Vec<ConfigError>> {
    let mut r = Reader::new(raw);

    let topology = r.string("grid", "topology", "disk");
    r.reject_unknown_value("grid", "topology", &topology, &["disk", "annulus"]);
    let n_s = r.usize("grid", "n_s", 64);
    let axisymmetric = r.bool("grid", "axisymmetric", true);
    let n_phi = r.usize("grid", "n_phi", if axisymmetric { 1 } else { 16 });

    let kind = r.string("reference", "kind", "hemisphere");
    r.reject_unknown_value(
        "reference",
        "kind",
        &kind,
        &["hemisphere", "equatorial_disk", "spherical_cap", "catenoid_band", "critical_catenoid"],
    );

    let variant = r.string("support", "variant", "plane");
    r.reject_unknown_value("support", "variant", &variant, &["plane", "sphere", "ellipsoid"]);
    let support = match variant.as_str() {
        "sphere" => {
            let c = r.vec3("support", "center", [0.0, 0.0, 0.0]);
            let radius = r.f64("support", "radius", 1.0);
            SupportSurface::sphere(Vector3::new(c[0], c[1], c[2]), radius)
        }
        "ellipsoid" => {
            let a = r.vec3("support", "semi_axes", [1.0, 1.0, 1.0]);
            let tube = r.f64("support", "tubular_radius", 0.2);
            SupportSurface::ellipsoid(Vector3::new(a[0], a[1], a[2]), tube)
        }
        _ => {
            let p = r.vec3("support", "point", [0.0, 0.0, 0.0]);
            let n = r.vec3("support", "normal", [0.0, 0.0, 1.0]);
            SupportSurface::plane(Vector3::new(p[0], p[1], p[2]), Vector3::new(n[0], n[1], n[2]))
        }
    };

    let grid_topology = match (topology.as_str(), kind.as_str()) {
        ("annulus", _) | (_, "catenoid_band") | (_, "critical_catenoid") => Topology::Annulus,
        _ => Topology::Disk,
    };
    let grid = match ParamGrid::new(grid_topology, n_s, n_phi, axisymmetric) {
        Ok(g) => g,
        Err(e) => {
            r.errors.push(ConfigError {
                line: 0,
                field: "grid".into(),
                message: e.to_string(),
            });
            ParamGrid::new(grid_topology, 64, 1, true).unwrap()
        }
    };

    let radius = r.f64("reference", "radius", 1.0);
    let sampler = match kind.as_str() {
        "equatorial_disk" => samplers::equatorial_disk(radius),
        "spherical_cap" => {
            let angle = r.f64("reference", "angle_deg", 60.0).to_radians();
            samplers::spherical_cap(radius, angle)
        }
        "catenoid_band" => {
            let c = r.f64("reference", "c", 0.5);
            let u0 = r.f64("reference", "u0", -1.0);
            let u1 = r.f64("reference", "u1", 1.0);
            samplers::catenoid_band(c, u0, u1)
        }
        "critical_catenoid" => samplers::critical_catenoid(),
        _ => samplers::hemisphere(radius),
    };
    let reference = Immersion::from_sampler(grid.clone(), sampler);

    let chart_options = ChartOptions {
        alpha0: r.f64_opt("chart", "alpha0"),
        r_bar: r.f64_opt("chart", "r_bar"),
        tol_fbc: r.f64("chart", "tol_fbc", 1e-6),
        tol_constraint: r.f64("chart", "tol_constraint", 1e-8),
    };

    let scheme = r.string("flow", "scheme", "semi_implicit");
    r.reject_unknown_value("flow", "scheme", &scheme, &["semi_implicit", "fully_explicit"]);
    let flow = FlowConfig {
        dt: r.f64("flow", "dt", 1e-6),
        dt_max: r.f64("flow", "dt_max", 2e-2),
        t_end: r.f64("flow", "t_end", 2000.0),
        scheme: if scheme == "fully_explicit" { Scheme::FullyExplicit } else { Scheme::SemiImplicit },
        grad_tol: r.f64("flow", "grad_tol", 1e-6),
        monitor_interval: r.usize("flow", "monitor_interval", 1).max(1),
        snapshot_interval: r.usize("flow", "snapshot_interval", 0),
        max_steps: r.usize("flow", "max_steps", 400_000),
        linear_tol: r.f64("flow", "linear_tol", 1e-9),
        linear_max_iter: r.usize("flow", "linear_max_iter", 1),
        neutral_correction: r.bool("flow", "neutral_correction", true),
    };

    let pkind = r.string("perturbation", "type", "radial_bump");
    r.reject_unknown_value("perturbation", "type", &pkind, &["radial_bump", "band_limited", "none"]);
    let perturbation = Perturbation {
        kind: pkind,
        amplitude: r.f64("perturbation", "amplitude", 0.01),
        center: r.f64("perturbation", "center", 0.35),
        width: r.f64("perturbation", "width", 0.3),
        band: r.usize("perturbation", "band", 6),
        seed: r.u64_opt("perturbation", "seed"),
    };

    let analysis = Analysis {
        shells: r.usize("analysis", "shells", 7),
        samples_per_shell: r.usize("analysis", "samples_per_shell", 24),
        amplitude_max: r.f64("analysis", "amplitude_max", 1e-3),
        amplitude_min: r.f64("analysis", "amplitude_min", 1e-5),
        band: r.usize("analysis", "band", 6),
        kernel_tol_factor: r.f64("analysis", "kernel_tol_factor", 1e-8),
        c_scan: r.f64_list("analysis", "c_scan", &[1.0, 4.0, 16.0, 64.0, 256.0]),
        tail_skip: r.f64("analysis", "tail_skip", 0.1),
        ladder: r.f64_list("analysis", "ladder", &[0.002, 0.005, 0.01, 0.02, 0.04]),
        seed: r.u64_opt("analysis", "seed"),
        spectrum_n_phi: r.usize("analysis", "spectrum_n_phi", 16),
    };

    if r.errors.is_empty() {
        Ok(Scenario {
            grid,
            support,
            reference,
            chart_options,
            flow,
            perturbation,
            analysis,
        })
    } else {
        Err(r.errors)
    }
}

pub fn build_ls_abstract(raw: &RawConfig) -> Result<LsAbstract, Vec<ConfigError>> {
    let mut r = Reader::new(raw);
    let functional = r.string("ls_abstract", "functional", "quartic_flat");
    r.reject_unknown_value(
        "ls_abstract",
        "functional",
        &functional,
        &["quadratic", "quartic_flat", "quartic_curved", "polynomial"],
    );
    let mut coeffs = Vec::new();
    if functional == "polynomial" {
        let text = r.require_string("ls_abstract", "coeffs");
        for term in text.split(',') {
            let parts: Vec<&str> = term.split_whitespace().collect();
            if parts.len() != 3 {
                r.errors.push(ConfigError {
                    line: 0,
                    field: "ls_abstract.coeffs".into(),
                    message: format!("term `{term}` is not `i j c`"),
                });
                continue;
            }
            match (parts[0].parse::<u32>(), parts[1].parse::<u32>(), parts[2].parse::<f64>()) {
                (Ok(i), Ok(j), Ok(c)) => coeffs.push((i, j, c)),
                _ => r.errors.push(ConfigError {
                    line: 0,
                    field: "ls_abstract.coeffs".into(),
                    message: format!("term `{term}` has malformed numbers"),
                }),
            }
        }
    }
    let diffeo = r.string("ls_abstract", "diffeo", "none");
    r.reject_unknown_value("ls_abstract", "diffeo", &diffeo, &["none", "identity", "rotation30", "shear"]);
    let seed = r.u64_opt("ls_abstract", "seed");
    let plan = SamplingPlan {
        radius_max: r.f64("ls_abstract", "radius_max", 1e-1),
        radius_min: r.f64("ls_abstract", "radius_min", 1e-6),
        shells: r.usize("ls_abstract", "shells", 11),
        samples_per_shell: r.usize("ls_abstract", "samples_per_shell", 48),
        seed: seed.unwrap_or(0),
    };
    if r.errors.is_empty() {
        Ok(LsAbstract { functional, coeffs, plan, diffeo, seed })
    } else {
        Err(r.errors)
    }
}

/// Construct the configured initial perturbation as a height field inside
/// the chart.
pub fn build_perturbation(
    chart: &GaussChart<Real>,
    p: &Perturbation,
) -> willab_core::error::Result<HeightField<Real>> {
    let grid = chart.grid().clone();
    let values = match p.kind.as_str() {
        "none" => Field::constant(&grid, 0.0),
        "band_limited" => {
            let seed = p.seed.unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_band_limited(chart, p.band, &mut rng).map(|v| v * p.amplitude)
        }
        _ => Field::from_fn(&grid, |i, _| {
            let s = grid.s::<Real>(i);
            let t = (s - p.center) / p.width;
            if t.abs() < 1.0 {
                p.amplitude * (1.0 - t * t).powi(4)
            } else {
                0.0
            }
        }),
    };
    try_height_field(chart, values)
}

/// Build the chart for a scenario.
pub fn build_chart(s: &Scenario) -> willab_core::error::Result<GaussChart<Real>> {
    build_gauss_chart(&s.reference, &s.support, &s.chart_options)
}

/// Perturbation plan for the exponent sampler.
pub fn perturbation_plan(s: &Scenario) -> PerturbationPlan<Real> {
    PerturbationPlan {
        amplitude_max: s.analysis.amplitude_max,
        amplitude_min: s.analysis.amplitude_min,
        shells: s.analysis.shells,
        samples_per_shell: s.analysis.samples_per_shell,
        band: s.analysis.band,
        seed: s.analysis.seed.unwrap_or(0),
    }
}
