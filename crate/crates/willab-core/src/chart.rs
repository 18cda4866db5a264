//! Generalized Gaussian coordinates around a reference immersion that meets
//! the support surface orthogonally.
//!
//! The chart blends the normal-line parametrization of the reference with a
//! support-adapted family inside a boundary collar,
//!
//! ```text
//! Phi(x, r) = (1 - zeta(d0(x))) (fbar(x) + r nu(x))
//!           + zeta(d0(x)) [ Pi(fbar + r nu) + d(fbar(x)) N(Pi(fbar + r nu)) ]
//! ```
//!
//! so that height fields `w` with `|w| < r_bar` parametrize nearby
//! immersions `f_w = Phi(., w(.))` whose boundary stays on the support.
//! The module also provides the pairing `<xi, nu_{f_w}>`, the scaled
//! gradient density `deltaE`, the boundary direction field `mu` (the
//! support normal pulled back through the chart differential), the two
//! reformulated boundary residuals, and a Newton projection onto the
//! discrete constraint set.

use crate::error::{Error, Result};
use crate::geometry::{build_geometry, willmore_gradient, GeometryCache, Immersion};
use crate::grid::{Field, ParamGrid, Parity};
use crate::support::SupportSurface;
use crate::{lit, Scalar};
use nalgebra::{Matrix3, Vector3};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

type V3<T> = Vector3<T>;

/// Quintic smoothstep profile: 1 below `a`, 0 above `2a`, nonincreasing,
/// `|zeta'| <= 1.875/a`.
pub fn zeta_profile<T: Scalar>(d: T, alpha0: T) -> T {
    if d <= alpha0 {
        T::one()
    } else if d >= alpha0 * lit::<T>(2.0) {
        T::zero()
    } else {
        let t = (d - alpha0) / alpha0;
        let s = t * t * t * (lit::<T>(10.0) - lit::<T>(15.0) * t + lit::<T>(6.0) * t * t);
        T::one() - s
    }
}

/// Build options for [`GaussChart`].
#[derive(Debug, Clone, Copy)]
pub struct ChartOptions<T> {
    /// Collar width; auto-chosen from the usable collar when `None`.
    pub alpha0: Option<T>,
    /// Chart half-thickness; halved from an initial guess until the sampled
    /// C1 perturbation bound holds when `None`.
    pub r_bar: Option<T>,
    /// Tolerance for accepting the reference's free boundary conditions.
    pub tol_fbc: T,
    /// Target residual for the constraint projection.
    pub tol_constraint: T,
}

impl<T: Scalar> Default for ChartOptions<T> {
    fn default() -> Self {
        Self {
            alpha0: None,
            r_bar: None,
            tol_fbc: lit::<T>(1e-6),
            tol_constraint: lit::<T>(1e-8),
        }
    }
}

/// Scalar height field over the grid with cached discrete norms.
#[derive(Debug, Clone)]
pub struct HeightField<T: Scalar> {
    pub values: Field<T>,
    pub sup_norm: T,
    pub c1_norm: T,
    pub w42_norm: T,
}

impl<T: Scalar> HeightField<T> {
    /// Wrap a field, caching sup/C1/W^{4,2} surrogate norms measured
    /// against the chart's reference metric.
    pub fn new(chart: &GaussChart<T>, values: Field<T>) -> Self {
        let grid = &chart.ref_geom.grid;
        let sup = values.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let ds = grid.ds::<T, T>(&values, Parity::Even);
        let dp = grid.dphi::<T, T>(&values);
        let mut c1 = sup;
        for k in 0..grid.len() {
            let gi = [
                chart.ref_geom.ginv[0].data[k],
                chart.ref_geom.ginv[1].data[k],
                chart.ref_geom.ginv[2].data[k],
            ];
            let grad2 = gi[0] * ds.data[k] * ds.data[k]
                + lit::<T>(2.0) * gi[1] * ds.data[k] * dp.data[k]
                + gi[2] * dp.data[k] * dp.data[k];
            c1 = c1.max(grad2.max(T::zero()).sqrt());
        }
        // W^{4,2} surrogate: L2 norms of parametric derivatives up to order 4
        let mut w42 = chart.ref_geom.l2_norm(&values);
        w42 = w42 * w42;
        let mut layer = vec![values.clone()];
        for _ in 0..4 {
            let mut next = Vec::new();
            for f in &layer {
                next.push(grid.ds::<T, T>(f, Parity::Even));
                if grid.n_phi > 1 {
                    next.push(grid.dphi::<T, T>(f));
                }
            }
            for f in &next {
                let n = chart.ref_geom.l2_norm(f);
                w42 = w42 + n * n;
            }
            layer = next;
        }
        Self { values, sup_norm: sup, c1_norm: c1, w42_norm: w42.sqrt() }
    }

    pub fn zero(chart: &GaussChart<T>) -> Self {
        Self::new(chart, Field::constant(&chart.ref_geom.grid, T::zero()))
    }
}

/// Boundary direction field `mu = (dPhi)^{-1} N(Phi)` at one boundary node:
/// tangential components and the radial component.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryDirection<T> {
    pub mu_tangent: (T, T),
    pub mu_radial: T,
}

/// Residuals of the two reformulated boundary conditions along one edge.
#[derive(Debug, Clone)]
pub struct BoundaryResiduals<T> {
    /// First-order residual per boundary node.
    pub b1: Vec<T>,
    /// Third-order (natural condition) residual per boundary node.
    pub b2: Vec<T>,
}

impl<T: Scalar> BoundaryResiduals<T> {
    pub fn sup(&self) -> T {
        let m1 = self.b1.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let m2 = self.b2.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        m1.max(m2)
    }
}

/// Generalized Gaussian coordinates around a reference immersion.
pub struct GaussChart<T: Scalar> {
    pub ref_imm: Immersion<T>,
    pub ref_geom: GeometryCache<T>,
    pub support: SupportSurface<T>,
    pub alpha0: T,
    pub r_bar: T,
    /// Calibrated C1 bound defining the working set of height fields.
    pub c1_bound: T,
    pub tol_constraint: T,
    /// Reference normal field (exact when the immersion has a sampler).
    nu_ref: Field<V3<T>>,
    /// Intrinsic distance to the boundary under the reference metric.
    pub collar_distance: Field<T>,
    /// Per-edge intrinsic distances (disk: one entry; annulus: two).
    edge_distance: Vec<Field<T>>,
    /// Cutoff `zeta(d0(x))` per node.
    pub zeta: Field<T>,
    /// Signed distance of the reference per node (meaningful on the collar).
    d_ref: Field<T>,
}

impl<T: Scalar> GaussChart<T> {
    pub fn grid(&self) -> &ParamGrid {
        &self.ref_geom.grid
    }

    /// Chart point `Phi(x_node, r)`.
    pub fn phi(&self, i: usize, j: usize, r: T) -> Result<V3<T>> {
        let z = self.zeta.at(i, j);
        let base = self.ref_imm.positions.at(i, j);
        let nu = self.nu_ref.at(i, j);
        let q = base + nu * r;
        if z == T::zero() {
            return Ok(q);
        }
        let p = self.support.project(&q)?;
        let n = self.support.normal_on_surface(&p);
        let phi_s = p + n * self.d_ref.at(i, j);
        Ok(q * (T::one() - z) + phi_s * z)
    }

    /// Chart velocity `xi(x_node, r) = d_r Phi`.
    pub fn xi(&self, i: usize, j: usize, r: T) -> Result<V3<T>> {
        let z = self.zeta.at(i, j);
        let nu = self.nu_ref.at(i, j);
        if z == T::zero() {
            return Ok(nu);
        }
        let q = self.ref_imm.positions.at(i, j) + nu * r;
        let dpi = self.support.proj_differential(&q)?;
        let hess = self.support.hess_distance(&q)?;
        let xi_s = dpi * nu + hess * nu * self.d_ref.at(i, j);
        Ok(nu * (T::one() - z) + xi_s * z)
    }

    /// Reference normal (exact if the reference has an analytic sampler).
    pub fn nu_ref(&self) -> &Field<V3<T>> {
        &self.nu_ref
    }
}

/// Intrinsic grid distances to a set of source nodes under the metric of
/// `geom` (Dijkstra over the 8-neighborhood).
fn grid_distance<T: Scalar>(geom: &GeometryCache<T>, sources: &[(usize, usize)]) -> Vec<f64> {
    #[derive(PartialEq)]
    struct Entry {
        dist: f64,
        node: usize,
    }
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> Ordering {
            other.dist.partial_cmp(&self.dist).unwrap_or(Ordering::Equal)
        }
    }

    let grid = &geom.grid;
    let (ns, np) = (grid.n_s, grid.n_phi);
    let hs = grid.h_s::<T>().to_f64().unwrap();
    let hp = if np > 1 { grid.angular_weight::<T>().to_f64().unwrap() } else { 0.0 };
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut heap = BinaryHeap::new();
    for &(i, j) in sources {
        dist[grid.idx(i, j)] = 0.0;
        heap.push(Entry { dist: 0.0, node: grid.idx(i, j) });
    }
    let metric = |k: usize| {
        (
            geom.g[0].data[k].to_f64().unwrap(),
            geom.g[1].data[k].to_f64().unwrap(),
            geom.g[2].data[k].to_f64().unwrap(),
        )
    };
    while let Some(Entry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        let (i, j) = (node / np, node % np);
        for di in [-1i64, 0, 1] {
            for dj in [-1i64, 0, 1] {
                if (di == 0 && dj == 0) || (np == 1 && dj != 0) {
                    continue;
                }
                let ni = i as i64 + di;
                if ni < 0 || ni >= ns as i64 {
                    continue;
                }
                let nj = (j as i64 + dj).rem_euclid(np as i64) as usize;
                let m = grid.idx(ni as usize, nj);
                let (ds, dp) = (di as f64 * hs, dj as f64 * hp);
                let (ga, gb) = (metric(node), metric(m));
                let gss = 0.5 * (ga.0 + gb.0);
                let gsp = 0.5 * (ga.1 + gb.1);
                let gpp = 0.5 * (ga.2 + gb.2);
                let len = (gss * ds * ds + 2.0 * gsp * ds * dp + gpp * dp * dp).max(0.0).sqrt();
                let nd = d + len;
                if nd < dist[m] {
                    dist[m] = nd;
                    heap.push(Entry { dist: nd, node: m });
                }
            }
        }
    }
    dist
}

/// Build a chart around a reference immersion satisfying the free boundary
/// conditions on the support surface.
///
/// The support's orientation sign is chosen so that the support normal
/// agrees with the ambient conormal of the reference along the boundary.
pub fn build_gauss_chart<T: Scalar>(
    reference: &Immersion<T>,
    support: &SupportSurface<T>,
    opts: &ChartOptions<T>,
) -> Result<GaussChart<T>> {
    let ref_geom = build_geometry(reference)?;
    let grid = ref_geom.grid.clone();
    let edges = grid.boundary_edges();

    // exact normals when a sampler is available
    let nu_ref = match &reference.sampler {
        Some(sampler) => {
            Field::from_fn(&grid, |i, j| sampler.normal(grid.s::<T>(i), grid.phi::<T>(j)))
        }
        None => ref_geom.nu.clone(),
    };

    // orientation: N o fbar = d fbar . eta on the boundary
    let mut support = support.clone();
    {
        let mut align = T::zero();
        for (e, edge) in edges.iter().enumerate() {
            for (j, frame) in ref_geom.frame(e).iter().enumerate() {
                let y = reference.positions.at(edge.row, j);
                let p = support.project(&y)?;
                align += support.normal_on_surface(&p).dot(&frame.eta_ambient);
            }
        }
        if align < T::zero() {
            support.flip_orientation();
        }
    }

    // free boundary condition residuals of the reference
    let dh_s = grid.ds::<T, T>(&ref_geom.h, Parity::Even);
    let dh_p = grid.dphi::<T, T>(&ref_geom.h);
    let mut res_dist = T::zero();
    let mut res_orth = T::zero();
    let mut res_natural = T::zero();
    for (e, edge) in edges.iter().enumerate() {
        for j in 0..grid.n_phi {
            let i = edge.row;
            let y = reference.positions.at(i, j);
            let d = support.signed_distance(&y)?;
            res_dist = res_dist.max(d.abs());
            let n = support.normal_at_projection(&y)?;
            res_orth = res_orth.max(nu_ref.at(i, j).dot(&n).abs());
            // natural third-order condition (diagnostic only)
            let frame = ref_geom.frame(e)[j];
            let dh_eta = frame.eta.0 * dh_s.at(i, j) + frame.eta.1 * dh_p.at(i, j);
            let a_s = support.shape_operator(&y, &ref_geom.nu.at(i, j), &ref_geom.nu.at(i, j))?;
            res_natural = res_natural.max((dh_eta + a_s * ref_geom.h.at(i, j)).abs());
        }
    }
    if res_dist > opts.tol_fbc || res_orth > opts.tol_fbc {
        return Err(Error::ReferenceNotFreeBoundary {
            distance: res_dist.to_f64().unwrap_or(f64::NAN),
            orthogonality: res_orth.to_f64().unwrap_or(f64::NAN),
            natural: res_natural.to_f64().unwrap_or(f64::NAN),
            tol: opts.tol_fbc.to_f64().unwrap_or(f64::NAN),
        });
    }

    // intrinsic collar distances
    let mut edge_distance = Vec::new();
    for edge in &edges {
        let sources: Vec<(usize, usize)> = (0..grid.n_phi).map(|j| (edge.row, j)).collect();
        let d = grid_distance(&ref_geom, &sources);
        edge_distance.push(Field {
            n_s: grid.n_s,
            n_phi: grid.n_phi,
            data: d.iter().map(|&v| lit::<T>(v)).collect(),
        });
    }
    let collar_distance = Field::from_fn(&grid, |i, j| {
        edge_distance
            .iter()
            .map(|f| f.at(i, j))
            .fold(lit::<T>(f64::MAX), |m, v| m.min(v))
    });

    // usable collar: the blending must act only where the reference stays
    // well inside the tubular neighborhood of the support
    let mut d_ref = Field::constant(&grid, T::zero());
    let mut collar_cap = collar_distance.data.iter().fold(T::zero(), |m, &v| m.max(v));
    for i in 0..grid.n_s {
        for j in 0..grid.n_phi {
            let y = reference.positions.at(i, j);
            match support.signed_distance(&y) {
                Ok(d) if d.abs() < support.tubular_radius * lit::<T>(0.9) => {
                    d_ref.data[grid.idx(i, j)] = d;
                }
                _ => {
                    collar_cap = collar_cap.min(collar_distance.at(i, j));
                }
            }
        }
    }

    let alpha_init = match opts.alpha0 {
        Some(a) => a,
        None => {
            let dmax = collar_distance.data.iter().fold(T::zero(), |m, &v| m.max(v));
            (dmax * lit::<T>(0.25)).min(collar_cap * lit::<T>(0.4))
        }
    };
    if alpha_init <= T::zero() || lit::<T>(2.0) * alpha_init >= collar_cap {
        return Err(Error::CollarTooWide {
            width: (lit::<T>(2.0) * alpha_init).to_f64().unwrap_or(f64::NAN),
            max: collar_cap.to_f64().unwrap_or(f64::NAN),
        });
    }

    let mut chart = GaussChart {
        ref_imm: reference.clone(),
        ref_geom,
        support,
        alpha0: alpha_init,
        r_bar: T::zero(),
        c1_bound: T::zero(),
        tol_constraint: opts.tol_constraint,
        nu_ref,
        collar_distance,
        edge_distance,
        zeta: Field { n_s: grid.n_s, n_phi: grid.n_phi, data: vec![T::zero(); grid.len()] },
        d_ref,
    };

    // pre-flight: the sampled C1 perturbation bound |Phi - Phi_fbar| < 1/4
    // constrains both the collar width (through the residual tilt of the
    // reference normal against the support) and the chart thickness; halve
    // r_bar first, then the collar, until the bound holds
    let hmax = chart.ref_geom.h.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let quarter = lit::<T>(0.25);
    let mut accepted = false;
    let mut alpha0 = alpha_init;
    let mut last_norm = T::zero();
    'alpha: for _ in 0..8 {
        chart.alpha0 = alpha0;
        chart.zeta = chart.collar_distance.map(|d| zeta_profile(d, alpha0));
        let mut r_bar = match opts.r_bar {
            Some(r) => r,
            None => {
                let curb = T::one() / (hmax + T::one());
                let tube = chart.support.tubular_radius * lit::<T>(0.45);
                curb.min(tube).min(alpha0 * lit::<T>(2.0))
            }
        };
        for _ in 0..12 {
            chart.r_bar = r_bar;
            match sampled_c1_perturbation(&chart, r_bar) {
                Ok(norm) => {
                    last_norm = norm;
                    if norm < quarter {
                        accepted = true;
                        break 'alpha;
                    }
                    // the residual at r -> 0 is collar-controlled; stop
                    // shrinking r_bar once it no longer helps
                    if let Ok(norm0) = sampled_c1_perturbation(&chart, r_bar * lit::<T>(1e-3)) {
                        if norm0 >= quarter {
                            break;
                        }
                    }
                    r_bar = r_bar * lit::<T>(0.5);
                }
                Err(_) => r_bar = r_bar * lit::<T>(0.5),
            }
        }
        if opts.alpha0.is_some() {
            break;
        }
        alpha0 = alpha0 * lit::<T>(0.5);
    }
    if !accepted {
        return Err(Error::ChartPerturbationTooLarge {
            norm: last_norm.to_f64().unwrap_or(f64::NAN),
            bound: 0.25,
        });
    }

    validate_chart(&chart)?;

    // calibrate the C1 bound of the working set: largest tested amplitude
    // keeping the pairing inside [1/4, 4], with safety factor 1/2
    let mut bound = chart.r_bar * lit::<T>(0.125);
    for frac in [0.25, 0.5, 0.75, 0.9] {
        let c = chart.r_bar * lit::<T>(frac);
        if pairing_band_holds(&chart, c) {
            bound = c;
        } else {
            break;
        }
    }
    chart.c1_bound = bound * lit::<T>(0.5);

    Ok(chart)
}

/// Sampled C1 norm of `Phi - Phi_fbar` over the grid and `|r| <= r_bar`.
fn sampled_c1_perturbation<T: Scalar>(chart: &GaussChart<T>, r_bar: T) -> Result<T> {
    let grid = chart.grid().clone();
    let mut worst = T::zero();
    for frac in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let r = r_bar * lit::<T>(frac);
        let mut diff = Field::constant(&grid, V3::<T>::zeros());
        for i in 0..grid.n_s {
            for j in 0..grid.n_phi {
                let base = chart.ref_imm.positions.at(i, j) + chart.nu_ref.at(i, j) * r;
                diff.data[grid.idx(i, j)] = chart.phi(i, j, r)? - base;
                let dxi = chart.xi(i, j, r)? - chart.nu_ref.at(i, j);
                worst = worst.max(diff.data[grid.idx(i, j)].norm()).max(dxi.norm());
            }
        }
        let ds = grid.ds::<T, V3<T>>(&diff, Parity::Axial);
        let dp = grid.dphi::<T, V3<T>>(&diff);
        for k in 0..grid.len() {
            worst = worst.max(ds.data[k].norm()).max(dp.data[k].norm());
        }
    }
    Ok(worst)
}

fn pairing_band_holds<T: Scalar>(chart: &GaussChart<T>, amplitude: T) -> bool {
    let grid = chart.grid().clone();
    let shapes: Vec<Field<T>> = vec![
        Field::constant(&grid, amplitude),
        Field::from_fn(&grid, |i, _| amplitude * grid.s::<T>(i)),
        Field::from_fn(&grid, |i, _| {
            let s = grid.s::<T>(i).to_f64().unwrap();
            lit::<T>((std::f64::consts::PI * s).sin()) * amplitude
        }),
    ];
    for shape in shapes {
        let w = match try_height_field(chart, shape) {
            Ok(w) => w,
            Err(_) => return false,
        };
        match xi_pairing(chart, &w) {
            Ok(pairing) => {
                for &v in &pairing.data {
                    if v < lit::<T>(0.25) || v > lit::<T>(4.0) {
                        return false;
                    }
                }
            }
            Err(_) => return false,
        }
    }
    true
}

/// Wrap values as a height field, rejecting fields that leave the chart.
pub fn try_height_field<T: Scalar>(chart: &GaussChart<T>, values: Field<T>) -> Result<HeightField<T>> {
    let hf = HeightField::new(chart, values);
    if hf.sup_norm >= chart.r_bar {
        return Err(Error::ChartExit {
            sup: hf.sup_norm.to_f64().unwrap_or(f64::NAN),
            r_bar: chart.r_bar.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(hf)
}

fn validate_chart<T: Scalar>(chart: &GaussChart<T>) -> Result<()> {
    let grid = chart.grid().clone();
    for i in 0..grid.n_s {
        for j in 0..grid.n_phi {
            // Phi(x, 0) = fbar(x)
            let diff = (chart.phi(i, j, T::zero())? - chart.ref_imm.positions.at(i, j)).norm();
            if diff > lit::<T>(1e-12) {
                return Err(Error::ChartPerturbationTooLarge {
                    norm: diff.to_f64().unwrap_or(f64::NAN),
                    bound: 1e-12,
                });
            }
            // xi(x, 0) pairing band [1/2, 2]
            let pair = chart.xi(i, j, T::zero())?.dot(&chart.nu_ref.at(i, j));
            if pair < lit::<T>(0.5) || pair > lit::<T>(2.0) {
                return Err(Error::PairingDegenerate { value: pair.to_f64().unwrap_or(f64::NAN) });
            }
        }
    }
    // boundary confinement: Phi(x_b, r) stays on the support
    for edge in grid.boundary_edges() {
        for j in 0..grid.n_phi {
            for frac in [-0.95, -0.4, 0.35, 0.95] {
                let r = chart.r_bar * lit::<T>(frac);
                let y = chart.phi(edge.row, j, r)?;
                let d = chart.support.signed_distance(&y)?;
                if d.abs() > lit::<T>(1e-8) {
                    return Err(Error::ChartPerturbationTooLarge {
                        norm: d.abs().to_f64().unwrap_or(f64::NAN),
                        bound: 1e-8,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Evaluate `f_w = Phi(., w(.))` as an immersion.
pub fn evaluate_immersion<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
) -> Result<Immersion<T>> {
    if w.sup_norm >= chart.r_bar {
        return Err(Error::ChartExit {
            sup: w.sup_norm.to_f64().unwrap_or(f64::NAN),
            r_bar: chart.r_bar.to_f64().unwrap_or(f64::NAN),
        });
    }
    let grid = chart.grid().clone();
    let mut positions = Field::constant(&grid, V3::<T>::zeros());
    for i in 0..grid.n_s {
        for j in 0..grid.n_phi {
            positions.data[grid.idx(i, j)] = chart.phi(i, j, w.values.at(i, j))?;
        }
    }
    Ok(Immersion::from_positions(grid, positions))
}

/// Pairing field `<xi(., w(.)), nu_{f_w}>` given a prebuilt geometry of `f_w`.
pub fn xi_pairing_from<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
    fw_geom: &GeometryCache<T>,
) -> Result<Field<T>> {
    let grid = chart.grid().clone();
    let mut out = Field::constant(&grid, T::zero());
    for i in 0..grid.n_s {
        for j in 0..grid.n_phi {
            let xi = chart.xi(i, j, w.values.at(i, j))?;
            let v = xi.dot(&fw_geom.nu.at(i, j));
            if v < lit::<T>(0.125) || v > lit::<T>(8.0) {
                return Err(Error::PairingDegenerate { value: v.to_f64().unwrap_or(f64::NAN) });
            }
            out.data[grid.idx(i, j)] = v;
        }
    }
    Ok(out)
}

/// Pairing field `<xi(., w(.)), nu_{f_w}>`.
pub fn xi_pairing<T: Scalar>(chart: &GaussChart<T>, w: &HeightField<T>) -> Result<Field<T>> {
    let fw = evaluate_immersion(chart, w)?;
    let geom = build_geometry(&fw)?;
    xi_pairing_from(chart, w, &geom)
}

/// Scaled Willmore gradient density
/// `deltaE(w) = <xi, nu>^{-1} (Delta_g H + |A^0|^2 H)` on `f_w`, given a
/// prebuilt geometry.
pub fn delta_e_from<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
    fw_geom: &GeometryCache<T>,
) -> Result<Field<T>> {
    let pairing = xi_pairing_from(chart, w, fw_geom)?;
    let grad = willmore_gradient(fw_geom);
    Ok(grad.zip(&pairing, |g, p| lit::<T>(2.0) * g / p))
}

/// Scaled Willmore gradient density of `f_w`.
pub fn delta_e<T: Scalar>(chart: &GaussChart<T>, w: &HeightField<T>) -> Result<Field<T>> {
    let fw = evaluate_immersion(chart, w)?;
    let geom = build_geometry(&fw)?;
    delta_e_from(chart, w, &geom)
}

/// Solve `dPhi . mu = N(Phi)` at one boundary node.
fn mu_at<T: Scalar>(
    chart: &GaussChart<T>,
    edge_row: usize,
    j: usize,
    r: T,
) -> Result<BoundaryDirection<T>> {
    let grid = chart.grid().clone();
    let h = grid.h_s::<T>();
    let i = edge_row;
    let col = |ii: usize| chart.phi(ii, j, r);
    // radial derivative of Phi(., r) at fixed r: centered stencil closed by
    // the same degree-5 extrapolation ghost as the grid operators
    let coeffs = [-15.0, 20.0, -15.0, 6.0, -1.0];
    let d_s = if i == grid.n_s - 1 {
        let base = col(grid.n_s - 1)?;
        let mut ghost = base;
        for (k, c) in coeffs.iter().enumerate() {
            ghost += (col(grid.n_s - 2 - k)? - base) * lit::<T>(*c);
        }
        (ghost - col(grid.n_s - 2)?) / (lit::<T>(2.0) * h)
    } else {
        debug_assert_eq!(i, 0);
        let base = col(0)?;
        let mut ghost = base;
        for (k, c) in coeffs.iter().enumerate() {
            ghost += (col(k + 1)? - base) * lit::<T>(*c);
        }
        (col(1)? - ghost) / (lit::<T>(2.0) * h)
    };
    // angular derivative at fixed r
    let d_p = if grid.n_phi == 1 {
        let p = chart.phi(i, 0, r)?;
        V3::new(-p.y, p.x, T::zero())
    } else {
        let m = grid.dphi_matrix::<T>();
        let n = grid.n_phi;
        let base = chart.phi(i, j, r)?;
        let mut acc = V3::<T>::zeros();
        for k in 0..n {
            if k != j {
                acc += (chart.phi(i, k, r)? - base) * m[j * n + k];
            }
        }
        acc
    };
    let xi = chart.xi(i, j, r)?;
    let y = chart.phi(i, j, r)?;
    let nrm = chart.support.normal_at_projection(&y)?;
    let m = Matrix3::from_columns(&[d_s, d_p, xi]);
    let mu = m.lu().solve(&nrm).ok_or(Error::SingularChartDifferential { j })?;
    let residual = (m * mu - nrm).norm();
    if residual > lit::<T>(1e-10) {
        return Err(Error::SingularChartDifferential { j });
    }
    Ok(BoundaryDirection { mu_tangent: (mu.x, mu.y), mu_radial: mu.z })
}

/// Boundary direction field `mu(., w(.))` along every boundary edge.
pub fn boundary_direction_field<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
) -> Result<Vec<Vec<BoundaryDirection<T>>>> {
    let grid = chart.grid().clone();
    let mut out = Vec::new();
    for edge in grid.boundary_edges() {
        let mut row = Vec::with_capacity(grid.n_phi);
        for j in 0..grid.n_phi {
            row.push(mu_at(chart, edge.row, j, w.values.at(edge.row, j))?);
        }
        out.push(row);
    }
    Ok(out)
}

/// Residuals of the reformulated boundary conditions for `f_w`, per edge,
/// given a prebuilt geometry of `f_w`.
pub fn boundary_residuals_from<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
    fw_geom: &GeometryCache<T>,
) -> Result<Vec<BoundaryResiduals<T>>> {
    let grid = chart.grid().clone();
    let pairing = xi_pairing_from(chart, w, fw_geom)?;
    let dw_s = grid.ds::<T, T>(&w.values, Parity::Even);
    let dw_p = grid.dphi::<T, T>(&w.values);
    let dh_s = grid.ds::<T, T>(&fw_geom.h, Parity::Even);
    let dh_p = grid.dphi::<T, T>(&fw_geom.h);
    let mut out = Vec::new();
    for (e, edge) in grid.boundary_edges().iter().enumerate() {
        let i = edge.row;
        let mut b1 = Vec::with_capacity(grid.n_phi);
        let mut b2 = Vec::with_capacity(grid.n_phi);
        for j in 0..grid.n_phi {
            let mu = mu_at(chart, i, j, w.values.at(i, j))?;
            b1.push(
                mu.mu_tangent.0 * dw_s.at(i, j) + mu.mu_tangent.1 * dw_p.at(i, j) - mu.mu_radial,
            );
            let frame = fw_geom.frame(e)[j];
            let dh_eta = frame.eta.0 * dh_s.at(i, j) + frame.eta.1 * dh_p.at(i, j);
            let y = fw_geom.pos.at(i, j);
            let hess = chart.support.hess_distance(&y)?;
            let nu = fw_geom.nu.at(i, j);
            let shape = nu.dot(&(hess * nu));
            b2.push((dh_eta - shape * fw_geom.h.at(i, j)) / pairing.at(i, j));
        }
        out.push(BoundaryResiduals { b1, b2 });
    }
    Ok(out)
}

/// Residuals of the reformulated boundary conditions for `f_w`.
pub fn boundary_residuals<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
) -> Result<Vec<BoundaryResiduals<T>>> {
    let fw = evaluate_immersion(chart, w)?;
    let geom = build_geometry(&fw)?;
    boundary_residuals_from(chart, w, &geom)
}

/// Height-field directions generated by the ambient invariances of the
/// pair (Willmore energy, support surface): in-plane translations and
/// dilations about a plane point for plane supports, rotations for sphere
/// supports. An ambient motion field `X` acts on height fields as
/// `<X, nu> / <xi(.,0), nu>`.
///
/// These span the (near-)neutral directions of the discrete energy at the
/// reference; the flow uses them for neutral-mode stabilization and the
/// spectral module tests them as kernel candidates.
pub fn neutral_directions<T: Scalar>(chart: &GaussChart<T>) -> Vec<Field<T>> {
    let grid = chart.grid().clone();
    let axisym = grid.n_phi == 1;
    let motions: Vec<Box<dyn Fn(V3<T>) -> V3<T>>> = match &chart.support.kind {
        crate::support::SurfaceKind::Plane { point, normal } => {
            let p0 = *point;
            let n = *normal;
            let mut fields: Vec<Box<dyn Fn(V3<T>) -> V3<T>>> = Vec::new();
            // dilation about the base point keeps the plane invariant
            fields.push(Box::new(move |y: V3<T>| y - p0));
            if !axisym {
                // two in-plane translations
                let pick = if n.x.abs() < lit::<T>(0.9) { V3::x() } else { V3::y() };
                let t1 = (pick - n * pick.dot(&n)).normalize();
                let t2 = n.cross(&t1);
                fields.push(Box::new(move |_| t1));
                fields.push(Box::new(move |_| t2));
            }
            fields
        }
        crate::support::SurfaceKind::Sphere { center, .. } => {
            let c0 = *center;
            if axisym {
                Vec::new()
            } else {
                // rotations about two horizontal axes through the center
                vec![
                    Box::new(move |y: V3<T>| V3::x().cross(&(y - c0))) as Box<dyn Fn(V3<T>) -> V3<T>>,
                    Box::new(move |y: V3<T>| V3::y().cross(&(y - c0))),
                ]
            }
        }
        crate::support::SurfaceKind::Implicit(_) => Vec::new(),
    };
    let mut out = Vec::new();
    for motion in motions {
        let mut field = Field::constant(&grid, T::zero());
        for i in 0..grid.n_s {
            for j in 0..grid.n_phi {
                let y = chart.ref_imm.positions.at(i, j);
                let nu = chart.nu_ref.at(i, j);
                let xi = chart.xi(i, j, T::zero()).expect("xi at zero");
                field.data[grid.idx(i, j)] = motion(y).dot(&nu) / xi.dot(&nu);
            }
        }
        // normalize in L2(dmu) of the reference
        let norm = chart.ref_geom.l2_norm(&field);
        if norm > lit::<T>(1e-12) {
            out.push(field.map(|v| v / norm));
        }
    }
    out
}

/// The invariance directions of [`neutral_directions`], orthonormalized in
/// `L^2(dmu_ref)`.
pub fn orthonormal_neutral_directions<T: Scalar>(chart: &GaussChart<T>) -> Vec<Field<T>> {
    let mut out: Vec<Field<T>> = Vec::new();
    for mut v in neutral_directions(chart) {
        for u in &out {
            let p = chart.ref_geom.integrate(&v.zip(u, |a, b| a * b));
            for k in 0..v.data.len() {
                v.data[k] -= p * u.data[k];
            }
        }
        let norm = chart.ref_geom.l2_norm(&v);
        if norm > lit::<T>(1e-10) {
            out.push(v.map(|x| x / norm));
        }
    }
    out
}

fn residual_norm<T: Scalar>(res: &[BoundaryResiduals<T>]) -> T {
    res.iter().fold(T::zero(), |m, r| m.max(r.sup()))
}

/// Newton projection of a height field onto the discrete constraint set
/// `B1 = B2 = 0`, adjusting `w` only inside the boundary collar.
pub fn project_to_constraint<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
) -> Result<HeightField<T>> {
    let grid = chart.grid().clone();
    let edges = grid.boundary_edges();
    let res0 = boundary_residuals(chart, w)?;
    let norm0 = residual_norm(&res0);
    if norm0 < chart.tol_constraint {
        return Ok(w.clone());
    }
    if norm0 > chart.r_bar * lit::<T>(0.1) {
        return Err(Error::ConstraintProjectionDiverged {
            iters: 0,
            residual: norm0.to_f64().unwrap_or(f64::NAN),
        });
    }

    // collar-supported correction profiles per edge and angular column:
    // a slope bump and a third-derivative bump, both vanishing with zeta
    let profile = |e: usize, i: usize, j: usize, which: usize| -> T {
        let edge = edges[e];
        let t = grid.s::<T>(i) - grid.s::<T>(edge.row);
        let z = zeta_profile(chart.edge_distance[e].at(i, j), chart.alpha0);
        if which == 0 {
            z * t
        } else {
            z * t * t * t * lit::<T>(1.0 / 6.0)
        }
    };

    let m = 2 * edges.len() * grid.n_phi;
    let pack = |res: &[BoundaryResiduals<T>]| -> Vec<T> {
        let mut v = Vec::with_capacity(m);
        for r in res {
            v.extend_from_slice(&r.b1);
            v.extend_from_slice(&r.b2);
        }
        v
    };
    let apply = |base: &Field<T>, amps: &[T]| -> Field<T> {
        let mut f = base.clone();
        for e in 0..edges.len() {
            for j in 0..grid.n_phi {
                let a = amps[2 * (e * grid.n_phi + j)];
                let b = amps[2 * (e * grid.n_phi + j) + 1];
                for i in 0..grid.n_s {
                    let da = profile(e, i, j, 0) * a + profile(e, i, j, 1) * b;
                    *f.at_mut(i, j) += da;
                }
            }
        }
        f
    };

    let mut base = w.values.clone();
    let mut residual = pack(&res0);
    let mut norm = norm0;
    let delta = chart.r_bar * lit::<T>(1e-6);
    for iter in 0..30 {
        let mut jac = nalgebra::DMatrix::<T>::zeros(m, m);
        for c in 0..m {
            let mut amps = vec![T::zero(); m];
            amps[c] = delta;
            let wp = try_height_field(chart, apply(&base, &amps))?;
            let rp = pack(&boundary_residuals(chart, &wp)?);
            for r in 0..m {
                jac[(r, c)] = (rp[r] - residual[r]) / delta;
            }
        }
        let rhs = nalgebra::DVector::from_iterator(m, residual.iter().map(|&v| -v));
        let step =
            crate::solve::lu_solve(jac, rhs).map_err(|_| Error::ConstraintProjectionDiverged {
                iters: iter,
                residual: norm.to_f64().unwrap_or(f64::NAN),
            })?;
        let mut lambda = T::one();
        let mut improved = false;
        for _ in 0..6 {
            let amps: Vec<T> = step.iter().map(|&v| v * lambda).collect();
            let candidate = apply(&base, &amps);
            if let Ok(wc) = try_height_field(chart, candidate.clone()) {
                if let Ok(rc) = boundary_residuals(chart, &wc) {
                    let nc = residual_norm(&rc);
                    if nc < norm {
                        base = candidate;
                        residual = pack(&rc);
                        norm = nc;
                        improved = true;
                        break;
                    }
                }
            }
            lambda = lambda * lit::<T>(0.5);
        }
        if norm < chart.tol_constraint {
            return try_height_field(chart, base);
        }
        if !improved {
            break;
        }
    }
    if norm < chart.tol_constraint {
        try_height_field(chart, base)
    } else {
        Err(Error::ConstraintProjectionDiverged {
            iters: 30,
            residual: norm.to_f64().unwrap_or(f64::NAN),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{samplers, willmore_energy};
    use crate::grid::Topology;
    use approx::assert_relative_eq;

    fn hemisphere_chart(n_s: usize, n_phi: usize) -> GaussChart<f64> {
        let grid = if n_phi == 1 {
            ParamGrid::new(Topology::Disk, n_s, 1, true).unwrap()
        } else {
            ParamGrid::disk(n_s, n_phi).unwrap()
        };
        let imm = Immersion::from_sampler(grid, samplers::hemisphere(1.0));
        let plane = SupportSurface::plane(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        build_gauss_chart(&imm, &plane, &ChartOptions::default()).unwrap()
    }

    fn disk_in_ball_chart(n_s: usize, n_phi: usize) -> GaussChart<f64> {
        let grid = if n_phi == 1 {
            ParamGrid::new(Topology::Disk, n_s, 1, true).unwrap()
        } else {
            ParamGrid::disk(n_s, n_phi).unwrap()
        };
        let imm = Immersion::from_sampler(grid, samplers::equatorial_disk(1.0));
        let ball = SupportSurface::sphere(Vector3::zeros(), 1.0);
        build_gauss_chart(&imm, &ball, &ChartOptions::default()).unwrap()
    }

    fn interior_bump(grid: &ParamGrid, center: f64, width: f64, amp: f64) -> Field<f64> {
        Field::from_fn(grid, |i, _| {
            let t = (grid.s::<f64>(i) - center) / width;
            if t.abs() < 1.0 {
                amp * (1.0 - t * t).powi(4)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn hemisphere_chart_builds_with_boundary_xi_equal_to_normal() {
        let chart = hemisphere_chart(32, 16);
        assert!(chart.r_bar > 1e-3, "r_bar = {}", chart.r_bar);
        let i = chart.grid().n_s - 1;
        for j in 0..chart.grid().n_phi {
            let xi = chart.xi(i, j, 0.0).unwrap();
            let nu = chart.nu_ref().at(i, j);
            assert!((xi - nu).norm() < 1e-8, "xi deviates by {}", (xi - nu).norm());
        }
    }

    #[test]
    fn disk_chart_keeps_boundary_on_sphere_for_all_r() {
        let chart = disk_in_ball_chart(24, 16);
        let i = chart.grid().n_s - 1;
        for j in 0..chart.grid().n_phi {
            for frac in [-0.9, -0.33, 0.41, 0.9] {
                let y = chart.phi(i, j, chart.r_bar * frac).unwrap();
                assert!((y.norm() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cap_at_60_degrees_is_rejected_with_cosine_residual() {
        let grid = ParamGrid::new(Topology::Disk, 24, 1, true).unwrap();
        let imm: Immersion<f64> =
            Immersion::from_sampler(grid, samplers::spherical_cap(1.0, std::f64::consts::PI / 3.0));
        let plane = SupportSurface::plane(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        match build_gauss_chart(&imm, &plane, &ChartOptions::default()) {
            Err(Error::ReferenceNotFreeBoundary { orthogonality, .. }) => {
                assert_relative_eq!(orthogonality, 0.5, epsilon = 1e-10);
            }
            Err(other) => panic!("expected ReferenceNotFreeBoundary, got {other}"),
            Ok(_) => panic!("cap chart unexpectedly accepted"),
        }
    }

    #[test]
    fn zero_height_field_reproduces_the_reference_exactly() {
        let chart = hemisphere_chart(24, 16);
        let w = HeightField::zero(&chart);
        let fw = evaluate_immersion(&chart, &w).unwrap();
        for k in 0..chart.grid().len() {
            assert!((fw.positions.data[k] - chart.ref_imm.positions.data[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_height_field_stays_on_plane_and_large_w_exits() {
        let chart = hemisphere_chart(24, 1);
        let c = chart.r_bar * 0.3;
        let w = try_height_field(&chart, Field::constant(chart.grid(), c)).unwrap();
        let fw = evaluate_immersion(&chart, &w).unwrap();
        let i = chart.grid().n_s - 1;
        assert!(fw.positions.at(i, 0).z.abs() < 1e-8);
        // beyond the chart
        let too_big = Field::constant(chart.grid(), chart.r_bar / 1.01 + chart.r_bar * 0.02);
        assert!(matches!(
            try_height_field(&chart, too_big).unwrap_err(),
            Error::ChartExit { .. }
        ));
    }

    #[test]
    fn zeta_profile_respects_the_derivative_bound() {
        let a = 0.37;
        let mut max_slope = 0.0f64;
        let m = 20_000;
        for k in 0..m {
            let d0 = 3.0 * a * k as f64 / m as f64;
            let d1 = 3.0 * a * (k + 1) as f64 / m as f64;
            let slope = (zeta_profile(d1, a) - zeta_profile(d0, a)) / (d1 - d0);
            max_slope = max_slope.max(slope.abs());
        }
        assert!(max_slope <= 2.0 / a + 1e-6, "slope {} bound {}", max_slope, 2.0 / a);
        assert_eq!(zeta_profile(0.5 * a, a), 1.0);
        assert_eq!(zeta_profile(2.5 * a, a), 0.0);
    }

    #[test]
    fn pairing_is_one_away_from_collar_and_in_band_at_zero() {
        let chart = hemisphere_chart(32, 1);
        let w = HeightField::zero(&chart);
        let pairing = xi_pairing(&chart, &w).unwrap();
        for i in 0..chart.grid().n_s {
            let v = pairing.at(i, 0);
            assert!((0.5..=2.0).contains(&v), "pairing {v} at row {i}");
            if chart.zeta.at(i, 0) == 0.0 {
                assert!((v - 1.0).abs() < 2e-4, "pairing away from collar {v}");
            }
        }
        // boundary: xi = nu there, and nu_fw = nu up to discretization
        let v = pairing.at(chart.grid().n_s - 1, 0);
        assert!((v - 1.0).abs() < 1e-4, "boundary pairing {v}");
    }

    #[test]
    fn pairing_in_guaranteed_band_for_random_small_fields() {
        let chart = hemisphere_chart(24, 1);
        // deterministic pseudo-random smooth fields
        for seed in 0..5u64 {
            let a = chart.c1_bound * 0.5;
            let w = try_height_field(
                &chart,
                Field::from_fn(chart.grid(), |i, _| {
                    let s = chart.grid().s::<f64>(i);
                    let p = (seed as f64 + 1.0) * 2.399963;
                    a * ((3.0 + p.sin()) * s).cos() * 0.5
                }),
            )
            .unwrap();
            let pairing = xi_pairing(&chart, &w).unwrap();
            for &v in &pairing.data {
                assert!((0.25..=4.0).contains(&v), "pairing {v} out of band");
            }
        }
    }

    #[test]
    fn delta_e_vanishes_on_critical_references() {
        // equatorial disk: exactly zero
        let chart = disk_in_ball_chart(24, 1);
        let w = HeightField::zero(&chart);
        let de = delta_e(&chart, &w).unwrap();
        for &v in &de.data {
            assert!(v.abs() < 1e-9, "disk deltaE {v}");
        }
        // hemisphere: discretization-level residual shrinking with order >= 1
        let sup = |n: usize| {
            let chart = hemisphere_chart(n, 1);
            let w = HeightField::zero(&chart);
            delta_e(&chart, &w)
                .unwrap()
                .data
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max)
        };
        let (e32, e64) = (sup(32), sup(64));
        assert!((e32 / e64).log2() > 1.0, "deltaE order {} ({e32} -> {e64})", (e32 / e64).log2());
    }

    #[test]
    fn delta_e_pairs_with_energy_derivative() {
        // E'(w)phi = 1/2 \int deltaE(w) phi <xi,nu>^2 dmu for tangential phi
        let chart = hemisphere_chart(48, 1);
        let base = interior_bump(chart.grid(), 0.45, 0.3, 0.02);
        let w = try_height_field(&chart, base).unwrap();
        let phi = interior_bump(chart.grid(), 0.5, 0.25, 1.0);

        let fw = evaluate_immersion(&chart, &w).unwrap();
        let geom = build_geometry(&fw).unwrap();
        let de = delta_e_from(&chart, &w, &geom).unwrap();
        let pairing = xi_pairing_from(&chart, &w, &geom).unwrap();
        let mut lhs = 0.0;
        for k in 0..chart.grid().len() {
            lhs += 0.5 * de.data[k] * phi.data[k] * pairing.data[k] * pairing.data[k]
                * geom.measure.data[k];
        }

        let energy_at = |t: f64| {
            let wt = try_height_field(
                &chart,
                w.values.zip(&phi, |a, b| a + t * b),
            )
            .unwrap();
            let f = evaluate_immersion(&chart, &wt).unwrap();
            willmore_energy(&build_geometry(&f).unwrap())
        };
        let dt = 1e-5;
        let rhs = (energy_at(dt) - energy_at(-dt)) / (2.0 * dt);
        assert_relative_eq!(lhs, rhs, max_relative = 0.01);
    }

    #[test]
    fn mu_field_at_zero_is_the_conormal_with_no_radial_part() {
        for chart in [hemisphere_chart(32, 16), disk_in_ball_chart(32, 16)] {
            let w = HeightField::zero(&chart);
            let mu = boundary_direction_field(&chart, &w).unwrap();
            let frames = chart.ref_geom.frame(0);
            for (j, m) in mu[0].iter().enumerate() {
                assert!(m.mu_radial.abs() < 1e-6, "mu_radial {}", m.mu_radial);
                assert_relative_eq!(m.mu_tangent.0, frames[j].eta.0, epsilon = 1e-4);
                assert_relative_eq!(m.mu_tangent.1, frames[j].eta.1, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn mu_radial_equals_conormal_derivative_after_projection() {
        let chart = hemisphere_chart(32, 1);
        // boundary-reaching axisymmetric field, projected onto the constraint
        let raw = Field::from_fn(chart.grid(), |i, _| {
            let s = chart.grid().s::<f64>(i);
            2e-5 * (0.8 * s * s - 0.3 * s)
        });
        let w0 = try_height_field(&chart, raw).unwrap();
        let w = project_to_constraint(&chart, &w0).unwrap();
        let fw = evaluate_immersion(&chart, &w).unwrap();
        let geom = build_geometry(&fw).unwrap();
        let mu = boundary_direction_field(&chart, &w).unwrap();
        let grid = chart.grid().clone();
        let dw_s = grid.ds::<f64, f64>(&w.values, Parity::Even);
        let i = grid.n_s - 1;
        let frame = geom.frame(0)[0];
        let dw_eta = frame.eta.0 * dw_s.at(i, 0);
        assert_relative_eq!(mu[0][0].mu_radial, dw_eta, epsilon = 1e-6);
    }

    #[test]
    fn boundary_residuals_vanish_at_reference() {
        let chart = hemisphere_chart(48, 1);
        let res = boundary_residuals(&chart, &HeightField::zero(&chart)).unwrap();
        assert!(res[0].sup() < 2e-3, "hemisphere residual {}", res[0].sup());
        let chart = disk_in_ball_chart(48, 1);
        let res = boundary_residuals(&chart, &HeightField::zero(&chart)).unwrap();
        assert!(res[0].sup() < 1e-10, "disk residual {}", res[0].sup());
    }

    #[test]
    fn b1_matches_the_direct_orthogonality_defect_to_first_order() {
        let chart = hemisphere_chart(24, 16);
        let grid = chart.grid().clone();
        let shape = Field::from_fn(&grid, |i, j| {
            grid.s::<f64>(i) * grid.phi::<f64>(j).cos()
        });
        let first_order = |eps: f64| -> (Vec<f64>, Vec<f64>) {
            let w = try_height_field(&chart, shape.map(|v| eps * v)).unwrap();
            let res = boundary_residuals(&chart, &w).unwrap();
            let fw = evaluate_immersion(&chart, &w).unwrap();
            let geom = build_geometry(&fw).unwrap();
            let i = grid.n_s - 1;
            let defect: Vec<f64> = (0..grid.n_phi)
                .map(|j| {
                    let y = geom.pos.at(i, j);
                    let n = chart.support.normal_at_projection(&y).unwrap();
                    geom.nu.at(i, j).dot(&n)
                })
                .collect();
            (res[0].b1.clone(), defect)
        };
        let eps = 1e-4;
        let (b1_p, def_p) = first_order(eps);
        let (b1_m, def_m) = first_order(-eps);
        for j in 0..grid.n_phi {
            let db1 = (b1_p[j] - b1_m[j]) / (2.0 * eps);
            let ddef = (def_p[j] - def_m[j]) / (2.0 * eps);
            if db1.abs() > 1e-3 {
                let ratio = ddef / db1;
                assert!(
                    (ratio + 1.0).abs() < 0.05,
                    "defect/B1 first-order ratio {ratio} at column {j}"
                );
            }
        }
    }

    #[test]
    fn projection_keeps_valid_fields_and_far_interior_unchanged() {
        // flat disk: the reference satisfies the discrete conditions to
        // machine precision, so valid fields return unchanged
        let flat = disk_in_ball_chart(32, 1);
        let w0 = HeightField::zero(&flat);
        let p0 = project_to_constraint(&flat, &w0).unwrap();
        assert_eq!(p0.values.data, w0.values.data);
        let bump = interior_bump(flat.grid(), 0.3, 0.15, 0.01);
        let wb = try_height_field(&flat, bump.clone()).unwrap();
        let pb = project_to_constraint(&flat, &wb).unwrap();
        assert_eq!(pb.values.data, wb.values.data);
        // hemisphere, boundary-reaching field: projected to small residual,
        // far field kept
        let chart = hemisphere_chart(32, 1);
        let reach = Field::from_fn(chart.grid(), |i, _| {
            let s = chart.grid().s::<f64>(i);
            2e-5 * s * s
        });
        let wr = try_height_field(&chart, reach).unwrap();
        let pr = project_to_constraint(&chart, &wr).unwrap();
        let res = boundary_residuals(&chart, &pr).unwrap();
        assert!(res[0].sup() < 1e-8, "post-projection residual {}", res[0].sup());
        for i in 0..chart.grid().n_s {
            if chart.zeta.at(i, 0) == 0.0 {
                assert_eq!(pr.values.at(i, 0), wr.values.at(i, 0));
            }
        }
    }

    #[test]
    fn locality_of_the_pointwise_chart_map() {
        let chart = hemisphere_chart(24, 1);
        let w1 = try_height_field(&chart, interior_bump(chart.grid(), 0.4, 0.2, 0.01)).unwrap();
        let mut v2 = w1.values.clone();
        // change w inside the collar only
        for i in 0..chart.grid().n_s {
            if chart.zeta.at(i, 0) > 0.0 {
                *v2.at_mut(i, 0) += 0.002;
            }
        }
        let w2 = try_height_field(&chart, v2).unwrap();
        let f1 = evaluate_immersion(&chart, &w1).unwrap();
        let f2 = evaluate_immersion(&chart, &w2).unwrap();
        for i in 0..chart.grid().n_s {
            if chart.zeta.at(i, 0) == 0.0 {
                assert_eq!(f1.positions.at(i, 0), f2.positions.at(i, 0));
            }
        }
    }

    #[test]
    fn annulus_catenoid_chart_builds() {
        let grid = ParamGrid::annulus(32, 16).unwrap();
        let imm: Immersion<f64> = Immersion::from_sampler(grid, samplers::critical_catenoid());
        let ball = SupportSurface::sphere(Vector3::zeros(), 1.0);
        let chart = build_gauss_chart(&imm, &ball, &ChartOptions::default()).unwrap();
        assert!(chart.r_bar > 1e-4);
        let res = boundary_residuals(&chart, &HeightField::zero(&chart)).unwrap();
        assert_eq!(res.len(), 2);
        for r in &res {
            assert!(r.sup() < 2e-2, "catenoid residual {}", r.sup());
        }
    }
}
