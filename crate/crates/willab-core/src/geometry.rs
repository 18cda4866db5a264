//! Discrete differential geometry of immersed parametric surfaces.
//!
//! Everything is computed from node positions by the grid's finite
//! difference / collocation operators: first and second fundamental forms,
//! mean curvature, Willmore energy and its L2-gradient, the
//! Laplace–Beltrami operator in divergence form, and the boundary frame.
//!
//! In axisymmetric mode (`n_phi == 1`) the surface is assumed to be a
//! surface of revolution about the `z` axis; angular derivatives of the
//! position field are then exact, `d_phi f = e_z x f`.

use crate::error::{Error, Result};
use crate::grid::{BoundaryEdge, Field, ParamGrid, Parity, Topology};
use crate::{is_finite, lit, Scalar};
use nalgebra::Vector3;
use std::sync::Arc;

type V3<T> = Vector3<T>;

/// Analytic sampler for exact reference surfaces.
///
/// Derivatives are with respect to the grid coordinates `(s, phi)`.
pub trait SurfaceSampler<T: Scalar>: Send + Sync {
    fn position(&self, s: T, phi: T) -> V3<T>;
    fn d_s(&self, s: T, phi: T) -> V3<T>;
    fn d_phi(&self, s: T, phi: T) -> V3<T>;

    /// Exact unit normal with the chart orientation `d_phi x d_s`.
    fn normal(&self, s: T, phi: T) -> V3<T> {
        self.d_phi(s, phi).cross(&self.d_s(s, phi)).normalize()
    }
}

/// Surface of revolution about the `z` axis, described by its meridian
/// profile `s -> (rho(s), z(s))` with first and second derivatives.
pub struct RevolutionSampler<T> {
    /// `s -> (rho, rho', rho'', z, z', z'')`.
    #[allow(clippy::type_complexity)]
    pub profile: Box<dyn Fn(T) -> [T; 6] + Send + Sync>,
}

impl<T: Scalar> SurfaceSampler<T> for RevolutionSampler<T> {
    fn position(&self, s: T, phi: T) -> V3<T> {
        let [rho, _, _, z, _, _] = (self.profile)(s);
        V3::new(rho * phi.cos(), rho * phi.sin(), z)
    }

    fn d_s(&self, s: T, phi: T) -> V3<T> {
        let [_, drho, _, _, dz, _] = (self.profile)(s);
        V3::new(drho * phi.cos(), drho * phi.sin(), dz)
    }

    fn d_phi(&self, s: T, phi: T) -> V3<T> {
        let [rho, _, _, _, _, _] = (self.profile)(s);
        V3::new(-rho * phi.sin(), rho * phi.cos(), T::zero())
    }
}

/// Reference immersion selectors shipped with the laboratory.
pub mod samplers {
    use super::*;

    /// Upper hemisphere of radius `r` resting on the plane `z = 0`;
    /// `s` is the colatitude fraction, the boundary circle sits at `s = 1`.
    pub fn hemisphere<T: Scalar>(r: T) -> Arc<dyn SurfaceSampler<T>> {
        let half_pi = T::frac_pi_2();
        Arc::new(RevolutionSampler {
            profile: Box::new(move |s: T| {
                let th = s * half_pi;
                let (sin, cos) = (th.sin(), th.cos());
                [
                    r * sin,
                    r * half_pi * cos,
                    -r * half_pi * half_pi * sin,
                    r * cos,
                    -r * half_pi * sin,
                    -r * half_pi * half_pi * cos,
                ]
            }),
        })
    }

    /// Flat disk of radius `r` in the plane `z = 0`.
    pub fn equatorial_disk<T: Scalar>(r: T) -> Arc<dyn SurfaceSampler<T>> {
        Arc::new(RevolutionSampler {
            profile: Box::new(move |s: T| [r * s, r, T::zero(), T::zero(), T::zero(), T::zero()]),
        })
    }

    /// Spherical cap of radius `r` and opening angle `beta` (radians),
    /// shifted so its boundary circle lies in the plane `z = 0`. The cap
    /// meets the plane orthogonally only for `beta = pi/2`.
    pub fn spherical_cap<T: Scalar>(r: T, beta: T) -> Arc<dyn SurfaceSampler<T>> {
        Arc::new(RevolutionSampler {
            profile: Box::new(move |s: T| {
                let th = s * beta;
                let (sin, cos) = (th.sin(), th.cos());
                [
                    r * sin,
                    r * beta * cos,
                    -r * beta * beta * sin,
                    r * (cos - beta.cos()),
                    -r * beta * sin,
                    -r * beta * beta * cos,
                ]
            }),
        })
    }

    /// Catenoid band `(c cosh u cos phi, c cosh u sin phi, c u)` with
    /// `u = u0 + s (u1 - u0)`; annulus topology.
    pub fn catenoid_band<T: Scalar>(c: T, u0: T, u1: T) -> Arc<dyn SurfaceSampler<T>> {
        let du = u1 - u0;
        Arc::new(RevolutionSampler {
            profile: Box::new(move |s: T| {
                let u = u0 + s * du;
                [
                    c * u.cosh(),
                    c * du * u.sinh(),
                    c * du * du * u.cosh(),
                    c * u,
                    c * du,
                    T::zero(),
                ]
            }),
        })
    }

    /// The critical catenoid: the free boundary minimal annulus in the unit
    /// ball, meeting the unit sphere orthogonally at both boundary circles.
    pub fn critical_catenoid<T: Scalar>() -> Arc<dyn SurfaceSampler<T>> {
        // u* solves u tanh u = 1
        let mut u = 1.2_f64;
        for _ in 0..60 {
            let f = u * u.tanh() - 1.0;
            let df = u.tanh() + u / u.cosh().powi(2);
            u -= f / df;
        }
        let c = 1.0 / (u.cosh().powi(2) + u * u).sqrt();
        catenoid_band(lit::<T>(c), lit::<T>(-u), lit::<T>(u))
    }
}

/// Sampled position field of a surface, optionally backed by an analytic
/// sampler for exact reference surfaces.
pub struct Immersion<T: Scalar> {
    pub grid: ParamGrid,
    pub positions: Field<V3<T>>,
    pub sampler: Option<Arc<dyn SurfaceSampler<T>>>,
}

impl<T: Scalar> Clone for Immersion<T> {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            positions: self.positions.clone(),
            sampler: self.sampler.clone(),
        }
    }
}

impl<T: Scalar> Immersion<T> {
    pub fn from_positions(grid: ParamGrid, positions: Field<V3<T>>) -> Self {
        Self { grid, positions, sampler: None }
    }

    pub fn from_sampler(grid: ParamGrid, sampler: Arc<dyn SurfaceSampler<T>>) -> Self {
        let positions =
            Field::from_fn(&grid, |i, j| sampler.position(grid.s::<T>(i), grid.phi::<T>(j)));
        Self { grid, positions, sampler: Some(sampler) }
    }

    /// Rescaled copy `lambda * f` (sampler metadata is dropped).
    pub fn scaled(&self, lambda: T) -> Self {
        Self {
            grid: self.grid.clone(),
            positions: self.positions.map(|p| p * lambda),
            sampler: None,
        }
    }

    /// Translated copy `f + c`.
    pub fn translated(&self, c: V3<T>) -> Self {
        Self {
            grid: self.grid.clone(),
            positions: self.positions.map(|p| p + c),
            sampler: None,
        }
    }
}

/// Boundary frame at one boundary node: outer conormal and unit tangent in
/// grid components and their ambient images under the differential.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryFrame<T: Scalar> {
    /// Conormal components `(eta^s, eta^phi)`.
    pub eta: (T, T),
    /// Tangent components `(0, tau^phi)`.
    pub tau: (T, T),
    pub eta_ambient: V3<T>,
    pub tau_ambient: V3<T>,
}

/// Options for geometry assembly.
#[derive(Debug, Clone, Copy)]
pub struct GeomOptions<T> {
    /// Lower bound on `det g` (immersion condition).
    pub eps_imm: T,
    /// Pole-limit angular spread tolerance, relative to `100 h^2 (1 + max|H|)`
    /// when `None`.
    pub pole_tol: Option<T>,
}

impl<T: Scalar> Default for GeomOptions<T> {
    fn default() -> Self {
        Self { eps_imm: lit::<T>(1e-10), pole_tol: None }
    }
}

/// All first/second-order geometric data of an immersion.
pub struct GeometryCache<T: Scalar> {
    pub grid: ParamGrid,
    pub pos: Field<V3<T>>,
    pub f_s: Field<V3<T>>,
    pub f_phi: Field<V3<T>>,
    /// Unit normal with the chart orientation `d_phi x d_s`.
    pub nu: Field<V3<T>>,
    /// Metric components `(g_ss, g_sphi, g_phiphi)`.
    pub g: [Field<T>; 3],
    /// Inverse metric components `(g^ss, g^sphi, g^phiphi)`.
    pub ginv: [Field<T>; 3],
    pub det_g: Field<T>,
    pub sqrt_det_g: Field<T>,
    /// Second fundamental form `(A_ss, A_sphi, A_phiphi)`.
    pub a: [Field<T>; 3],
    /// Mean curvature `H = g^{ij} A_ij`.
    pub h: Field<T>,
    /// `|A^0|^2 = |A|^2 - H^2/2`.
    pub a0_norm2: Field<T>,
    /// Christoffel symbols of this metric:
    /// `(G^s_ss, G^s_sphi, G^s_phiphi, G^phi_ss, G^phi_sphi, G^phi_phiphi)`.
    pub christoffel: [Field<T>; 6],
    /// Riemannian node measure `sqrt(det g) w_s(i) w_phi`.
    pub measure: Field<T>,
    /// Boundary frames per edge, aligned with `grid.boundary_edges()`.
    pub frames: Vec<Vec<BoundaryFrame<T>>>,
}

/// Assemble the geometry of an immersion with default options.
pub fn build_geometry<T: Scalar>(imm: &Immersion<T>) -> Result<GeometryCache<T>> {
    build_geometry_with(imm, &GeomOptions::default())
}

/// Assemble the geometry of an immersion.
pub fn build_geometry_with<T: Scalar>(
    imm: &Immersion<T>,
    opts: &GeomOptions<T>,
) -> Result<GeometryCache<T>> {
    let grid = imm.grid.clone();
    let pos = imm.positions.clone();
    for (k, p) in pos.data.iter().enumerate() {
        if !is_finite(p.norm()) {
            return Err(Error::NonFiniteState { t: k as f64 });
        }
    }

    let f_s = grid.ds::<T, V3<T>>(&pos, Parity::Axial);
    let f_ss = grid.dss::<T, V3<T>>(&pos, Parity::Axial);
    let (f_phi, f_sphi, f_phiphi) = if grid.axisymmetric {
        let ez = V3::new(T::zero(), T::zero(), T::one());
        let f_phi = pos.map(|p| ez.cross(&p));
        let f_sphi = f_s.map(|v| ez.cross(&v));
        let f_phiphi = f_phi.map(|v| ez.cross(&v));
        (f_phi, f_sphi, f_phiphi)
    } else {
        let f_phi = grid.dphi::<T, V3<T>>(&pos);
        let f_sphi = grid.dphi::<T, V3<T>>(&f_s);
        let f_phiphi = grid.dphi2::<T, V3<T>>(&pos);
        (f_phi, f_sphi, f_phiphi)
    };

    let n = grid.len();
    let mut g_ss = Field::constant(&grid, T::zero());
    let mut g_sp = Field::constant(&grid, T::zero());
    let mut g_pp = Field::constant(&grid, T::zero());
    let mut det_g = Field::constant(&grid, T::zero());
    let mut sqrt_det = Field::constant(&grid, T::zero());
    let mut gi_ss = Field::constant(&grid, T::zero());
    let mut gi_sp = Field::constant(&grid, T::zero());
    let mut gi_pp = Field::constant(&grid, T::zero());
    let mut nu = Field::constant(&grid, V3::zeros());
    let mut a_ss = Field::constant(&grid, T::zero());
    let mut a_sp = Field::constant(&grid, T::zero());
    let mut a_pp = Field::constant(&grid, T::zero());
    let mut h = Field::constant(&grid, T::zero());
    let mut a0n2 = Field::constant(&grid, T::zero());
    let mut chr = [
        Field::constant(&grid, T::zero()),
        Field::constant(&grid, T::zero()),
        Field::constant(&grid, T::zero()),
        Field::constant(&grid, T::zero()),
        Field::constant(&grid, T::zero()),
        Field::constant(&grid, T::zero()),
    ];

    let eps = opts.eps_imm;
    for k in 0..n {
        let (i, j) = (k / grid.n_phi, k % grid.n_phi);
        let fs = f_s.data[k];
        let fp = f_phi.data[k];
        let gss = fs.dot(&fs);
        let gsp = fs.dot(&fp);
        let gpp = fp.dot(&fp);
        let det = gss * gpp - gsp * gsp;
        if det <= eps {
            return Err(Error::DegenerateMetric {
                i,
                j,
                det: det.to_f64().unwrap_or(f64::NAN),
                eps: eps.to_f64().unwrap_or(f64::NAN),
            });
        }
        let inv_det = T::one() / det;
        let normal = fp.cross(&fs).normalize();
        let fss = f_ss.data[k];
        let fsp = f_sphi.data[k];
        let fpp = f_phiphi.data[k];
        let ass = fss.dot(&normal);
        let asp = fsp.dot(&normal);
        let app = fpp.dot(&normal);
        let giss = gpp * inv_det;
        let gisp = -gsp * inv_det;
        let gipp = gss * inv_det;
        let mean = giss * ass + lit::<T>(2.0) * gisp * asp + gipp * app;
        // |A|^2 = g^{ik} g^{jl} A_ij A_kl
        let a_mixed_sss = giss * ass + gisp * asp; // A^s_s
        let a_mixed_ssp = giss * asp + gisp * app; // A^s_phi
        let a_mixed_pss = gisp * ass + gipp * asp; // A^phi_s
        let a_mixed_ppp = gisp * asp + gipp * app; // A^phi_phi
        let a_norm2 = a_mixed_sss * a_mixed_sss
            + a_mixed_ssp * a_mixed_pss
            + a_mixed_pss * a_mixed_ssp
            + a_mixed_ppp * a_mixed_ppp;
        // Christoffels from the Gauss formula: G^k_ij = g^{kl} <d2_ij f, d_l f>
        let bss_s = fss.dot(&fs);
        let bss_p = fss.dot(&fp);
        let bsp_s = fsp.dot(&fs);
        let bsp_p = fsp.dot(&fp);
        let bpp_s = fpp.dot(&fs);
        let bpp_p = fpp.dot(&fp);

        g_ss.data[k] = gss;
        g_sp.data[k] = gsp;
        g_pp.data[k] = gpp;
        det_g.data[k] = det;
        sqrt_det.data[k] = det.sqrt();
        gi_ss.data[k] = giss;
        gi_sp.data[k] = gisp;
        gi_pp.data[k] = gipp;
        nu.data[k] = normal;
        a_ss.data[k] = ass;
        a_sp.data[k] = asp;
        a_pp.data[k] = app;
        h.data[k] = mean;
        a0n2.data[k] = a_norm2 - mean * mean * lit::<T>(0.5);
        chr[0].data[k] = giss * bss_s + gisp * bss_p;
        chr[1].data[k] = giss * bsp_s + gisp * bsp_p;
        chr[2].data[k] = giss * bpp_s + gisp * bpp_p;
        chr[3].data[k] = gisp * bss_s + gipp * bss_p;
        chr[4].data[k] = gisp * bsp_s + gipp * bsp_p;
        chr[5].data[k] = gisp * bpp_s + gipp * bpp_p;
    }

    // pole-limit consistency on the disk
    if grid.topology == Topology::Disk && grid.n_phi > 1 {
        let limits = grid.pole_limits(&h);
        let mut lo = limits[0];
        let mut hi = limits[0];
        for &v in &limits {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let spread = hi - lo;
        let hmax = h.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let hs = grid.h_s::<T>();
        let tol = opts
            .pole_tol
            .unwrap_or_else(|| lit::<T>(100.0) * hs * hs * (T::one() + hmax));
        if spread > tol {
            return Err(Error::PoleInconsistency {
                spread: spread.to_f64().unwrap_or(f64::NAN),
                tol: tol.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    // node measure
    let ws = grid.radial_weights::<T>();
    let wphi = grid.angular_weight::<T>();
    let measure = Field::from_fn(&grid, |i, j| sqrt_det.at(i, j) * ws[i] * wphi);

    // boundary frames by the conormal formula from the fixed grid frame
    let mut frames = Vec::new();
    for edge in grid.boundary_edges() {
        let i = edge.row;
        let out = if edge.outward > 0 { T::one() } else { -T::one() };
        let mut row = Vec::with_capacity(grid.n_phi);
        for j in 0..grid.n_phi {
            let gss = g_ss.at(i, j);
            let gsp = g_sp.at(i, j);
            let gpp = g_pp.at(i, j);
            let det = gss * gpp - gsp * gsp;
            if det <= T::zero() || gpp <= T::zero() {
                return Err(Error::DegenerateBoundaryMetric { j });
            }
            let denom = det.sqrt() * gpp.sqrt();
            let eta_s = out * gpp / denom;
            let eta_p = -out * gsp / denom;
            let tau_p = T::one() / gpp.sqrt();
            let fs = f_s.at(i, j);
            let fp = f_phi.at(i, j);
            row.push(BoundaryFrame {
                eta: (eta_s, eta_p),
                tau: (T::zero(), tau_p),
                eta_ambient: fs * eta_s + fp * eta_p,
                tau_ambient: fp * tau_p,
            });
        }
        frames.push(row);
    }

    Ok(GeometryCache {
        grid,
        pos,
        f_s,
        f_phi,
        nu,
        g: [g_ss, g_sp, g_pp],
        ginv: [gi_ss, gi_sp, gi_pp],
        det_g,
        sqrt_det_g: sqrt_det,
        a: [a_ss, a_sp, a_pp],
        h,
        a0_norm2: a0n2,
        christoffel: chr,
        measure,
        frames,
    })
}

impl<T: Scalar> GeometryCache<T> {
    /// Total surface area.
    pub fn area(&self) -> T {
        self.measure.data.iter().fold(T::zero(), |a, &m| a + m)
    }

    /// Integral of a scalar field against the Riemannian measure.
    pub fn integrate(&self, f: &Field<T>) -> T {
        f.data
            .iter()
            .zip(&self.measure.data)
            .fold(T::zero(), |a, (&v, &m)| a + v * m)
    }

    /// `L^2(d mu)` norm of a scalar field.
    pub fn l2_norm(&self, f: &Field<T>) -> T {
        let sq = f.map(|v| v * v);
        self.integrate(&sq).max(T::zero()).sqrt()
    }

    /// Frames of a boundary edge (index into `grid.boundary_edges()`).
    pub fn frame(&self, edge: usize) -> &[BoundaryFrame<T>] {
        &self.frames[edge]
    }

    pub fn edges(&self) -> Vec<BoundaryEdge> {
        self.grid.boundary_edges()
    }
}

/// Willmore energy `W = 1/4 \int H^2 d mu`.
pub fn willmore_energy<T: Scalar>(geom: &GeometryCache<T>) -> T {
    let h2 = geom.h.map(|v| v * v);
    geom.integrate(&h2) * lit::<T>(0.25)
}

/// Laplace–Beltrami operator in divergence form,
/// `(1/sqrt g) d_i (sqrt g g^{ij} d_j u)`.
///
/// On the disk the radial flux divergence is evaluated through staggered
/// cell faces away from the boundary: the face at the pole carries zero
/// flux exactly (the area element degenerates there), which keeps the
/// stencil second-order through the pole and the interior block exactly
/// self-adjoint for compactly supported fields. The two boundary rows and
/// the annulus use the collocated form with extrapolation ghosts.
pub fn laplace_beltrami<T: Scalar>(field: &Field<T>, geom: &GeometryCache<T>) -> Field<T> {
    let grid = &geom.grid;
    let n = grid.n_s;
    let h = grid.h_s::<T>();
    let du_s = grid.ds::<T, T>(field, Parity::Even);
    let du_p = grid.dphi::<T, T>(field);
    // coefficient fields a = sqrt(g) g^ss, c = sqrt(g) g^sphi, d = sqrt(g) g^phiphi
    let mut a = Field::constant(grid, T::zero());
    let mut c = Field::constant(grid, T::zero());
    let mut d = Field::constant(grid, T::zero());
    for k in 0..grid.len() {
        let w = geom.sqrt_det_g.data[k];
        a.data[k] = w * geom.ginv[0].data[k];
        c.data[k] = w * geom.ginv[1].data[k];
        d.data[k] = w * geom.ginv[2].data[k];
    }
    // angular flux (collocated, spectral)
    let mut p_phi = Field::constant(grid, T::zero());
    for k in 0..grid.len() {
        p_phi.data[k] = c.data[k] * du_s.data[k] + d.data[k] * du_p.data[k];
    }
    let div_p = grid.dphi::<T, T>(&p_phi);
    // collocated radial flux, for boundary rows and the annulus
    let mut p_s = Field::constant(grid, T::zero());
    for k in 0..grid.len() {
        p_s.data[k] = a.data[k] * du_s.data[k] + c.data[k] * du_p.data[k];
    }
    let div_s_col = grid.ds::<T, T>(&p_s, Parity::Odd);

    let staggered = grid.topology == Topology::Disk;
    let half = lit::<T>(0.5);
    let mut out = Field::constant(grid, T::zero());
    for j in 0..grid.n_phi {
        // face flux between nodes k-1 and k (1 <= k <= n-1)
        let face = |k: usize| {
            let abar = (a.at(k - 1, j) + a.at(k, j)) * half;
            let cbar = (c.at(k - 1, j) + c.at(k, j)) * half;
            let dus = (field.at(k, j) - field.at(k - 1, j)) / h;
            let dup = (du_p.at(k - 1, j) + du_p.at(k, j)) * half;
            abar * dus + cbar * dup
        };
        for i in 0..n {
            let div_s = if staggered && i + 2 < n {
                let f_hi = face(i + 1);
                let f_lo = if i == 0 { T::zero() } else { face(i) };
                (f_hi - f_lo) / h
            } else {
                div_s_col.at(i, j)
            };
            *out.at_mut(i, j) = (div_s + div_p.at(i, j)) / geom.sqrt_det_g.at(i, j);
        }
    }
    out
}

/// Scalar L2-gradient of the Willmore energy,
/// `1/2 (Delta_g H + |A^0|^2 H)` (normal speed density).
pub fn willmore_gradient<T: Scalar>(geom: &GeometryCache<T>) -> Field<T> {
    let lap_h = laplace_beltrami(&geom.h, geom);
    let mut out = Field::constant(&geom.grid, T::zero());
    for k in 0..geom.grid.len() {
        out.data[k] =
            lit::<T>(0.5) * (lap_h.data[k] + geom.a0_norm2.data[k] * geom.h.data[k]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hemisphere_axi(n_s: usize) -> Immersion<f64> {
        let grid = ParamGrid::new(Topology::Disk, n_s, 1, true).unwrap();
        Immersion::from_sampler(grid, samplers::hemisphere(1.0))
    }

    fn hemisphere_2d(n_s: usize, n_phi: usize) -> Immersion<f64> {
        let grid = ParamGrid::disk(n_s, n_phi).unwrap();
        Immersion::from_sampler(grid, samplers::hemisphere(1.0))
    }

    #[test]
    fn hemisphere_mean_curvature_is_two_with_second_order_error() {
        let errs: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&n| {
                let geom = build_geometry(&hemisphere_2d(n, 16)).unwrap();
                geom.h
                    .data
                    .iter()
                    .map(|&h| (h - 2.0).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[1] < 5e-3, "H error at n=64: {}", errs[1]);
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 1.9, "H convergence order {order}, errors {errs:?}");
    }

    #[test]
    fn hemisphere_energy_matches_analytic_value() {
        let geom = build_geometry(&hemisphere_2d(64, 64)).unwrap();
        let w = willmore_energy(&geom);
        let exact = 2.0 * std::f64::consts::PI;
        assert!((w - exact).abs() / exact < 1e-3, "W = {w}");
    }

    #[test]
    fn flat_disk_is_flat() {
        let grid = ParamGrid::disk(32, 16).unwrap();
        let imm: Immersion<f64> = Immersion::from_sampler(grid, samplers::equatorial_disk(1.0));
        let geom = build_geometry(&imm).unwrap();
        for k in 0..geom.grid.len() {
            assert!(geom.h.data[k].abs() < 1e-11);
            assert!(geom.a[0].data[k].abs() < 1e-11);
            assert!(geom.a0_norm2.data[k].abs() < 1e-11);
        }
        let w: f64 = willmore_energy(&geom);
        assert!(w.abs() < 1e-20);
        let grad = willmore_gradient(&geom);
        for v in grad.data {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_homogeneity() {
        let imm = hemisphere_2d(24, 16);
        let geom = build_geometry(&imm).unwrap();
        let lam = 1.7;
        let geom2 = build_geometry(&imm.scaled(lam)).unwrap();
        for k in 0..geom.grid.len() {
            assert_relative_eq!(geom2.g[0].data[k], lam * lam * geom.g[0].data[k], max_relative = 1e-12);
            assert_relative_eq!(geom2.h.data[k], geom.h.data[k] / lam, max_relative = 1e-10);
            assert_relative_eq!((geom2.nu.data[k] - geom.nu.data[k]).norm(), 0.0, epsilon = 1e-12);
        }
        // scale invariance of the energy
        let w1 = willmore_energy(&geom);
        let w2 = willmore_energy(&geom2);
        assert!((w1 - w2).abs() <= 1e-10 * w1);
    }

    #[test]
    fn translation_invariance_is_exact() {
        let imm = hemisphere_2d(16, 16);
        let w1 = willmore_energy(&build_geometry(&imm).unwrap());
        let w2 = willmore_energy(
            &build_geometry(&imm.translated(Vector3::new(1.0, -2.0, 0.5))).unwrap(),
        );
        assert_relative_eq!(w1, w2, max_relative = 1e-12);
    }

    #[test]
    fn willmore_gradient_vanishes_on_hemisphere_under_refinement() {
        let sup = |n: usize| {
            let geom = build_geometry(&hemisphere_axi(n)).unwrap();
            willmore_gradient(&geom)
                .data
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max)
        };
        let e32 = sup(32);
        let e64 = sup(64);
        let order = (e32 / e64).log2();
        assert!(order > 0.9, "gradient order {order} ({e32} -> {e64})");
    }

    #[test]
    fn laplace_of_constant_vanishes() {
        let geom = build_geometry(&hemisphere_2d(16, 16)).unwrap();
        let c = Field::constant(&geom.grid, 3.25);
        let lap = laplace_beltrami(&c, &geom);
        for v in lap.data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_of_height_on_hemisphere() {
        // Delta_g z = -H nu_z = -2 z on the unit hemisphere
        let sup_err = |n: usize| {
            let geom = build_geometry(&hemisphere_2d(n, 16)).unwrap();
            let z = geom.pos.map(|p| p.z);
            let lap = laplace_beltrami(&z, &geom);
            let mut max_err = 0.0f64;
            for k in 0..geom.grid.len() {
                max_err = max_err.max((lap.data[k] + 2.0 * geom.pos.data[k].z).abs());
            }
            max_err
        };
        let e48 = sup_err(48);
        assert!(e48 < 6e-3, "max error {e48}");
        let e96 = sup_err(96);
        let order = (e48 / e96).log2();
        assert!(order > 1.5, "laplace order {order} ({e48} -> {e96})");
    }

    #[test]
    fn laplace_on_flat_disk_matches_polar_formula() {
        let grid = ParamGrid::disk(64, 16).unwrap();
        let imm = Immersion::from_sampler(grid, samplers::equatorial_disk(1.0));
        let geom = build_geometry(&imm).unwrap();
        let f = Field::from_fn(&geom.grid, |i, j| {
            let s = geom.grid.s::<f64>(i);
            let p = geom.grid.phi::<f64>(j);
            s * s * p.cos()
        });
        let lap = laplace_beltrami(&f, &geom);
        // s^2 cos(phi) is not smooth at the pole; compare where no stencil
        // crosses it
        for i in 3..geom.grid.n_s - 1 {
            for j in 0..geom.grid.n_phi {
                let p = geom.grid.phi::<f64>(j);
                assert_relative_eq!(lap.at(i, j), 3.0 * p.cos(), epsilon = 2e-3);
            }
        }
        // smooth oracle valid at every node: Delta(s^3 cos phi) = 8 s cos phi
        let f = Field::from_fn(&geom.grid, |i, j| {
            let s = geom.grid.s::<f64>(i);
            let p = geom.grid.phi::<f64>(j);
            s * s * s * p.cos()
        });
        let lap = laplace_beltrami(&f, &geom);
        let h = geom.grid.h_s::<f64>();
        for i in 0..geom.grid.n_s {
            for j in 0..geom.grid.n_phi {
                let s = geom.grid.s::<f64>(i);
                let p = geom.grid.phi::<f64>(j);
                // the pole-adjacent flux rows carry an h^2/s error
                let tol = 4e-3 + 1.5 * h * h / s;
                assert_relative_eq!(lap.at(i, j), 8.0 * s * p.cos(), epsilon = tol);
            }
        }
    }

    #[test]
    fn discrete_self_adjointness_for_compact_fields() {
        let geom = build_geometry(&hemisphere_2d(32, 16)).unwrap();
        let bump = |s: f64, c: f64| {
            let t = (s - c) / 0.18;
            if t.abs() < 1.0 {
                (1.0 - t * t).powi(4)
            } else {
                0.0
            }
        };
        let u = Field::from_fn(&geom.grid, |i, j| {
            bump(geom.grid.s::<f64>(i), 0.45) * (2.0 * geom.grid.phi::<f64>(j)).cos()
        });
        let v = Field::from_fn(&geom.grid, |i, j| {
            bump(geom.grid.s::<f64>(i), 0.55) * (geom.grid.phi::<f64>(j)).sin()
        });
        let lu = laplace_beltrami(&u, &geom);
        let lv = laplace_beltrami(&v, &geom);
        let a = geom.integrate(&lu.zip(&v, |x, y| x * y));
        let b = geom.integrate(&u.zip(&lv, |x, y| x * y));
        let scale = geom.l2_norm(&lu) * geom.l2_norm(&v) + 1e-30;
        assert!(
            (a - b).abs() / scale < 1e-10,
            "asymmetry {} vs scale {}",
            (a - b).abs(),
            scale
        );
    }

    #[test]
    fn boundary_frame_is_orthonormal_and_points_down_on_hemisphere() {
        let geom = build_geometry(&hemisphere_2d(48, 16)).unwrap();
        let edge = &geom.frames[0];
        for f in edge {
            // g-orthonormality via ambient images
            assert_relative_eq!(f.eta_ambient.norm(), 1.0, epsilon = 1e-10);
            assert_relative_eq!(f.tau_ambient.norm(), 1.0, epsilon = 1e-10);
            assert!(f.eta_ambient.dot(&f.tau_ambient).abs() < 1e-10);
            // hemisphere meets the plane orthogonally: df.eta = -e3 + O(h^2)
            assert!((f.eta_ambient - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn flat_disk_conormal_is_radial() {
        let geom = {
            let grid = ParamGrid::disk(32, 16).unwrap();
            build_geometry(&Immersion::from_sampler(grid, samplers::equatorial_disk(1.0))).unwrap()
        };
        for (j, f) in geom.frames[0].iter().enumerate() {
            let p = geom.grid.phi::<f64>(j);
            let radial = Vector3::new(p.cos(), p.sin(), 0.0);
            assert!((f.eta_ambient - radial).norm() < 1e-9);
        }
    }

    #[test]
    fn conormal_formula_is_scale_homogeneous() {
        let imm = hemisphere_2d(24, 16);
        let g1 = build_geometry(&imm).unwrap();
        let g2 = build_geometry(&imm.scaled(2.0)).unwrap();
        for (f1, f2) in g1.frames[0].iter().zip(g2.frames[0].iter()) {
            // direction invariant, coefficients scale by 1/lambda
            assert_relative_eq!(f2.eta.0, f1.eta.0 / 2.0, max_relative = 1e-10);
            assert_relative_eq!(f2.eta.1, f1.eta.1 / 2.0, max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    #[test]
    fn critical_catenoid_is_minimal_annulus() {
        let grid = ParamGrid::annulus(48, 16).unwrap();
        let imm: Immersion<f64> = Immersion::from_sampler(grid, samplers::critical_catenoid());
        let geom = build_geometry(&imm).unwrap();
        let hmax = geom.h.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(hmax < 5e-3, "catenoid H sup {hmax}");
        // boundary circles on the unit sphere
        for edge in &geom.frames {
            let _ = edge;
        }
        for j in 0..geom.grid.n_phi {
            assert_relative_eq!(geom.pos.at(0, j).norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(geom.pos.at(geom.grid.n_s - 1, j).norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_metric_is_reported() {
        let grid = ParamGrid::disk(16, 16).unwrap();
        let positions = Field::constant(&grid, Vector3::new(1.0, 0.0, 0.0));
        let imm = Immersion::from_positions(grid, positions);
        let err = match build_geometry(&imm) {
            Err(e) => e,
            Ok(_) => panic!("degenerate geometry accepted"),
        };
        assert!(matches!(err, Error::DegenerateMetric { .. }));
    }

    #[test]
    fn axisymmetric_path_matches_full_grid_on_axisymmetric_data() {
        let axi = build_geometry(&hemisphere_axi(32)).unwrap();
        let full = build_geometry(&hemisphere_2d(32, 16)).unwrap();
        for i in 0..32 {
            assert_relative_eq!(axi.h.at(i, 0), full.h.at(i, 0), max_relative = 1e-9);
            assert_relative_eq!(
                axi.sqrt_det_g.at(i, 0),
                full.sqrt_det_g.at(i, 0),
                max_relative = 1e-12
            );
        }
        let w_axi = willmore_energy(&axi);
        let w_full = willmore_energy(&full);
        assert_relative_eq!(w_axi, w_full, max_relative = 1e-12);
    }
}
