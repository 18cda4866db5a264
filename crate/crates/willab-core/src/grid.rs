//! Tensor-product parameter grids and discrete differentiation.
//!
//! The parameter domain is `(s, phi) in [0,1] x [0, 2pi)` with `phi`
//! periodic. Radial derivatives use second-order central differences with
//! third-order one-sided closures at boundary rows; angular derivatives use
//! Fourier collocation (trigonometric differentiation matrices).
//!
//! Disk topology places the radial nodes at `s_i = (i + 1/2) h` with
//! `h = 2/(2 n_s - 1)`, so the last node sits exactly on the boundary
//! `s = 1` while no node sits on the coordinate pole. Stencils that reach
//! past the pole use the exact reflection identity
//! `u(-s, phi) = +- u(s, phi + pi)`; the sign is the parity of the field
//! (odd for tensor components carrying a single radial index, even
//! otherwise). Annulus topology uses a plain endpoint grid, both ends being
//! boundary rows.

use crate::error::{Error, Result};
use crate::{lit, Scalar};
use std::ops::{Add, Mul, Neg, Sub};

/// Surface topology of the parameter domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Topology {
    /// One boundary circle at `s = 1`, coordinate pole at `s = 0`.
    Disk,
    /// Two boundary circles, at `s = 0` and `s = 1`.
    Annulus,
}

/// Reflection parity of a field across the disk pole.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    /// Scalar functions on the surface (and metric components with an even
    /// number of radial indices).
    Even,
    /// Components with an odd number of radial indices (e.g. radial fluxes).
    Odd,
    /// Position-like vector fields of a configuration symmetric about the
    /// `z` axis: continued through the pole by the antipodal column, which
    /// in axisymmetric storage (`n_phi == 1`) degenerates to a half-turn
    /// rotation of the value about the axis.
    Axial,
}

/// A boundary circle of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    /// Radial row index of the edge.
    pub row: usize,
    /// Sign of the outward radial direction (`+1` at `s = 1`, `-1` at `s = 0`).
    pub outward: i8,
}

/// Discrete parametrization of a compact surface with boundary.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamGrid {
    pub topology: Topology,
    pub n_s: usize,
    pub n_phi: usize,
    /// Restrict all fields to angular mode zero (`n_phi == 1`).
    pub axisymmetric: bool,
}

impl ParamGrid {
    pub fn new(topology: Topology, n_s: usize, n_phi: usize, axisymmetric: bool) -> Result<Self> {
        if n_s < 8 {
            return Err(Error::InvalidParameter(format!("n_s = {n_s} < 8")));
        }
        if axisymmetric {
            if n_phi != 1 {
                return Err(Error::InvalidParameter(format!(
                    "axisymmetric mode requires n_phi = 1, got {n_phi}"
                )));
            }
        } else {
            if n_phi < 8 {
                return Err(Error::InvalidParameter(format!("n_phi = {n_phi} < 8")));
            }
            if n_phi % 2 != 0 {
                return Err(Error::InvalidParameter(format!(
                    "Fourier collocation requires even n_phi, got {n_phi}"
                )));
            }
        }
        Ok(Self { topology, n_s, n_phi, axisymmetric })
    }

    pub fn disk(n_s: usize, n_phi: usize) -> Result<Self> {
        Self::new(Topology::Disk, n_s, n_phi, n_phi == 1)
    }

    pub fn annulus(n_s: usize, n_phi: usize) -> Result<Self> {
        Self::new(Topology::Annulus, n_s, n_phi, n_phi == 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_s * self.n_phi
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_phi + j
    }

    /// Radial grid spacing.
    pub fn h_s<T: Scalar>(&self) -> T {
        match self.topology {
            Topology::Disk => lit::<T>(2.0) / lit::<T>(2.0 * self.n_s as f64 - 1.0),
            Topology::Annulus => T::one() / lit::<T>(self.n_s as f64 - 1.0),
        }
    }

    /// Radial coordinate of row `i`.
    pub fn s<T: Scalar>(&self, i: usize) -> T {
        let h = self.h_s::<T>();
        match self.topology {
            Topology::Disk => (lit::<T>(i as f64) + lit::<T>(0.5)) * h,
            Topology::Annulus => lit::<T>(i as f64) * h,
        }
    }

    /// Angular coordinate of column `j`.
    pub fn phi<T: Scalar>(&self, j: usize) -> T {
        T::two_pi() * lit::<T>(j as f64) / lit::<T>(self.n_phi as f64)
    }

    pub fn boundary_edges(&self) -> Vec<BoundaryEdge> {
        match self.topology {
            Topology::Disk => vec![BoundaryEdge { row: self.n_s - 1, outward: 1 }],
            Topology::Annulus => vec![
                BoundaryEdge { row: 0, outward: -1 },
                BoundaryEdge { row: self.n_s - 1, outward: 1 },
            ],
        }
    }

    /// Column index of the angular antipode `phi + pi`.
    #[inline]
    pub fn antipode(&self, j: usize) -> usize {
        if self.n_phi == 1 {
            0
        } else {
            (j + self.n_phi / 2) % self.n_phi
        }
    }

    /// Radial quadrature weights (second-order composite rule; on the disk
    /// the strip between the pole and the first node is closed by linear
    /// extrapolation).
    pub fn radial_weights<T: Scalar>(&self) -> Vec<T> {
        let n = self.n_s;
        let h = self.h_s::<T>();
        let half = lit::<T>(0.5);
        let mut w = vec![h; n];
        match self.topology {
            Topology::Disk => {
                w[0] = h * lit::<T>(9.0 / 8.0);
                w[1] = h * lit::<T>(7.0 / 8.0);
                w[n - 1] = h * half;
            }
            Topology::Annulus => {
                w[0] = h * half;
                w[n - 1] = h * half;
            }
        }
        w
    }

    /// Angular quadrature weight (exact for trigonometric polynomials).
    pub fn angular_weight<T: Scalar>(&self) -> T {
        T::two_pi() / lit::<T>(self.n_phi as f64)
    }

    /// Spectral first-derivative matrix in `phi` (dense `n_phi x n_phi`).
    pub fn dphi_matrix<T: Scalar>(&self) -> Vec<T> {
        let n = self.n_phi;
        let mut d = vec![T::zero(); n * n];
        if n == 1 {
            return d;
        }
        let h = T::two_pi() / lit::<T>(n as f64);
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    continue;
                }
                let diff = j as i64 - k as i64;
                let sign = if diff.rem_euclid(2) == 0 { T::one() } else { -T::one() };
                let x = lit::<T>(diff as f64) * h * lit::<T>(0.5);
                d[j * n + k] = sign * lit::<T>(0.5) / x.tan();
            }
        }
        d
    }

    /// Spectral second-derivative matrix in `phi`.
    pub fn dphi2_matrix<T: Scalar>(&self) -> Vec<T> {
        let n = self.n_phi;
        let mut d = vec![T::zero(); n * n];
        if n == 1 {
            return d;
        }
        let h = T::two_pi() / lit::<T>(n as f64);
        let diag = -T::pi() * T::pi() / (lit::<T>(3.0) * h * h) - lit::<T>(1.0 / 6.0);
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    d[j * n + k] = diag;
                } else {
                    let diff = j as i64 - k as i64;
                    let sign = if diff.rem_euclid(2) == 0 { T::one() } else { -T::one() };
                    let s = (lit::<T>(diff as f64) * h * lit::<T>(0.5)).sin();
                    d[j * n + k] = -sign / (lit::<T>(2.0) * s * s);
                }
            }
        }
        d
    }
}

/// Per-node data on a [`ParamGrid`], stored row-major in `(s, phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<V> {
    pub n_s: usize,
    pub n_phi: usize,
    pub data: Vec<V>,
}

/// Value types a field can carry: scalars and small vectors.
pub trait Value<T>:
    Copy
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Neg<Output = Self>
    + Mul<T, Output = Self>
{
    fn zero_value() -> Self;

    /// Half-turn rotation about the `z` axis; identity for scalars.
    fn axial_reflect(self) -> Self;
}

macro_rules! impl_value_scalar {
    ($t:ty) => {
        impl Value<$t> for $t {
            #[inline]
            fn zero_value() -> Self {
                0.0
            }

            #[inline]
            fn axial_reflect(self) -> Self {
                self
            }
        }
    };
}
impl_value_scalar!(f32);
impl_value_scalar!(f64);

impl<T: Scalar> Value<T> for nalgebra::Vector3<T> {
    #[inline]
    fn zero_value() -> Self {
        nalgebra::Vector3::zeros()
    }

    #[inline]
    fn axial_reflect(self) -> Self {
        nalgebra::Vector3::new(-self.x, -self.y, self.z)
    }
}

impl<V: Copy> Field<V> {
    pub fn from_fn(grid: &ParamGrid, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for i in 0..grid.n_s {
            for j in 0..grid.n_phi {
                data.push(f(i, j));
            }
        }
        Self { n_s: grid.n_s, n_phi: grid.n_phi, data }
    }

    pub fn constant(grid: &ParamGrid, v: V) -> Self {
        Self { n_s: grid.n_s, n_phi: grid.n_phi, data: vec![v; grid.len()] }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> V {
        self.data[i * self.n_phi + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut V {
        &mut self.data[i * self.n_phi + j]
    }

    pub fn map<W: Copy>(&self, f: impl Fn(V) -> W) -> Field<W> {
        Field { n_s: self.n_s, n_phi: self.n_phi, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip<W: Copy, U: Copy>(&self, other: &Field<W>, f: impl Fn(V, W) -> U) -> Field<U> {
        debug_assert_eq!(self.data.len(), other.data.len());
        Field {
            n_s: self.n_s,
            n_phi: self.n_phi,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Difference-form coefficients of degree-5 polynomial extrapolation one
/// step past the end: `ghost = u_0 + sum_k c_k (u_k - u_0)` over the last
/// six rows (nearest first). Keeps the truncation-error profile of the
/// centered stencils smooth up to the boundary row and annihilates
/// constants exactly.
const GHOST_EXTRAP_DIFF: [f64; 5] = [-15.0, 20.0, -15.0, 6.0, -1.0];

impl ParamGrid {
    /// Value of `f` at logical radial index `i`, column `j`. Negative
    /// indices reflect through the disk pole; indices past the last row are
    /// closed by extrapolation ghosts (and by reflection ghosts at the
    /// annulus inner edge for `i < 0`).
    #[inline]
    fn fetch<T: Scalar, V: Value<T>>(&self, f: &Field<V>, i: i64, j: usize, parity: Parity) -> V {
        let n = self.n_s as i64;
        if i >= 0 && i < n {
            f.at(i as usize, j)
        } else if i < 0 {
            match self.topology {
                Topology::Disk => {
                    let k = (-1 - i) as usize;
                    let v = f.at(k, self.antipode(j));
                    match parity {
                        Parity::Even => v,
                        Parity::Odd => -v,
                        Parity::Axial => {
                            if self.n_phi == 1 {
                                v.axial_reflect()
                            } else {
                                v
                            }
                        }
                    }
                }
                Topology::Annulus => {
                    debug_assert_eq!(i, -1);
                    let base = f.at(0, j);
                    let mut acc = base;
                    for (k, c) in GHOST_EXTRAP_DIFF.iter().enumerate() {
                        acc = acc + (f.at(k + 1, j) - base) * lit::<T>(*c);
                    }
                    acc
                }
            }
        } else {
            debug_assert_eq!(i, n);
            let base = f.at(self.n_s - 1, j);
            let mut acc = base;
            for (k, c) in GHOST_EXTRAP_DIFF.iter().enumerate() {
                acc = acc + (f.at(self.n_s - 2 - k, j) - base) * lit::<T>(*c);
            }
            acc
        }
    }

    /// First radial derivative: centered differences everywhere, closed by
    /// pole reflection and boundary extrapolation ghosts.
    pub fn ds<T: Scalar, V: Value<T>>(&self, f: &Field<V>, parity: Parity) -> Field<V> {
        let n = self.n_s;
        let h = self.h_s::<T>();
        let inv2h = T::one() / (lit::<T>(2.0) * h);
        let mut out = Field::constant(self, V::zero_value());
        for j in 0..self.n_phi {
            for i in 0..n {
                let v = (self.fetch(f, i as i64 + 1, j, parity)
                    - self.fetch(f, i as i64 - 1, j, parity))
                    * inv2h;
                *out.at_mut(i, j) = v;
            }
        }
        out
    }

    /// Second radial derivative (centered, same closures as [`Self::ds`]).
    pub fn dss<T: Scalar, V: Value<T>>(&self, f: &Field<V>, parity: Parity) -> Field<V> {
        let n = self.n_s;
        let h = self.h_s::<T>();
        let invh2 = T::one() / (h * h);
        let mut out = Field::constant(self, V::zero_value());
        for j in 0..self.n_phi {
            for i in 0..n {
                let v = (self.fetch(f, i as i64 + 1, j, parity) - f.at(i, j) * lit::<T>(2.0)
                    + self.fetch(f, i as i64 - 1, j, parity))
                    * invh2;
                *out.at_mut(i, j) = v;
            }
        }
        out
    }

    /// First angular derivative (spectral; zero in axisymmetric mode).
    pub fn dphi<T: Scalar, V: Value<T>>(&self, f: &Field<V>) -> Field<V> {
        self.apply_phi_matrix(f, &self.dphi_matrix::<T>())
    }

    /// Second angular derivative (spectral).
    pub fn dphi2<T: Scalar, V: Value<T>>(&self, f: &Field<V>) -> Field<V> {
        self.apply_phi_matrix(f, &self.dphi2_matrix::<T>())
    }

    // Difference form: trigonometric differentiation matrices have zero row
    // sums, so sum m_jk (f_k - f_j); constants are annihilated exactly.
    fn apply_phi_matrix<T: Scalar, V: Value<T>>(&self, f: &Field<V>, m: &[T]) -> Field<V> {
        let n = self.n_phi;
        let mut out = Field::constant(self, V::zero_value());
        if n == 1 {
            return out;
        }
        for i in 0..self.n_s {
            for j in 0..n {
                let base = f.at(i, j);
                let mut acc = V::zero_value();
                for k in 0..n {
                    if k != j {
                        acc = acc + (f.at(i, k) - base) * m[j * n + k];
                    }
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    /// Extrapolated pole limits per angular column, `(3 f_0 - f_1)/2`.
    pub fn pole_limits<T: Scalar>(&self, f: &Field<T>) -> Vec<T> {
        debug_assert_eq!(self.topology, Topology::Disk);
        (0..self.n_phi)
            .map(|j| (lit::<T>(3.0) * f.at(0, j) - f.at(1, j)) * lit::<T>(0.5))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn poly_field(grid: &ParamGrid, f: impl Fn(f64, f64) -> f64) -> Field<f64> {
        Field::from_fn(grid, |i, j| f(grid.s::<f64>(i), grid.phi::<f64>(j)))
    }

    #[test]
    fn grid_validation() {
        assert!(ParamGrid::disk(8, 16).is_ok());
        assert!(ParamGrid::disk(4, 16).is_err());
        assert!(ParamGrid::disk(16, 9).is_err());
        assert!(ParamGrid::new(Topology::Disk, 16, 1, true).is_ok());
        assert!(ParamGrid::new(Topology::Disk, 16, 4, true).is_err());
    }

    #[test]
    fn disk_nodes_hit_boundary_not_pole() {
        let g = ParamGrid::disk(16, 16).unwrap();
        assert_relative_eq!(g.s::<f64>(15), 1.0, epsilon = 1e-15);
        assert!(g.s::<f64>(0) > 0.0);
    }

    #[test]
    fn radial_weights_sum_to_length() {
        for g in [ParamGrid::disk(16, 16).unwrap(), ParamGrid::annulus(16, 16).unwrap()] {
            let w: f64 = g.radial_weights::<f64>().iter().sum();
            assert_relative_eq!(w, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn quadrature_is_second_order_on_disk() {
        // integrand vanishing at the pole, like an area element
        let integrand = |s: f64| s * (1.5 * s).cos();
        let quad = |n: usize| {
            let g = ParamGrid::disk(n, 8).unwrap();
            let w = g.radial_weights::<f64>();
            (0..n).map(|i| w[i] * integrand(g.s::<f64>(i))).sum::<f64>()
        };
        let reference = {
            // dense trapezoid oracle
            let m = 200_000;
            let h = 1.0 / m as f64;
            (0..=m)
                .map(|k| {
                    let x = k as f64 * h;
                    let w = if k == 0 || k == m { 0.5 } else { 1.0 };
                    w * h * integrand(x)
                })
                .sum::<f64>()
        };
        let e1 = (quad(16) - reference).abs();
        let e2 = (quad(32) - reference).abs();
        let order = (e1 / e2).log2();
        assert!(order > 1.8, "observed quadrature order {order}");
    }

    #[test]
    fn ds_exact_for_quadratics_and_cubic_at_edges() {
        let g = ParamGrid::annulus(32, 8).unwrap();
        let f = poly_field(&g, |s, _| s * s);
        let d = g.ds::<f64, f64>(&f, Parity::Even);
        for i in 0..32 {
            assert_relative_eq!(d.at(i, 3), 2.0 * g.s::<f64>(i), epsilon = 1e-12);
        }
        // ghost closure reproduces the centered truncation profile: the
        // cubic's edge error equals the interior h^2 f'''/6 term
        let f = poly_field(&g, |s, _| s * s * s);
        let d = g.ds::<f64, f64>(&f, Parity::Even);
        let h = g.h_s::<f64>();
        assert_relative_eq!(d.at(31, 0), 3.0 + h * h, max_relative = 1e-10);
        assert_relative_eq!(d.at(0, 0), h * h, epsilon = 1e-12);
    }

    #[test]
    fn dss_edge_closure_exact_for_cubics() {
        // centered 3-point second differences are exact on cubics, and the
        // degree-5 ghost extrapolation preserves that at the edges
        let g = ParamGrid::annulus(32, 8).unwrap();
        let f = poly_field(&g, |s, _| s * s * s);
        let d = g.dss::<f64, f64>(&f, Parity::Even);
        assert_relative_eq!(d.at(31, 0), 6.0, max_relative = 1e-9);
        assert_relative_eq!(d.at(0, 0), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn spectral_phi_derivatives_are_exact_for_band_limited_fields() {
        let g = ParamGrid::disk(8, 16).unwrap();
        let f = poly_field(&g, |_, p| (3.0 * p).sin());
        let d1 = g.dphi::<f64, f64>(&f);
        let d2 = g.dphi2::<f64, f64>(&f);
        for j in 0..16 {
            let p = g.phi::<f64>(j);
            assert_relative_eq!(d1.at(3, j), 3.0 * (3.0 * p).cos(), epsilon = 1e-10);
            assert_relative_eq!(d2.at(3, j), -9.0 * (3.0 * p).sin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pole_reflection_differentiates_smooth_disk_fields() {
        // u = s^2 (smooth through the pole as x^2 + y^2)
        let g = ParamGrid::disk(32, 16).unwrap();
        let f = poly_field(&g, |s, _| s * s);
        let d = g.ds::<f64, f64>(&f, Parity::Even);
        let dd = g.dss::<f64, f64>(&f, Parity::Even);
        assert_relative_eq!(d.at(0, 5), 2.0 * g.s::<f64>(0), max_relative = 1e-9);
        assert_relative_eq!(dd.at(0, 5), 2.0, max_relative = 1e-9);
        // u = s cos(phi) (the smooth Cartesian coordinate x): odd through the
        // pole along a fixed ray, captured by the antipodal rule
        let f = poly_field(&g, |s, p| s * p.cos());
        let d = g.ds::<f64, f64>(&f, Parity::Even);
        for j in 0..16 {
            let p = g.phi::<f64>(j);
            assert_relative_eq!(d.at(0, j), p.cos(), max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn f32_path_compiles_and_differentiates() {
        let g = ParamGrid::annulus(16, 8).unwrap();
        let f: Field<f32> = Field::from_fn(&g, |i, _| {
            let s = g.s::<f32>(i);
            s * s
        });
        let d = g.ds::<f32, f32>(&f, Parity::Even);
        let s = g.s::<f32>(8);
        assert!((d.at(8, 0) - 2.0 * s).abs() < 1e-3);
    }
}
