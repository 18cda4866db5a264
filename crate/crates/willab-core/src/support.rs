//! Analytic support surfaces: signed distance, nearest-point projection,
//! normal field and shape operator.
//!
//! A surface is one of three variants: a plane, a sphere, or a general
//! analytic level set `{F = 0}` with user-supplied gradient and Hessian.
//! All quantities derive from the signed distance `d` of the tubular
//! neighborhood coordinates: `grad d(y) = N(Pi(y))` and the shape operator
//! is `A(v, w) = -<v, Hess d(y) w>`, extended off the surface.

use crate::error::{Error, Result};
use crate::{is_finite, lit, Scalar};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use std::sync::Arc;

/// Analytic level-set description of a surface `{F = 0}`.
pub trait LevelSet<T: Scalar>: Send + Sync {
    fn value(&self, y: &Vector3<T>) -> T;
    fn gradient(&self, y: &Vector3<T>) -> Vector3<T>;
    fn hessian(&self, y: &Vector3<T>) -> Matrix3<T>;
}

/// Axis-aligned ellipsoid `x^2/a^2 + y^2/b^2 + z^2/c^2 = 1`.
pub struct Ellipsoid<T> {
    pub semi_axes: Vector3<T>,
}

impl<T: Scalar> LevelSet<T> for Ellipsoid<T> {
    fn value(&self, y: &Vector3<T>) -> T {
        let a = &self.semi_axes;
        y.x * y.x / (a.x * a.x) + y.y * y.y / (a.y * a.y) + y.z * y.z / (a.z * a.z) - T::one()
    }

    fn gradient(&self, y: &Vector3<T>) -> Vector3<T> {
        let a = &self.semi_axes;
        let two = lit::<T>(2.0);
        Vector3::new(two * y.x / (a.x * a.x), two * y.y / (a.y * a.y), two * y.z / (a.z * a.z))
    }

    fn hessian(&self, _y: &Vector3<T>) -> Matrix3<T> {
        let a = &self.semi_axes;
        let two = lit::<T>(2.0);
        Matrix3::from_diagonal(&Vector3::new(
            two / (a.x * a.x),
            two / (a.y * a.y),
            two / (a.z * a.z),
        ))
    }
}

/// Geometric variant of the support surface.
pub enum SurfaceKind<T: Scalar> {
    Plane { point: Vector3<T>, normal: Vector3<T> },
    Sphere { center: Vector3<T>, radius: T },
    Implicit(Arc<dyn LevelSet<T>>),
}

impl<T: Scalar> Clone for SurfaceKind<T> {
    fn clone(&self) -> Self {
        match self {
            Self::Plane { point, normal } => Self::Plane { point: *point, normal: *normal },
            Self::Sphere { center, radius } => Self::Sphere { center: *center, radius: *radius },
            Self::Implicit(f) => Self::Implicit(f.clone()),
        }
    }
}

/// Oriented analytic support surface with a tubular neighborhood.
#[derive(Clone)]
pub struct SupportSurface<T: Scalar> {
    pub kind: SurfaceKind<T>,
    /// Sign selecting the normal field `N`.
    pub orientation_sign: T,
    /// Radius of the tubular neighborhood on which the projection is valid.
    pub tubular_radius: T,
}

const MAX_NEWTON: usize = 50;

impl<T: Scalar> SupportSurface<T> {
    pub fn plane(point: Vector3<T>, normal: Vector3<T>) -> Self {
        let n = normal.normalize();
        Self {
            kind: SurfaceKind::Plane { point, normal: n },
            orientation_sign: T::one(),
            tubular_radius: lit::<T>(f64::INFINITY),
        }
    }

    pub fn sphere(center: Vector3<T>, radius: T) -> Self {
        Self {
            kind: SurfaceKind::Sphere { center, radius },
            orientation_sign: T::one(),
            tubular_radius: radius,
        }
    }

    pub fn implicit(level: Arc<dyn LevelSet<T>>, tubular_radius: T) -> Self {
        Self { kind: SurfaceKind::Implicit(level), orientation_sign: T::one(), tubular_radius }
    }

    pub fn ellipsoid(semi_axes: Vector3<T>, tubular_radius: T) -> Self {
        Self::implicit(Arc::new(Ellipsoid { semi_axes }), tubular_radius)
    }

    pub fn with_orientation(mut self, sign: T) -> Self {
        self.orientation_sign = sign;
        self
    }

    /// Flip the orientation in place.
    pub fn flip_orientation(&mut self) {
        self.orientation_sign = -self.orientation_sign;
    }

    fn check_tubular(&self, d: T) -> Result<()> {
        if d.abs() < self.tubular_radius {
            Ok(())
        } else {
            Err(Error::OutsideTubularNeighborhood {
                dist: d.abs().to_f64().unwrap_or(f64::NAN),
                radius: self.tubular_radius.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    /// Signed distance `d(y)`; the sign follows the orientation.
    pub fn signed_distance(&self, y: &Vector3<T>) -> Result<T> {
        let d = match &self.kind {
            SurfaceKind::Plane { point, normal } => (y - point).dot(normal) * self.orientation_sign,
            SurfaceKind::Sphere { center, radius } => {
                let rho = (y - center).norm();
                if rho <= T::zero() {
                    return Err(Error::OutsideTubularNeighborhood {
                        dist: radius.to_f64().unwrap_or(f64::NAN),
                        radius: radius.to_f64().unwrap_or(f64::NAN),
                    });
                }
                (rho - *radius) * self.orientation_sign
            }
            SurfaceKind::Implicit(_) => {
                let p = self.project(y)?;
                (y - p).dot(&self.normal_on_surface(&p))
            }
        };
        self.check_tubular(d)?;
        Ok(d)
    }

    /// Nearest-point projection onto the surface.
    pub fn project(&self, y: &Vector3<T>) -> Result<Vector3<T>> {
        match &self.kind {
            SurfaceKind::Plane { point, normal } => {
                let d = (y - point).dot(normal);
                self.check_tubular(d)?;
                Ok(y - normal * d)
            }
            SurfaceKind::Sphere { center, radius } => {
                let r = y - center;
                let rho = r.norm();
                self.check_tubular(rho - *radius)?;
                Ok(center + r * (*radius / rho))
            }
            SurfaceKind::Implicit(level) => {
                let p = self.newton_project(level.as_ref(), y)?;
                let d = (y - p).norm();
                self.check_tubular(d)?;
                Ok(p)
            }
        }
    }

    fn newton_project(&self, level: &dyn LevelSet<T>, y: &Vector3<T>) -> Result<Vector3<T>> {
        let scale = T::one() + y.norm();
        let tol = lit::<T>(1e-12) * scale;
        let mut p = *y;
        let mut lambda = T::zero();
        let mut residual = T::zero();
        for _ in 0..MAX_NEWTON {
            let grad = level.gradient(&p);
            let val = level.value(&p);
            let stat = p - y + grad * lambda;
            residual = stat.norm() + val.abs();
            if residual < tol {
                return Ok(p);
            }
            let hess = level.hessian(&p);
            let mut m = Matrix4::<T>::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    m[(r, c)] = hess[(r, c)] * lambda;
                }
                m[(r, r)] += T::one();
                m[(r, 3)] = grad[r];
                m[(3, r)] = grad[r];
            }
            let rhs = Vector4::new(-stat.x, -stat.y, -stat.z, -val);
            let delta = match m.lu().solve(&rhs) {
                Some(d) => d,
                None => break,
            };
            p += Vector3::new(delta.x, delta.y, delta.z);
            lambda += delta.w;
            if !is_finite(p.norm()) {
                break;
            }
        }
        Err(Error::NewtonDivergence {
            iters: MAX_NEWTON,
            residual: residual.to_f64().unwrap_or(f64::NAN),
        })
    }

    /// Oriented unit normal at a point on the surface.
    pub fn normal_on_surface(&self, p: &Vector3<T>) -> Vector3<T> {
        match &self.kind {
            SurfaceKind::Plane { normal, .. } => normal * self.orientation_sign,
            SurfaceKind::Sphere { center, .. } => (p - center).normalize() * self.orientation_sign,
            SurfaceKind::Implicit(level) => {
                level.gradient(p).normalize() * self.orientation_sign
            }
        }
    }

    /// `N(Pi(y))`, the normal transported through the projection.
    pub fn normal_at_projection(&self, y: &Vector3<T>) -> Result<Vector3<T>> {
        let p = self.project(y)?;
        Ok(self.normal_on_surface(&p))
    }

    /// Differential of the oriented normal field at a surface point,
    /// extended by the tangential projector.
    fn normal_differential(&self, p: &Vector3<T>) -> Matrix3<T> {
        match &self.kind {
            SurfaceKind::Plane { .. } => Matrix3::zeros(),
            SurfaceKind::Sphere { center, radius } => {
                let n = (p - center).normalize();
                let proj = Matrix3::identity() - n * n.transpose();
                proj * (self.orientation_sign / *radius)
            }
            SurfaceKind::Implicit(level) => {
                let g = level.gradient(p);
                let norm = g.norm();
                let n = g / norm;
                let proj = Matrix3::identity() - n * n.transpose();
                proj * level.hessian(p) * (self.orientation_sign / norm)
            }
        }
    }

    /// Hessian of the signed distance at `y` in the tubular neighborhood.
    pub fn hess_distance(&self, y: &Vector3<T>) -> Result<Matrix3<T>> {
        let p = self.project(y)?;
        let d = self.signed_distance(y)?;
        let n = self.normal_on_surface(&p);
        let dn = self.normal_differential(&p);
        let tangential = Matrix3::identity() - n * n.transpose();
        let m = Matrix3::identity() + dn * d;
        let dpi = m
            .lu()
            .solve(&tangential)
            .ok_or_else(|| Error::LinearSolveFailed {
                reason: "projection differential singular".into(),
            })?;
        let h = dn * dpi;
        Ok((h + h.transpose()) * lit::<T>(0.5))
    }

    /// Differential of the nearest-point projection at `y`.
    pub fn proj_differential(&self, y: &Vector3<T>) -> Result<Matrix3<T>> {
        let p = self.project(y)?;
        let d = self.signed_distance(y)?;
        let n = self.normal_on_surface(&p);
        let dn = self.normal_differential(&p);
        let tangential = Matrix3::identity() - n * n.transpose();
        let m = Matrix3::identity() + dn * d;
        m.lu().solve(&tangential).ok_or_else(|| Error::LinearSolveFailed {
            reason: "projection differential singular".into(),
        })
    }

    /// Extended scalar second fundamental form `A(v, w) = -<v, Hess d(y) w>`.
    pub fn shape_operator(&self, y: &Vector3<T>, v: &Vector3<T>, w: &Vector3<T>) -> Result<T> {
        let h = self.hess_distance(y)?;
        Ok(-v.dot(&(h * w)))
    }

    /// Largest principal-curvature magnitude over sampled surface points;
    /// used to validate a configured tubular radius for implicit surfaces.
    pub fn max_sampled_curvature(&self, samples: &[Vector3<T>]) -> Result<T> {
        let mut kmax = T::zero();
        for y in samples {
            let p = self.project(y)?;
            let dn = self.normal_differential(&p);
            let sym = (dn + dn.transpose()) * lit::<T>(0.5);
            let eig = sym.symmetric_eigen();
            for k in 0..3 {
                kmax = kmax.max(eig.eigenvalues[k].abs());
            }
        }
        Ok(kmax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type V3 = Vector3<f64>;

    #[test]
    fn plane_distance_and_projection() {
        let s = SupportSurface::plane(V3::zeros(), V3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(s.signed_distance(&V3::new(0.0, 0.0, 0.3)).unwrap(), 0.3);
        let p = s.project(&V3::new(1.0, 2.0, 0.5)).unwrap();
        assert_relative_eq!((p - V3::new(1.0, 2.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(s.shape_operator(&p, &V3::x(), &V3::x()).unwrap(), 0.0);
    }

    #[test]
    fn sphere_distance_projection_and_shape() {
        let s = SupportSurface::sphere(V3::zeros(), 1.0);
        assert_relative_eq!(s.signed_distance(&V3::new(0.0, 0.0, 1.2)).unwrap(), 0.2, epsilon = 1e-14);
        let p = s.project(&V3::new(0.0, 0.0, 0.5)).unwrap();
        assert_relative_eq!((p - V3::new(0.0, 0.0, 1.0)).norm(), 0.0, epsilon = 1e-15);
        // tangential unit directions at the north pole see curvature -1
        let a = s.shape_operator(&V3::new(0.0, 0.0, 1.0), &V3::x(), &V3::x()).unwrap();
        assert_relative_eq!(a, -1.0, epsilon = 1e-12);
        // normal direction is annihilated
        let a = s.shape_operator(&V3::new(0.0, 0.0, 1.0), &V3::z(), &V3::z()).unwrap();
        assert_relative_eq!(a, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_of_distance_matches_transported_normal() {
        let s = SupportSurface::sphere(V3::new(0.1, -0.2, 0.3), 2.0);
        let y = V3::new(1.4, 0.9, -0.7);
        let eps = 1e-6;
        let mut fd = V3::zeros();
        for k in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += eps;
            ym[k] -= eps;
            fd[k] = (s.signed_distance(&yp).unwrap() - s.signed_distance(&ym).unwrap()) / (2.0 * eps);
        }
        let n = s.normal_at_projection(&y).unwrap();
        assert_relative_eq!((fd - n).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn projection_is_idempotent() {
        let s = SupportSurface::ellipsoid(V3::new(1.0, 1.0, 0.5), 0.2);
        let y = V3::new(0.4, 0.5, 0.35);
        let p = s.project(&y).unwrap();
        let p2 = s.project(&p).unwrap();
        assert!((p - p2).norm() < 1e-10);
        // on-sample invariant
        let ell = Ellipsoid { semi_axes: V3::new(1.0, 1.0, 0.5) };
        assert!(ell.value(&p).abs() < 1e-10);
    }

    #[test]
    fn ellipsoid_projection_matches_dense_search() {
        let s = SupportSurface::ellipsoid(V3::new(1.0, 1.0, 0.5), 0.2);
        let y = V3::new(0.55, 0.15, 0.28);
        let p = s.project(&y).unwrap();
        // brute-force closest point over a dense parametric sampling
        let mut best = f64::INFINITY;
        let mut best_p = V3::zeros();
        let n = 2000;
        for a in 0..n {
            for b in 0..(n / 4) {
                let th = std::f64::consts::PI * (b as f64 + 0.5) / (n / 4) as f64;
                let ph = 2.0 * std::f64::consts::PI * a as f64 / n as f64;
                let q = V3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), 0.5 * th.cos());
                let d2 = (q - y).norm_squared();
                if d2 < best {
                    best = d2;
                    best_p = q;
                }
            }
        }
        assert!((p - best_p).norm() < 2e-3, "newton {p:?} vs dense {best_p:?}");
        // distances agree much more tightly than the points
        assert!(((p - y).norm() - (best_p - y).norm()).abs() < 1e-4);
    }

    #[test]
    fn tubular_coordinate_is_linear_along_the_normal() {
        let s = SupportSurface::sphere(V3::zeros(), 1.0);
        let y = V3::new(0.0, 0.8, 0.0);
        let d = s.signed_distance(&y).unwrap();
        let n = s.normal_at_projection(&y).unwrap();
        for t in [-0.05, 0.02, 0.07] {
            let d2 = s.signed_distance(&(y + n * t)).unwrap();
            assert_relative_eq!(d2, d + t, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_operator_is_symmetric() {
        let s = SupportSurface::ellipsoid(V3::new(1.0, 1.0, 0.5), 0.2);
        let y = V3::new(0.5, 0.2, 0.3);
        let v = V3::new(0.3, -0.4, 0.9);
        let w = V3::new(-1.0, 0.2, 0.5);
        let a = s.shape_operator(&y, &v, &w).unwrap();
        let b = s.shape_operator(&y, &w, &v).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn sphere_hessian_matches_finite_differences() {
        let s = SupportSurface::sphere(V3::zeros(), 1.0);
        let y = V3::new(0.3, -0.2, 1.1);
        let h = s.hess_distance(&y).unwrap();
        let eps = 1e-5;
        for r in 0..3 {
            for c in 0..3 {
                let mut ypp = y;
                ypp[r] += eps;
                ypp[c] += eps;
                let mut ypm = y;
                ypm[r] += eps;
                ypm[c] -= eps;
                let mut ymp = y;
                ymp[r] -= eps;
                ymp[c] += eps;
                let mut ymm = y;
                ymm[r] -= eps;
                ymm[c] -= eps;
                let fd = (s.signed_distance(&ypp).unwrap() - s.signed_distance(&ypm).unwrap()
                    - s.signed_distance(&ymp).unwrap()
                    + s.signed_distance(&ymm).unwrap())
                    / (4.0 * eps * eps);
                assert_relative_eq!(h[(r, c)], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn outside_tubular_neighborhood_is_reported() {
        let s = SupportSurface::sphere(V3::zeros(), 1.0);
        let err = s.signed_distance(&V3::new(0.0, 0.0, 2.5)).unwrap_err();
        assert!(matches!(err, Error::OutsideTubularNeighborhood { .. }));
    }
}
