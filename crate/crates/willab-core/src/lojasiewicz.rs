//! Finite-dimensional laboratory for the gradient inequality: kernel
//! splitting, Lyapunov–Schmidt reduction, exponent estimation by
//! lower-envelope quantile fits, hypothesis checking, and diffeomorphism
//! invariance.

use crate::error::{Error, Result};
use crate::solve;
use crate::{is_finite, lit, Scalar};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Evaluator<T> = Box<dyn Fn(&[T]) -> T + Send + Sync>;
type VectorMap<T> = Box<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;
type JacobianMap<T> = Box<dyn Fn(&[T]) -> DMatrix<T> + Send + Sync>;

/// An analytic energy with a gradient, a constraint-gradient map `deltaE`
/// (defaulting to the gradient), and its Jacobian.
pub struct AnalyticFunctional<T: Scalar> {
    pub dim: usize,
    pub energy: Evaluator<T>,
    pub grad: VectorMap<T>,
    pub delta: VectorMap<T>,
    pub delta_jacobian: JacobianMap<T>,
    /// Claimed constant with `||E'(v)|| <= M ||deltaE(v)||`.
    pub m_bound: T,
}

impl<T: Scalar> AnalyticFunctional<T> {
    /// Gradient system: `deltaE = grad E`.
    pub fn gradient_system(
        dim: usize,
        energy: Evaluator<T>,
        grad: VectorMap<T>,
        hessian: JacobianMap<T>,
    ) -> Self {
        let shared = std::sync::Arc::new(grad);
        let g1 = shared.clone();
        let g2 = shared;
        Self {
            dim,
            energy,
            grad: Box::new(move |v| (g1)(v)),
            delta: Box::new(move |v| (g2)(v)),
            delta_jacobian: hessian,
            m_bound: T::one(),
        }
    }

    /// Validate that the Jacobian matches finite differences of `delta` at a
    /// point, within a relative tolerance.
    pub fn validate_jacobian(&self, v: &[T], tol: T) -> Result<()> {
        let j = (self.delta_jacobian)(v);
        let h = lit::<T>(1e-6);
        let mut worst = T::zero();
        let mut scale = T::zero();
        for c in 0..self.dim {
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[c] += h;
            vm[c] -= h;
            let dp = (self.delta)(&vp);
            let dm = (self.delta)(&vm);
            for r in 0..dp.len() {
                let fd = (dp[r] - dm[r]) / (lit::<T>(2.0) * h);
                worst = worst.max((j[(r, c)] - fd).abs());
                scale = scale.max(fd.abs());
            }
        }
        if worst > tol * (T::one() + scale) {
            return Err(Error::InvalidParameter(format!(
                "delta Jacobian deviates from finite differences by {:.3e}",
                worst.to_f64().unwrap_or(f64::NAN)
            )));
        }
        Ok(())
    }
}

/// Built-in functional zoo.
pub mod zoo {
    use super::*;

    /// SPD quadratic `1/2 <v, A v>`.
    pub fn quadratic<T: Scalar>(a: DMatrix<T>) -> AnalyticFunctional<T> {
        let dim = a.nrows();
        let a1 = a.clone();
        let a2 = a.clone();
        let a3 = a;
        AnalyticFunctional {
            dim,
            energy: Box::new(move |v| {
                let x = DVector::from_column_slice(v);
                (x.transpose() * &a1 * &x)[(0, 0)] * lit::<T>(0.5)
            }),
            grad: Box::new(move |v| {
                let x = DVector::from_column_slice(v);
                (&a2 * x).iter().copied().collect()
            }),
            delta: Box::new({
                let a = a3.clone();
                move |v| {
                    let x = DVector::from_column_slice(v);
                    (&a * x).iter().copied().collect()
                }
            }),
            delta_jacobian: Box::new(move |_| a3.clone()),
            m_bound: T::one(),
        }
    }

    /// `E(x, y) = x^4 + y^2`, degenerate direction along x.
    pub fn quartic_flat<T: Scalar>() -> AnalyticFunctional<T> {
        AnalyticFunctional {
            dim: 2,
            energy: Box::new(|v| v[0].powi(4) + v[1] * v[1]),
            grad: Box::new(|v| vec![lit::<T>(4.0) * v[0].powi(3), lit::<T>(2.0) * v[1]]),
            delta: Box::new(|v| vec![lit::<T>(4.0) * v[0].powi(3), lit::<T>(2.0) * v[1]]),
            delta_jacobian: Box::new(|v| {
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[lit::<T>(12.0) * v[0] * v[0], T::zero(), T::zero(), lit::<T>(2.0)],
                )
            }),
            m_bound: T::one(),
        }
    }

    /// `E(x, y) = x^4 + (y - x^2)^2`, curved degenerate manifold.
    pub fn quartic_curved<T: Scalar>() -> AnalyticFunctional<T> {
        let two = lit::<T>(2.0);
        let four = lit::<T>(4.0);
        AnalyticFunctional {
            dim: 2,
            energy: Box::new(|v| {
                let r = v[1] - v[0] * v[0];
                v[0].powi(4) + r * r
            }),
            grad: Box::new(move |v| {
                let r = v[1] - v[0] * v[0];
                vec![four * v[0].powi(3) - four * v[0] * r, two * r]
            }),
            delta: Box::new(move |v| {
                let r = v[1] - v[0] * v[0];
                vec![four * v[0].powi(3) - four * v[0] * r, two * r]
            }),
            delta_jacobian: Box::new(move |v| {
                let r = v[1] - v[0] * v[0];
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        lit::<T>(12.0) * v[0] * v[0] - four * r + lit::<T>(8.0) * v[0] * v[0],
                        -four * v[0],
                        -four * v[0],
                        two,
                    ],
                )
            }),
            m_bound: T::one(),
        }
    }

    /// `E(x, y) = x^2 + y^2` with the broken pairing `deltaE = (2x, 0)`:
    /// hypothesis (i) fails along the y axis.
    pub fn broken_pairing<T: Scalar>() -> AnalyticFunctional<T> {
        let two = lit::<T>(2.0);
        AnalyticFunctional {
            dim: 2,
            energy: Box::new(|v| v[0] * v[0] + v[1] * v[1]),
            grad: Box::new(move |v| vec![two * v[0], two * v[1]]),
            delta: Box::new(move |v| vec![two * v[0], T::zero()]),
            delta_jacobian: Box::new(move |_| {
                DMatrix::from_row_slice(2, 2, &[two, T::zero(), T::zero(), T::zero()])
            }),
            m_bound: T::one(),
        }
    }

    /// Bivariate polynomial `sum c_kl x^k y^l` from a coefficient table.
    pub fn bivariate_polynomial<T: Scalar>(coeffs: Vec<(u32, u32, T)>) -> AnalyticFunctional<T> {
        let c0 = coeffs.clone();
        let c1 = coeffs.clone();
        let c2 = coeffs.clone();
        let c3 = coeffs;
        let pow = |x: T, k: u32| -> T {
            if k == 0 {
                T::one()
            } else {
                x.powi(k as i32)
            }
        };
        AnalyticFunctional {
            dim: 2,
            energy: Box::new(move |v| {
                c0.iter().fold(T::zero(), |a, &(k, l, c)| a + c * pow(v[0], k) * pow(v[1], l))
            }),
            grad: Box::new(move |v| {
                let mut g = vec![T::zero(); 2];
                for &(k, l, c) in &c1 {
                    if k > 0 {
                        g[0] += c * lit::<T>(k as f64) * pow(v[0], k - 1) * pow(v[1], l);
                    }
                    if l > 0 {
                        g[1] += c * lit::<T>(l as f64) * pow(v[0], k) * pow(v[1], l - 1);
                    }
                }
                g
            }),
            delta: Box::new(move |v| {
                let mut g = vec![T::zero(); 2];
                for &(k, l, c) in &c2 {
                    if k > 0 {
                        g[0] += c * lit::<T>(k as f64) * pow(v[0], k - 1) * pow(v[1], l);
                    }
                    if l > 0 {
                        g[1] += c * lit::<T>(l as f64) * pow(v[0], k) * pow(v[1], l - 1);
                    }
                }
                g
            }),
            delta_jacobian: Box::new(move |v| {
                let mut h = DMatrix::zeros(2, 2);
                for &(k, l, c) in &c3 {
                    if k > 1 {
                        h[(0, 0)] += c
                            * lit::<T>((k * (k - 1)) as f64)
                            * pow(v[0], k - 2)
                            * pow(v[1], l);
                    }
                    if k > 0 && l > 0 {
                        let m = c * lit::<T>((k * l) as f64) * pow(v[0], k - 1) * pow(v[1], l - 1);
                        h[(0, 1)] += m;
                        h[(1, 0)] += m;
                    }
                    if l > 1 {
                        h[(1, 1)] += c
                            * lit::<T>((l * (l - 1)) as f64)
                            * pow(v[0], k)
                            * pow(v[1], l - 2);
                    }
                }
                h
            }),
            m_bound: T::one(),
        }
    }
}

/// Kernel/complement splitting of the linearized constraint gradient at a
/// critical point (Lyapunov–Schmidt data).
#[derive(Debug)]
pub struct ReductionResult<T: Scalar> {
    pub v0: Vec<T>,
    /// Kernel directions, columns of an `n x d` matrix.
    pub x_basis: DMatrix<T>,
    /// Complement directions, `n x (n - d)`.
    pub y_basis: DMatrix<T>,
    /// Orthonormal basis of the range (image) of the linearization.
    pub range_basis: DMatrix<T>,
    /// Projector onto the range.
    pub p_w: DMatrix<T>,
    /// Validated radius for the implicit solve.
    pub radius: T,
}

/// Split `ker (deltaE)'(v0)` from its complement by SVD.
pub fn kernel_split<T: Scalar>(
    f: &AnalyticFunctional<T>,
    v0: &[T],
    rank_tol: T,
) -> Result<ReductionResult<T>> {
    let delta0 = (f.delta)(v0);
    let norm0 = delta0.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if norm0 >= lit::<T>(1e-10) {
        return Err(Error::NotCritical { norm: norm0.to_f64().unwrap_or(f64::NAN) });
    }
    let j = (f.delta_jacobian)(v0);
    let svd = solve::svd(&j)?;
    let n = f.dim;
    let sigma_max = svd.sigma.first().copied().unwrap_or(T::zero());
    if sigma_max == T::zero() {
        // identically degenerate: everything is kernel
        return Ok(ReductionResult {
            v0: v0.to_vec(),
            x_basis: DMatrix::identity(n, n),
            y_basis: DMatrix::zeros(n, 0),
            range_basis: DMatrix::zeros(j.nrows(), 0),
            p_w: DMatrix::zeros(j.nrows(), j.nrows()),
            radius: lit::<T>(0.5),
        });
    }
    let threshold = rank_tol * sigma_max;
    for &s in &svd.sigma {
        if s > threshold / lit::<T>(3.0) && s < threshold * lit::<T>(3.0) {
            return Err(Error::RankAmbiguous {
                sigma: s.to_f64().unwrap_or(f64::NAN),
                threshold: threshold.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let rank = svd.sigma.iter().filter(|&&s| s >= threshold).count();
    let d = n - rank;
    let mut x_basis = DMatrix::zeros(n, d);
    for (c, k) in (rank..n).enumerate() {
        if k < svd.v.ncols() {
            x_basis.set_column(c, &svd.v.column(k));
        }
    }
    let mut y_basis = DMatrix::zeros(n, rank);
    for k in 0..rank {
        y_basis.set_column(k, &svd.v.column(k));
    }
    let mut range_basis = DMatrix::zeros(j.nrows(), rank);
    for k in 0..rank {
        range_basis.set_column(k, &svd.u.column(k));
    }
    let p_w = &range_basis * range_basis.transpose();
    Ok(ReductionResult {
        v0: v0.to_vec(),
        x_basis,
        y_basis,
        range_basis,
        p_w,
        radius: lit::<T>(0.5),
    })
}

/// Solve `P_W deltaE(v0 + X x + Y y) = 0` for the complement coordinates.
pub fn lyapunov_schmidt_solve<T: Scalar>(
    f: &AnalyticFunctional<T>,
    red: &ReductionResult<T>,
    x: &[T],
) -> Result<Vec<T>> {
    let n = f.dim;
    let ny = red.y_basis.ncols();
    if ny == 0 {
        return Ok(Vec::new());
    }
    let xv = DVector::from_column_slice(x);
    let base = DVector::from_column_slice(&red.v0) + &red.x_basis * &xv;
    let mut y = DVector::<T>::zeros(ny);
    let tol = lit::<T>(1e-12);
    let mut residual = T::zero();
    for _ in 0..50 {
        let v: Vec<T> = (&base + &red.y_basis * &y).iter().copied().collect();
        let delta = DVector::from_column_slice(&(f.delta)(&v));
        let projected = red.range_basis.transpose() * &delta;
        residual = projected.norm();
        if residual < tol {
            let norm = y.norm();
            if norm > red.radius {
                return Err(Error::LeftNeighborhood {
                    norm: norm.to_f64().unwrap_or(f64::NAN),
                    radius: red.radius.to_f64().unwrap_or(f64::NAN),
                });
            }
            return Ok(y.iter().copied().collect());
        }
        let j = (f.delta_jacobian)(&v);
        let system = red.range_basis.transpose() * &j * &red.y_basis;
        let step = solve::lu_solve(system, -projected)?;
        y += step;
        if !is_finite(y.norm()) {
            break;
        }
    }
    Err(Error::NewtonDivergence { iters: 50, residual: residual.to_f64().unwrap_or(f64::NAN) })
}

/// Reduced energy `E0(x) = E(v0 + X x + Y g(x, 0))`.
pub fn reduced_energy<T: Scalar>(
    f: &AnalyticFunctional<T>,
    red: &ReductionResult<T>,
    x: &[T],
) -> Result<T> {
    let y = lyapunov_schmidt_solve(f, red, x)?;
    let xv = DVector::from_column_slice(x);
    let yv = DVector::from_column_slice(&y);
    let v: Vec<T> = (DVector::from_column_slice(&red.v0) + &red.x_basis * xv + &red.y_basis * yv)
        .iter()
        .copied()
        .collect();
    Ok((f.energy)(&v))
}

/// Shell sampling plan for exponent estimation.
#[derive(Debug, Clone, Copy)]
pub struct SamplingPlan<T> {
    pub radius_max: T,
    pub radius_min: T,
    pub shells: usize,
    pub samples_per_shell: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for SamplingPlan<T> {
    fn default() -> Self {
        Self {
            radius_max: lit::<T>(1e-1),
            radius_min: lit::<T>(1e-6),
            shells: 11,
            samples_per_shell: 48,
            seed: 7,
        }
    }
}

/// Fitted gradient-inequality exponent data.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LsFit<T: Scalar> {
    pub theta: T,
    pub c: T,
    /// `(|E - E*|, ||deltaE||)` sample pairs.
    pub pairs: Vec<(T, T)>,
    pub violation_fraction: T,
}

/// Lower-envelope quantile fit of `log G` against `log dE`; returns
/// `(theta, C, violation fraction)` for `dE^(1-theta) <= C G`.
///
/// The inequality is one-sided, so the fit must track the boundary of the
/// sample cloud, not its bulk: the pairs are binned in `log dE` and only
/// the few smallest gradients per bin enter the pinball regression.
pub fn envelope_fit<T: Scalar>(pairs: &[(T, T)], quantile: f64) -> Result<LsFit<T>> {
    let floor = lit::<T>(1e-300);
    let all: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(de, g)| *de > floor && *g > floor)
        .map(|(de, g)| (de.to_f64().unwrap().ln(), g.to_f64().unwrap().ln()))
        .collect();
    if all.len() < 8 {
        return Err(Error::DegenerateSamples { floor: 1e-300 });
    }
    let (lo_x, hi_x) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
        (lo.min(x), hi.max(x))
    });
    let bins = 36usize;
    let keep = 4usize;
    let mut binned: Vec<Vec<(f64, f64)>> = vec![Vec::new(); bins];
    let width = (hi_x - lo_x).max(1e-12);
    for &(x, y) in &all {
        let b = (((x - lo_x) / width) * bins as f64).floor().min(bins as f64 - 1.0) as usize;
        binned[b].push((x, y));
    }
    let mut logs: Vec<(f64, f64)> = Vec::new();
    for mut bin in binned {
        bin.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        logs.extend(bin.into_iter().take(keep));
    }
    if logs.len() < 8 {
        return Err(Error::DegenerateSamples { floor: 1e-300 });
    }
    // profiled pinball loss: for a fixed slope the optimal intercept is the
    // quantile of the residuals
    let loss = |b: f64| -> (f64, f64) {
        let mut r: Vec<f64> = logs.iter().map(|(x, y)| y - b * x).collect();
        r.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let idx = ((r.len() as f64 - 1.0) * quantile).round() as usize;
        let a = r[idx.min(r.len() - 1)];
        let mut l = 0.0;
        for (x, y) in &logs {
            let e = y - a - b * x;
            l += if e >= 0.0 { quantile * e } else { (1.0 - quantile) * (-e) };
        }
        (l, a)
    };
    // convex in b: golden-section refine after a coarse scan
    let mut best = (f64::INFINITY, 0.5, 0.0);
    let mut b = 0.05;
    while b <= 1.5 {
        let (l, a) = loss(b);
        if l < best.0 {
            best = (l, b, a);
        }
        b += 0.01;
    }
    let (mut lo, mut hi) = (best.1 - 0.02, best.1 + 0.02);
    for _ in 0..40 {
        let m1 = lo + 0.382 * (hi - lo);
        let m2 = lo + 0.618 * (hi - lo);
        if loss(m1).0 <= loss(m2).0 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let b_hat = 0.5 * (lo + hi);
    let (_, a_hat) = loss(b_hat);
    let theta = (1.0 - b_hat).clamp(1e-3, 0.999);
    let c = (-a_hat).exp();
    // violation fraction over the full sample cloud
    let mut violations = 0usize;
    for (x, y) in &all {
        // violation of dE^(1-theta) <= C G  <=>  (1-theta) x - ln C > y
        if (1.0 - theta) * x - c.ln() > y + 1e-12 {
            violations += 1;
        }
    }
    Ok(LsFit {
        theta: lit::<T>(theta),
        c: lit::<T>(c),
        pairs: pairs.to_vec(),
        violation_fraction: lit::<T>(violations as f64 / all.len() as f64),
    })
}


/// Sample pairs `(|E - E0|, ||deltaE||)` over log-spaced shells.
///
/// In two dimensions the directions are a dense deterministic angle grid
/// enriched, per shell, by a golden-section search for the direction of
/// minimal gradient: the binding cone of a degenerate energy narrows with
/// the shell radius, and without the search no fixed grid can expose the
/// envelope at small radii (or after a diffeomorphic change of variables).
fn sample_shell_pairs<T: Scalar>(
    dim: usize,
    eval: &dyn Fn(f64, &[f64]) -> (T, T),
    plan: &SamplingPlan<T>,
) -> Vec<(T, T)> {
    let lr_min = plan.radius_min.to_f64().unwrap().ln();
    let lr_max = plan.radius_max.to_f64().unwrap().ln();
    let mut pairs: Vec<(T, T)> = Vec::new();
    for shell in 0..plan.shells {
        let t = if plan.shells > 1 { shell as f64 / (plan.shells - 1) as f64 } else { 0.0 };
        let r0 = (lr_max + t * (lr_min - lr_max)).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(shell as u64 * 0x9e3779b9));
        if dim == 2 {
            let count = plan.samples_per_shell.max(256);
            let eval_angle = |r: f64, alpha: f64| -> (T, T) {
                eval(r, &[alpha.cos(), alpha.sin()])
            };
            let mut coarse: Vec<(f64, T)> = Vec::with_capacity(count);
            for sample in 0..count {
                let alpha = 2.0 * std::f64::consts::PI * sample as f64 / count as f64;
                let jitter: f64 = rng.gen_range(-0.15..0.15);
                let r = r0 * jitter.exp();
                let (de, g) = eval_angle(r, alpha);
                pairs.push((de, g));
                coarse.push((alpha, g));
            }
            // refine around the smallest-gradient directions
            let mut order: Vec<usize> = (0..count).collect();
            order.sort_by(|&a, &b| coarse[a].1.partial_cmp(&coarse[b].1).unwrap());
            let spacing = 2.0 * std::f64::consts::PI / count as f64;
            for &k in order.iter().take(3) {
                let center = coarse[k].0;
                let (mut lo, mut hi) = (center - spacing, center + spacing);
                for _ in 0..50 {
                    let m1 = lo + 0.382 * (hi - lo);
                    let m2 = lo + 0.618 * (hi - lo);
                    let g1 = eval_angle(r0, m1).1;
                    let g2 = eval_angle(r0, m2).1;
                    if g1 <= g2 {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                let alpha = 0.5 * (lo + hi);
                for offset in [-2.0, -1.0, 0.0, 1.0, 2.0] {
                    let width = (hi - lo).max(1e-12);
                    pairs.push(eval_angle(r0, alpha + offset * width));
                }
            }
        } else {
            for _ in 0..plan.samples_per_shell {
                let mut d = vec![0.0f64; dim];
                for v in d.iter_mut() {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                }
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in d.iter_mut() {
                    *v /= norm;
                }
                let jitter: f64 = rng.gen_range(-0.15..0.15);
                pairs.push(eval(r0 * jitter.exp(), &d));
            }
        }
    }
    pairs
}

/// Sample shells around a critical point and fit the inequality envelope.
pub fn estimate_theta<T: Scalar>(
    f: &AnalyticFunctional<T>,
    v0: &[T],
    plan: &SamplingPlan<T>,
) -> Result<LsFit<T>> {
    let e0 = (f.energy)(v0);
    let floor = lit::<T>(1e-14) * (T::one() + e0.abs());
    let eval = |r: f64, dir: &[f64]| -> (T, T) {
        let v: Vec<T> = v0
            .iter()
            .enumerate()
            .map(|(k, &c)| c + lit::<T>(r * dir[k]))
            .collect();
        let de = ((f.energy)(&v) - e0).abs();
        let g = (f.delta)(&v).iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        (de, g)
    };
    let pairs = sample_shell_pairs(f.dim, &eval, plan);
    if pairs.iter().all(|(de, _)| *de <= floor) {
        return Err(Error::DegenerateSamples { floor: floor.to_f64().unwrap_or(f64::NAN) });
    }
    envelope_fit(&pairs, 0.02)
}

/// Hypothesis report for the abstract inequality framework.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HypothesesReport<T: Scalar> {
    /// Sampled maximum of `||E'|| / ||deltaE||`.
    pub max_ratio: T,
    pub m_bound: T,
    pub bound_satisfied: bool,
    pub kernel_dim: usize,
    /// Singular values of the linearization at the critical point.
    pub singular_values: Vec<T>,
    pub rank: usize,
}

/// Sample hypothesis (i) over a ball and report the kernel data.
pub fn check_hypotheses<T: Scalar>(
    f: &AnalyticFunctional<T>,
    v0: &[T],
    radius: T,
    seed: u64,
) -> Result<HypothesesReport<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = T::zero();
    let floor = lit::<T>(1e-13);
    for _ in 0..4000 {
        let v: Vec<T> = v0
            .iter()
            .map(|&c| {
                let u: f64 = rng.gen_range(-1.0..1.0);
                c + radius * lit::<T>(u)
            })
            .collect();
        let g = (f.grad)(&v).iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        let d = (f.delta)(&v).iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        if g < floor {
            continue;
        }
        let ratio = if d < floor { lit::<T>(f64::MAX) } else { g / d };
        max_ratio = max_ratio.max(ratio);
    }
    let j = (f.delta_jacobian)(v0);
    let sv = solve::singular_values(&j)?;
    let sigma_max = sv.first().copied().unwrap_or(T::zero());
    let rank = if sigma_max == T::zero() {
        0
    } else {
        sv.iter().filter(|&&s| s >= lit::<T>(1e-9) * sigma_max).count()
    };
    Ok(HypothesesReport {
        max_ratio,
        m_bound: f.m_bound,
        bound_satisfied: max_ratio <= f.m_bound * lit::<T>(1.05),
        kernel_dim: f.dim - rank,
        singular_values: sv,
        rank,
    })
}

/// Analytic diffeomorphism with the preimage of the critical point.
pub struct Diffeo<T: Scalar> {
    pub map: VectorMap<T>,
    pub preimage_of_center: Vec<T>,
}

/// Exponent comparison report under a diffeomorphic transformation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DiffeoReport<T: Scalar> {
    pub theta_base: T,
    pub theta_transformed: T,
    pub delta: T,
}

/// Re-estimate the exponent for `E o phi`, `deltaE o phi` around the
/// preimage of the critical point.
pub fn diffeo_invariance_test<T: Scalar>(
    f: &AnalyticFunctional<T>,
    v0: &[T],
    diffeo: &Diffeo<T>,
    plan: &SamplingPlan<T>,
) -> Result<DiffeoReport<T>> {
    let base = estimate_theta(f, v0, plan)?;
    let e0 = (f.energy)(v0);
    let floor = lit::<T>(1e-14) * (T::one() + e0.abs());
    let eval = |r: f64, dir: &[f64]| -> (T, T) {
        let vt: Vec<T> = diffeo
            .preimage_of_center
            .iter()
            .enumerate()
            .map(|(k, &c)| c + lit::<T>(r * dir[k]))
            .collect();
        let v = (diffeo.map)(&vt);
        let de = ((f.energy)(&v) - e0).abs();
        let g = (f.delta)(&v).iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        (de, g)
    };
    let pairs = sample_shell_pairs(f.dim, &eval, plan);
    if pairs.iter().all(|(de, _)| *de <= floor) {
        return Err(Error::DegenerateSamples { floor: floor.to_f64().unwrap_or(f64::NAN) });
    }
    let transformed = envelope_fit(&pairs, 0.02)?;
    Ok(DiffeoReport {
        theta_base: base.theta,
        theta_transformed: transformed.theta,
        delta: (base.theta - transformed.theta).abs(),
    })
}
