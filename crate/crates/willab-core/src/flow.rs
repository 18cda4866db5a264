//! Semi-implicit time integration of the scalar fourth-order flow
//! `dw/dt = -deltaE(w)` in chart coordinates.
//!
//! The principal quasilinear part `A(w) = D(g_{f_w}, g_ref)^2` (the square
//! of the frozen-coefficient trace Laplacian) is treated implicitly with
//! coefficients frozen at the current state; everything else is explicit.
//! The two boundary conditions are imposed through ghost unknowns past each
//! boundary edge: the first ghost layer carries the first-order condition,
//! the second carries the third-order natural condition.
//!
//! The reported gradient is the ghost-closed residual `A(w).(w, g(w)) + F0`
//! with the ghosts solved from the boundary rows; at the scheme's fixed
//! point it vanishes to solver precision, so the stopping criterion is not
//! limited by the closure error of the open-grid stencils.

use crate::chart::{
    boundary_residuals_from, delta_e_from, evaluate_immersion, try_height_field,
    xi_pairing_from, GaussChart, HeightField,
};
use crate::error::{Error, Result};
use crate::geometry::{build_geometry, willmore_energy, GeometryCache};
use crate::grid::{BoundaryEdge, Field, ParamGrid, Topology};
use crate::linop::{OperatorAssembly, OperatorMeta, RowTag};
use crate::solve::lu_solve;
use crate::{is_finite, lit, Scalar};
use nalgebra::{DMatrix, DVector};

/// Time integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    SemiImplicit,
    /// Forward Euler on the ghost-closed gradient; debugging only.
    FullyExplicit,
}

/// Flow integration parameters.
#[derive(Debug, Clone, Copy)]
pub struct FlowConfig<T> {
    /// Initial time step (parabolic time, length^4).
    pub dt: T,
    pub dt_max: T,
    pub t_end: T,
    pub scheme: Scheme,
    /// Stop when the L2 norm of the gradient density drops below this.
    pub grad_tol: T,
    /// Record a trace sample every this many accepted steps.
    pub monitor_interval: usize,
    /// Keep a full height-field snapshot every this many accepted steps
    /// (0 disables snapshots).
    pub snapshot_interval: usize,
    pub max_steps: usize,
    /// Linear solve acceptance: relative residual of the implicit system.
    pub linear_tol: T,
    pub linear_max_iter: usize,
    /// Stabilize the discrete-neutral invariance modes by a Newton-type
    /// correction along the directions of [`crate::chart::neutral_directions`].
    pub neutral_correction: bool,
}

impl<T: Scalar> FlowConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= T::zero() || self.grad_tol <= T::zero() {
            return Err(Error::InvalidParameter("dt and grad_tol must be positive".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for FlowConfig<T> {
    fn default() -> Self {
        Self {
            dt: lit::<T>(1e-5),
            dt_max: lit::<T>(1e-2),
            t_end: lit::<T>(10.0),
            scheme: Scheme::SemiImplicit,
            grad_tol: lit::<T>(1e-6),
            monitor_interval: 1,
            snapshot_interval: 0,
            max_steps: 200_000,
            linear_tol: lit::<T>(1e-9),
            linear_max_iter: 1,
            neutral_correction: true,
        }
    }
}

/// State of the flow at one time.
#[derive(Clone)]
pub struct FlowState<T: Scalar> {
    pub t: T,
    pub w: HeightField<T>,
    pub energy: T,
    /// `||G(w)||_{L2(dmu_{f_w})}` of the ghost-closed gradient density.
    pub grad_norm: T,
    /// `||grad W||_{L2(dmu)} = 1/2 ||G <xi,nu>||_{L2}`.
    pub willmore_grad_norm: T,
    /// `1/2 \int G^2 <xi,nu>^2 dmu`.
    pub dissipation: T,
    pub boundary_residual: (T, T),
    pub step_index: usize,
    pub dt: T,
}

/// Scalar summary of a state, recorded in the trace.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct FlowSample<T> {
    pub t: T,
    pub energy: T,
    pub grad_norm: T,
    pub willmore_grad_norm: T,
    pub dissipation: T,
    pub res_b1: T,
    pub res_b2: T,
    pub dt: T,
    pub step_index: usize,
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Termination {
    Converged,
    TimeExhausted,
    ChartExit,
    SolverFailure,
}

/// Recorded history of a run.
pub struct FlowTrace<T: Scalar> {
    pub samples: Vec<FlowSample<T>>,
    /// `(t, w)` height-field snapshots.
    pub snapshots: Vec<(T, Field<T>)>,
    pub termination: Termination,
    pub final_state: FlowState<T>,
}

impl<T: Scalar> FlowState<T> {
    pub fn sample(&self) -> FlowSample<T> {
        FlowSample {
            t: self.t,
            energy: self.energy,
            grad_norm: self.grad_norm,
            willmore_grad_norm: self.willmore_grad_norm,
            dissipation: self.dissipation,
            res_b1: self.boundary_residual.0,
            res_b2: self.boundary_residual.1,
            dt: self.dt,
            step_index: self.step_index,
        }
    }
}

/// Index layout of the implicit solve: main grid nodes followed by two
/// ghost layers per boundary edge.
pub struct GhostLayout {
    pub n_s: usize,
    pub n_phi: usize,
    pub edges: Vec<BoundaryEdge>,
    pub topology: Topology,
}

impl GhostLayout {
    pub fn new(grid: &ParamGrid) -> Self {
        Self {
            n_s: grid.n_s,
            n_phi: grid.n_phi,
            edges: grid.boundary_edges(),
            topology: grid.topology,
        }
    }

    pub fn n_main(&self) -> usize {
        self.n_s * self.n_phi
    }

    pub fn n_total(&self) -> usize {
        self.n_main() + 2 * self.edges.len() * self.n_phi
    }

    fn ghost_col(&self, edge: usize, layer: usize, j: usize) -> usize {
        self.n_main() + (2 * edge + layer) * self.n_phi + j
    }

    /// Column and sign for a logical radial index (folding pole reflection,
    /// mapping past-the-edge indices to ghost columns).
    pub fn fold(&self, i: i64, j: usize) -> (usize, f64) {
        let n = self.n_s as i64;
        if (0..n).contains(&i) {
            return ((i as usize) * self.n_phi + j, 1.0);
        }
        if i >= n {
            let layer = (i - n) as usize;
            debug_assert!(layer < 2);
            let edge = self
                .edges
                .iter()
                .position(|e| e.outward > 0)
                .expect("outer edge");
            return (self.ghost_col(edge, layer, j), 1.0);
        }
        // i < 0
        match self.topology {
            Topology::Disk => {
                let k = (-1 - i) as usize;
                let jj = if self.n_phi == 1 { j } else { (j + self.n_phi / 2) % self.n_phi };
                (k * self.n_phi + jj, 1.0)
            }
            Topology::Annulus => {
                let layer = (-1 - i) as usize;
                debug_assert!(layer < 2);
                let edge = self
                    .edges
                    .iter()
                    .position(|e| e.outward < 0)
                    .expect("inner edge");
                (self.ghost_col(edge, layer, j), 1.0)
            }
        }
    }

    /// Extend a main-grid field with degree-5 extrapolation ghosts.
    pub fn extend_with_extrapolation<T: Scalar>(&self, w: &Field<T>) -> Vec<T> {
        let mut x = vec![T::zero(); self.n_total()];
        x[..self.n_main()].copy_from_slice(&w.data);
        let coeffs = [-15.0f64, 20.0, -15.0, 6.0, -1.0];
        for (e, edge) in self.edges.iter().enumerate() {
            for j in 0..self.n_phi {
                // window of the last six values walking inward from the edge
                let mut window: Vec<T> = (0..6)
                    .map(|k| {
                        let i = edge.row as i64 - edge.outward as i64 * k as i64;
                        w.data[(i as usize) * self.n_phi + j]
                    })
                    .collect();
                for layer in 0..2 {
                    let base = window[0];
                    let mut g = base;
                    for (k, c) in coeffs.iter().enumerate() {
                        g = g + (window[k + 1] - base) * lit::<T>(*c);
                    }
                    x[self.ghost_col(e, layer, j)] = g;
                    window.rotate_right(1);
                    window[0] = g;
                }
            }
        }
        x
    }
}

/// Frozen-coefficient operator pieces at a state `w`.
struct FrozenCoefficients<T> {
    /// `g^{ss}, 2 g^{s phi}, g^{phi phi}` of `f_w`, per extended row
    /// (main rows plus one coefficient row past each edge).
    c: Vec<[T; 3]>,
    /// Drift `-g^{ij} Gammabar^s_ij`, `-g^{ij} Gammabar^phi_ij`.
    b: Vec<[T; 2]>,
}

struct RowIndexer {
    n_phi: usize,
    rows: usize,
}

impl RowIndexer {
    /// Map a logical coefficient row (main rows, plus one past each edge) to
    /// the dense storage used by `FrozenCoefficients`.
    fn slot(&self, i: i64, n_s: usize, topology: Topology) -> Option<usize> {
        if i >= 0 && (i as usize) < n_s {
            Some(i as usize)
        } else if i == n_s as i64 {
            Some(n_s)
        } else if i == -1 && topology == Topology::Annulus {
            Some(n_s + 1)
        } else {
            None
        }
    }

    fn idx(&self, slot: usize, j: usize) -> usize {
        debug_assert!(slot < self.rows);
        slot * self.n_phi + j
    }
}

fn frozen_coefficients<T: Scalar>(
    chart: &GaussChart<T>,
    fw_geom: &GeometryCache<T>,
) -> (FrozenCoefficients<T>, RowIndexer) {
    let grid = chart.grid();
    let n_s = grid.n_s;
    let n_phi = grid.n_phi;
    // coefficient rows: all main rows + 1 extrapolated row past each edge
    let rows = if grid.topology == Topology::Annulus { n_s + 2 } else { n_s + 1 };
    let indexer = RowIndexer { n_phi, rows };
    let mut c = vec![[T::zero(); 3]; rows * n_phi];
    let mut b = vec![[T::zero(); 2]; rows * n_phi];
    let gb = &chart.ref_geom.christoffel;
    for i in 0..n_s {
        for j in 0..n_phi {
            let k = i * n_phi + j;
            let gss = fw_geom.ginv[0].data[k];
            let gsp = fw_geom.ginv[1].data[k];
            let gpp = fw_geom.ginv[2].data[k];
            let two = lit::<T>(2.0);
            let drift_s =
                -(gss * gb[0].data[k] + two * gsp * gb[1].data[k] + gpp * gb[2].data[k]);
            let drift_p =
                -(gss * gb[3].data[k] + two * gsp * gb[4].data[k] + gpp * gb[5].data[k]);
            c[indexer.idx(i, j)] = [gss, two * gsp, gpp];
            b[indexer.idx(i, j)] = [drift_s, drift_p];
        }
    }
    // extrapolate coefficients one row past each edge (degree-5, difference
    // form, matching the grid's ghost closure)
    let coeffs = [-15.0f64, 20.0, -15.0, 6.0, -1.0];
    for edge in grid.boundary_edges() {
        let slot = if edge.outward > 0 { n_s } else { n_s + 1 };
        for j in 0..n_phi {
            let window = |k: usize| -> usize {
                let i = edge.row as i64 - edge.outward as i64 * k as i64;
                indexer.idx(i as usize, j)
            };
            for comp in 0..3 {
                let base = c[window(0)][comp];
                let mut g = base;
                for (k, cc) in coeffs.iter().enumerate() {
                    g = g + (c[window(k + 1)][comp] - base) * lit::<T>(*cc);
                }
                c[indexer.idx(slot, j)][comp] = g;
            }
            for comp in 0..2 {
                let base = b[window(0)][comp];
                let mut g = base;
                for (k, cc) in coeffs.iter().enumerate() {
                    g = g + (b[window(k + 1)][comp] - base) * lit::<T>(*cc);
                }
                b[indexer.idx(slot, j)][comp] = g;
            }
        }
    }
    (FrozenCoefficients { c, b }, indexer)
}

/// Sparse row of the frozen trace Laplacian `D(g_{f_w}, g_ref)` at logical
/// row `(i, j)` over the extended columns.
fn d_row<T: Scalar>(
    chart: &GaussChart<T>,
    layout: &GhostLayout,
    coefs: &FrozenCoefficients<T>,
    indexer: &RowIndexer,
    dphi1: &[T],
    dphi2: &[T],
    i: i64,
    j: usize,
) -> Vec<(usize, T)> {
    let grid = chart.grid();
    let n_phi = grid.n_phi;
    let h = grid.h_s::<T>();
    let inv_h2 = T::one() / (h * h);
    let inv_2h = T::one() / (lit::<T>(2.0) * h);
    let slot = indexer
        .slot(i, grid.n_s, grid.topology)
        .expect("coefficient row in range");
    let [css, csp, cpp] = coefs.c[indexer.idx(slot, j)];
    let [bs, bp] = coefs.b[indexer.idx(slot, j)];
    let mut acc: Vec<(usize, T)> = Vec::with_capacity(4 * n_phi + 8);
    let push = |acc: &mut Vec<(usize, T)>, ii: i64, jj: usize, v: T| {
        let (col, sign) = layout.fold(ii, jj);
        acc.push((col, v * lit::<T>(sign)));
    };
    // c_ss d2_ss + b_s d_s
    push(&mut acc, i + 1, j, css * inv_h2 + bs * inv_2h);
    push(&mut acc, i, j, -lit::<T>(2.0) * css * inv_h2);
    push(&mut acc, i - 1, j, css * inv_h2 - bs * inv_2h);
    if n_phi > 1 {
        for k in 0..n_phi {
            // c_sp d_s d_phi
            let dp = dphi1[j * n_phi + k];
            if dp != T::zero() {
                push(&mut acc, i + 1, k, csp * dp * inv_2h);
                push(&mut acc, i - 1, k, -csp * dp * inv_2h);
                // b_phi d_phi
                push(&mut acc, i, k, bp * dp);
            }
            // c_pp d2_phiphi
            let dpp = dphi2[j * n_phi + k];
            push(&mut acc, i, k, cpp * dpp);
        }
    }
    acc
}

fn compress<T: Scalar>(entries: Vec<(usize, T)>, n_cols: usize, scratch: &mut Vec<T>) -> Vec<(usize, T)> {
    scratch.clear();
    scratch.resize(n_cols, T::zero());
    let mut touched: Vec<usize> = Vec::with_capacity(entries.len());
    for (c, v) in entries {
        touched.push(c);
        scratch[c] += v;
    }
    touched.sort_unstable();
    touched.dedup();
    touched
        .into_iter()
        .filter(|&c| scratch[c] != T::zero())
        .map(|c| (c, scratch[c]))
        .collect()
}

/// Assemble the principal operator and the linearized boundary rows at `w`:
/// interior rows carry `A(w) = D(g_{f_w}, g_ref)^2` over main and ghost
/// columns, boundary rows carry `B1(w)` (one ghost layer) and `B2(w)`
/// (second ghost layer).
pub fn assemble_principal<T: Scalar>(
    chart: &GaussChart<T>,
    w: &HeightField<T>,
    fw_geom: &GeometryCache<T>,
) -> Result<OperatorAssembly<T>> {
    let grid = chart.grid().clone();
    let layout = GhostLayout::new(&grid);
    let n_phi = grid.n_phi;
    let n_main = layout.n_main();
    let n_total = layout.n_total();
    let h = grid.h_s::<T>();
    let inv_2h = T::one() / (lit::<T>(2.0) * h);
    let dphi1 = grid.dphi_matrix::<T>();
    let dphi2 = grid.dphi2_matrix::<T>();
    let (coefs, indexer) = frozen_coefficients(chart, fw_geom);

    let mut scratch: Vec<T> = Vec::new();
    let d_row_at = |i: i64, j: usize| -> Vec<(usize, T)> {
        d_row(chart, &layout, &coefs, &indexer, &dphi1, &dphi2, i, j)
    };

    let mut rows: Vec<Vec<(usize, T)>> = Vec::with_capacity(n_total);
    let mut tags: Vec<RowTag> = Vec::with_capacity(n_total);

    // interior rows: compose D with itself
    for i in 0..grid.n_s {
        for j in 0..n_phi {
            let outer = d_row_at(i as i64, j);
            let mut composed: Vec<(usize, T)> = Vec::with_capacity(outer.len() * 6);
            for &(mid_col, weight) in &outer {
                // mid_col refers to an extended column; logical row of D
                let (mi, mj) = if mid_col < n_main {
                    ((mid_col / n_phi) as i64, mid_col % n_phi)
                } else {
                    let off = mid_col - n_main;
                    let edge = layout.edges[off / (2 * n_phi)];
                    let layer = (off / n_phi) % 2;
                    let jj = off % n_phi;
                    let li = if edge.outward > 0 {
                        grid.n_s as i64 + layer as i64
                    } else {
                        -1 - layer as i64
                    };
                    (li, jj)
                };
                // D rows exist at main rows and the first layer past each
                // edge; the composition never needs the second layer
                if indexer.slot(mi, grid.n_s, grid.topology).is_none() {
                    continue;
                }
                for (c, v) in d_row_at(mi, mj) {
                    composed.push((c, v * weight));
                }
            }
            rows.push(compress(composed, n_total, &mut scratch));
            tags.push(RowTag::Interior);
        }
    }

    // boundary rows
    let mu = crate::chart::boundary_direction_field(chart, w)?;
    for (e, edge) in layout.edges.iter().enumerate() {
        let b = edge.row as i64;
        // B1 rows
        for j in 0..n_phi {
            let m = mu[e][j];
            let mut entries: Vec<(usize, T)> = Vec::new();
            let (cp, sp) = layout.fold(b + 1, j);
            let (cm, sm) = layout.fold(b - 1, j);
            entries.push((cp, m.mu_tangent.0 * inv_2h * lit::<T>(sp)));
            entries.push((cm, -m.mu_tangent.0 * inv_2h * lit::<T>(sm)));
            if n_phi > 1 {
                for k in 0..n_phi {
                    let dp = dphi1[j * n_phi + k];
                    if dp != T::zero() {
                        let (c0, s0) = layout.fold(b, k);
                        entries.push((c0, m.mu_tangent.1 * dp * lit::<T>(s0)));
                    }
                }
            }
            rows.push(compress(entries, n_total, &mut scratch));
            tags.push(RowTag::B1);
        }
        // B2 rows: d_eta (D .) with the frame of f_w
        for j in 0..n_phi {
            let frame = fw_geom.frame(e)[j];
            let mut entries: Vec<(usize, T)> = Vec::new();
            // eta^s * d_s(D u): centered difference of D-rows at b±1
            for (c, v) in d_row_at(b + 1, j) {
                entries.push((c, frame.eta.0 * inv_2h * v));
            }
            for (c, v) in d_row_at(b - 1, j) {
                entries.push((c, -frame.eta.0 * inv_2h * v));
            }
            // eta^phi * d_phi(D u)
            if n_phi > 1 {
                for k in 0..n_phi {
                    let dp = dphi1[j * n_phi + k];
                    if dp != T::zero() {
                        for (c, v) in d_row_at(b, k) {
                            entries.push((c, frame.eta.1 * dp * v));
                        }
                    }
                }
            }
            rows.push(compress(entries, n_total, &mut scratch));
            tags.push(RowTag::B2);
        }
    }

    Ok(OperatorAssembly {
        n_rows: n_total,
        n_cols: n_total,
        rows,
        tags,
        meta: OperatorMeta {
            label: format!("principal operator at |w| = {:.3e}", w.sup_norm.to_f64().unwrap_or(0.0)),
            n_s: grid.n_s,
            n_phi,
            method: "frozen-coefficient composition".into(),
        },
    })
}

/// Everything the scheme needs at a state `w`.
pub struct StepEval<T: Scalar> {
    pub geom: GeometryCache<T>,
    pub op: OperatorAssembly<T>,
    /// `F0 = deltaE(w) - A(w).(w, g_ext)`, per main node.
    pub f0: Vec<T>,
    /// `F1 = B1(w) - B1row.(w, g_ext)` stacked per edge then column.
    pub f1: Vec<T>,
    /// `F2 = B2(w) - B2row.(w, g_ext)`.
    pub f2: Vec<T>,
    /// Ghost-closed gradient density `G(w)`.
    pub grad: Field<T>,
    pub pairing: Field<T>,
    pub energy: T,
    pub grad_norm: T,
    pub willmore_grad_norm: T,
    pub dissipation: T,
    pub res_b1: T,
    pub res_b2: T,
}

/// Evaluate the operator split and diagnostics at `w`.
pub fn evaluate_state<T: Scalar>(chart: &GaussChart<T>, w: &HeightField<T>) -> Result<StepEval<T>> {
    let grid = chart.grid().clone();
    let layout = GhostLayout::new(&grid);
    let n_main = layout.n_main();
    let fw = evaluate_immersion(chart, w)?;
    let geom = build_geometry(&fw)?;
    let op = assemble_principal(chart, w, &geom)?;
    let de = delta_e_from(chart, w, &geom)?;
    let pairing = xi_pairing_from(chart, w, &geom)?;
    let residuals = boundary_residuals_from(chart, w, &geom)?;

    let x_ext = layout.extend_with_extrapolation(&w.values);
    let action = op.apply(&x_ext);

    let mut f0 = vec![T::zero(); n_main];
    for k in 0..n_main {
        f0[k] = de.data[k] - action[k];
    }
    let mut f1 = Vec::new();
    let mut f2 = Vec::new();
    let mut res_b1 = T::zero();
    let mut res_b2 = T::zero();
    {
        let mut row_cursor = n_main;
        for res in &residuals {
            for j in 0..grid.n_phi {
                f1.push(res.b1[j] - action[row_cursor + j]);
                res_b1 = res_b1.max(res.b1[j].abs());
            }
            row_cursor += grid.n_phi;
            for j in 0..grid.n_phi {
                f2.push(res.b2[j] - action[row_cursor + j]);
                res_b2 = res_b2.max(res.b2[j].abs());
            }
            row_cursor += grid.n_phi;
        }
    }

    // ghost-closed gradient: solve the boundary rows for the ghost values
    // given the current main values, then apply the interior rows
    let ghosts = solve_ghosts(&layout, &op, &w.values, &f1, &f2)?;
    let mut x_closed = x_ext.clone();
    x_closed[n_main..].copy_from_slice(&ghosts);
    let closed_action = op.apply(&x_closed);
    let mut grad = Field::constant(&grid, T::zero());
    for k in 0..n_main {
        grad.data[k] = closed_action[k] + f0[k];
    }

    let energy = willmore_energy(&geom);
    let grad_norm = geom.l2_norm(&grad);
    let scaled = grad.zip(&pairing, |g, p| g * p);
    let willmore_grad_norm = geom.l2_norm(&scaled) * lit::<T>(0.5);
    let sq = scaled.map(|v| v * v);
    let dissipation = geom.integrate(&sq) * lit::<T>(0.5);

    Ok(StepEval {
        geom,
        op,
        f0,
        f1,
        f2,
        grad,
        pairing,
        energy,
        grad_norm,
        willmore_grad_norm,
        dissipation,
        res_b1,
        res_b2,
    })
}

/// Solve the boundary rows for the ghost unknowns with the main values
/// held fixed.
fn solve_ghosts<T: Scalar>(
    layout: &GhostLayout,
    op: &OperatorAssembly<T>,
    w: &Field<T>,
    f1: &[T],
    f2: &[T],
) -> Result<Vec<T>> {
    let n_main = layout.n_main();
    let n_ghost = layout.n_total() - n_main;
    if n_ghost == 0 {
        return Ok(Vec::new());
    }
    let mut m = DMatrix::<T>::zeros(n_ghost, n_ghost);
    let mut rhs = DVector::<T>::zeros(n_ghost);
    let mut bc_row = 0usize;
    let mut f1_cursor = 0usize;
    let mut f2_cursor = 0usize;
    for r in n_main..layout.n_total() {
        let mut known = T::zero();
        for &(c, v) in &op.rows[r] {
            if c < n_main {
                known += v * w.data[c];
            } else {
                m[(bc_row, c - n_main)] += v;
            }
        }
        let f = match op.tags[r] {
            RowTag::B1 => {
                let v = f1[f1_cursor];
                f1_cursor += 1;
                v
            }
            RowTag::B2 => {
                let v = f2[f2_cursor];
                f2_cursor += 1;
                v
            }
            RowTag::Interior => {
                return Err(Error::LinearSolveFailed {
                    reason: "interior row in boundary block".into(),
                })
            }
        };
        rhs[bc_row] = -f - known;
        bc_row += 1;
    }
    let sol = lu_solve(m, rhs)?;
    Ok(sol.iter().copied().collect())
}

/// Ghost-closed gradient density at `w` (the flow's stopping functional).
pub fn effective_gradient<T: Scalar>(chart: &GaussChart<T>, w: &HeightField<T>) -> Result<Field<T>> {
    Ok(evaluate_state(chart, w)?.grad)
}

/// Initial state of a run.
pub fn initial_state<T: Scalar>(
    chart: &GaussChart<T>,
    w0: HeightField<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowState<T>> {
    cfg.validate()?;
    let eval = evaluate_state(chart, &w0)?;
    Ok(FlowState {
        t: T::zero(),
        w: w0,
        energy: eval.energy,
        grad_norm: eval.grad_norm,
        willmore_grad_norm: eval.willmore_grad_norm,
        dissipation: eval.dissipation,
        boundary_residual: (eval.res_b1, eval.res_b2),
        step_index: 0,
        dt: cfg.dt,
    })
}

/// One accepted step of the scheme at the given `dt` (no adaptivity).
pub fn step<T: Scalar>(
    chart: &GaussChart<T>,
    state: &FlowState<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowState<T>> {
    let eval = evaluate_state(chart, &state.w)?;
    let next_w = advance(chart, state, &eval, state.dt, cfg, None)?;
    let next_eval = evaluate_state(chart, &next_w)?;
    Ok(FlowState {
        t: state.t + state.dt,
        w: next_w,
        energy: next_eval.energy,
        grad_norm: next_eval.grad_norm,
        willmore_grad_norm: next_eval.willmore_grad_norm,
        dissipation: next_eval.dissipation,
        boundary_residual: (next_eval.res_b1, next_eval.res_b2),
        step_index: state.step_index + 1,
        dt: state.dt,
    })
}

/// Compute the next height field from a state evaluation.
///
/// When a neutral-mode corrector is active, the invariance components of
/// the new state are constrained to the pin targets inside the implicit
/// solve (bordered Lagrange system); removing them after the solve instead
/// would leave a persistent operator echo of the suppressed drift in the
/// residual.
fn advance<T: Scalar>(
    chart: &GaussChart<T>,
    state: &FlowState<T>,
    eval: &StepEval<T>,
    dt: T,
    cfg: &FlowConfig<T>,
    corrector: Option<&NeutralCorrector<T>>,
) -> Result<HeightField<T>> {
    let grid = chart.grid().clone();
    let layout = GhostLayout::new(&grid);
    let n_main = layout.n_main();
    let n_total = layout.n_total();
    match cfg.scheme {
        Scheme::FullyExplicit => {
            let mut values = state
                .w
                .values
                .zip(&eval.grad, |w, g| w - dt * g);
            if let Some(c) = corrector {
                values = c.pin(chart, values);
            }
            let w = try_height_field(chart, values)?;
            Ok(w)
        }
        Scheme::SemiImplicit => {
            let n_con = corrector.map_or(0, |c| c.directions.len());
            let n_sys = n_total + n_con;
            let mut m = DMatrix::<T>::zeros(n_sys, n_sys);
            let mut rhs = DVector::<T>::zeros(n_sys);
            let mut f1_cursor = 0usize;
            let mut f2_cursor = 0usize;
            for r in 0..n_total {
                match eval.op.tags[r] {
                    RowTag::Interior => {
                        for &(c, v) in &eval.op.rows[r] {
                            m[(r, c)] += dt * v;
                        }
                        m[(r, r)] += T::one();
                        rhs[r] = state.w.values.data[r] - dt * eval.f0[r];
                    }
                    RowTag::B1 => {
                        for &(c, v) in &eval.op.rows[r] {
                            m[(r, c)] += v;
                        }
                        rhs[r] = -eval.f1[f1_cursor];
                        f1_cursor += 1;
                    }
                    RowTag::B2 => {
                        for &(c, v) in &eval.op.rows[r] {
                            m[(r, c)] += v;
                        }
                        rhs[r] = -eval.f2[f2_cursor];
                        f2_cursor += 1;
                    }
                }
            }
            if let Some(cor) = corrector {
                for (k, dir) in cor.directions.iter().enumerate() {
                    let row = n_total + k;
                    for i in 0..n_main {
                        let weight = chart.ref_geom.measure.data[i];
                        // multiplier column in the interior equations and
                        // the constraint row <w+, v_k>_mu = target
                        m[(i, row)] += dir.data[i];
                        m[(row, i)] += dir.data[i] * weight;
                    }
                    rhs[row] = cor.targets[k];
                }
            }
            // equilibrate rows (the boundary rows carry 1/h^3-sized
            // coefficients) and polish with one iterative-refinement pass;
            // this keeps roundoff from breaking discrete symmetries
            for r in 0..n_sys {
                let mut scale = T::zero();
                for c in 0..n_sys {
                    scale = scale.max(m[(r, c)].abs());
                }
                if scale > T::zero() {
                    let inv = T::one() / scale;
                    for c in 0..n_sys {
                        m[(r, c)] *= inv;
                    }
                    rhs[r] *= inv;
                }
            }
            let lu = m.clone().lu();
            let mut sol = lu
                .solve(&rhs)
                .ok_or_else(|| Error::LinearSolveFailed { reason: "implicit step matrix singular".into() })?;
            let residual = &rhs - &m * &sol;
            if let Some(dx) = lu.solve(&residual) {
                sol += dx;
            }
            let mut values = Field::constant(&grid, T::zero());
            for k in 0..n_main {
                if !is_finite(sol[k]) {
                    return Err(Error::NonFiniteState { t: state.t.to_f64().unwrap_or(f64::NAN) });
                }
                values.data[k] = sol[k];
            }
            let w = try_height_field(chart, values)?;
            Ok(w)
        }
    }
}

/// Stabilizer for the discrete-neutral invariance directions.
///
/// The discrete energy is generically tilted by O(h^2) along the exact
/// invariances of the continuum problem (translations along a plane
/// support, dilations); without control the flow drifts along these
/// directions, the open-grid gradient loses consistency far from the
/// reference, and the run exits the chart instead of converging. The
/// stabilizer pins the invariance components of the state to a target by
/// orthogonal projection after every step, and steers the target with a
/// damped Newton controller that zeroes the gradient components along the
/// invariance fields (slope calibrated at the reference).
struct NeutralCorrector<T: Scalar> {
    /// L2(dmu_ref)-orthonormal invariance directions.
    directions: Vec<Field<T>>,
    /// d<G, v_k>/d c_l at the reference.
    slope: DMatrix<T>,
    /// Current pin targets for the components `<w, v_k>`.
    targets: DVector<T>,
}

impl<T: Scalar> NeutralCorrector<T> {
    fn components(chart: &GaussChart<T>, dirs: &[Field<T>], f: &Field<T>) -> DVector<T> {
        DVector::from_iterator(
            dirs.len(),
            dirs.iter().map(|v| chart.ref_geom.integrate(&f.zip(v, |a, b| a * b))),
        )
    }

    fn calibrate(
        chart: &GaussChart<T>,
        raw_directions: Vec<Field<T>>,
        w0: &HeightField<T>,
    ) -> Result<Option<Self>> {
        if raw_directions.is_empty() {
            return Ok(None);
        }
        let directions = crate::chart::orthonormal_neutral_directions(chart);
        let m = directions.len();
        let zero = HeightField::zero(chart);
        let delta = chart.r_bar * lit::<T>(1e-3);
        let mut slope = DMatrix::<T>::zeros(m, m);
        for l in 0..m {
            let plus =
                try_height_field(chart, zero.values.zip(&directions[l], |a, b| a + delta * b))?;
            let minus =
                try_height_field(chart, zero.values.zip(&directions[l], |a, b| a - delta * b))?;
            let ep = evaluate_state(chart, &plus)?;
            let em = evaluate_state(chart, &minus)?;
            let mup = Self::components(chart, &directions, &ep.grad);
            let mum = Self::components(chart, &directions, &em.grad);
            for k in 0..m {
                slope[(k, l)] = (mup[k] - mum[k]) / (lit::<T>(2.0) * delta);
            }
        }
        let targets = Self::components(chart, &directions, &w0.values);
        Ok(Some(Self { directions, slope, targets }))
    }

    /// Pin the invariance components of a candidate state to the targets.
    fn pin(&self, chart: &GaussChart<T>, values: Field<T>) -> Field<T> {
        let c = Self::components(chart, &self.directions, &values);
        let mut out = values;
        for (k, v) in self.directions.iter().enumerate() {
            let shift = self.targets[k] - c[k];
            for i in 0..out.data.len() {
                out.data[i] += shift * v.data[i];
            }
        }
        out
    }

    /// Damped Newton update of the pin targets from the gradient components
    /// of the accepted state, energy-clamped so each move spends at most
    /// half of the per-step monotonicity slack.
    fn steer(&mut self, chart: &GaussChart<T>, eval: &StepEval<T>) {
        let mu = Self::components(chart, &self.directions, &eval.grad);
        // steer only when the gradient is concentrated along the invariance
        // directions; earlier the components are genuine transversal flow
        // and integrating them would walk the targets away
        if eval.grad_norm > lit::<T>(3.0) * mu.norm() {
            return;
        }
        let Some(newton) = self.slope.clone().lu().solve(&(-mu.clone())) else {
            return;
        };
        let mut step = newton * lit::<T>(0.3);
        let sup = step.amax();
        if sup == T::zero() {
            return;
        }
        let cap = chart.r_bar * lit::<T>(0.02);
        if sup > cap {
            step *= cap / sup;
        }
        let cost = mu.dot(&step).abs();
        let slack = lit::<T>(0.5e-8) * (T::one() + eval.energy.abs());
        if cost > slack {
            step *= slack / cost;
        }
        if std::env::var("WILLAB_DEBUG_CORRECTOR").is_ok() {
            eprintln!(
                "steer: |mu|={:.3e} grad={:.3e} step0={:+.3e} target0={:+.3e}",
                mu.norm().to_f64().unwrap_or(f64::NAN),
                eval.grad_norm.to_f64().unwrap_or(f64::NAN),
                step[0].to_f64().unwrap_or(f64::NAN),
                self.targets[0].to_f64().unwrap_or(f64::NAN)
            );
        }
        self.targets += step;
    }
}

/// Integrate the flow until the gradient tolerance, the final time, or a
/// failure is reached. Time-step adaptivity: reject steps that increase the
/// energy beyond `1e-8 (1 + |E|)` and halve `dt`; double `dt` after 20
/// clean steps up to `dt_max`.
pub fn run_flow<T: Scalar>(
    chart: &GaussChart<T>,
    w0: HeightField<T>,
    cfg: &FlowConfig<T>,
) -> Result<FlowTrace<T>> {
    cfg.validate()?;
    let mut state = initial_state(chart, w0, cfg)?;
    let mut samples = vec![state.sample()];
    let mut snapshots = Vec::new();
    if cfg.snapshot_interval > 0 {
        snapshots.push((state.t, state.w.values.clone()));
    }
    let mut dt = cfg.dt;
    let mut clean_streak = 0usize;
    let dt_min = cfg.dt * lit::<T>(2.0).powi(-30);

    let mut eval = match evaluate_state(chart, &state.w) {
        Ok(e) => e,
        Err(Error::ChartExit { .. }) => {
            return Ok(FlowTrace {
                samples,
                snapshots,
                termination: Termination::ChartExit,
                final_state: state,
            })
        }
        Err(e) => return Err(e),
    };
    let mut corrector = if cfg.neutral_correction {
        NeutralCorrector::calibrate(chart, crate::chart::neutral_directions(chart), &state.w)?
    } else {
        None
    };

    let mut termination = Termination::TimeExhausted;
    if state.grad_norm < cfg.grad_tol {
        termination = Termination::Converged;
    } else {
        for _ in 0..cfg.max_steps {
            if state.t >= cfg.t_end {
                termination = Termination::TimeExhausted;
                break;
            }
            // attempt a step at the current dt, with rejection on energy
            // increase
            let mut accepted = None;
            let mut failure = None;
            while dt >= dt_min {
                match advance(chart, &state, &eval, dt, cfg, corrector.as_ref()) {
                    Ok(w_next) => match evaluate_state(chart, &w_next) {
                        Ok(next_eval) => {
                            let eps_step =
                                lit::<T>(1e-8) * (T::one() + state.energy.abs());
                            if next_eval.energy <= state.energy + eps_step {
                                accepted = Some((w_next, next_eval));
                                break;
                            }
                            dt = dt * lit::<T>(0.5);
                            clean_streak = 0;
                        }
                        Err(Error::ChartExit { .. }) | Err(Error::PairingDegenerate { .. }) => {
                            failure = Some(Termination::ChartExit);
                            break;
                        }
                        Err(_) => {
                            dt = dt * lit::<T>(0.5);
                            clean_streak = 0;
                        }
                    },
                    Err(Error::ChartExit { .. }) => {
                        failure = Some(Termination::ChartExit);
                        break;
                    }
                    Err(_) => {
                        dt = dt * lit::<T>(0.5);
                        clean_streak = 0;
                    }
                }
            }
            if let Some(t) = failure {
                termination = t;
                break;
            }
            let Some((w_next, next_eval)) = accepted else {
                termination = Termination::SolverFailure;
                break;
            };
            state = FlowState {
                t: state.t + dt,
                w: w_next,
                energy: next_eval.energy,
                grad_norm: next_eval.grad_norm,
                willmore_grad_norm: next_eval.willmore_grad_norm,
                dissipation: next_eval.dissipation,
                boundary_residual: (next_eval.res_b1, next_eval.res_b2),
                step_index: state.step_index + 1,
                dt,
            };
            eval = next_eval;
            if let Some(c) = corrector.as_mut() {
                c.steer(chart, &eval);
            }
            clean_streak += 1;
            if clean_streak >= 20 && dt < cfg.dt_max {
                dt = (dt * lit::<T>(2.0)).min(cfg.dt_max);
                clean_streak = 0;
            }
            if state.step_index % cfg.monitor_interval == 0 {
                samples.push(state.sample());
            }
            if cfg.snapshot_interval > 0 && state.step_index % cfg.snapshot_interval == 0 {
                snapshots.push((state.t, state.w.values.clone()));
            }
            if state.grad_norm < cfg.grad_tol {
                termination = Termination::Converged;
                break;
            }
        }
    }
    if samples.last().map(|s| s.step_index) != Some(state.step_index) {
        samples.push(state.sample());
    }
    Ok(FlowTrace {
        samples,
        snapshots,
        termination,
        final_state: state,
    })
}

/// Outcome of the dissipation-identity check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DissipationReport<T> {
    /// Max over the tail of `|dE/dt + D| / max(D, floor)`.
    pub max_rel_deviation: T,
    pub samples_used: usize,
    /// True when the trace is essentially stationary and the absolute
    /// deviation criterion was used instead.
    pub stationary: bool,
}

/// Compare the measured energy decay rate against the dissipation integral
/// `-1/2 \int G^2 <xi,nu>^2 dmu` at trace midpoints, skipping the leading
/// `skip_fraction` of samples.
pub fn energy_dissipation_check<T: Scalar>(
    trace: &FlowTrace<T>,
    skip_fraction: f64,
) -> Result<DissipationReport<T>> {
    let s = &trace.samples;
    if s.len() < 3 {
        return Err(Error::InsufficientSamples { got: s.len(), need: 3 });
    }
    let start = ((s.len() as f64) * skip_fraction).floor() as usize;
    let start = start.clamp(1, s.len().saturating_sub(2));
    let floor = lit::<T>(1e-14) * (T::one() + s[0].energy.abs());
    let mut max_rel = T::zero();
    let mut used = 0usize;
    let mut active = false;
    for k in start..s.len() - 1 {
        let de_dt = (s[k + 1].energy - s[k - 1].energy) / (s[k + 1].t - s[k - 1].t);
        let d = s[k].dissipation;
        if d > floor {
            active = true;
            let rel = (de_dt + d).abs() / d;
            max_rel = max_rel.max(rel);
            used += 1;
        } else if de_dt.abs() > lit::<T>(1e-10) {
            max_rel = max_rel.max(T::one());
            used += 1;
        }
    }
    if used == 0 {
        // fully stationary trace
        return Ok(DissipationReport {
            max_rel_deviation: T::zero(),
            samples_used: 0,
            stationary: true,
        });
    }
    Ok(DissipationReport { max_rel_deviation: max_rel, samples_used: used, stationary: !active })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{build_gauss_chart, project_to_constraint, ChartOptions};
    use crate::geometry::{samplers, Immersion};
    use crate::grid::Topology;
    use crate::support::SupportSurface;
    use nalgebra::Vector3;

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

    fn disk_chart(n_s: usize) -> GaussChart<f64> {
        let grid = ParamGrid::new(Topology::Disk, n_s, 1, true).unwrap();
        let imm: Immersion<f64> =
            Immersion::from_sampler(grid, samplers::equatorial_disk(1.0));
        let ball = SupportSurface::sphere(Vector3::zeros(), 1.0);
        build_gauss_chart(&imm, &ball, &ChartOptions::default()).unwrap()
    }

    fn interior_bump(chart: &GaussChart<f64>, amp: f64) -> HeightField<f64> {
        let f = Field::from_fn(chart.grid(), |i, _| {
            let s = chart.grid().s::<f64>(i);
            let t: f64 = (s - 0.4) / 0.3;
            if t.abs() < 1.0 {
                amp * (1.0 - t * t).powi(4)
            } else {
                0.0
            }
        });
        let w = try_height_field(chart, f).unwrap();
        project_to_constraint(chart, &w).unwrap()
    }

    #[test]
    fn critical_reference_is_a_near_fixed_point() {
        let chart = disk_chart(32);
        let cfg = FlowConfig { dt: 1e-5, ..Default::default() };
        let state = initial_state(&chart, HeightField::zero(&chart), &cfg).unwrap();
        let next = step(&chart, &state, &cfg).unwrap();
        assert!(next.w.sup_norm < 1e-10, "fixed point drifted to {}", next.w.sup_norm);
        assert!(next.energy.abs() < 1e-18);
    }

    #[test]
    fn energy_decreases_monotonically_over_100_steps() {
        let chart = hemisphere_chart(32, 1);
        let w0 = interior_bump(&chart, 0.005);
        let cfg = FlowConfig {
            dt: 1e-6,
            dt_max: 1e-4,
            t_end: 1.0,
            grad_tol: 1e-14,
            monitor_interval: 1,
            max_steps: 100,
            ..Default::default()
        };
        let trace = run_flow(&chart, w0, &cfg).unwrap();
        assert!(trace.samples.len() > 90);
        for pair in trace.samples.windows(2) {
            let eps = 1e-8 * (1.0 + pair[0].energy.abs());
            assert!(
                pair[1].energy <= pair[0].energy + eps,
                "energy rose: {} -> {}",
                pair[0].energy,
                pair[1].energy
            );
        }
    }

    #[test]
    fn one_step_error_decreases_at_first_order_in_dt() {
        let chart = hemisphere_chart(32, 1);
        let w0 = interior_bump(&chart, 0.004);
        let cfg = FlowConfig::<f64>::default();
        let advance_n = |dt: f64, n: usize| -> Field<f64> {
            let mut state = initial_state(&chart, w0.clone(), &cfg).unwrap();
            state.dt = dt;
            for _ in 0..n {
                state = step(&chart, &state, &cfg).unwrap();
                state.dt = dt;
            }
            state.w.values
        };
        let dt = 4e-5;
        let coarse = advance_n(dt, 1);
        let medium = advance_n(dt / 2.0, 2);
        let reference = advance_n(dt / 4.0, 4);
        let err = |a: &Field<f64>, b: &Field<f64>| -> f64 {
            a.data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(&coarse, &reference);
        let e2 = err(&medium, &reference);
        let order = (e1 / e2).log2();
        assert!(order > 0.9, "one-step refinement order {order} ({e1} -> {e2})");
    }

    #[test]
    fn principal_operator_matches_composed_trace_laplacian() {
        // at w = 0 on the flat disk the frozen operator is the squared
        // polar-coordinate Laplacian
        let chart = disk_chart(48);
        let w = HeightField::zero(&chart);
        let fw = crate::chart::evaluate_immersion(&chart, &w).unwrap();
        let geom = crate::geometry::build_geometry(&fw).unwrap();
        let op = assemble_principal(&chart, &w, &geom).unwrap();
        let grid = chart.grid().clone();
        let layout = GhostLayout::new(&grid);
        // smooth radial test field u = s^2 (1 - s^2): Delta^2 u = 64 - 96 + ...
        let u = Field::from_fn(&grid, |i, _| {
            let s = grid.s::<f64>(i);
            s * s * (1.0 - s * s)
        });
        let x = layout.extend_with_extrapolation(&u);
        let au = op.apply(&x);
        // Delta(s^2 - s^4) = 4 - 16 s^2, Delta(4 - 16 s^2) = -64
        for i in 2..grid.n_s - 2 {
            let v = au[grid.idx(i, 0)];
            assert!(
                (v + 64.0).abs() < 64.0 * 0.02,
                "A u = {v} at row {i}, expected -64"
            );
        }
    }

    #[test]
    fn rhs_split_reassembles_bitwise() {
        let chart = hemisphere_chart(32, 1);
        let w = interior_bump(&chart, 0.004);
        let eval = evaluate_state(&chart, &w).unwrap();
        let layout = GhostLayout::new(chart.grid());
        let x = layout.extend_with_extrapolation(&w.values);
        let action = eval.op.apply(&x);
        let de = crate::chart::delta_e(&chart, &w).unwrap();
        for k in 0..layout.n_main() {
            let reassembled = action[k] + eval.f0[k];
            let tol = 1e-14 * (1.0 + de.data[k].abs());
            assert!(
                (reassembled - de.data[k]).abs() <= tol,
                "row {k}: {reassembled} vs {}",
                de.data[k]
            );
        }
    }

    #[test]
    fn chart_guard_never_wraps_silently() {
        let chart = hemisphere_chart(32, 1);
        // just inside the chart: accepted, and a short run stays finite and
        // inside with an honest termination
        let amp = chart.r_bar / 1.01;
        let f = Field::from_fn(chart.grid(), |i, _| {
            let s = chart.grid().s::<f64>(i);
            let t: f64 = (s - 0.4) / 0.3;
            if t.abs() < 1.0 { amp * (1.0 - t * t).powi(4) } else { 0.0 }
        });
        let w = try_height_field(&chart, f).unwrap();
        let cfg = FlowConfig {
            dt: 1e-7,
            dt_max: 1e-5,
            t_end: 1.0,
            max_steps: 500,
            ..Default::default()
        };
        let trace = run_flow(&chart, w, &cfg).unwrap();
        assert!(trace.final_state.energy.is_finite());
        assert!(trace.final_state.w.sup_norm < chart.r_bar);
        // at or past the chart radius: the guard fires up front
        let outside = Field::constant(chart.grid(), chart.r_bar * 1.01);
        assert!(matches!(
            try_height_field(&chart, outside).unwrap_err(),
            Error::ChartExit { .. }
        ));
    }

    #[test]
    fn uncontrolled_neutral_drift_ends_in_chart_exit_not_a_wrap() {
        // without neutral-mode control the hemisphere state slides along the
        // tilted invariance valley; the run must end with the chart guard,
        // not wrap around or go non-finite
        let chart = hemisphere_chart(48, 1);
        let w0 = interior_bump(&chart, 0.005);
        let cfg = FlowConfig {
            dt: 1e-6,
            dt_max: 0.5,
            t_end: 1e6,
            grad_tol: 1e-12,
            max_steps: 30_000,
            neutral_correction: false,
            monitor_interval: 100,
            ..Default::default()
        };
        let trace = run_flow(&chart, w0, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::ChartExit);
        assert!(trace.final_state.energy.is_finite());
        assert!(trace.final_state.w.sup_norm < chart.r_bar);
    }

    #[test]
    fn axisymmetric_data_stays_axisymmetric_on_full_grid() {
        let chart = hemisphere_chart(24, 8);
        let f = Field::from_fn(chart.grid(), |i, _| {
            let s = chart.grid().s::<f64>(i);
            let t: f64 = (s - 0.4) / 0.3;
            if t.abs() < 1.0 { 0.003 * (1.0 - t * t).powi(4) } else { 0.0 }
        });
        // raw interior bump: exactly axisymmetric, boundary residuals at the
        // discretization level (the implicit boundary rows absorb them)
        let w0 = try_height_field(&chart, f).unwrap();
        // the explicit lower-order terms limit dt to ~h^3 for strongly
        // angular content; keep dt below that so the angular Nyquist mode
        // stays damped
        let cfg = FlowConfig {
            dt: 1e-6,
            dt_max: 2e-5,
            t_end: 1.0,
            grad_tol: 1e-14,
            max_steps: 60,
            ..Default::default()
        };
        let trace = run_flow(&chart, w0, &cfg).unwrap();
        let w = &trace.final_state.w.values;
        let mut spread = 0.0f64;
        for i in 0..chart.grid().n_s {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for j in 0..chart.grid().n_phi {
                lo = lo.min(w.at(i, j));
                hi = hi.max(w.at(i, j));
            }
            spread = spread.max(hi - lo);
        }
        assert!(spread < 1e-10, "phi spread {spread}");
    }

    #[test]
    fn converged_states_persist_near_convergence() {
        let chart = disk_chart(32);
        let w0 = interior_bump(&chart, 0.005);
        let cfg = FlowConfig {
            dt: 1e-6,
            dt_max: 1e-2,
            t_end: 100.0,
            grad_tol: 1e-7,
            max_steps: 100_000,
            ..Default::default()
        };
        let trace = run_flow(&chart, w0, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::Converged);
        // run 100 more steps with an unreachable tolerance
        let more = FlowConfig {
            dt: trace.final_state.dt,
            dt_max: trace.final_state.dt,
            t_end: f64::INFINITY,
            grad_tol: 1e-30,
            max_steps: 100,
            ..Default::default()
        };
        let tail = run_flow(&chart, trace.final_state.w.clone(), &more).unwrap();
        for s in &tail.samples {
            assert!(s.grad_norm < 2.0 * 1e-7, "fixed point drifted: grad {}", s.grad_norm);
        }
    }

    #[test]
    fn stationary_trace_has_vanishing_dissipation_report() {
        let chart = disk_chart(32);
        let cfg = FlowConfig { dt: 1e-5, ..Default::default() };
        let mut state = initial_state(&chart, HeightField::zero(&chart), &cfg).unwrap();
        let mut samples = vec![state.sample()];
        for _ in 0..8 {
            state = step(&chart, &state, &cfg).unwrap();
            samples.push(state.sample());
        }
        let trace = FlowTrace {
            samples,
            snapshots: Vec::new(),
            termination: Termination::TimeExhausted,
            final_state: state,
        };
        let rep = energy_dissipation_check(&trace, 0.0).unwrap();
        assert!(rep.stationary || rep.max_rel_deviation < 1e-10);
    }

    #[test]
    fn explicit_scheme_decreases_energy_for_tiny_steps() {
        let chart = disk_chart(32);
        let w0 = interior_bump(&chart, 0.003);
        let cfg = FlowConfig {
            dt: 1e-10,
            dt_max: 1e-10,
            scheme: Scheme::FullyExplicit,
            t_end: 1.0,
            grad_tol: 1e-30,
            max_steps: 5,
            monitor_interval: 1,
            ..Default::default()
        };
        let trace = run_flow(&chart, w0, &cfg).unwrap();
        let s = &trace.samples;
        assert!(s.last().unwrap().energy < s[0].energy);
    }
}
