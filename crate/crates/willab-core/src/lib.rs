//! Numerical laboratory for the Willmore energy of surfaces whose boundary
//! slides on a fixed analytic support surface.
//!
//! The crate provides, in dependency order:
//!
//! * [`grid`] — tensor-product parameter grids (disk/annulus topology) with
//!   second-order radial stencils and Fourier collocation in the angle;
//! * [`geometry`] — first/second fundamental forms, mean curvature, Willmore
//!   energy and its L2-gradient, boundary frames;
//! * [`support`] — analytic support surfaces with signed distance, nearest
//!   point projection and shape operator;
//! * [`chart`] — generalized Gaussian coordinates around a reference
//!   immersion meeting the support orthogonally, height fields `w -> f_w`,
//!   the reformulated boundary residual map, and constraint projection;
//! * [`flow`] — semi-implicit time integration of the scalar fourth-order
//!   flow in chart coordinates;
//! * [`linop`] — assembly and spectral analysis of the linearized operators
//!   at the reference;
//! * [`lojasiewicz`] — a finite-dimensional Lyapunov–Schmidt / gradient
//!   inequality laboratory;
//! * [`exponents`] — gradient-inequality and stability exponent fits for the
//!   Willmore functional along flows and over sampled perturbations.
//!
//! All numerics are generic over the scalar type through [`Scalar`];
//! concrete `f64` aliases for the main entry types live at the crate root.

pub mod chart;
pub mod error;
pub mod exponents;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod linop;
pub mod lojasiewicz;
pub mod solve;
pub mod support;

pub use error::Error;

/// Scalar type over which all numerics are generic: `f32` or `f64`.
pub trait Scalar:
    nalgebra::RealField
    + Copy
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::Zero
    + num_traits::One
    + Send
    + Sync
    + grid::Value<Self>
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for a scalar literal; panics only on NaN inputs.
#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("scalar literal conversion")
}

/// `true` if the value is finite after conversion to f64.
#[inline]
pub fn is_finite<T: Scalar>(v: T) -> bool {
    v.to_f64().map_or(false, f64::is_finite)
}

/// Default scalar used by the CLI and the concrete aliases below.
pub type Real = f64;

pub type ParamGrid = grid::ParamGrid;
pub type Field = grid::Field<Real>;
pub type Immersion = geometry::Immersion<Real>;
pub type GeometryCache = geometry::GeometryCache<Real>;
pub type SupportSurface = support::SupportSurface<Real>;
pub type GaussChart = chart::GaussChart<Real>;
pub type HeightField = chart::HeightField<Real>;
pub type FlowConfig = flow::FlowConfig<Real>;
pub type FlowState = flow::FlowState<Real>;
pub type FlowTrace = flow::FlowTrace<Real>;
pub type OperatorAssembly = linop::OperatorAssembly<Real>;
pub type SpectralReport = linop::SpectralReport<Real>;
pub type LsFit = lojasiewicz::LsFit<Real>;
pub type StabilityReport = exponents::StabilityReport<Real>;

/// Configure the global worker pool used by the parallel samplers.
pub fn configure_threads(threads: usize) -> std::result::Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
}
