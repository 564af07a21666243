//! Polarimetric microfacet reflectance with a correlated body-scattering term.
//!
//! The library models a dielectric surface as a field of mirror microfacets
//! whose normals follow a generalized normal distribution. Specular reflection
//! off the facets and diffuse light that refracts in, scatters, and refracts
//! back out are both carried as full Stokes vectors, so intensity and linear
//! polarization come out of one evaluation. On top of the forward model sit a
//! neural surrogate for the expensive body integral, an inverse solver that
//! recovers material parameters from polarimetric images, and a small renderer
//! used for synthetic experiments.

pub mod baselines;
pub mod brdf;
pub mod config;
pub mod fresnel;
pub mod geometry;
pub mod io;
pub mod microfacet;
pub mod polarization;
pub mod quadrature;
pub mod reflectometry;
pub mod scene;
pub mod surrogate;

/// Errors shared across the evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("antipodal directions")]
    AntipodalDirections,
    #[error("below-horizon direction")]
    BelowHorizon,
    #[error("normal parallel to propagation")]
    NormalParallelToPropagation,
    #[error("inconsistent filter intensities")]
    InconsistentFilterIntensities,
    #[error("zero-radiance Stokes")]
    ZeroRadianceStokes,
    #[error("grazing masking undefined")]
    GrazingMaskingUndefined,
    #[error("non-finite integrand")]
    NonFiniteIntegrand,
    #[error("surrogate domain violation: {0}")]
    SurrogateDomain(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("evaluation failure at pixel ({0}, {1})")]
    PixelEvaluation(u32, u32),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
