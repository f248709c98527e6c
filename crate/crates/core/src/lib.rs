//! Variance-components modelling: classical ANOVA and moment estimates,
//! Bayesian fits under bounded-uniform and Dirichlet relative-variance
//! priors, model mixing over submodels, posterior-predictive tests of zero
//! components, and simulation studies of those tests.

pub mod anova;
pub mod design;
pub mod error;
pub mod lab;
pub mod model;
pub mod ppc;
pub mod sampler;
pub mod seed;

pub use anova::{analyze, AnovaRow, AnovaTable, MomEstimates};
pub use design::{Dataset, FactorDecl, FactorLayout, LayoutOptions, Observation, Relation};
pub use error::{Error, Result};
pub use model::{IntegrationConfig, MeanPrior, ModelPrior, PriorConfig, PriorSpec, SubmodelPosterior, VarianceVector};
pub use ppc::{PpcConfig, PpcReport, Scheme, Statistic};
pub use sampler::{PosteriorDraws, SamplerConfig};
