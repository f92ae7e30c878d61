//! Quota-steered generation.
//!
//! A feedback loop ([`control`]) that drives any attribute-emitting generator
//! toward an exact target histogram by offering only labels whose quota is not
//! yet used up, together with the tooling to judge the result: divergences
//! and Earth Mover's Distance ([`metrics`]), batch-coverage statistics,
//! intercoder agreement ([`annotation`]) and Monk skin-tone quantization
//! ([`belief`]).
//!
//! ```
//! use std::sync::Arc;
//! use quotasteer::attribute::{quantize_target, TargetSpec};
//! use quotasteer::control::{run, LoopConfig};
//! use quotasteer::generator::{presets, MockGenerator};
//!
//! let mock = presets::gender(1.0, 7); // 98.5% male backend
//! let spec = TargetSpec::uniform(mock.schema.clone());
//! let config = LoopConfig::new(quantize_target(&spec, 20).unwrap());
//! let headlines = vec!["Local baker opens third shop".to_string()];
//! let report = run(&config, &mut MockGenerator::new(mock), &headlines).unwrap();
//! assert_eq!(report.final_counts, vec![10, 10]);
//! ```

pub mod annotation;
pub mod attribute;
pub mod belief;
pub mod codebook;
pub mod control;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod remote;
pub mod rng;

pub use error::{Error, Result};
