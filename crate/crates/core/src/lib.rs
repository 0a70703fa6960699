//! Counterfactual decoding with recovered Gumbel noise.
//!
//! The pipeline has two halves. [`hindsight::recover_noise`] explains an
//! observed reference sequence under an autoregressive model by sampling, at
//! every step, a Gumbel noise vector that makes the reference token win the
//! Gumbel-Max argmax. [`hindsight::replay`] then decodes under an intervened
//! prompt while adding the recovered noise scaled by `beta`, which pulls the
//! new sequence toward the reference by a tunable amount.
//!
//! Around that core live comparison decoders ([`baselines`]), evaluation
//! metrics ([`metrics`]), a synthetic rule-scored testbed ([`testbed`]) and an
//! experiment harness with file formats and a logit server ([`harness`]).

pub mod baselines;
pub mod error;
pub mod gumbel;
pub mod harness;
pub mod hindsight;
pub mod metrics;
pub mod model;
pub mod testbed;

pub use error::{Error, Result};
pub use model::{LanguageModel, ModelFingerprint, TokenId, Vocab};
