//! A variational autoencoder whose latent-space prior is a truncated
//! nested-CRP tree, learned jointly with the neural parameters by
//! alternating coordinate-ascent variational inference and gradient
//! steps, with dynamic tree growth and pruning.

pub mod adapt;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod generative;
pub mod math;
pub mod neural;
pub mod trainer;
pub mod tree;
pub mod variational;

pub use adapt::{AdaptConfig, AdaptEvent};
pub use error::{Error, ErrorKind, Result};
pub use eval::EvalReport;
pub use generative::{Corpus, GroundTruth, Sequence, SynthConfig};
pub use neural::{AutoencoderParams, RmspropConfig, RmspropState};
pub use trainer::{ModelState, TrainConfig, TrainOutcome};
pub use tree::{EdgeId, NodeId, TreeNode, TruncatedTree};
pub use variational::{LatentTable, SequenceVarState};
