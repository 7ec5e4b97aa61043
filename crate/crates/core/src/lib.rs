//! Ridge-filter guided masked vision-language pre-training at desk scale.
//!
//! The crate covers the whole loop: Meijering ridge responses drive which image
//! patches get masked, triplet reports are rewritten into canonical
//! question/answer manuscripts, and a small two-stream transformer with
//! cross-attention is trained with masked reconstruction, contrastive and
//! matching losses. Every layer has a hand-written backward pass that is
//! checked against central finite differences.

pub mod error;
pub mod imaging;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod reports;
pub mod ridge_filter;
pub mod rng;
pub mod text;

pub use error::{Error, Result};
