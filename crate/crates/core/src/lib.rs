//! Synthetic dataset factory for object detection and instance segmentation.
//!
//! Class names are verbalized into text-to-image prompts, the generated
//! images are ranked with an image-text similarity model, foreground objects
//! are cut out of their plain backgrounds, and the cutouts are pasted onto
//! generated context images to produce COCO-style pseudo-labeled datasets.
//!
//! The stages map onto modules:
//!
//! * [`prompting`] - fixed prompt templates and caption edit rules.
//! * [`context_mining`] - context phrases from captions of example images.
//! * [`gateway`] - generation / scoring / captioning clients (mock and HTTP).
//! * [`selection`] - the two-rule ranking filter.
//! * [`foreground`] - mask extraction from plain-background renders.
//! * [`compositor`] - augmentation, blended pasting and occlusion bookkeeping.
//! * [`dataset`] - COCO emission, dataset mixing and statistics.
//! * [`pipeline`] - configuration, staged execution and recipes.

pub mod compositor;
pub mod context_mining;
pub mod dataset;
mod error;
pub mod foreground;
pub mod gateway;
pub mod imageio;
pub mod mask;
pub mod pipeline;
pub mod prompting;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use mask::{BBox, BinaryMask};
pub use prompting::ClassLabel;
