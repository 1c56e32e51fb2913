//! Single-stage fire detector built from scratch: a small reverse-mode
//! tensor engine, a YOLOv5-style network with a focus stem, compound
//! BCE/IoU loss with vanilla SGD, YOLO-format data handling, NMS inference
//! and precision/recall/mAP evaluation.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
