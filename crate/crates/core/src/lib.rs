//! Region-wise classifier networks ("NoCs") on shared convolutional feature
//! maps: multi-scale RoI pooling, architecture-string heads with optional
//! maxout scale selection, post-hoc SVM and box-regression heads, and the
//! evaluation and error-diagnosis tooling around them.

pub mod ablation;
pub mod detect;
pub mod eval;
pub mod noc;
pub mod pyramid;
pub mod region;
pub mod synth;
pub mod tensor;

pub use region::Region;
