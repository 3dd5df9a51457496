//! Small convolutional detector used to exercise matching, loss and decoding
//! end to end on synthetic data.

pub mod infer;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod train;
pub mod weights;

pub use layers::{Conv2d, ConvGrads};
pub use network::{build_network, DetectionHead, Gradients, HeadKind, NetConfig, Network, StageSpec};
pub use tensor::{Scalar, Tensor};
pub use train::{sgd_step, train, EpochStats, Matcher, SgdState, TrainConfig, TrainReport};
pub use weights::{load_weights, save_weights};
pub use infer::{detect_dataset, detect_image, evaluate, Evaluation};
