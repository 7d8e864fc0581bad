//! Flow-matching posterior estimators.
//!
//! Two models share one backbone and training protocol:
//!
//! * [`Method::Pawsterior`] predicts the means of both interpolation
//!   endpoints given `(theta_t, t, x)`. The data-endpoint mean goes through a
//!   head that keeps it in the parameter support, and the sampling velocity
//!   is `alpha'_t mu0 + beta'_t mu1`.
//! * [`Method::Fmpe`] regresses the velocity onto `theta_1 - theta_0`.

mod loss;
mod model;
mod sample;
mod train;

pub use loss::{fmpe_loss, loss_and_grad, loss_value, pawsterior_loss, LossEval, TrainingBatch};
pub use model::{time_embedding, FlowModel, Method, Standardizer, TIME_EMBED_DIM};
pub use sample::{euler_sample, euler_sample_inspect, SampleStep, DEFAULT_STEPS};
pub use train::{sample_time, train, Dataset, EpochRecord, TimePrior, TrainConfig, TrainReport};
