//! Temperature forecasting: recurrent networks trained with target-sensor
//! rotation, a Hannan–Rissanen ARIMA, and a same-hour-yesterday baseline.

pub mod arima;
pub mod checkpoint;
pub mod cv;
pub mod net;
pub mod train;

pub use arima::{arima_fit, arima_forecast, ArimaModel};
pub use checkpoint::Checkpoint;
pub use cv::{cross_validate, fold_boundaries, CrossValidation, Fold};
pub use net::{net_backward, net_forward, net_init, param_count, CellKind, Gradients, RecurrentNetConfig, RecurrentNetState};
pub use train::{
    one_step_predictions, persistence_forecast, persistence_predictions, rollout_24h, train, validation_split, EpochRecord,
    OneStepModel, TrainReport,
    ROLLOUT_HOURS,
};
