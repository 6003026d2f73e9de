pub mod batch;
pub mod checkpoint;
pub mod curves;
pub mod metrics;
pub mod optim;
pub mod projector;
