pub mod config;
pub mod cvxcore;
pub mod channel;
pub mod metrics;
pub mod postcoder;
pub mod power;
pub mod trust;
pub mod phase;
pub mod position;
pub mod ao;
