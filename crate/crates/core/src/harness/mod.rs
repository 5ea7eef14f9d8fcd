//! Data, training, evaluation and reporting around the model.

pub mod checkpoint;
pub mod dataset;
pub mod synth;
pub mod evaluate;
pub mod plot;
pub mod report;
pub mod train;
