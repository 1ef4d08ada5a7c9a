pub mod classic;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod steganalysis;
pub mod tensor;
