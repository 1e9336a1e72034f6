pub mod assignment;
pub mod composition;
pub mod dataio;
pub mod decoder;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod tensor;
