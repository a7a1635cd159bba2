//! Caption decoders whose recurrent state is a multi-channel 2D map updated
//! by convolution, their vector-state baselines, and tools for reading what
//! the 2D states encode.

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod interpret;
pub mod tensor;
pub mod training;
