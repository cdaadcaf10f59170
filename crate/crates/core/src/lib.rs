pub mod audio;
pub mod checkpoint;
pub mod clustering;
pub mod corpus;
pub mod evaluation;
pub mod experiments;
pub mod features;
pub mod model;
pub mod synth;
pub mod training;
