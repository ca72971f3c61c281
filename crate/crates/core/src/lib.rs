pub mod dicom;
pub mod cli;
pub mod deid;
pub mod genome;
pub mod numeric;
pub mod model;
pub mod objectives;
pub mod pacs;
pub mod stats;
pub mod synth;
pub mod trainer;
