//! Attribute-prompted abnormality grounding on chest radiographs: box
//! geometry, dataset ingestion and fusion, knowledge decomposition, prompt
//! construction, output parsing, detection metrics and evaluation runs.

pub mod dataset;
pub mod geometry;
pub mod knowledge;
pub mod metrics;
pub mod outparse;
pub mod promptgen;
pub mod runs;
pub mod stub;
