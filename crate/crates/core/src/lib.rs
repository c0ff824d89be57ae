//! Segmentation of substantia nigra sub-regions (SNr, SNCD) in 2D histology
//! sections and TH-stain optical-density quantification inside them.

pub mod augment;
pub mod error;
pub mod io;
pub mod lossmetrics;
pub mod model;
pub mod preprocess;
pub mod quantify;
pub mod report;
pub mod seeds;
pub mod synthdata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    argmax_decode, one_hot, AnnotatedSample, ClassCatalog, ClassCounts, ClassEntry,
    ConfusionCounts, LabelMask, ProbabilityMap, RasterImage, Split,
};
