//! Human-in-the-loop debris curation over the outputs of a pipeline run.
//!
//! [`ReviewService`] owns the curation state and implements every operation
//! synchronously; [`http`] exposes it as a localhost JSON API.

pub mod http;
mod state;

pub use state::{
    CropImage, ExportPaths, InstancePage, InstanceView, PageQuery, Properties, ReviewService,
    ServiceError, MAX_PAGE_SIZE,
};
