pub mod config;
pub mod cook;
pub mod error;
pub mod etl;
pub mod geometry;
pub mod ingest;
pub mod linkage;
pub mod pipeline;
pub mod progress;
pub mod provenance;
pub mod review;
pub mod schema;
pub mod store;
pub mod surrogate;
pub mod synth;
pub mod views;

pub use config::Config;
pub use error::{Error, Result};
pub use store::{RecordId, Stage, Store};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/store.md")]
    mod store {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/cook.md")]
    mod cook {}
    #[doc = include_str!("../../../book/src/linkage.md")]
    mod linkage {}
    #[doc = include_str!("../../../book/src/provenance.md")]
    mod provenance {}
    #[doc = include_str!("../../../book/src/review.md")]
    mod review {}
    #[doc = include_str!("../../../book/src/surrogates.md")]
    mod surrogates {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
