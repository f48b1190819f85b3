pub mod color;
pub mod components;
pub mod error;
pub mod globalproc;
pub mod histogram;
pub mod io;
pub mod localproc;
pub mod metrics;
pub mod nuseghop;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod regions;
pub mod synth;

pub use error::{Error, Result, Stage};
pub use raster::{GrayMap, Heatmap, InstanceMask, RgbTile};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/stain-separation.md")]
    mod stain_separation {}
    #[doc = include_str!("../../../book/src/local-processing.md")]
    mod local_processing {}
    #[doc = include_str!("../../../book/src/nuseghop.md")]
    mod nuseghop {}
    #[doc = include_str!("../../../book/src/global-processing.md")]
    mod global_processing {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
