use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("raster has zero width or height")]
    EmptyRaster,
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("patch has no pixels")]
    EmptyPatch,
    #[error("tile has near-constant optical density; stain separation is undefined")]
    ConstantTile,
    #[error("patch has zero color variance")]
    DegeneratePatch,
    #[error("no Saab component passed the energy threshold")]
    EmptyKernel,
    #[error("pseudolabel contains a single class")]
    DegeneratePseudolabel,
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("label {0} does not fit in a 16-bit PNG")]
    LabelOverflow(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: Stage, source: Box<Error> },
}

/// Pipeline stage identity attached to propagated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    LocalProcessing,
    NuSegHopFit,
    NuSegHopPredict,
    GlobalProcessing,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Preprocess,
        Stage::LocalProcessing,
        Stage::NuSegHopFit,
        Stage::NuSegHopPredict,
        Stage::GlobalProcessing,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Preprocess => "preprocess",
            Stage::LocalProcessing => "local_processing",
            Stage::NuSegHopFit => "nuseghop_fit",
            Stage::NuSegHopPredict => "nuseghop_predict",
            Stage::GlobalProcessing => "global_processing",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn at(self, stage: Stage) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
