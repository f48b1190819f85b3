//! End-to-end orchestration: configuration, the staged run with timings and
//! fallbacks, directory evaluation and overlay rendering.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::color::rgb_to_hsi;
use crate::error::{Error, Result, Stage};
use crate::globalproc::{global_process, GlobalConfig, SeedSet};
use crate::io::load_mask;
use crate::localproc::{pseudolabel, LocalConfig};
use crate::metrics::{Aggregate, EvalReport};
use crate::nuseghop::{fit_model, predict_heatmap, NuSegHopConfig};
use crate::preprocess::{hist_equalize, stain_separate};
use crate::raster::{Heatmap, InstanceMask, RgbTile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Histogram-equalize the H image before the learned stages.
    pub equalize: bool,
    /// Threshold the equalized H image instead of the raw one. Equalization
    /// spreads a narrow background mode over the whole range, which leaves
    /// the thresholder nothing bimodal to split on flat backgrounds.
    pub threshold_on_equalized: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { equalize: true, threshold_on_equalized: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Off: the pseudolabel itself becomes the heatmap.
    pub nuseghop_enabled: bool,
    pub preprocess: PreprocessConfig,
    pub local: LocalConfig,
    pub nuseghop: NuSegHopConfig,
    pub global: GlobalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            nuseghop_enabled: true,
            preprocess: PreprocessConfig::default(),
            local: LocalConfig::default(),
            nuseghop: NuSegHopConfig::default(),
            global: GlobalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.nuseghop.validate()?;
        self.global.validate()
    }
}

/// A degenerate input the pipeline worked around instead of failing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Stain separation was undefined; the raw tile stood in for the H image.
    ConstantTile,
    /// The pseudolabel had one class; it was passed through as the heatmap.
    DegeneratePseudolabel,
    /// No Saab component survived; the pseudolabel was passed through.
    EmptyKernel,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub mask: InstanceMask,
    pub heatmap: Heatmap,
    pub pseudolabel: InstanceMask,
    pub confident: InstanceMask,
    pub seeds: SeedSet,
    /// H image in HSI, as fed to the learned stages.
    pub hsi: RgbTile,
    /// One entry per stage in [`Stage::ALL`] order.
    pub timings: Vec<(Stage, Duration)>,
    pub total: Duration,
    pub fallbacks: Vec<Fallback>,
    /// Learned projection weights, zero when the learned stage did not run.
    pub parameter_count: usize,
}

fn binary_heatmap(mask: &InstanceMask) -> Heatmap {
    let data = mask.labels().iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
    Heatmap::new(mask.width(), mask.height(), data).expect("values in [0, 1]")
}

/// Inputs of the local processing stage.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Image the pseudolabel threshold reads.
    pub threshold_input: RgbTile,
    /// Equalized (if enabled) H image in HSI.
    pub hsi: RgbTile,
    pub fallback: Option<Fallback>,
}

/// Stain separation, optional equalization and HSI conversion.
pub fn preprocess_tile(tile: &RgbTile, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let (h_image, fallback) = match stain_separate(tile) {
        Ok((h, _)) => (h, None),
        Err(Error::ConstantTile) => {
            ::log::warn!("stain separation undefined on a constant tile; using the raw tile");
            (tile.clone(), Some(Fallback::ConstantTile))
        }
        Err(e) => return Err(e.at(Stage::Preprocess)),
    };
    if !cfg.equalize {
        let hsi = rgb_to_hsi(&h_image);
        return Ok(Preprocessed { threshold_input: h_image, hsi, fallback });
    }
    let h_eq = hist_equalize(&h_image);
    let hsi = rgb_to_hsi(&h_eq);
    let threshold_input = if cfg.threshold_on_equalized { h_eq } else { h_image };
    Ok(Preprocessed { threshold_input, hsi, fallback })
}

/// Runs preprocessing, pseudolabeling, heatmap learning and global
/// post-processing on one tile.
pub fn run_pipeline(tile: &RgbTile, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timings = Vec::with_capacity(Stage::ALL.len());
    let mut fallbacks = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: Stage, timings: &mut Vec<(Stage, Duration)>| {
        let now = Instant::now();
        timings.push((stage, now - clock));
        clock = now;
    };

    let pre = preprocess_tile(tile, &cfg.preprocess)?;
    fallbacks.extend(pre.fallback);
    let Preprocessed { threshold_input, hsi, .. } = pre;
    lap(Stage::Preprocess, &mut timings);

    let pseudo = pseudolabel(&threshold_input, &hsi, &cfg.local);
    lap(Stage::LocalProcessing, &mut timings);

    let mut parameter_count = 0;
    let model = if cfg.nuseghop_enabled {
        match fit_model(&hsi, &pseudo, &cfg.nuseghop, cfg.seed) {
            Ok(m) => Some(m),
            Err(e @ (Error::DegeneratePseudolabel | Error::EmptyKernel)) => {
                ::log::warn!("{e}; passing the pseudolabel through");
                fallbacks.push(if matches!(e, Error::EmptyKernel) {
                    Fallback::EmptyKernel
                } else {
                    Fallback::DegeneratePseudolabel
                });
                None
            }
            Err(e) => return Err(e.at(Stage::NuSegHopFit)),
        }
    } else {
        None
    };
    lap(Stage::NuSegHopFit, &mut timings);

    let heatmap = match &model {
        Some(m) => {
            parameter_count = m.parameter_count();
            predict_heatmap(&hsi, m).map_err(|e| e.at(Stage::NuSegHopPredict))?
        }
        None => binary_heatmap(&pseudo),
    };
    lap(Stage::NuSegHopPredict, &mut timings);

    let global = global_process(&heatmap, &hsi, &cfg.global, cfg.seed).map_err(|e| e.at(Stage::GlobalProcessing))?;
    lap(Stage::GlobalProcessing, &mut timings);

    Ok(PipelineOutput {
        mask: global.mask,
        heatmap,
        pseudolabel: pseudo,
        confident: global.confident,
        seeds: global.seeds,
        hsi,
        timings,
        total: start.elapsed(),
        fallbacks,
        parameter_count,
    })
}

/// Per-tile reports, keyed by file name, plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tiles: Vec<(String, EvalReport)>,
    pub aggregate: Option<Aggregate>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Scores every ground-truth mask in `gt_dir` against the prediction of the
/// same file name in `pred_dir`. All missing predictions are named in one
/// error.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalSummary> {
    let names = png_names(gt_dir)?;
    let missing: Vec<&String> = names.iter().filter(|n| !pred_dir.join(n).is_file()).collect();
    if !missing.is_empty() {
        let list = missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(Error::Format { what: "prediction set", detail: format!("missing predictions for: {list}") });
    }
    let mut tiles = Vec::with_capacity(names.len());
    for n in names {
        let gt = load_mask(gt_dir.join(&n))?;
        let pred = load_mask(pred_dir.join(&n))?;
        let report = EvalReport::new(&gt, &pred).map_err(|e| Error::Format { what: "tile pair", detail: format!("{n}: {e}") })?;
        tiles.push((n, report));
    }
    let reports: Vec<EvalReport> = tiles.iter().map(|t| t.1).collect();
    Ok(EvalSummary { aggregate: Aggregate::of(&reports), tiles })
}

/// Output path for tile `input` under `dir` with `suffix` replacing its
/// extension.
pub fn output_path(dir: &Path, input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "tile".into());
    dir.join(format!("{stem}{suffix}"))
}

/// Per-pixel overlay class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    None,
    /// Predicted instance boundary, drawn when no ground truth is given.
    Boundary,
    TruePositive,
    FalsePositive,
    FalseNegative,
}

impl Mark {
    pub fn color(self) -> Option<[f64; 3]> {
        match self {
            Mark::None => None,
            Mark::Boundary => Some([0.0, 1.0, 0.0]),
            Mark::TruePositive => Some([1.0, 1.0, 1.0]),
            Mark::FalsePositive => Some([1.0, 1.0, 0.0]),
            Mark::FalseNegative => Some([0.0, 0.0, 1.0]),
        }
    }
}

/// Pixel classes of the overlay: boundaries of `pred` alone, or the
/// true-positive / false-positive / false-negative foreground split.
pub fn overlay_marks(pred: &InstanceMask, gt: Option<&InstanceMask>) -> Result<Vec<Mark>> {
    let (w, h) = pred.dims();
    match gt {
        Some(gt) => {
            if gt.dims() != pred.dims() {
                return Err(Error::DimensionMismatch { expected: pred.dims(), found: gt.dims() });
            }
            Ok(pred
                .labels()
                .iter()
                .zip(gt.labels())
                .map(|(&p, &g)| match (p != 0, g != 0) {
                    (true, true) => Mark::TruePositive,
                    (true, false) => Mark::FalsePositive,
                    (false, true) => Mark::FalseNegative,
                    (false, false) => Mark::None,
                })
                .collect())
        }
        None => Ok((0..w * h)
            .map(|i| {
                let l = pred.labels()[i];
                let edge = l != 0 && crate::raster::neighbors4(i / w, i % w, h, w).any(|(r, c)| pred.get(r, c) != l)
                    || l != 0 && (i / w == 0 || i / w == h - 1 || i % w == 0 || i % w == w - 1);
                if edge { Mark::Boundary } else { Mark::None }
            })
            .collect()),
    }
}

/// The tile with overlay marks painted over it.
pub fn overlay_render(tile: &RgbTile, pred: &InstanceMask, gt: Option<&InstanceMask>) -> Result<RgbTile> {
    if tile.dims() != pred.dims() {
        return Err(Error::DimensionMismatch { expected: tile.dims(), found: pred.dims() });
    }
    let marks = overlay_marks(pred, gt)?;
    let mut data = tile.data().to_vec();
    for (i, m) in marks.iter().enumerate() {
        if let Some(c) = m.color() {
            data[i * 3..i * 3 + 3].copy_from_slice(&c);
        }
    }
    RgbTile::new(tile.width(), tile.height(), data)
}
