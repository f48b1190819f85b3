use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lgnuseghop::io::{load_mask, load_tile, save_heatmap, save_mask, save_tile};
use lgnuseghop::localproc::ThresholdMode;
use lgnuseghop::pipeline::{eval_dirs, output_path, overlay_render, run_pipeline, PipelineConfig};
use lgnuseghop::preprocess::GrayMode;
use lgnuseghop::synth::{generate_tile, SceneSpec};

const EXIT_INPUT: u8 = 2;
const EXIT_FALLBACK: u8 = 3;

#[derive(Parser)]
#[command(name = "lgnh", version, about = "Self-supervised nuclei instance segmentation for H&E tiles")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LGNH_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one or more tiles.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth of the same file names.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Also write the per-tile and aggregate report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate synthetic tiles with exact masks from a scene spec (TOML).
    Synth {
        spec: PathBuf,
        #[arg(short = 'n', default_value_t = 1)]
        count: u64,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Paint a prediction (and optionally its errors against truth) over a tile.
    Overlay {
        tile: PathBuf,
        pred: PathBuf,
        gt: Option<PathBuf>,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short = 'o', long = "out", default_value = ".")]
    out: PathBuf,
    /// Pipeline configuration (TOML); unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dump_pseudolabel: bool,
    #[arg(long)]
    dump_heatmap: bool,
    #[arg(long)]
    dump_seeds: bool,
    /// Skip histogram equalization.
    #[arg(long)]
    no_equalize: bool,
    /// Convert patches to gray with a fixed colorspace instead of PQR.
    #[arg(long)]
    no_pqr: bool,
    /// Threshold at the peak midpoint instead of the corrected threshold.
    #[arg(long)]
    no_adaptive: bool,
    #[arg(long)]
    no_morph: bool,
    #[arg(long)]
    no_lair: bool,
    /// Use the pseudolabel as the heatmap.
    #[arg(long)]
    no_nuseghop: bool,
    /// Seed the watershed at component centroids instead of LoG maxima.
    #[arg(long)]
    no_lmd: bool,
    #[arg(long)]
    no_watershed: bool,
    #[arg(long)]
    no_instance_filter: bool,
}

impl SegmentArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.preprocess.equalize &= !self.no_equalize;
        if self.no_pqr {
            cfg.local.threshold.gray_mode = GrayMode::FixedColorspace;
        }
        if self.no_adaptive {
            cfg.local.threshold.mode = ThresholdMode::Midpoint;
        }
        cfg.local.morph_enabled &= !self.no_morph;
        cfg.local.lair_enabled &= !self.no_lair;
        cfg.nuseghop_enabled &= !self.no_nuseghop;
        cfg.global.lmd_enabled &= !self.no_lmd;
        cfg.global.watershed_enabled &= !self.no_watershed;
        cfg.global.instance_filter_enabled &= !self.no_instance_filter;
        Ok(cfg)
    }
}

/// Segments one tile; `Ok(true)` when a fallback was taken.
fn segment_one(input: &Path, args: &SegmentArgs, cfg: &PipelineConfig) -> Result<bool> {
    let tile = load_tile(input).with_context(|| format!("reading {}", input.display()))?;
    let out = run_pipeline(&tile, cfg).with_context(|| format!("segmenting {}", input.display()))?;
    save_mask(&out.mask, output_path(&args.out, input, ".png"))?;
    if args.dump_pseudolabel {
        save_mask(&out.pseudolabel, output_path(&args.out, input, "_pseudolabel.png"))?;
    }
    if args.dump_heatmap {
        save_heatmap(&out.heatmap, output_path(&args.out, input, "_heatmap.lgnh"))?;
    }
    if args.dump_seeds {
        let f = std::fs::File::create(output_path(&args.out, input, "_seeds.csv"))?;
        out.seeds.write_csv(std::io::BufWriter::new(f))?;
    }
    let name = input.display();
    let mut report = format!("{name}: instances={} total_s={:.3}", out.mask.instance_count(), out.total.as_secs_f64());
    for (stage, d) in &out.timings {
        report += &format!(" {stage}_s={:.3}", d.as_secs_f64());
    }
    report += &format!(" parameters={}", out.parameter_count);
    println!("{report}");
    for f in &out.fallbacks {
        log::warn!("{name}: fallback taken: {f:?}");
    }
    Ok(!out.fallbacks.is_empty())
}

fn segment(args: &SegmentArgs) -> Result<ExitCode> {
    let cfg = args.config()?;
    std::fs::create_dir_all(&args.out)?;
    let results: Vec<Result<bool>> = args.inputs.par_iter().map(|p| segment_one(p, args, &cfg)).collect();
    let mut fallback = false;
    let mut failed = false;
    for r in results {
        match r {
            Ok(f) => fallback |= f,
            Err(e) => {
                eprintln!("error: {e:#}");
                failed = true;
            }
        }
    }
    Ok(if failed {
        ExitCode::from(EXIT_INPUT)
    } else if fallback {
        ExitCode::from(EXIT_FALLBACK)
    } else {
        ExitCode::SUCCESS
    })
}

fn eval(pred: &Path, gt: &Path, json: Option<&Path>) -> Result<ExitCode> {
    let summary = eval_dirs(pred, gt)?;
    for (name, r) in &summary.tiles {
        let line = r.to_kv().lines().collect::<Vec<_>>().join(" ");
        println!("{name}: {line}");
    }
    if let Some(agg) = &summary.aggregate {
        print!("{}", agg.to_kv());
    }
    if let Some(path) = json {
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(spec_path: &Path, count: u64, out: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let base: SceneSpec = toml::from_str(&text).context("parsing scene spec")?;
    base.validate()?;
    for sub in ["tiles", "masks", "specs"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let spec = SceneSpec { seed: base.seed.wrapping_add(i), ..base.clone() };
        let s = generate_tile(&spec)?;
        if s.shortfall() {
            log::warn!("sample {i}: placed {} of {} nuclei", s.placed, s.requested);
        }
        let name = format!("synth_{i:04}");
        save_tile(&s.tile, out.join("tiles").join(format!("{name}.png")))?;
        save_mask(&s.mask, out.join("masks").join(format!("{name}.png")))?;
        std::fs::write(out.join("specs").join(format!("{name}.toml")), toml::to_string(&spec)?)?;
        Ok(())
    })?;
    println!("wrote {count} samples to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn overlay(tile: &Path, pred: &Path, gt: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let tile = load_tile(tile)?;
    let pred = load_mask(pred)?;
    let gt = gt.map(load_mask).transpose()?;
    save_tile(&overlay_render(&tile, &pred, gt.as_ref())?, out)?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match &cli.command {
        Command::Segment(args) => segment(args),
        Command::Eval { pred_dir, gt_dir, json } => eval(pred_dir, gt_dir, json.as_deref()),
        Command::Synth { spec, count, out } => synth(spec, *count, out),
        Command::Overlay { tile, pred, gt, out } => overlay(tile, pred, gt.as_deref(), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
