//! Segments a few synthetic tiles and prints scores against their truth.
//!
//! `cargo run --release --example synthetic_run -- [tiles] [preset]`
//! where preset is `easy`, `dumbbell` or `faint`.

use lgnuseghop::metrics::EvalReport;
use lgnuseghop::pipeline::{run_pipeline, PipelineConfig};
use lgnuseghop::synth::{generate_tile, SceneSpec};

fn main() -> lgnuseghop::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let preset = args.get(2).map(String::as_str).unwrap_or("easy");
    let cfg = PipelineConfig::default();
    for seed in 0..n {
        let spec = match preset {
            "dumbbell" => SceneSpec::dumbbell(seed),
            "faint" => SceneSpec::faint(seed),
            _ => SceneSpec::easy(seed),
        };
        let s = generate_tile(&spec)?;
        let out = run_pipeline(&s.tile, &cfg)?;
        let r = EvalReport::new(&s.mask, &out.mask)?;
        let p = EvalReport::new(&s.mask, &out.pseudolabel)?;
        println!(
            "seed {seed}: aji {:.3} f1 {:.3} dice {:.3} | pseudolabel aji {:.3} f1 {:.3} | {} inst, {:.2}s",
            r.aji, r.f1, r.dice, p.aji, p.f1, out.mask.instance_count(), out.total.as_secs_f64()
        );
    }
    Ok(())
}
