//! Runs the whole pipeline on a synthetic world and prints the summary.
//!
//! `cargo run --release --example world -- <out-dir> [key=value ...]`

use std::time::Instant;

use kbrerank::config::PipelineConfig;
use kbrerank::{eval, pipeline};

fn main() -> kbrerank::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::default();
    cfg.paths.out_dir = args.next().unwrap_or_else(|| "world-out".into()).into();
    for a in args {
        cfg.set(&a)?;
    }
    let t = Instant::now();
    let rows = pipeline::run_all(&cfg)?;
    print!("{}", eval::summary_table(&rows));
    eprintln!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
