//! `mdda bench`: complexity counts and CPU forward latency.

use std::time::{Duration, Instant};

use anyhow::bail;
use clap::Args;
use mdda::data::synthetic_scene;
use mdda::network::{build_model, count_flops, count_params_in, CountConvention};

use crate::{ModelArgs, Usage};

const MIN_RUNS: usize = 10;

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Square input side used for FLOP counting.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Square input side for the latency runs (default: --size).
    #[arg(long)]
    latency_size: Option<usize>,
    /// Timed forward passes; the median is reported.
    #[arg(long, default_value_t = MIN_RUNS)]
    runs: usize,
    /// Untimed forward passes before timing.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Only print the counts.
    #[arg(long)]
    no_latency: bool,
}

fn giga(x: u64) -> f64 {
    x as f64 / 1e9
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn run(a: BenchArgs) -> anyhow::Result<()> {
    if a.size == 0 {
        bail!(Usage("--size must be positive".into()));
    }
    if !a.no_latency && a.runs < MIN_RUNS {
        bail!(Usage(format!("--runs must be at least {MIN_RUNS} for a stable median")));
    }
    let cfg = a.model.run_config()?.model.resolve()?;
    let model = build_model(&cfg, 0)?;

    println!("layout {}, base width {}", cfg.layout, cfg.base_dim);
    println!("counting convention: 1 MAC = 1 FLOP");
    for conv in [CountConvention::Exact, CountConvention::ModuleHooks] {
        let params = count_params_in(&model, conv)?;
        let flops = count_flops(&model, a.size, a.size, conv)?;
        println!(
            "{conv:<13} params {params} ({:.2} M)  FLOPs @ {s}x{s}: {flops} ({:.2} G)",
            params as f64 / 1e6,
            giga(flops),
            s = a.size
        );
    }
    if a.no_latency {
        return Ok(());
    }

    let side = a.latency_size.unwrap_or(a.size);
    let x = synthetic_scene::<f32>(side, side, 1);
    for _ in 0..a.warmup {
        model.restore(&x)?;
    }
    let mut times = Vec::with_capacity(a.runs);
    for _ in 0..a.runs {
        let t = Instant::now();
        model.restore(&x)?;
        times.push(t.elapsed());
    }
    times.sort();
    let median = if a.runs % 2 == 1 {
        times[a.runs / 2]
    } else {
        (times[a.runs / 2 - 1] + times[a.runs / 2]) / 2
    };
    println!(
        "latency (CPU, informational) @ {side}x{side}, {} thread(s), {} runs after {} warm-up: median {:.2} ms, min {:.2} ms, max {:.2} ms",
        rayon::current_num_threads(),
        a.runs,
        a.warmup,
        ms(median),
        ms(times[0]),
        ms(times[a.runs - 1])
    );
    Ok(())
}
