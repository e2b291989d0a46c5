//! Forward-pass latency measurement.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use rgin_synth::{generate_scene, render_rgb8, scene_seed, SceneConfig, TemplateClass};
use serde::Serialize;

use crate::data::pool;
use crate::error::{Result, RginError};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Half-width of the normal-approximation 95% interval of the mean.
    pub ci95_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    /// Summary of per-pass latencies; `fps` is passes per second of wall time.
    pub fn from_samples(ms: &[f64], wall_seconds: f64) -> LatencyStats {
        let n = ms.len();
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = ms.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            samples: n,
            mean_ms: mean,
            median_ms: median,
            p95_ms: p95,
            ci95_ms: 1.96 * (var / n as f64).sqrt(),
            fps: if wall_seconds > 0.0 {
                n as f64 / wall_seconds
            } else {
                f64::INFINITY
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchReport {
    pub warmup: usize,
    /// One sample per pass, run back to back on the calling thread.
    pub single: LatencyStats,
    pub threads: usize,
    /// The same passes spread over `threads` workers.
    pub parallel: LatencyStats,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &LatencyStats| {
            writeln!(
                f,
                "{name:<10} n={} mean {:.3} ms (±{:.3}) median {:.3} ms p95 {:.3} ms  {:.1} FPS",
                s.samples, s.mean_ms, s.ci95_ms, s.median_ms, s.p95_ms, s.fps
            )
        };
        row(f, "single", &self.single)?;
        row(f, &format!("parallel/{}", self.threads), &self.parallel)
    }
}

/// Deterministic synthetic inputs for timing: `count` rendered scenes and
/// their expressions.
pub fn bench_inputs(canvas: usize, count: usize) -> Result<Vec<(Vec<u8>, String)>> {
    let cfg = SceneConfig {
        canvas: canvas as u32,
        ..SceneConfig::default()
    };
    (0..count)
        .map(|i| {
            let class = TemplateClass::ALL[i % TemplateClass::ALL.len()];
            let scene = generate_scene(scene_seed(0xbe4c, i as u64), class, &cfg)?;
            Ok((render_rgb8(&scene), scene.text()))
        })
        .collect()
}

fn pass(model: &Model, input: &(Vec<u8>, String)) -> Result<f64> {
    let t = Instant::now();
    let out = model.predict(&[&input.0], &[&input.1])?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(out);
    Ok(ms)
}

/// Times `iterations` single-sample forward passes after `warmup` untimed ones,
/// first sequentially and then across `threads` workers.
pub fn bench(
    model: &Model,
    inputs: &[(Vec<u8>, String)],
    iterations: usize,
    warmup: usize,
    threads: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(RginError::InvalidArgument(
            "iterations must be positive".into(),
        ));
    }
    if inputs.is_empty() || threads == 0 {
        return Err(RginError::InvalidArgument(
            "bench needs inputs and at least one thread".into(),
        ));
    }
    let input = |i: usize| &inputs[i % inputs.len()];
    for i in 0..warmup {
        pass(model, input(i))?;
    }
    let start = Instant::now();
    let single: Vec<f64> = (0..iterations)
        .map(|i| pass(model, input(i)))
        .collect::<Result<_>>()?;
    let single = LatencyStats::from_samples(&single, start.elapsed().as_secs_f64());

    let pool = pool(threads)?;
    let start = Instant::now();
    let parallel: Vec<f64> = pool.install(|| {
        (0..iterations)
            .into_par_iter()
            .map(|i| pass(model, input(i)))
            .collect::<Result<_>>()
    })?;
    let parallel = LatencyStats::from_samples(&parallel, start.elapsed().as_secs_f64());
    Ok(BenchReport {
        warmup,
        single,
        threads,
        parallel,
    })
}
