//! Per-stage inference latency breakdown: input construction, encoder,
//! and output heads, plus end-to-end throughput.

use crate::image_io::Image;
use crate::model::Model;
use crate::tensor::Tape;
use crate::{Error, Result};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StageStats {
    pub mean_ms: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub input: StageStats,
    pub encoder: StageStats,
    pub heads: StageStats,
    pub fps: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub batch: usize,
}

/// Time `iterations` forward passes (after `warmup` unrecorded ones) over
/// a preloaded image and tokenized phrase. File I/O never enters the
/// timed region. Percentages are relative to the summed stage time and
/// add up to 100 before rounding.
pub fn run(
    model: &Model,
    image: &Image,
    token_ids: &[usize],
    iterations: usize,
    warmup: usize,
    batch: usize,
) -> Result<BenchReport> {
    if iterations == 0 || batch == 0 {
        return Err(Error::Input("iterations and batch must be positive".into()));
    }
    let mut stage_secs = [0.0f64; 3];
    let mut total_secs = 0.0f64;
    for iter in 0..warmup + iterations {
        for _ in 0..batch {
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let entered = model.store.enter(&mut tape)?;
            let (x0, seg, _text) = model.stage_embed(&mut tape, &entered, image, token_ids)?;
            let t1 = Instant::now();
            let enc = model.stage_encode(&mut tape, &entered, x0, seg, false, None)?;
            let t2 = Instant::now();
            let _outputs = model.stage_heads(&mut tape, &entered, &enc)?;
            let t3 = Instant::now();
            if iter >= warmup {
                stage_secs[0] += (t1 - t0).as_secs_f64();
                stage_secs[1] += (t2 - t1).as_secs_f64();
                stage_secs[2] += (t3 - t2).as_secs_f64();
                total_secs += (t3 - t0).as_secs_f64();
            }
        }
    }
    let forwards = (iterations * batch) as f64;
    let stage_total: f64 = stage_secs.iter().sum();
    let stat = |i: usize| StageStats {
        mean_ms: stage_secs[i] / forwards * 1e3,
        percent: stage_secs[i] / stage_total * 100.0,
    };
    Ok(BenchReport {
        input: stat(0),
        encoder: stat(1),
        heads: stat(2),
        fps: forwards / total_secs,
        iterations,
        warmup,
        batch,
    })
}
