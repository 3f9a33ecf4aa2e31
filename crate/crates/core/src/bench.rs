//! Wall-clock timing of inference passes.

use std::time::Instant;

use ndarray::{s, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{FrozenModel, LmState, TTLstmModel};
use crate::tensor::Matrix;

/// Kept measurements in seconds with their mean and sample standard
/// deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub measurements: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl BenchStats {
    pub fn from_measurements(measurements: Vec<f64>) -> Self {
        let n = measurements.len() as f64;
        let mean = measurements.iter().sum::<f64>() / n;
        let sd = if measurements.len() > 1 {
            (measurements.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { measurements, mean, sd }
    }
}

/// Times `runs` calls of `f` and keeps all but the first `discard`.
pub fn time_runs(runs: usize, discard: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchStats> {
    if runs <= discard {
        return Err(Error::config(format!("runs ({runs}) must exceed discard ({discard})")));
    }
    let mut kept = Vec::with_capacity(runs - discard);
    for k in 0..runs {
        let start = Instant::now();
        f()?;
        let elapsed = start.elapsed().as_secs_f64();
        if k >= discard {
            kept.push(elapsed);
        }
    }
    Ok(BenchStats::from_measurements(kept))
}

/// Logits of one window, splitting the batch lanes over `threads` scoped
/// threads.
pub fn forward_parallel(frozen: &FrozenModel, inputs: ArrayView2<usize>, threads: usize) -> Result<Matrix> {
    let (b, t) = inputs.dim();
    let threads = threads.clamp(1, b.max(1));
    if threads == 1 {
        return Ok(frozen.forward_window(inputs, &LmState::zeros(b, frozen.hidden))?.0);
    }
    let chunk = b.div_ceil(threads);
    let parts: Vec<Result<(usize, Matrix)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..b)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(b);
                let lanes = inputs.slice(s![start..end, ..]);
                scope.spawn(move || {
                    let state = LmState::zeros(end - start, frozen.hidden);
                    frozen.forward_window(lanes, &state).map(|(l, _)| (start, l))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut logits = Matrix::zeros((b * t, frozen.vocab_size));
    for part in parts {
        let (start, l) = part?;
        let width = l.nrows() / t;
        for step in 0..t {
            logits
                .slice_mut(s![step * b + start..step * b + start + width, ..])
                .assign(&l.slice(s![step * width..(step + 1) * width, ..]));
        }
    }
    Ok(logits)
}

/// Times a forward pass over `inputs`: each run prepares the gate stacks
/// (building `F` and `G`, or reconstructing the MPO matrix) and then runs the
/// window. With `dense`, gate stacks are held as plain matrices. Returns the
/// statistics and the logits of the last run.
pub fn bench_forward(
    model: &TTLstmModel,
    inputs: ArrayView2<usize>,
    runs: usize,
    discard: usize,
    threads: usize,
    dense: bool,
) -> Result<(BenchStats, Matrix)> {
    let mut last = None;
    let stats = time_runs(runs, discard, || {
        let frozen = if dense { model.freeze_dense()? } else { model.freeze()? };
        last = Some(forward_parallel(&frozen, inputs, threads)?);
        Ok(())
    })?;
    Ok((stats, last.expect("at least one run")))
}
