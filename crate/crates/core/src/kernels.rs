//! Products that dequantize on the fly, plus timing and memory accounting.
//!
//! Accumulation contract: every output element is a sequential `f32` sum over
//! the input dimension in natural column order, starting from `0.0`, which is
//! the order [`crate::tensor::matmul`] uses. Groups are contiguous along a row,
//! so this is also group-major order. Outlier slots take their stored FP16
//! value in place of the background code, so results are bitwise identical to
//! `matmul(dequantize_tensor(qt), x)`.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{GwqError, Result};
use crate::quant::{
    dequantize_value, quantize_tensor, QuantConfig, QuantOptions, QuantizedTensor, ScaleZero,
};
use crate::sensitivity::{random_mask, Scope};
use crate::tensor::{group_spans, Tensor};

/// Decode row `r` of `qt` into `out` (length `cols`); stored outliers of the
/// row (positions `span` of the outlier arrays) replace their slots.
fn decode_row(qt: &QuantizedTensor, r: usize, span: Range<usize>, out: &mut [f32]) {
    let [_, cols] = qt.dims();
    let reader = qt.code_reader();
    let gpr = qt.groups_per_row();
    let base = r * cols;
    for (gi, cs) in group_spans(cols, qt.group_size()).enumerate() {
        let ScaleZero { scale, zero } = qt.group_params(r * gpr + gi);
        for c in cs {
            out[c] = dequantize_value(reader.get(base + c), scale, zero);
        }
    }
    for (&i, v) in qt.outlier_indices()[span.clone()].iter().zip(&qt.outlier_values()[span]) {
        out[i as usize - base] = v.to_f32();
    }
}

/// For each row, the range of positions in the (sorted) outlier arrays.
fn outlier_spans(qt: &QuantizedTensor) -> Vec<Range<usize>> {
    let [rows, cols] = qt.dims();
    let idx = qt.outlier_indices();
    let mut start = 0;
    (0..rows)
        .map(|r| {
            let end = start + idx[start..].partition_point(|&i| (i as usize) < (r + 1) * cols);
            let span = start..end;
            start = end;
            span
        })
        .collect()
}

/// `y = Q(W) x` for a quantized `[m, k]` weight and a length-`k` vector.
pub fn qmatvec(qt: &QuantizedTensor, x: &Tensor) -> Result<Tensor> {
    let [m, k] = qt.dims();
    if x.numel() != k || x.rank() > 2 || (x.rank() == 2 && x.dims()[1] != 1) {
        return Err(GwqError::Dimension(format!(
            "qmatvec: weight is {m}x{k}, vector has dims {:?}",
            x.dims()
        )));
    }
    let xs = x.data();
    let spans = outlier_spans(qt);
    let mut y = vec![0.0f32; m];
    y.par_iter_mut().enumerate().for_each_init(
        || vec![0.0f32; k],
        |w, (r, out)| {
            decode_row(qt, r, spans[r].clone(), w);
            let mut acc = 0.0f32;
            for (&wv, &xv) in w.iter().zip(xs) {
                acc += wv * xv;
            }
            *out = acc;
        },
    );
    Tensor::new(format!("{}@x", qt.name()), vec![m], y)
}

/// `Y = Q(W) X` for a quantized `[m, k]` weight and a `[k, n]` matrix.
pub fn qmatmul(qt: &QuantizedTensor, x: &Tensor) -> Result<Tensor> {
    let [m, k] = qt.dims();
    let (k2, n) = x.matrix_dims()?;
    if k2 != k {
        return Err(GwqError::Dimension(format!(
            "qmatmul: weight is {m}x{k}, right operand is {k2}x{n}"
        )));
    }
    let xs = x.data();
    let spans = outlier_spans(qt);
    let mut y = vec![0.0f32; m * n];
    y.par_chunks_mut(n).enumerate().for_each_init(
        || vec![0.0f32; k],
        |w, (r, out)| {
            decode_row(qt, r, spans[r].clone(), w);
            // out[j] accumulates w[p] * x[p, j] for p = 0, 1, ... in order.
            for (p, &wv) in w.iter().enumerate() {
                for (o, &xv) in out.iter_mut().zip(&xs[p * n..(p + 1) * n]) {
                    *o += wv * xv;
                }
            }
        },
    );
    Tensor::new(format!("{}@X", qt.name()), vec![m, n], y)
}

/// Dense `f32` matrix-vector product with the same accumulation order; the
/// baseline for timing.
pub fn dense_matvec(w: &Tensor, x: &[f32]) -> Result<Vec<f32>> {
    let (m, k) = w.matrix_dims()?;
    if x.len() != k {
        return Err(GwqError::Dimension(format!(
            "dense_matvec: weight is {m}x{k}, vector has {} entries",
            x.len()
        )));
    }
    let mut y = vec![0.0f32; m];
    y.par_iter_mut().enumerate().for_each(|(r, out)| {
        let mut acc = 0.0f32;
        for (&wv, &xv) in w.row(r).iter().zip(x) {
            acc += wv * xv;
        }
        *out = acc;
    });
    Ok(y)
}

/// Bytes of weight data one product reads: packed codes, FP16 scale and zero
/// per group, and a u32 index plus FP16 value per outlier.
pub fn quantized_bytes_read(qt: &QuantizedTensor) -> usize {
    qt.payload_bytes()
}

/// The same quantity computed from the layout alone.
pub fn predicted_bytes_read(m: usize, k: usize, cfg: &QuantConfig, outliers: usize) -> usize {
    let group = cfg.effective_group(k);
    let groups = m * k.div_ceil(group);
    (m * k * cfg.bits as usize).div_ceil(8) + 4 * groups + 6 * outliers
}

/// Median wall time of `reps` runs of `f` after one warm-up run.
pub fn median_seconds(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    /// Measured runs per path; the median is reported.
    pub repetitions: usize,
    /// Products per measured run, so each run is long enough to time.
    pub inner_loops: usize,
    pub seed: u64,
    pub options: QuantOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 5,
            inner_loops: 8,
            seed: 0,
            options: QuantOptions::default(),
        }
    }
}

/// Timing and memory figures for one weight shape.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub outlier_fraction: f32,
    pub threads: usize,
    pub repetitions: usize,
    pub dense_seconds: f64,
    pub quantized_seconds: f64,
    /// Output rows produced per second by the quantized kernel.
    pub rows_per_second: f64,
    pub bytes_read: usize,
    pub dense_f32_bytes: usize,
    pub dense_f16_bytes: usize,
    /// Weights, input, output and one decoded row per worker.
    pub peak_resident_bytes: usize,
    /// Dense time over quantized time.
    pub speedup: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "shape={}x{}", self.rows, self.cols)?;
        writeln!(f, "bits={}", self.bits)?;
        writeln!(f, "group={}", self.group_size)?;
        writeln!(f, "fraction={}", self.outlier_fraction)?;
        writeln!(f, "threads={}", self.threads)?;
        writeln!(f, "repetitions={}", self.repetitions)?;
        writeln!(f, "dense_seconds={:.6e}", self.dense_seconds)?;
        writeln!(f, "quantized_seconds={:.6e}", self.quantized_seconds)?;
        writeln!(f, "rows_per_second={:.1}", self.rows_per_second)?;
        writeln!(f, "bytes_read={}", self.bytes_read)?;
        writeln!(f, "dense_f32_bytes={}", self.dense_f32_bytes)?;
        writeln!(f, "dense_f16_bytes={}", self.dense_f16_bytes)?;
        writeln!(f, "peak_resident_bytes={}", self.peak_resident_bytes)?;
        writeln!(f, "speedup={:.3}", self.speedup)?;
        write!(
            f,
            "context=reference figures of 4.63/3.98 average bits and ~1.2x speedup are hardware and configuration dependent; not asserted"
        )
    }
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "rows,cols,bits,group,fraction,threads,repetitions,dense_seconds,quantized_seconds,rows_per_second,bytes_read,dense_f32_bytes,dense_f16_bytes,peak_resident_bytes,speedup";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6e},{:.6e},{:.1},{},{},{},{},{:.3}",
            self.rows,
            self.cols,
            self.bits,
            self.group_size,
            self.outlier_fraction,
            self.threads,
            self.repetitions,
            self.dense_seconds,
            self.quantized_seconds,
            self.rows_per_second,
            self.bytes_read,
            self.dense_f32_bytes,
            self.dense_f16_bytes,
            self.peak_resident_bytes,
            self.speedup
        )
    }
}

/// Seeded normal weights of the given shape, quantized under `cfg` with a
/// random outlier mask of `cfg.outlier_fraction`.
pub fn synthetic_quantized(
    m: usize,
    k: usize,
    cfg: &QuantConfig,
    opts: &QuantOptions,
    seed: u64,
) -> Result<(Tensor, QuantizedTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.05).expect("positive std");
    let data: Vec<f32> = (0..m * k).map(|_| normal.sample(&mut rng)).collect();
    let w = Tensor::new("bench.w", vec![m, k], data)?;
    let flags = if cfg.outlier_fraction > 0.0 {
        let mut shapes = IndexMap::new();
        shapes.insert(w.name().to_string(), vec![m, k]);
        let mask = random_mask(&shapes, cfg.outlier_fraction as f64, Scope::PerLayer, seed)?;
        mask.masks[w.name()].flags.clone()
    } else {
        vec![false; m * k]
    };
    let qt = quantize_tensor(&w, &flags, cfg, opts)?;
    Ok((w, qt))
}

/// Time the quantized and dense `f32` matrix-vector products on one shape.
pub fn bench(m: usize, k: usize, cfg: &QuantConfig, opts: &BenchOptions) -> Result<BenchReport> {
    cfg.validate()?;
    if opts.repetitions < 3 {
        return Err(GwqError::Config("bench needs at least 3 repetitions".into()));
    }
    let (w, qt) = synthetic_quantized(m, k, cfg, &opts.options, opts.seed)?;
    let x = Tensor::new("x", vec![k], (0..k).map(|i| ((i % 7) as f32 - 3.0) / 7.0).collect())?;
    let inner = opts.inner_loops.max(1);
    let mut sink = 0.0f32;
    let dense_seconds = median_seconds(opts.repetitions, || {
        for _ in 0..inner {
            sink += dense_matvec(&w, x.data()).expect("shapes match")[0];
        }
    }) / inner as f64;
    let quantized_seconds = median_seconds(opts.repetitions, || {
        for _ in 0..inner {
            sink += qmatvec(&qt, &x).expect("shapes match").data()[0];
        }
    }) / inner as f64;
    std::hint::black_box(sink);
    let threads = rayon::current_num_threads();
    let bytes_read = quantized_bytes_read(&qt);
    Ok(BenchReport {
        rows: m,
        cols: k,
        bits: cfg.bits,
        group_size: cfg.effective_group(k),
        outlier_fraction: cfg.outlier_fraction,
        threads,
        repetitions: opts.repetitions,
        dense_seconds,
        quantized_seconds,
        rows_per_second: m as f64 / quantized_seconds.max(f64::MIN_POSITIVE),
        bytes_read,
        dense_f32_bytes: 4 * m * k,
        dense_f16_bytes: 2 * m * k,
        peak_resident_bytes: bytes_read + 4 * (k + m) + 4 * k * threads,
        speedup: dense_seconds / quantized_seconds.max(f64::MIN_POSITIVE),
    })
}
