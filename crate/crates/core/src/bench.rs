//! Wall-clock microbenchmarks of the multi-head attention kernels.
//!
//! Each record times the attention core (per-head kernels on already
//! projected Q, K, V). The fused QKV and output projections are identical
//! for every variant and are left out of the timed region.

use std::fmt::Write as _;
use std::hint::black_box;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::attention::{attention_core, AttentionConfig, OrderingPolicy, Variant};
use crate::cost::{Cost, OrderingUsed, ProductOrder};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Element;

pub const CSV_HEADER: &str = "variant,N,D,H,ordering,mean_ms,min_ms,stddev_ms,exp_ops,mul_adds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            _ => Err(Error::Config(format!(
                "precision must be 32 or 64, got {bits}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub variants: Vec<Variant>,
    pub n_values: Vec<usize>,
    pub d_values: Vec<usize>,
    pub heads: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Force one product grouping for every variant at a shape:
    /// tokens-first when `N > D`, channels-first otherwise.
    pub fix_ordering: bool,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            n_values: vec![256],
            d_values: vec![64],
            heads: 8,
            repeats: 1000,
            warmup: 50,
            fix_ordering: true,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.variants.is_empty() || self.n_values.is_empty() || self.d_values.is_empty() {
            return Err(Error::Config(
                "variant, N and D lists must be non-empty".into(),
            ));
        }
        if self.n_values.contains(&0) || self.d_values.contains(&0) {
            return Err(Error::Config("N and D values must be positive".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        if let Some(d) = self.d_values.iter().find(|&&d| d % self.heads != 0) {
            return Err(Error::Config(format!(
                "D = {d} is not divisible by H = {}",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub ordering_used: OrderingUsed,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub stddev_ms: f64,
    pub exp_ops: u64,
    pub mul_adds: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Skipped combinations and clock warnings.
    pub notes: Vec<String>,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    (0..64)
        .filter_map(|_| {
            let start = Instant::now();
            loop {
                let d = start.elapsed();
                if d > Duration::ZERO {
                    break Some(d);
                }
            }
        })
        .min()
        .unwrap_or(Duration::ZERO)
}

/// Order every variant is forced into under `fix_ordering`.
pub fn fixed_order(n: usize, d: usize) -> ProductOrder {
    if n > d {
        ProductOrder::TokensFirst
    } else {
        ProductOrder::ChannelsFirst
    }
}

struct Stats {
    mean: f64,
    min: f64,
    stddev: f64,
}

fn stats(samples_ms: &[f64]) -> Stats {
    let n = samples_ms.len() as f64;
    let mean = samples_ms.iter().sum::<f64>() / n;
    let min = samples_ms.iter().copied().fold(f64::INFINITY, f64::min);
    let var = samples_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Stats {
        mean,
        // Guard against the mean rounding below the minimum.
        min: min.min(mean),
        stddev: var.sqrt(),
    }
}

fn bench_one<T: Element>(
    spec: &BenchSpec,
    cfg: &AttentionConfig,
    n: usize,
    rng: &mut Rng,
) -> Result<BenchRecord> {
    let d = cfg.dim;
    let q = rng.normal_tensor::<T>(&[n, d], 1.0);
    let k = rng.normal_tensor::<T>(&[n, d], 1.0);
    let v = rng.normal_tensor::<T>(&[n, d], 1.0);

    let mut cost = Cost::new();
    black_box(attention_core(&q, &k, &v, cfg, &mut cost)?);
    for _ in 0..spec.warmup {
        black_box(attention_core(&q, &k, &v, cfg, &mut Cost::new())?);
    }
    let mut times = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let mut scratch = Cost::new();
        let start = Instant::now();
        let out = attention_core(
            black_box(&q),
            black_box(&k),
            black_box(&v),
            cfg,
            &mut scratch,
        );
        let elapsed = start.elapsed();
        black_box(out?);
        times.push(elapsed.as_secs_f64() * 1e3);
    }
    let s = stats(&times);
    let report = cost.report();
    Ok(BenchRecord {
        variant: cfg.variant,
        n,
        d,
        h: cfg.heads,
        ordering_used: report.ordering_used,
        mean_ms: s.mean,
        min_ms: s.min,
        stddev_ms: s.stddev,
        exp_ops: report.exp_ops,
        mul_adds: report.mul_adds,
    })
}

/// Runs the sweep in `(N, D, variant)` order. Under `fix_ordering`, a variant
/// whose kernel cannot use the forced grouping (MSA when channels-first is
/// forced, XCA when tokens-first is) is skipped and noted.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let mut report = BenchReport::default();
    let resolution = timer_resolution();
    if resolution > Duration::from_micros(1) {
        report.notes.push(format!(
            "warning: timer resolution {resolution:?} is coarser than 1us"
        ));
    }
    let mut rng = Rng::new(spec.seed);
    for &n in &spec.n_values {
        for &d in &spec.d_values {
            for &variant in &spec.variants {
                let mut cfg = AttentionConfig::new(d, spec.heads, variant)?;
                if spec.fix_ordering {
                    let order = fixed_order(n, d);
                    if variant.native_order().is_some_and(|native| native != order) {
                        report.notes.push(format!(
                            "skipped {variant} at N={n} D={d}: fixed ordering {order} is not available"
                        ));
                        continue;
                    }
                    cfg = cfg.with_ordering(OrderingPolicy::from(order));
                }
                let record = match spec.precision {
                    Precision::F32 => bench_one::<f32>(spec, &cfg, n, &mut rng)?,
                    Precision::F64 => bench_one::<f64>(spec, &cfg, n, &mut rng)?,
                };
                report.records.push(record);
            }
        }
    }
    Ok(report)
}

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let sci = format!("{x:.5e}");
    // Rounding can bump the exponent (999999.5 -> 1.00000e6).
    let exp = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if !(-4..6).contains(&exp) {
        let (mantissa, e) = sci.split_once('e').expect("exponent present");
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn ordering_str(o: OrderingUsed) -> String {
    o.to_string()
}

fn parse_ordering(s: &str) -> Option<OrderingUsed> {
    match s {
        "NotApplicable" => Some(OrderingUsed::NotApplicable),
        "TokensFirst" => Some(OrderingUsed::Fixed(ProductOrder::TokensFirst)),
        "ChannelsFirst" => Some(OrderingUsed::Fixed(ProductOrder::ChannelsFirst)),
        _ => None,
    }
}

pub fn csv_string(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.n,
            r.d,
            r.h,
            ordering_str(r.ordering_used),
            format_sig6(r.mean_ms),
            format_sig6(r.min_ms),
            format_sig6(r.stddev_ms),
            r.exp_ops,
            r.mul_adds
        );
    }
    out
}

pub fn emit_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(records)).map_err(|e| Error::io(path, e))
}

/// Inverse of [`csv_string`]. Timings come back rounded to six significant
/// digits.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let bad = |line: usize, what: &str| Error::Shape(format!("bench CSV line {line}: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(no, "expected 10 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(no, "bad integer"));
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(no, "bad number"));
            let count = |s: &str| s.parse::<u64>().map_err(|_| bad(no, "bad counter"));
            Ok(BenchRecord {
                variant: f[0].parse().map_err(|_| bad(no, "bad variant"))?,
                n: int(f[1])?,
                d: int(f[2])?,
                h: int(f[3])?,
                ordering_used: parse_ordering(f[4]).ok_or_else(|| bad(no, "bad ordering"))?,
                mean_ms: float(f[5])?,
                min_ms: float(f[6])?,
                stddev_ms: float(f[7])?,
                exp_ops: count(f[8])?,
                mul_adds: count(f[9])?,
            })
        })
        .collect()
}

/// One `x y` series per variant (in first-appearance order), `x` being the
/// swept dimension: N when several N values occur, D otherwise.
pub fn plotdata_string(records: &[BenchRecord]) -> Result<String> {
    let Some(first) = records.first() else {
        return Ok(String::new());
    };
    if let Some(r) = records.iter().find(|r| r.h != first.h) {
        return Err(Error::Contract(format!(
            "plot data needs a single H, got {} and {}",
            first.h, r.h
        )));
    }
    let sweep_n = records.iter().any(|r| r.n != first.n);
    let mut variants: Vec<Variant> = Vec::new();
    for r in records {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let mut out = String::new();
    for (i, v) in variants.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let series: Vec<&BenchRecord> = records.iter().filter(|r| r.variant == *v).collect();
        if sweep_n {
            let mut ds: Vec<usize> = series.iter().map(|r| r.d).collect();
            ds.dedup();
            for d in ds {
                let _ = writeln!(out, "# variant={v} D={d} H={}", first.h);
                for r in series.iter().filter(|r| r.d == d) {
                    let _ = writeln!(out, "{} {}", r.n, format_sig6(r.mean_ms));
                }
            }
        } else {
            let _ = writeln!(out, "# variant={v} N={} H={}", first.n, first.h);
            for r in &series {
                let _ = writeln!(out, "{} {}", r.d, format_sig6(r.mean_ms));
            }
        }
    }
    Ok(out)
}

pub fn emit_plotdata(records: &[BenchRecord], path: &Path) -> Result<()> {
    let text = plotdata_string(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
