use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ssm::{scan_forward, InputRule, ScanDims};

pub const BENCH_LENGTHS: [usize; 4] = [1024, 2048, 4096, 8192];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    /// Seconds per forward scan.
    pub median: f64,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub channels: usize,
    pub state: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time against log length.
    pub exponent: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "selective_scan forward, E={} N={}", self.channels, self.state)?;
        writeln!(f, "{:>8}  {:>12}", "L", "median ms")?;
        for r in &self.rows {
            writeln!(f, "{:>8}  {:>12.3}", r.len, r.median * 1e3)?;
        }
        write!(f, "growth exponent: {:.3}", self.exponent)
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Times the forward scan for each length, `repeats` runs each after one
/// warm-up, and fits the growth exponent.
pub fn bench_scan(lengths: &[usize], channels: usize, state: usize, repeats: usize) -> BenchReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a: Vec<f64> = (0..channels * state).map(|_| -rng.random_range(0.5..2.0)).collect();
    let rows: Vec<BenchRow> = lengths
        .iter()
        .map(|&len| {
            let x: Vec<f64> = (0..len * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta: Vec<f64> = (0..len * channels).map(|_| rng.random_range(0.001..0.1)).collect();
            let b: Vec<f64> = (0..len * state).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..len * state).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dims = ScanDims {
                batch: 1,
                len,
                channels,
                state,
            };
            let run = || {
                let t = Instant::now();
                let (y, _) = scan_forward(&x, &delta, &a, &b, &c, dims, InputRule::Euler, false);
                std::hint::black_box(y);
                t.elapsed().as_secs_f64()
            };
            run();
            let samples: Vec<f64> = (0..repeats.max(1)).map(|_| run()).collect();
            BenchRow {
                len,
                median: median(&samples),
                samples,
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.len as f64, r.median)).collect();
    BenchReport {
        channels,
        state,
        exponent: loglog_slope(&points),
        rows,
    }
}
