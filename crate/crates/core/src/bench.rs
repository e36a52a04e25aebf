//! Wall-clock timing of the selective scan at doubling sequence lengths.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;

use crate::rng::{stream, tag};
use crate::ssm::selective_scan_values;

pub const BENCH_LENGTHS: &[usize] = &[128, 256, 512, 1024, 2048];
pub const BENCH_REPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    /// Median time at `l` over median time at `l / 2`, when measured.
    pub ratio_vs_half: Option<f64>,
}

struct Inputs {
    l: usize,
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    order: Vec<usize>,
}

fn inputs(l: usize, d: usize, s: usize, seed: u64) -> Inputs {
    let mut rng = stream(seed, &[tag::EVAL, l as u64]);
    let mut fill = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    Inputs {
        l,
        u: fill(l * d, -1.0, 1.0),
        delta: fill(l, 0.001, 0.1),
        a: fill(d * s, -2.0, -0.1),
        b: fill(l * s, -1.0, 1.0),
        c: fill(l * s, -1.0, 1.0),
        order: (0..l).collect(),
    }
}

fn run_once(x: &Inputs, d: usize, s: usize) -> f64 {
    let t = Instant::now();
    let y = selective_scan_values(&x.u, &x.delta, &x.a, &x.b, &x.c, x.l, d, s, &x.order);
    let ms = t.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(y);
    ms
}

/// Times `reps` forward scans at each length after one warm-up run.
/// Repetitions are interleaved across lengths so slow drift in machine load
/// affects every length alike.
pub fn scan_bench(lengths: &[usize], width: usize, state: usize, reps: usize, seed: u64) -> Vec<BenchRow> {
    let all: Vec<Inputs> = lengths.iter().map(|&l| inputs(l, width, state, seed)).collect();
    let mut times = vec![Vec::with_capacity(reps); lengths.len()];
    for x in &all {
        run_once(x, width, state);
    }
    for _ in 0..reps.max(1) {
        for (x, t) in all.iter().zip(&mut times) {
            t.push(run_once(x, width, state));
        }
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(lengths.len());
    for (&l, mut t) in lengths.iter().zip(times) {
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let std = (t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        t.sort_by(f64::total_cmp);
        let median = if t.len() % 2 == 1 { t[t.len() / 2] } else { (t[t.len() / 2 - 1] + t[t.len() / 2]) / 2.0 };
        let ratio = rows.iter().find(|r| r.l * 2 == l).map(|r| median / r.median_ms);
        rows.push(BenchRow { l, mean_ms: mean, std_ms: std, median_ms: median, ratio_vs_half: ratio });
    }
    rows
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("L,mean_ms,std_ms,ratio_vs_half\n");
    for r in rows {
        let ratio = r.ratio_vs_half.map_or(String::new(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "{},{:.6},{:.6},{}", r.l, r.mean_ms, r.std_ms, ratio);
    }
    out
}
