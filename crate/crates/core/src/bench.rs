//! Dense vs filtered vs random-dropout vs pooled attention: analytic MACs and
//! measured latency.
//!
//! Timing ([`measure`]) is separate from aggregation ([`aggregate`]) so the
//! report can be rebuilt from recorded samples.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_attention::flops::{block_macs, AttentionDims, AttentionKind};
use crate::filter_attention::{FilterAttention, FilterAttentionSpec, PooledGlobalAttention, Variant};
use crate::nn::{init, Ctx, Mode, ParamStore, TransformerEncoder};
use crate::tensor::Element;

pub const CSV_HEADER: &str = "res,channels,variant,K,macs,median_ms,speedup_vs_dense";
pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    /// Token budgets as divisors of `H·W` (`K = H·W / d`).
    #[serde(default = "default_divisors")]
    pub k_divisors: Vec<usize>,
    #[serde(default = "default_windows")]
    pub pool_windows: Vec<usize>,
    #[serde(default = "default_one")]
    pub depth: usize,
    #[serde(default = "default_two")]
    pub heads: usize,
    #[serde(default = "default_two")]
    pub mlp_ratio: usize,
    #[serde(default = "default_one")]
    pub batch: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_divisors() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}
fn default_windows() -> Vec<usize> {
    vec![2, 4]
}
fn default_one() -> usize {
    1
}
fn default_two() -> usize {
    2
}
fn default_reps() -> usize {
    MIN_REPS
}
fn default_warmup() -> usize {
    MIN_WARMUP
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            resolutions: vec![8, 16, 32],
            channels: vec![32],
            k_divisors: default_divisors(),
            pool_windows: default_windows(),
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            batch: 1,
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
            seed: 0,
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(Error::config("reps", format!("{} is below the minimum of {MIN_REPS}", self.reps)));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::config("warmup", format!("{} is below the minimum of {MIN_WARMUP}", self.warmup)));
        }
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(Error::config("resolutions", "need at least one positive resolution"));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0 || self.heads == 0 || c % self.heads != 0) {
            return Err(Error::config("channels", format!("each must be a positive multiple of heads = {}", self.heads)));
        }
        if self.k_divisors.contains(&0) || self.pool_windows.contains(&0) || self.batch == 0 {
            return Err(Error::config("k_divisors", "divisors, windows and batch must be positive"));
        }
        Ok(())
    }

    /// Every configuration the grid names, dense first per `(res, channels)`.
    /// Budgets that do not divide `H·W` and windows that do not divide the
    /// resolution are skipped.
    pub fn cases(&self) -> Vec<BenchCase> {
        let mut out = Vec::new();
        for &res in &self.resolutions {
            for &channels in &self.channels {
                let hw = res * res;
                let case = |kind| BenchCase { res, channels, kind };
                out.push(case(AttentionKind::Dense));
                for &d in &self.k_divisors {
                    if hw % d == 0 {
                        out.push(case(AttentionKind::Filter { k: (hw / d) as u64 }));
                    }
                }
                for &d in &self.k_divisors {
                    if hw % d == 0 {
                        out.push(case(AttentionKind::Dropout { k: (hw / d) as u64 }));
                    }
                }
                for &w in &self.pool_windows {
                    if res % w == 0 {
                        out.push(case(AttentionKind::Pooled { window: w as u64 }));
                    }
                }
            }
        }
        out
    }

    pub fn dims(&self, res: usize, channels: usize) -> AttentionDims {
        AttentionDims {
            height: res as u64,
            width: res as u64,
            channels: channels as u64,
            depth: self.depth as u64,
            mlp_ratio: self.mlp_ratio as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub res: usize,
    pub channels: usize,
    pub kind: AttentionKind,
}

impl BenchCase {
    pub fn variant_name(&self) -> &'static str {
        match self.kind {
            AttentionKind::Dense => "dense",
            AttentionKind::Filter { .. } => "filter",
            AttentionKind::Dropout { .. } => "dropout",
            AttentionKind::Pooled { .. } => "pooled",
        }
    }
}

/// Raw timings of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub case: BenchCase,
    pub macs: u64,
    pub times_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub res: usize,
    pub channels: usize,
    pub variant: String,
    /// Tokens entering attention.
    pub k: u64,
    pub macs: u64,
    pub median_ms: f64,
    /// `median(dense) / median(self)` at the same resolution and width.
    pub speedup_vs_dense: Option<f64>,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub element_bytes: usize,
    pub reps: usize,
    pub warmup: usize,
    pub batch: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub meta: BenchMeta,
    pub rows: Vec<BenchRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pure report assembly from raw samples.
pub fn aggregate(grid: &BenchGrid, samples: &[Sample], meta: BenchMeta) -> BenchReport {
    let rows = samples
        .iter()
        .map(|s| {
            let m = median(&s.times_ms);
            let dense = samples
                .iter()
                .find(|d| d.case.kind == AttentionKind::Dense && d.case.res == s.case.res && d.case.channels == s.case.channels)
                .map(|d| median(&d.times_ms));
            BenchRow {
                res: s.case.res,
                channels: s.case.channels,
                variant: s.case.variant_name().to_string(),
                k: s.case.kind.tokens(&grid.dims(s.case.res, s.case.channels)),
                macs: s.macs,
                median_ms: m,
                speedup_vs_dense: dense.map(|d| d / m),
                fps: 1000.0 / m,
            }
        })
        .collect();
    BenchReport { meta, rows }
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let sp = r.speedup_vs_dense.map_or(String::new(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{},{},{},{},{},{:.6},{}", r.res, r.channels, r.variant, r.k, r.macs, r.median_ms, sp);
        }
        s
    }

    pub fn table(&self) -> String {
        let m = &self.meta;
        let mut s = format!(
            "element {} bytes, batch {}, {} reps after {} warmup, {} thread(s)\n",
            m.element_bytes, m.batch, m.reps, m.warmup, m.threads
        );
        let _ = writeln!(s, "{:>5} {:>4} {:>8} {:>6} {:>14} {:>10} {:>8} {:>9}", "res", "ch", "variant", "K", "MACs", "median ms", "speedup", "fps");
        for r in &self.rows {
            let sp = r.speedup_vs_dense.map_or("-".into(), |v| format!("{v:.2}x"));
            let _ = writeln!(
                s,
                "{:>5} {:>4} {:>8} {:>6} {:>14} {:>10.3} {:>8} {:>9.1}",
                r.res, r.channels, r.variant, r.k, r.macs, r.median_ms, sp, r.fps
            );
        }
        s
    }
}

enum Block {
    Dense(TransformerEncoder),
    Filter(FilterAttention),
    Pooled(PooledGlobalAttention),
}

/// Times `grid.reps` forward passes of one configuration after
/// `grid.warmup` untimed ones.
pub fn measure<T: Element>(grid: &BenchGrid, case: BenchCase) -> Result<Sample> {
    let (res, c) = (case.res, case.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let mut store = ParamStore::<T>::new();
    let spec = |k: u64, variant| FilterAttentionSpec {
        channels: c,
        height: res,
        width: res,
        k: k as usize,
        depth: grid.depth,
        heads: grid.heads,
        mlp_ratio: grid.mlp_ratio,
        variant,
        residual_scatter: false,
        eval_selection: Default::default(),
    };
    let block = match case.kind {
        AttentionKind::Dense => Block::Dense(TransformerEncoder::new(&mut store, "b", c, grid.depth, grid.heads, grid.mlp_ratio, &mut rng)?),
        AttentionKind::Filter { k } => Block::Filter(FilterAttention::new(&mut store, "b", spec(k, Variant::Filter), &mut rng)?),
        AttentionKind::Dropout { k } => Block::Filter(FilterAttention::new(&mut store, "b", spec(k, Variant::Dropout), &mut rng)?),
        AttentionKind::Pooled { window } => Block::Pooled(PooledGlobalAttention::new(
            &mut store,
            "b",
            c,
            window as usize,
            grid.depth,
            grid.heads,
            grid.mlp_ratio,
            &mut rng,
        )?),
    };
    let shape = match block {
        Block::Dense(_) => vec![grid.batch, res * res, c],
        _ => vec![grid.batch, c, res, res],
    };
    let x = init::uniform::<T>(&shape, 1.0, &mut rng);
    // the dropout variant only samples at random while training
    let mode = if matches!(case.kind, AttentionKind::Dropout { .. }) { Mode::Train } else { Mode::Eval };
    let run = |i: usize| -> Result<f64> {
        let mut ctx = Ctx::new(mode, false, grid.seed.wrapping_add(i as u64));
        let xv = ctx.input(x.clone());
        let t = Instant::now();
        let y = match &block {
            Block::Dense(e) => e.forward(&mut ctx, &store, xv)?,
            Block::Filter(f) => f.forward(&mut ctx, &store, xv)?,
            Block::Pooled(p) => p.forward(&mut ctx, &store, xv)?,
        };
        std::hint::black_box(ctx.tape.value(y));
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    for i in 0..grid.warmup {
        run(i)?;
    }
    let times_ms = (0..grid.reps).map(|i| run(grid.warmup + i)).collect::<Result<_>>()?;
    Ok(Sample { case, macs: block_macs(case.kind, &grid.dims(res, c)), times_ms })
}

/// Runs every case of the grid serially.
pub fn run_bench<T: Element>(grid: &BenchGrid) -> Result<BenchReport> {
    grid.validate()?;
    let samples = grid.cases().into_iter().map(|c| measure::<T>(grid, c)).collect::<Result<Vec<_>>>()?;
    let meta = BenchMeta {
        element_bytes: std::mem::size_of::<T>(),
        reps: grid.reps,
        warmup: grid.warmup,
        batch: grid.batch,
        threads: crate::par::threads(),
    };
    Ok(aggregate(grid, &samples, meta))
}
