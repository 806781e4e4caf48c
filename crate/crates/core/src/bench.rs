//! Kernel benchmark: dense vs uniform 1xN vs non-uniform 1xN on a single conv layer.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsr::encode;
use crate::conv::{im2col_raw, ConvGeometry};
use crate::criterion::Criterion;
use crate::error::{Error, Result};
use crate::infer::{raw, RaggedBsrLayer, WorkloadReport};
use crate::mask::{kept_per_group, BlockMask, BlockPartition};
use crate::controller::prune_step;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mode,N,p,workers,median_us,blocks_per_worker_min,blocks_per_worker_max,flops";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    /// Every row group keeps the same number of blocks.
    Uniform,
    /// Layer-wide top-k by magnitude; row groups keep different counts.
    NonUniform,
    /// Same block budget as uniform, packed into the leading row groups
    /// (full groups first, trailing groups empty).
    Skewed,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Dense => "dense",
            BenchMode::Uniform => "uniform",
            BenchMode::NonUniform => "nonuniform",
            BenchMode::Skewed => "skewed",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(BenchMode::Dense),
            "uniform" => Ok(BenchMode::Uniform),
            "nonuniform" => Ok(BenchMode::NonUniform),
            "skewed" => Ok(BenchMode::Skewed),
            _ => Err(Error::Input(format!("unknown bench mode '{s}' (dense, uniform, nonuniform, skewed)"))),
        }
    }
}

/// One conv layer applied with stride 1 and same padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
}

impl FromStr for BenchShape {
    type Err = Error;

    /// `c_out,c_in,kh,kw,h,w[,batch]`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Input(format!("shape '{s}' must be comma-separated integers")))?;
        let (c_out, c_in, kh, kw, height, width, batch) = match v[..] {
            [a, b, c, d, e, f] => (a, b, c, d, e, f, 1),
            [a, b, c, d, e, f, g] => (a, b, c, d, e, f, g),
            _ => return Err(Error::Input(format!("shape '{s}' needs 6 or 7 values: c_out,c_in,kh,kw,h,w[,batch]"))),
        };
        if v.contains(&0) {
            return Err(Error::Input("shape values must be positive".into()));
        }
        Ok(BenchShape { c_out, c_in, kh, kw, height, width, batch })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub shape: BenchShape,
    pub n: usize,
    pub p: f64,
    pub mode: BenchMode,
    pub workers: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Input(format!("p={} must lie in [0, 1)", self.p)));
        }
        if self.workers == 0 || self.repeats == 0 {
            return Err(Error::Input("workers and repeats must be positive".into()));
        }
        BlockPartition::new([self.shape.c_out, self.shape.c_in, self.shape.kh, self.shape.kw], self.n, "bench")
            .map_err(|e| Error::Input(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub median_us: f64,
    /// Multiply-accumulates of one forward pass.
    pub flops: u64,
    /// Workload of the last timed repeat.
    pub report: WorkloadReport,
}

impl BenchResult {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{:.3},{},{},{}",
            c.mode,
            c.n,
            c.p,
            c.workers,
            self.median_us,
            self.report.min_blocks(),
            self.report.max_blocks(),
            self.flops
        )
    }
}

/// Concentrates `budget` blocks into the leading row groups.
pub fn skewed_mask(partition: BlockPartition, budget: usize) -> BlockMask {
    let mut mask = BlockMask::zeros(partition);
    let mut left = budget.min(partition.num_blocks());
    for j in 0..partition.num_row_groups() {
        for k in 0..partition.c_in {
            if left == 0 {
                return mask;
            }
            mask.set(j, k, true);
            left -= 1;
        }
    }
    mask
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) { 0.5 * (xs[m - 1] + xs[m]) } else { xs[m] }
}

/// Generates a random layer and input, builds the mode's mask, runs `warmup`
/// untimed and `repeats` timed passes and reports the median.
pub fn bench_kernel(config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    let s = config.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let wlen = s.c_out * s.c_in * s.kh * s.kw;
    let weights = Tensor::from_vec(&[s.c_out, s.c_in, s.kh, s.kw], (0..wlen).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
    let bias: Vec<f32> = (0..s.c_out).map(|_| rng.random_range(-0.1f32..0.1)).collect();
    let input: Vec<f32> = (0..s.batch * s.c_in * s.height * s.width).map(|_| rng.random::<f32>()).collect();
    let geo = ConvGeometry::new([s.batch, s.c_in, s.height, s.width], (s.kh, s.kw), 1, (s.kh - 1) / 2)?;
    let patches = Tensor::from_vec(&[geo.patches(), geo.patch_len()], im2col_raw(&input, &geo))?;
    let pt = raw::transpose_patches(&patches)?;
    let p = geo.patches();
    let part = BlockPartition::of(&weights, config.n, "bench")?;
    let block_flops = (part.block_len() * p) as u64;

    let mut run: Box<dyn FnMut() -> WorkloadReport> = match config.mode {
        BenchMode::Dense => {
            let w = weights.data().to_vec();
            Box::new(move || raw::dense(&w, &bias, config.n, s.c_in, &pt, p, config.workers).1)
        }
        BenchMode::Uniform => {
            let mask = if config.p == 0.0 {
                BlockMask::ones(part)
            } else {
                prune_step(&weights, &part, config.p, Criterion::L1, 0.0, true)?.0
            };
            let layer = encode(&weights, &bias, &mask)?;
            Box::new(move || raw::bsr(&layer, &pt, p, config.workers).1)
        }
        BenchMode::NonUniform | BenchMode::Skewed => {
            let mask = if config.mode == BenchMode::Skewed {
                skewed_mask(part, part.num_row_groups() * kept_per_group(s.c_in, config.p))
            } else if config.p == 0.0 {
                BlockMask::ones(part)
            } else {
                prune_step(&weights, &part, config.p, Criterion::L1, 0.0, false)?.0
            };
            let layer = RaggedBsrLayer::from_mask(&weights, &bias, &mask)?;
            Box::new(move || raw::ragged(&layer, &pt, p, config.workers).1)
        }
    };
    for _ in 0..config.warmup {
        std::hint::black_box(run());
    }
    let mut times = Vec::with_capacity(config.repeats);
    let mut report = WorkloadReport::default();
    for _ in 0..config.repeats {
        let t0 = Instant::now();
        report = std::hint::black_box(run());
        times.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let flops = report.total_blocks() as u64 * block_flops;
    Ok(BenchResult { config: config.clone(), median_us: median(times), flops, report })
}
