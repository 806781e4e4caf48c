//! The five subcommands. Each returns the text it prints to stdout.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use subp::bench::{bench_kernel, BenchConfig, BenchMode, BenchShape, CSV_HEADER};
use subp::bsr::{storage_footprint, LayerRecord};
use subp::data::Samples;
use subp::flops::flops_report;
use subp::format::{read_file, serialize};
use subp::train::train_subp;
use subp::{BlockMask, BsrModel, Model};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// `epoch,loss,top1` followed by one density column per prunable conv.
pub fn metrics_header(convs: usize) -> String {
    let mut h = String::from("epoch,loss,top1");
    for i in 1..convs {
        let _ = write!(h, ",density_conv{}", i + 1);
    }
    h
}

fn metrics_csv(out: &subp::TrainOutput, convs: usize) -> String {
    let mut s = metrics_header(convs);
    s.push('\n');
    for m in &out.log {
        let _ = write!(s, "{},{:.6},{:.6}", m.epoch, m.loss, m.top1);
        for i in 0..convs - 1 {
            let _ = write!(s, ",{:.6}", m.densities.get(i).copied().unwrap_or(1.0));
        }
        s.push('\n');
    }
    s
}

/// Single summary line: accuracy, whole-network and prunable-layer FLOPs, densities.
fn summary(model: &Model, masks: Option<&[BlockMask]>, image: [usize; 3], top1: f64) -> Result<String> {
    let dense = flops_report(model, image, None)?;
    let sparse = flops_report(model, image, masks)?;
    let mut s = format!(
        "top1={top1:.6} flops_dense={} flops_sparse={} prunable_flops_dense={} prunable_flops_sparse={}",
        dense.total(),
        sparse.total(),
        dense.prunable(),
        sparse.prunable()
    );
    for i in 1..model.convs.len() {
        let d = masks.map_or(1.0, |m| m[i - 1].density());
        let _ = write!(s, " density_conv{}={d:.6}", i + 1);
    }
    Ok(s)
}

pub fn train(config_path: &Path, out_dir: &Path) -> Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let data = cfg.dataset()?;
    let init = match &cfg.init_weights {
        Some(p) => Some(Checkpoint::load(p)?.model()?),
        None => None,
    };
    let out = train_subp::<f32>(&cfg.train_config(), &data, init)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let masks = out.final_masks();
    Checkpoint::new(&out.model, masks.as_deref(), cfg.n).save(&out_dir.join(CHECKPOINT_FILE))?;
    write(&out_dir.join(METRICS_FILE), metrics_csv(&out, cfg.channels.len()))?;
    summary(&out.model, masks.as_deref(), data.train.image_shape, out.final_top1())
}

pub fn export(checkpoint: &Path, out: &Path) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = BsrModel::from_model(&ck.model()?, ck.masks()?.as_deref(), ck.n)?;
    let bytes = serialize(&model)?;
    write(out, &bytes)?;
    let (mut values, mut index, mut dense) = (0, 0, 0);
    for layer in &model.layers {
        if let LayerRecord::Bsr(b) = layer {
            let f = storage_footprint(b);
            values += f.value_bytes;
            index += f.index_bytes;
            dense += f.dense_bytes;
        }
    }
    Ok(format!(
        "wrote {} layers={} bytes={} sparse_value_bytes={values} sparse_index_bytes={index} sparse_dense_bytes={dense}",
        out.display(),
        model.layers.len(),
        bytes.len()
    ))
}

fn batched<F>(samples: &Samples, mut f: F) -> Result<(Vec<usize>, Vec<f32>)>
where
    F: FnMut(&subp::Tensor) -> subp::Result<subp::Tensor>,
{
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut preds = Vec::new();
    let mut logits = Vec::new();
    for chunk in idx.chunks(256) {
        let (x, _) = samples.batch::<f32>(chunk);
        let out = f(&x)?;
        preds.extend(subp::loss::argmax_rows(&out)?);
        logits.extend_from_slice(out.data());
    }
    Ok((preds, logits))
}

pub struct InferOptions {
    pub workers: usize,
    pub compare_dense: bool,
    pub predictions: Option<PathBuf>,
}

pub fn infer(model_path: &Path, config_path: &Path, opts: &InferOptions) -> Result<String> {
    if opts.workers == 0 {
        return Err(CliError::Usage("workers must be at least 1".into()));
    }
    let model = read_file(model_path)?;
    let cfg = RunConfig::load(config_path)?;
    let data = cfg.dataset()?;
    let first = model.layers.first().ok_or_else(|| subp::Error::Input("model has no layers".into()))?;
    let last = model.layers.last().expect("non-empty");
    if first.shape()[1] != data.val.image_shape[0] || last.shape()[0] != data.classes {
        return Err(subp::Error::Input(format!(
            "model takes {} channels and predicts {} classes, dataset has {} and {}",
            first.shape()[1],
            last.shape()[0],
            data.val.image_shape[0],
            data.classes
        ))
        .into());
    }
    let (preds, logits) = batched(&data.val, |x| model.forward(x, opts.workers))?;
    let correct = preds.iter().zip(&data.val.labels).filter(|(p, y)| p == y).count();
    let top1 = correct as f64 / data.val.len() as f64;
    let mut line = format!("top1={top1:.6} samples={} workers={}", data.val.len(), opts.workers);
    if opts.compare_dense {
        let dense = model.to_dense()?;
        let (dense_preds, dense_logits) = batched(&data.val, |x| dense.forward(x, None))?;
        let max_diff = logits.iter().zip(&dense_logits).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0f32, f32::max);
        if dense_preds != preds || max_diff > 1e-5 {
            return Err(subp::Error::Invariant(format!(
                "sparse and dense paths disagree: {} differing predictions, max logit difference {max_diff:e}",
                preds.iter().zip(&dense_preds).filter(|(a, b)| a != b).count()
            ))
            .into());
        }
        let _ = write!(line, " dense_top1={top1:.6} max_logit_diff={max_diff:.3e}");
    }
    if let Some(path) = &opts.predictions {
        let mut s = String::from("index,label,prediction\n");
        for (i, (y, p)) in data.val.labels.iter().zip(&preds).enumerate() {
            let _ = writeln!(s, "{i},{y},{p}");
        }
        write(path, s)?;
    }
    Ok(line)
}

pub struct BenchOptions {
    pub shape: BenchShape,
    pub n: usize,
    pub p: f64,
    pub modes: Vec<BenchMode>,
    pub workers: Vec<usize>,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Rows are appended here (header first if the file is new) instead of printed.
    pub out: Option<PathBuf>,
}

pub fn bench(opts: &BenchOptions) -> Result<String> {
    let configs: Vec<BenchConfig> = opts
        .modes
        .iter()
        .flat_map(|&mode| {
            opts.workers.iter().map(move |&workers| BenchConfig {
                shape: opts.shape,
                n: opts.n,
                p: opts.p,
                mode,
                workers,
                warmup: opts.warmup,
                repeats: opts.repeats,
                seed: opts.seed,
            })
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in &configs {
        rows.push(bench_kernel(c)?.csv_row());
    }
    match &opts.out {
        None => Ok(format!("{CSV_HEADER}\n{}", rows.join("\n"))),
        Some(path) => {
            let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
            let mut text = String::new();
            if fresh {
                text.push_str(CSV_HEADER);
                text.push('\n');
            }
            for r in &rows {
                text.push_str(r);
                text.push('\n');
            }
            f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
            Ok(format!("appended {} rows to {}", rows.len(), path.display()))
        }
    }
}

pub fn dataset(config_path: &Path, out: &Path) -> Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let data = cfg.dataset()?;
    let bytes = data.to_bytes()?;
    write(out, &bytes)?;
    let [c, h, w] = data.train.image_shape;
    Ok(format!(
        "wrote {} classes={} image={c}x{h}x{w} train={} val={} bytes={}",
        out.display(),
        data.classes,
        data.train.len(),
        data.val.len(),
        bytes.len()
    ))
}
