//! Flat `key = value` run configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are ignored.
//! Relative paths are resolved against the directory holding the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use subp::data::{Dataset, SyntheticSpec};
use subp::model::TinyNetSpec;
use subp::optim::SgdConfig;
use subp::train::{PruneConfig, TrainConfig};
use subp::{Criterion, SubpSchedule};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub image_channels: usize,
    pub classes: usize,
    /// Samples per class before the 80/20 split.
    pub samples: usize,
    pub noise: f64,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// `false` trains the dense baseline and ignores the sparsity keys.
    pub prune: bool,
    pub n: usize,
    pub p: f64,
    pub layer_p: Option<Vec<f64>>,
    pub criterion: Criterion,
    pub tau: f64,
    pub lambda: f64,
    pub delta0: f64,
    pub t_s: usize,
    pub t_e: usize,
    pub update_period: usize,
    pub uniform: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_weights: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let data = SyntheticSpec::default();
        let sched = SubpSchedule::default();
        RunConfig {
            seed: 0,
            channels: vec![16, 16, 16],
            image_size: data.image_size,
            image_channels: data.image_channels,
            classes: data.classes,
            samples: data.samples_per_class,
            noise: data.noise,
            peak_lr: sgd.peak_lr,
            warmup_epochs: sgd.warmup_epochs,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            label_smoothing: sgd.label_smoothing,
            prune: true,
            n: 4,
            p: sched.p,
            layer_p: None,
            criterion: sched.criterion,
            tau: sched.tau,
            lambda: sched.lambda,
            delta0: sched.delta0,
            t_s: 5,
            t_e: 40,
            update_period: sched.update_period,
            uniform: sched.uniform,
            epochs: 60,
            batch_size: 32,
            init_weights: None,
            dataset_path: None,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("invalid value '{raw}' for {key}"))
}

fn list<T: FromStr>(key: &str, raw: &str) -> std::result::Result<Vec<T>, String> {
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

fn flag(key: &str, raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value '{raw}' for {key} (expected true or false)")),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text. `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| CliError::ConfigLine { line, message };
            let (key, raw) = trimmed.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key {key}")));
            }
            cfg.set(key, raw, base).map_err(err)?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str, base: &Path) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = value(key, raw)?,
            "channels" => self.channels = list(key, raw)?,
            "image_size" => self.image_size = value(key, raw)?,
            "image_channels" => self.image_channels = value(key, raw)?,
            "classes" => self.classes = value(key, raw)?,
            "samples" => self.samples = value(key, raw)?,
            "noise" => self.noise = value(key, raw)?,
            "peak_lr" => self.peak_lr = value(key, raw)?,
            "warmup_epochs" => self.warmup_epochs = value(key, raw)?,
            "momentum" => self.momentum = value(key, raw)?,
            "weight_decay" => self.weight_decay = value(key, raw)?,
            "label_smoothing" => self.label_smoothing = value(key, raw)?,
            "prune" => self.prune = flag(key, raw)?,
            "n" => self.n = value(key, raw)?,
            "p" => self.p = value(key, raw)?,
            "layer_p" => self.layer_p = Some(list(key, raw)?),
            "criterion" => self.criterion = raw.parse().map_err(|e: subp::Error| e.to_string())?,
            "tau" => self.tau = value(key, raw)?,
            "lambda" => self.lambda = value(key, raw)?,
            "delta0" => self.delta0 = value(key, raw)?,
            "t_s" => self.t_s = value(key, raw)?,
            "t_e" => self.t_e = value(key, raw)?,
            "update_period" => self.update_period = value(key, raw)?,
            "uniform" => self.uniform = flag(key, raw)?,
            "epochs" => self.epochs = value(key, raw)?,
            "batch_size" => self.batch_size = value(key, raw)?,
            "init_weights" => self.init_weights = Some(base.join(raw)),
            "dataset_path" => self.dataset_path = Some(base.join(raw)),
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            image_channels: self.image_channels,
            classes: self.classes,
            samples_per_class: self.samples,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            arch: TinyNetSpec { image_channels: self.image_channels, channels: self.channels.clone(), num_classes: self.classes },
            sgd: SgdConfig {
                peak_lr: self.peak_lr,
                warmup_epochs: self.warmup_epochs,
                total_epochs: self.epochs as f64,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                label_smoothing: self.label_smoothing,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            prune: self.prune.then(|| PruneConfig {
                n: self.n,
                schedule: SubpSchedule {
                    p: self.p,
                    delta0: self.delta0,
                    t_s: self.t_s,
                    t_e: self.t_e,
                    tau: self.tau,
                    lambda: self.lambda,
                    update_period: self.update_period,
                    criterion: self.criterion,
                    uniform: self.uniform,
                },
                layer_p: self.layer_p.clone(),
            }),
        }
    }

    /// Every range and divisibility check, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_path.is_none() {
            self.synthetic().validate()?;
        }
        self.train_config().validate()?;
        Ok(())
    }

    /// The synthetic dataset, or the raw dataset file named by `dataset_path`.
    pub fn dataset(&self) -> Result<Dataset> {
        let Some(path) = &self.dataset_path else {
            return Ok(self.synthetic().generate()?);
        };
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let data = Dataset::from_bytes(&bytes)?;
        let [c, h, _] = data.train.image_shape;
        if c != self.image_channels || h != self.image_size || data.classes != self.classes {
            return Err(subp::Error::Config(format!(
                "{} holds {} classes of {c}x{h} images, config expects {} classes of {}x{}",
                path.display(),
                data.classes,
                self.classes,
                self.image_channels,
                self.image_size
            ))
            .into());
        }
        Ok(data)
    }

    /// Renders the config back to `key = value` text (paths as given after resolution).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("channels", join(&self.channels));
        put("image_size", self.image_size.to_string());
        put("image_channels", self.image_channels.to_string());
        put("classes", self.classes.to_string());
        put("samples", self.samples.to_string());
        put("noise", self.noise.to_string());
        put("peak_lr", self.peak_lr.to_string());
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("label_smoothing", self.label_smoothing.to_string());
        put("prune", self.prune.to_string());
        put("n", self.n.to_string());
        put("p", self.p.to_string());
        if let Some(ps) = &self.layer_p {
            put("layer_p", join(ps));
        }
        put("criterion", self.criterion.to_string());
        put("tau", self.tau.to_string());
        put("lambda", self.lambda.to_string());
        put("delta0", self.delta0.to_string());
        put("t_s", self.t_s.to_string());
        put("t_e", self.t_e.to_string());
        put("update_period", self.update_period.to_string());
        put("uniform", self.uniform.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        if let Some(p) = &self.init_weights {
            put("init_weights", p.display().to_string());
        }
        if let Some(p) = &self.dataset_path {
            put("dataset_path", p.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("# comment\n\nseed = 7\nchannels = 8, 16,16\ncriterion = l1\nuniform = false\nlayer_p = 0.5,0.75\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.channels, vec![8, 16, 16]);
        assert_eq!(c.criterion, Criterion::L1);
        assert!(!c.uniform);
        assert_eq!(c.layer_p, Some(vec![0.5, 0.75]));
        assert_eq!((c.t_s, c.t_e, c.epochs), (5, 40, 60));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("bogus"));
        let e = parse("\n\nepochs = many\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 3, .. }));
        assert!(matches!(parse("seed\n"), Err(CliError::ConfigLine { line: 1, .. })));
        assert!(matches!(parse("seed = 1\nseed = 2\n"), Err(CliError::ConfigLine { line: 2, .. })));
        assert!(matches!(parse("uniform = maybe\n"), Err(CliError::ConfigLine { line: 1, .. })));
        assert!(matches!(parse("criterion = taylor\n"), Err(CliError::ConfigLine { line: 1, .. })));
    }

    #[test]
    fn divisibility_is_a_config_error() {
        let c = parse("channels = 16,6,16\nn = 4\n").unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.category(), "config");
        assert!(e.to_string().contains("conv2"), "{e}");
        // The dense baseline has no divisibility constraint.
        assert!(parse("channels = 16,6,16\nprune = false\n").unwrap().validate().is_ok());
    }

    #[test]
    fn ranges_checked() {
        for bad in ["p = 1.0", "samples = 2", "epochs = 0", "t_s = 50", "delta0 = 0.9", "noise = -1", "classes = 1", "tau = 0"] {
            assert!(parse(bad).unwrap().validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn text_round_trip() {
        let c = parse("seed = 3\nlayer_p = 0.25,0.5\ninit_weights = w.json\n").unwrap();
        assert_eq!(c.init_weights, Some(PathBuf::from("/cfg/w.json")));
        assert_eq!(parse(&c.to_text()).unwrap(), c);
    }
}
