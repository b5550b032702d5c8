//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geo::{MAX_POINTS, MIN_POINTS};
use crate::loss::LossConfig;
use crate::measures::MeasureKind;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Cleaned dataset in the trajectory text format.
    pub data: Option<PathBuf>,
    /// Ground-truth matrix; defaults to `<out>/gt-<measure>.tsim`.
    pub gt: Option<PathBuf>,
    pub out: PathBuf,
    pub measure: MeasureKind,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            data: None,
            gt: None,
            out: PathBuf::from("run"),
            measure: MeasureKind::DiscreteFrechet,
            split: [0.7, 0.1, 0.2],
            d: model.d,
            heads: model.heads,
            layers: model.layers,
            lr: train.lr,
            batch: train.batch_size,
            epochs: train.max_epochs,
            patience: train.patience,
            lambda: train.loss.lambda,
            seed: 0,
            min_len: MIN_POINTS,
            max_len: MAX_POINTS,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data", "gt", "out", "measure", "train_frac", "val_frac", "test_frac", "d", "heads", "layers", "lr", "batch",
    "epochs", "patience", "lambda", "seed", "min_len", "max_len",
];

impl RunConfig {
    /// Parses config text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::InvalidArgument(format!("config line {line_no}: {message}"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(bad(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value, base).map_err(|e| bad(e.to_string()))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {v:?}")))
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        match key {
            "data" => self.data = Some(path(value)),
            "gt" => self.gt = Some(path(value)),
            "out" => self.out = path(value),
            "measure" => self.measure = value.parse()?,
            "train_frac" => self.split[0] = num(key, value)?,
            "val_frac" => self.split[1] = num(key, value)?,
            "test_frac" => self.split[2] = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "min_len" => self.min_len = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.split)));
        }
        if self.min_len < 7 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "length bounds [{}, {}] invalid",
                self.min_len, self.max_len
            )));
        }
        self.model_config()?;
        self.train_config().validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.d, self.heads, self.layers)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            max_epochs: self.epochs,
            batch_size: self.batch,
            patience: self.patience,
            seed: self.seed,
            loss: LossConfig {
                lambda: self.lambda,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn gt_path(&self) -> PathBuf {
        self.gt
            .clone()
            .unwrap_or_else(|| self.out.join(format!("gt-{}.tsim", self.measure.tag())))
    }

    /// Contiguous split sizes for `n` items in file order.
    pub fn split_sizes(&self, n: usize) -> [usize; 3] {
        let train = (self.split[0] * n as f64).round() as usize;
        let val = ((self.split[1] * n as f64).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        [train, val, n - train - val]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let text = "# run\ndata = trajs.txt\nmeasure=dtw  # comment\nd = 64\nheads = 4\nbatch = 64\nlambda = 1\nout=/tmp/x\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.data.as_deref(), Some(Path::new("/base/trajs.txt")));
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
        assert_eq!(c.measure, MeasureKind::Dtw);
        assert_eq!((c.d, c.heads, c.batch, c.lambda), (64, 4, 64, 1.0));
        assert_eq!(c.gt_path(), PathBuf::from("/tmp/x/gt-dtw.tsim"));
        assert_eq!(c.train_config().loss.lambda, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour = red\n",
            "d\n",
            "d = many\n",
            "d = 30\nheads = 4\n",
            "train_frac = 0.5\n",
            "lambda = 2\n",
            "seed = 1\nseed = 2\n",
            "measure = cosine\n",
        ] {
            assert!(matches!(RunConfig::parse(text, Path::new(".")), Err(Error::InvalidArgument(_))), "{text:?}");
        }
    }

    #[test]
    fn default_split_is_seven_one_two() {
        let c = RunConfig::default();
        assert_eq!(c.split_sizes(1000), [700, 100, 200]);
        assert_eq!(c.split_sizes(3), [2, 0, 1]);
        assert_eq!(c.split_sizes(0), [0, 0, 0]);
    }
}
