//! Experiment files: training keys at the top level plus optional
//! `[model]`, `[data]`, `[eval]` and `[sweep]` tables.

use std::path::{Path, PathBuf};

use ibnn::data::{
    load_idx, make_cubic_regression, make_synthetic_images, read_regression_csv, CubicRegression, Dataset, Split,
};
use ibnn::experiments::{classifier_arch, regress1d_config, regression_arch, images_config};
use ibnn::model::{Architecture, Likelihood, Method};
use ibnn::rng::{stream, Purpose};
use ibnn::train::TrainConfig;
use ibnn::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Cubic regression, one hidden layer of 256 units.
    Regress1d,
    /// Synthetic 8×8 ten-class images with a small MLP.
    Images,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// `y = x³` points generated from the seed.
    Cubic {
        #[serde(default = "default_points")]
        n_points: usize,
        #[serde(default = "default_range")]
        x_range: (f64, f64),
        #[serde(default)]
        noise_std: f64,
    },
    /// Prototype-based synthetic images generated from the seed.
    Synthetic {
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        side: usize,
    },
    /// Fashion-MNIST IDX files in the data directory.
    Idx {
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_test: Option<usize>,
    },
    /// `train.csv` (and optionally `test.csv`) with columns `x,y` in the data directory.
    Csv,
}

fn default_points() -> usize {
    30
}
fn default_range() -> (f64, f64) {
    (-1.0, 1.0)
}
fn default_classes() -> usize {
    10
}
fn default_side() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub samples: usize,
    pub batch: usize,
    pub per_datapoint: bool,
    pub bins: usize,
    pub intensities: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            samples: 5,
            batch: 256,
            per_datapoint: false,
            bins: ibnn::metrics::ECE_BINS,
            intensities: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub depths: Vec<usize>,
    pub width: usize,
    pub factors: Vec<f64>,
    pub base_hidden: usize,
    pub hidden_layers: usize,
    pub seeds: Vec<u64>,
    pub bnn_prior_std: f64,
    pub bnn_init_std: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            depths: (1..=5).collect(),
            width: 256,
            factors: vec![1.0, 4.0, 16.0, 64.0],
            base_hidden: 8,
            hidden_layers: 1,
            seeds: vec![0, 1, 2],
            bnn_prior_std: 1.0,
            bnn_init_std: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: TrainConfig,
    pub model: Architecture,
    pub data: DataSpec,
    pub eval: EvalSpec,
    pub sweep: SweepSpec,
}

impl Experiment {
    pub fn preset(p: Preset, seed: u64) -> Self {
        match p {
            Preset::Regress1d => Self {
                train: regress1d_config(seed),
                model: regression_arch(Method::Ibnn, 1, 256),
                data: DataSpec::Cubic {
                    n_points: 30,
                    x_range: (-1.0, 1.0),
                    noise_std: 0.0,
                },
                eval: EvalSpec {
                    samples: 32,
                    ..EvalSpec::default()
                },
                sweep: SweepSpec::default(),
            },
            Preset::Images => Self {
                train: images_config(seed),
                model: classifier_arch(Method::Ibnn, &[64], 10),
                data: DataSpec::Synthetic {
                    n_train: 1000,
                    n_test: 500,
                    classes: 10,
                    side: 8,
                },
                eval: EvalSpec::default(),
                sweep: SweepSpec {
                    bnn_init_std: 0.1,
                    ..SweepSpec::default()
                },
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(text).map_err(bad)?;
        let mut take = |key: &str| table.remove(key);
        let model = take("model");
        let data = take("data");
        let eval = take("eval");
        let sweep = take("sweep");
        let data: Option<DataSpec> = data.map(|v| v.try_into()).transpose().map_err(bad)?;
        // unset training keys take the preset of the task: cubic without a [data] table
        let task = match &data {
            None | Some(DataSpec::Cubic { .. }) | Some(DataSpec::Csv) => Preset::Regress1d,
            Some(_) => Preset::Images,
        };
        let seed = table.get("seed").and_then(toml::Value::as_integer).unwrap_or(0);
        let preset = Self::preset(task, seed as u64);
        let defaults = toml::Table::try_from(&preset.train).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in defaults {
            table.entry(k).or_insert(v);
        }
        let train: TrainConfig = toml::Value::Table(table).try_into().map_err(bad)?;
        let (model, data) = match (model, data) {
            (Some(m), data) => (m.try_into().map_err(bad)?, data.unwrap_or(preset.data)),
            (None, None) => (preset.model, preset.data),
            (None, Some(_)) => return Err(Error::Config("a [data] table needs a [model] table".into())),
        };
        let eval = eval.map(|v| v.try_into()).transpose().map_err(bad)?.unwrap_or(preset.eval);
        let sweep = sweep.map(|v| v.try_into()).transpose().map_err(bad)?.unwrap_or(preset.sweep);
        train.validate()?;
        Ok(Self {
            train,
            model,
            data,
            eval,
            sweep,
        })
    }

    pub fn likelihood(&self) -> Likelihood {
        match self.data {
            DataSpec::Cubic { .. } | DataSpec::Csv => Likelihood::Regression {
                noise_std: self.train.noise_std,
            },
            _ => Likelihood::Classification,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }
}

/// Training and evaluation splits; `grid` is set for the cubic task.
pub struct Loaded {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub cubic: Option<CubicRegression<f64>>,
}

pub fn load_data(spec: &DataSpec, data_dir: Option<&Path>, seed: u64) -> Result<Loaded> {
    let dir = || -> Result<PathBuf> {
        let d = data_dir.ok_or_else(|| Error::Config("this data kind needs --data-dir".into()))?;
        if !d.is_dir() {
            return Err(Error::Data(format!("data directory {} does not exist", d.display())));
        }
        Ok(d.to_path_buf())
    };
    match *spec {
        DataSpec::Cubic {
            n_points,
            x_range,
            noise_std,
        } => {
            let mut rng = stream(seed, Purpose::Data, 0, 0);
            let c = make_cubic_regression(n_points, x_range, noise_std, &mut rng)?;
            Ok(Loaded {
                train: c.train.clone(),
                test: c.train.clone(),
                cubic: Some(c),
            })
        }
        DataSpec::Synthetic {
            n_train,
            n_test,
            classes,
            side,
        } => {
            let train = make_synthetic_images(
                n_train,
                classes,
                side,
                seed,
                Split::Train,
                &mut stream(seed, Purpose::Data, 1, 0),
            )?;
            let test = make_synthetic_images(
                n_test,
                classes,
                side,
                seed,
                Split::Test,
                &mut stream(seed, Purpose::Data, 2, 0),
            )?;
            Ok(Loaded {
                train,
                test,
                cubic: None,
            })
        }
        DataSpec::Idx {
            limit_train,
            limit_test,
        } => {
            let d = dir()?;
            let train = load_idx(
                d.join("train-images-idx3-ubyte"),
                d.join("train-labels-idx1-ubyte"),
                Split::Train,
            )?;
            let test = load_idx(
                d.join("t10k-images-idx3-ubyte"),
                d.join("t10k-labels-idx1-ubyte"),
                Split::Test,
            )?;
            let cut = |ds: Dataset<f64>, lim: Option<usize>| match lim {
                Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
                _ => ds,
            };
            Ok(Loaded {
                train: cut(train, limit_train),
                test: cut(test, limit_test),
                cubic: None,
            })
        }
        DataSpec::Csv => {
            let d = dir()?;
            let train = read_regression_csv(d.join("train.csv"))?;
            let test_path = d.join("test.csv");
            let test = if test_path.exists() {
                read_regression_csv(test_path)?
            } else {
                train.clone()
            };
            Ok(Loaded {
                train,
                test,
                cubic: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/cubic.toml"),
            include_str!("../../../configs/width_sweep.toml"),
            include_str!("../../../configs/corruption.toml"),
        ] {
            Experiment::from_toml(text).unwrap();
        }
        let e = Experiment::from_toml(include_str!("../../../configs/width_sweep.toml")).unwrap();
        assert!(!e.train.variational_momentum);
        assert_eq!(e.sweep.bnn_init_std, 0.1);
    }

    #[test]
    fn flat_file_defaults_to_cubic_task() {
        let e = Experiment::from_toml("lambda0 = 0.01\nK = 2\nbatch_size = 30\nepochs = 3\nbeta_anneal_epochs = 2\n").unwrap();
        assert_eq!(e.train.lambda0, 0.01);
        assert!(matches!(e.data, DataSpec::Cubic { n_points: 30, .. }));
        assert!(matches!(e.likelihood(), Likelihood::Regression { .. }));
    }

    #[test]
    fn tables_parse() {
        let text = r#"
K = 2
batch_size = 8
epochs = 2
beta_anneal_epochs = 1

[model]
method = "bnn-vi"
layers = [{ kind = "flatten" }, { kind = "dense", out = 4 }, { kind = "dense", out = 3, activation = "identity" }]

[data]
kind = "synthetic"
n_train = 16
n_test = 8
classes = 3
side = 4

[eval]
samples = 3
"#;
        let e = Experiment::from_toml(text).unwrap();
        assert_eq!(e.model.method, Method::BnnVi);
        assert_eq!(e.eval.samples, 3);
        assert!(Experiment::from_toml("K = 3\nbatch_size = 8").is_err());
        assert!(Experiment::from_toml("[data]\nkind = \"csv\"").is_err());
    }
}
