use std::path::{Path, PathBuf};

use ibnn::data::{corruption_sweep, write_sweep_csv, Corruption, Dataset};
use ibnn::experiments::{
    depth_result, export_weights_csv, fit, regression_rmse, run_width_sweep, write_depth_csv,
    write_depth_summary_csv, write_width_csv, DepthSweep, WidthSweep,
};
use ibnn::metrics::{
    ece_from_bins, error_and_nll, predict, predict_regression, reliability_diagram, uncertainty_decomposition,
    write_entropy_ranking, write_prediction_dump, write_reliability_csv, PredictConfig,
};
use ibnn::model::{self, Likelihood, Model};
use ibnn::train::write_log_csv;
use ibnn::{Error, Result};
use serde_json::json;

use crate::config::{load_data, DataSpec, Experiment, Loaded, Preset};
use crate::Common;

fn experiment(c: &Common, fallback: Preset) -> Result<Experiment> {
    let mut e = match (&c.config, c.preset) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(Error::Config(format!("config file {} not found", path.display())));
            }
            Experiment::from_file(path)?
        }
        (None, Some(p)) => Experiment::preset(p, 0),
        (None, None) => Experiment::preset(fallback, 0),
    };
    if let Some(seed) = c.seed {
        e.set_seed(seed);
    }
    Ok(e)
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out_dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", c.out_dir.display())))?;
    Ok(&c.out_dir)
}

fn checkpoint_in(c: &Common) -> Result<Model<f64>> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    model::load(path)
}

fn predict_config(e: &Experiment) -> PredictConfig {
    PredictConfig {
        samples_per_component: e.eval.samples,
        batch: e.eval.batch,
        per_datapoint: e.eval.per_datapoint,
        seed: e.train.seed,
    }
}

fn write_json(path: PathBuf, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value).expect("json") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn data(c: &Common, e: &Experiment) -> Result<Loaded> {
    load_data(&e.data, c.data_dir.as_deref(), e.train.seed)
}

pub fn train(c: &Common) -> Result<()> {
    let e = experiment(c, Preset::Regress1d)?;
    let d = data(c, &e)?;
    let out = out_dir(c)?;
    let (model, logs) = fit(&e.model, &d.train, e.likelihood(), &e.train, 0)?;
    let ckpt = c.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.ibnn"));
    model::save(&model, &ckpt)?;
    write_log_csv(&logs, out.join("train_log.csv"))?;
    eprintln!("wrote {} and {}", ckpt.display(), out.join("train_log.csv").display());
    Ok(())
}

pub fn evaluate(c: &Common) -> Result<()> {
    let e = experiment(c, Preset::Regress1d)?;
    let model = checkpoint_in(c)?;
    let d = data(c, &e)?;
    let out = out_dir(c)?;
    let cfg = predict_config(&e);
    check_shapes(&model, &d.test)?;
    match model.likelihood() {
        Likelihood::Classification => {
            let set = predict(&model, &d.test, &cfg)?;
            let scores = error_and_nll(&set)?;
            let bins = reliability_diagram(&set, e.eval.bins)?;
            let ece = ece_from_bins(&bins, set.len());
            let report = uncertainty_decomposition(&set)?;
            write_reliability_csv(&bins, out.join("reliability.csv"))?;
            write_prediction_dump(&set, out.join("predictions.csv"))?;
            write_entropy_ranking(&set, &report, out.join("entropy_ranking.csv"))?;
            write_json(
                out.join("metrics.json"),
                json!({
                    "error": scores.error,
                    "nll": scores.nll,
                    "ece": ece,
                    "points": set.len(),
                    "samples_per_point": model.components() * e.eval.samples,
                }),
            )
        }
        Likelihood::Regression { .. } => {
            let rmse = regression_rmse(&model, &d.test, &cfg)?;
            let pred = predict_regression(&model, d.test.inputs(), &cfg)?;
            let mut csv = String::from("x,mean,std\n");
            for (x, (m, s)) in d.test.inputs().values().iter().zip(pred) {
                csv.push_str(&format!("{x},{m},{s}\n"));
            }
            let path = out.join("predictions.csv");
            std::fs::write(&path, csv).map_err(|err| Error::Data(format!("cannot write {}: {err}", path.display())))?;
            if let Some(cubic) = &d.cubic {
                let r = depth_result(&model, cubic, e.model.method, 0, &cfg)?;
                write_depth_csv(&[r], out.join("grid.csv"))?;
            }
            write_json(out.join("metrics.json"), json!({ "rmse": rmse, "points": d.test.len() }))
        }
    }
}

fn check_shapes(model: &Model<f64>, data: &Dataset<f64>) -> Result<()> {
    if model.input_shape() != data.sample_shape() {
        return Err(Error::Data(format!(
            "checkpoint expects inputs {:?}, data has {:?}",
            model.input_shape(),
            data.sample_shape()
        )));
    }
    Ok(())
}

pub fn depth_sweep(c: &Common) -> Result<()> {
    let e = experiment(c, Preset::Regress1d)?;
    let DataSpec::Cubic {
        n_points,
        x_range,
        noise_std,
    } = e.data
    else {
        return Err(Error::Config("depth-sweep needs a cubic [data] table".into()));
    };
    let mut sweep = DepthSweep::preset(e.train.seed);
    sweep.depths = e.sweep.depths.clone();
    sweep.width = e.sweep.width;
    sweep.n_points = n_points;
    sweep.x_range = x_range;
    sweep.data_noise = noise_std;
    sweep.ibnn = e.train.clone();
    sweep.bnn = ibnn::experiments::baseline_config(&e.train);
    sweep.bnn_prior_std = e.sweep.bnn_prior_std;
    sweep.bnn_init_std = e.sweep.bnn_init_std;
    sweep.eval_samples = e.eval.samples;
    let out = out_dir(c)?;
    let results = ibnn::experiments::run_depth_sweep(&sweep)?;
    write_depth_csv(&results, out.join("depth_sweep.csv"))?;
    write_depth_summary_csv(&results, out.join("depth_summary.csv"))
}

pub fn width_sweep(c: &Common) -> Result<()> {
    let e = experiment(c, Preset::Images)?;
    let d = data(c, &e)?;
    if d.train.num_classes().is_none() {
        return Err(Error::Config("width-sweep needs a classification data set".into()));
    }
    let sweep = WidthSweep {
        factors: e.sweep.factors.clone(),
        base_hidden: e.sweep.base_hidden,
        depth: e.sweep.hidden_layers,
        seeds: match c.seed {
            Some(s) => vec![s],
            None => e.sweep.seeds.clone(),
        },
        ibnn: e.train.clone(),
        bnn: ibnn::experiments::baseline_config(&e.train),
        bnn_prior_std: e.sweep.bnn_prior_std,
        bnn_init_std: e.sweep.bnn_init_std,
        eval_samples: e.eval.samples,
    };
    let out = out_dir(c)?;
    let rows = run_width_sweep(&sweep, &d.train, &d.test)?;
    write_width_csv(&rows, out.join("width_sweep.csv"))
}

pub fn corrupt_eval(c: &Common) -> Result<()> {
    let e = experiment(c, Preset::Images)?;
    let model = checkpoint_in(c)?;
    let d = data(c, &e)?;
    check_shapes(&model, &d.test)?;
    if model.likelihood() != Likelihood::Classification {
        return Err(Error::Config("corrupt-eval needs a classifier checkpoint".into()));
    }
    let out = out_dir(c)?;
    let cfg = predict_config(&e);
    for kind in [Corruption::GaussianMix, Corruption::SaltPepper] {
        let rows = corruption_sweep(&model, &d.test, kind, &e.eval.intensities, &cfg)?;
        write_sweep_csv(&rows, out.join(format!("corrupt_{}.csv", kind.name())))?;
    }
    Ok(())
}

pub fn export_weights(c: &Common) -> Result<()> {
    let model = checkpoint_in(c)?;
    let out = out_dir(c)?;
    export_weights_csv(&model, out.join("weights.csv"))
}
