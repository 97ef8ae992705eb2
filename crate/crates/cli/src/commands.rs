use std::path::Path;

use serde_json::json;
use tgpst::io::{
    encode_labels, encode_tensors, read_labels, read_model_file, read_tensors, ModelFile,
};
use tgpst::metrics::{msll, r_squared, rmse, tss};
use tgpst::optim::{fit, fit_cv, FitConfig};
use tgpst::predict::{explained_variation, predict};
use tgpst::sim::{generate, SimConfig};
use tgpst::{Dataset, Error as CoreError, ModelParams, Tensor3};

use crate::args::{EvaluateArgs, ExplainArgs, PredictArgs, SimulateArgs, TrainArgs};
use crate::error::CliError;
use crate::output::{num, read_file, read_split, split_indices, split_rows, OutDir};

fn load_dataset(tensors: &Path, labels: &Path) -> Result<Dataset, CliError> {
    let x = read_tensors(tensors)?;
    let y = read_labels(labels)?;
    if x.len() != y.len() {
        return Err(CliError::invalid(format!(
            "{} holds {} tensors but {} holds {} labels",
            tensors.display(),
            x.len(),
            labels.display(),
            y.len()
        )));
    }
    Ok(Dataset::new(x, y)?)
}

fn load_model(path: &Path) -> Result<(ModelFile, ModelParams), CliError> {
    let file = read_model_file(path)?;
    let params = file.params()?;
    Ok((file, params))
}

fn check_dims(p: &ModelParams, d: &Dataset, path: &Path) -> Result<(), CliError> {
    if p.input_dims() != d.dims() {
        return Err(CliError::invalid(format!(
            "model expects tensors of dims {:?}, {} holds {:?}",
            p.input_dims(),
            path.display(),
            d.dims()
        )));
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = SimConfig::new(args.n, args.seed);
    if let Some(sd) = args.noise_sd {
        cfg.noise_sd = sd;
    }
    cfg.signal_mean = args.signal_mean;
    cfg.validate()?;

    let (data, truth) = generate(&cfg)?;
    let mut out = OutDir::create(&args.out_dir)?;
    out.write("tensors.bin", &encode_tensors(data.tensors())?)?;
    out.write("labels.txt", encode_labels(data.labels()).as_bytes())?;
    out.write(
        "truth.json",
        ModelFile::new(&truth.params()?, None)?.to_json().as_bytes(),
    )?;
    let types: Vec<Vec<String>> = truth
        .type_labels
        .iter()
        .enumerate()
        .map(|(i, t)| vec![i.to_string(), t.to_string()])
        .collect();
    out.csv("types.csv", &["index", "type"], &types)?;
    out.finish("simulate", &cfg, &[], json!({ "dims": data.dims() }))?;
    println!(
        "simulated {} tensors of dims {:?} into {}",
        data.len(),
        data.dims(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    args.check()?;
    let data = load_dataset(&args.tensors, &args.labels)?;
    let (big_h, big_w, c) = data.dims();
    let mut cfg = if args.baseline_gp {
        let ranks = args.ranks.unwrap_or((big_h.min(3), big_w.min(3), c));
        FitConfig::baseline(data.dims(), ranks)
    } else {
        let mut cfg = FitConfig::new(args.latent, c);
        if let Some(r) = args.ranks {
            cfg.ranks = r;
        }
        cfg.lambda = args.lambda;
        cfg
    };
    cfg.max_iter = args.max_iter;
    cfg.step_init = args.step_init;
    cfg.tol_param = args.tol_param;
    cfg.tol_loss = args.tol_loss;
    cfg.seed = args.seed;
    cfg.backtrack = !args.no_backtrack;
    cfg.warm_start = !args.no_warm_start;
    cfg.als_sweeps = args.als_sweeps;
    cfg.validate(data.dims())?;

    let (train_idx, test_idx) =
        split_indices(data.len(), args.split.train_fraction, args.split.split_seed);
    if train_idx.len() < 2 {
        return Err(CliError::invalid(format!(
            "the split leaves {} training samples; at least 2 are needed",
            train_idx.len()
        )));
    }
    let train = data.subset(&train_idx)?;

    let (params, report, cv) = match &args.lambda_grid {
        Some(grid) => {
            if args.folds > train.len() {
                return Err(CliError::invalid(format!(
                    "--folds {} exceeds the {} training samples",
                    args.folds,
                    train.len()
                )));
            }
            let (p, r, cv) = fit_cv(&train, &cfg, grid, args.folds, args.seed)?;
            cfg.lambda = cv.best_lambda;
            (p, r, Some(cv))
        }
        None => {
            let (p, r) = fit(&train, &cfg)?;
            (p, r, None)
        }
    };

    let mut out = OutDir::create(&args.out_dir)?;
    out.write(
        "model.json",
        ModelFile::new(&params, Some(&cfg))?.to_json().as_bytes(),
    )?;
    let history: Vec<Vec<String>> = report
        .loss_history
        .iter()
        .enumerate()
        .map(|(k, loss)| {
            let mut row = vec![k.to_string(), num(*loss)];
            match k
                .checked_sub(1)
                .map(|j| (report.param_delta_history[j], report.step_sizes[j]))
            {
                Some((delta, s)) => row.extend([delta, s.a, s.b, s.u, s.log_sigma].map(num)),
                None => row.extend(std::iter::repeat_n(String::new(), 5)),
            }
            row
        })
        .collect();
    out.csv(
        "loss_history.csv",
        &[
            "iteration",
            "loss",
            "param_delta",
            "step_a",
            "step_b",
            "step_u",
            "step_log_sigma",
        ],
        &history,
    )?;
    let mut report_json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))?;
    report_json.push('\n');
    out.write("fit_report.json", report_json.as_bytes())?;
    out.csv(
        "split.csv",
        &["index", "set"],
        &split_rows(data.len(), &train_idx),
    )?;
    if let Some(cv) = &cv {
        let rows: Vec<Vec<String>> = cv
            .lambdas
            .iter()
            .zip(&cv.fold_rmse)
            .flat_map(|(l, folds)| {
                folds
                    .iter()
                    .enumerate()
                    .map(move |(f, r)| vec![num(*l), f.to_string(), num(*r)])
            })
            .collect();
        out.csv("cv.csv", &["lambda", "fold", "rmse"], &rows)?;
    }

    let a = &params.contraction.a;
    let zeros = a.iter().filter(|v| **v == 0.0).count();
    out.finish(
        "train",
        args,
        &[("tensors", &args.tensors), ("labels", &args.labels)],
        json!({
            "train_samples": train_idx.len(),
            "test_samples": test_idx.len(),
            "lambda": cfg.effective_lambda(),
            "final_loss": report.final_loss(),
            "iterations": report.iterations_run,
            "converged": report.converged,
            "zeros_in_a": zeros,
        }),
    )?;

    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("final loss: {}", report.final_loss());
    println!(
        "iterations: {} ({})",
        report.iterations_run,
        if report.converged {
            "converged"
        } else {
            "iteration cap reached"
        }
    );
    if report.frozen_contraction {
        println!("contraction: frozen at A = I, B = I (tensor GP baseline)");
    } else {
        println!("lambda: {}", cfg.lambda);
        println!("zeros in A: {zeros} of {}", a.len());
    }
    println!("sigma: {}", params.sigma());
    Ok(())
}

pub fn predict_cmd(args: &PredictArgs) -> Result<(), CliError> {
    args.check()?;
    let (_, params) = load_model(&args.model)?;
    let data = load_dataset(&args.tensors, &args.labels)?;
    check_dims(&params, &data, &args.tensors)?;

    let (train_idx, test_idx) = match &args.split {
        Some(path) => read_split(path, data.len())?,
        None => ((0..data.len()).collect(), Vec::new()),
    };
    let train = data.subset(&train_idx)?;
    let (indices, targets): (Vec<usize>, Vec<Tensor3>) = match &args.test_tensors {
        Some(path) => {
            let t = read_tensors(path)?;
            ((0..t.len()).collect(), t)
        }
        None => (
            test_idx.clone(),
            test_idx
                .iter()
                .map(|&i| data.tensors()[i].clone())
                .collect(),
        ),
    };
    let pred = predict(&train, &targets, &params)?;
    let var = pred.variances();
    let rows: Vec<Vec<String>> = indices
        .iter()
        .enumerate()
        .map(|(k, i)| vec![i.to_string(), num(pred.mean[k]), num(var[k])])
        .collect();

    let mut out = OutDir::create(&args.out_dir)?;
    out.csv("predictions.csv", &["index", "mean", "variance"], &rows)?;
    let mut inputs = vec![
        ("model", args.model.as_path()),
        ("tensors", &args.tensors),
        ("labels", &args.labels),
    ];
    if let Some(p) = &args.split {
        inputs.push(("split", p));
    }
    if let Some(p) = &args.test_tensors {
        inputs.push(("test_tensors", p));
    }
    out.finish(
        "predict",
        args,
        &inputs,
        json!({ "conditioning_samples": train.len(), "predictions": rows.len() }),
    )?;
    println!(
        "wrote {} predictions to {}",
        rows.len(),
        out_path(&args.out_dir, "predictions.csv")
    );
    Ok(())
}

fn out_path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Reads `index,mean[,variance]` rows.
fn read_predictions(path: &Path) -> Result<Vec<(usize, f64)>, CliError> {
    let bytes = read_file(path)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| CliError::runtime(format!("{}: line {line}: {m}", path.display()));
        if rec.len() < 2 {
            return Err(bad("expected index and mean columns".into()));
        }
        let i = rec[0]
            .trim()
            .parse()
            .map_err(|e| bad(format!("index {:?}: {e}", &rec[0])))?;
        let m: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|e| bad(format!("mean {:?}: {e}", &rec[1])))?;
        rows.push((i, m));
    }
    Ok(rows)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    args.check()?;
    let (_, params) = load_model(&args.model)?;
    let labels = read_labels(&args.labels)?;
    let preds = read_predictions(&args.predictions)?;
    if preds.is_empty() {
        return Err(CliError::invalid(format!(
            "{} holds no predictions",
            args.predictions.display()
        )));
    }
    let mut y_true = Vec::with_capacity(preds.len());
    let mut y_pred = Vec::with_capacity(preds.len());
    for &(i, m) in &preds {
        let y = labels.get(i).ok_or_else(|| {
            CliError::invalid(format!(
                "prediction index {i} has no label in {} ({} labels)",
                args.labels.display(),
                labels.len()
            ))
        })?;
        y_true.push(*y);
        y_pred.push(m);
    }

    let metrics: [(&str, Result<f64, CoreError>); 4] = [
        ("RMSE", rmse(&y_true, &y_pred)),
        ("R2", r_squared(&y_true, &y_pred)),
        ("MSLL", msll(&y_true, &y_pred, params.sigma())),
        ("TSS", tss(&y_true, &y_pred, args.threshold)),
    ];
    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();
    for (name, value) in metrics {
        match value {
            Ok(v) => {
                println!("{name}: {v:.6}");
                rows.push(vec![name.to_string(), num(v)]);
                summary.insert(name.into(), json!(v));
            }
            Err(CoreError::UndefinedMetric(why)) => {
                println!("{name}: undefined ({why})");
                rows.push(vec![name.to_string(), String::new()]);
                summary.insert(name.into(), serde_json::Value::Null);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(dir) = &args.out_dir {
        let mut out = OutDir::create(dir)?;
        out.csv("metrics.csv", &["metric", "value"], &rows)?;
        out.finish(
            "evaluate",
            args,
            &[
                ("predictions", &args.predictions),
                ("labels", &args.labels),
                ("model", &args.model),
            ],
            serde_json::Value::Object(summary),
        )?;
    }
    Ok(())
}

pub fn explain(args: &ExplainArgs) -> Result<(), CliError> {
    args.check()?;
    let (_, params) = load_model(&args.model)?;
    let data = load_dataset(&args.tensors, &args.labels)?;
    check_dims(&params, &data, &args.tensors)?;
    let data = match &args.split {
        Some(path) => data.subset(&read_split(path, data.len())?.0)?,
        None => data,
    };
    let ev = explained_variation(&data, &params)?;

    let upper = |m: &tgpst::Matrix, label: &dyn Fn(usize) -> Vec<String>| -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                let mut row = label(i);
                row.extend(label(j));
                row.push(num(m[(i, j)]));
                rows.push(row);
            }
        }
        rows
    };
    let (h, _) = params.latent_dims();
    let channel_rows = upper(&ev.per_channel_pair, &|k| vec![k.to_string()]);
    let map_rows = upper(&ev.per_feature_map_pair, &|f| {
        vec![(f % h).to_string(), (f / h).to_string()]
    });

    // Feature map (s, t) has pixel weights a[s, i] · b[t, j].
    let (a, b) = (&params.contraction.a, &params.contraction.b);
    let mut pixel_rows = Vec::new();
    let mut active = Vec::new();
    for t in 0..b.nrows() {
        for s in 0..a.nrows() {
            let before = pixel_rows.len();
            for j in 0..b.ncols() {
                for i in 0..a.ncols() {
                    let w = a[(s, i)] * b[(t, j)];
                    if w != 0.0 && w.abs() >= args.threshold {
                        pixel_rows.push(vec![
                            s.to_string(),
                            t.to_string(),
                            i.to_string(),
                            j.to_string(),
                            num(w),
                        ]);
                    }
                }
            }
            if pixel_rows.len() > before {
                active.push((s, t));
            }
        }
    }

    let summary_rows = vec![
        vec!["total_variance".to_string(), num(ev.total_variance)],
        vec!["model_variance".to_string(), num(ev.model_variance)],
        vec!["noise_share".to_string(), num(ev.noise_share)],
    ];
    let mut out = OutDir::create(&args.out_dir)?;
    out.csv(
        "channel_variation.csv",
        &["channel_i", "channel_j", "percent"],
        &channel_rows,
    )?;
    out.csv(
        "feature_map_variation.csv",
        &["s_i", "t_i", "s_j", "t_j", "percent"],
        &map_rows,
    )?;
    out.csv(
        "feature_maps.csv",
        &["s", "t", "row", "col", "weight"],
        &pixel_rows,
    )?;
    out.csv(
        "variance_summary.csv",
        &["quantity", "value"],
        &summary_rows,
    )?;
    let mut inputs = vec![
        ("model", args.model.as_path()),
        ("tensors", &args.tensors),
        ("labels", &args.labels),
    ];
    if let Some(p) = &args.split {
        inputs.push(("split", p));
    }
    out.finish(
        "explain",
        args,
        &inputs,
        json!({ "samples": data.len(), "active_feature_maps": active }),
    )?;

    println!("samples: {}", data.len());
    println!("noise share: {:.4}", ev.noise_share);
    println!(
        "feature maps with a weight >= {}: {}",
        args.threshold,
        active.len()
    );
    for (s, t) in active {
        println!("  ({s}, {t})");
    }
    Ok(())
}
