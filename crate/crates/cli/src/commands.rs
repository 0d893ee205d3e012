use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use learned_ilu::dataset::{make_dataset, Dataset, Split, SplitCounts};
use learned_ilu::neural::Aggregation;
use learned_ilu::spectral::{
    evaluate, sigma_max_power, sigma_min_inverse_power, EvalConfig, EvalReport, PrecondSpec,
};
use learned_ilu::training::{train as run_training, EpochRecord, LossKind, TrainConfig, TrainSample};
use learned_ilu::{Architecture, Error, ModelParams, Result};

use crate::resolve::Resolver;
use crate::{EvalArgs, GenerateArgs, SpectrumArgs, TrainArgs};

pub const MODEL_FILE: &str = "model.json";
pub const LAST_MODEL_FILE: &str = "last_model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CELLS_FILE: &str = "cells.csv";
pub const EDGES_FILE: &str = "edges.csv";

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref(), &["out", "grid", "train", "val", "test", "seed"])?;
    let out = r.required("out", args.out)?;
    let grid: usize = r.value("grid", args.grid, "20")?;
    let counts = SplitCounts {
        train: r.value("train", args.train, "50")?,
        val: r.value("val", args.val, "5")?,
        test: r.value("test", args.test, "5")?,
    };
    let seed: u64 = r.value("seed", args.seed, "0")?;
    let data = make_dataset(grid, counts, seed)?;
    data.save(&out)?;
    r.write_manifest(&out, "generate")?;
    println!(
        "wrote {} problems (n = {}) to {}",
        counts.train + counts.val + counts.test,
        grid * grid,
        out.display()
    );
    Ok(())
}

fn not_found(msg: String) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(not_found(format!("{} is not a dataset directory", dir.display())));
    }
    Dataset::load(dir)
}

fn load_model(path: &Path) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(not_found(format!("model file {} does not exist", path.display())));
    }
    ModelParams::load(path)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut r = Resolver::new(
        args.config.as_deref(),
        &[
            "data",
            "out",
            "loss",
            "alpha",
            "epochs",
            "lr",
            "clip",
            "eps",
            "seed",
            "hutchinson_samples",
            "val_tol",
            "aggregation",
        ],
    )?;
    let data_dir = r.required("data", args.data)?;
    let out = r.required("out", args.out)?;
    let cfg = TrainConfig {
        loss: r.value::<LossKind>("loss", args.loss, "max")?,
        alpha: r.value("alpha", args.alpha, "0.2")?,
        epochs: r.value("epochs", args.epochs, "100")?,
        lr: r.value("lr", args.lr, "0.001")?,
        clip: r.value("clip", args.clip, "1.0")?,
        eps: r.value("eps", args.eps, "0.0001")?,
        seed: r.value("seed", args.seed, "0")?,
        hutchinson_samples: r.value("hutchinson_samples", args.hutchinson_samples, "1")?,
        val_tol: r.value("val_tol", args.val_tol, "1e-8")?,
        batch: 1,
    };
    let aggregation: Aggregation = r.value("aggregation", args.aggregation, "mean")?;
    cfg.validate()?;
    let data = load_data(&data_dir)?;
    let arch = Architecture {
        aggregation,
        ..Architecture::default()
    };
    let init = ModelParams::init(arch, cfg.eps, cfg.seed);
    r.record("param_count", init.param_count());
    r.write_manifest(&out, "train")?;

    let mut history = BufWriter::new(File::create(out.join(HISTORY_FILE))?);
    writeln!(history, "{}", EpochRecord::CSV_HEADER)?;
    history.flush()?;
    let mut write_err: Option<std::io::Error> = None;
    let outcome = run_training(init, &data.train.samples, &data.val.samples, &cfg, |rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(history, "{}", rec.csv_row()).and_then(|_| history.flush()) {
                write_err = Some(e);
            }
        }
        eprintln!(
            "epoch {:>4}  loss {:.6e}  val iterations {}",
            rec.epoch, rec.mean_train_loss, rec.val_iterations
        );
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    outcome.best.save(out.join(MODEL_FILE))?;
    outcome.last.save(out.join(LAST_MODEL_FILE))?;
    r.record("best_epoch", outcome.best_epoch);
    r.write_manifest(&out, "train")?;
    println!(
        "best epoch {} saved to {}",
        outcome.best_epoch,
        out.join(MODEL_FILE).display()
    );
    Ok(())
}

fn precond_specs(r: &mut Resolver, list: Option<String>, model: Option<PathBuf>) -> Result<Vec<PrecondSpec>> {
    let default = if model.is_some() {
        "none,jacobi,ilu0,learned"
    } else {
        "none,jacobi,ilu0"
    };
    let list: String = r.value("precond", list, default)?;
    let mut specs = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = match name {
            "none" => PrecondSpec::None,
            "jacobi" => PrecondSpec::Jacobi,
            "ilu0" => PrecondSpec::Ilu0,
            "learned" => match &model {
                Some(p) => PrecondSpec::Learned(Box::new(load_model(p)?)),
                None => {
                    return Err(Error::Config(
                        "the learned preconditioner needs --model".into(),
                    ))
                }
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preconditioner `{other}` (none|jacobi|ilu0|learned)"
                )))
            }
        };
        if specs.iter().any(|s: &PrecondSpec| s.name() == spec.name()) {
            return Err(Error::Config(format!("preconditioner `{name}` listed twice")));
        }
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(Error::Config("no preconditioners requested".into()));
    }
    Ok(specs)
}

fn write_histograms(report: &EvalReport, out: &Path, svg: bool) -> Result<()> {
    for (method, h) in report.histograms() {
        fs::write(out.join(format!("hist_{method}.csv")), h.to_csv())?;
        if svg {
            fs::write(
                out.join(format!("hist_{method}.svg")),
                h.to_svg(&format!("singular values of A P^-1, {method}")),
            )?;
        }
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut r = Resolver::new(
        args.config.as_deref(),
        &[
            "data",
            "out",
            "model",
            "precond",
            "split",
            "tol",
            "dense_cap",
            "no_timing",
            "no_spectral",
            "svg",
        ],
    )?;
    let data_dir = r.required("data", args.data)?;
    let out = r.required("out", args.out)?;
    let model: Option<PathBuf> = r.optional("model", args.model)?;
    let specs = precond_specs(&mut r, args.precond, model)?;
    let split: Split = r.value("split", args.split, "test")?;
    let cfg = EvalConfig {
        tol: r.value("tol", args.tol, "1e-8")?,
        dense_cap: r.value("dense_cap", args.dense_cap, "2000")?,
        spectral: !r.switch("no_spectral", args.no_spectral)?,
        timing: !r.switch("no_timing", args.no_timing)?,
    };
    let svg = r.switch("svg", args.svg)?;
    if !(cfg.tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    let data = load_data(&data_dir)?;
    let problems = &data.split(split).samples;
    if problems.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.as_str())));
    }
    r.write_manifest(&out, "eval")?;
    let report = evaluate(problems, &specs, &cfg);
    let summary = report.summary_csv();
    fs::write(out.join(REPORT_FILE), &summary)?;
    fs::write(out.join(CELLS_FILE), report.cells_csv())?;
    if cfg.spectral {
        write_histograms(&report, &out, svg)?;
    }
    for c in report.cells.iter().filter(|c| c.failure.is_some()) {
        eprintln!(
            "problem {} / {}: {}",
            c.problem,
            c.method,
            c.failure.as_deref().unwrap_or_default()
        );
    }
    print!("{summary}");
    Ok(())
}

pub fn spectrum(args: SpectrumArgs) -> Result<()> {
    let mut r = Resolver::new(
        args.config.as_deref(),
        &[
            "data",
            "out",
            "model",
            "precond",
            "split",
            "problem",
            "dense_cap",
            "edges_only",
            "power_iters",
            "power_tol",
        ],
    )?;
    let data_dir = r.required("data", args.data)?;
    let out = r.required("out", args.out)?;
    let model: Option<PathBuf> = r.optional("model", args.model)?;
    let specs = precond_specs(&mut r, args.precond, model)?;
    let split: Split = r.value("split", args.split, "test")?;
    let index: usize = r.value("problem", args.problem, "0")?;
    let dense_cap: usize = r.value("dense_cap", args.dense_cap, "2000")?;
    let edges_only = r.switch("edges_only", args.edges_only)?;
    let power_iters: usize = r.value("power_iters", args.power_iters, "2000")?;
    let power_tol: f64 = r.value("power_tol", args.power_tol, "1e-10")?;
    if power_iters == 0 {
        return Err(Error::Config("power_iters must be at least 1".into()));
    }
    let data = load_data(&data_dir)?;
    let set = &data.split(split).samples;
    let sample: &TrainSample = set.get(index).ok_or_else(|| {
        Error::Config(format!(
            "problem {index} out of range for the {} split of {} problems",
            split.as_str(),
            set.len()
        ))
    })?;
    let n = sample.a.n();
    if !edges_only && n > dense_cap {
        return Err(Error::Config(format!(
            "n = {n} exceeds the dense cap {dense_cap}; rerun with --edges-only for power-iteration estimates of the extreme singular values"
        )));
    }
    r.write_manifest(&out, "spectrum")?;

    let mut edges = String::new();
    if edges_only {
        edges.push_str("method,sigma_min,sigma_max,sigma_min_converged,sigma_max_converged\n");
        for spec in &specs {
            let p = spec.build(&sample.a)?;
            let hi = sigma_max_power(&sample.a, p.as_ref(), power_iters, power_tol)?;
            let lo = sigma_min_inverse_power(&sample.a, p.as_ref(), power_iters, power_tol)?;
            edges.push_str(&format!(
                "{},{:e},{:e},{},{}\n",
                spec.name(),
                lo.value,
                hi.value,
                lo.converged,
                hi.converged
            ));
        }
    } else {
        let cfg = EvalConfig {
            dense_cap,
            timing: false,
            ..EvalConfig::default()
        };
        let report = evaluate(std::slice::from_ref(sample), &specs, &cfg);
        edges.push_str("method,sigma_min,sigma_max\n");
        for cell in &report.cells {
            if let Some(f) = &cell.failure {
                eprintln!("{}: {f}", cell.method);
            }
            let mut dump = String::from("index,sigma\n");
            for (k, s) in cell.singular_values.iter().enumerate() {
                dump.push_str(&format!("{k},{s:e}\n"));
            }
            fs::write(out.join(format!("sv_{}.csv", cell.method)), dump)?;
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
            edges.push_str(&format!("{},{},{}\n", cell.method, fmt(cell.sigma_min), fmt(cell.sigma_max)));
        }
        write_histograms(&report, &out, false)?;
    }
    fs::write(out.join(EDGES_FILE), &edges)?;
    print!("{edges}");
    Ok(())
}
