use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use spreadflow::analysis::{
    manifold_density, nonlinear_pca_project, pairwise_distances, pearson, sample_baseline,
    sample_model, spearman, write_density_csv,
};
use spreadflow::data::{gen_scurve3d_with_params, write_csv, write_pgm, DatasetKind};
use spreadflow::train;
use spreadflow::{Array, Checkpoint, ExperimentConfig, ModelKind};

use crate::config::resolve;
use crate::manifest::{Timer, CONFIG_FILE};
use crate::RunArgs;

const PROJECTION_ROWS: usize = 1000;
const DENSITY_POINTS: usize = 201;
const IMAGES_WRITTEN: usize = 8;

fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().expect("resolved configs carry a run directory");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// The config as echoed into a run: without the run directory, so that
/// `--config run/config.json --out elsewhere` reproduces the run.
fn echo(cfg: &ExperimentConfig) -> Result<Value> {
    let mut c = cfg.clone();
    c.out_dir = None;
    Ok(serde_json::to_value(c)?)
}

fn write_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<Value> {
    let v = echo(cfg)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(v)
}

pub fn gen(args: &RunArgs, n: Option<usize>) -> Result<()> {
    let timer = Timer::start();
    let mut cfg = resolve(args)?;
    if let Some(n) = n {
        cfg.dataset.n = n;
    }
    cfg.dataset.validate()?;
    let dir = run_dir(&cfg)?;
    let data = cfg.dataset.generate()?;
    write_csv(&dir.join("data.csv"), &data, Some(&cfg.dataset))?;
    log::info!("wrote {} samples of dimension {} to {}", data.rows(), data.cols(), dir.display());
    let v = write_echo(&dir, &cfg)?;
    timer.finish(&dir, "gen", Some(cfg.seed), &v)
}

pub fn train(args: &RunArgs) -> Result<()> {
    let timer = Timer::start();
    let cfg = resolve(args)?;
    let dir = run_dir(&cfg)?;
    let v = write_echo(&dir, &cfg)?;
    let out = train::train(&cfg)?;
    println!("{}", out.report.summary());
    timer.finish(&dir, "train", Some(cfg.seed), &v)
}

pub fn baseline(args: &RunArgs) -> Result<()> {
    let timer = Timer::start();
    let cfg = resolve(args)?;
    let dir = run_dir(&cfg)?;
    let v = write_echo(&dir, &cfg)?;
    let out = train::train_baseline(&cfg)?;
    if let Some(last) = out.metrics.last() {
        println!("final negative log-likelihood {:.6}", last.total);
    }
    timer.finish(&dir, "baseline", Some(cfg.seed), &v)
}

fn default_out(checkpoint: &Path, sub: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(sub)
}

pub fn analyze(checkpoint: &Path, threshold: f64, out: Option<&Path>) -> Result<()> {
    let timer = Timer::start();
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let prior = ck.prior()?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(checkpoint, "analysis"));
    fs::create_dir_all(&dir)?;

    let report = spreadflow::analysis::intrinsic_dim_report(prior, threshold)?;
    report.write_csv(&dir.join("eigenvalues.csv"))?;
    report.write_sidecar(&dir.join("eigenvalues.json"))?;
    println!("{}", report.summary());

    let mut summary = json!({
        "step": ck.step,
        "rank": report.rank,
        "threshold": threshold,
        "gap_ratio": report.gap_ratio(),
    });
    if report.rank > 0 {
        let mut data_cfg = ck.config.dataset.clone();
        data_cfg.n = data_cfg.n.min(PROJECTION_ROWS);
        let xs = data_cfg.generate()?;
        let proj = nonlinear_pca_project(&ck.flow, &report, &xs, report.rank)?;
        write_projection(&dir.join("projections.csv"), &proj.coords, &proj.ids)?;

        match ck.config.dataset.kind {
            DatasetKind::Sin2d | DatasetKind::Line2d if report.rank == 1 => {
                let sin = matches!(ck.config.dataset.kind, DatasetKind::Sin2d);
                let ts: Vec<f64> = (0..DENSITY_POINTS)
                    .map(|i| -3.0 + 6.0 * i as f64 / (DENSITY_POINTS - 1) as f64)
                    .collect();
                let mut support = Array::zeros(&[ts.len(), 2]);
                for (i, &t) in ts.iter().enumerate() {
                    support.set(i, 0, t);
                    support.set(i, 1, if sin { (2.0 * t).sin() } else { t });
                }
                let est = manifold_density(&ck.flow, &report, &support)?;
                let truth: Vec<f64> = ts.iter().map(|t| (-0.5 * t * t).exp() / (2.0 * PI).sqrt()).collect();
                write_density_csv(&dir.join("density.csv"), &ts, &est, &truth)?;
                let r = pearson(&est, &truth)?;
                println!("density correlation with the generator: {r:.4}");
                summary["density_correlation"] = json!(r);
            }
            DatasetKind::Scurve3d if report.rank == 2 => {
                let (x, _) = gen_scurve3d_with_params(500, data_cfg.seed);
                let p = nonlinear_pca_project(&ck.flow, &report, &x, 2)?;
                let rho = spearman(&pairwise_distances(&x), &pairwise_distances(&p.coords))?;
                println!("pairwise distance rank correlation: {rho:.4}");
                summary["distance_spearman"] = json!(rho);
            }
            _ => {}
        }
    }
    fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    timer.finish(&dir, "analyze", Some(ck.config.seed), &echo(&ck.config)?)
}

fn write_projection(path: &Path, coords: &Array, ids: &[usize]) -> Result<()> {
    let mut text = String::from("id");
    for j in 0..coords.cols() {
        text.push_str(&format!(",p{j}"));
    }
    text.push('\n');
    for (row, id) in coords.iter_rows().zip(ids) {
        text.push_str(&id.to_string());
        for v in row {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn sample(checkpoint: &Path, n: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let timer = Timer::start();
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(checkpoint, "samples"));
    fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match ck.kind {
        ModelKind::Manifold => sample_model(&ck.flow, ck.prior()?, n, &mut rng)?,
        ModelKind::Baseline => sample_baseline(&ck.flow, n, &mut rng)?,
    };
    write_csv(&dir.join("samples.csv"), &x, None::<&()>)?;
    if let DatasetKind::FadingSquares { image_size, .. } = ck.config.dataset.kind {
        for i in 0..n.min(IMAGES_WRITTEN) {
            write_pgm(&dir.join(format!("sample-{i}.pgm")), x.row_slice(i), image_size, image_size)?;
        }
    }
    log::info!("wrote {n} samples to {}", dir.display());
    timer.finish(&dir, "sample", Some(seed), &echo(&ck.config)?)
}
