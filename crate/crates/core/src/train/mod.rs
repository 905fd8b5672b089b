//! Adam training of the flow and the prior factor, plus the fixed-prior
//! baseline.
//!
//! Randomness is split into two ChaCha8 streams derived from the run seed:
//! stream 0 initialises the flow, stream 1 drives training. Each step draws,
//! in order, the batch indices (with replacement), the smoothing noise and
//! the prior noise, so a run is a pure function of its configuration.

mod adam;
mod config;
mod metrics;
mod schedule;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use config::{ExperimentConfig, PRESETS};
pub use metrics::{read_metrics, MetricsLog, MetricsRow, METRICS_HEADER};
pub use schedule::Schedule;

use crate::checkpoint::Checkpoint;
use crate::data::{randn, smooth};
use crate::diffcore::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, FlowSpec};
use crate::objective::{fixed_prior_nll_graph, spread_kl_graph};
use crate::prior::{mask_upper, EigenReport, ManifoldPrior, DEFAULT_RANK_THRESHOLD};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EIGENVALUES_FILE: &str = "eigenvalues.csv";

pub struct TrainOutcome {
    pub model: FlowModel,
    pub prior: ManifoldPrior,
    pub metrics: Vec<MetricsRow>,
    pub report: EigenReport,
    pub checkpoint: Option<PathBuf>,
}

pub struct BaselineOutcome {
    pub model: FlowModel,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Option<PathBuf>,
}

/// Flow initialised from stream 0 of the run seed.
pub fn init_flow(spec: &FlowSpec, seed: u64) -> Result<FlowModel> {
    spec.build(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Errors that mean the numbers blew up rather than the setup being wrong.
fn is_numeric_failure(e: &Error) -> bool {
    match e {
        Error::NonFinite(_) | Error::Cholesky { .. } | Error::Domain { .. } => true,
        Error::Layer { source, .. } => is_numeric_failure(source),
        _ => false,
    }
}

fn collect_grads(g: &Gradients, vars: &[Var], values: &[&Array]) -> Vec<Array> {
    vars.iter()
        .zip(values)
        .map(|(&v, like)| g.get_or_zeros(v, like))
        .collect()
}

fn clip(grads: &mut [Array], max_norm: Option<f64>) {
    let Some(c) = max_norm else { return };
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > c {
        let s = c / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Array,
    rng: ChaCha8Rng,
    log: MetricsLog,
    out: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a ExperimentConfig, data: &'a Array) -> Result<Self> {
        cfg.validate()?;
        if !data.is_matrix() || data.cols() != cfg.dataset.dim() || data.rows() == 0 {
            return Err(Error::config(
                "dataset",
                format!(
                    "training data of shape {:?} does not match dimension {}",
                    data.shape(),
                    cfg.dataset.dim()
                ),
            ));
        }
        let out = cfg.out_dir.clone();
        let log = match &out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                MetricsLog::to_file(&dir.join(METRICS_FILE))?
            }
            None => MetricsLog::in_memory(),
        };
        Ok(Self {
            cfg,
            data,
            rng: training_rng(cfg.seed),
            log,
            out,
            last_checkpoint: None,
        })
    }

    fn sigma_x(&self, it: usize) -> f64 {
        self.cfg.sigma_x.as_ref().map_or(0.0, |s| s.value(it))
    }

    fn batch(&mut self, sigma_x: f64) -> Result<Array> {
        let n = self.data.rows();
        let d = self.data.cols();
        let b = self.cfg.batch_size;
        let mut x = Array::zeros(&[b, d]);
        for i in 0..b {
            let k = self.rng.gen_range(0..n);
            x.row_slice_mut(i).copy_from_slice(self.data.row_slice(k));
        }
        smooth(&x, sigma_x, &mut self.rng)
    }

    fn due(&self, it: usize) -> bool {
        it % self.cfg.metrics_interval == 0 || it + 1 == self.cfg.iterations
    }

    fn record(&mut self, row: MetricsRow) -> Result<()> {
        log::info!(
            "{} step {:>6}  loss {:.6}  lr {:.3e}",
            self.cfg.name,
            row.step,
            row.total,
            row.lr
        );
        self.log.push(row)
    }

    fn save(&mut self, ck: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(CHECKPOINT_FILE);
            ck.save(&path)?;
            self.last_checkpoint = Some(path);
        }
        Ok(())
    }

    fn checkpoint_due(&self, it: usize) -> bool {
        let ci = self.cfg.checkpoint_interval;
        ci > 0 && (it + 1) % ci == 0 && it + 1 < self.cfg.iterations
    }

    fn diverged(&self, step: usize, cause: String) -> Error {
        log::error!("{} diverged at step {step}: {cause}", self.cfg.name);
        Error::Diverged {
            step,
            cause,
            checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn guard<T>(&self, step: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| {
            if is_numeric_failure(&e) {
                self.diverged(step, e.to_string())
            } else {
                e
            }
        })
    }
}

/// Trains on freshly generated data from `config.dataset`.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = config.dataset.generate()?;
    train_on(config, &data)
}

/// Trains the volume-preserving flow and the prior factor on `data`.
/// With `out_dir` set, writes the metrics CSV, the checkpoint and the
/// eigen-spectrum there.
pub fn train_on(config: &ExperimentConfig, data: &Array) -> Result<TrainOutcome> {
    let mut run = Run::start(config, data)?;
    if !config.flow.volume_preserving {
        return Err(Error::config(
            "flow.volume_preserving",
            "the learned degenerate prior needs a volume-preserving flow",
        ));
    }
    let mut model = init_flow(&config.flow, config.seed)?;
    let mut prior = ManifoldPrior::init_identity(config.dataset.dim(), config.sigma_z)?;
    let n_flow = model.params().len();
    let mut opt = {
        let mut shapes = model.params();
        shapes.push(prior.factor());
        Adam::new(&shapes)
    };
    let mut decay = vec![config.weight_decay; n_flow];
    decay.push(0.0);
    let d = config.dataset.dim();

    for it in 0..config.iterations {
        let lr = config.lr.value(it);
        let sx = run.sigma_x(it);
        let x = run.batch(sx)?;
        let eps = randn(&mut run.rng, config.batch_size, d);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true)?;
        let a = tape.param(prior.factor().clone())?;
        let xv = tape.constant(x)?;
        let loss = spread_kl_graph(&mut tape, &model, &bound, a, config.sigma_z, xv, &eps, config.mode);
        let loss = run.guard(it, loss)?;
        let b = loss.breakdown(&tape, config.batch_size);
        if !b.total.is_finite() {
            return Err(run.diverged(it, format!("loss is {}", b.total)));
        }
        let g = run.guard(it, tape.backward(loss.total))?;

        let mut vars: Vec<Var> = bound.iter().flatten().copied().collect();
        vars.push(a);
        let mut values = model.params();
        values.push(prior.factor());
        let mut grads = collect_grads(&g, &vars, &values);
        mask_upper(&mut grads[n_flow]);
        clip(&mut grads, config.grad_clip);
        drop(tape);

        let mut params = model.params_mut();
        params.push(prior.factor_mut());
        let stepped = opt.step(&mut params, &grads, lr, &decay).map_err(|e| match e {
            Error::NonFinite(what) if what.ends_with(&format!("parameter {n_flow}")) => {
                Error::NonFinite("gradient of the prior factor A".into())
            }
            e => e,
        });
        run.guard(it, stepped)?;
        prior.mask_upper();

        if run.due(it) {
            run.record(MetricsRow {
                step: it,
                total: b.total,
                term2: Some(b.term2),
                term1: b.term1,
                lr,
                sigma_x: sx,
            })?;
        }
        if run.checkpoint_due(it) {
            run.save(&Checkpoint::manifold(config, it + 1, &model, &prior))?;
        }
    }

    run.save(&Checkpoint::manifold(config, config.iterations, &model, &prior))?;
    let report = prior.covariance_eigen(DEFAULT_RANK_THRESHOLD)?;
    if let Some(dir) = &run.out {
        let path = dir.join(EIGENVALUES_FILE);
        report.write_csv(&path)?;
        report.write_sidecar(&path.with_extension("json"))?;
    }
    log::info!("{}: {}", config.name, report.summary());
    let checkpoint = run.last_checkpoint.clone();
    Ok(TrainOutcome {
        model,
        prior,
        metrics: run.log.into_rows()?,
        report,
        checkpoint,
    })
}

/// Fixed standard normal prior with a non-volume-preserving flow of the
/// configured layout, trained by maximum likelihood.
pub fn train_baseline(config: &ExperimentConfig) -> Result<BaselineOutcome> {
    let data = config.dataset.generate()?;
    train_baseline_on(config, &data)
}

pub fn train_baseline_on(config: &ExperimentConfig, data: &Array) -> Result<BaselineOutcome> {
    let mut config = config.clone();
    config.flow.volume_preserving = false;
    let config = &config;
    let mut run = Run::start(config, data)?;
    let mut model = init_flow(&config.flow, config.seed)?;
    let mut opt = Adam::new(&model.params());
    let decay = vec![config.weight_decay; model.params().len()];

    for it in 0..config.iterations {
        let lr = config.lr.value(it);
        let sx = run.sigma_x(it);
        let x = run.batch(sx)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let nll = run.guard(it, fixed_prior_nll_graph(&mut tape, &model, &bound, xv))?;
        let total = tape.value(nll).item();
        if !total.is_finite() {
            return Err(run.diverged(it, format!("loss is {total}")));
        }
        let g = run.guard(it, tape.backward(nll))?;
        let vars: Vec<Var> = bound.iter().flatten().copied().collect();
        let mut grads = collect_grads(&g, &vars, &model.params());
        clip(&mut grads, config.grad_clip);
        drop(tape);
        let stepped = opt.step(&mut model.params_mut(), &grads, lr, &decay);
        run.guard(it, stepped)?;

        if run.due(it) {
            run.record(MetricsRow {
                step: it,
                total,
                term2: None,
                term1: None,
                lr,
                sigma_x: sx,
            })?;
        }
        if run.checkpoint_due(it) {
            run.save(&Checkpoint::baseline(config, it + 1, &model))?;
        }
    }
    run.save(&Checkpoint::baseline(config, config.iterations, &model))?;
    let checkpoint = run.last_checkpoint.clone();
    Ok(BaselineOutcome {
        model,
        metrics: run.log.into_rows()?,
        checkpoint,
    })
}

/// Reads the run directory's checkpoint, if any.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ObjectiveMode;

    fn tiny(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset("toy-sin", seed).unwrap();
        cfg.dataset.n = 500;
        cfg.flow = FlowSpec::alternating(2, 2, 1, &[8]);
        cfg.iterations = 30;
        cfg.batch_size = 20;
        cfg.metrics_interval = 10;
        cfg
    }

    #[test]
    fn zero_iterations_keep_identity_prior() {
        let mut cfg = tiny(1);
        cfg.iterations = 0;
        let out = train(&cfg).unwrap();
        assert_eq!(out.report.rank, 2);
        assert_eq!(out.prior.factor(), &Array::eye(2));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn same_seed_same_run() {
        let a = train(&tiny(4)).unwrap();
        let b = train(&tiny(4)).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert_eq!(a.prior, b.prior);
        let c = train(&tiny(5)).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn weight_decay_spares_prior() {
        let mut cfg = tiny(6);
        cfg.iterations = 1;
        cfg.weight_decay = 1e6;
        let out = train(&cfg).unwrap();
        // one Adam step moves A by at most lr, whatever the decay
        let a = out.prior.factor();
        assert!((a.get(0, 0) - 1.0).abs() <= 1.01 * cfg.lr.value(0));
    }

    #[test]
    fn metrics_rows_on_schedule() {
        let out = train(&tiny(2)).unwrap();
        let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, [0, 10, 20, 29]);
        assert!(out.metrics.iter().all(|r| r.term1.is_none() && r.term2.is_some()));
    }

    #[test]
    fn prior_stays_lower_triangular() {
        let mut cfg = tiny(3);
        cfg.dataset = crate::data::DatasetSpec::new(crate::data::DatasetKind::Scurve3d, 300, 3);
        cfg.flow = FlowSpec::alternating(3, 2, 1, &[8]);
        let out = train(&cfg).unwrap();
        let a = out.prior.factor();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(a.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn approx_entropy_mode_logs_term1() {
        let mut cfg = tiny(6);
        cfg.mode = ObjectiveMode::ApproxEntropy;
        let out = train(&cfg).unwrap();
        for r in &out.metrics {
            let t1 = r.term1.unwrap();
            assert!((r.total - (t1 - r.term2.unwrap())).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut cfg = tiny(7);
        cfg.lr = Schedule::constant(1e300);
        match train(&cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn baseline_runs_with_logdet() {
        let cfg = tiny(8);
        let out = train_baseline(&cfg).unwrap();
        assert!(!out.model.is_volume_preserving());
        assert!(out.metrics.iter().all(|r| r.term2.is_none() && r.total.is_finite()));
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(9);
        cfg.out_dir = Some(dir.path().to_path_buf());
        cfg.checkpoint_interval = 10;
        let out = train(&cfg).unwrap();
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.metrics);
        let ck = Checkpoint::load(&checkpoint_path(dir.path())).unwrap();
        assert_eq!(ck.step, 30);
        assert_eq!(ck.flow, out.model);
        assert!(dir.path().join(EIGENVALUES_FILE).exists());
    }
}
