use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spreadflow::data::randn;
use spreadflow::objective::spread_kl_graph;
use spreadflow::prior::jacobi_eigen;
use spreadflow::{Array, FlowSpec, ManifoldPrior, ObjectiveMode, Tape};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn lower_factor(rng: &mut ChaCha8Rng, d: usize) -> Array {
    let mut a = randn(rng, d, d);
    for i in 0..d {
        for j in i + 1..d {
            a.set(i, j, 0.0);
        }
    }
    a
}

fn flow_passes(c: &mut Criterion) {
    let mut g = c.benchmark_group("flow");
    for d in [2usize, 8, 64] {
        let mut r = rng();
        let model = FlowSpec::alternating(d, 4, d / 2, &[24, 24, 24]).build(&mut r).unwrap();
        let x = randn(&mut r, 100, d);
        g.bench_with_input(BenchmarkId::new("inverse", d), &x, |b, x| {
            b.iter(|| model.inverse(black_box(x)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward", d), &x, |b, x| {
            b.iter(|| model.forward(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_gradient");
    for (d, mode) in [
        (2usize, ObjectiveMode::UpperBound),
        (8, ObjectiveMode::UpperBound),
        (8, ObjectiveMode::ApproxEntropy),
    ] {
        let mut r = rng();
        let model = FlowSpec::alternating(d, 4, d / 2, &[24, 24, 24]).build(&mut r).unwrap();
        let prior = ManifoldPrior::init_identity(d, 1e-4).unwrap();
        let x = randn(&mut r, 100, d);
        let eps = randn(&mut r, 100, d);
        g.bench_function(BenchmarkId::new(format!("{mode:?}"), d), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true).unwrap();
                let a = tape.param(prior.factor().clone()).unwrap();
                let xv = tape.constant(x.clone()).unwrap();
                let loss = spread_kl_graph(&mut tape, &model, &bound, a, 1e-4, xv, &eps, mode).unwrap();
                tape.backward(loss.total).unwrap()
            })
        });
    }
    g.finish();
}

fn prior_density(c: &mut Criterion) {
    let mut g = c.benchmark_group("noisy_logpdf");
    for d in [8usize, 64, 256] {
        let mut r = rng();
        let prior = ManifoldPrior::from_factor(lower_factor(&mut r, d), 1e-4).unwrap();
        let z = randn(&mut r, 100, d);
        g.bench_with_input(BenchmarkId::from_parameter(d), &z, |b, z| {
            b.iter(|| prior.noisy_logpdf(black_box(z)).unwrap())
        });
    }
    g.finish();
}

fn eigen(c: &mut Criterion) {
    let mut g = c.benchmark_group("jacobi_eigen");
    g.sample_size(10);
    for d in [8usize, 64, 256] {
        let mut r = rng();
        let prior = ManifoldPrior::from_factor(lower_factor(&mut r, d), 1e-4).unwrap();
        let cov = prior.covariance();
        g.bench_with_input(BenchmarkId::from_parameter(d), &cov, |b, cov| {
            b.iter(|| jacobi_eigen(black_box(cov)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, flow_passes, training_step, prior_density, eigen);
criterion_main!(benches);
