//! Parallel versus sequential execution of the two data-parallel stages:
//! dataset evaluation and the per-sample gradients of one batch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rdp_vfi::batch::Prepared;
use rdp_vfi::config::RunConfig;
use rdp_vfi::datagen::{generate_triplet, SceneConfig};
use rdp_vfi::evaluate::evaluate_with;
use rdp_vfi::io::Dataset;
use rdp_vfi::model::param_specs;
use rdp_vfi::par::{threads, Execution};
use rdp_vfi::params::ParamSet;
use rdp_vfi::train::batch_gradient;

fn setup(samples: usize) -> (RunConfig, ParamSet<f32>, Dataset) {
    let cfg = RunConfig::default();
    let scene = SceneConfig::from_data(&cfg.data);
    let data = Dataset {
        names: (0..samples).map(|i| format!("b{i}")).collect(),
        samples: (0..samples as u64).map(|i| generate_triplet(&scene, i).unwrap()).collect(),
    };
    let params = ParamSet::init(&param_specs(&cfg), 1);
    (cfg, params, data)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench(c: &mut Criterion) {
    let (cfg, params, data) = setup(8);
    eprintln!("parallel mode uses {} threads", threads(Execution::Parallel));

    let mut g = c.benchmark_group("evaluate_8_samples");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(exec, &cfg, &params, &data, None).unwrap())
        });
    }
    g.finish();

    let batch: Vec<(Prepared, u64)> = data.samples[..4].iter().enumerate().map(|(i, s)| (Prepared::new(s), i as u64)).collect();
    let mut g = c.benchmark_group("batch_gradient_4_samples");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(exec, &cfg, &params, &batch).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
