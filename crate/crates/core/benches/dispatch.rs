use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedclf::exec::Executor;
use fedclf::selection::Strategy;
use fedclf::server::{run_experiment, DataSource, ExperimentConfig, ModelKind};

fn bench_config(model: ModelKind, select_k: usize) -> ExperimentConfig {
    ExperimentConfig {
        rounds: 10,
        select_k,
        learning_rate: 0.05,
        model,
        strategy: Strategy::Random,
        feedback_enabled: false,
        data: DataSource::desk_default(),
        ..ExperimentConfig::default()
    }
}

type MakeExecutor = (&'static str, fn() -> Executor);

fn executors() -> [MakeExecutor; 2] {
    [
        ("serial", Executor::serial as fn() -> Executor),
        ("parallel", || Executor::parallel(None).expect("thread pool")),
    ]
}

fn client_dispatch(c: &mut Criterion) {
    let mut group = c.benchmark_group("client_dispatch");
    group.sample_size(10);
    for (label, model) in [("softmax", ModelKind::Softmax), ("mlp32", ModelKind::Mlp { hidden: 32 })] {
        for k in [5, 25] {
            let cfg = bench_config(model, k);
            for (mode, make) in executors() {
                group.bench_with_input(BenchmarkId::new(format!("{label}/{mode}"), k), &cfg, |b, cfg| {
                    b.iter(|| run_experiment(cfg, None, make()).expect("run"))
                });
            }
        }
    }
    group.finish();
}

fn battery(c: &mut Criterion) {
    use fedclf::cli::{run_battery, BatterySpec};
    let spec = BatterySpec::parse("rounds=20\nlr=0.05\nstrategies=fedclf,random\ndatasets=NIID-S50-E\nseeds=1,2,3,4\n")
        .expect("spec");
    let mut group = c.benchmark_group("battery");
    group.sample_size(10);
    for (mode, make) in executors() {
        let exec = make();
        group.bench_function(mode, |b| b.iter(|| run_battery(&spec, &exec).expect("battery")));
    }
    group.finish();
}

criterion_group!(benches, client_dispatch, battery);
criterion_main!(benches);
