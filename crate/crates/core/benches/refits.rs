use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vat_scm::datagen::{generate, GenSpec};
use vat_scm::inference::{leave_one_out, placebo_test, InferenceOptions};
use vat_scm::{fit_weights, Execution, Panel, SolverOptions};

fn panel(donors: usize) -> Panel {
    let mut spec = GenSpec::new(donors, 2024).with_step_effect("2024-01".parse().unwrap(), 8.0);
    spec.treated_noise_sd = 0.3;
    generate(&spec).unwrap().0
}

fn options(execution: Execution) -> InferenceOptions {
    InferenceOptions {
        execution,
        ..InferenceOptions::default()
    }
}

fn single_fit(c: &mut Criterion) {
    let p = panel(25);
    c.bench_function("fit_weights/25_donors", |b| {
        b.iter(|| fit_weights(black_box(&p), &SolverOptions::default()).unwrap())
    });
}

fn refits(c: &mut Criterion) {
    let mut group = c.benchmark_group("placebo_test");
    for donors in [8, 25] {
        let p = panel(donors);
        for (name, exec) in [
            ("sequential", Execution::Sequential),
            ("parallel", Execution::Parallel),
        ] {
            group.bench_with_input(BenchmarkId::new(name, donors), &p, |b, p| {
                b.iter(|| placebo_test(black_box(p), &options(exec)).unwrap())
            });
        }
    }
    group.finish();

    let mut group = c.benchmark_group("leave_one_out");
    let p = panel(25);
    for (name, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ] {
        group.bench_function(BenchmarkId::new(name, 25), |b| {
            b.iter(|| leave_one_out(black_box(&p), &options(exec)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, single_fit, refits);
criterion_main!(benches);
