use std::hint::black_box;

use cpolab_bench::{conditions, filled, model, timesteps, COND_WIDTH, DATA_DIM, STEPS};
use cpolab_core::cpo::{cpo_loss, cpo_s_loss, NoiseTargets};
use cpolab_core::diffusion::{ddim_sample_batch, ScheduleSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn denoiser(c: &mut Criterion) {
    let m = model(1);
    let mut g = c.benchmark_group("denoiser");
    for batch in [1, 32, 256] {
        let x = filled(batch, DATA_DIM, 0.0);
        let cond = filled(batch, COND_WIDTH, 0.5);
        let t = timesteps(batch);
        g.bench_with_input(BenchmarkId::new("forward", batch), &batch, |b, _| {
            b.iter(|| m.forward(black_box(x.view()), &t, cond.view()).unwrap())
        });
        let (out, tape) = m.forward_tape(x.view(), &t, cond.view()).unwrap();
        g.bench_with_input(BenchmarkId::new("backward", batch), &batch, |b, _| {
            b.iter(|| m.backward(black_box(&tape), out.view()))
        });
    }
    g.finish();
}

fn alignment(c: &mut Criterion) {
    let (theta1, theta) = (model(2), model(3));
    let batch = 32;
    let conds = conditions(batch);
    let targets = NoiseTargets::build(
        &theta1,
        filled(batch, DATA_DIM, 1.0),
        timesteps(batch),
        &conds,
        2.0,
        2.0,
    )
    .unwrap();
    let mut g = c.benchmark_group("alignment_step");
    g.bench_function("targets", |b| {
        b.iter(|| {
            NoiseTargets::build(
                &theta1,
                filled(batch, DATA_DIM, 1.0),
                timesteps(batch),
                &conds,
                2.0,
                2.0,
            )
            .unwrap()
        })
    });
    g.bench_function("cpo", |b| {
        b.iter(|| {
            cpo_loss(
                &theta,
                &theta1,
                black_box(&targets),
                conds.c_content.view(),
                10.0,
            )
            .unwrap()
        })
    });
    g.bench_function("cpo_s", |b| {
        b.iter(|| {
            cpo_s_loss(
                &theta,
                &theta1,
                black_box(&targets),
                conds.c_content.view(),
                10.0,
            )
            .unwrap()
        })
    });
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let m = model(4);
    let sched = ScheduleSpec::default().build().unwrap();
    let batch = 64;
    let cond = filled(batch, COND_WIDTH, 0.5);
    let seeds: Vec<u64> = (0..batch as u64).collect();
    let mut g = c.benchmark_group("ddim");
    g.sample_size(20);
    for steps in [10, 50, STEPS] {
        g.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, &steps| {
            b.iter(|| ddim_sample_batch(&m, cond.view(), &sched, steps, black_box(&seeds)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, denoiser, alignment, sampling);
criterion_main!(benches);
