use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use subspace_lab::clustering::{build_affinity, spectral_cluster, AffinityHeuristic};
use subspace_lab::data::ridge_self_expression;
use subspace_lab::selfexpress;
use subspace_lab::tensor::{Tape, Tensor};
use subspace_lab_bench::{bench_dataset, bench_session};

fn matmul(c: &mut Criterion) {
    let mut rng = subspace_lab::rng::rng_for(1, "bench-matmul", 0, 0);
    let a = Tensor::randn(vec![128, 64], 1.0, &mut rng);
    let b = Tensor::randn(vec![64, 128], 1.0, &mut rng);
    c.bench_function("matmul 128x64x128 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let av = tape.leaf(&a, true);
            let bv = tape.leaf(&b, true);
            let p = tape.matmul(av, bv).unwrap();
            let loss = tape.sum_sq(p);
            tape.backward(loss).unwrap();
            black_box(tape.grad(av).unwrap()[0])
        })
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = subspace_lab::rng::rng_for(2, "bench-conv", 0, 0);
    let x = Tensor::randn(vec![8, 1, 32, 32], 1.0, &mut rng);
    let k = Tensor::randn(vec![8, 1, 3, 3], 1.0, &mut rng);
    c.bench_function("conv2d 8x1x32x32 k3 s2 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x, true);
            let kv = tape.leaf(&k, true);
            let y = tape.conv2d(xv, kv, 2).unwrap();
            let loss = tape.sum_sq(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(kv).unwrap()[0])
        })
    });
}

fn self_expression(c: &mut Criterion) {
    let ds = bench_dataset();
    let all: Vec<usize> = (0..ds.len()).collect();
    let z = ds.stack_flat(&all).unwrap();
    c.bench_function("ridge self-expression N=250", |bench| {
        bench.iter(|| black_box(ridge_self_expression(&z, 0.01).unwrap()))
    });
}

fn spectral(c: &mut Criterion) {
    let ds = bench_dataset();
    let all: Vec<usize> = (0..ds.len()).collect();
    let z = ds.stack_flat(&all).unwrap();
    let cm = ridge_self_expression(&z, 0.01).unwrap();
    let aff = build_affinity(&cm, AffinityHeuristic::AbsSym).unwrap();
    c.bench_function("spectral clustering N=250 k=5", |bench| {
        bench.iter(|| black_box(spectral_cluster(&aff, 5, 7).unwrap()))
    });
}

fn bdsc_step(c: &mut Criterion) {
    c.bench_function("bdsc fine-tune step N=250 n=32", |bench| {
        let mut session = bench_session();
        bench.iter(|| {
            session.finetune_steps(1).unwrap();
            black_box(session.global_step)
        })
    });
}

fn reconstruct(c: &mut Criterion) {
    let session = bench_session();
    let bank = session.bank.as_ref().unwrap().clone();
    let indices: Vec<usize> = (0..32).collect();
    let c_m = session.c_matrix().clone();
    c.bench_function("reconstruct_batch n=32 N=250", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let cv = tape.leaf(&c_m, true);
            let live = tape.constant_owned(bank.gather_rows(&indices).unwrap());
            let out = selfexpress::reconstruct_batch(&mut tape, cv, &bank, &indices, live).unwrap();
            black_box(tape.value(out).data()[0])
        })
    });
}

criterion_group!(benches, matmul, conv, self_expression, spectral, bdsc_step, reconstruct);
criterion_main!(benches);
