//! Sequential vs parallel kernel throughput, plus end-to-end scoring.
//!
//! The `parallel` feature only changes which kernel the graph dispatches to;
//! both variants stay compiled and are benched side by side here so the
//! crossover point can be read off per machine. Built without the feature,
//! the parallel rows disappear and the sequential numbers remain comparable.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepclaim::diffkit::kernels;
use deepclaim::diffkit::Mode;
use deepclaim::featurize::{build_vocab, vectorize, ClaimVector, Thresholds};
use deepclaim::ingest::parse_claims;
use deepclaim::model::{forward, init_network, ModelConfig, NetworkParams, Variant};
use deepclaim::pipeline::score_all;
use deepclaim::synth::{generate, SynthConfig};

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// The wide first layer: one-hot-ish claims hitting a large vocabulary.
fn wide_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, in_dim, out_dim) = (128, 2000, 96);
    let x = randv(&mut rng, rows * in_dim);
    let w = randv(&mut rng, out_dim * in_dim);
    let b = randv(&mut rng, out_dim);
    let pattern: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let mut nnz: Vec<usize> = (0..8).map(|_| rng.random_range(0..in_dim)).collect();
            nnz.sort_unstable();
            nnz.dedup();
            nnz
        })
        .collect();
    let mut out = vec![0.0; rows * out_dim];

    let mut group = c.benchmark_group("wide_forward");
    group.sample_size(20);
    group.throughput(Throughput::Elements((rows * out_dim) as u64));
    group.bench_function("seq_dense", |bench| {
        bench.iter(|| {
            kernels::linear_forward_seq(
                black_box(&x),
                None,
                black_box(&w),
                Some(&b),
                &mut out,
                in_dim,
                out_dim,
            )
        })
    });
    group.bench_function("seq_sparse", |bench| {
        bench.iter(|| {
            kernels::linear_forward_seq(
                black_box(&x),
                Some(black_box(&pattern)),
                black_box(&w),
                Some(&b),
                &mut out,
                in_dim,
                out_dim,
            )
        })
    });
    #[cfg(feature = "parallel")]
    {
        group.bench_function("par_dense", |bench| {
            bench.iter(|| {
                kernels::linear_forward_par(
                    black_box(&x),
                    None,
                    black_box(&w),
                    Some(&b),
                    &mut out,
                    in_dim,
                    out_dim,
                )
            })
        });
        group.bench_function("par_sparse", |bench| {
            bench.iter(|| {
                kernels::linear_forward_par(
                    black_box(&x),
                    Some(black_box(&pattern)),
                    black_box(&w),
                    Some(&b),
                    &mut out,
                    in_dim,
                    out_dim,
                )
            })
        });
    }
    group.finish();
}

/// Square mid-network layers at training batch width.
fn gradient_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (rows, in_dim, out_dim) = (128, 96, 96);
    let x = randv(&mut rng, rows * in_dim);
    let w = randv(&mut rng, out_dim * in_dim);
    let dy = randv(&mut rng, rows * out_dim);
    let mut dx = vec![0.0; rows * in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];

    let mut group = c.benchmark_group("gradient_kernels");
    group.throughput(Throughput::Elements((rows * in_dim * out_dim) as u64));
    group.bench_function("grad_input_seq", |bench| {
        bench.iter(|| {
            kernels::linear_grad_input_seq(black_box(&dy), black_box(&w), &mut dx, in_dim, out_dim)
        })
    });
    group.bench_function("grad_weight_seq", |bench| {
        bench.iter(|| {
            kernels::linear_grad_weight_seq(
                black_box(&dy),
                black_box(&x),
                None,
                &mut dw,
                in_dim,
                out_dim,
            )
        })
    });
    #[cfg(feature = "parallel")]
    {
        group.bench_function("grad_input_par", |bench| {
            bench.iter(|| {
                kernels::linear_grad_input_par(
                    black_box(&dy),
                    black_box(&w),
                    &mut dx,
                    in_dim,
                    out_dim,
                )
            })
        });
        group.bench_function("grad_weight_par", |bench| {
            bench.iter(|| {
                kernels::linear_grad_weight_par(
                    black_box(&dy),
                    black_box(&x),
                    None,
                    &mut dw,
                    in_dim,
                    out_dim,
                )
            })
        });
    }
    group.finish();
}

/// Whole-model work on a realistic synthetic corpus slice.
fn end_to_end(c: &mut Criterion) {
    let config = SynthConfig { n_claims: 1000, seed: 31, ..SynthConfig::default() };
    let corpus = generate(&config).expect("synth");
    let claims = parse_claims(corpus.claims.as_bytes()).expect("parse");
    let thresholds = Thresholds { procedure: 3, diagnosis: 3, other: 3 };
    let vocab = build_vocab(&claims, thresholds).expect("vocab");
    let vectors: Vec<ClaimVector> = claims.iter().map(|cl| vectorize(cl, &vocab)).collect();
    let dims = [vocab.procedure.dim(), vocab.diagnosis.dim(), vocab.other.dim()];

    let model_config = ModelConfig { class_counts: [4, 4], seed: 3, ..ModelConfig::default() };
    let mut params = init_network(Variant::DeepClaim2, &model_config, dims);
    // Fold one train batch's statistics so eval-mode batch norm is defined.
    let warm: Vec<&ClaimVector> = vectors.iter().take(64).collect();
    let pass = forward(&params, &model_config, &warm, Mode::Train).expect("warm forward");
    if let NetworkParams::Deep(deep) = &mut params {
        for (j, stats) in &pass.bn_stats {
            deep.fusion.bn[*j].update_running(&stats.mean, &stats.var);
        }
    }

    let mut group = c.benchmark_group("end_to_end");
    group.sample_size(20);
    group.throughput(Throughput::Elements(claims.len() as u64));
    group.bench_function("vectorize_1000", |bench| {
        bench.iter(|| {
            claims.iter().map(|cl| vectorize(black_box(cl), &vocab)).count()
        })
    });
    group.bench_function("score_1000", |bench| {
        bench.iter(|| score_all(black_box(&params), &model_config, black_box(&vectors)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, wide_forward, gradient_kernels, end_to_end);
criterion_main!(benches);
