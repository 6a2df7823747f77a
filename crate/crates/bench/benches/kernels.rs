use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skippy_bench::padded;
use skippy_core::geometry::Preconditioning;
use skippy_core::learner::{run_skippy_eleanor, LearnerConfig, Opt1Mode};
use skippy_core::linalg::{top_eigenpair, Matrix, Vector};
use skippy_core::mdp::{evaluate_policy_exact, MemorylessPolicy};
use skippy_core::oracles::stage_designs;
use skippy_core::skippy::{e_to_all, SuffixPoint};

fn linalg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in [4usize, 16] {
        let b = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let m = (&b + b.transpose()) * 0.5;
        c.bench_function(&format!("top_eigenpair/d{d}"), |bn| bn.iter(|| top_eigenpair(black_box(&m))));

        let dirs: Vec<Vector> = (0..32).map(|_| Vector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).collect();
        c.bench_function(&format!("append_direction/d{d}x32"), |bn| {
            bn.iter_batched(
                || Preconditioning::new(1, d, 1.0, 100.0),
                |mut q| {
                    for w in &dirs {
                        q.append_direction(0, w).unwrap();
                    }
                    q
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn suffix(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s: Vec<SuffixPoint> = (0..20)
        .map(|_| SuffixPoint { tau: rng.gen_range(0.0..1.0), c: rng.gen_range(0.0..20.0), reward: rng.gen_range(0.0..1.0) })
        .collect();
    c.bench_function("e_to_all/len20", |bn| bn.iter(|| e_to_all(black_box(&s))));
}

fn oracles(c: &mut Criterion) {
    let (inst, consts) = padded(3, 6, 0);
    let q = Preconditioning::new(6, 3, inst.phi.l2, consts.l3);
    let thetas = inst.samples.thetas();
    c.bench_function("stage_designs/d3h6", |bn| bn.iter(|| stage_designs(black_box(&thetas), &q, consts.d0).unwrap()));
    let pol = MemorylessPolicy::uniform(&inst.mdp);
    c.bench_function("evaluate_policy_exact/d3h6", |bn| {
        bn.iter(|| evaluate_policy_exact(black_box(&inst.mdp), &pol).unwrap())
    });
}

fn learner(c: &mut Criterion) {
    let (inst, consts) = padded(2, 4, 1);
    let cfg = LearnerConfig { opt1: Opt1Mode::Oracle, ..Default::default() };
    let mut g = c.benchmark_group("learner");
    g.sample_size(10);
    g.bench_function("oracle_run/d2h4", |bn| {
        bn.iter(|| run_skippy_eleanor(&inst.mdp, &inst.phi, &cfg, &consts, Some(&inst.samples), 7).unwrap())
    });
    g.finish();
}

criterion_group!(benches, linalg, suffix, oracles, learner);
criterion_main!(benches);
