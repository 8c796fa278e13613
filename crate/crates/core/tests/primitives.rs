//! Gradient checks for every primitive over random shapes and values,
//! plus determinism of optimizer steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smrt::autodiff::{adam_step, grad_check, AdamConfig, AdamState, Params, Primitive, Tape, Tensor, Var};

const TRIALS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero so relu stays differentiable under the
/// finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces an op output to a scalar through a fixed random weighting so
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> smrt::autodiff::Result<Var> {
    let (rows, cols) = (tape.value(out).rows(), tape.value(out).cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = tape.constant(random(&mut rng, rows, cols));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check(kind: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Primitive, Vec<Tensor>)) {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (prim, inputs) = make(&mut rng);
        let err = grad_check(
            |tape, vars| {
                let out = tape.apply(prim.clone(), vars)?;
                if tape.shape(out).len() < 2 {
                    let w = tape.constant(Tensor::scalar(0.7));
                    let scaled = tape.mul(out, w)?;
                    return tape.sum(scaled);
                }
                weighted_sum(tape, out, trial)
            },
            &inputs,
            1e-5,
            usize::MAX,
            trial,
        )
        .unwrap_or_else(|e| panic!("{kind} trial {trial}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{kind}: worst relative error {worst:.3e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

#[test]
fn matmul_gradients() {
    check("matmul", |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        (
            Primitive::MatMul { transpose_rhs: false },
            vec![random(rng, m, k), random(rng, k, n)],
        )
    });
    check("matmul-t", |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        (
            Primitive::MatMul { transpose_rhs: true },
            vec![random(rng, m, k), random(rng, n, k)],
        )
    });
}

#[test]
fn elementwise_gradients() {
    check("add", |rng| {
        let (r, c) = dims(rng);
        let rhs_rows = if rng.gen_bool(0.5) { 1 } else { r };
        (Primitive::Add, vec![random(rng, r, c), random(rng, rhs_rows, c)])
    });
    check("mul", |rng| {
        let (r, c) = dims(rng);
        (Primitive::Mul, vec![random(rng, r, c), random(rng, r, c)])
    });
    check("scale", |rng| {
        let (r, c) = dims(rng);
        (Primitive::Scale(rng.gen_range(-3.0..3.0)), vec![random(rng, r, c)])
    });
    check("relu", |rng| {
        let (r, c) = dims(rng);
        (Primitive::Relu, vec![away_from_zero(rng, r, c)])
    });
    check("dropout", |rng| {
        let (r, c) = dims(rng);
        (
            Primitive::Dropout {
                rate: rng.gen_range(0.0..0.9),
                seed: rng.gen(),
            },
            vec![random(rng, r, c)],
        )
    });
}

#[test]
fn row_normalizer_gradients() {
    check("softmax", |rng| {
        let (r, c) = dims(rng);
        (Primitive::Softmax, vec![random(rng, r, c)])
    });
    check("log-softmax", |rng| {
        let (r, c) = dims(rng);
        (Primitive::LogSoftmax, vec![random(rng, r, c)])
    });
    check("layer-norm", |rng| {
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(2..7);
        (
            Primitive::LayerNorm { eps: 1e-5 },
            vec![random(rng, r, c), random(rng, 1, c), random(rng, 1, c)],
        )
    });
}

#[test]
fn structural_gradients() {
    check("embedding", |rng| {
        let (v, d) = dims(rng);
        let ids = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..v)).collect();
        (Primitive::Embedding { ids }, vec![random(rng, v, d)])
    });
    check("concat-rows", |rng| {
        let c = rng.gen_range(1..5);
        let parts = (0..rng.gen_range(1..4))
            .map(|_| {
                let r = rng.gen_range(1..4);
                random(rng, r, c)
            })
            .collect();
        (Primitive::Concat { axis: 0 }, parts)
    });
    check("concat-cols", |rng| {
        let r = rng.gen_range(1..5);
        let parts = (0..rng.gen_range(1..4))
            .map(|_| {
                let c = rng.gen_range(1..4);
                random(rng, r, c)
            })
            .collect();
        (Primitive::Concat { axis: 1 }, parts)
    });
    check("slice-rows", |rng| {
        let (r, c) = dims(rng);
        let start = rng.gen_range(0..r);
        let end = rng.gen_range(start + 1..=r);
        (Primitive::SliceRows { start, end }, vec![random(rng, r, c)])
    });
    check("slice-cols", |rng| {
        let (r, c) = dims(rng);
        let start = rng.gen_range(0..c);
        let end = rng.gen_range(start + 1..=c);
        (Primitive::SliceCols { start, end }, vec![random(rng, r, c)])
    });
    check("mean", |rng| {
        let (r, c) = dims(rng);
        (Primitive::Mean, vec![random(rng, r, c)])
    });
    check("sum", |rng| {
        let (r, c) = dims(rng);
        (Primitive::Sum, vec![random(rng, r, c)])
    });
}

#[test]
fn normalizers_are_finite_on_extreme_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 4, data).unwrap());
        let s = tape.softmax(x).unwrap();
        let l = tape.log_softmax(x).unwrap();
        assert!(tape.value(s).data().iter().all(|v| v.is_finite()));
        assert!(tape.value(l).data().iter().all(|v| v.is_finite()));
        let total = tape.sum(l).unwrap();
        tape.backward(total).unwrap();
        assert!(tape.grad(x).data().iter().all(|v| v.is_finite()));
    }
}

fn two_steps(seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    params.push("w", random(&mut rng, 3, 4));
    params.push("b", random(&mut rng, 1, 4));
    let x = random(&mut rng, 5, 3);
    let mut state = AdamState::new(AdamConfig::default(), &params);
    for step in 0..2u64 {
        let mut tape = Tape::new();
        let vars = params.load(&mut tape);
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, vars[0]).unwrap();
        let h = tape.add(h, vars[1]).unwrap();
        let h = tape.dropout(h, 0.3, seed * 10 + step).unwrap();
        let l = tape.log_softmax(h).unwrap();
        let loss = tape.mean(l).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    params
}

#[test]
fn seeded_training_steps_are_bit_identical() {
    for seed in 0..10 {
        let a = two_steps(seed);
        let b = two_steps(seed);
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }
}
