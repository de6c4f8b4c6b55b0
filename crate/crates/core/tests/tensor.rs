use proptest::prelude::*;
use qfa_core::rng;
use qfa_core::tensor::{Tape, Tensor, Var};
use rand::Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Uniform values with magnitude at least `gap`, for ops with a kink at 0.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut impl Rng) -> Tensor {
    let mut t = random(shape, r);
    for v in t.data_mut() {
        let m = gap + (1.0 - gap) * v.abs();
        *v = if *v < 0.0 { -m } else { m };
    }
    t
}

/// Runs `f` on fresh leaves holding `inputs` and reduces its output with a
/// fixed random weighting. Returns the scalar and, if asked, its gradients.
fn weighted(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    weight_seed: u64,
    grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if grads {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let w = random(&shape, &mut rng::seeded(weight_seed));
    let value: f64 = tape
        .value(out)
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a * b)
        .sum();
    if !grads {
        return (value, Vec::new());
    }
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss);
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.get(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    (value, grads)
}

/// Largest scaled discrepancy between the tape gradient and central
/// differences, `|a - n| / max(1, |n|)`.
fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (_, analytic) = weighted(inputs, f, 99, true);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric =
                (weighted(&plus, f, 99, false).0 - weighted(&minus, f, 99, false).0) / (2.0 * STEP);
            let err = (analytic[k][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let e2 = tape.matmul(eye, eye).unwrap();
    assert_eq!(tape.value(e2).data(), &[1.0, 0.0, 0.0, 1.0]);
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 1]);
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_gradient_absolute_difference() {
    let mut r = rng::seeded(1);
    let inputs = [random(&[3, 4], &mut r), random(&[4, 2], &mut r)];
    let f = |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap();
    let (_, analytic) = weighted(&inputs, &f, 7, true);
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric =
                (weighted(&plus, &f, 7, false).0 - weighted(&minus, &f, 7, false).0) / (2.0 * STEP);
            assert!((analytic[k][i] - numeric).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let a = random(&[2, 3], &mut r);
        let b = away_from_zero(&[2, 3], 0.2, &mut r);
        let s = Tensor::scalar(r.gen_range(0.5..2.0));
        let inputs = [a, b, s];
        let err = gradcheck(&inputs, &|t, v| {
            let x = t.add(v[0], v[1]).unwrap();
            let y = t.sub(x, v[0]).unwrap();
            let y = t.mul(y, v[0]).unwrap();
            let y = t.scale(y, 0.7);
            let y = t.add_const(y, 0.3);
            let y = t.mul_scalar(y, v[2]).unwrap();
            let y = t.div_scalar(y, v[2]).unwrap();
            let y = t.div_scalar(y, v[2]).unwrap();
            t.add_scalar(y, v[2]).unwrap()
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu_reshape_crop(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let inputs = [away_from_zero(&[3, 4, 2], 1e-2, &mut r)];
        let err = gradcheck(&inputs, &|t, v| {
            let x = t.relu(v[0]);
            let x = t.crop(x, &[1, 1, 0], &[2, 2, 2]).unwrap();
            t.reshape(x, &[4, 2]).unwrap()
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn convolutions(seed in any::<u64>(), stride in 1usize..=2, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut r = rng::seeded(seed);
        let inputs = [random(&[2, 5, 4, 3], &mut r), random(&[k, k, 3, 2], &mut r), random(&[k, k, 2], &mut r)];
        let err = gradcheck(&inputs, &|t, v| {
            let y = t.conv2d(v[0], v[1], stride).unwrap();
            t.depthwise_conv2d(y, v[2], 1).unwrap()
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn pooling_bias_and_losses(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let inputs = [random(&[3, 2, 2, 4], &mut r), random(&[4], &mut r)];
        let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
        let target: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let err = gradcheck(&inputs, &|t, v| {
            let p = t.global_avg_pool(v[0]).unwrap();
            let p = t.scale(p, 3.0);
            let z = t.add_row_bias(p, v[1]).unwrap();
            let ce = t.softmax_cross_entropy(z, &labels).unwrap();
            let m = t.mse(z, &target).unwrap();
            let mz = t.mean(z);
            let s = t.add(ce, m).unwrap();
            t.add(s, mz).unwrap()
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn batch_norm_with_batch_statistics(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let mut gamma = random(&[3], &mut r);
        gamma.data_mut().iter_mut().for_each(|g| *g += 1.5);
        let inputs = [random(&[4, 2, 2, 3], &mut r), gamma, random(&[3], &mut r)];
        let err = gradcheck(&inputs, &|t, v| t.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap().0);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn batch_norm_with_fixed_statistics(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.2..2.0)).collect();
        let inputs = [random(&[5, 3], &mut r), random(&[3], &mut r), random(&[3], &mut r)];
        let err = gradcheck(&inputs, &|t, v| t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5).unwrap().0);
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn round_ste_is_identity_on_gradients(
        x in prop::collection::vec(-50.0f64..50.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut tape = Tape::new();
        let n = x.len();
        let v = tape.param(Tensor::from_vec(x));
        let y = tape.round_ste(v);
        let mut r = rng::seeded(seed);
        let upstream: Vec<f64> = (0..n).map(|_| r.gen_range(-10.0..10.0)).collect();
        let g = tape.backward_with(y, upstream.clone());
        prop_assert_eq!(g.get(v).unwrap(), upstream.as_slice());
    }
}

#[test]
fn batch_norm_drops_gradient_of_constant_channels() {
    let mut tape = Tape::new();
    // channel 0 varies, channel 1 is constant across the batch
    let x = tape.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 2.0, 0.5, 2.0]).unwrap());
    let g = tape.param(Tensor::from_vec(vec![1.0, 1.0]));
    let b = tape.param(Tensor::from_vec(vec![0.0, 0.0]));
    let (y, _, var) = tape.batch_norm(x, g, b, None, 1e-5).unwrap();
    assert_eq!(var[1], 0.0);
    let w = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let p = tape.mul(y, w).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss);
    let gx = grads.get(x).unwrap();
    assert!(gx[0] != 0.0);
    assert_eq!([gx[1], gx[3], gx[5]], [0.0, 0.0, 0.0]);
}

#[test]
fn clamp_and_round_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![0.5, 5.0, -1.0, 0.0, 1.4, 2.5]));
    let c = tape.clamp_with_grad(x, 0.0, 3.0).unwrap();
    assert_eq!(tape.value(c).data(), &[0.5, 3.0, 0.0, 0.0, 1.4, 2.5]);
    let r = tape.round_ste(c);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0, 0.0, 1.0, 2.0]);
    let s = tape.sum(r);
    let g = tape.backward(s);
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn grad_scale_scales_only_the_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
    let y = tape.grad_scale(x, 0.25);
    assert_eq!(tape.value(y).data(), &[1.0, -2.0]);
    let s = tape.sum(y);
    assert_eq!(tape.backward(s).get(x).unwrap(), &[0.25, 0.25]);
}

fn small_graph(seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut r = rng::seeded(seed);
    let mut tape = Tape::new();
    let x = tape.param(random(&[2, 4, 4, 3], &mut r));
    let w = tape.param(random(&[3, 3, 3, 4], &mut r));
    let y = tape.conv2d(x, w, 2).unwrap();
    let y = tape.relu(y);
    // fan-out: y feeds the pool twice
    let z = tape.add(y, y).unwrap();
    let p = tape.global_avg_pool(z).unwrap();
    let loss = tape.softmax_cross_entropy(p, &[1, 3]).unwrap();
    let g = tape.backward(loss);
    (
        tape.value(p).data().to_vec(),
        vec![g.get(x).unwrap().to_vec(), g.get(w).unwrap().to_vec()],
    )
}

#[test]
fn identical_seeds_give_bit_identical_gradients() {
    let (a, ga) = small_graph(5);
    let (b, gb) = small_graph(5);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn fan_out_gradients_add() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.5, -0.5]));
    let a = tape.scale(x, 2.0);
    let b = tape.scale(x, 3.0);
    let s = tape.add(a, b).unwrap();
    let m = tape.mul(s, x).unwrap();
    let loss = tape.sum(m);
    // d/dx of 5x² is 10x
    assert_eq!(tape.backward(loss).get(x).unwrap(), &[15.0, -5.0]);
}
