//! Finite-difference checks for every operator, on random small inputs.

use diffcore::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use diffcore::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so relu/clamp kinks are never straddled.
fn away_from_kinks(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if kinks.iter().all(|k| (v - k).abs() > 1e-2) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts a tensor-valued output against fixed random weights so every
/// output element contributes to the scalar being differentiated.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&mut rng, &shape))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn assert_check<B>(build: B, inputs: &[Tensor])
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_gradients(build, inputs, DEFAULT_STEP).unwrap();
    assert!(
        report.passes(DEFAULT_TOLERANCE),
        "relative errors {:?}",
        report.errors
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_and_mul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[2, 3]);
        let s = random(&mut rng, &[1]);
        assert_check(|g, v| {
            let p = g.mul(v[0], v[1])?;
            let q = g.add(p, v[2])?;
            let r = g.mul(q, v[2])?;
            weighted_sum(g, r, seed)
        }, &[a, b, s]);
    }

    #[test]
    fn matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[4, 2]);
        assert_check(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }, &[a, b]);
    }

    #[test]
    fn conv2d(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 2, 6, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        assert_check(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(g, y, seed)
        }, &[x, w, b]);
    }

    #[test]
    fn relu(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_kinks(&mut rng, &[3, 4], &[0.0]);
        assert_check(|g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, seed)
        }, &[x]);
    }

    #[test]
    fn linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5]);
        assert_check(|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, seed)
        }, &[x, w, b]);
    }

    #[test]
    fn l2_normalize(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4]);
        assert_check(|g, v| {
            let y = g.l2_normalize(v[0])?;
            weighted_sum(g, y, seed)
        }, &[x]);
    }

    #[test]
    fn cosine_similarity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3, 4]);
        let b = random(&mut rng, &[5, 4]);
        assert_check(|g, v| {
            let y = g.cosine_similarity(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }, &[a, b]);
    }

    #[test]
    fn softmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 5]);
        assert_check(|g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, seed)
        }, &[x]);
    }

    #[test]
    fn cross_entropy_both_axes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 4, 3]);
        let rows: Vec<usize> = (0..8).map(|_| rng.gen_range(0..3)).collect();
        let cols: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        assert_check(|g, v| {
            let r = g.cross_entropy(v[0], 2, &rows)?;
            let c = g.cross_entropy(v[0], 1, &cols)?;
            let a = weighted_sum(g, r, seed)?;
            let b = weighted_sum(g, c, seed + 1)?;
            g.add(a, b)
        }, &[x]);
    }

    #[test]
    fn exp_clamp_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_kinks(&mut rng, &[4, 3], &[-0.5, 0.8]);
        assert_check(|g, v| {
            let e = g.exp(v[0])?;
            let c = g.clamp(v[0], -0.5, 0.8)?;
            let p = g.mul(e, c)?;
            g.mean(p)
        }, &[x]);
    }

    #[test]
    fn stack_and_reshape(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[2, 3]);
        assert_check(|g, v| {
            let s = g.stack(&[v[0], v[1], v[0]])?;
            let r = g.reshape(s, &[3, 6])?;
            weighted_sum(g, r, seed)
        }, &[a, b]);
    }

    /// A random five-parameter composite graph.
    #[test]
    fn random_composite_graph(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[5])).collect();
        let plan: Vec<u8> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        assert_check(|g, v| {
            let mut acc = v[0];
            for (step, op) in plan.iter().enumerate() {
                let other = v[1 + step % 4];
                acc = match op {
                    0 => g.add(acc, other)?,
                    1 => g.mul(acc, other)?,
                    2 => { let s = g.scale(acc, 0.5)?; g.exp(s)? }
                    3 => g.softmax(acc)?,
                    _ => {
                        let a = g.reshape(acc, &[1, 5])?;
                        let b = g.reshape(other, &[1, 5])?;
                        let c = g.cosine_similarity(a, b)?;
                        let sc = g.reshape(c, &[1])?;
                        g.mul(other, sc)?
                    }
                };
            }
            weighted_sum(g, acc, seed)
        }, &params);
    }

    #[test]
    fn cosine_stays_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powi(rng.gen_range(-9..6));
        let a = random(&mut rng, &[4, 6]).map(|v| v * scale);
        let b = random(&mut rng, &[3, 6]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let c = g.cosine_similarity(va, vb).unwrap();
        prop_assert!(g.value(c).data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, &[2, 1, 9, 9])).unwrap();
        let w = g.param(random(&mut rng, &[4, 1, 3, 3])).unwrap();
        let b = g.param(random(&mut rng, &[4])).unwrap();
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let s = g.softmax(y).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn relative_error_ignores_roundoff_on_vanishing_gradients() {
    use diffcore::gradcheck::relative_error;
    assert_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
    assert!((relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
    assert!(relative_error(&[1e-17, -5e-18], &[4e-13, -4e-13]) < 1e-3);
    assert_eq!(relative_error(&[0.0], &[1e-6]), 1.0);
}
