use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_autodiff::{
    finite_diff_check, forward_eval, BatchNormMode, Conv1dPadding, Graph, Result, Tensor, Var,
};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random tensor whose entries stay at least `gap` away from zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Projects a tensor-valued output to a scalar with a fixed random weighting
/// so that every output coordinate contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with(name, |rng| shapes.iter().map(|s| rand_tensor(rng, s)).collect(), f)
}

fn check_with<G, F>(name: &str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1d);
    for trial in 0..10 {
        let point = gen(&mut rng);
        let err = finite_diff_check(
            |g, x| {
                let y = f(g, x)?;
                project(g, y, 17)
            },
            &point,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name} trial {trial}: max rel err {err:e}");
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let (_, y) = forward_eval(
        &mut g,
        &[
            Tensor::new(&[2], vec![1., 2.]).unwrap(),
            Tensor::new(&[2], vec![3., 4.]).unwrap(),
        ],
        |g, x| g.add(x[0], x[1]),
    )
    .unwrap();
    assert_eq!(g.value(y).data(), &[4., 6.]);

    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 1]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &Tensor::zeros(&[2, 1]));

    let z = g.constant(Tensor::scalar(0.0));
    let s = g.silu(z).unwrap();
    assert_eq!(g.value(s).item(), 0.0);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.starts_with("add"), "{msg}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);

    let mut g = Graph::new();
    let a = g.param(Tensor::new(&[2], vec![1., 2.]).unwrap());
    let b = g.param(Tensor::new(&[2], vec![3., 4.]).unwrap());
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[3., 4.]);
    assert_eq!(g.grad(b).unwrap().data(), &[1., 2.]);
}

#[test]
fn backward_errors() {
    let mut empty = Graph::new();
    let mut other = Graph::new();
    let v = other.param(Tensor::scalar(1.0));
    assert!(empty.backward(v, &Tensor::scalar(1.0)).is_err());

    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(g.backward(y, &Tensor::scalar(1.0)).is_err());
    assert!(g.backward(v, &Tensor::scalar(1.0)).is_err());
}

#[test]
fn non_grad_leaves_untouched() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    let c = g.constant(Tensor::ones(&[2]));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(x).is_some());
}

#[test]
fn accumulation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = rand_tensor(&mut rng, &[3, 4]);
    let w0 = rand_tensor(&mut rng, &[4, 2]);
    let body = |g: &mut Graph, x: Var, w: Var| -> Result<Var> {
        let m = g.matmul(x, w)?;
        let t = g.tanh(m)?;
        g.sum(t)
    };
    let mut g1 = Graph::new();
    let (x, w) = (g1.param(x0.clone()), g1.param(w0.clone()));
    let y = body(&mut g1, x, w).unwrap();
    g1.backward(y, &Tensor::scalar(1.0)).unwrap();

    let mut g2 = Graph::new();
    let (x2, w2) = (g2.param(x0), g2.param(w0));
    let a = body(&mut g2, x2, w2).unwrap();
    let b = body(&mut g2, x2, w2).unwrap();
    let s = g2.add(a, b).unwrap();
    g2.backward(s, &Tensor::scalar(1.0)).unwrap();

    for (v1, v2) in [(x, x2), (w, w2)] {
        let single = g1.grad(v1).unwrap();
        let double = g2.grad(v2).unwrap();
        for (s, d) in single.data().iter().zip(double.data()) {
            assert!((2.0 * s - d).abs() < 1e-12);
        }
    }

    // a second backward pass on the same graph accumulates
    g1.backward(y, &Tensor::scalar(1.0)).unwrap();
    g2.zero_grad();
    assert!(g2.grad(x2).is_none());
}

#[test]
fn flip_twice_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = rand_tensor(&mut rng, &[3, 5, 2]);
    for axis in 0..3 {
        assert_eq!(t.flip(axis).unwrap().flip(axis).unwrap(), t);
    }
}

#[test]
fn grad_elementwise() {
    check("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1]));
    check("add scalar-broadcast", &[&[3, 4], &[1]], |g, x| g.add(x[0], x[1]));
    check("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1]));
    check("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1]));
    check("mul scalar-broadcast", &[&[1], &[2, 5]], |g, x| g.mul(x[0], x[1]));
    check("scale", &[&[4]], |g, x| g.scale(x[0], -2.5));
    check("add_scalar", &[&[4]], |g, x| g.add_scalar(x[0], 0.7));
    check("add_along", &[&[2, 3, 4], &[3]], |g, x| g.add_along(x[0], x[1], 1));
    check("mul_along", &[&[2, 3, 4], &[4]], |g, x| g.mul_along(x[0], x[1], 2));
}

#[test]
fn grad_activations() {
    check("sigmoid", &[&[2, 6]], |g, x| g.sigmoid(x[0]));
    check("silu", &[&[2, 6]], |g, x| g.silu(x[0]));
    check("softplus", &[&[2, 6]], |g, x| g.softplus(x[0]));
    check("exp", &[&[2, 6]], |g, x| g.exp(x[0]));
    check("tanh", &[&[2, 6]], |g, x| g.tanh(x[0]));
    check_with(
        "log",
        |rng| vec![Tensor::from_fn(&[2, 6], |_| rng.random_range(0.2..2.0))],
        |g, x| g.log(x[0]),
    );
    check_with("relu", |rng| vec![rand_away_from_zero(rng, &[2, 6], 0.05)], |g, x| g.relu(x[0]));
    check_with("abs", |rng| vec![rand_away_from_zero(rng, &[2, 6], 0.05)], |g, x| g.abs(x[0]));
    check_with(
        "clamp",
        |rng| {
            vec![Tensor::from_fn(&[12], |_| {
                // keep samples off the clamp boundaries at +-0.5
                let v: f64 = rng.random_range(-1.0..1.0);
                if (v.abs() - 0.5).abs() < 0.05 {
                    v * 0.5
                } else {
                    v
                }
            })]
        },
        |g, x| g.clamp(x[0], -0.5, 0.5),
    );
}

#[test]
fn grad_linear_algebra() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]));
    check("conv1d causal depthwise", &[&[2, 3, 6], &[3, 1, 4], &[3]], |g, x| {
        g.conv1d(x[0], x[1], Some(x[2]), 3, Conv1dPadding::Causal)
    });
    check("conv1d same grouped", &[&[1, 4, 5], &[6, 2, 3]], |g, x| {
        g.conv1d(x[0], x[1], None, 2, Conv1dPadding::Same)
    });
    check("conv2d", &[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]], |g, x| {
        g.conv2d(x[0], x[1], Some(x[2]))
    });
    check("avg_pool2d", &[&[2, 3, 4, 6]], |g, x| g.avg_pool2d(x[0], 2, 2));
    check("avg_pool2d F-only", &[&[1, 2, 3, 4]], |g, x| g.avg_pool2d(x[0], 1, 2));
}

#[test]
fn grad_reductions_and_shapes() {
    check("sum", &[&[3, 4]], |g, x| g.sum(x[0]));
    check("mean", &[&[3, 4]], |g, x| g.mean(x[0]));
    check("sum_axis", &[&[2, 3, 4]], |g, x| g.sum_axis(x[0], 1));
    check("mean_axis", &[&[2, 3, 4]], |g, x| g.mean_axis(x[0], 2));
    check("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4]));
    check("permute", &[&[2, 3, 4]], |g, x| g.permute(x[0], &[2, 0, 1]));
    check("flip", &[&[2, 5, 3]], |g, x| g.flip(x[0], 1));
    check("slice", &[&[3, 6]], |g, x| g.slice(x[0], 1, 2, 5));
    check("concat", &[&[2, 3], &[2, 2]], |g, x| g.concat(&[x[0], x[1]], 1));
    check_with(
        "min_axis",
        |rng| {
            // well-separated candidates keep the argmin stable under +-eps
            vec![Tensor::from_fn(&[4, 3], |i| (i % 3) as f64 * 0.3 + rng.random_range(0.0..0.1))]
        },
        |g, x| Ok(g.min_axis(x[0], 1)?.0),
    );
}

#[test]
fn grad_batch_norm() {
    check_with(
        "batch_norm train",
        |rng| {
            vec![
                rand_tensor(rng, &[3, 2, 2, 3]),
                rand_tensor(rng, &[2]),
                rand_tensor(rng, &[2]),
            ]
        },
        |g, x| Ok(g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train, 1e-5)?.0),
    );
    let (mean, var) = ([0.1, -0.2], [0.5, 1.5]);
    check(
        "batch_norm infer",
        &[&[2, 2, 3], &[2], &[2]],
        |g, x| {
            Ok(g
                .batch_norm(x[0], x[1], x[2], BatchNormMode::Infer { mean: &mean, var: &var }, 1e-5)?
                .0)
        },
    );
}

#[test]
fn batch_norm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[4, 2, 5]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train, 0.0).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.count, 20);
    let yv = g.value(y);
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..5).map(move |t| (b, t)))
            .map(|(b, t)| yv.at(&[b, ch, t]))
            .collect();
        let m: f64 = vals.iter().sum::<f64>() / 20.0;
        let v: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn pooling_rejects_indivisible() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 5, 4]));
    let err = g.avg_pool2d(x, 2, 2).unwrap_err().to_string();
    assert!(err.contains("not divisible"), "{err}");
}
