//! Acceptance runner: one line per criterion, then a summary.
//!
//! Set `SELD_ACCEPT_ONLY=1,2,5` to run a subset. Criteria listed in
//! `KNOWN_UNMET` still run and print FAIL, but do not fail the process.

use std::f64::consts::E;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_autodiff::{finite_diff_check, BatchNormMode, Conv1dPadding, Graph, Tensor, Var};
use seld_core::data::{encode_targets, synth_scene, targets_to_events, SceneSpec};
use seld_core::features::{assemble_branch_inputs, FeatureConfig, FoaClip};
use seld_core::metrics::{seld_score, tracks_to_events, EventList};
use seld_core::model::{
    count_params_macs, cross_stitch, encoder_forward, BatchInput, ModelConfig, SeldModel, TrackOutput, TrackVars,
};
use seld_core::objective::{pit_loss, pit_loss_value, FrameTargets, LossWeights, Stage, PERMUTATIONS};
use seld_core::params::{Ctx, ParamStore};
use seld_core::ssm::{
    discretize, rmsnorm_op, scan_forward, selective_scan, BMambaBlock, InputRule, MambaConfig, MambaLayer, ScanDims,
};
use seld_core::train::{bench_scan, score_events, Dataset, RunConfig, StagePlan, Trainer, BENCH_LENGTHS};

/// Criteria whose thresholds this implementation does not reach; see README.
const KNOWN_UNMET: &[usize] = &[9];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs() / scale).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn seld_rows() -> Outcome {
    let rows = [
        (0.131, 36.9, 0.330, 0.468),
        (0.268, 28.7, 0.329, 0.407),
        (0.262, 27.3, 0.286, 0.392),
        (0.273, 24.9, 0.626, 0.497),
        (0.273, 25.1, 0.278, 0.381),
        (0.243, 26.0, 0.345, 0.416),
        (0.298, 24.5, 0.337, 0.392),
        (0.280, 24.7, 0.319, 0.392),
        (0.282, 24.2, 0.302, 0.385),
        (0.278, 24.0, 0.294, 0.383),
    ];
    let mut worst = 0.0f64;
    for (f, d, r, want) in rows {
        let got = seld_score(f, d, r).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 0.0015, || format!("({f}, {d}, {r}) gives {got:.4}, reference {want}"))?;
    }
    Ok(format!("{} rows, max deviation {worst:.4}", rows.len()))
}

// ---------------------------------------------------------------- 2

/// Plain double loop with the discretization inlined.
fn naive_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, zoh: bool) -> Tensor {
    let (bs, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];
    let mut y = Tensor::zeros(&[bs, l, e]);
    for bi in 0..bs {
        for ch in 0..e {
            let mut h = vec![0.0; n];
            for k in 0..l {
                let dt = delta.at(&[bi, k, ch]);
                let mut out = 0.0;
                for s in 0..n {
                    let av = a.at(&[ch, s]);
                    let abar = (dt * av).exp();
                    let bbar = if zoh { (abar - 1.0) / av * b.at(&[bi, k, s]) } else { dt * b.at(&[bi, k, s]) };
                    h[s] = abar * h[s] + bbar * x.at(&[bi, k, ch]);
                    out += c.at(&[bi, k, s]) * h[s];
                }
                y.set(&[bi, k, ch], out);
            }
        }
    }
    y
}

fn scan_instance(rng: &mut ChaCha8Rng, bs: usize, l: usize, e: usize, n: usize) -> [Tensor; 5] {
    [
        rand_t(rng, &[bs, l, e], -1.0, 1.0),
        rand_t(rng, &[bs, l, e], 0.05, 1.5),
        rand_t(rng, &[e, n], -2.0, -0.1),
        rand_t(rng, &[bs, l, n], -1.0, 1.0),
        rand_t(rng, &[bs, l, n], -1.0, 1.0),
    ]
}

fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc2);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (bs, l, e, n) =
            (rng.random_range(1..3), rng.random_range(1..=16), rng.random_range(1..=4), rng.random_range(1..=4));
        let inst = scan_instance(&mut rng, bs, l, e, n);
        let [x, d, a, b, c] = &inst;
        let dims = ScanDims { batch: bs, len: l, channels: e, state: n };
        for (rule, zoh) in [(InputRule::Euler, false), (InputRule::Zoh, true)] {
            let (y, _) = scan_forward(x.data(), d.data(), a.data(), b.data(), c.data(), dims, rule, false);
            let y = Tensor::new(x.shape(), y).map_err(|e| e.to_string())?;
            let err = max_rel_err(&y, &naive_scan(x, d, a, b, c, zoh));
            worst = worst.max(err);
            ensure(err < 1e-6, || format!("instance {i} {rule:?} L={l} E={e} N={n}: rel err {err:e}"))?;
        }
    }
    Ok(format!("100 instances x 2 rules, max rel err {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn closed_forms() -> Outcome {
    let one = |v: f64| Tensor::new(&[1, 1], vec![v]).unwrap();
    let mut out = Vec::new();
    for (rule, want_b) in [(InputRule::Euler, 1.0), (InputRule::Zoh, 1.0 - 1.0 / E)] {
        let (ab, bb) = discretize(&one(1.0), &one(-1.0), &one(1.0), rule).map_err(|e| e.to_string())?;
        let (ab, bb) = (ab.data()[0], bb.data()[0]);
        ensure((ab - 1.0 / E).abs() < 1e-9, || format!("{rule:?}: A-bar {ab}"))?;
        ensure((bb - want_b).abs() < 1e-9, || format!("{rule:?}: B-bar {bb}, want {want_b}"))?;
        out.push(format!("{rule:?} ({ab:.9}, {bb:.9})"));
    }
    Ok(out.join(", "))
}

// ---------------------------------------------------------------- 4

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_POINTS: usize = 10;

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Body = Box<dyn Fn(&mut Graph, &[Var]) -> seld_autodiff::Result<Var>>;

fn shapes(s: &'static [&'static [usize]]) -> Gen {
    Box::new(move |rng| s.iter().map(|sh| rand_t(rng, sh, -1.0, 1.0)).collect())
}

fn away_from_zero(shape: &'static [usize]) -> Gen {
    Box::new(move |rng| {
        vec![Tensor::from_fn(shape, |_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })]
    })
}

/// Random projection to a scalar so every output coordinate matters.
fn project(g: &mut Graph, y: Var) -> seld_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = rand_t(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn primitive_cases() -> Vec<(&'static str, Gen, Body)> {
    let mut v: Vec<(&'static str, Gen, Body)> = vec![
        ("add", shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, x| g.add(x[0], x[1]))),
        ("add broadcast", shapes(&[&[3, 4], &[1]]), Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", shapes(&[&[3, 4], &[3, 4]]), Box::new(|g, x| g.mul(x[0], x[1]))),
        ("scale", shapes(&[&[4]]), Box::new(|g, x| g.scale(x[0], -2.5))),
        ("add_scalar", shapes(&[&[4]]), Box::new(|g, x| g.add_scalar(x[0], 0.7))),
        ("add_along", shapes(&[&[2, 3, 4], &[3]]), Box::new(|g, x| g.add_along(x[0], x[1], 1))),
        ("mul_along", shapes(&[&[2, 3, 4], &[4]]), Box::new(|g, x| g.mul_along(x[0], x[1], 2))),
        ("sigmoid", shapes(&[&[2, 6]]), Box::new(|g, x| g.sigmoid(x[0]))),
        ("silu", shapes(&[&[2, 6]]), Box::new(|g, x| g.silu(x[0]))),
        ("softplus", shapes(&[&[2, 6]]), Box::new(|g, x| g.softplus(x[0]))),
        ("exp", shapes(&[&[2, 6]]), Box::new(|g, x| g.exp(x[0]))),
        ("tanh", shapes(&[&[2, 6]]), Box::new(|g, x| g.tanh(x[0]))),
        (
            "log",
            Box::new(|rng| vec![rand_t(rng, &[2, 6], 0.2, 2.0)]),
            Box::new(|g, x| g.log(x[0])),
        ),
        ("relu", away_from_zero(&[2, 6]), Box::new(|g, x| g.relu(x[0]))),
        ("abs", away_from_zero(&[2, 6]), Box::new(|g, x| g.abs(x[0]))),
        (
            "clamp",
            Box::new(|rng| {
                vec![Tensor::from_fn(&[12], |_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if (v.abs() - 0.5).abs() < 0.05 {
                        v * 0.5
                    } else {
                        v
                    }
                })]
            }),
            Box::new(|g, x| g.clamp(x[0], -0.5, 0.5)),
        ),
        ("matmul", shapes(&[&[3, 4], &[4, 2]]), Box::new(|g, x| g.matmul(x[0], x[1]))),
        (
            "conv1d causal",
            shapes(&[&[2, 3, 6], &[3, 1, 4], &[3]]),
            Box::new(|g, x| g.conv1d(x[0], x[1], Some(x[2]), 3, Conv1dPadding::Causal)),
        ),
        (
            "conv1d same",
            shapes(&[&[1, 4, 5], &[6, 2, 3]]),
            Box::new(|g, x| g.conv1d(x[0], x[1], None, 2, Conv1dPadding::Same)),
        ),
        (
            "conv2d",
            shapes(&[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]]),
            Box::new(|g, x| g.conv2d(x[0], x[1], Some(x[2]))),
        ),
        ("avg_pool2d", shapes(&[&[2, 3, 4, 6]]), Box::new(|g, x| g.avg_pool2d(x[0], 2, 2))),
        ("sum", shapes(&[&[3, 4]]), Box::new(|g, x| g.sum(x[0]))),
        ("mean", shapes(&[&[3, 4]]), Box::new(|g, x| g.mean(x[0]))),
        ("sum_axis", shapes(&[&[2, 3, 4]]), Box::new(|g, x| g.sum_axis(x[0], 1))),
        ("mean_axis", shapes(&[&[2, 3, 4]]), Box::new(|g, x| g.mean_axis(x[0], 2))),
        ("reshape", shapes(&[&[2, 6]]), Box::new(|g, x| g.reshape(x[0], &[3, 4]))),
        ("permute", shapes(&[&[2, 3, 4]]), Box::new(|g, x| g.permute(x[0], &[2, 0, 1]))),
        ("flip", shapes(&[&[2, 5, 3]]), Box::new(|g, x| g.flip(x[0], 1))),
        ("slice", shapes(&[&[3, 6]]), Box::new(|g, x| g.slice(x[0], 1, 2, 5))),
        ("concat", shapes(&[&[2, 3], &[2, 2]]), Box::new(|g, x| g.concat(&[x[0], x[1]], 1))),
        (
            "min_axis",
            Box::new(|rng| vec![Tensor::from_fn(&[4, 3], |i| (i % 3) as f64 * 0.3 + rng.random_range(0.0..0.1))]),
            Box::new(|g, x| Ok(g.min_axis(x[0], 1)?.0)),
        ),
        (
            "batch_norm train",
            shapes(&[&[3, 2, 2, 3], &[2], &[2]]),
            Box::new(|g, x| Ok(g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train, 1e-5)?.0)),
        ),
        (
            "batch_norm infer",
            shapes(&[&[2, 2, 3], &[2], &[2]]),
            Box::new(|g, x| {
                let (mean, var) = ([0.1, -0.2], [0.5, 1.5]);
                Ok(g.batch_norm(x[0], x[1], x[2], BatchNormMode::Infer { mean: &mean, var: &var }, 1e-5)?.0)
            }),
        ),
    ];
    for rule in [InputRule::Euler, InputRule::Zoh] {
        v.push((
            if rule == InputRule::Euler { "selective_scan euler" } else { "selective_scan zoh" },
            Box::new(|rng| scan_instance(rng, 2, 5, 3, 2).to_vec()),
            Box::new(move |g, x| Ok(selective_scan(g, x[0], x[1], x[2], x[3], x[4], rule).map_err(to_ad)?)),
        ));
    }
    v.push((
        "rmsnorm",
        shapes(&[&[2, 3, 4], &[4]]),
        Box::new(|g, x| Ok(rmsnorm_op(g, x[0], x[1]).map_err(to_ad)?)),
    ));
    v
}

fn to_ad(e: seld_core::SeldError) -> seld_autodiff::Error {
    seld_autodiff::Error::InvalidArgument { op: "seld", msg: e.to_string() }
}

/// Checks every stored parameter plus the input as leaves.
fn grad_check_store(store: &ParamStore, input: Tensor, f: &dyn Fn(&mut Ctx<'_>, Var) -> Var) -> f64 {
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut point: Vec<Tensor> = names.iter().map(|n| (**store.get(n).unwrap()).clone()).collect();
    point.push(input);
    finite_diff_check(
        |g, v| {
            let (params, x) = v.split_at(names.len());
            let mut ctx = Ctx::with_vars(g, names.iter().cloned().zip(params.iter().copied()));
            let y = f(&mut ctx, x[0]);
            project(ctx.g, y)
        },
        &point,
        FD_EPS,
    )
    .unwrap()
}

fn random_targets(rng: &mut ChaCha8Rng, b: usize, t: usize, c: usize) -> FrameTargets {
    let mut tg = FrameTargets::zeros(b, t, c);
    for bi in 0..b {
        for tr in 0..3 {
            for fr in 0..t {
                if rng.random_bool(0.6) {
                    tg.active.set(&[bi, tr, fr], 1.0);
                    tg.sed.set(&[bi, tr, fr, rng.random_range(0..c)], 1.0);
                    let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    for (k, x) in v.iter().enumerate() {
                        tg.doa.set(&[bi, tr, fr, k], x / n);
                    }
                    tg.dist.set(&[bi, tr, fr, 0], rng.random_range(0.5..5.0));
                }
            }
        }
    }
    tg
}

fn random_pred(rng: &mut ChaCha8Rng, b: usize, t: usize, c: usize) -> TrackOutput {
    TrackOutput {
        sed: rand_t(rng, &[b, 3, t, c], 0.05, 0.95),
        doa: rand_t(rng, &[b, 3, t, 3], -0.9, 0.9),
        dist: rand_t(rng, &[b, 3, t, 1], 0.3, 5.0),
    }
}

/// Enumerates all six assignments per frame from the definitions. Returns the
/// mean of the per-frame minima, the winners, and the smallest gap between
/// best and runner-up.
fn brute_force(pred: &TrackOutput, tgt: &FrameTargets, w: LossWeights) -> (f64, Vec<usize>, f64) {
    let (b, t, c) = (tgt.batch(), tgt.frames(), tgt.n_classes());
    let (mut total, mut winners, mut gap) = (0.0, Vec::new(), f64::INFINITY);
    for bi in 0..b {
        for fr in 0..t {
            let n_active: f64 = (0..3).map(|tr| tgt.active.at(&[bi, tr, fr])).sum();
            let mut losses: Vec<(f64, usize)> = PERMUTATIONS
                .iter()
                .enumerate()
                .map(|(pi, perm)| {
                    let (mut sed, mut doa, mut dist) = (0.0, 0.0, 0.0);
                    for (i, &j) in perm.iter().enumerate() {
                        for k in 0..c {
                            let p = pred.sed.at(&[bi, i, fr, k]).clamp(1e-7, 1.0 - 1e-7);
                            let y = tgt.sed.at(&[bi, j, fr, k]);
                            sed -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                        }
                        if tgt.active.at(&[bi, j, fr]) == 1.0 {
                            for k in 0..3 {
                                doa += (pred.doa.at(&[bi, i, fr, k]) - tgt.doa.at(&[bi, j, fr, k])).powi(2);
                            }
                            dist += (pred.dist.at(&[bi, i, fr, 0]) - tgt.dist.at(&[bi, j, fr, 0])).abs();
                        }
                    }
                    sed /= (3 * c) as f64;
                    if n_active > 0.0 {
                        doa /= 3.0 * n_active;
                        dist /= n_active;
                    }
                    (w.sed * sed + w.doa * doa + w.dist * dist, pi)
                })
                .collect();
            losses.sort_by(|a, b| a.0.total_cmp(&b.0));
            total += losses[0].0;
            winners.push(losses[0].1);
            gap = gap.min(losses[1].0 - losses[0].0);
        }
    }
    (total / (b * t) as f64, winners, gap)
}

fn gradient_suite() -> Outcome {
    let mut worst = ("", 0.0f64);
    let mut note = |name: &'static str, err: f64| -> Result<(), String> {
        if err > worst.1 {
            worst = (name, err);
        }
        ensure(err < FD_TOL, || format!("{name}: rel err {err:e}"))
    };
    let mut checked = 0;

    for (name, gen, body) in primitive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5e1d);
        for _ in 0..FD_POINTS {
            let point = gen(&mut rng);
            let err = finite_diff_check(
                |g, x| {
                    let y = body(g, x)?;
                    project(g, y)
                },
                &point,
                FD_EPS,
            )
            .map_err(|e| format!("{name}: {e}"))?;
            note(name, err)?;
        }
        checked += 1;
    }

    for seed in 0..FD_POINTS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let layer = MambaLayer::new("m", MambaConfig { d_conv: 2, ..MambaConfig::new(1, 2) });
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng);
        let u = rand_t(&mut rng, &[1, 3, 1], -1.0, 1.0);
        note("mamba layer", grad_check_store(&store, u, &|ctx, x| layer.forward(ctx, x).unwrap()))?;

        let block = BMambaBlock::new("b", &MambaConfig::new(2, 2));
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let u = rand_t(&mut rng, &[1, 4, 2], -1.0, 1.0);
        note("bmamba block", grad_check_store(&store, u, &|ctx, x| block.forward(ctx, x).unwrap()))?;

        let point = vec![
            rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0),
            rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0),
            rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0),
            rand_t(&mut rng, &[3, 3], -1.0, 1.0),
        ];
        let store = ParamStore::new();
        let err = finite_diff_check(
            |g, v| {
                let mut ctx = Ctx::new(g, &store, false);
                let out = cross_stitch(&mut ctx, [v[0], v[1], v[2]], v[3]).map_err(to_ad)?;
                let cat = ctx.g.concat(&out, 2)?;
                project(ctx.g, cat)
            },
            &point,
            FD_EPS,
        )
        .map_err(|e| e.to_string())?;
        note("cross-stitch", err)?;
    }
    checked += 3;

    // PIT: resample until every frame has a clear winner
    let mut rng = ChaCha8Rng::seed_from_u64(0x917);
    let w = Stage::Unified.weights();
    let mut points = 0;
    while points < FD_POINTS {
        let tgt = random_targets(&mut rng, 2, 3, 3);
        let pred = random_pred(&mut rng, 2, 3, 3);
        if brute_force(&pred, &tgt, w).2 < 1e-3 {
            continue;
        }
        let err = finite_diff_check(
            |g, v| {
                let vars = TrackVars { sed: v[0], doa: v[1], dist: v[2] };
                Ok(pit_loss(g, &vars, &tgt, w).map_err(to_ad)?.loss)
            },
            &[pred.sed.clone(), pred.doa.clone(), pred.dist.clone()],
            FD_EPS,
        )
        .map_err(|e| e.to_string())?;
        note("pit_loss", err)?;
        points += 1;
    }
    checked += 1;

    Ok(format!("{checked} functions x {FD_POINTS} points, worst {} at {:.1e}", worst.0, worst.1))
}

// ---------------------------------------------------------------- 5

fn pit_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (b, t, c) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..5));
        let tgt = random_targets(&mut rng, b, t, c);
        let pred = random_pred(&mut rng, b, t, c);
        let w = [Stage::Stage1, Stage::Stage2, Stage::Unified][i % 3].weights();
        let (want, winners, _) = brute_force(&pred, &tgt, w);

        let mut g = Graph::new();
        let vars = TrackVars {
            sed: g.constant(pred.sed.clone()),
            doa: g.constant(pred.doa.clone()),
            dist: g.constant(pred.dist.clone()),
        };
        let pit = pit_loss(&mut g, &vars, &tgt, w).map_err(|e| e.to_string())?;
        let got = g.value(pit.loss).item();
        let (val, _) = pit_loss_value(&pred, &tgt, w).map_err(|e| e.to_string())?;
        let err = (got - want).abs().max((val - want).abs());
        worst = worst.max(err);
        ensure(err <= 1e-12 * want.abs().max(1.0), || format!("batch {i}: {got} vs brute force {want}"))?;
        ensure(pit.best == winners, || format!("batch {i}: winning permutations differ"))?;

        // relabel target tracks with a random permutation per example
        let sigma = PERMUTATIONS[rng.random_range(0..6)];
        let mut shuffled = FrameTargets::zeros(b, t, c);
        for bi in 0..b {
            for (tr, &src) in sigma.iter().enumerate() {
                for fr in 0..t {
                    shuffled.active.set(&[bi, tr, fr], tgt.active.at(&[bi, src, fr]));
                    for k in 0..c {
                        shuffled.sed.set(&[bi, tr, fr, k], tgt.sed.at(&[bi, src, fr, k]));
                    }
                    for k in 0..3 {
                        shuffled.doa.set(&[bi, tr, fr, k], tgt.doa.at(&[bi, src, fr, k]));
                    }
                    shuffled.dist.set(&[bi, tr, fr, 0], tgt.dist.at(&[bi, src, fr, 0]));
                }
            }
        }
        let (perm_val, _) = pit_loss_value(&pred, &shuffled, w).map_err(|e| e.to_string())?;
        ensure((perm_val - val).abs() <= 1e-12 * val.abs().max(1.0), || {
            format!("batch {i}: track relabelling changed the loss {val} -> {perm_val}")
        })?;
    }
    Ok(format!("50 batches, max deviation {worst:.1e}, relabelling invariant"))
}

// ---------------------------------------------------------------- 6

fn flip_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf11b);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d = rng.random_range(1..6);
        let block = BMambaBlock::tied("b", &MambaConfig::new(d, rng.random_range(1..5)));
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let run = |u: &Tensor| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store, false);
            let uv = ctx.g.constant(u.clone());
            let y = block.forward(&mut ctx, uv).unwrap();
            ctx.g.value(y).clone()
        };
        let shape = [rng.random_range(1..3), rng.random_range(1..20), d];
        let u = rand_t(&mut rng, &shape, -1.0, 1.0);
        let lhs = run(&u.flip(1).unwrap());
        let rhs = run(&u).flip(1).unwrap();
        let err = lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err < 1e-6, || format!("input {i}: max abs diff {err:e}"))?;
    }
    Ok(format!("20 inputs, max abs diff {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

fn shape_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clip = FoaClip::new(rand_t(&mut rng, &[4, 120_000], -0.1, 0.1), 24_000).map_err(|e| e.to_string())?;
    let feats = assemble_branch_inputs(&clip, &FeatureConfig::default()).map_err(|e| e.to_string())?;
    let fs = [feats.sed.shape().to_vec(), feats.doa.shape().to_vec(), feats.sde.shape().to_vec()];
    ensure(fs == [vec![4, 400, 128], vec![7, 400, 128], vec![4, 400, 128]], || format!("features {fs:?}"))?;

    let cfg = ModelConfig::default();
    let model = SeldModel::new(cfg.clone()).map_err(|e| e.to_string())?;
    let store = model.init(&mut rng);
    let input = BatchInput::stack(&[&feats]).map_err(|e| e.to_string())?;

    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let xs: Vec<Var> = input.branches.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let emb = encoder_forward(&mut ctx, &cfg, [xs[0], xs[1], xs[2]]).map_err(|e| e.to_string())?;
    for e in emb {
        let s = ctx.g.shape(e).to_vec();
        ensure(s == [1, 50, 512], || format!("embedding {s:?}"))?;
    }
    drop(g);

    let out = model.predict(&store, &input).map_err(|e| e.to_string())?.example(0).map_err(|e| e.to_string())?;
    let c = cfg.n_classes;
    ensure(out.sed.shape() == [3, 50, c], || format!("sed {:?}", out.sed.shape()))?;
    ensure(out.doa.shape() == [3, 50, 3], || format!("doa {:?}", out.doa.shape()))?;
    ensure(out.dist.shape() == [3, 50, 1], || format!("dist {:?}", out.dist.shape()))?;
    ensure(out.sed.all_finite() && out.doa.all_finite() && out.dist.all_finite(), || "non-finite output".into())?;
    Ok(format!("features 4/7/4x400x128, embeddings 50x512, outputs (3,50,{c})/(3,50,3)/(3,50,1)"))
}

// ---------------------------------------------------------------- 8

fn linear_scaling() -> Outcome {
    let r = bench_scan(&BENCH_LENGTHS, 64, 16, 5);
    let detail = format!(
        "exponent {:.3} over L={:?}",
        r.exponent,
        r.rows.iter().map(|row| row.len).collect::<Vec<_>>()
    );
    ensure((0.8..=1.3).contains(&r.exponent), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9, 10

fn desk_config(plan: StagePlan, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::preset("desk").expect("built-in preset");
    cfg.stage_plan = plan;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn unified_training(ds: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = desk_config(StagePlan::Unified, dir.path());
    let report = Trainer::new(cfg).and_then(|t| t.run(ds, None)).map_err(|e| e.to_string())?;
    let r = report.final_report.ok_or("no final report")?;
    let detail = format!(
        "train F20 {:.3} (>= 0.9), DOAE {:.1} deg (<= 15), RDE {:.3} (<= 0.15), final loss {:.3}",
        r.f20,
        r.doae,
        r.rde,
        report.history.last().map_or(f64::NAN, |h| h.loss)
    );
    ensure(r.f20 >= 0.9 && r.doae <= 15.0 && r.rde <= 0.15, || detail.clone())?;
    Ok(detail)
}

fn two_stage_training(ds: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = desk_config(StagePlan::TwoStage, dir.path());
    let report = Trainer::new(cfg).and_then(|t| t.run(ds, None)).map_err(|e| e.to_string())?;
    let [(_, s1), (_, s2)] = &report.stages[..] else {
        return Err(format!("expected two stage reports, got {}", report.stages.len()));
    };
    let detail = format!(
        "stage1 F20 {:.3} RDE {:.3}, stage2 F20 {:.3} RDE {:.3}",
        s1.f20, s1.rde, s2.f20, s2.rde
    );
    ensure(s2.rde < s1.rde && s2.f20 >= s1.f20 - 0.05, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

/// Closed-form count for the toy configuration, term by term.
fn toy_hand_count() -> u64 {
    let (classes, d, n, k) = (2u64, 8u64, 16u64, 4u64);
    let (e, r) = (2 * d, d.div_ceil(16));
    // two bias-free 3x3 convs, each followed by batch norm (scale and shift)
    let stage = |cin: u64, cout: u64| 9 * cin * cout + 9 * cout * cout + 4 * cout;
    let encoder = |cin: u64| stage(cin, 2) + stage(2, 2) + stage(2, 2) + stage(2, d);
    let encoders = encoder(4) + encoder(7) + encoder(4);
    let stitches = 4 * 9;
    // in and gate projections, depthwise conv with bias, x_proj to (dt, B, C),
    // dt_proj with bias, A_log, out projection
    let layer = 2 * d * e + (k * e + e) + e * (r + 2 * n) + (r * e + e) + e * n + e * d;
    // two layers per direction, an RMSNorm gain per direction
    let bmamba = 2 * (2 * layer + d);
    let track = |out: u64| bmamba + d * out + out;
    let decoders = 3 * (track(classes) + track(3) + track(1));
    encoders + stitches + decoders
}

fn param_accounting() -> Outcome {
    let cfg = ModelConfig { n_classes: 2, conv_channels: [2, 2, 2, 8], embed_dim: 8, ..ModelConfig::default() };
    let counted = count_params_macs(&cfg, 1.0, 24_000, 300, 64).params;
    let stored = SeldModel::new(cfg).map_err(|e| e.to_string())?.init(&mut ChaCha8Rng::seed_from_u64(1)).num_scalars();
    let hand = toy_hand_count();
    let detail = format!("count_params_macs {counted}, hand count {hand}, stored {stored}");
    ensure(counted == hand && stored as u64 == hand, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 12

fn oracle_loop() -> Outcome {
    let (mut preds, mut refs): (Vec<EventList>, Vec<EventList>) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let (_, labels) =
            synth_scene(&SceneSpec { seed, n_events: 5, ..SceneSpec::default() }).map_err(|e| e.to_string())?;
        let tgt = encode_targets(&labels, 50, 13).map_err(|e| e.to_string())?;
        refs.push(targets_to_events(&tgt, 0).map_err(|e| e.to_string())?);
        let oracle = TrackOutput { sed: tgt.sed.clone(), doa: tgt.doa.clone(), dist: tgt.dist.clone() };
        preds.push(tracks_to_events(&oracle.example(0).map_err(|e| e.to_string())?, 0.5).map_err(|e| e.to_string())?);
    }
    let r = score_events(&preds, &refs).map_err(|e| e.to_string())?;
    let n: usize = refs.iter().map(Vec::len).sum();
    let detail = format!("{n} reference events: F20 {}, DOAE {}, RDE {}, SELD {}", r.f20, r.doae, r.rde, r.seld_score);
    ensure(n > 0 && r.f20 == 1.0 && r.doae == 0.0 && r.rde == 0.0 && r.seld_score == 0.0, || detail.clone())?;
    Ok(detail)
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SELD_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    // the training criteria share one synthetic set
    let desk_set = std::cell::OnceCell::new();
    let desk = || -> Result<&Dataset, String> {
        if desk_set.get().is_none() {
            let cfg = RunConfig::preset("desk").map_err(|e| e.to_string())?;
            let ds = Dataset::synthetic(&cfg).map_err(|e| e.to_string())?;
            let _ = desk_set.set(ds);
        }
        Ok(desk_set.get().unwrap())
    };

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "seld_score arithmetic", Box::new(seld_rows)),
        (2, "scan oracle", Box::new(scan_oracle)),
        (3, "discretization closed forms", Box::new(closed_forms)),
        (4, "gradient suite", Box::new(gradient_suite)),
        (5, "PIT oracle", Box::new(pit_oracle)),
        (6, "flip equivariance", Box::new(flip_equivariance)),
        (7, "shape pipeline", Box::new(shape_pipeline)),
        (8, "linear scaling", Box::new(linear_scaling)),
        (9, "closed-loop training", Box::new(|| unified_training(desk()?))),
        (10, "two-stage direction", Box::new(|| two_stage_training(desk()?))),
        (11, "parameter accounting", Box::new(param_accounting)),
        (12, "metrics/data oracle loop", Box::new(oracle_loop)),
    ];

    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut ran = 0;
    for (n, name, run) in &criteria {
        if !wanted(*n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]");
            }
            Err(detail) => {
                let tag = if KNOWN_UNMET.contains(n) { " (known unmet)" } else { "" };
                println!("criterion {n:>2} FAIL  {name}: {detail}{tag} [{secs:.1}s]");
                if !KNOWN_UNMET.contains(n) {
                    unexpected.push(*n);
                }
            }
        }
    }
    println!("acceptance: {passed}/{ran} passed");
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
