//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use psat::attacks::{project_into, steepest_step_into, Norm};
use psat::backbone::{build_plan, BackbonePlan, LayerSpec, Mode, PlanDescription, UnitShape};
use psat::hypernet::{generate_layer_on_tape, HypernetConfig, KernelReduction};
use psat::model::Member;
use psat::tape::{BlockLayout, Tape, Var};
use psat::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
/// Finite-difference coordinates sampled per tensor when it is larger.
pub const FD_MAX_COORDS: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks sit far from every probe.
pub fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise-distinct values on a 0.01 grid, so max-type ops have no near ties.
pub fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Normwise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)` between
/// analytic and numeric gradients restricted to the probed coordinates.
/// The floor keeps all-but-zero gradients from amplifying rounding noise.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nn).max(1e-4)
}

pub struct FdOutcome {
    /// Worst per-tensor relative error of the analytic gradient.
    pub err: f64,
    /// Worst relative disagreement between central differences at steps h
    /// and h/2. Large values mean a kink lies inside the stencil and the
    /// differences are not a valid oracle at this point.
    pub stencil: f64,
}

/// Central differences of `f` around `inputs` against `analytic`, on all
/// coordinates of small tensors and a random sample of larger ones.
pub fn fd_compare(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    r: &mut ChaCha8Rng,
) -> FdOutcome {
    assert_eq!(inputs.len(), analytic.len());
    let mut out = FdOutcome { err: 0.0, stencil: 0.0 };
    let mut probe = inputs.to_vec();
    let central = |probe: &mut Vec<Tensor<f64>>, k: usize, j: usize, h: f64| {
        let x = probe[k].data()[j];
        probe[k].data_mut()[j] = x + h;
        let fp = f(probe);
        probe[k].data_mut()[j] = x - h;
        let fm = f(probe);
        probe[k].data_mut()[j] = x;
        (fp - fm) / (2.0 * h)
    };
    for k in 0..inputs.len() {
        assert_eq!(inputs[k].shape(), analytic[k].shape(), "gradient shape for input {k}");
        let len = inputs[k].len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > FD_MAX_COORDS {
            coords.shuffle(r);
            coords.truncate(FD_MAX_COORDS);
        }
        let (mut a, mut n, mut half) = (Vec::new(), Vec::new(), Vec::new());
        for &j in &coords {
            a.push(analytic[k].data()[j]);
            n.push(central(&mut probe, k, j, FD_STEP));
            half.push(central(&mut probe, k, j, FD_STEP / 2.0));
        }
        out.err = out.err.max(rel_err(&a, &n));
        out.stencil = out.stencil.max(rel_err(&half, &n));
    }
    out
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> psat::Result<Var>;

/// Checks reverse-mode gradients of the scalar produced by `build` w.r.t.
/// every input.
pub fn check_op(inputs: &[Tensor<f64>], build: &Build, r: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).expect("build");
    assert!(tape.value(out).is_scalar(), "loss must be scalar");
    let grads = tape.backward(out).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let o = build(&mut t, &vs).expect("build");
        t.value(o).item().unwrap()
    };
    let o = fd_compare(inputs, &analytic, &eval, r);
    assert!(o.stencil < FD_TOL, "op instance is not smooth at the finite-difference scale");
    o.err
}

/// `Σ out ⊙ w` with a fixed weight tensor, turning any output into a scalar.
pub fn project_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> psat::Result<Var> {
    let wv = tape.constant(w.clone());
    let m = tape.mul(out, wv)?;
    tape.sum(m)
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

fn weighted(f: impl Fn(&mut Tape<f64>, &[Var]) -> psat::Result<Var> + 'static, w: Tensor<f64>) -> Box<Build> {
    Box::new(move |t, v| {
        let out = f(t, v)?;
        project_sum(t, out, &w)
    })
}

/// One randomized small instance of every differentiable tape op.
pub fn op_cases(r: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    cases.push(OpCase {
        name: "matmul",
        inputs: vec![uniform(&[m, k], -1.0, 1.0, r), uniform(&[k, n], -1.0, 1.0, r)],
        build: weighted(|t, v| t.matmul(v[0], v[1]), uniform(&[m, n], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "transpose",
        inputs: vec![uniform(&[m, k], -1.0, 1.0, r)],
        build: weighted(|t, v| t.transpose(v[0]), uniform(&[k, m], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "add_row_bias",
        inputs: vec![uniform(&[m, n], -1.0, 1.0, r), uniform(&[n], -1.0, 1.0, r)],
        build: weighted(|t, v| t.add_row_bias(v[0], v[1]), uniform(&[m, n], -1.0, 1.0, r)),
    });
    let (b, c, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..5), r.gen_range(2..5));
    cases.push(OpCase {
        name: "add_channel_bias",
        inputs: vec![uniform(&[b, c, h, w], -1.0, 1.0, r), uniform(&[c], -1.0, 1.0, r)],
        build: weighted(|t, v| t.add_channel_bias(v[0], v[1]), uniform(&[b, c, h, w], -1.0, 1.0, r)),
    });
    let kk = [1usize, 3][r.gen_range(0..2)];
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..2);
    let (hh, ww) = (r.gen_range(kk.max(2)..6), r.gen_range(kk.max(2)..6));
    let co = r.gen_range(1..4);
    let oh = (hh + 2 * pad - kk) / stride + 1;
    let ow = (ww + 2 * pad - kk) / stride + 1;
    cases.push(OpCase {
        name: "conv2d",
        inputs: vec![uniform(&[b, c, hh, ww], -1.0, 1.0, r), uniform(&[co, c, kk, kk], -1.0, 1.0, r)],
        build: weighted(move |t, v| t.conv2d(v[0], v[1], stride, pad), uniform(&[b, co, oh, ow], -1.0, 1.0, r)),
    });
    let bn_b = r.gen_range(2..4);
    cases.push(OpCase {
        name: "batch_norm(train)",
        inputs: vec![uniform(&[bn_b, c, h, w], -1.0, 1.0, r), uniform(&[c], 0.5, 1.5, r), uniform(&[c], -0.5, 0.5, r)],
        build: weighted(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], None)?.0), uniform(&[bn_b, c, h, w], -1.0, 1.0, r)),
    });
    let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    cases.push(OpCase {
        name: "batch_norm(eval)",
        inputs: vec![uniform(&[b, c, h, w], -1.0, 1.0, r), uniform(&[c], 0.5, 1.5, r), uniform(&[c], -0.5, 0.5, r)],
        build: weighted(
            move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)))?.0),
            uniform(&[b, c, h, w], -1.0, 1.0, r),
        ),
    });
    cases.push(OpCase {
        name: "relu",
        inputs: vec![away_from_zero(&[m, n], r)],
        build: weighted(|t, v| t.relu(v[0]), uniform(&[m, n], -1.0, 1.0, r)),
    });
    let win = r.gen_range(1..3);
    let ps = r.gen_range(1..3);
    let (ph, pw) = (r.gen_range(win..6), r.gen_range(win..6));
    let (poh, pow) = ((ph - win) / ps + 1, (pw - win) / ps + 1);
    cases.push(OpCase {
        name: "max_pool",
        inputs: vec![distinct(&[b, c, ph, pw], r)],
        build: weighted(move |t, v| t.max_pool(v[0], win, ps), uniform(&[b, c, poh, pow], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "avg_pool",
        inputs: vec![uniform(&[b, c, ph, pw], -1.0, 1.0, r)],
        build: weighted(move |t, v| t.avg_pool(v[0], win, ps), uniform(&[b, c, poh, pow], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "reshape",
        inputs: vec![uniform(&[b, c, h, w], -1.0, 1.0, r)],
        build: weighted(move |t, v| t.reshape(v[0], &[b, c * h * w]), uniform(&[b, c * h * w], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "add",
        inputs: vec![uniform(&[m, n], -1.0, 1.0, r), uniform(&[m, n], -1.0, 1.0, r)],
        build: weighted(|t, v| t.add(v[0], v[1]), uniform(&[m, n], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "mul",
        inputs: vec![uniform(&[m, n], -1.0, 1.0, r), uniform(&[m, n], -1.0, 1.0, r)],
        build: weighted(|t, v| t.mul(v[0], v[1]), uniform(&[m, n], -1.0, 1.0, r)),
    });
    let s = r.gen_range(-2.0..2.0);
    cases.push(OpCase {
        name: "scale",
        inputs: vec![uniform(&[m, n], -1.0, 1.0, r)],
        build: weighted(move |t, v| t.scale(v[0], s), uniform(&[m, n], -1.0, 1.0, r)),
    });
    cases.push(OpCase {
        name: "sum",
        inputs: vec![uniform(&[m, n], -1.0, 1.0, r)],
        build: Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }),
    });
    let cls = r.gen_range(2..5);
    cases.push(OpCase {
        name: "softmax",
        inputs: vec![uniform(&[m, cls], -3.0, 3.0, r)],
        build: weighted(|t, v| t.softmax(v[0]), uniform(&[m, cls], -1.0, 1.0, r)),
    });
    let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..cls)).collect();
    let l2 = labels.clone();
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![uniform(&[m, cls], -3.0, 3.0, r)],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
    });
    cases.push(OpCase {
        name: "nll_of_probs",
        inputs: vec![uniform(&[m, cls], -3.0, 3.0, r)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            t.nll_of_probs(p, &l2)
        }),
    });
    for reduction in [KernelReduction::Mean, KernelReduction::Max, KernelReduction::Sum] {
        let cu = r.gen_range(1..3);
        let (bo, bi) = (r.gen_range(1..3), r.gen_range(1..3));
        let k = if reduction == KernelReduction::Mean && r.gen_bool(0.5) { 3 } else { 1 };
        let layout = BlockLayout { c_out: bo * cu, c_in: bi * cu, k, unit_channels: cu, unit_kernel: 3, reduction };
        let name = match reduction {
            KernelReduction::Mean => "assemble_blocks(mean)",
            KernelReduction::Max => "assemble_blocks(max)",
            KernelReduction::Sum => "assemble_blocks(sum)",
        };
        cases.push(OpCase {
            name,
            inputs: vec![distinct(&[bo * bi, cu * cu * 9], r)],
            build: weighted(move |t, v| t.assemble_blocks(v[0], layout), uniform(&[bo * cu, bi * cu, k, k], -1.0, 1.0, r)),
        });
    }
    let (nz, dh, cu) = (r.gen_range(1..4), r.gen_range(1..4), 2);
    let (bo, bi) = (r.gen_range(1..3), r.gen_range(1..3));
    let layer = LayerSpec::Conv { c_in: bi * cu, c_out: bo * cu, k: 3, stride: 1, padding: 1, generated: true };
    cases.push(OpCase {
        name: "generate_layer",
        inputs: vec![
            uniform(&[dh, nz], -1.0, 1.0, r),
            uniform(&[dh], -1.0, 1.0, r),
            uniform(&[dh, cu * cu * 9], -1.0, 1.0, r),
            uniform(&[cu * cu * 9], -1.0, 1.0, r),
            uniform(&[bo * bi, nz], -1.0, 1.0, r),
        ],
        build: weighted(
            move |t, v| {
                let hv = psat::hypernet::HyperVars { w_in: v[0], b_in: v[1], w_out: v[2], b_out: v[3] };
                generate_layer_on_tape(t, &hv, v[4], &layer, UnitShape::new(cu, 3), KernelReduction::Mean)
            },
            uniform(&[bo * cu, bi * cu, 3, 3], -1.0, 1.0, r),
        ),
    });
    cases
}

/// Plan exercising every layer kind, with one 3×3 and one 1×1 generated conv.
pub fn composition_plan() -> BackbonePlan {
    let desc = PlanDescription {
        input_shape: [1, 6, 6],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv { c_in: 1, c_out: 4, k: 3, stride: 1, padding: 1, generated: false },
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu {},
            LayerSpec::Conv { c_in: 4, c_out: 4, k: 3, stride: 1, padding: 1, generated: true },
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Add { from: 2 },
            LayerSpec::Relu {},
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv { c_in: 4, c_out: 8, k: 1, stride: 1, padding: 0, generated: true },
            LayerSpec::Relu {},
            LayerSpec::AvgPool { window: 3, stride: 3 },
            LayerSpec::Fc { in_features: 8, out_features: 3, generated: false },
        ],
    };
    build_plan(desc, UnitShape::new(2, 3)).unwrap()
}

/// `cross_entropy ∘ forward ∘ generate_all` w.r.t. every trainable tensor
/// of a hypernetwork member, batch-norm in train mode. `None` when a ReLU or
/// max-pool kink falls inside the difference stencil.
pub fn check_composition(seed: u64, r: &mut ChaCha8Rng) -> Option<f64> {
    let plan = composition_plan();
    let cfg = HypernetConfig { hidden_dim: Some(3), ..HypernetConfig::new(2, 2, 3) };
    let mut member = Member::<f64>::hyper(&plan, &cfg, seed).unwrap();
    for t in member.trainable_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let x = uniform(&[4, 1, 6, 6], 0.0, 1.0, r);
    let y: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    let loss_of = |m: &Member<f64>, tape: &mut Tape<f64>| {
        let bound = m.bind(tape, &plan, true).unwrap();
        let xv = tape.constant(x.clone());
        let out = m.forward(tape, &plan, &bound, xv, Mode::Train).unwrap();
        let l = tape.cross_entropy(out.logits, &y).unwrap();
        (bound, l)
    };
    let mut tape = Tape::new();
    let (bound, l) = loss_of(&member, &mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> = bound.leaves.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let inputs: Vec<Tensor<f64>> = member.trainable().into_iter().cloned().collect();
    let template = member.clone();
    let eval = |xs: &[Tensor<f64>]| {
        let mut m = template.clone();
        for (dst, src) in m.trainable_mut().into_iter().zip(xs) {
            *dst = src.clone();
        }
        let mut t = Tape::new();
        let (_, l) = loss_of(&m, &mut t);
        t.value(l).item().unwrap()
    };
    let o = fd_compare(&inputs, &analytic, &eval, r);
    (o.stencil < FD_TOL).then_some(o.err)
}

pub struct GradientReport {
    /// Worst relative error per check over `trials` instances each.
    pub worst: Vec<(String, f64)>,
    /// Composition instances redrawn because a kink sat inside the stencil.
    pub redrawn: usize,
}

/// Composition error over `trials` smooth instances, redrawing the others.
pub fn composition_suite(trials: usize, seed: u64, r: &mut ChaCha8Rng) -> (f64, usize) {
    let (mut worst, mut redrawn, mut done): (f64, usize, usize) = (0.0, 0, 0);
    let mut s = seed;
    while done < trials {
        match check_composition(s, r) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => redrawn += 1,
        }
        s = s.wrapping_add(1);
        assert!(redrawn <= trials, "too many non-smooth instances");
    }
    (worst, redrawn)
}

pub fn gradient_suite(trials: usize, seed: u64) -> GradientReport {
    let mut r = rng(seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for _ in 0..trials {
        for case in op_cases(&mut r) {
            let e = check_op(&case.inputs, &case.build, &mut r);
            match worst.iter_mut().find(|(n, _)| n == case.name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((case.name.to_string(), e)),
            }
        }
    }
    let (comp, redrawn) = composition_suite(trials, seed, &mut r);
    worst.push(("cross_entropy∘forward∘generate_all".into(), comp));
    GradientReport { worst, redrawn }
}

pub fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Inf => v.iter().fold(0.0, |a, x| a.max(x.abs())),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
    }
}

/// Euclidean projection onto the ℓ1 ball by enumerating supports: on each
/// support S the KKT point is a uniform soft-threshold at
/// λ = (Σ_S |ω| − ε)/|S|; the nearest valid candidate is the projection.
pub fn l1_projection_bruteforce(w: &[f64], eps: f64) -> Vec<f64> {
    if norm_of(w, Norm::L1) <= eps {
        return w.to_vec();
    }
    let d = w.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let s: Vec<usize> = (0..d).filter(|j| mask >> j & 1 == 1).collect();
        let lam = (s.iter().map(|&j| w[j].abs()).sum::<f64>() - eps) / s.len() as f64;
        if lam < 0.0 || s.iter().any(|&j| w[j].abs() < lam) {
            continue;
        }
        if (0..d).any(|j| mask >> j & 1 == 0 && w[j].abs() > lam) {
            continue;
        }
        let mut x = vec![0.0; d];
        for &j in &s {
            x[j] = w[j].signum() * (w[j].abs() - lam);
        }
        let dist: f64 = x.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
            best = Some((dist, x));
        }
    }
    best.expect("some support is valid").1
}

pub struct ProjectionReport {
    pub l1_oracle_worst: f64,
    pub idempotence_worst: f64,
    pub feasibility_worst: f64,
}

/// ℓ1 oracle agreement on `oracle_cases` vectors plus idempotence and
/// feasibility of every norm on `random_cases` inputs.
pub fn projection_suite(oracle_cases: usize, random_cases: usize, seed: u64) -> ProjectionReport {
    let mut r = rng(seed);
    let mut l1_oracle_worst: f64 = 0.0;
    for _ in 0..oracle_cases {
        let d = r.gen_range(1..=8);
        let scale = r.gen_range(0.1..5.0);
        let w: Vec<f64> = (0..d).map(|_| r.gen_range(-scale..scale)).collect();
        let eps = r.gen_range(0.05..3.0);
        let mut mine = w.clone();
        project_into(&mut mine, Norm::L1, eps);
        let oracle = l1_projection_bruteforce(&w, eps);
        let err = mine.iter().zip(&oracle).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        l1_oracle_worst = l1_oracle_worst.max(err);
    }
    let (mut idempotence_worst, mut feasibility_worst): (f64, f64) = (0.0, 0.0);
    for i in 0..random_cases {
        let norm = Norm::ALL[i % 3];
        let d = r.gen_range(1..=64);
        let scale = 10f64.powf(r.gen_range(-2.0..1.5));
        let w: Vec<f64> = (0..d).map(|_| r.gen_range(-scale..scale)).collect();
        let eps = 10f64.powf(r.gen_range(-2.0..1.0));
        let mut p = w.clone();
        project_into(&mut p, norm, eps);
        let mut pp = p.clone();
        project_into(&mut pp, norm, eps);
        let idem = p.iter().zip(&pp).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        idempotence_worst = idempotence_worst.max(idem);
        feasibility_worst = feasibility_worst.max((norm_of(&p, norm) - eps) / eps);
    }
    ProjectionReport { l1_oracle_worst, idempotence_worst, feasibility_worst }
}

/// Random direction of norm at most `alpha`.
pub fn random_feasible(d: usize, norm: Norm, alpha: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let n = norm_of(&v, norm).max(1e-300);
    let radius = alpha * r.gen_range(0.0f64..=1.0).powf(0.25);
    v.iter().map(|x| x * radius / n).collect()
}

/// For each norm: the largest margin by which a random feasible direction
/// beat the returned step's `v·g` (≤ 0 is a pass), and the worst step-norm excess.
pub fn steepest_suite(gradients: usize, directions: usize, seed: u64) -> Vec<(Norm, f64, f64)> {
    let mut r = rng(seed);
    Norm::ALL
        .iter()
        .map(|&norm| {
            let (mut beat, mut excess): (f64, f64) = (f64::NEG_INFINITY, 0.0);
            for _ in 0..gradients {
                let d = r.gen_range(1..=16);
                let g: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
                let alpha = r.gen_range(0.01..2.0);
                let mut v = vec![0.0; d];
                steepest_step_into(&g, norm, alpha, 1, &mut v);
                excess = excess.max(norm_of(&v, norm) - alpha);
                let best: f64 = v.iter().zip(&g).map(|(a, b)| a * b).sum();
                for _ in 0..directions {
                    let u = random_feasible(d, norm, alpha, &mut r);
                    let s: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
                    beat = beat.max(s - best);
                }
            }
            (norm, beat, excess)
        })
        .collect()
}

/// Published benchmark rows: six printed metric columns and the printed trade-off.
pub const PUBLISHED_ROWS: &[(&str, [f64; 6], f64)] = &[
    ("CIFAR-10 NAT", [92.82, 0.00, 0.32, 0.11, 0.00, 0.14], 15.57),
    ("CIFAR-10 AT_inf", [84.86, 42.80, 53.97, 25.29, 24.23, 40.66], 45.30),
    ("CIFAR-10 AT_2", [87.18, 27.84, 63.96, 52.76, 26.85, 48.18], 51.13),
    ("CIFAR-10 AT_1", [90.32, 0.59, 1.46, 78.11, 0.00, 26.72], 32.87),
    ("CIFAR-10 AT_max", [82.54, 39.74, 62.46, 56.10, 39.26, 52.77], 55.48),
    ("CIFAR-10 AT_avg", [84.20, 34.12, 62.75, 60.42, 34.09, 52.45], 54.67),
    ("CIFAR-10 AT_msd", [79.08, 42.01, 60.89, 53.48, 42.22, 52.11], 54.97),
    ("CIFAR-10 AT_mng", [77.92, 41.40, 62.64, 62.30, 41.31, 55.46], 56.84),
    ("CIFAR-10 PSAT", [82.28, 40.33, 60.28, 68.13, 40.78, 56.32], 58.02),
    ("SVHN NAT", [95.95, 0.00, 3.81, 4.26, 0.00, 2.69], 17.79),
    ("SVHN AT_inf", [92.60, 44.62, 32.93, 12.26, 10.18, 29.92], 37.09),
    ("SVHN AT_2", [92.86, 23.44, 63.38, 45.86, 21.48, 43.17], 48.37),
    ("SVHN AT_1", [92.21, 0.12, 0.00, 75.03, 0.00, 25.08], 32.07),
    ("SVHN AT_max", [90.26, 28.50, 55.27, 50.43, 28.15, 44.71], 49.55),
    ("SVHN AT_avg", [91.83, 22.40, 55.62, 60.75, 19.71, 46.24], 49.43),
    ("SVHN AT_msd", [83.17, 33.45, 53.43, 44.15, 33.60, 43.68], 48.58),
    ("SVHN AT_mng", [86.63, 34.04, 60.19, 66.40, 32.87, 54.62], 55.79),
    ("SVHN PSAT", [91.20, 40.12, 57.66, 63.73, 29.30, 53.85], 55.98),
    ("TinyImageNet NAT", [60.59, 0.00, 11.93, 1.50, 0.00, 7.23], 13.54),
    ("TinyImageNet AT_inf", [53.95, 28.62, 40.56, 33.53, 27.53, 34.21], 36.40),
    ("TinyImageNet AT_2", [58.95, 7.80, 42.31, 47.44, 6.81, 32.52], 32.64),
    ("TinyImageNet AT_1", [56.66, 9.19, 40.38, 48.65, 9.23, 32.72], 32.81),
    ("TinyImageNet AT_max", [52.05, 27.68, 41.43, 39.76, 27.61, 36.30], 37.47),
    ("TinyImageNet AT_avg", [55.64, 20.06, 41.41, 46.92, 22.04, 36.14], 37.04),
    ("TinyImageNet AT_msd", [51.31, 28.09, 34.47, 42.86, 28.03, 35.11], 36.65),
    ("TinyImageNet AT_mng", [50.39, 28.59, 41.38, 43.42, 27.59, 37.76], 38.19),
    ("TinyImageNet PSAT", [53.08, 27.62, 39.84, 44.15, 27.64, 37.19], 38.25),
];

/// Printed (model, reference) parameter counts in millions and printed savings.
pub const SAVINGS: &[(&str, f64, f64, f64)] = &[
    ("CIFAR-10 PSAT", 4.874, 23.547, 79.30),
    ("TinyImageNet PSAT", 1.318, 11.276, 88.31),
    ("CIFAR-10 AT_mng", 23.552, 23.547, -0.02),
    ("TinyImageNet AT_mng", 11.280, 11.276, -0.04),
    ("CIFAR-10 z-32", 0.800, 23.547, 96.60),
    ("CIFAR-10 z-64", 1.765, 23.547, 92.51),
    ("CIFAR-10 z-128", 4.874, 23.547, 79.30),
    ("CIFAR-10 z-256", 15.812, 23.547, 32.85),
    ("TinyImageNet z-32", 0.634, 11.276, 94.38),
    ("TinyImageNet z-64", 1.318, 11.276, 88.31),
    ("TinyImageNet z-128", 3.866, 11.276, 65.72),
    ("TinyImageNet z-256", 13.679, 11.276, -21.31),
];
