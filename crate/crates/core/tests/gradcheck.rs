//! Central finite differences against reverse mode for every differentiable
//! op and the composed distillation losses, 64-bit, 20+ random instances each.

use dfpt_core::losses::{ce_loss, kd_loss, TargetFlow};
use dfpt_core::nn::{Ctx, Kind, Module};
use dfpt_core::dfpt::{BlockShape, FusionBlock, PromptBlock};
use dfpt_core::tensor::{check_gradients, Reduce, Tape, Tensor, Var};
use dfpt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for kinks and divisors.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.2..1.5);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = rand_tensor(&mut rng(seed ^ 0xABCD), &shape);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

/// Largest relative error seen so far, as `f64` bits.
pub static WORST: AtomicU64 = AtomicU64::new(0);

fn assert_ok(name: &str, seed: u64, err: f64) {
    WORST.fetch_max(err.to_bits(), Ordering::Relaxed);
    assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
}

fn check(name: &str, x: &Tensor<f64>, seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let err = check_gradients(|t: &mut Tape<f64>, v| {
        let out = f(t, v)?;
        project(t, out, seed)
    }, x, EPS)
    .unwrap();
    assert_ok(name, seed, err);
}

#[test]
pub fn elementwise_binary_with_broadcast() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (n, c) = (r.gen_range(1..5), r.gen_range(1..6));
        let a = rand_tensor(&mut r, &[n, c]);
        let row = away_from_zero(&mut r, &[1, c]);
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
            let apply = move |t: &mut Tape<f64>, x: Var, y: Var| match op {
                0 => t.add(x, y),
                1 => t.sub(x, y),
                2 => t.mul(x, y),
                _ => t.div(x, y),
            };
            let rc = row.clone();
            check(&format!("{name} lhs"), &a, seed, move |t, v| {
                let y = t.constant(rc.clone());
                apply(t, v, y)
            });
            let ac = a.clone();
            check(&format!("{name} rhs"), &row, seed, move |t, v| {
                let x = t.constant(ac.clone());
                apply(t, x, v)
            });
        }
    }
}

#[test]
pub fn scale_exp_relu_reshape() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let shape = [r.gen_range(1..4), r.gen_range(1..5), 3];
        let x = away_from_zero(&mut r, &shape);
        let c = r.gen_range(-2.0..2.0);
        check("scale", &x, seed, |t, v| Ok(t.scale(v, c)));
        check("exp", &x, seed, |t, v| Ok(t.exp(v)));
        check("relu", &x, seed, |t, v| Ok(t.relu(v)));
        let flat = [shape.iter().product::<usize>()];
        check("reshape", &x, seed, |t, v| t.reshape(v, &flat));
    }
}

#[test]
pub fn reductions() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let shape = [r.gen_range(1..4), r.gen_range(2..5), r.gen_range(1..4)];
        let x = rand_tensor(&mut r, &shape);
        let axis = r.gen_range(0..3);
        let keep = r.gen_bool(0.5);
        check("reduce sum", &x, seed, |t, v| t.reduce(v, &[axis], Reduce::Sum, keep));
        let mut pair = [axis, (axis + 1) % 3];
        pair.sort_unstable();
        check("reduce mean", &x, seed, |t, v| t.reduce(v, &pair, Reduce::Mean, keep));
        check("reduce max", &x, seed, |t, v| t.reduce(v, &[axis], Reduce::Max, keep));
        check("sum_all", &x, seed, |t, v| Ok(t.sum_all(v)));
        check("mean_all", &x, seed, |t, v| Ok(t.mean_all(v)));
    }
}

#[test]
pub fn matmuls() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..5));
        let a = rand_tensor(&mut r, &[m, k]);
        let b = rand_tensor(&mut r, &[k, n]);
        let bt = rand_tensor(&mut r, &[n, k]);
        let (bc, ac) = (b.clone(), a.clone());
        check("matmul lhs", &a, seed, move |t, v| {
            let y = t.constant(bc.clone());
            t.matmul(v, y)
        });
        check("matmul rhs", &b, seed, move |t, v| {
            let x = t.constant(ac.clone());
            t.matmul(x, v)
        });
        let (btc, ac) = (bt.clone(), a.clone());
        check("matmul_bt lhs", &a, seed, move |t, v| {
            let y = t.constant(btc.clone());
            t.matmul_bt(v, y)
        });
        check("matmul_bt rhs", &bt, seed, move |t, v| {
            let x = t.constant(ac.clone());
            t.matmul_bt(x, v)
        });
    }
}

#[test]
pub fn conv2d_all_inputs() {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..=k / 2);
        let hw = r.gen_range(k.max(3)..7);
        let x = rand_tensor(&mut r, &[n, ci, hw, hw]);
        let w = rand_tensor(&mut r, &[co, ci, k, k]);
        let b = rand_tensor(&mut r, &[co]);
        let (wc, bc) = (w.clone(), b.clone());
        check("conv2d x", &x, seed, move |t, v| {
            let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
            t.conv2d(v, w, Some(b), stride, pad)
        });
        let (xc, bc) = (x.clone(), b.clone());
        check("conv2d w", &w, seed, move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            t.conv2d(x, v, Some(b), stride, pad)
        });
        let (xc, wc) = (x.clone(), w.clone());
        check("conv2d b", &b, seed, move |t, v| {
            let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
            t.conv2d(x, w, Some(v), stride, pad)
        });
    }
}

#[test]
pub fn batch_norm_train_and_eval() {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let (n, c, hw) = (r.gen_range(2..4), r.gen_range(1..4), r.gen_range(1..4));
        let x = rand_tensor(&mut r, &[n, c, hw, hw]);
        let g = away_from_zero(&mut r, &[c]);
        let b = rand_tensor(&mut r, &[c]);
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
        for train in [true, false] {
            let tag = if train { "train" } else { "eval" };
            let (m, vv) = (mean.clone(), var.clone());
            let bn = move |t: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
                let running = (!train).then_some((m.as_slice(), vv.as_slice()));
                Ok(t.batch_norm(x, g, b, running, 1e-5)?.0)
            };
            let (gc, bc, bn1) = (g.clone(), b.clone(), bn.clone());
            check(&format!("batch_norm {tag} x"), &x, seed, move |t, v| {
                let (g, b) = (t.constant(gc.clone()), t.constant(bc.clone()));
                bn1(t, v, g, b)
            });
            let (xc, bc, bn2) = (x.clone(), b.clone(), bn.clone());
            check(&format!("batch_norm {tag} gamma"), &g, seed, move |t, v| {
                let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
                bn2(t, x, v, b)
            });
            let (xc, gc) = (x.clone(), g.clone());
            check(&format!("batch_norm {tag} beta"), &b, seed, move |t, v| {
                let (x, g) = (t.constant(xc.clone()), t.constant(gc.clone()));
                bn(t, x, g, v)
            });
        }
    }
}

#[test]
pub fn slicing_and_softmax() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let shape = [r.gen_range(1..4), r.gen_range(3..7), 2];
        let x = rand_tensor(&mut r, &shape);
        let start = r.gen_range(0..shape[1] - 1);
        let len = r.gen_range(1..shape[1] - start + 1);
        check("narrow", &x, seed, |t, v| t.narrow(v, 1, start, len));
        let other = rand_tensor(&mut r, &[shape[0], 2, 2]);
        check("concat", &x, seed, move |t, v| {
            let o = t.constant(other.clone());
            let n = t.narrow(v, 1, 0, 1)?;
            t.concat(&[o, v, n], 1)
        });
        let logits = Tensor::from_fn(&[shape[0], shape[1]], |_| r.gen_range(-3.0..3.0));
        check("log_softmax", &logits, seed, |t, v| t.log_softmax(v));
        // detach stops the exp branch: the gradient is the identity part alone
        let mut t = Tape::new();
        let v = t.leaf(&logits.clone().with_requires_grad(true));
        let d = t.detach(v);
        let e = t.exp(d);
        let s = t.add(v, e).unwrap();
        let l = t.sum_all(s);
        let g = t.backward(l).unwrap().tensor(v);
        assert!(g.data().iter().all(|&x| x == 1.0), "detach instance {seed}");
    }
}

fn logits_and_labels(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<usize>) {
    let (n, c) = (r.gen_range(1..6), r.gen_range(2..11));
    let scale = r.gen_range(0.5..6.0);
    let mut t = || Tensor::from_fn(&[n, c], |_| scale * r.gen_range(-1.0..1.0));
    let (a, b, d) = (t(), t(), t());
    let labels = (0..n).map(|_| r.gen_range(0..c)).collect();
    (a, b, d, labels)
}

#[test]
pub fn cross_entropy_and_kd() {
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let (z, target, _, y) = logits_and_labels(&mut r);
        let tau = r.gen_range(0.5..8.0);
        let compensate = r.gen_bool(0.5);
        let err = check_gradients(|t: &mut Tape<f64>, v| ce_loss(t, v, &y), &z, EPS).unwrap();
        assert_ok("ce_loss", seed, err);
        let tc = target.clone();
        let err = check_gradients(
            |t: &mut Tape<f64>, v| {
                let tg = t.constant(tc.clone());
                kd_loss(t, tg, v, tau, compensate, TargetFlow::Detached)
            },
            &z,
            EPS,
        )
        .unwrap();
        assert_ok("kd_loss input", seed, err);
        let zc = z.clone();
        let err = check_gradients(
            |t: &mut Tape<f64>, v| {
                let s = t.constant(zc.clone());
                kd_loss(t, v, s, tau, compensate, TargetFlow::Attached)
            },
            &target,
            EPS,
        )
        .unwrap();
        assert_ok("kd_loss attached target", seed, err);
    }
}

#[test]
pub fn prompt_path_objective() {
    // λ·CE(z_P) + (1−λ)·(KD(z_T→z_P) + KD(z_S→z_P)) as a function of z_P
    for seed in 0..INSTANCES {
        let mut r = rng(800 + seed);
        let (zp, zt, zs, y) = logits_and_labels(&mut r);
        let (lambda, tau) = (r.gen_range(0.0..1.0), r.gen_range(1.0..6.0));
        let err = check_gradients(
            |t: &mut Tape<f64>, v| {
                let (a, b) = (t.constant(zt.clone()), t.constant(zs.clone()));
                let ce = ce_loss(t, v, &y)?;
                let k1 = kd_loss(t, a, v, tau, true, TargetFlow::Detached)?;
                let k2 = kd_loss(t, b, v, tau, true, TargetFlow::Detached)?;
                let kd = t.add(k1, k2)?;
                let l = t.scale(ce, lambda);
                let m = t.scale(kd, 1.0 - lambda);
                t.add(l, m)
            },
            &zp,
            EPS,
        )
        .unwrap();
        assert_ok("prompt objective", seed, err);
    }
}

#[test]
pub fn student_objective() {
    // α·CE(z_S) + β·(KD(z_T→z_S) + KD(z_P→z_S)) as a function of z_S
    for seed in 0..INSTANCES {
        let mut r = rng(900 + seed);
        let (zs, zt, zp, y) = logits_and_labels(&mut r);
        let (alpha, beta, tau) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(1.0..6.0));
        let err = check_gradients(
            |t: &mut Tape<f64>, v| {
                let (a, b) = (t.constant(zt.clone()), t.constant(zp.clone()));
                let ce = ce_loss(t, v, &y)?;
                let k1 = kd_loss(t, a, v, tau, true, TargetFlow::Detached)?;
                let k2 = kd_loss(t, b, v, tau, true, TargetFlow::Detached)?;
                let kd = t.add(k1, k2)?;
                let l = t.scale(ce, alpha);
                let m = t.scale(kd, beta);
                t.add(l, m)
            },
            &zs,
            EPS,
        )
        .unwrap();
        assert_ok("student objective", seed, err);
    }
}

/// Finite differences over module weights, which live behind a `Ctx`.
fn module_weight_check<M: Module<f64> + Clone>(
    module: &M,
    forward: impl Fn(&M, &mut Ctx<f64>) -> Result<Var>,
    probes: usize,
    r: &mut ChaCha8Rng,
) -> f64 {
    let value = |m: &M| {
        let mut ctx = Ctx::no_grad(false);
        let out = forward(m, &mut ctx).unwrap();
        ctx.value(out).item()
    };
    let mut ctx = Ctx::new(false);
    let out = forward(module, &mut ctx).unwrap();
    let grads = ctx.backward(out).unwrap();
    let mut names = Vec::new();
    module.visit(&mut |p| {
        if p.kind == Kind::Weight {
            names.push((p.name.clone(), p.numel()));
        }
    });
    let mut worst: f64 = 0.0;
    for (name, len) in names {
        for _ in 0..probes {
            let i = r.gen_range(0..len);
            let shifted = |d: f64| {
                let mut m = module.clone();
                m.visit_mut(&mut |p| {
                    if p.name == name {
                        p.tensor.data_mut()[i] += d;
                    }
                });
                value(&m)
            };
            let fd = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
            let an = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
pub fn prompt_and_fusion_blocks() {
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let c = r.gen_range(4..10);
        let shape = BlockShape::new(c, r.gen_range(1..3), [0.5, 1.0][r.gen_range(0..2)], &[1, 3]).unwrap();
        let mut block: PromptBlock<f64> = PromptBlock::new("p", shape, r.gen_bool(0.5), &mut r);
        // lift the zero-initialized up conv so every weight has signal
        block.up.weight.tensor = rand_tensor(&mut r, block.up.weight.tensor.shape()).with_requires_grad(true);
        let fusion: FusionBlock<f64> = FusionBlock::new("f", c, 1, &mut r);
        let x = rand_tensor(&mut r, &[2, c, 4, 4]);
        let w = rand_tensor(&mut r, &[2, c, 4, 4]);
        let pair = (block, fusion);
        let err = module_weight_check(
            &PairModule(pair),
            |m, ctx| {
                let xv = ctx.input(x.clone());
                let p = m.0 .0.forward(ctx, xv)?;
                let f = m.0 .1.fuse(ctx, xv, p)?;
                let wv = ctx.input(w.clone());
                let y = ctx.tape.mul(f, wv)?;
                Ok(ctx.tape.sum_all(y))
            },
            3,
            &mut r,
        );
        assert_ok("prompt+fusion", seed, err);
    }
}

#[derive(Clone)]
struct PairModule((PromptBlock<f64>, FusionBlock<f64>));

impl Module<f64> for PairModule {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a dfpt_core::nn::Param<f64>)) {
        self.0 .0.visit(f);
        self.0 .1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dfpt_core::nn::Param<f64>)) {
        self.0 .0.visit_mut(f);
        self.0 .1.visit_mut(f);
    }
}

/// φ of a dual teacher, with θ riding along frozen.
#[derive(Clone)]
struct Phi(dfpt_core::dfpt::DualForwardTeacher<f64>);

impl Module<f64> for Phi {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a dfpt_core::nn::Param<f64>)) {
        for s in &self.0.prompts {
            s.visit(f);
        }
        self.0.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut dfpt_core::nn::Param<f64>)) {
        for s in &mut self.0.prompts {
            s.visit_mut(f);
        }
        self.0.head.visit_mut(f);
    }
}

#[test]
pub fn prompt_path_through_frozen_teacher() {
    use dfpt_core::dfpt::{DualForwardTeacher, GradientFlow, PromptConfig};
    use dfpt_core::models::{ArchSpec, StagedModel};
    let spec = ArchSpec::named("tiny-resnet-S", 5).unwrap();
    for seed in 0..INSTANCES {
        let mut r = rng(1100 + seed);
        let teacher = StagedModel::build(&spec, seed, "teacher", dfpt_core::nn::Group::Theta).unwrap();
        let mut d = DualForwardTeacher::new(teacher, PromptConfig::for_stages(3), seed).unwrap();
        for s in &mut d.prompts {
            for (b, _) in &mut s.pairs {
                let shape = b.up.weight.tensor.shape().to_vec();
                b.up.weight.tensor = Tensor::from_fn(&shape, |_| 0.1 * r.gen_range(-1.0..1.0)).with_requires_grad(true);
            }
        }
        let x = rand_tensor(&mut r, &[2, 3, 8, 8]);
        let y = [r.gen_range(0..5), r.gen_range(0..5)];
        let err = module_weight_check(
            &Phi(d),
            |m, ctx| {
                let xv = ctx.input(x.clone());
                let out = m.0.forward_prompt(ctx, xv, GradientFlow::ThroughFrozen)?;
                ce_loss(&mut ctx.tape, out.logits, &y)
            },
            1,
            &mut r,
        );
        assert_ok("prompt path", seed, err);
    }
}
