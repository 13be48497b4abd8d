//! Gradient checks shared by the test suite and the acceptance harness:
//! each case compares an analytic gradient with central differences.
#![allow(dead_code)]

use crate::oracles::{check_gradient, OracleResult};
use fopro_autograd::{Graph, Var};
use fopro_core::fpg::{sample_noise, FourierPromptGenerator, NoiseVector};
use fopro_core::losses::*;
use fopro_core::models::{StudentArch, StudentHandle, TeacherHandle};
use fopro_core::nn::{named_params, named_params_mut, BackboneSpec, CapturedLayer, Module};
use fopro_core::spectral::{decompose, mix_amplitude_var, reconstruct_var, ImageBatch};
use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Checks `d loss / d x` for a loss built from a single input tensor.
fn check_input<F>(shape: &[usize], x0: &[f64], build: F) -> OracleResult<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let tensor = |v: &[f64]| ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap();
    let g = Graph::new();
    let x = g.input(tensor(x0));
    let loss = build(&g, x);
    let grads = g.backward(loss);
    let analytic: Vec<f64> = grads
        .wrt(x)
        .expect("input gradient")
        .iter()
        .copied()
        .collect();
    let eval = |v: &[f64]| {
        let g = Graph::new();
        build(&g, g.constant(tensor(v))).scalar()
    };
    check_gradient(eval, x0, &analytic)
}

/// Checks the gradient of `loss(module)` with respect to every parameter
/// of a module, perturbing a clone coordinate by coordinate.
fn check_module<M, F>(module: &M, build: F) -> OracleResult<Vec<f64>>
where
    M: Module + Clone,
    F: for<'g> Fn(&'g Graph, &M) -> Var<'g>,
{
    let g = Graph::new();
    let loss = build(&g, module);
    let grads = g.backward(loss);
    let params = named_params(module);
    let mut analytic = Vec::new();
    let mut flat = Vec::new();
    let mut sizes = Vec::new();
    for (_, p) in &params {
        analytic.extend(grads.get_or_zeros(p).iter().copied());
        flat.extend(p.value().iter().copied());
        sizes.push(p.len());
    }
    let eval = |v: &[f64]| {
        let mut m = module.clone();
        let mut offset = 0;
        for ((_, p), &n) in named_params_mut(&mut m).into_iter().zip(&sizes) {
            let shape = p.value().raw_dim();
            p.set(ArrayD::from_shape_vec(shape, v[offset..offset + n].to_vec()).unwrap());
            offset += n;
        }
        let g = Graph::new();
        build(&g, &m).scalar()
    };
    check_gradient(eval, &flat, &analytic)
}

pub type Case = (&'static str, OracleResult<Vec<f64>>);

pub struct Fixture {
    pub teacher: TeacherHandle,
    pub student: StudentHandle,
    pub x: Array4<f64>,
    pub labels: Vec<usize>,
    pub z: NoiseVector,
    pub alpha: Vec<f64>,
    pub fpg: FourierPromptGenerator,
}

pub fn fixture() -> Fixture {
    let mut r = rng(6);
    let res = 4;
    let teacher = TeacherHandle::toy(BackboneSpec::new(&[3, 4], &[1, 2]), res, &mut r).unwrap();
    let student = StudentHandle::new(
        StudentArch {
            backbone: BackboneSpec::new(&[2, 3], &[1, 2]),
            num_classes: 3,
            projection_dim: teacher.feature_dim(),
        },
        &mut r,
    )
    .unwrap();
    let x = Array4::from_shape_fn((3, 3, res, res), |_| r.gen::<f64>());
    let fpg = FourierPromptGenerator::new(3, 3, res, res, &mut r);
    Fixture {
        teacher,
        student,
        x,
        labels: vec![0, 2, 1],
        z: sample_noise(&mut r, 3),
        alpha: vec![0.2, 0.7, 0.5],
        fpg,
    }
}

pub fn prompted<'g>(g: &'g Graph, f: &Fixture, fpg: &FourierPromptGenerator) -> Var<'g> {
    let s = decompose(&ImageBatch::new(f.x.clone()).unwrap()).unwrap();
    let delta = fpg
        .generate_var(g, &f.z, true)
        .unwrap()
        .reshape(&[1, 3, 4, 4]);
    let a = g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 1, 1, 1]), f.alpha.clone()).unwrap());
    reconstruct_var(
        mix_amplitude_var(g.constant(s.amplitude.into_dyn()), delta, a),
        g.constant(s.phase.into_dyn()),
    )
}

fn ekd_gradients(out: &mut Vec<Case>) {
    let mut r = rng(1);
    let (y0, t0) = (randn(&mut r, 12), randn(&mut r, 12));
    let t_const = t0.clone();
    out.push((
        "ekd wrt y",
        check_input(&[3, 4], &y0, |g, y| {
            let t = g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), t_const.clone()).unwrap());
            ekd_loss(y, t).unwrap()
        }),
    ));
    let y_const = y0.clone();
    out.push((
        "ekd wrt t",
        check_input(&[3, 4], &t0, |g, t| {
            let y = g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), y_const.clone()).unwrap());
            ekd_loss(y, t).unwrap()
        }),
    ));
}

fn balance_gradient(out: &mut Vec<Case>) {
    let x0 = randn(&mut rng(2), 15);
    out.push((
        "balance",
        check_input(&[3, 5], &x0, |_, x| balance_loss(x).unwrap()),
    ));
}

fn bn_regularization_gradient(out: &mut Vec<Case>) {
    let mut r = rng(3);
    let running = BnStatistics {
        layers: vec![
            LayerStatistics {
                mean: Array1::from(randn(&mut r, 3)),
                var: Array1::from(randn(&mut r, 3)).mapv(f64::abs),
            },
            LayerStatistics {
                mean: Array1::from(randn(&mut r, 2)),
                var: Array1::from(randn(&mut r, 2)).mapv(f64::abs),
            },
        ],
    };
    let x0 = randn(&mut r, 10);
    out.push((
        "bn",
        check_input(&[10], &x0, |g, x| {
            // Stats are smooth functions of one input so all four vectors vary.
            let part = |lo: usize, n: usize| {
                let mask = ArrayD::from_shape_fn(IxDyn(&[10, n]), |ix| {
                    if ix[0] == lo + ix[1] {
                        1.0
                    } else {
                        0.0
                    }
                });
                x.reshape(&[1, 10]).matmul(g.constant(mask)).reshape(&[n])
            };
            let layers = [
                CapturedLayer {
                    mean: part(0, 3),
                    var: part(3, 3).square(),
                },
                CapturedLayer {
                    mean: part(6, 2),
                    var: part(8, 2).square(),
                },
            ];
            bn_regularization(&layers, &running).unwrap()
        }),
    ));
}

fn classification_loss_gradients(out: &mut Vec<Case>) {
    let mut r = rng(4);
    let x0 = randn(&mut r, 20);
    let labels = [0, 3, 1, 1];
    out.push((
        "ce",
        check_input(&[4, 5], &x0, |_, x| cross_entropy(x, &labels).unwrap()),
    ));
    let w = [0.5, 2.0, 1.0, 3.0, 0.1];
    out.push((
        "weighted ce",
        check_input(&[4, 5], &x0, |_, x| {
            weighted_cross_entropy(x, &labels, &w).unwrap()
        }),
    ));
    let counts = [500, 120, 30, 8, 2];
    out.push((
        "bsm",
        check_input(&[4, 5], &x0, |_, x| {
            balanced_softmax_loss(x, &labels, &counts).unwrap()
        }),
    ));
}

fn composite_losses(out: &mut Vec<Case>) {
    let mut r = rng(5);
    let x0 = randn(&mut r, 12);
    let labels = [2, 0, 1];
    let weights = LossWeights::default();
    let t: Vec<f64> = randn(&mut r, 12);
    // Logits and projection share one input so the composite couples them.
    let exploit = check_input(&[3, 4], &x0, |g, x| {
        let tv = g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), t.clone()).unwrap());
        exploitation_loss(
            cross_entropy(x, &labels).unwrap(),
            ekd_loss(x.square() + 0.1, tv).unwrap(),
            &weights,
        )
    });
    out.push(("exploitation", exploit));
    let explore = check_input(&[3, 4], &x0, |g, x| {
        let tv = g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), t.clone()).unwrap());
        let bn = (x.mean() - 0.3).square() + (x.square().mean() - 1.0).square();
        let inv = inversion_loss(bn, balance_loss(x).unwrap(), &weights);
        exploration_loss(ekd_loss(tv, x).unwrap(), inv, &weights)
    });
    out.push(("exploration", explore));
}

fn prompted_image_construction_gradient(out: &mut Vec<Case>) {
    let f = fixture();
    let target = ArrayD::from_shape_fn(IxDyn(&[3, 3, 4, 4]), |ix| {
        ((ix[2] * 4 + ix[3]) as f64).sin()
    });
    let r = check_module(&f.fpg, |g, fpg| {
        (prompted(g, &f, fpg) * g.constant(target.clone())).sum()
    });
    out.push(("x_hat", r));
}

fn exploration_objective_gradient_through_teacher(out: &mut Vec<Case>) {
    let f = fixture();
    let running = f.teacher.running_statistics();
    let weights = LossWeights::default();
    let (_, y) = f
        .student
        .student_forward(&ImageBatch::new(f.x.clone()).unwrap())
        .unwrap();
    let r = check_module(&f.fpg, |g, fpg| {
        let out = f
            .teacher
            .forward_var(g, prompted(g, &f, fpg), true)
            .unwrap();
        let inv = inversion_loss(
            bn_regularization(&out.captured, &running).unwrap(),
            balance_loss(out.features).unwrap(),
            &weights,
        );
        let distill = ekd_loss(g.constant(y.clone().into_dyn()), out.features).unwrap();
        exploration_loss(distill, inv, &weights)
    });
    out.push(("exploration through teacher", r));
}

fn exploitation_objective_gradient_through_student(out: &mut Vec<Case>) {
    let f = fixture();
    let weights = LossWeights::default();
    let g0 = Graph::new();
    let t = f
        .teacher
        .forward_var(&g0, prompted(&g0, &f, &f.fpg), false)
        .unwrap()
        .features
        .value();
    let t = (*t).clone();
    let counts = [40, 9, 2];
    let r = check_module(&f.student, |g, s| {
        let out = s
            .forward_var(g, g.constant(f.x.clone().into_dyn()), true)
            .unwrap();
        let target = balanced_softmax_loss(out.logits, &f.labels, &counts).unwrap();
        exploitation_loss(
            target,
            ekd_loss(out.projection, g.constant(t.clone())).unwrap(),
            &weights,
        )
    });
    out.push(("exploitation through student", r));
}

/// Every loss, loss composite and the prompted-image construction.
pub fn all() -> Vec<Case> {
    let mut out = Vec::new();
    ekd_gradients(&mut out);
    balance_gradient(&mut out);
    bn_regularization_gradient(&mut out);
    classification_loss_gradients(&mut out);
    composite_losses(&mut out);
    prompted_image_construction_gradient(&mut out);
    exploration_objective_gradient_through_teacher(&mut out);
    exploitation_objective_gradient_through_student(&mut out);
    out
}
