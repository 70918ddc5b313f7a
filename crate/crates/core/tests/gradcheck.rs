//! Finite-difference gradient suite: every differentiable surface is checked
//! against central differences at double precision, relative error < 1e-4.

mod common;

use classinv::classifier::FeaturePyramid;
use classinv::engine::{
    apply_acs, episode_grad_snapshot, episode_loss_with_shift, AcsParams, InversionConfig,
    ParamGroup,
};
use classinv::ftp::{compose_backward, compose_output, ftp_backward, ftp_forward, init_ftp, ComposeMode};
use classinv::gradcheck::{max_rel_error, numerical_grad, DEFAULT_EPS};
use classinv::losses::{total_inversion_loss, total_loss_with_input_grad, LossWeights};
use classinv::nn::init::{seeded_rng, standard_normal};
use ndarray::{Array4, ArrayD};

use common::fresh_toy_teacher;

const REL_TOL: f64 = 1e-4;
const ATOL_FLOOR: f64 = 1e-7;

fn rand4(seed: u64, shape: [usize; 4]) -> Array4<f64> {
    standard_normal(&mut seeded_rng(seed), &shape)
        .into_dimensionality()
        .unwrap()
}

#[test]
fn teacher_input_gradient_matches_finite_differences() {
    let teacher = fresh_toy_teacher(3);
    // Scalar probe: weighted sum of logits.
    let w = standard_normal(&mut seeded_rng(70), &[2, 4])
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let x = standard_normal(&mut seeded_rng(71), &[2, 3, 8, 8]);

    let mut session = teacher.session();
    let out = session
        .forward(&x.clone().into_dimensionality().unwrap())
        .unwrap();
    let d_logits = w.clone();
    let analytic = session.backward(Some(&d_logits), None, None).into_dyn();
    let _ = out;

    let numeric = numerical_grad(
        &x,
        |v| {
            let mut s = teacher.session();
            let o = s.forward(&v.clone().into_dimensionality().unwrap()).unwrap();
            (&o.logits * &w).sum()
        },
        DEFAULT_EPS,
    );
    let err = max_rel_error(&analytic, &numeric, ATOL_FLOOR);
    assert!(err < REL_TOL, "teacher input gradient rel err {err}");
}

#[test]
fn total_loss_input_gradient_matches_finite_differences() {
    let teacher = fresh_toy_teacher(5);
    let weights = LossWeights::default();
    let x = rand4(72, [1, 3, 8, 8]);
    let targets = vec![2usize];

    let mut session = teacher.session();
    let (_, analytic) = total_loss_with_input_grad(&mut session, &x, &targets, &weights).unwrap();

    let numeric = numerical_grad(
        &x.clone().into_dyn(),
        |v| {
            total_inversion_loss(
                &v.clone().into_dimensionality().unwrap(),
                &targets,
                &teacher,
                &weights,
            )
            .unwrap()
            .total
        },
        DEFAULT_EPS,
    );
    let err = max_rel_error(&analytic.into_dyn(), &numeric, ATOL_FLOOR);
    assert!(err < REL_TOL, "total loss input gradient rel err {err}");
}

#[test]
fn pyramid_gradients_match_finite_differences() {
    // dL/df through the pyramid blocks, with L = weighted sum of m_L.
    let teacher = fresh_toy_teacher(6);
    let mut ftp = init_ftp(&teacher.spec, 9, ComposeMode::ConvTanh).unwrap();
    let maps = vec![rand4(73, [2, 8, 8, 8]), rand4(74, [2, 16, 4, 4])];
    let pyramid = FeaturePyramid {
        maps: maps.clone(),
        tap_names: teacher.tap_names.clone(),
    };
    let w = rand4(75, [2, 3, 8, 8]);

    let out = ftp_forward(&mut ftp, &pyramid).unwrap();
    assert_eq!(out.last().dim(), (2, 3, 8, 8));
    let d_taps = ftp_backward(&mut ftp, &w);

    for (i, tap) in maps.iter().enumerate() {
        let numeric = numerical_grad(
            &tap.clone().into_dyn(),
            |v| {
                let mut f = init_ftp(&teacher.spec, 9, ComposeMode::ConvTanh).unwrap();
                let mut m = maps.clone();
                m[i] = v.clone().into_dimensionality().unwrap();
                let p = FeaturePyramid {
                    maps: m,
                    tap_names: teacher.tap_names.clone(),
                };
                (&ftp_forward(&mut f, &p).unwrap().last().view() * &w.view()).sum()
            },
            DEFAULT_EPS,
        );
        let err = max_rel_error(&d_taps[i].clone().into_dyn(), &numeric, ATOL_FLOOR);
        assert!(err < REL_TOL, "tap {i} gradient rel err {err}");
    }
}

#[test]
fn compose_gradients_match_finite_differences() {
    let teacher = fresh_toy_teacher(7);
    let mut spec = teacher.spec.clone();
    spec.input_resolution = 8;
    let m = rand4(76, [1, 3, 4, 4]);
    let g = rand4(77, [1, 3, 4, 4]);
    let w = rand4(78, [1, 3, 4, 4]);

    let mut ftp = init_ftp(&spec, 11, ComposeMode::ConvTanh).unwrap();
    compose_output(&mut ftp, &m, &g).unwrap();
    let shared = compose_backward(&mut ftp, &w);

    for (name, base) in [("m_last", &m), ("gen_output", &g)] {
        let numeric = numerical_grad(
            &base.clone().into_dyn(),
            |v| {
                let mut f = init_ftp(&spec, 11, ComposeMode::ConvTanh).unwrap();
                let v4: Array4<f64> = v.clone().into_dimensionality().unwrap();
                let out = if name == "m_last" {
                    compose_output(&mut f, &v4, &g).unwrap()
                } else {
                    compose_output(&mut f, &m, &v4).unwrap()
                };
                (&out * &w).sum()
            },
            DEFAULT_EPS,
        );
        let err = max_rel_error(&shared.clone().into_dyn(), &numeric, ATOL_FLOOR);
        assert!(err < REL_TOL, "{name} gradient rel err {err}");
    }
}

#[test]
fn channel_scale_gradients_match_finite_differences() {
    let img = rand4(79, [2, 3, 4, 4]);
    let w = rand4(80, [2, 3, 4, 4]);
    let alpha = AcsParams::init(2, 21);

    // Analytic: d/d_alpha of sum(w * (alpha x img)) = sum_hw(w * img) per (n, c).
    let mut analytic = ArrayD::zeros(alpha.alpha.value.raw_dim());
    for n in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    acc += w[[n, c, i, j]] * img[[n, c, i, j]];
                }
            }
            analytic[[n, c, 0, 0]] = acc;
        }
    }
    let numeric = numerical_grad(
        &alpha.alpha.value.clone(),
        |v| {
            let mut a = AcsParams::ones(2);
            a.alpha.value.assign(v);
            (&apply_acs(&a, &img).unwrap() * &w).sum()
        },
        DEFAULT_EPS,
    );
    let err = max_rel_error(&analytic, &numeric, ATOL_FLOOR);
    assert!(err < REL_TOL, "channel scale gradient rel err {err}");
}

#[test]
fn episode_parameter_gradients_match_finite_differences() {
    // The fully assembled step: generator -> pyramid -> composition -> scales
    // -> objective, differentiated to all three parameter groups.
    let teacher = fresh_toy_teacher(8);
    let config = InversionConfig {
        batch_size: 2,
        epochs: 1,
        ..InversionConfig::default()
    };
    let seed = 31;
    let snap = episode_grad_snapshot(&teacher, &config, seed).unwrap();
    assert!(snap.loss.is_finite());

    let mut rng = seeded_rng(90);
    let mut check = |group: ParamGroup, param_idx: usize, analytic: &ArrayD<f64>, coords: usize| {
        use rand::Rng;
        let n = analytic.len();
        let flat = analytic.as_slice_memory_order().unwrap();
        for _ in 0..coords.min(n) {
            let idx = rng.gen_range(0..n);
            let f = |d: f64| {
                episode_loss_with_shift(&teacher, &config, seed, group, param_idx, idx, d).unwrap()
            };
            let numeric = (f(DEFAULT_EPS) - f(-DEFAULT_EPS)) / (2.0 * DEFAULT_EPS);
            let a = flat[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ATOL_FLOOR);
            assert!(
                rel < REL_TOL,
                "{group:?}[{param_idx}][{idx}]: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    };

    // Alpha: all six coordinates.
    let alpha = snap.alpha.clone();
    check(ParamGroup::Alpha, 0, &alpha, 6);
    // Generator and pyramid: a few random coordinates of several tensors.
    for (i, g) in snap.gen.iter().enumerate().take(4) {
        check(ParamGroup::Generator, i, g, 3);
    }
    for (i, g) in snap.ftp.iter().enumerate() {
        check(ParamGroup::Ftp, i, g, 3);
    }
}
