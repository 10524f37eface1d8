mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{crafted_mi, grl_contract, kl_closed, kl_monte_carlo, shared_posterior_entropy, Diag};
use transvae_core::losses::{adv_loss, cls_loss, ctc_loss, ClsNorm};
use transvae_core::model::{sample_noise, ModelConfig, TranSVae};
use transvae_core::tensor::{Tape, Tensor};

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let q = Diag::random(&mut rng, 3);
        let p = Diag::random(&mut rng, 3);
        let exact = kl_closed(&q, &p);
        let mc = kl_monte_carlo(&q, &p, 100_000, &mut rng);
        assert!(
            (mc - exact).abs() <= 0.01 * exact,
            "closed {exact} vs mc {mc}"
        );
    }
}

#[test]
fn entropy_of_standard_normal() {
    let analytic = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let h = shared_posterior_entropy(128, 128, 1.0, 0);
    assert!((h - analytic).abs() < 0.15, "{h} vs {analytic}");
}

#[test]
fn entropy_scales_with_std() {
    let h1 = shared_posterior_entropy(128, 128, 1.0, 3);
    let h2 = shared_posterior_entropy(128, 128, 2.0, 3);
    let shift = h2 - h1;
    assert!((shift / 2f64.ln() - 1.0).abs() < 0.1, "shift {shift}");
}

#[test]
fn duplicated_latents_carry_information() {
    let mi = crafted_mi(128, 16, 1.0, true, 1);
    assert!(mi >= 1.0, "{mi}");
}

#[test]
fn independent_latents_score_near_zero() {
    for seed in 0..3 {
        let mi = crafted_mi(128, 16, 4.0, false, seed);
        assert!(mi.abs() < 0.3, "seed {seed}: {mi}");
    }
}

#[test]
fn dependence_orders_above_independence() {
    let correct = (0..20)
        .filter(|&s| {
            crafted_mi(128, 16, 2.0, true, 100 + s) > crafted_mi(128, 16, 2.0, false, 200 + s)
        })
        .count();
    assert!(correct >= 19, "{correct}/20");
}

#[test]
fn grl_contract_on_random_net() {
    for beta in [0.0, 1.0, 0.3] {
        let (exact, worst) = grl_contract(7, beta);
        assert!(exact);
        assert!(worst < 1e-12, "beta {beta}: {worst}");
    }
}

#[test]
fn adversary_gradient_pushes_toward_confusion() {
    // Two separable points and a critic that already tells them apart: the
    // gradient reaching the latents through the reversal layer must raise the
    // critic's loss when followed as a descent direction.
    let cfg = ModelConfig {
        frame_dim: 2,
        frames: 2,
        hidden: 4,
        static_dim: 1,
        dynamic_dim: 1,
        relation_dim: 3,
        classes: 2,
        subsets_per_scale: 1,
        exclusive_dynamic: false,
        sigmoid_output: false,
    };
    let (model, params) = TranSVae::new::<f64>(cfg, 4).unwrap();
    let z0 = Tensor::from_f64(&[2, 2, 1], &[-2.0, -2.0, 2.0, 2.0]).unwrap();
    let loss_at = |z: &Tensor<f64>| {
        let mut t = Tape::frozen(&params);
        let zv = t.leaf(z.clone());
        let rel = model.relations(&mut t, zv, &model.trn.eval_plan()).unwrap();
        let (f, r, v) = adv_loss(&mut t, &model, zv, rel, &[0, 1]).unwrap();
        let a = t.add(f, r).unwrap();
        let total = t.add(a, v).unwrap();
        let value = t.value(total).item();
        let grad = t.backward(total).unwrap().get(zv).unwrap().clone();
        (value, grad)
    };
    let (before, grad) = loss_at(&z0);
    let step: Vec<f64> = z0
        .data()
        .iter()
        .zip(grad.data())
        .map(|(z, g)| z - 1e-3 * g)
        .collect();
    let (after, _) = loss_at(&Tensor::from_f64(&[2, 2, 1], &step).unwrap());
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn cls_decreases_with_confident_correct_target() {
    let mut t = Tape::<f64>::new();
    let src = t.constant(Tensor::from_f64(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap());
    let tgt = t.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, 8.0]).unwrap());
    let base = cls_loss(&mut t, src, &[0, 1], None, ClsNorm::Contributing).unwrap();
    let with = cls_loss(
        &mut t,
        src,
        &[0, 1],
        Some((tgt, &[2], &[true])),
        ClsNorm::Contributing,
    )
    .unwrap();
    assert!(t.value(with).item() < t.value(base).item());
}

#[test]
fn losses_have_finite_gradients() {
    let cfg = ModelConfig {
        frame_dim: 6,
        frames: 4,
        hidden: 5,
        static_dim: 3,
        dynamic_dim: 3,
        relation_dim: 4,
        classes: 3,
        subsets_per_scale: 2,
        exclusive_dynamic: false,
        sigmoid_output: true,
    };
    let (model, params) = TranSVae::new::<f32>(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Tensor<f32> = Tensor::from_fn(&[4, 4, 6], |i| ((i * 37 % 11) as f32) / 11.0);
    let mut t = Tape::with_params(&params);
    let xv = t.constant(x);
    let fwd = model.forward(&mut t, xv, Some(&mut rng)).unwrap();
    let svae = transvae_core::losses::svae_loss(&mut t, xv, &fwd).unwrap();
    let rel = model
        .relations(&mut t, fwd.z, &model.trn.eval_plan())
        .unwrap();
    let (f, r, v) = adv_loss(&mut t, &model, fwd.z, rel, &[0, 0, 1, 1]).unwrap();
    let logits = model.task_logits(&mut t, rel).unwrap();
    let cls = transvae_core::losses::cross_entropy(&mut t, logits, &[0, 1, 2, 0]).unwrap();
    let mi = transvae_core::losses::mi_loss(
        &mut t,
        fwd.z_d,
        fwd.post.static_post,
        fwd.z,
        fwd.post.dynamic_post,
        10,
    )
    .unwrap();
    let neg = t.constant(sample_noise(&[4, 3], &mut rng));
    let ctc = ctc_loss(&mut t, fwd.z_d, fwd.z_d, neg, 1.0).unwrap();
    let mut root = svae;
    for term in [f, r, v, cls, mi, ctc] {
        root = t.add(root, term).unwrap();
    }
    let grads = t.backward(root).unwrap();
    for g in grads.param_grads(&params) {
        assert!(g.is_finite());
    }
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(
        mean in proptest::collection::vec(-3.0f64..3.0, 4),
        logvar in proptest::collection::vec(-2.0f64..2.0, 4),
        shift in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let q = Diag { mean: mean.clone(), logvar: logvar.clone() };
        prop_assert!(kl_closed(&q, &q).abs() < 1e-12);
        let p = Diag {
            mean: mean.iter().zip(&shift).map(|(m, s)| m + s).collect(),
            logvar: logvar.iter().zip(&shift).map(|(l, s)| l - s).collect(),
        };
        prop_assert!(kl_closed(&q, &p) >= 0.0);
    }

    #[test]
    fn ctc_is_nonnegative(v in proptest::collection::vec(-5.0f64..5.0, 18), margin in 0.0f64..3.0) {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_f64(&[2, 3], &v[0..6]).unwrap());
        let p = t.constant(Tensor::from_f64(&[2, 3], &v[6..12]).unwrap());
        let n = t.constant(Tensor::from_f64(&[2, 3], &v[12..18]).unwrap());
        let l = ctc_loss(&mut t, a, p, n, margin).unwrap();
        prop_assert!(t.value(l).item() >= 0.0);
        let same = ctc_loss(&mut t, a, a, n, margin).unwrap();
        let dn: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|k| (v[i * 3 + k] - v[12 + i * 3 + k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let want = dn.iter().map(|d| (margin - d).max(0.0)).sum::<f64>() / 2.0;
        prop_assert!((t.value(same).item() - want).abs() < 1e-12);
    }
}
