use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1]));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn log_softmax_uniform_row() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[3.7, 3.7]));
    let y = tape.log_softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_is_stable_for_large_logits() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![1000.0, 0.0, -1000.0]).unwrap());
    let y = tape.log_softmax(x).unwrap();
    assert!(tape.value(y).is_finite());
    assert_eq!(tape.value(y).data()[0], 0.0);
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 5], &mut rng);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(eye), tape.constant(x.clone()));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn square_sum_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum_all(sq).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(grads.get(root).unwrap().data(), &[1.0]);
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a64 = random(&[4, 3], &mut rng);
    let b64 = random(&[3, 5], &mut rng);
    let a32 = a64.cast::<f32>();
    let b32 = b64.cast::<f32>();

    let mut tape = Tape::<f32>::new();
    let (a, b) = (tape.leaf(a32.clone()), tape.constant(b32.clone()));
    let y = tape.matmul(a, b).unwrap();
    let root = tape.sum_all(y).unwrap();
    let ga = tape.backward(root).unwrap().get(a).unwrap().to_f64_vec();

    // Oracle: central differences on float64 copies of the same values.
    let f = |a: &Tensor<f64>| -> f64 {
        let b = b32.cast::<f64>();
        let (n, k, m) = (4, 3, 5);
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * m + j];
                }
            }
        }
        s
    };
    let base = a32.cast::<f64>();
    let h = 1e-3;
    for (idx, &analytic) in ga.iter().enumerate() {
        let mut up = base.clone();
        up.data_mut()[idx] += h;
        let mut down = base.clone();
        down.data_mut()[idx] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(
            rel < 1e-4,
            "coord {idx}: analytic {analytic} numeric {numeric}"
        );
    }
}

#[test]
fn detached_input_has_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    let c = tape.constant(t64(&[2], &[3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let root = tape.sum_all(y).unwrap();
    let grads = tape.backward(root).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(s)) if s == vec![2]));
}

#[test]
fn shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn log_of_non_positive_is_an_error_in_debug() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let r = tape.log(x);
    if cfg!(debug_assertions) {
        assert!(matches!(r, Err(Error::NonPositiveLog(_))));
    }
}

#[test]
fn broadcast_over_leading_dims() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = tape.leaf(t64(&[3], &[10.0, 20.0, 30.0]));
    let y = tape.add(x, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let root = tape.sum_all(y).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[4, 3], &mut rng);
    let xv = random(&[5, 3], &mut rng);
    let build = |tape: &mut Tape<f64>, which: u8| {
        let wv = tape.leaf(w.clone());
        let x = tape.constant(xv.clone());
        let y = tape.matmul(x, wv).err();
        assert!(y.is_some(), "3x? @ 4x3 must fail");
        let b = tape.constant(Tensor::zeros(&[4]));
        let h = tape.linear(x, wv, b).unwrap();
        let t = tape.tanh(h).unwrap();
        let r1 = tape.sum_all(t).unwrap();
        let s = tape.square(h).unwrap();
        let r2 = tape.mean_all(s).unwrap();
        let root = match which {
            1 => r1,
            2 => r2,
            _ => tape.add(r1, r2).unwrap(),
        };
        (wv, root)
    };
    let grad = |which| {
        let mut tape = Tape::new();
        let (wv, root) = build(&mut tape, which);
        tape.backward(root).unwrap().get(wv).unwrap().clone()
    };
    let (g1, g2, g12) = (grad(1), grad(2), grad(3));
    for i in 0..g12.numel() {
        let sum = g1.data()[i] + g2.data()[i];
        assert!((g12.data()[i] - sum).abs() <= 1e-15 * sum.abs().max(1.0));
    }
}

#[test]
fn replay_reproduces_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(random(&[3, 4], &mut rng).cast());
    let w = tape.leaf(random(&[2, 4], &mut rng).cast());
    let b = tape.leaf(random(&[2], &mut rng).cast());
    let h = tape.linear(x, w, b).unwrap();
    let s = tape.sigmoid(h).unwrap();
    let l = tape.log_softmax(s).unwrap();
    let n = tape.l2_norm(l).unwrap();
    let root = tape.mean_all(n).unwrap();
    let before: Vec<Tensor<f32>> = (0..tape.len())
        .map(|i| tape.value(Var::from_id(i)).clone())
        .collect();
    tape.replay().unwrap();
    for (i, v) in before.iter().enumerate() {
        assert_eq!(tape.value(Var::from_id(i)), v);
    }
    assert!(tape.value(root).is_finite());
}

#[test]
fn grl_forward_identity_and_reversed_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[3], &[1.0, -2.0, 3.0]));
    let y = tape.grl(x, 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
    let w = tape.constant(t64(&[3], &[0.5, 1.5, -2.0]));
    let p = tape.mul(y, w).unwrap();
    let root = tape.sum_all(p).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[-0.5, -1.5, 2.0]);
}

#[test]
fn l2_norm_subgradient_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]));
    let n = tape.l2_norm(x).unwrap();
    let root = tape.sum_all(n).unwrap();
    assert_eq!(tape.value(root).item(), 0.0);
    let g = tape.backward(root).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

/// Every op kind differentiated through a random composite, in both precisions.
struct OpZoo {
    params: ParamSet<f64>,
    ids: Vec<ParamId>,
}

impl OpZoo {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ids = vec![
            params.add("x", random(&[2, 3, 4], &mut rng)),
            params.add("w", random(&[5, 4], &mut rng)),
            params.add("b", random(&[5], &mut rng)),
            params.add("m", random(&[5, 2], &mut rng)),
            params.add("lv", random(&[3, 4], &mut rng)),
        ];
        OpZoo { params, ids }
    }
}

impl GradCase for OpZoo {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn build<F: Real>(&self, t: &mut Tape<F>) -> crate::Result<Var> {
        let [x, w, b, m, lv] = [0, 1, 2, 3, 4].map(|i| t.param(self.ids[i]));
        let h = t.linear(x, w, b)?; // [2,3,5]
        let h = t.tanh(h)?;
        let mm = t.matmul(h, m)?; // [2,3,2]
        let sg = t.sigmoid(mm)?;
        let ex = t.exp(sg)?;
        let lg = t.log(ex)?;
        let sq = t.square(lg)?;
        let s1 = t.select(h, 1, 2)?; // [2,5]
        let sl = t.slice(h, 2, 1, 3)?; // [2,3,3]
        let st = t.stack(&[s1, s1], 1)?; // [2,2,5]
        let cc = t.concat(&[sq, sl])?; // [2,3,5]
        let ls = t.log_softmax(cc)?;
        let lse = t.logsumexp(st)?; // [2,2]
        let g = t.gather(ls, vec![1, 0, 1])?; // [3,3,5]
        let rs = t.reshape(g, &[9, 5])?;
        let mn = t.mean(rs, 0)?; // [5]
        let sm = t.sum(st, 1)?; // [2,5]
        let d = t.sub(sm, mn)?;
        let d = t.mul(d, b)?;
        let nr = t.l2_norm(d)?; // [2]
        let xr = t.reshape(x, &[6, 4])?;
        let zs = t.slice(xr, 0, 0, 3)?;
        let mu = t.slice(xr, 0, 3, 3)?;
        let ld = t.gaussian_log_density(zs, mu, lv)?; // [3,3]
        let r1 = t.relu(ld)?;
        let r2 = t.neg(lse)?;
        let r2 = t.scale(r2, 0.3)?;
        let r2 = t.add_scalar(r2, 1.0)?;
        let parts = [
            t.sum_all(nr)?,
            t.mean_all(ld)?,
            t.sum_all(r1)?,
            t.sum_all(r2)?,
        ];
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p)?;
        }
        Ok(acc)
    }
}

#[test]
fn op_zoo_gradients_both_precisions() {
    let zoo = OpZoo::new(5);
    let e64 = grad_check(&zoo, Precision::F64).unwrap();
    assert!(e64 < 1e-6, "f64 error {e64}");
    let e32 = grad_check(&zoo, Precision::F32).unwrap();
    assert!(e32 < 1e-3, "f32 error {e32}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_chain_grad_matches_differences(seed in 0u64..10_000) {
        let zoo = OpZoo::new(seed);
        let err = grad_check(&zoo, Precision::F64).unwrap();
        // Relu kinks can land inside the difference stencil; the bound allows that rarely.
        prop_assert!(err < 1e-4, "seed {} err {}", seed, err);
    }

    #[test]
    fn broadcast_add_matches_manual(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[rows, cols], &mut rng);
        let b = random(&[cols], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.add(va, vb).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(tape.value(y).data()[r * cols + c], a.data()[r * cols + c] + b.data()[c]);
            }
        }
    }
}
