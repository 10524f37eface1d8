//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use transvae_core::losses::{entropy_mws, gaussian_kl, mi_loss};
use transvae_core::model::Gaussian;
use transvae_core::nn::{GradientReversal, Mlp};
use transvae_core::tensor::{ParamSet, Tape, Tensor};

pub fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Diagonal Gaussian as plain vectors.
#[derive(Clone, Debug)]
pub struct Diag {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl Diag {
    pub fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Diag {
            mean: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            logvar: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        z.iter()
            .zip(&self.mean)
            .zip(&self.logvar)
            .map(|((z, m), lv)| -0.5 * (ln2pi + lv + (z - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// Closed-form KL evaluated by the library.
pub fn kl_closed(q: &Diag, p: &Diag) -> f64 {
    let d = q.mean.len();
    let mut t = Tape::<f64>::new();
    let mut c = |v: &[f64]| t.constant(Tensor::from_f64(&[d], v).unwrap());
    let (qm, ql, pm, pl) = (c(&q.mean), c(&q.logvar), c(&p.mean), c(&p.logvar));
    let kl = gaussian_kl(
        &mut t,
        Gaussian {
            mean: qm,
            logvar: ql,
        },
        Gaussian {
            mean: pm,
            logvar: pl,
        },
    )
    .unwrap();
    t.value(kl).item()
}

/// Monte-Carlo `E_q[ln q(z) - ln p(z)]` from `samples` draws taken in
/// antithetic pairs.
pub fn kl_monte_carlo(q: &Diag, p: &Diag, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let d = q.mean.len();
    let std: Vec<f64> = q.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
    let (mut z, mut w) = (vec![0.0; d], vec![0.0; d]);
    let mut acc = 0.0;
    for _ in 0..samples / 2 {
        for k in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            z[k] = q.mean[k] + std[k] * e;
            w[k] = q.mean[k] - std[k] * e;
        }
        acc += q.log_density(&z) - p.log_density(&z) + q.log_density(&w) - p.log_density(&w);
    }
    acc / (2 * (samples / 2)) as f64
}

/// Entropy estimate for a batch where every posterior is `N(0, s^2)` in one
/// dimension and the samples are drawn from it.
pub fn shared_posterior_entropy(m: usize, n: usize, std: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normals(&mut rng, m, std);
    let mut t = Tape::<f64>::new();
    let zv = t.constant(Tensor::from_f64(&[m, 1], &z).unwrap());
    let mean = t.constant(Tensor::zeros(&[m, 1]));
    let logvar = t.constant(Tensor::full(&[m, 1], 2.0 * std.ln()));
    let h = entropy_mws(&mut t, zv, Gaussian { mean, logvar }, n).unwrap();
    t.value(h).item()
}

/// Mutual-information estimate for one step with `d`-dimensional static and
/// dynamic latents. Posterior means are standard normal across the batch and
/// every posterior has standard deviation `std`. With `dependent` the dynamic
/// latent is an exact copy of the static one, otherwise both are drawn
/// independently.
pub fn crafted_mi(m: usize, d: usize, std: f64, dependent: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let md = normals(&mut rng, m * d, 1.0);
    let zd: Vec<f64> = md
        .iter()
        .zip(normals(&mut rng, m * d, std))
        .map(|(a, b)| a + b)
        .collect();
    let (mt, zt) = if dependent {
        (md.clone(), zd.clone())
    } else {
        let mt = normals(&mut rng, m * d, 1.0);
        let zt = mt
            .iter()
            .zip(normals(&mut rng, m * d, std))
            .map(|(a, b)| a + b)
            .collect();
        (mt, zt)
    };
    let lv = vec![2.0 * std.ln(); m * d];
    let mut t = Tape::<f64>::new();
    let mut c = |v: &[f64], s: &[usize]| t.constant(Tensor::from_f64(s, v).unwrap());
    let zdv = c(&zd, &[m, d]);
    let pd = Gaussian {
        mean: c(&md, &[m, d]),
        logvar: c(&lv, &[m, d]),
    };
    let ztv = c(&zt, &[m, 1, d]);
    let pt = Gaussian {
        mean: c(&mt, &[m, 1, d]),
        logvar: c(&lv, &[m, 1, d]),
    };
    let mi = mi_loss(&mut t, zdv, pd, ztv, pt, m).unwrap();
    t.value(mi).item()
}

/// Worst deviation of the reversal contract on a random two-layer net:
/// forward values through the gate must be bitwise equal, and the input
/// gradient must equal `-beta` times the gradient without the gate. Returns
/// the forward check and the worst relative gradient deviation.
pub fn grl_contract(seed: u64, beta: f64) -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::<f64>::new();
    let trunk = Mlp::new(&mut params, &mut rng, "trunk", &[5, 7, 4]);
    let head = Mlp::new(&mut params, &mut rng, "head", &[4, 6, 1]);
    let x = Tensor::from_f64(&[3, 5], &normals(&mut rng, 15, 1.0)).unwrap();

    let run = |gate: Option<GradientReversal>| {
        let mut t = Tape::frozen(&params);
        let xv = t.leaf(x.clone());
        let h = trunk.forward(&mut t, xv).unwrap();
        let h = t.tanh(h).unwrap();
        let g = match gate {
            Some(gate) => gate.apply(&mut t, h).unwrap(),
            None => h,
        };
        let exact = t.value(g) == t.value(h);
        let y = head.forward(&mut t, g).unwrap();
        let sq = t.square(y).unwrap();
        let root = t.sum_all(sq).unwrap();
        let grads = t.backward(root).unwrap();
        (exact, grads.get(xv).unwrap().to_f64_vec())
    };
    let (_, base) = run(None);
    let (exact, gated) = run(Some(GradientReversal { beta }));
    let worst = base
        .iter()
        .zip(&gated)
        .map(|(b, g)| (g - (-beta * b)).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);
    (exact, worst)
}
