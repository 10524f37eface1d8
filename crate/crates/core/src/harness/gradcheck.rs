//! Finite-difference battery over layers and every loss term.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    adv_loss, cls_loss, ctc_loss, gaussian_kl, mi_loss, svae_loss, total_loss, ClsNorm, LossTerms,
    LossWeights,
};
use crate::model::{reparameterize, sample_noise, Gaussian, ModelConfig, TranSVae};
use crate::nn::{LstmCell, Mlp};
use crate::seed;
use crate::tensor::{grad_check, GradCase, ParamId, ParamSet, Precision, Real, Tape, Tensor, Var};

pub const F32_TOLERANCE: f64 = 1e-3;
pub const F64_TOLERANCE: f64 = 1e-6;

/// Sequences per tiny batch: two source rows then two target rows.
const M: usize = 4;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        frame_dim: 6,
        frames: 3,
        hidden: 4,
        static_dim: 2,
        dynamic_dim: 2,
        relation_dim: 3,
        classes: 3,
        subsets_per_scale: 2,
        exclusive_dynamic: false,
        sigmoid_output: true,
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut noise: Tensor<f64> = sample_noise(shape, rng);
    noise.data_mut().iter_mut().for_each(|v| *v *= scale);
    noise
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[derive(Clone, Debug)]
enum Kind {
    LinearTanh {
        w: ParamId,
        b: ParamId,
        x: Tensor<f64>,
    },
    Mlp {
        mlp: Mlp,
        x: Tensor<f64>,
        labels: Vec<usize>,
    },
    Lstm {
        cell: LstmCell,
        xs: Vec<Tensor<f64>>,
    },
    /// `beta` is applied by the gate; numeric differences see a plain identity.
    GrlNet {
        first: Mlp,
        second: Mlp,
        x: Tensor<f64>,
        beta: f64,
    },
    Kl {
        q: [ParamId; 2],
        p: [ParamId; 2],
    },
    Svae,
    Mi {
        z_d: ParamId,
        post_d: [ParamId; 2],
        z: ParamId,
        post_t: [ParamId; 2],
    },
    Ctc {
        anchor: ParamId,
        positive: ParamId,
        negative: ParamId,
    },
    Adv {
        z: ParamId,
        relations: ParamId,
    },
    Cls {
        relations: ParamId,
        pseudo: Vec<usize>,
        mask: Vec<bool>,
    },
    Total {
        pseudo: Vec<usize>,
        mask: Vec<bool>,
    },
}

/// One named case of the battery.
#[derive(Clone, Debug)]
pub struct BatteryCase {
    pub name: &'static str,
    kind: Kind,
    params: ParamSet<f64>,
    model: Option<TranSVae>,
    x: Tensor<f64>,
    seed: u64,
}

impl BatteryCase {
    fn plain(name: &'static str, params: ParamSet<f64>, kind: Kind, seed: u64) -> Self {
        BatteryCase {
            name,
            kind,
            params,
            model: None,
            x: Tensor::zeros(&[0]),
            seed,
        }
    }

    fn gaussian<F: Real>(t: &mut Tape<F>, ids: [ParamId; 2]) -> Gaussian {
        Gaussian {
            mean: t.param(ids[0]),
            logvar: t.param(ids[1]),
        }
    }

    fn model(&self) -> &TranSVae {
        self.model.as_ref().expect("model case")
    }
}

impl GradCase for BatteryCase {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn build<F: Real>(&self, t: &mut Tape<F>) -> Result<Var> {
        // Recreated per build so every evaluation sees the same noise.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match &self.kind {
            Kind::LinearTanh { w, b, x } => {
                let xv = t.constant(x.cast());
                let (wv, bv) = (t.param(*w), t.param(*b));
                let y = t.linear(xv, wv, bv)?;
                let y = t.tanh(y)?;
                let sq = t.square(y)?;
                t.sum_all(sq)
            }
            Kind::Mlp { mlp, x, labels } => {
                let xv = t.constant(x.cast());
                let logits = mlp.forward(t, xv)?;
                crate::losses::cross_entropy(t, logits, labels)
            }
            Kind::Lstm { cell, xs } => {
                let (mut h, mut c) = cell.zero_state(t, xs[0].shape()[0]);
                for x in xs {
                    let xv = t.constant(x.cast());
                    (h, c) = cell.step(t, xv, h, c)?;
                }
                let sq = t.square(h)?;
                let a = t.sum_all(sq)?;
                let b = t.sum_all(c)?;
                t.add(a, b)
            }
            Kind::GrlNet {
                first,
                second,
                x,
                beta,
            } => {
                let xv = t.constant(x.cast());
                let h = first.forward(t, xv)?;
                let h = t.tanh(h)?;
                let h = t.grl(h, *beta)?;
                let y = second.forward(t, h)?;
                let sq = t.square(y)?;
                t.sum_all(sq)
            }
            Kind::Kl { q, p } => {
                let (q, p) = (Self::gaussian(t, *q), Self::gaussian(t, *p));
                let kl = gaussian_kl(t, q, p)?;
                t.sum_all(kl)
            }
            Kind::Svae => {
                let xv = t.constant(self.x.cast());
                let fwd = self.model().forward(t, xv, Some(&mut rng))?;
                svae_loss(t, xv, &fwd)
            }
            Kind::Mi {
                z_d,
                post_d,
                z,
                post_t,
            } => {
                let (zd, zv) = (t.param(*z_d), t.param(*z));
                let (pd, pt) = (Self::gaussian(t, *post_d), Self::gaussian(t, *post_t));
                mi_loss(t, zd, pd, zv, pt, 10)
            }
            Kind::Ctc {
                anchor,
                positive,
                negative,
            } => {
                let (a, p, n) = (t.param(*anchor), t.param(*positive), t.param(*negative));
                ctc_loss(t, a, p, n, 1.0)
            }
            Kind::Adv { z, relations } => {
                let (zv, rv) = (t.param(*z), t.param(*relations));
                let (f, r, v) = adv_loss(t, self.model(), zv, rv, &[0, 0, 1, 1])?;
                let fr = t.add(f, r)?;
                t.add(fr, v)
            }
            Kind::Cls {
                relations,
                pseudo,
                mask,
            } => {
                let rv = t.param(*relations);
                let logits = self.model().task_logits(t, rv)?;
                let src = t.slice(logits, 0, 0, 2)?;
                let tgt = t.slice(logits, 0, 2, 2)?;
                cls_loss(
                    t,
                    src,
                    &[0, 2],
                    Some((tgt, pseudo, mask)),
                    ClsNorm::Contributing,
                )
            }
            Kind::Total { pseudo, mask } => {
                let model = self.model();
                let xv = t.constant(self.x.cast());
                let fwd = model.forward(t, xv, Some(&mut rng))?;
                let svae = svae_loss(t, xv, &fwd)?;
                let rel = model.relations(t, fwd.z, &model.trn.eval_plan())?;
                let mi = mi_loss(
                    t,
                    fwd.z_d,
                    fwd.post.static_post,
                    fwd.z,
                    fwd.post.dynamic_post,
                    10,
                )?;
                let adv = adv_loss(t, model, fwd.z, rel, &[0, 0, 1, 1])?;
                let reversed: Vec<f64> = {
                    let x = &self.x;
                    let (frames, dim) = (x.shape()[1], x.shape()[2]);
                    x.data()
                        .chunks(frames * dim)
                        .flat_map(|seq| {
                            seq.chunks(dim).rev().flatten().copied().collect::<Vec<_>>()
                        })
                        .collect()
                };
                let xs = t.constant(Tensor::<f64>::new(self.x.shape().to_vec(), reversed)?.cast());
                let post = model.encode(t, xs)?;
                let noise = sample_noise(t.shape(post.static_post.mean), &mut rng);
                let positive = reparameterize(t, post.static_post, Some(noise))?;
                let negative = t.gather(fwd.z_d, vec![2, 3, 0, 1])?;
                let ctc = ctc_loss(t, fwd.z_d, positive, negative, 1.0)?;
                let logits = model.task_logits(t, rel)?;
                let src = t.slice(logits, 0, 0, 2)?;
                let tgt = t.slice(logits, 0, 2, 2)?;
                let cls = cls_loss(
                    t,
                    src,
                    &[1, 0],
                    Some((tgt, pseudo, mask)),
                    ClsNorm::Contributing,
                )?;
                let terms = LossTerms {
                    svae,
                    mi: Some(mi),
                    adv: Some(adv),
                    ctc: Some(ctc),
                    cls: Some(cls),
                };
                let w = LossWeights {
                    mi: 0.5,
                    adv: 0.7,
                    ctc: 1.3,
                    cls: 0.9,
                    margin: 1.0,
                };
                Ok(total_loss(t, &terms, &w)?.0)
            }
        }
    }
}

/// Model case with GRL made transparent so finite differences apply.
fn model_case(
    name: &'static str,
    seed: u64,
    kind: impl FnOnce(&mut ParamSet<f64>, &mut ChaCha8Rng) -> Kind,
) -> Result<BatteryCase> {
    let cfg = tiny_config();
    let (mut model, mut params) = TranSVae::new::<f64>(cfg.clone(), seed)?;
    model.grl.beta = -1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = uniform(&mut rng, &[M, cfg.frames, cfg.frame_dim], 0.05, 0.95);
    let kind = kind(&mut params, &mut rng);
    Ok(BatteryCase {
        name,
        kind,
        params,
        model: Some(model),
        x,
        seed,
    })
}

/// The fixed battery for one seed.
pub fn battery(seed: u64) -> Result<Vec<BatteryCase>> {
    let s = |k: u64| seed::derive(seed, &[k]);
    let mut cases = Vec::new();

    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(1));
        let mut params = ParamSet::new();
        let w = params.add("w", normal(&mut rng, &[3, 4], 0.5));
        let b = params.add("b", normal(&mut rng, &[3], 0.5));
        let x = normal(&mut rng, &[5, 4], 1.0);
        cases.push(BatteryCase::plain(
            "linear_tanh",
            params,
            Kind::LinearTanh { w, b, x },
            s(1),
        ));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(2));
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, &mut rng, "mlp", &[4, 5, 3]);
        let x = normal(&mut rng, &[6, 4], 1.0);
        let labels = (0..6).map(|i| i % 3).collect();
        cases.push(BatteryCase::plain(
            "mlp_cross_entropy",
            params,
            Kind::Mlp { mlp, x, labels },
            s(2),
        ));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(3));
        let mut params = ParamSet::new();
        let cell = LstmCell::new(&mut params, &mut rng, "lstm", 3, 4);
        let xs = (0..3).map(|_| normal(&mut rng, &[2, 3], 1.0)).collect();
        cases.push(BatteryCase::plain(
            "lstm_3step",
            params,
            Kind::Lstm { cell, xs },
            s(3),
        ));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(4));
        let mut params = ParamSet::new();
        let first = Mlp::new(&mut params, &mut rng, "first", &[3, 4]);
        let second = Mlp::new(&mut params, &mut rng, "second", &[4, 2]);
        let x = normal(&mut rng, &[5, 3], 1.0);
        let kind = Kind::GrlNet {
            first,
            second,
            x,
            beta: -1.0,
        };
        cases.push(BatteryCase::plain("grl_net", params, kind, s(4)));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(5));
        let mut params = ParamSet::new();
        let mut pair = |name: &str, rng: &mut ChaCha8Rng| {
            [
                params.add(format!("{name}.mean"), normal(rng, &[4, 3], 1.0)),
                params.add(format!("{name}.logvar"), normal(rng, &[4, 3], 0.5)),
            ]
        };
        let q = pair("q", &mut rng);
        let p = pair("p", &mut rng);
        cases.push(BatteryCase::plain(
            "gaussian_kl",
            params,
            Kind::Kl { q, p },
            s(5),
        ));
    }
    cases.push(model_case("svae_loss", s(6), |_, _| Kind::Svae)?);
    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(7));
        let mut params = ParamSet::new();
        let z_d = params.add("z_d", normal(&mut rng, &[M, 2], 1.0));
        let post_d = [
            params.add("post_d.mean", normal(&mut rng, &[M, 2], 1.0)),
            params.add("post_d.logvar", normal(&mut rng, &[M, 2], 0.3)),
        ];
        let z = params.add("z", normal(&mut rng, &[M, 3, 2], 1.0));
        let post_t = [
            params.add("post_t.mean", normal(&mut rng, &[M, 3, 2], 1.0)),
            params.add("post_t.logvar", normal(&mut rng, &[M, 3, 2], 0.3)),
        ];
        cases.push(BatteryCase::plain(
            "mi_loss_m4",
            params,
            Kind::Mi {
                z_d,
                post_d,
                z,
                post_t,
            },
            s(7),
        ));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(s(8));
        let mut params = ParamSet::new();
        let anchor = params.add("anchor", normal(&mut rng, &[M, 3], 1.0));
        let positive = params.add("positive", normal(&mut rng, &[M, 3], 1.0));
        let negative = params.add("negative", normal(&mut rng, &[M, 3], 1.0));
        cases.push(BatteryCase::plain(
            "ctc_loss",
            params,
            Kind::Ctc {
                anchor,
                positive,
                negative,
            },
            s(8),
        ));
    }
    cases.push(model_case("adv_loss", s(9), |params, rng| Kind::Adv {
        z: params.add("leaf.z", normal(rng, &[M, 3, 2], 1.0)),
        relations: params.add("leaf.relations", normal(rng, &[M, 2, 3], 1.0)),
    })?);
    cases.push(model_case("cls_loss_pseudo", s(10), |params, rng| {
        Kind::Cls {
            relations: params.add("leaf.relations", normal(rng, &[M, 2, 3], 1.0)),
            pseudo: vec![2, 1],
            mask: vec![true, false],
        }
    })?);
    cases.push(model_case("total_loss", s(11), |_, _| Kind::Total {
        pseudo: vec![0, 2],
        mask: vec![true, true],
    })?);
    Ok(cases)
}

/// Worst relative deviation of the gated gradient from `-beta` times the
/// plain gradient on the layers before the gate, and from the plain
/// gradient after it.
fn grl_scaling_error(case: &BatteryCase, beta: f64) -> Result<f64> {
    let Kind::GrlNet {
        first, second, x, ..
    } = &case.kind
    else {
        return Ok(0.0);
    };
    let grads = |beta: f64| -> Result<Vec<Tensor<f64>>> {
        let gated = BatteryCase {
            kind: Kind::GrlNet {
                first: first.clone(),
                second: second.clone(),
                x: x.clone(),
                beta,
            },
            ..case.clone()
        };
        let mut t = Tape::with_params(&case.params);
        let root = gated.build(&mut t)?;
        Ok(t.backward(root)?.param_grads(&case.params))
    };
    let (plain, gated) = (grads(-1.0)?, grads(beta)?);
    let mut worst = 0.0f64;
    for ((name, p), g) in case.params.names().iter().zip(&plain).zip(&gated) {
        let factor = if name.starts_with("first.") {
            -beta
        } else {
            1.0
        };
        for (&a, &b) in p.data().iter().zip(g.data()) {
            let expect = factor * a;
            worst = worst.max((b - expect).abs() / expect.abs().max(1e-12));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub f32_error: f64,
    pub f64_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.f32_error < F32_TOLERANCE && self.f64_error < F64_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            let verdict = if c.passed() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<18} f32 {:.3e}  f64 {:.3e}  {verdict}",
                c.name, c.f32_error, c.f64_error
            )?;
        }
        let verdict = if self.passed() { "passed" } else { "failed" };
        write!(
            f,
            "{} cases {verdict} in {:.1}s",
            self.cases.len(),
            self.seconds
        )
    }
}

/// Runs the whole battery in both precisions.
pub fn run_battery(seed: u64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for case in battery(seed)? {
        let mut f64_error = grad_check(&case, Precision::F64)?;
        if matches!(case.kind, Kind::GrlNet { .. }) {
            f64_error = f64_error.max(grl_scaling_error(&case, 0.7)?);
        }
        cases.push(CaseResult {
            name: case.name,
            f32_error: grad_check(&case, Precision::F32)?,
            f64_error,
        });
    }
    Ok(GradCheckReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}
