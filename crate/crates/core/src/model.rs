//! The sequential VAE: frame encoder, static and dynamic posteriors, learned
//! dynamic prior, decoder, and the relation/classifier heads trained on its
//! dynamic latents.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{classify, GradientReversal, Linear, LstmCell, Mlp, SubsetPlan, TrnHead};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frame_dim: usize,
    pub frames: usize,
    pub hidden: usize,
    pub static_dim: usize,
    pub dynamic_dim: usize,
    pub relation_dim: usize,
    pub classes: usize,
    pub subsets_per_scale: usize,
    /// Condition the dynamic posterior at step `t` on frames before `t` only.
    pub exclusive_dynamic: bool,
    /// Squash reconstructions into `[0, 1]` (image data) instead of leaving
    /// them unbounded (standardized features).
    pub sigmoid_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_dim: 16 * 16 * 3,
            frames: 8,
            hidden: 128,
            static_dim: 16,
            dynamic_dim: 16,
            relation_dim: 128,
            classes: 4,
            subsets_per_scale: 3,
            exclusive_dynamic: false,
            sigmoid_output: true,
        }
    }
}

/// Diagonal Gaussian recorded on a tape, parameterized by log-variance.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mean: Var,
    pub logvar: Var,
}

impl Gaussian {
    /// Rows `start..start + len` of the leading axis.
    pub fn rows<F: Real>(self, t: &mut Tape<F>, start: usize, len: usize) -> Result<Gaussian> {
        Ok(Gaussian {
            mean: t.slice(self.mean, 0, start, len)?,
            logvar: t.slice(self.logvar, 0, start, len)?,
        })
    }
}

/// Posteriors of one encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct Posteriors {
    /// `[M, static_dim]`.
    pub static_post: Gaussian,
    /// `[M, T, dynamic_dim]`.
    pub dynamic_post: Gaussian,
}

/// Everything the losses need from one pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub post: Posteriors,
    pub z_d: Var,
    pub z: Var,
    pub prior: Gaussian,
    pub recon: Var,
}

/// Plain-tensor outputs of the swap demo for one pair of batches.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapOutput<F: Real = f32> {
    pub recon_a: Tensor<F>,
    pub recon_b: Tensor<F>,
    /// Dynamics of `a` decoded with a zero static latent.
    pub dynamic_only_a: Tensor<F>,
    pub dynamic_only_b: Tensor<F>,
    /// Dynamics of `a` with the static latent of `b`.
    pub a_with_b_static: Tensor<F>,
    pub b_with_a_static: Tensor<F>,
}

/// Standard normal noise of the given shape, drawn in `f64`.
pub fn sample_noise<F: Real>(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::c(rng.sample::<f64, _>(StandardNormal)))
}

/// `mean + exp(logvar / 2) * noise`; no noise returns the mean itself.
pub fn reparameterize<F: Real>(
    t: &mut Tape<F>,
    g: Gaussian,
    noise: Option<Tensor<F>>,
) -> Result<Var> {
    let Some(noise) = noise else {
        return Ok(g.mean);
    };
    if noise.shape() != t.shape(g.mean) {
        return Err(Error::shape(
            "reparameterize",
            t.shape(g.mean),
            noise.shape(),
        ));
    }
    let half = t.scale(g.logvar, 0.5)?;
    let std = t.exp(half)?;
    let eps = t.constant(noise);
    let spread = t.mul(std, eps)?;
    t.add(g.mean, spread)
}

fn split_gaussian<F: Real>(t: &mut Tape<F>, out: Var, dim: usize) -> Result<Gaussian> {
    let axis = t.shape(out).len() - 1;
    Ok(Gaussian {
        mean: t.slice(out, axis, 0, dim)?,
        logvar: t.slice(out, axis, dim, dim)?,
    })
}

#[derive(Clone, Debug)]
pub struct TranSVae {
    pub config: ModelConfig,
    pub encoder: Linear,
    pub enc_lstm: LstmCell,
    pub static_head: Linear,
    pub dynamic_head: Linear,
    pub prior_lstm: LstmCell,
    pub prior_head: Linear,
    pub decoder: Mlp,
    pub trn: TrnHead,
    pub task_head: Mlp,
    pub frame_critic: Mlp,
    pub relation_critic: Mlp,
    pub video_critic: Mlp,
    pub grl: GradientReversal,
}

impl TranSVae {
    /// Builds the model and its freshly initialized parameters.
    pub fn new<F: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet<F>)> {
        let mut params = ParamSet::new();
        let model = Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed), &mut params)?;
        Ok((model, params))
    }

    pub fn init<F: Real>(
        config: ModelConfig,
        rng: &mut impl Rng,
        params: &mut ParamSet<F>,
    ) -> Result<Self> {
        let c = &config;
        if c.frames < 2 || c.classes == 0 || c.frame_dim == 0 || c.hidden == 0 {
            return Err(Error::invalid("model", format!("degenerate config {c:?}")));
        }
        let h = c.hidden;
        let encoder = Linear::new(params, rng, "encoder", c.frame_dim, h);
        let enc_lstm = LstmCell::new(params, rng, "enc_lstm", h, h);
        let static_head = Linear::new(params, rng, "static_head", h, 2 * c.static_dim);
        let dynamic_head = Linear::new(params, rng, "dynamic_head", h, 2 * c.dynamic_dim);
        let prior_lstm = LstmCell::new(params, rng, "prior_lstm", c.dynamic_dim, h);
        let prior_head = Linear::new(params, rng, "prior_head", h, 2 * c.dynamic_dim);
        let decoder = Mlp::new(
            params,
            rng,
            "decoder",
            &[c.static_dim + c.dynamic_dim, h, c.frame_dim],
        );
        let trn = TrnHead::new(
            params,
            rng,
            "trn",
            c.frames,
            c.dynamic_dim,
            c.relation_dim,
            c.subsets_per_scale,
        )?;
        let task_head = Mlp::new(params, rng, "task_head", &[c.relation_dim, c.classes]);
        let frame_critic = Mlp::new(params, rng, "critic_frame", &[c.dynamic_dim, h, 2]);
        let relation_critic = Mlp::new(params, rng, "critic_relation", &[c.relation_dim, h, 2]);
        let video_critic = Mlp::new(params, rng, "critic_video", &[c.relation_dim, h, 2]);
        Ok(TranSVae {
            config,
            encoder,
            enc_lstm,
            static_head,
            dynamic_head,
            prior_lstm,
            prior_head,
            decoder,
            trn,
            task_head,
            frame_critic,
            relation_critic,
            video_critic,
            grl: GradientReversal::default(),
        })
    }

    fn check_frames<F: Real>(&self, t: &Tape<F>, x: Var) -> Result<usize> {
        let s = t.shape(x);
        if s.len() != 3 || s[1] != self.config.frames || s[2] != self.config.frame_dim {
            let m = s.first().copied().unwrap_or(0);
            return Err(Error::shape(
                "encode",
                s,
                &[m, self.config.frames, self.config.frame_dim],
            ));
        }
        Ok(s[0])
    }

    /// `x: [M, T, D]` to the static and dynamic posteriors.
    pub fn encode<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Posteriors> {
        let m = self.check_frames(t, x)?;
        let frames = self.config.frames;
        let e = self.encoder.forward(t, x)?;
        let e = t.relu(e)?;
        let (mut h, mut c) = self.enc_lstm.zero_state(t, m);
        let mut states = Vec::with_capacity(frames);
        for step in 0..frames {
            let xt = t.select(e, 1, step)?;
            (h, c) = self.enc_lstm.step(t, xt, h, c)?;
            states.push(h);
        }
        let summary = t.stack(&states, 1)?;
        let pooled = t.mean(summary, 1)?;
        let s = self.static_head.forward(t, pooled)?;
        let static_post = split_gaussian(t, s, self.config.static_dim)?;

        let context = if self.config.exclusive_dynamic {
            let zero = t.constant(Tensor::zeros(&[m, self.config.hidden]));
            let mut shifted = vec![zero];
            shifted.extend_from_slice(&states[..frames - 1]);
            t.stack(&shifted, 1)?
        } else {
            summary
        };
        let d = self.dynamic_head.forward(t, context)?;
        let dynamic_post = split_gaussian(t, d, self.config.dynamic_dim)?;
        Ok(Posteriors {
            static_post,
            dynamic_post,
        })
    }

    /// Prior parameters of every step given the dynamic latents `z: [M, T, dz]`.
    /// Step one is the standard normal; later steps read the prior LSTM after
    /// it has consumed `z_1..z_{t-1}`.
    pub fn prior_rollout<F: Real>(&self, t: &mut Tape<F>, z: Var) -> Result<Gaussian> {
        let s = t.shape(z).to_vec();
        let dz = self.config.dynamic_dim;
        if s.len() != 3 || s[1] != self.config.frames || s[2] != dz {
            return Err(Error::shape(
                "prior_rollout",
                &s,
                &[s.first().copied().unwrap_or(0), self.config.frames, dz],
            ));
        }
        let m = s[0];
        let zero = t.constant(Tensor::zeros(&[m, dz]));
        let (mut means, mut logvars) = (vec![zero], vec![zero]);
        let (mut h, mut c) = self.prior_lstm.zero_state(t, m);
        for step in 1..self.config.frames {
            let prev = t.select(z, 1, step - 1)?;
            (h, c) = self.prior_lstm.step(t, prev, h, c)?;
            let out = self.prior_head.forward(t, h)?;
            let g = split_gaussian(t, out, dz)?;
            means.push(g.mean);
            logvars.push(g.logvar);
        }
        Ok(Gaussian {
            mean: t.stack(&means, 1)?,
            logvar: t.stack(&logvars, 1)?,
        })
    }

    /// Reconstruction means `[M, T, D]` from `z_d: [M, dz_d]` and `z: [M, T, dz_t]`.
    pub fn decode<F: Real>(&self, t: &mut Tape<F>, z_d: Var, z: Var) -> Result<Var> {
        let (sd, sz) = (t.shape(z_d).to_vec(), t.shape(z).to_vec());
        let c = &self.config;
        if sd.len() != 2
            || sz.len() != 3
            || sd[0] != sz[0]
            || sd[1] != c.static_dim
            || sz[2] != c.dynamic_dim
        {
            return Err(Error::shape("decode", &sd, &sz));
        }
        let tiled = t.stack(&vec![z_d; sz[1]], 1)?;
        let joined = t.concat(&[tiled, z])?;
        let out = self.decoder.forward(t, joined)?;
        if c.sigmoid_output {
            t.sigmoid(out)
        } else {
            Ok(out)
        }
    }

    /// Encode, sample, roll out the prior and decode. Without an rng the
    /// latents are the posterior means.
    pub fn forward<F: Real>(
        &self,
        t: &mut Tape<F>,
        x: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        let post = self.encode(t, x)?;
        let (nd, nz) = match rng {
            Some(rng) => {
                let nd = sample_noise(t.shape(post.static_post.mean), rng);
                let nz = sample_noise(t.shape(post.dynamic_post.mean), rng);
                (Some(nd), Some(nz))
            }
            None => (None, None),
        };
        let z_d = reparameterize(t, post.static_post, nd)?;
        let z = reparameterize(t, post.dynamic_post, nz)?;
        let prior = self.prior_rollout(t, z)?;
        let recon = self.decode(t, z_d, z)?;
        Ok(Forward {
            post,
            z_d,
            z,
            prior,
            recon,
        })
    }

    /// Relation features `[M, T-1, R]` of dynamic latents.
    pub fn relations<F: Real>(&self, t: &mut Tape<F>, z: Var, plan: &SubsetPlan) -> Result<Var> {
        self.trn.features(t, z, plan)
    }

    /// Task logits `[M, C]` from relation features: the head reads their mean
    /// over scales.
    pub fn task_logits<F: Real>(&self, t: &mut Tape<F>, relations: Var) -> Result<Var> {
        let video = t.mean(relations, 1)?;
        classify(t, &self.task_head, video)
    }

    /// Eval-mode class predictions for a batch of sequences.
    pub fn predict<F: Real>(&self, params: &ParamSet<F>, x: &Tensor<F>) -> Result<Vec<usize>> {
        let mut t = Tape::frozen(params);
        let xv = t.constant(x.clone());
        let post = self.encode(&mut t, xv)?;
        let rel = self.relations(&mut t, post.dynamic_post.mean, &self.trn.eval_plan())?;
        let logits = self.task_logits(&mut t, rel)?;
        Ok(argmax_rows(t.value(logits)))
    }

    /// Eval-mode posterior means `(z_d [M, dz_d], z [M, T, dz_t])`.
    pub fn latent_means<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut t = Tape::frozen(params);
        let xv = t.constant(x.clone());
        let post = self.encode(&mut t, xv)?;
        Ok((
            t.value(post.static_post.mean).clone(),
            t.value(post.dynamic_post.mean).clone(),
        ))
    }

    /// Eval-mode reconstructions with and without exchanged static latents.
    pub fn swap_static<F: Real>(
        &self,
        params: &ParamSet<F>,
        a: &Tensor<F>,
        b: &Tensor<F>,
    ) -> Result<SwapOutput<F>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("swap_static", a.shape(), b.shape()));
        }
        let mut t = Tape::frozen(params);
        let (xa, xb) = (t.constant(a.clone()), t.constant(b.clone()));
        let pa = self.encode(&mut t, xa)?;
        let pb = self.encode(&mut t, xb)?;
        let (da, za) = (pa.static_post.mean, pa.dynamic_post.mean);
        let (db, zb) = (pb.static_post.mean, pb.dynamic_post.mean);
        let zero = t.constant(Tensor::zeros(t.shape(da)));
        let outs = [
            (da, za),
            (db, zb),
            (zero, za),
            (zero, zb),
            (db, za),
            (da, zb),
        ]
        .into_iter()
        .map(|(d, z)| self.decode(&mut t, d, z).map(|v| t.value(v).clone()))
        .collect::<Result<Vec<_>>>()?;
        let [recon_a, recon_b, dynamic_only_a, dynamic_only_b, a_with_b_static, b_with_a_static] =
            <[Tensor<F>; 6]>::try_from(outs).expect("six decodes");
        Ok(SwapOutput {
            recon_a,
            recon_b,
            dynamic_only_a,
            dynamic_only_b,
            a_with_b_static,
            b_with_a_static,
        })
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<F: Real>(logits: &Tensor<F>) -> Vec<usize> {
    let c = *logits.shape().last().expect("non-scalar logits");
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, row[0]),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
