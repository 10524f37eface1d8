//! Layer zoo: linear stacks, the LSTM cell, gradient reversal and the
//! temporal relation network.

use itertools::Itertools;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var};

fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::c(rng.random_range(-bound..bound)))
}

/// Fully connected layer `y = x W^T + b` with `W: out x in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform(rng, &[out_dim, in_dim], bound),
        );
        let bias = params.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        let (w, b) = (t.param(self.weight), t.param(self.bias));
        t.linear(x, w, b)
    }

    pub fn zero<F: Real>(&self, params: &mut ParamSet<F>) {
        for id in [self.weight, self.bias] {
            params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = F::zero());
        }
    }
}

/// Linear layers with ReLU between them and raw output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<F: Real>(
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(params, rng, &format!("{name}.{i}"), d[0], d[1]))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = t.relu(h)?;
            }
            h = layer.forward(t, h)?;
        }
        Ok(h)
    }

    pub fn zero<F: Real>(&self, params: &mut ParamSet<F>) {
        self.layers.iter().for_each(|l| l.zero(params));
    }
}

/// Raw logits of a classifier head; softmax is left to the losses.
pub fn classify<F: Real>(t: &mut Tape<F>, head: &Mlp, features: Var) -> Result<Var> {
    let last = t.shape(features).last().copied().unwrap_or(0);
    if last != head.in_dim() {
        return Err(Error::shape(
            "classify",
            t.shape(features),
            &[head.in_dim(), head.out_dim()],
        ));
    }
    head.forward(t, features)
}

/// Standard LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<F: Real>(
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let input = Linear::new(params, rng, &format!("{name}.input"), in_dim, 4 * hidden);
        let recurrent = Linear::new(
            params,
            rng,
            &format!("{name}.recurrent"),
            hidden,
            4 * hidden,
        );
        // Start with the forget gate open.
        let bias = params.get_mut(input.bias).data_mut();
        bias[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = F::one());
        LstmCell {
            input,
            recurrent,
            hidden,
        }
    }

    pub fn zero_state<F: Real>(&self, t: &mut Tape<F>, batch: usize) -> (Var, Var) {
        let h = t.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = t.constant(Tensor::zeros(&[batch, self.hidden]));
        (h, c)
    }

    /// One step of the recurrence; `x: [batch, in]`, `h, c: [batch, hidden]`.
    pub fn step<F: Real>(&self, t: &mut Tape<F>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        for state in [h, c] {
            if t.shape(state) != [t.shape(x)[0], self.hidden] {
                return Err(Error::shape(
                    "lstm_step",
                    t.shape(state),
                    &[t.shape(x)[0], self.hidden],
                ));
            }
        }
        let gx = self.input.forward(t, x)?;
        let gh = self.recurrent.forward(t, h)?;
        let gates = t.add(gx, gh)?;
        let hs = self.hidden;
        let i = t.slice(gates, 1, 0, hs)?;
        let i = t.sigmoid(i)?;
        let f = t.slice(gates, 1, hs, hs)?;
        let f = t.sigmoid(f)?;
        let g = t.slice(gates, 1, 2 * hs, hs)?;
        let g = t.tanh(g)?;
        let o = t.slice(gates, 1, 3 * hs, hs)?;
        let o = t.sigmoid(o)?;
        let keep = t.mul(f, c)?;
        let write = t.mul(i, g)?;
        let c_next = t.add(keep, write)?;
        let squashed = t.tanh(c_next)?;
        let h_next = t.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Identity on the forward pass, gradient scaled by `-beta` on the way back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    pub beta: f64,
}

impl Default for GradientReversal {
    fn default() -> Self {
        GradientReversal { beta: 1.0 }
    }
}

impl GradientReversal {
    pub fn apply<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        t.grl(x, self.beta)
    }
}

/// Ordered frame-index subsets per relation scale `n = 2..=frames`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPlan {
    pub scales: Vec<Vec<Vec<usize>>>,
}

impl SubsetPlan {
    /// The lexicographically first `per_scale` subsets of every scale.
    pub fn first(frames: usize, per_scale: usize) -> Self {
        let scales = (2..=frames)
            .map(|n| (0..frames).combinations(n).take(per_scale).collect())
            .collect();
        SubsetPlan { scales }
    }

    /// `per_scale` distinct subsets drawn uniformly for every scale, listed in
    /// lexicographic order.
    pub fn sample(frames: usize, per_scale: usize, rng: &mut impl Rng) -> Self {
        let scales = (2..=frames)
            .map(|n| {
                let all: Vec<Vec<usize>> = (0..frames).combinations(n).collect();
                let k = per_scale.min(all.len());
                let mut picked = index::sample(rng, all.len(), k).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| all[i].clone()).collect()
            })
            .collect();
        SubsetPlan { scales }
    }
}

/// Multi-scale temporal relation network.
///
/// Scale `n` concatenates `n` frame latents in temporal order, maps them with
/// its own layer `g_n`, averages over the sampled subsets and passes the result
/// through a fusion layer shared by all scales.
#[derive(Clone, Debug)]
pub struct TrnHead {
    pub scales: Vec<Linear>,
    pub fusion: Linear,
    pub frames: usize,
    pub latent_dim: usize,
    pub relation_dim: usize,
    pub subsets_per_scale: usize,
}

impl TrnHead {
    pub fn new<F: Real>(
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        frames: usize,
        latent_dim: usize,
        relation_dim: usize,
        subsets_per_scale: usize,
    ) -> Result<Self> {
        if frames < 2 {
            return Err(Error::invalid(
                "trn",
                format!("need at least 2 frames, got {frames}"),
            ));
        }
        let scales = (2..=frames)
            .map(|n| {
                Linear::new(
                    params,
                    rng,
                    &format!("{name}.scale{n}"),
                    n * latent_dim,
                    relation_dim,
                )
            })
            .collect();
        let fusion = Linear::new(
            params,
            rng,
            &format!("{name}.fusion"),
            relation_dim,
            relation_dim,
        );
        Ok(TrnHead {
            scales,
            fusion,
            frames,
            latent_dim,
            relation_dim,
            subsets_per_scale,
        })
    }

    pub fn eval_plan(&self) -> SubsetPlan {
        SubsetPlan::first(self.frames, self.subsets_per_scale)
    }

    pub fn sample_plan(&self, rng: &mut impl Rng) -> SubsetPlan {
        SubsetPlan::sample(self.frames, self.subsets_per_scale, rng)
    }

    /// `z: [batch, frames, latent] -> [batch, frames - 1, relation]`; row
    /// `n - 2` holds the scale-`n` feature.
    pub fn features<F: Real>(&self, t: &mut Tape<F>, z: Var, plan: &SubsetPlan) -> Result<Var> {
        let shape = t.shape(z).to_vec();
        if shape.len() != 3 || shape[1] != self.frames || shape[2] != self.latent_dim {
            return Err(Error::shape(
                "trn_features",
                &shape,
                &[
                    shape.first().copied().unwrap_or(0),
                    self.frames,
                    self.latent_dim,
                ],
            ));
        }
        if plan.scales.len() != self.scales.len() {
            return Err(Error::invalid(
                "trn_features",
                "subset plan does not match frame count",
            ));
        }
        let frames: Vec<Var> = (0..self.frames)
            .map(|i| t.select(z, 1, i))
            .collect::<Result<_>>()?;
        let mut per_scale = Vec::with_capacity(self.scales.len());
        for (layer, subsets) in self.scales.iter().zip(&plan.scales) {
            let mut acc: Option<Var> = None;
            for subset in subsets {
                let parts: Vec<Var> = subset.iter().map(|&i| frames[i]).collect();
                let joined = t.concat(&parts)?;
                let h = layer.forward(t, joined)?;
                let h = t.relu(h)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, h)?,
                    None => h,
                });
            }
            let mean = t.scale(
                acc.expect("at least one subset per scale"),
                1.0 / subsets.len() as f64,
            )?;
            let fused = self.fusion.forward(t, mean)?;
            per_scale.push(t.relu(fused)?);
        }
        t.stack(&per_scale, 1)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, GradCase, Precision};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random<F: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
        uniform(rng, shape, 1.0)
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let mut params = ParamSet::<f32>::new();
        let cell = LstmCell::new(&mut params, &mut rng(0), "lstm", 3, 5);
        cell.input.zero(&mut params);
        cell.recurrent.zero(&mut params);
        let mut t = Tape::frozen(&params);
        let x = t.constant(random(&[2, 3], &mut rng(1)));
        let (h, c) = cell.zero_state(&mut t, 2);
        let (h, c) = cell.step(&mut t, x, h, c).unwrap();
        assert!(t.value(h).data().iter().all(|&v| v == 0.0));
        assert!(t.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_wrong_hidden_size() {
        let mut params = ParamSet::<f32>::new();
        let cell = LstmCell::new(&mut params, &mut rng(0), "lstm", 3, 5);
        let mut t = Tape::frozen(&params);
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let h = t.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            cell.step(&mut t, x, h, h),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn lstm_is_deterministic() {
        let run = || {
            let mut params = ParamSet::<f32>::new();
            let cell = LstmCell::new(&mut params, &mut rng(9), "lstm", 3, 4);
            let mut t = Tape::frozen(&params);
            let x = t.constant(Tensor::full(&[2, 3], 0.3));
            let (mut h, mut c) = cell.zero_state(&mut t, 2);
            for _ in 0..4 {
                (h, c) = cell.step(&mut t, x, h, c).unwrap();
            }
            t.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    pub(crate) struct LstmUnroll {
        params: ParamSet<f64>,
        cell: LstmCell,
        inputs: Vec<Tensor<f64>>,
    }

    impl LstmUnroll {
        pub(crate) fn new(seed: u64) -> Self {
            let mut r = rng(seed);
            let mut params = ParamSet::new();
            let cell = LstmCell::new(&mut params, &mut r, "lstm", 3, 4);
            let inputs = (0..3).map(|_| random(&[2, 3], &mut r)).collect();
            LstmUnroll {
                params,
                cell,
                inputs,
            }
        }
    }

    impl GradCase for LstmUnroll {
        fn params(&self) -> &ParamSet<f64> {
            &self.params
        }

        fn build<F: Real>(&self, t: &mut Tape<F>) -> Result<Var> {
            let (mut h, mut c) = self.cell.zero_state(t, 2);
            for x in &self.inputs {
                let x = t.constant(x.cast());
                (h, c) = self.cell.step(t, x, h, c)?;
            }
            let sq = t.square(h)?;
            let a = t.sum_all(sq)?;
            let b = t.sum_all(c)?;
            t.add(a, b)
        }
    }

    #[test]
    fn lstm_three_step_gradients() {
        let case = LstmUnroll::new(4);
        assert!(grad_check(&case, Precision::F64).unwrap() < 1e-6);
        assert!(grad_check(&case, Precision::F32).unwrap() < 1e-4);
    }

    #[test]
    fn grl_scales_gradient() {
        for beta in [0.0, 1.0, 2.5] {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap());
            let y = GradientReversal { beta }.apply(&mut t, x).unwrap();
            assert_eq!(t.value(y), t.value(x));
            let sq = t.square(y).unwrap();
            let root = t.sum_all(sq).unwrap();
            let g = t.backward(root).unwrap();
            let expected: Vec<f64> = [2.0, -4.0, 6.0].iter().map(|v| -beta * v).collect();
            assert_eq!(g.get(x).unwrap().data(), expected.as_slice());
        }
    }

    #[test]
    fn first_plan_is_lexicographic() {
        let plan = SubsetPlan::first(4, 3);
        assert_eq!(plan.scales.len(), 3);
        assert_eq!(plan.scales[0], vec![vec![0, 1], vec![0, 2], vec![0, 3]]);
        assert_eq!(plan.scales[2], vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn sampled_plan_is_seeded_and_sorted() {
        let a = SubsetPlan::sample(8, 3, &mut rng(1));
        let b = SubsetPlan::sample(8, 3, &mut rng(1));
        assert_eq!(a, b);
        for (n, subsets) in a.scales.iter().enumerate() {
            assert_eq!(subsets.len(), 3.min(binomial(8, n + 2)));
            for s in subsets {
                assert_eq!(s.len(), n + 2);
                assert!(s.windows(2).all(|w| w[0] < w[1]));
            }
            assert!(subsets.windows(2).all(|w| w[0] < w[1]));
        }
    }

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn trn_shapes() {
        for (frames, expected) in [(2, 1), (8, 7)] {
            let mut params = ParamSet::<f32>::new();
            let trn = TrnHead::new(&mut params, &mut rng(0), "trn", frames, 4, 6, 3).unwrap();
            let mut t = Tape::frozen(&params);
            let z = t.constant(random(&[5, frames, 4], &mut rng(2)));
            let out = trn.features(&mut t, z, &trn.eval_plan()).unwrap();
            assert_eq!(t.shape(out), &[5, expected, 6]);
        }
        let mut params = ParamSet::<f32>::new();
        assert!(TrnHead::new(&mut params, &mut rng(0), "trn", 1, 4, 6, 3).is_err());
    }

    #[test]
    fn trn_is_order_sensitive() {
        let mut params = ParamSet::<f32>::new();
        let trn = TrnHead::new(&mut params, &mut rng(3), "trn", 8, 4, 6, 3).unwrap();
        let z: Tensor<f32> = random(&[2, 8, 4], &mut rng(4));
        let mut reversed = Vec::new();
        for b in 0..2 {
            for f in (0..8).rev() {
                reversed.extend_from_slice(&z.data()[(b * 8 + f) * 4..(b * 8 + f + 1) * 4]);
            }
        }
        let reversed = Tensor::new(vec![2, 8, 4], reversed).unwrap();
        let mut t = Tape::frozen(&params);
        let plan = trn.eval_plan();
        let (a, b) = (t.constant(z), t.constant(reversed));
        let fa = trn.features(&mut t, a, &plan).unwrap();
        let fb = trn.features(&mut t, b, &plan).unwrap();
        let sa = t.select(fa, 1, 0).unwrap();
        let sb = t.select(fb, 1, 0).unwrap();
        assert_ne!(t.value(sa), t.value(sb));
    }

    #[test]
    fn classifier_shapes_and_zero_head() {
        let mut params = ParamSet::<f32>::new();
        let head = Mlp::new(&mut params, &mut rng(0), "gf", &[4, 8, 2]);
        let mut t = Tape::frozen(&params);
        let z = t.constant(random(&[3, 8, 4], &mut rng(1)));
        let logits = classify(&mut t, &head, z).unwrap();
        assert_eq!(t.shape(logits), &[3, 8, 2]);
        let pooled = t.mean(z, 1).unwrap();
        let logits = classify(&mut t, &head, pooled).unwrap();
        assert_eq!(t.shape(logits), &[3, 2]);
        let wrong = t.constant(Tensor::zeros(&[3, 5]));
        assert!(classify(&mut t, &head, wrong).is_err());

        head.zero(&mut params);
        let mut t = Tape::frozen(&params);
        let z = t.constant(random(&[3, 4], &mut rng(1)));
        let logits = classify(&mut t, &head, z).unwrap();
        assert!(t.value(logits).data().iter().all(|&v| v == 0.0));
        let lp = t.log_softmax(logits).unwrap();
        assert!(t
            .value(lp)
            .data()
            .iter()
            .all(|&v| (v + std::f32::consts::LN_2).abs() < 1e-7));
    }
}
