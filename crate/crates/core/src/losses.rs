//! Objective terms and their weighted composition.

use crate::error::{Error, Result};
use crate::model::{Forward, Gaussian, TranSVae};
use crate::nn::classify;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Weights of the auxiliary terms; the reconstruction bound has weight one.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub mi: f64,
    pub adv: f64,
    pub ctc: f64,
    pub cls: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mi: 1.0,
            adv: 1.0,
            ctc: 1.0,
            cls: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.mi),
            ("lambda2", self.adv),
            ("lambda3", self.ctc),
            ("lambda4", self.cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ConfigValue {
                    key: name.into(),
                    msg: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Scalar values of every term of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub svae: f64,
    pub mi: f64,
    pub adv_f: f64,
    pub adv_r: f64,
    pub adv_v: f64,
    pub ctc: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossReport {
    pub fn adv(&self) -> f64 {
        self.adv_f + self.adv_r + self.adv_v
    }

    /// The weighted sum recomputed from the individual terms.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.svae + w.mi * self.mi + w.adv * self.adv() + w.ctc * self.ctc + w.cls * self.cls
    }
}

/// Tape handles of the terms of one step. Terms that were not computed are
/// `None` and count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub svae: Var,
    pub mi: Option<Var>,
    pub adv: Option<(Var, Var, Var)>,
    pub ctc: Option<Var>,
    pub cls: Option<Var>,
}

/// Weighted sum of the computed terms, plus its scalar report.
pub fn total_loss<F: Real>(
    t: &mut Tape<F>,
    terms: &LossTerms,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let val = |t: &Tape<F>, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item().f64());
    let mut report = LossReport {
        svae: val(t, Some(terms.svae)),
        mi: val(t, terms.mi),
        ctc: val(t, terms.ctc),
        cls: val(t, terms.cls),
        ..LossReport::default()
    };
    if let Some((f, r, v)) = terms.adv {
        report.adv_f = val(t, Some(f));
        report.adv_r = val(t, Some(r));
        report.adv_v = val(t, Some(v));
    }

    let mut weighted = vec![(terms.svae, 1.0)];
    weighted.extend(terms.mi.map(|v| (v, w.mi)));
    if let Some((f, r, v)) = terms.adv {
        weighted.extend([(f, w.adv), (r, w.adv), (v, w.adv)]);
    }
    weighted.extend(terms.ctc.map(|v| (v, w.ctc)));
    weighted.extend(terms.cls.map(|v| (v, w.cls)));

    let mut total = terms.svae;
    for &(v, lambda) in &weighted[1..] {
        if lambda == 0.0 {
            continue;
        }
        let scaled = t.scale(v, lambda)?;
        total = t.add(total, scaled)?;
    }
    report.total = t.value(total).item().f64();
    Ok((total, report))
}

/// `KL(q || p)` of diagonal Gaussians, summed over the last axis.
pub fn gaussian_kl<F: Real>(t: &mut Tape<F>, q: Gaussian, p: Gaussian) -> Result<Var> {
    let shape = t.shape(q.mean).to_vec();
    for v in [q.logvar, p.mean, p.logvar] {
        if t.shape(v) != shape.as_slice() {
            return Err(Error::shape("gaussian_kl", &shape, t.shape(v)));
        }
    }
    let ratio = t.sub(q.logvar, p.logvar)?;
    let var_ratio = t.exp(ratio)?;
    let diff = t.sub(q.mean, p.mean)?;
    let sq = t.square(diff)?;
    let neg_lp = t.neg(p.logvar)?;
    let inv_p = t.exp(neg_lp)?;
    let maha = t.mul(sq, inv_p)?;
    let a = t.add(var_ratio, maha)?;
    let b = t.sub(a, ratio)?;
    let c = t.add_scalar(b, -1.0)?;
    let axis = shape.len() - 1;
    let s = t.sum(c, axis)?;
    t.scale(s, 0.5)
}

fn standard_normal<F: Real>(t: &mut Tape<F>, like: Var) -> Gaussian {
    let zeros = t.constant(Tensor::zeros(t.shape(like)));
    Gaussian {
        mean: zeros,
        logvar: zeros,
    }
}

/// Negative frame-wise evidence bound averaged over the batch:
/// `sum_t 1/2 |x_t - x^_t|^2 + KL(q(z_d) || N(0, I)) + sum_t KL(q(z_t) || p(z_t | z_<t))`.
pub fn svae_loss<F: Real>(t: &mut Tape<F>, x: Var, fwd: &Forward) -> Result<Var> {
    svae_loss_with_variance(t, x, fwd, 1.0)
}

/// [`svae_loss`] with frame likelihood `N(x^_t, variance I)`; the
/// reconstruction term becomes `|x_t - x^_t|^2 / (2 variance)`.
pub fn svae_loss_with_variance<F: Real>(
    t: &mut Tape<F>,
    x: Var,
    fwd: &Forward,
    variance: f64,
) -> Result<Var> {
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::invalid(
            "svae_loss",
            format!("variance must be positive, got {variance}"),
        ));
    }
    if t.shape(x) != t.shape(fwd.recon) {
        return Err(Error::shape("svae_loss", t.shape(x), t.shape(fwd.recon)));
    }
    let m = t.shape(x)[0] as f64;
    let diff = t.sub(x, fwd.recon)?;
    let sq = t.square(diff)?;
    let recon = t.sum_all(sq)?;
    let recon = t.scale(recon, 0.5 / variance)?;
    let prior_d = standard_normal(t, fwd.post.static_post.mean);
    let kl_d = gaussian_kl(t, fwd.post.static_post, prior_d)?;
    let kl_d = t.sum_all(kl_d)?;
    let kl_t = gaussian_kl(t, fwd.post.dynamic_post, fwd.prior)?;
    let kl_t = t.sum_all(kl_t)?;
    let kl = t.add(kl_d, kl_t)?;
    let s = t.add(recon, kl)?;
    t.scale(s, 1.0 / m)
}

/// Log importance weights of minibatch stratified sampling for a batch of
/// `m` drawn from `n` items: each row puts `1/n` on itself,
/// `(n - m + 1) / (n (m - 1))` on its successor and `1/(m - 1)` on the rest.
pub fn mws_log_weights(m: usize, n: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::invalid(
            "entropy_mws",
            format!("batch of {m} is too small, need at least 2"),
        ));
    }
    if n < m {
        return Err(Error::invalid(
            "entropy_mws",
            format!("dataset size {n} is below batch size {m}"),
        ));
    }
    let (mf, nf) = ((m - 1) as f64, n as f64);
    let own = -nf.ln();
    let successor = ((nf - mf) / (nf * mf)).ln();
    let rest = -mf.ln();
    let mut w = vec![rest; m * m];
    for i in 0..m {
        w[i * m + i] = own;
        w[i * m + (i + 1) % m] = successor;
    }
    Ok(w)
}

/// Minibatch estimate of the entropy of the aggregate posterior:
/// `-1/M sum_i ln sum_j w_ij q(z_i | x_j)`.
pub fn entropy_mws<F: Real>(t: &mut Tape<F>, z: Var, post: Gaussian, n: usize) -> Result<Var> {
    let s = t.shape(z).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("entropy_mws", &s, t.shape(post.mean)));
    }
    let m = s[0];
    let lw = mws_log_weights(m, n)?;
    let logq = t.gaussian_log_density(z, post.mean, post.logvar)?;
    let lw = t.constant(Tensor::from_f64(&[m, m], &lw)?);
    let weighted = t.add(logq, lw)?;
    let marginal = t.logsumexp(weighted)?;
    let mean = t.mean_all(marginal)?;
    t.neg(mean)
}

/// `sum_t [H(z_d) + H(z_t) - H(z_d, z_t)]` over one domain's batch.
///
/// `z_d: [M, dz_d]`, `z: [M, T, dz_t]`; the joint posterior factorizes, so the
/// joint Gaussian is the concatenation of the two.
pub fn mi_loss<F: Real>(
    t: &mut Tape<F>,
    z_d: Var,
    post_d: Gaussian,
    z: Var,
    post_t: Gaussian,
    n: usize,
) -> Result<Var> {
    let s = t.shape(z).to_vec();
    if s.len() != 3 || t.shape(z_d).len() != 2 || t.shape(z_d)[0] != s[0] {
        return Err(Error::shape("mi_loss", t.shape(z_d), &s));
    }
    let frames = s[1];
    let h_d = entropy_mws(t, z_d, post_d, n)?;
    let mut total = t.scale(h_d, frames as f64)?;
    for step in 0..frames {
        let zt = t.select(z, 1, step)?;
        let gt = Gaussian {
            mean: t.select(post_t.mean, 1, step)?,
            logvar: t.select(post_t.logvar, 1, step)?,
        };
        let h_t = entropy_mws(t, zt, gt, n)?;
        let joint_z = t.concat(&[z_d, zt])?;
        let joint = Gaussian {
            mean: t.concat(&[post_d.mean, gt.mean])?,
            logvar: t.concat(&[post_d.logvar, gt.logvar])?,
        };
        let h_joint = entropy_mws(t, joint_z, joint, n)?;
        let part = t.sub(h_t, h_joint)?;
        total = t.add(total, part)?;
    }
    Ok(total)
}

/// Triplet hinge `mean_i max(|a_i - p_i| - |a_i - n_i| + margin, 0)`.
pub fn ctc_loss<F: Real>(
    t: &mut Tape<F>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var> {
    let s = t.shape(anchor).to_vec();
    for v in [positive, negative] {
        if t.shape(v) != s.as_slice() {
            return Err(Error::shape("ctc_loss", &s, t.shape(v)));
        }
    }
    let dp = t.sub(anchor, positive)?;
    let dp = t.l2_norm(dp)?;
    let dn = t.sub(anchor, negative)?;
    let dn = t.l2_norm(dn)?;
    let gap = t.sub(dp, dn)?;
    let shifted = t.add_scalar(gap, margin)?;
    let hinge = t.relu(shifted)?;
    t.mean_all(hinge)
}

/// `-sum_r w_r ln softmax(logits_r)[label_r]` over the rows of `logits`.
fn weighted_nll<F: Real>(
    t: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let shape = t.shape(logits).to_vec();
    let c = *shape.last().unwrap_or(&0);
    let rows = t.value(logits).numel() / c.max(1);
    if labels.len() != rows || weights.len() != rows {
        return Err(Error::invalid(
            "cross_entropy",
            format!(
                "{rows} rows of logits but {} labels and {} weights",
                labels.len(),
                weights.len()
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let mut pick = vec![0.0; rows * c];
    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        pick[r * c + y] = w;
    }
    let pick = t.constant(Tensor::from_f64(&shape, &pick)?);
    let logp = t.log_softmax(logits)?;
    let picked = t.mul(logp, pick)?;
    let s = t.sum_all(picked)?;
    t.neg(s)
}

/// Mean cross-entropy over all rows of `logits`.
pub fn cross_entropy<F: Real>(t: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = weighted_nll(t, logits, labels, &vec![1.0; labels.len()])?;
    t.scale(s, 1.0 / labels.len().max(1) as f64)
}

/// Frame-, relation- and video-level domain confusion terms.
///
/// `z: [M, T, dz]` and `relations: [M, T-1, R]` cover both domains;
/// `domains[i]` is the domain of sequence `i`. Each critic sees its input
/// through the model's gradient reversal layer.
pub fn adv_loss<F: Real>(
    t: &mut Tape<F>,
    model: &TranSVae,
    z: Var,
    relations: Var,
    domains: &[usize],
) -> Result<(Var, Var, Var)> {
    let (zs, rs) = (t.shape(z).to_vec(), t.shape(relations).to_vec());
    if zs.len() != 3 || rs.len() != 3 || zs[0] != rs[0] || zs[0] != domains.len() {
        return Err(Error::shape("adv_loss", &zs, &rs));
    }
    if !(domains.contains(&0) && domains.contains(&1)) {
        return Err(Error::invalid(
            "adv_loss",
            "both domains must be present in the batch",
        ));
    }
    let repeat = |k: usize| {
        domains
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d, k))
            .collect::<Vec<_>>()
    };

    let zr = model.grl.apply(t, z)?;
    let frame_logits = classify(t, &model.frame_critic, zr)?;
    let l_f = cross_entropy(t, frame_logits, &repeat(zs[1]))?;

    let rr = model.grl.apply(t, relations)?;
    let rel_logits = classify(t, &model.relation_critic, rr)?;
    let l_r = cross_entropy(t, rel_logits, &repeat(rs[1]))?;

    let video = t.mean(relations, 1)?;
    let vr = model.grl.apply(t, video)?;
    let video_logits = classify(t, &model.video_critic, vr)?;
    let l_v = cross_entropy(t, video_logits, domains)?;
    Ok((l_f, l_r, l_v))
}

/// Arg-max labels and a confidence mask `max softmax >= eta` per row.
///
/// Confidence is evaluated in log space. Ties go to the lowest class index.
/// With `eta >= 1` only single-class rows are admitted.
pub fn pseudo_label_select<F: Real>(logits: &Tensor<F>, eta: f64) -> (Vec<usize>, Vec<bool>) {
    let c = *logits.shape().last().expect("logits need a class axis");
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for row in logits.data().chunks_exact(c) {
        let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
        let (best, top) =
            row.iter().enumerate().fold(
                (0, row[0]),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &v)| (v - top).exp())
            .sum();
        let log_conf = -rest.ln_1p();
        labels.push(best);
        mask.push(if eta >= 1.0 {
            c == 1
        } else {
            log_conf >= eta.ln()
        });
    }
    (labels, mask)
}

/// How the classification loss is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClsNorm {
    /// Divide by the number of rows that contribute a term.
    #[default]
    Contributing,
    /// Divide by all source and target rows, masked or not.
    AllRows,
}

/// Task cross-entropy over labelled source rows plus confidently
/// pseudo-labelled target rows.
pub fn cls_loss<F: Real>(
    t: &mut Tape<F>,
    source_logits: Var,
    source_labels: &[usize],
    target: Option<(Var, &[usize], &[bool])>,
    norm: ClsNorm,
) -> Result<Var> {
    if source_labels.is_empty() {
        return Err(Error::invalid("cls_loss", "no labelled source rows"));
    }
    let mut total = weighted_nll(
        t,
        source_logits,
        source_labels,
        &vec![1.0; source_labels.len()],
    )?;
    let mut count = source_labels.len();
    let mut rows = source_labels.len();
    if let Some((logits, labels, mask)) = target {
        let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let kept = mask.iter().filter(|&&m| m).count();
        rows += labels.len();
        if kept > 0 {
            let part = weighted_nll(t, logits, labels, &weights)?;
            total = t.add(total, part)?;
            count += kept;
        }
    }
    let denom = match norm {
        ClsNorm::Contributing => count,
        ClsNorm::AllRows => rows,
    };
    t.scale(total, 1.0 / denom as f64)
}
