use std::fs;
use std::path::Path;

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::evaluate::{accuracy, build_model, task_logits};
use super::metrics::{read_metrics, write_metrics, MetricsRow};
use super::{Corpus, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
use crate::data::{epoch_plan, shuffle_frames, Dataset, SequenceBatch, StepIndices};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, cls_loss, ctc_loss, mi_loss, pseudo_label_select, svae_loss_with_variance,
    total_loss, LossReport, LossTerms, LossWeights,
};
use crate::model::{reparameterize, sample_noise, TranSVae};
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, ParamSet, Tape, Tensor};

const STEP_TAG: u64 = 0x7374_6570;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the run directory.
    pub resume: bool,
    /// Stop (and checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

/// Target pseudo-labels of one epoch, indexed by dataset position.
struct PseudoLabels {
    table: Vec<Option<(usize, bool)>>,
    coverage: f64,
}

impl PseudoLabels {
    fn none(n: usize) -> Self {
        PseudoLabels {
            table: vec![None; n],
            coverage: 0.0,
        }
    }

    fn snapshot(&self, ds: &Dataset) -> Vec<(u8, bool)> {
        ds.domain_indices(1)
            .iter()
            .map(|&i| self.table[i].map_or((0, false), |(y, m)| (y as u8, m)))
            .collect()
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    weights: LossWeights,
    train: &'a Dataset,
    model: TranSVae,
    params: ParamSet<f32>,
    adam: AdamState<f32>,
    domain_sizes: [usize; 2],
}

impl Trainer<'_> {
    /// Labels the target half of the training split with the current
    /// (previous-epoch) weights.
    fn pseudo_labels(&self, epoch: usize) -> Result<PseudoLabels> {
        let mut out = PseudoLabels::none(self.train.len());
        if !self.cfg.pseudo_labels_at(epoch) {
            return Ok(out);
        }
        let target = self.train.domain_indices(1);
        let logits = task_logits(&self.model, &self.params, self.train, &target)?;
        let (labels, mask) = pseudo_label_select(&logits, self.cfg.eta);
        for (k, &i) in target.iter().enumerate() {
            out.table[i] = Some((labels[k], mask[k]));
        }
        out.coverage = mask.iter().filter(|&&m| m).count() as f64 / target.len().max(1) as f64;
        Ok(out)
    }

    fn step(
        &mut self,
        indices: &StepIndices,
        epoch: usize,
        step: usize,
        pseudo: &PseudoLabels,
    ) -> Result<(LossReport, f64)> {
        let cfg = self.cfg;
        let w = &self.weights;
        let model = &self.model;
        let mut rng = seed::stream(cfg.seed, &[STEP_TAG, epoch as u64, step as u64]);
        let src = SequenceBatch::gather(self.train, &indices.source, true)?;
        let tgt = SequenceBatch::gather(self.train, &indices.target, false)?;
        let (h, m) = (src.len(), src.len() + tgt.len());
        let (frames, dim) = (self.train.frames, self.train.dim);
        let mut data = src.frames.data().to_vec();
        data.extend_from_slice(tgt.frames.data());
        let x = Tensor::new(vec![m, frames, dim], data)?;
        let domains: Vec<usize> = src.domains.iter().chain(&tgt.domains).copied().collect();

        let mut t = Tape::with_params(&self.params);
        let xv = t.constant(x.clone());
        let fwd = model.forward(&mut t, xv, Some(&mut rng))?;
        let svae = svae_loss_with_variance(&mut t, xv, &fwd, cfg.recon_variance)?;
        let plan = model.trn.sample_plan(&mut rng);
        let relations = if w.adv > 0.0 || w.cls > 0.0 {
            Some(model.relations(&mut t, fwd.z, &plan)?)
        } else {
            None
        };

        let mi = if w.mi > 0.0 {
            let mut sum = None;
            for (start, len, n) in [
                (0, h, self.domain_sizes[0]),
                (h, m - h, self.domain_sizes[1]),
            ] {
                let z_d = t.slice(fwd.z_d, 0, start, len)?;
                let z = t.slice(fwd.z, 0, start, len)?;
                let pd = fwd.post.static_post.rows(&mut t, start, len)?;
                let pt = fwd.post.dynamic_post.rows(&mut t, start, len)?;
                let part = mi_loss(&mut t, z_d, pd, z, pt, n)?;
                sum = Some(match sum {
                    Some(s) => t.add(s, part)?,
                    None => part,
                });
            }
            Some(t.scale(sum.unwrap(), 0.5)?)
        } else {
            None
        };

        let adv = match relations {
            Some(rel) if w.adv > 0.0 => Some(adv_loss(&mut t, model, fwd.z, rel, &domains)?),
            _ => None,
        };

        let ctc = if w.ctc > 0.0 {
            let mut shuffled = Vec::with_capacity(x.numel());
            for i in 0..m {
                shuffled.extend(shuffle_frames(x.row(i), frames, &mut rng)?.0);
            }
            let xs = t.constant(Tensor::new(vec![m, frames, dim], shuffled)?);
            let post = model.encode(&mut t, xs)?;
            let noise = sample_noise(t.shape(post.static_post.mean), &mut rng);
            let positive = reparameterize(&mut t, post.static_post, Some(noise))?;
            let other: Vec<usize> = (0..m)
                .map(|i| {
                    if i < h {
                        h + rng.random_range(0..m - h)
                    } else {
                        rng.random_range(0..h)
                    }
                })
                .collect();
            let negative = t.gather(fwd.z_d, other)?;
            Some(ctc_loss(&mut t, fwd.z_d, positive, negative, w.margin)?)
        } else {
            None
        };

        let cls = match relations {
            Some(rel) if w.cls > 0.0 => {
                let logits = model.task_logits(&mut t, rel)?;
                let src_logits = t.slice(logits, 0, 0, h)?;
                let labels = src
                    .labels()
                    .ok_or_else(|| Error::invalid("train", "source batch without labels"))?;
                let picked: Vec<(usize, bool)> = indices
                    .target
                    .iter()
                    .filter_map(|&i| pseudo.table[i])
                    .collect();
                let target = if picked.len() == tgt.len() {
                    let tgt_logits = t.slice(logits, 0, h, m - h)?;
                    let (y, mask): (Vec<usize>, Vec<bool>) = picked.into_iter().unzip();
                    Some((tgt_logits, y, mask))
                } else {
                    None
                };
                let target = target
                    .as_ref()
                    .map(|(l, y, mk)| (*l, y.as_slice(), mk.as_slice()));
                Some(cls_loss(&mut t, src_logits, labels, target, cfg.cls_norm)?)
            }
            _ => None,
        };

        let terms = LossTerms {
            svae,
            mi,
            adv,
            ctc,
            cls,
        };
        let (root, report) = total_loss(&mut t, &terms, w)?;
        if !report.total.is_finite() {
            return Err(Error::invalid(
                "train",
                format!("non-finite loss at epoch {epoch} step {step}"),
            ));
        }
        let grads = t.backward(root)?.param_grads(&self.params);
        let lr = self
            .adam
            .step(self.params.tensors_mut(), &grads, epoch, cfg.epochs)?;
        Ok((report, lr))
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        svae: sum(|r| r.svae),
        mi: sum(|r| r.mi),
        adv_f: sum(|r| r.adv_f),
        adv_r: sum(|r| r.adv_r),
        adv_v: sum(|r| r.adv_v),
        ctc: sum(|r| r.ctc),
        cls: sum(|r| r.cls),
        total: sum(|r| r.total),
    }
}

/// Trains a run and writes `config.txt`, `metrics.csv` and
/// `checkpoint.tsvc` into `run_dir`. Returns every metrics row of the run.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    run_dir: &Path,
    opts: &TrainOptions,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let corpus = Corpus::load(data_dir)?;
    let (model, mut params) = build_model(cfg, &corpus.train)?;
    let adam_cfg = AdamConfig {
        lr0: cfg.lr0,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, params.tensors());
    let mut rows = Vec::new();
    let mut start = 0;
    fs::create_dir_all(run_dir)?;
    if opts.resume {
        let ck = Checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?;
        if ck.config_text != cfg.to_text() {
            return Err(Error::invalid(
                "train",
                "checkpoint was written with a different config",
            ));
        }
        ck.restore_params(&mut params)?;
        adam.step = ck.adam_step;
        adam.m = ck.adam_m;
        adam.v = ck.adam_v;
        start = ck.epoch;
        rows = read_metrics(&run_dir.join(METRICS_FILE))?;
        rows.truncate(start);
    } else {
        fs::write(run_dir.join(CONFIG_FILE), cfg.to_text())?;
    }
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));

    let mut trainer = Trainer {
        cfg,
        weights: cfg.weights(),
        train: &corpus.train,
        model,
        params,
        adam,
        domain_sizes: [
            corpus.train.domain_indices(0).len(),
            corpus.train.domain_indices(1).len(),
        ],
    };
    if end <= start && !opts.resume {
        let pseudo = trainer.pseudo_labels(start)?;
        Checkpoint::new(
            cfg.to_text(),
            start,
            &trainer.params,
            &trainer.adam,
            pseudo.snapshot(&corpus.train),
        )
        .save(&run_dir.join(CHECKPOINT_FILE))?;
    }
    let src_train = corpus.train.domain_indices(0);
    let tgt_test = corpus.test.domain_indices(1);
    for epoch in start..end {
        let pseudo = trainer.pseudo_labels(epoch)?;
        let plan = epoch_plan(&corpus.train, cfg.batch, cfg.seed, epoch)?;
        let mut reports = Vec::with_capacity(plan.len());
        let mut lr = crate::tensor::lr_schedule(cfg.lr0, epoch, cfg.epochs);
        for (s, indices) in plan.iter().enumerate() {
            let (report, step_lr) = trainer.step(indices, epoch, s, &pseudo)?;
            reports.push(report);
            lr = step_lr;
        }
        rows.push(MetricsRow {
            epoch,
            losses: mean_report(&reports),
            src_train_acc: accuracy(&trainer.model, &trainer.params, &corpus.train, &src_train)?,
            tgt_test_acc: accuracy(&trainer.model, &trainer.params, &corpus.test, &tgt_test)?,
            pl_coverage: pseudo.coverage,
            lr_eff: lr,
        });
        write_metrics(&run_dir.join(METRICS_FILE), &rows)?;
        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == end {
            Checkpoint::new(
                cfg.to_text(),
                done,
                &trainer.params,
                &trainer.adam,
                pseudo.snapshot(&corpus.train),
            )
            .save(&run_dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(rows)
}
