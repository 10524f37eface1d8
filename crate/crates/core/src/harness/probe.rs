use std::path::Path;

use super::evaluate::{latent_features, load_run};
use super::Corpus;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::argmax_rows;
use crate::tensor::{AdamConfig, AdamState, ParamSet, Tape, Tensor};

const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.05;

pub const PROBE_HEADER: &str =
    "domain_from_static,domain_from_dynamic,class_from_dynamic,class_from_static";

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    params: ParamSet<f64>,
    classes: usize,
}

impl LogisticProbe {
    /// Full-batch Adam from a zero start, so the fit is deterministic.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid(
                "probe",
                format!(
                    "{} feature rows for {} labels",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(
                "probe",
                format!("label {y} outside {classes} classes"),
            ));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|k| features.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        let scale = (0..dim)
            .map(|k| {
                let var = features
                    .iter()
                    .map(|r| (r[k] - mean[k]).powi(2))
                    .sum::<f64>()
                    / n;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut params = ParamSet::new();
        let w = params.add("probe.weight", Tensor::zeros(&[classes, dim]));
        let b = params.add("probe.bias", Tensor::zeros(&[classes]));
        let mut probe = LogisticProbe {
            mean,
            scale,
            params,
            classes,
        };
        let x = probe.standardize(features)?;
        let cfg = AdamConfig {
            lr0: PROBE_LR,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, probe.params.tensors());
        for _ in 0..PROBE_STEPS {
            let mut t = Tape::with_params(&probe.params);
            let xv = t.constant(x.clone());
            let (wv, bv) = (t.param(w), t.param(b));
            let logits = t.linear(xv, wv, bv)?;
            let loss = cross_entropy(&mut t, logits, labels)?;
            let grads = t.backward(loss)?.param_grads(&probe.params);
            adam.step(probe.params.tensors_mut(), &grads, 0, 1)?;
        }
        Ok(probe)
    }

    fn standardize(&self, features: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let dim = self.mean.len();
        let mut data = Vec::with_capacity(features.len() * dim);
        for row in features {
            if row.len() != dim {
                return Err(Error::shape("probe", &[dim], &[row.len()]));
            }
            data.extend(
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) * s),
            );
        }
        Tensor::new(vec![features.len(), dim], data)
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::frozen(&self.params);
        let xv = t.constant(self.standardize(features)?);
        let (w, b) = (
            self.params.tensors()[0].clone(),
            self.params.tensors()[1].clone(),
        );
        let (wv, bv) = (t.constant(w), t.constant(b));
        let logits = t.linear(xv, wv, bv)?;
        let preds = argmax_rows(t.value(logits));
        debug_assert!(preds.iter().all(|&p| p < self.classes));
        Ok(preds)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let preds = self.predict(features)?;
        if preds.is_empty() {
            return Ok(0.0);
        }
        Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64)
    }
}

/// Test accuracies of the four latent probes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub domain_from_static: f64,
    pub domain_from_dynamic: f64,
    pub class_from_dynamic: f64,
    pub class_from_static: f64,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{PROBE_HEADER}\n{},{},{},{}\n",
            self.domain_from_static,
            self.domain_from_dynamic,
            self.class_from_dynamic,
            self.class_from_static
        )
    }
}

/// Fits the latent probes on the train split of `data_dir` and scores them
/// on the test split.
pub fn probe(run_dir: &Path, data_dir: &Path) -> Result<ProbeReport> {
    let corpus = Corpus::load(data_dir)?;
    let (_, model, params, _) = load_run(run_dir, &corpus.train)?;
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let (zd_train, zt_train) =
        latent_features(&model, &params, &corpus.train, &all(corpus.train.len()))?;
    let (zd_test, zt_test) =
        latent_features(&model, &params, &corpus.test, &all(corpus.test.len()))?;
    let domains =
        |ds: &crate::data::Dataset| ds.domains.iter().map(|&d| d as usize).collect::<Vec<_>>();
    let classes =
        |ds: &crate::data::Dataset| ds.labels.iter().map(|&y| y as usize).collect::<Vec<_>>();
    let (dom_train, dom_test) = (domains(&corpus.train), domains(&corpus.test));
    let (cls_train, cls_test) = (classes(&corpus.train), classes(&corpus.test));
    let c = corpus.train.classes;
    let score =
        |train: &[Vec<f64>], y_train: &[usize], test: &[Vec<f64>], y_test: &[usize], k: usize| {
            LogisticProbe::fit(train, y_train, k)?.accuracy(test, y_test)
        };
    Ok(ProbeReport {
        domain_from_static: score(&zd_train, &dom_train, &zd_test, &dom_test, 2)?,
        domain_from_dynamic: score(&zt_train, &dom_train, &zt_test, &dom_test, 2)?,
        class_from_dynamic: score(&zt_train, &cls_train, &zt_test, &cls_test, c)?,
        class_from_static: score(&zd_train, &cls_train, &zd_test, &cls_test, c)?,
    })
}
