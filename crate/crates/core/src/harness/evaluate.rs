use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::{Corpus, CHECKPOINT_FILE};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, TranSVae};
use crate::seed;
use crate::tensor::{ParamSet, Tensor};

/// Sequences per inference chunk.
const CHUNK: usize = 64;

const INIT_TAG: u64 = 0x696e_6974;

/// Fresh model and parameters for a config and corpus.
pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<(TranSVae, ParamSet<f32>)> {
    if ds.frames != cfg.frames {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset has {} frames, config expects {}",
                ds.frames, cfg.frames
            ),
        ));
    }
    if ds.mode != cfg.mode {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset is in {} mode, config expects {}",
                ds.mode, cfg.mode
            ),
        ));
    }
    TranSVae::new(
        cfg.model_config(ds.dim, ds.classes),
        seed::derive(cfg.seed, &[INIT_TAG]),
    )
}

/// Model restored from the checkpoint of a run directory.
pub fn load_run(
    run_dir: &Path,
    ds: &Dataset,
) -> Result<(RunConfig, TranSVae, ParamSet<f32>, Checkpoint)> {
    let ck = Checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    let (model, mut params) = build_model(&cfg, ds)?;
    ck.restore_params(&mut params)?;
    Ok((cfg, model, params, ck))
}

fn chunk_tensor(ds: &Dataset, indices: &[usize]) -> Result<Tensor<f32>> {
    let data = indices
        .iter()
        .flat_map(|&i| ds.sequence(i).iter().copied())
        .collect();
    Tensor::new(vec![indices.len(), ds.frames, ds.dim], data)
}

/// Eval-mode task logits `[n, C]` of the listed sequences.
pub fn task_logits(
    model: &TranSVae,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(indices.len() * ds.classes);
    let plan = model.trn.eval_plan();
    for chunk in indices.chunks(CHUNK) {
        let x = chunk_tensor(ds, chunk)?;
        let mut t = crate::tensor::Tape::frozen(params);
        let xv = t.constant(x);
        let post = model.encode(&mut t, xv)?;
        let rel = model.relations(&mut t, post.dynamic_post.mean, &plan)?;
        let logits = model.task_logits(&mut t, rel)?;
        out.extend_from_slice(t.value(logits).data());
    }
    Tensor::new(vec![indices.len(), model.config.classes], out)
}

/// One feature row per sequence.
pub type Features = Vec<Vec<f64>>;

/// Eval-mode posterior means of the listed sequences: `z_d` rows
/// `[n, dz_d]` and `z_t` averaged over time, `[n, dz_t]`.
pub fn latent_features(
    model: &TranSVae,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<(Features, Features)> {
    let (mut zd_rows, mut zt_rows) = (Vec::new(), Vec::new());
    for chunk in indices.chunks(CHUNK) {
        let (zd, zt) = model.latent_means(params, &chunk_tensor(ds, chunk)?)?;
        let (frames, dz) = (zt.shape()[1], zt.shape()[2]);
        for i in 0..chunk.len() {
            zd_rows.push(zd.row(i).iter().map(|&v| v as f64).collect());
            let seq = zt.row(i);
            zt_rows.push(
                (0..dz)
                    .map(|k| {
                        (0..frames).map(|f| seq[f * dz + k] as f64).sum::<f64>() / frames as f64
                    })
                    .collect(),
            );
        }
    }
    Ok((zd_rows, zt_rows))
}

/// Eval-mode reconstructions from the posterior means, one flat
/// `T * D` row per listed sequence.
pub fn reconstructions(
    model: &TranSVae,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        let mut t = crate::tensor::Tape::frozen(params);
        let xv = t.constant(chunk_tensor(ds, chunk)?);
        let post = model.encode(&mut t, xv)?;
        let recon = model.decode(&mut t, post.static_post.mean, post.dynamic_post.mean)?;
        let recon = t.value(recon);
        rows.extend((0..chunk.len()).map(|i| recon.row(i).to_vec()));
    }
    Ok(rows)
}

/// Top-1 accuracy on the listed sequences.
pub fn accuracy(
    model: &TranSVae,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let preds = argmax_rows(&task_logits(model, params, ds, indices)?);
    let hits = preds
        .iter()
        .zip(indices)
        .filter(|&(&p, &i)| p == ds.labels[i] as usize)
        .count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Per-domain top-1 accuracy on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub source: f64,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(
                "split",
                format!("expected train or test, got `{s}`"),
            )),
        }
    }
}

pub fn evaluate(run_dir: &Path, data_dir: &Path, split: Split) -> Result<EvalReport> {
    let corpus = Corpus::load(data_dir)?;
    let ds = match split {
        Split::Train => &corpus.train,
        Split::Test => &corpus.test,
    };
    let (_, model, params, _) = load_run(run_dir, ds)?;
    Ok(EvalReport {
        source: accuracy(&model, &params, ds, &ds.domain_indices(0))?,
        target: accuracy(&model, &params, ds, &ds.domain_indices(1))?,
    })
}
