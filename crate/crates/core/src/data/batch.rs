use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Class labels of a batch. Target-domain batches carry `Hidden`, so the
/// training path has no way to read their labels.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelField {
    Visible(Vec<usize>),
    Hidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `[M, T, D]`.
    pub frames: Tensor<f32>,
    pub domains: Vec<usize>,
    pub indices: Vec<usize>,
    labels: LabelField,
}

impl SequenceBatch {
    /// Copies the listed sequences out of `ds`; labels are exposed only when
    /// `expose_labels` is set.
    pub fn gather(ds: &Dataset, indices: &[usize], expose_labels: bool) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("batch", "empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * ds.seq_len());
        for &i in indices {
            data.extend_from_slice(ds.sequence(i));
        }
        let labels = if expose_labels {
            LabelField::Visible(indices.iter().map(|&i| ds.labels[i] as usize).collect())
        } else {
            LabelField::Hidden
        };
        Ok(SequenceBatch {
            frames: Tensor::new(vec![indices.len(), ds.frames, ds.dim], data)?,
            domains: indices.iter().map(|&i| ds.domains[i] as usize).collect(),
            indices: indices.to_vec(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.labels {
            LabelField::Visible(y) => Some(y),
            LabelField::Hidden => None,
        }
    }

    pub fn label_field(&self) -> &LabelField {
        &self.labels
    }
}

/// Dataset indices of one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Step plan of one epoch: `batch / 2` source (domain 0) and `batch / 2`
/// target (domain 1) sequences per step, each domain walked in an order
/// reshuffled from `(seed, epoch)`. Partial trailing batches are dropped, so
/// no sequence repeats within an epoch.
pub fn epoch_plan(ds: &Dataset, batch: usize, seed: u64, epoch: usize) -> Result<Vec<StepIndices>> {
    if batch < 2 || !batch.is_multiple_of(2) {
        return Err(Error::invalid(
            "batch_iter",
            format!("batch size must be even and at least 2, got {batch}"),
        ));
    }
    let half = batch / 2;
    let mut orders = Vec::with_capacity(2);
    for domain in 0..2 {
        let mut idx = ds.domain_indices(domain);
        if idx.len() < half {
            return Err(Error::invalid(
                "batch_iter",
                format!(
                    "domain {domain} has {} sequences, fewer than the half batch {half}",
                    idx.len()
                ),
            ));
        }
        idx.shuffle(&mut seed::stream(
            seed,
            &[0x0062_6174_6368, epoch as u64, domain as u64],
        ));
        orders.push(idx);
    }
    let steps = orders[0].len().min(orders[1].len()) / half;
    Ok((0..steps)
        .map(|s| StepIndices {
            source: orders[0][s * half..(s + 1) * half].to_vec(),
            target: orders[1][s * half..(s + 1) * half].to_vec(),
        })
        .collect())
}

/// A uniformly drawn non-identity permutation of the frames of one sequence
/// (`frames * dim` values), returned with the permutation used.
pub fn shuffle_frames(
    seq: &[f32],
    frames: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Vec<usize>)> {
    if frames < 2 {
        return Err(Error::invalid(
            "shuffle_frames",
            format!("need at least 2 frames, got {frames}"),
        ));
    }
    if !seq.len().is_multiple_of(frames) {
        return Err(Error::invalid(
            "shuffle_frames",
            format!("{} values do not split into {frames} frames", seq.len()),
        ));
    }
    let dim = seq.len() / frames;
    let identity: Vec<usize> = (0..frames).collect();
    let mut perm = identity.clone();
    while perm == identity {
        perm.shuffle(rng);
    }
    let out = perm
        .iter()
        .flat_map(|&f| seq[f * dim..(f + 1) * dim].iter().copied())
        .collect();
    Ok((out, perm))
}
