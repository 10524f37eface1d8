use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;

use super::evaluate::{load_run, reconstructions};
use super::probe::LogisticProbe;
use super::Corpus;
use crate::data::{write_ppm, Dataset, Image, Mode, SIDE};
use crate::error::{Error, Result};
use crate::model::TranSVae;
use crate::seed;
use crate::tensor::{ParamSet, Tensor};

const PAIR_TAG: u64 = 0x7061_6972;

/// What a swap run wrote and how the swapped sequences score.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapReport {
    pub panels: Vec<PathBuf>,
    /// Every self-pair swap row matched its reconstruction row bitwise.
    pub self_swap_exact: bool,
    /// Fraction of pairs where both swapped sequences are assigned the
    /// domain of their static donor by the pixel probe.
    pub flip_rate: f64,
}

/// Mean frame of each sequence, the pixel-probe input.
fn mean_frame(seq: &[f32], frames: usize) -> Vec<f64> {
    let dim = seq.len() / frames;
    (0..dim)
        .map(|k| (0..frames).map(|f| seq[f * dim + k] as f64).sum::<f64>() / frames as f64)
        .collect()
}

/// Domain classifier on pixels, fit on the model's own reconstructions of
/// the train split so it scores decoder output rather than sharp renders.
pub fn pixel_domain_probe(
    model: &TranSVae,
    params: &ParamSet<f32>,
    train: &Dataset,
) -> Result<LogisticProbe> {
    let all: Vec<usize> = (0..train.len()).collect();
    let x: Vec<Vec<f64>> = reconstructions(model, params, train, &all)?
        .iter()
        .map(|r| mean_frame(r, train.frames))
        .collect();
    let y: Vec<usize> = train.domains.iter().map(|&d| d as usize).collect();
    LogisticProbe::fit(&x, &y, 2)
}

/// One panel: rows are originals, reconstructions, dynamic-only
/// reconstructions and swapped reconstructions; columns are frames.
pub fn panel(rows: [&[f32]; 4], frames: usize) -> Image {
    let tile = SIDE * SIDE * 3;
    let mut img = Image::filled(frames * SIDE, 4 * SIDE, 0.0);
    for (r, seq) in rows.iter().enumerate() {
        for f in 0..frames {
            img.blit(
                f * SIDE,
                r * SIDE,
                SIDE,
                SIDE,
                &seq[f * tile..(f + 1) * tile],
            );
        }
    }
    img
}

/// Writes `2 * pairs` panels (`pair{i}_source.ppm`, `pair{i}_target.ppm`)
/// for seeded source/target test pairs.
pub fn swap(
    run_dir: &Path,
    data_dir: &Path,
    pairs: usize,
    out_dir: &Path,
    pair_seed: u64,
) -> Result<SwapReport> {
    let corpus = Corpus::load(data_dir)?;
    if corpus.test.mode != Mode::Image {
        return Err(Error::invalid(
            "swap",
            "swap panels need an image-mode dataset",
        ));
    }
    let (_, model, params, _) = load_run(run_dir, &corpus.train)?;
    let ds = &corpus.test;
    let (src, tgt) = (ds.domain_indices(0), ds.domain_indices(1));
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::invalid(
            "swap",
            "test split lacks one of the domains",
        ));
    }
    let pixel = pixel_domain_probe(&model, &params, &corpus.train)?;
    let mut rng = seed::stream(pair_seed, &[PAIR_TAG]);
    fs::create_dir_all(out_dir)?;
    let (frames, dim) = (ds.frames, ds.dim);
    let one = |i: usize| Tensor::new(vec![1, frames, dim], ds.sequence(i).to_vec());
    let mut report = SwapReport {
        panels: Vec::with_capacity(2 * pairs),
        self_swap_exact: true,
        flip_rate: 0.0,
    };
    let mut flips = 0;
    for p in 0..pairs {
        let (&a, &b) = (
            src.choose(&mut rng).expect("non-empty"),
            tgt.choose(&mut rng).expect("non-empty"),
        );
        let (xa, xb) = (one(a)?, one(b)?);
        let out = model.swap_static(&params, &xa, &xb)?;
        for x in [&xa, &xb] {
            let same = model.swap_static(&params, x, x)?;
            report.self_swap_exact &= same.a_with_b_static == same.recon_a;
        }
        let sides = [
            (
                "source",
                &xa,
                &out.recon_a,
                &out.dynamic_only_a,
                &out.a_with_b_static,
            ),
            (
                "target",
                &xb,
                &out.recon_b,
                &out.dynamic_only_b,
                &out.b_with_a_static,
            ),
        ];
        for (name, x, recon, dyn_only, swapped) in sides {
            let img = panel(
                [x.data(), recon.data(), dyn_only.data(), swapped.data()],
                frames,
            );
            let path = out_dir.join(format!("pair{p}_{name}.ppm"));
            write_ppm(&path, &img)?;
            report.panels.push(path);
        }
        let preds = pixel.predict(&[
            mean_frame(out.a_with_b_static.data(), frames),
            mean_frame(out.b_with_a_static.data(), frames),
        ])?;
        if preds == [ds.domains[b] as usize, ds.domains[a] as usize] {
            flips += 1;
        }
    }
    report.flip_rate = if pairs == 0 {
        0.0
    } else {
        flips as f64 / pairs as f64
    };
    Ok(report)
}
