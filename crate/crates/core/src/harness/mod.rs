//! Run configuration, training loop, evaluation, probes, the swap demo,
//! checkpoints, metrics and the gradient-check battery behind the CLI.

mod checkpoint;
mod config;
mod evaluate;
pub mod gradcheck;
mod metrics;
mod probe;
mod swap;
mod train;

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use evaluate::{
    accuracy, build_model, evaluate, latent_features, load_run, reconstructions, task_logits,
    EvalReport, Split,
};
pub use gradcheck::{run_battery, GradCheckReport};
pub use metrics::{read_metrics, write_metrics, MetricsRow, HEADER as METRICS_HEADER};
pub use probe::{probe, LogisticProbe, ProbeReport, PROBE_HEADER};
pub use swap::{panel, pixel_domain_probe, swap, SwapReport};
pub use train::{train, TrainOptions};

pub const TRAIN_FILE: &str = "train.tsvd";
pub const TEST_FILE: &str = "test.tsvd";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tsvc";

/// The train and test splits stored in one data directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let train = Dataset::load(&dir.join(TRAIN_FILE))?;
        let test = Dataset::load(&dir.join(TEST_FILE))?;
        if (train.mode, train.frames, train.dim, train.classes)
            != (test.mode, test.frames, test.dim, test.classes)
        {
            return Err(Error::format(
                "dataset",
                "train and test splits disagree on layout",
            ));
        }
        Ok(Corpus { train, test })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.train.save(&dir.join(TRAIN_FILE))?;
        self.test.save(&dir.join(TEST_FILE))
    }
}
