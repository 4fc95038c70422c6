//! Training, evaluation, benchmarking and ablation drivers.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod optim;
pub mod train;

use crate::datapipe::synth::{synth_generate, AnomalyInterval};
use crate::datapipe::{index_split, DatasetIndex, Split, Video};
use crate::error::{Error, Result};

pub use ablate::{run_sweep, AblationRow, GcamCombo, SweepSpec};
pub use bench::{bench, BenchRecord};
pub use checkpoint::Checkpoint;
pub use config::{DataSource, Profile, RunConfig, TrainConfig};
pub use eval::{evaluate, AucSummary, EvalReport, VideoAuc};
pub use train::{train, StepRecord, TrainOutcome, Trainer};

/// Frame indices of a dataset split, before decoding.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    /// Ground-truth intervals when the data is synthetic.
    pub intervals: Vec<AnomalyInterval>,
}

impl Datasets {
    /// Indexes (or generates) both splits as configured.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        match cfg.data.source {
            DataSource::Synthetic => {
                let d = synth_generate(&cfg.synth)?;
                Ok(Self { train: d.train, test: d.test, intervals: d.intervals })
            }
            DataSource::Disk => {
                let root = cfg
                    .data
                    .root
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.source = \"disk\" needs data.root".into()))?;
                Ok(Self { train: index_split(root, Split::Train)?, test: index_split(root, Split::Test)?, intervals: Vec::new() })
            }
        }
    }

    pub fn load_train(&self, cfg: &RunConfig) -> Result<Vec<Video>> {
        self.train.load(cfg.model.c_in, cfg.model.frame_size)
    }

    pub fn load_test(&self, cfg: &RunConfig) -> Result<Vec<Video>> {
        self.test.load(cfg.model.c_in, cfg.model.frame_size)
    }
}
