//! Recordings, aligned sliding windows, subject-wise splits and the
//! synthetic two-location benchmark.

mod cache;
mod load;
pub mod probe;
mod split;
mod synth;
mod window;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{read_window_cache, write_window_cache};
pub use load::{load_recordings, write_recordings, LoadOptions};
pub use split::{louo_splits, louo_splits_for, SplitPlan};
pub use synth::{probe_floors, synth_generate, synth_transfer_dataset, ProbeFloors, SynthOutput, SynthParams};
pub use window::{
    make_windows, window_count, ChannelStats, NormStats, SensorWindow, WindowPair, WindowSet, WindowTag,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}:{line}: {msg}")]
    Load { file: String, line: usize, msg: String },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One body-location sensor: its name and channel names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub channel_names: Vec<String>,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, channels: &[&str]) -> Self {
        Self {
            name: name.into(),
            channel_names: channels.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.channel_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.is_empty() {
            return Err(DatasetError::Contract(format!("modality {} declares no channels", self.name)));
        }
        Ok(())
    }
}

/// One modality's channels, channel-major (`values[c * len + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub modality: String,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.values.len() / self.channels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.values[c * n..(c + 1) * n]
    }
}

/// A contiguous, gap-free run of synchronized samples of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    /// Index of this contiguous run within the subject's data.
    pub segment: usize,
    pub sample_rate: f64,
    pub streams: Vec<Stream>,
    /// Per-sample activity ids.
    pub labels: Vec<usize>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stream(&self, modality: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.modality == modality)
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        for s in &self.streams {
            if s.len() != self.len() || s.values.len() != s.channels * self.len() {
                return Err(DatasetError::Contract(format!(
                    "subject {} stream {} has {} samples, labels have {}",
                    self.subject_id,
                    s.modality,
                    s.len(),
                    self.len()
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(DatasetError::Contract(format!(
                "subject {} has label {bad} outside a vocabulary of {n_classes}",
                self.subject_id
            )));
        }
        Ok(())
    }
}
