//! Per-task model checkpoints.
//!
//! A checkpoint holds every learnable tensor of a [`Model`] together with
//! the resolved config, its hash and the class universe, serialized as one
//! JSON document. Writes go through a temporary file in the target directory
//! and are renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::localizer::{RankingHead, RANK_BIAS, RANK_WEIGHT};
use crate::memory::{MemoryPool, PoolShape, KEYS, MODULATION, UNITS};
use crate::tensor::Tensor;
use crate::trainer::{Model, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// File name of the checkpoint written after task `task` (1-based).
pub fn checkpoint_name(task: usize) -> String {
    format!("ckpt_task{task}.json")
}

pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(checkpoint_name(task))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub shape: PoolShape,
    pub frozen_chunks: BTreeSet<usize>,
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// 1-based index of the last trained task.
    pub task: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub task_classes: Vec<Vec<usize>>,
    pub detector: BTreeMap<String, Tensor>,
    pub pool: Option<PoolState>,
    pub ranker: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &TrainConfig, task: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            task,
            seed: config.seed,
            config_hash: config.hash(),
            config: config.clone(),
            task_classes: model.task_classes.clone(),
            detector: model.detector.store().snapshot(),
            pool: model.pool.as_ref().map(|p| PoolState {
                shape: p.shape(),
                frozen_chunks: p.frozen_chunks().clone(),
                params: p.store().snapshot(),
            }),
            ranker: model.ranker.store().snapshot(),
        }
    }

    /// Structural checks that do not need a model.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.task == 0 || self.task > self.task_classes.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint task {} outside 1..={}",
                self.task,
                self.task_classes.len()
            )));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Compatibility("config hash does not match stored config".into()));
        }
        let pool = self.pool.iter().flat_map(|p| &p.params);
        for (name, t) in self.detector.iter().chain(pool).chain(&self.ranker) {
            if t.shape().iter().product::<usize>() != t.data().len() || t.shape().contains(&0) {
                return Err(Error::Compatibility(format!(
                    "tensor '{name}' has shape {:?} but {} values",
                    t.shape(),
                    t.data().len()
                )));
            }
        }
        Ok(())
    }

    /// Fails unless `task_classes` is the universe this checkpoint was trained on.
    pub fn check_universe(&self, task_classes: &[Vec<usize>]) -> Result<()> {
        if self.task_classes != task_classes {
            return Err(Error::Compatibility(format!(
                "checkpoint class universe {:?} differs from stream {:?}",
                self.task_classes, task_classes
            )));
        }
        Ok(())
    }

    /// Rebuilds the model. The backbone comes back frozen.
    pub fn to_model(&self) -> Result<Model> {
        self.validate()?;
        let n: usize = self.task_classes.iter().map(Vec::len).sum();
        let mut detector = Detector::from_snapshot(self.config.detector_config(n), &self.detector)?;
        detector.freeze_backbone();
        let pool = match &self.pool {
            Some(state) => {
                let get = |name: &str| {
                    state
                        .params
                        .get(name)
                        .cloned()
                        .ok_or_else(|| Error::Compatibility(format!("checkpoint pool lacks '{name}'")))
                };
                let mut pool = MemoryPool::from_tensors(state.shape, get(UNITS)?, get(KEYS)?, get(MODULATION)?)?;
                pool.set_frozen_chunks(state.frozen_chunks.clone())?;
                Some(pool)
            }
            None => None,
        };
        if pool.is_some() != self.config.use_memory {
            return Err(Error::Compatibility("pool presence disagrees with use_memory".into()));
        }
        let ranker_param = |name: &str| {
            self.ranker
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Compatibility(format!("checkpoint ranker lacks '{name}'")))
        };
        Ok(Model {
            detector,
            pool,
            ranker: RankingHead::from_tensors(ranker_param(RANK_WEIGHT)?, ranker_param(RANK_BIAS)?),
            task_classes: self.task_classes.clone(),
            query_mode: self.config.query_mode(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let ckpt: Self = serde_json::from_reader(BufReader::new(file))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Loads the checkpoint of task `task - 1` from `dir`, required before
    /// training task `task` (1-based) when `task ≥ 2`.
    pub fn load_previous(dir: &Path, task: usize) -> Result<Option<Self>> {
        if task < 2 {
            return Ok(None);
        }
        let path = checkpoint_path(dir, task - 1);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint { task: task - 1, path });
        }
        let ckpt = Self::load(&path)?;
        if ckpt.task != task - 1 {
            return Err(Error::Compatibility(format!(
                "{} holds task {}, expected {}",
                path.display(),
                ckpt.task,
                task - 1
            )));
        }
        Ok(Some(ckpt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    fn small() -> (TrainConfig, Vec<Vec<usize>>) {
        let config = TrainConfig {
            n_units: 4,
            memory_length: 4,
            detector: DetectorConfig { dim: 8, ffn_dim: 8, proposals: 4, ..DetectorConfig::default() },
            ..TrainConfig::default()
        };
        (config, vec![vec![0], vec![1]])
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, classes) = small();
        let mut model = Model::new(&config, classes).unwrap();
        model.pool.as_mut().unwrap().freeze_for_task(1).unwrap();
        model.detector.freeze_backbone();
        let ckpt = Checkpoint::capture(&model, &config, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 2);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let rebuilt = back.to_model().unwrap();
        assert_eq!(rebuilt.detector.store().snapshot(), model.detector.store().snapshot());
        assert_eq!(rebuilt.pool, model.pool);
        assert_eq!(rebuilt.ranker, model.ranker);
    }

    #[test]
    fn missing_previous_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load_previous(dir.path(), 1).unwrap().is_none());
        match Checkpoint::load_previous(dir.path(), 2) {
            Err(Error::MissingCheckpoint { task: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn universe_mismatch() {
        let (config, classes) = small();
        let model = Model::new(&config, classes).unwrap();
        let ckpt = Checkpoint::capture(&model, &config, 1);
        assert!(ckpt.check_universe(&[vec![0], vec![1]]).is_ok());
        assert!(matches!(ckpt.check_universe(&[vec![1], vec![0]]), Err(Error::Compatibility(_))));
    }

    #[test]
    fn tampered_config_is_rejected() {
        let (config, classes) = small();
        let model = Model::new(&config, classes).unwrap();
        let mut ckpt = Checkpoint::capture(&model, &config, 1);
        ckpt.config.lr = 0.5;
        assert!(matches!(ckpt.validate(), Err(Error::Compatibility(_))));
    }
}
