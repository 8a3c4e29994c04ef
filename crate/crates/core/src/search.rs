//! Bilevel search over the supernet: weight-only warm-up epochs, then
//! first-order alternation of an Adam step on the architecture logits
//! (validation batch) and an SGD step on the weights (training batch).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic, Checkpoint};
use crate::data::HsiCube;
use crate::derivation::{ArchSnapshot, NetShape};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam, AdamHyper, Sgd, SgdHyper};
use crate::params::{ParamGroup, ParamStore};
use crate::pipeline::{batch_loss, evaluate_split, Batch, InferConfig, PatchSampler, SampleSplit};
use crate::search_space::SearchSpace;
use crate::supernet::SuperNet;
use crate::tensor::Scalar;

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "supernet.ckpt";
pub const RECORD_FILE: &str = "search_record.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub layers: usize,
    pub nodes: usize,
    pub width: usize,
    pub space: SearchSpace,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    /// Batches per epoch; 0 means one pass worth of train pixels.
    pub iters_per_epoch: usize,
    pub patch: usize,
    pub batch: usize,
    /// Validate every this many epochs (and after the last one).
    pub val_interval: usize,
    pub augment: bool,
    pub seed: u64,
    pub sgd: SgdHyper,
    pub adam: AdamHyper,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            layers: 4,
            nodes: 3,
            width: 8,
            space: SearchSpace::Hybrid,
            warmup_epochs: 15,
            search_epochs: 50,
            iters_per_epoch: 0,
            patch: 24,
            batch: 6,
            val_interval: 1,
            augment: true,
            seed: 0,
            sgd: SgdHyper::default(),
            adam: AdamHyper::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("supernet.layers", self.layers),
            ("supernet.nodes", self.nodes),
            ("supernet.width", self.width),
            ("supernet.patch", self.patch),
            ("supernet.batch", self.batch),
            ("supernet.val_interval", self.val_interval),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if self.warmup_epochs + self.search_epochs == 0 {
            return Err(Error::config("supernet.search_epochs", "at least one epoch is required"));
        }
        let s = &self.sgd;
        if !(s.lr_max >= s.lr_min && s.lr_min >= 0.0 && s.lr_max.is_finite()) {
            return Err(Error::config("optim.sgd.lr_max", "need lr_max ≥ lr_min ≥ 0"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("optim.adam.lr", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn shape(&self, bands: usize, classes: usize) -> NetShape {
        NetShape {
            bands,
            classes,
            layers: self.layers,
            nodes: self.nodes,
            width: self.width,
        }
    }

    fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.search_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Search,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean validation-batch loss of the architecture steps.
    pub arch_loss: Option<f64>,
    pub val_oa: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub schema_version: u32,
    pub epochs: Vec<EpochStats>,
    /// Best validated search-phase epoch: highest accuracy, then lowest
    /// loss, then earliest. Warm-up epochs only count if no search epoch
    /// was validated.
    pub best_epoch: Option<usize>,
    pub best_val_oa: Option<f64>,
    /// Best accuracy so far after each validation.
    pub best_so_far: Vec<f64>,
    pub best_arch: Option<ArchSnapshot>,
    /// Set when the run aborted before all artifacts were written.
    pub partial: bool,
}

impl SearchRecord {
    fn new() -> SearchRecord {
        SearchRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            epochs: Vec::new(),
            best_epoch: None,
            best_val_oa: None,
            best_so_far: Vec::new(),
            best_arch: None,
            partial: false,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<SearchRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != RECORD_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                what: "search record",
                found,
                supported: RECORD_SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// The supernet with its parameters and both optimizers.
#[derive(Clone, Debug)]
pub struct SearchState<T> {
    pub net: SuperNet,
    pub store: ParamStore<T>,
    pub sgd: Sgd<T>,
    pub adam: Adam<T>,
}

impl<T: Scalar> SearchState<T> {
    pub fn new(cfg: &SearchConfig, shape: &NetShape) -> Result<SearchState<T>> {
        let (net, store) = SuperNet::build(shape, cfg.space, cfg.seed)?;
        Ok(SearchState {
            net,
            store,
            sgd: Sgd::new(ParamGroup::Weight, cfg.sgd.momentum, cfg.sgd.weight_decay),
            adam: Adam::new(ParamGroup::Arch, cfg.adam),
        })
    }

    /// One SGD step on the weights; architecture logits are untouched.
    pub fn weight_step(&mut self, batch: &Batch<T>, lr: f64) -> Result<f64> {
        let (loss, grads) = batch_loss(&self.net, &mut self.store, batch)?;
        check_finite(loss)?;
        self.sgd.step(&mut self.store, &grads, lr);
        Ok(loss)
    }

    /// Adam on the architecture logits from `val_batch`, then SGD on the
    /// weights from `train_batch`. Returns `(train_loss, val_loss)`.
    pub fn alternating_step(&mut self, train_batch: &Batch<T>, val_batch: &Batch<T>, lr: f64) -> Result<(f64, f64)> {
        if train_batch.labeled() == 0 || val_batch.labeled() == 0 {
            return Err(Error::Contract("alternating step needs labeled pixels in both batches".into()));
        }
        let (val_loss, grads) = batch_loss(&self.net, &mut self.store, val_batch)?;
        check_finite(val_loss)?;
        self.adam.step(&mut self.store, &grads);
        let train_loss = self.weight_step(train_batch, lr)?;
        Ok((train_loss, val_loss))
    }
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration: 0, loss })
    }
}

/// The finished search: supernet parameters at the best epoch plus the
/// record.
#[derive(Clone, Debug)]
pub struct SearchOutcome<T> {
    pub net: SuperNet,
    pub store: ParamStore<T>,
    pub record: SearchRecord,
}

/// Runs warm-up and alternating epochs. With `out`, the best parameters
/// are written to `supernet.ckpt` and the record to `search_record.json`;
/// if the checkpoint cannot be written the record is still saved, flagged
/// `partial`.
pub fn search<T: Scalar>(
    cfg: &SearchConfig,
    cube: &HsiCube,
    split: &SampleSplit,
    out: Option<&Path>,
) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    let shape = cfg.shape(cube.bands, cube.num_classes());
    let mut state = SearchState::<T>::new(cfg, &shape)?;
    let mut train = PatchSampler::new(cube, &split.train, cfg.patch, cfg.batch, cfg.augment, cfg.seed ^ 0x7472)?;
    let mut val = PatchSampler::new(cube, &split.val, cfg.patch, cfg.batch, cfg.augment, cfg.seed ^ 0x7661)?;
    let iters = if cfg.iters_per_epoch == 0 {
        split.train.len().div_ceil(cfg.batch)
    } else {
        cfg.iters_per_epoch
    };
    let infer_cfg = InferConfig {
        window: cfg.patch,
        overlap: true,
        batch: 8,
    };
    let total = cfg.total_epochs();
    let mut record = SearchRecord::new();
    let mut best: Option<(f64, f64, usize, ParamStore<T>)> = None;
    let mut best_any: Option<(f64, f64, usize, ParamStore<T>)> = None;
    for epoch in 0..total {
        let phase = if epoch < cfg.warmup_epochs { Phase::Warmup } else { Phase::Search };
        let lr = cosine_lr(epoch, total, cfg.sgd.lr_max, cfg.sgd.lr_min);
        let (mut train_sum, mut arch_sum) = (0.0, 0.0);
        for _ in 0..iters {
            let tb = train.next_batch::<T>();
            match phase {
                Phase::Warmup => train_sum += state.weight_step(&tb, lr)?,
                Phase::Search => {
                    let vb = val.next_batch::<T>();
                    let (t, v) = state.alternating_step(&tb, &vb, lr)?;
                    train_sum += t;
                    arch_sum += v;
                }
            }
        }
        let mut stats = EpochStats {
            epoch,
            phase,
            lr,
            train_loss: train_sum / iters as f64,
            arch_loss: (phase == Phase::Search).then(|| arch_sum / iters as f64),
            val_oa: None,
            val_loss: None,
        };
        if (epoch + 1) % cfg.val_interval == 0 || epoch + 1 == total {
            let (oa, loss, _) = evaluate_split(&state.net, &state.store, cube, &split.val, &infer_cfg)?;
            stats.val_oa = Some(oa);
            stats.val_loss = Some(loss);
            let slot = if phase == Phase::Search { &mut best } else { &mut best_any };
            if slot.as_ref().is_none_or(|b| oa > b.0 || (oa == b.0 && loss < b.1)) {
                *slot = Some((oa, loss, epoch, state.store.clone()));
            }
            let so_far = record.best_so_far.last().copied().unwrap_or(f64::NEG_INFINITY).max(oa);
            record.best_so_far.push(so_far);
        }
        log::info!(
            "epoch {epoch} ({phase:?}): lr {lr:.5}, train loss {:.4}, val OA {}",
            stats.train_loss,
            stats.val_oa.map_or("-".into(), |v| format!("{v:.4}"))
        );
        record.epochs.push(stats);
    }
    let (oa, _, epoch, store) = best.or(best_any).expect("the last epoch is always validated");
    record.best_epoch = Some(epoch);
    record.best_val_oa = Some(oa);
    record.best_arch = Some(state.net.arch_snapshot(&store));
    if let Some(dir) = out {
        persist(dir, &state.net, &store, &mut record)?;
    }
    Ok(SearchOutcome {
        net: state.net,
        store,
        record,
    })
}

fn persist<T: Scalar>(dir: &Path, net: &SuperNet, store: &ParamStore<T>, record: &mut SearchRecord) -> Result<()> {
    let write = || -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({
            "kind": "supernet",
            "shape": net.backbone.shape,
            "space": net.space,
            "best_epoch": record.best_epoch,
        });
        checkpoint::save_store(&dir.join(CHECKPOINT_FILE), store, meta)
    };
    let result = write();
    record.partial = result.is_err();
    let saved = write_atomic(&dir.join(RECORD_FILE), record.to_json().as_bytes());
    result.and(saved)
}

/// Rebuilds the supernet described by a search checkpoint and reads its
/// architecture logits.
pub fn arch_from_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<ArchSnapshot> {
    let meta = ckpt.meta();
    if meta.get("kind").and_then(|k| k.as_str()) != Some("supernet") {
        return Err(Error::format(path, "not a supernet search checkpoint"));
    }
    let shape: NetShape = serde_json::from_value(meta["shape"].clone())
        .map_err(|e| Error::format(path, format!("bad shape in checkpoint metadata: {e}")))?;
    let space: SearchSpace = serde_json::from_value(meta["space"].clone())
        .map_err(|e| Error::format(path, format!("bad search space in checkpoint metadata: {e}")))?;
    let (net, mut store) = SuperNet::build::<f64>(&shape, space, 0)?;
    ckpt.restore_into(&mut store)?;
    Ok(net.arch_snapshot(&store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Layout, SynthSpec};
    use crate::pipeline::sample_split;

    fn setup() -> (HsiCube, SampleSplit) {
        let mut cube = synth_generate(&SynthSpec {
            bands: 8,
            height: 12,
            width: 12,
            classes: 2,
            layout: Layout::Blocks { size: 6 },
            noise_std: 0.05,
            seed: 3,
        })
        .unwrap();
        cube.normalize().unwrap();
        let split = sample_split(&cube.labels, cube.width, 2, 4, 3, 1).unwrap();
        (cube, split)
    }

    fn tiny() -> SearchConfig {
        SearchConfig {
            layers: 1,
            nodes: 2,
            width: 2,
            warmup_epochs: 1,
            search_epochs: 1,
            iters_per_epoch: 1,
            patch: 6,
            batch: 2,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn warmup_leaves_arch_untouched_and_alternation_moves_both() {
        let (cube, split) = setup();
        let cfg = tiny();
        let mut st = SearchState::<f64>::new(&cfg, &cfg.shape(8, 2)).unwrap();
        let mut s = PatchSampler::new(&cube, &split.train, 6, 2, false, 0).unwrap();
        let arch = st.store.checksum(ParamGroup::Arch);
        let weight = st.store.checksum(ParamGroup::Weight);
        st.weight_step(&s.next_batch(), 0.025).unwrap();
        assert_eq!(st.store.checksum(ParamGroup::Arch), arch);
        assert_ne!(st.store.checksum(ParamGroup::Weight), weight);
        let weight = st.store.checksum(ParamGroup::Weight);
        st.alternating_step(&s.next_batch(), &s.next_batch(), 0.025).unwrap();
        assert_ne!(st.store.checksum(ParamGroup::Arch), arch);
        assert_ne!(st.store.checksum(ParamGroup::Weight), weight);
    }

    #[test]
    fn zero_learning_rates_freeze_their_group() {
        let (cube, split) = setup();
        let mut cfg = tiny();
        cfg.adam.lr = 0.0;
        let mut st = SearchState::<f64>::new(&cfg, &cfg.shape(8, 2)).unwrap();
        let mut s = PatchSampler::new(&cube, &split.train, 6, 2, false, 0).unwrap();
        let arch = st.store.checksum(ParamGroup::Arch);
        st.alternating_step(&s.next_batch(), &s.next_batch(), 0.025).unwrap();
        assert_eq!(st.store.checksum(ParamGroup::Arch), arch);
        let weight = st.store.checksum(ParamGroup::Weight);
        cfg.adam.lr = 0.001;
        st.adam = Adam::new(ParamGroup::Arch, cfg.adam);
        st.alternating_step(&s.next_batch(), &s.next_batch(), 0.0).unwrap();
        assert_eq!(st.store.checksum(ParamGroup::Weight), weight);
        assert_ne!(st.store.checksum(ParamGroup::Arch), arch);
    }

    #[test]
    fn record_picks_a_search_epoch_and_round_trips() {
        let (cube, split) = setup();
        let dir = tempfile::tempdir().unwrap();
        let out = search::<f32>(&tiny(), &cube, &split, Some(dir.path())).unwrap();
        assert_eq!(out.record.best_epoch, Some(1));
        assert!(!out.record.partial);
        let loaded = SearchRecord::load(&dir.path().join(RECORD_FILE)).unwrap();
        assert_eq!(loaded.epochs.len(), 2);
        let path = dir.path().join(CHECKPOINT_FILE);
        let snap = arch_from_checkpoint(&path, &checkpoint::load(&path).unwrap()).unwrap();
        let best = out.record.best_arch.unwrap();
        assert_eq!(snap.layers.len(), best.layers.len());
        for (a, b) in snap.layers.iter().zip(&best.layers) {
            assert!((a.alpha - b.alpha).abs() < 1e-6);
        }
    }

    #[test]
    fn failed_checkpoint_leaves_a_partial_record() {
        let (cube, split) = setup();
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join(CHECKPOINT_FILE)).unwrap();
        std::fs::write(dir.path().join(CHECKPOINT_FILE).join("keep"), b"x").unwrap();
        assert!(search::<f32>(&tiny(), &cube, &split, Some(dir.path())).is_err());
        assert!(SearchRecord::load(&dir.path().join(RECORD_FILE)).unwrap().partial);
    }
}
