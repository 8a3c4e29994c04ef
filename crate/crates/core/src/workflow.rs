//! The stages of a run as functions over files: search, derive, train,
//! predict and evaluate, plus the whole chain in one call.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::RunConfig;
use crate::data::HsiCube;
use crate::derivation::{derive_genotype, genotype_stats, Genotype, GenotypeStats};
use crate::error::{Error, Result};
use crate::network::CompactNet;
use crate::params::ParamStore;
use crate::pipeline::{
    compute_metrics, infer, sample_split, train_compact, InferConfig, MetricsReport, Prediction, SampleSplit,
    TrainedModel, ValPoint,
};
use crate::search::{self, arch_from_checkpoint, SearchOutcome};
use crate::transformer::TransformerConfig;

pub const MODEL_FILE: &str = "model.ckpt";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const SPLIT_FILE: &str = "split.json";

/// Loads a cube and normalizes it unless it already is.
pub fn load_normalized(dir: &Path) -> Result<HsiCube> {
    let mut cube = HsiCube::load(dir)?;
    if cube.normalization.is_none() {
        cube.normalize()?;
    }
    Ok(cube)
}

pub fn make_split(cfg: &RunConfig, cube: &HsiCube) -> Result<SampleSplit> {
    sample_split(
        &cube.labels,
        cube.width,
        cube.num_classes(),
        cfg.split.n_train,
        cfg.split.n_val,
        cfg.split.seed,
    )
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn run_search(cfg: &RunConfig, cube: &HsiCube, split: &SampleSplit, out: Option<&Path>) -> Result<SearchOutcome<f32>> {
    search::search::<f32>(&cfg.supernet, cube, split, out)
}

/// Genotype of the best architecture stored in a search checkpoint.
pub fn derive_from_checkpoint(path: &Path) -> Result<(Genotype, GenotypeStats)> {
    let ckpt = checkpoint::load(path)?;
    let snap = arch_from_checkpoint(path, &ckpt)?;
    let g = derive_genotype(&snap)?;
    let stats = genotype_stats(&g);
    Ok((g, stats))
}

/// Builds the compact network for `genotype` and trains it.
pub fn run_train(
    cfg: &RunConfig,
    genotype: &Genotype,
    cube: &HsiCube,
    split: &SampleSplit,
) -> Result<TrainedModel<f32>> {
    if genotype.shape.bands != cube.bands || genotype.shape.classes != cube.num_classes() {
        return Err(Error::Contract(format!(
            "genotype expects {} bands and {} classes, the cube has {} and {}",
            genotype.shape.bands,
            genotype.shape.classes,
            cube.bands,
            cube.num_classes()
        )));
    }
    let grid = (cfg.train.patch, cfg.train.patch);
    let (net, store) = CompactNet::build::<f32>(genotype, &cfg.transformer, grid, cfg.train.seed)?;
    train_compact(net, store, cube, split, &cfg.train, &cfg.infer)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    genotype: serde_json::Value,
    transformer: TransformerConfig,
    grid: (usize, usize),
    best: ValPoint,
}

pub fn save_model(path: &Path, model: &TrainedModel<f32>, transformer: &TransformerConfig, grid: (usize, usize)) -> Result<()> {
    let genotype: serde_json::Value =
        serde_json::from_str(&model.net.genotype.to_canonical_json()).expect("genotype is valid JSON");
    let meta = ModelMeta {
        kind: "compact".into(),
        genotype,
        transformer: *transformer,
        grid,
        best: model.best,
    };
    checkpoint::save_store(path, &model.store, serde_json::to_value(meta).expect("meta serializes"))
}

/// A trained compact network read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub net: CompactNet,
    pub store: ParamStore<f32>,
    pub best: ValPoint,
    pub grid: (usize, usize),
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_value(ckpt.meta().clone())
        .map_err(|e| Error::format(path, format!("not a compact model checkpoint: {e}")))?;
    if meta.kind != "compact" {
        return Err(Error::format(path, format!("expected a compact model checkpoint, found {:?}", meta.kind)));
    }
    let genotype = Genotype::from_json(path, &meta.genotype.to_string())?;
    let (net, mut store) = CompactNet::build::<f32>(&genotype, &meta.transformer, meta.grid, 0)?;
    ckpt.restore_into(&mut store)?;
    Ok(LoadedModel {
        net,
        store,
        best: meta.best,
        grid: meta.grid,
    })
}

/// Dense class map and probabilities over the whole cube.
pub fn run_predict(model: &LoadedModel, cube: &HsiCube, infer_cfg: &InferConfig) -> Result<Prediction> {
    infer(&model.net, &model.store, cube, infer_cfg)
}

/// Attention maps `(1, heads, N, N)` per block for the window at
/// `(row0, col0)`.
pub fn attention_maps(model: &LoadedModel, cube: &HsiCube, row0: usize, col0: usize) -> Result<Vec<crate::Tensor<f32>>> {
    use crate::autodiff::Graph;
    use crate::nn::Ctx;
    let (h, w) = model.grid;
    if model.net.blocks.is_empty() {
        return Ok(Vec::new());
    }
    if row0 + h > cube.height || col0 + w > cube.width {
        return Err(Error::Contract(format!("attention window {h} × {w} does not fit the cube")));
    }
    let mut x = Vec::with_capacity(cube.bands * h * w);
    for b in 0..cube.bands {
        for r in row0..row0 + h {
            for c in col0..col0 + w {
                x.push(cube.at(b, r, c));
            }
        }
    }
    let g = Graph::new();
    let mut cx = Ctx::eval(&g, &model.store);
    let input = g.constant(crate::Tensor::new(&[1, 1, cube.bands, h, w], x));
    let (_, maps) = model.net.logits_with_attention(&mut cx, input);
    Ok(maps.into_iter().map(|m| (*m.value()).clone()).collect())
}

pub fn run_eval(pred: &[u32], cube: &HsiCube, split: &SampleSplit) -> Result<MetricsReport> {
    compute_metrics(pred, cube.width, cube.num_classes(), &split.test)
}

/// Everything an end-to-end run produces.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub genotype: Genotype,
    pub stats: GenotypeStats,
    pub best_search_epoch: usize,
    pub best_val: ValPoint,
    pub metrics: MetricsReport,
    pub prediction: Prediction,
}

/// Search, derive, train, predict and evaluate on one cube. With `out`,
/// every artifact is written there.
pub fn run_pipeline(cfg: &RunConfig, cube: &HsiCube, out: Option<&Path>) -> Result<PipelineReport> {
    cfg.validate()?;
    let split = make_split(cfg, cube)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_json(&dir.join(SPLIT_FILE), &split)?;
    }
    let searched = run_search(cfg, cube, &split, out)?;
    let snap = searched.record.best_arch.clone().expect("search records its best architecture");
    let genotype = derive_genotype(&snap)?;
    let stats = genotype_stats(&genotype);
    let trained = run_train(cfg, &genotype, cube, &split)?;
    let prediction = infer(&trained.net, &trained.store, cube, &cfg.infer)?;
    let metrics = run_eval(&prediction.class_map, cube, &split)?;
    if let Some(dir) = out {
        write_atomic(&dir.join(GENOTYPE_FILE), genotype.to_canonical_json().as_bytes())?;
        save_model(&dir.join(MODEL_FILE), &trained, &cfg.transformer, (cfg.train.patch, cfg.train.patch))?;
        write_atomic(&dir.join("metrics.json"), metrics.to_json().as_bytes())?;
    }
    Ok(PipelineReport {
        genotype,
        stats,
        best_search_epoch: searched.record.best_epoch.expect("best epoch recorded"),
        best_val: trained.best,
        metrics,
        prediction,
    })
}

