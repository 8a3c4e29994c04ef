use std::path::{Path, PathBuf};

use hytnas::checkpoint::{self, write_atomic, TensorKind};
use hytnas::config::{set_path, RunConfig};
use hytnas::data::{export_classmap, synth_generate, HsiCube, Layout, SynthSpec, PALETTE};
use hytnas::derivation::Genotype;
use hytnas::pipeline::{compute_metrics, InferConfig, SampleSplit};
use hytnas::search::{CHECKPOINT_FILE, RECORD_FILE};
use hytnas::workflow::{
    attention_maps, derive_from_checkpoint, load_json, load_model, load_normalized, make_split, run_predict,
    run_search, run_train, save_json, save_model, GENOTYPE_FILE, MODEL_FILE, SPLIT_FILE,
};
use hytnas::Tensor;
use serde_json::{json, Value};

use crate::manifest;
use crate::{CliError, CliResult, ConfigArgs, DeriveArgs, EvalArgs, EvalSet, LayoutKind, OpsArgs, PredictArgs, SearchArgs, SynthArgs, TrainArgs};

const CLASS_MAP_BIN: &str = "class_map.bin";
const CLASS_MAP_PPM: &str = "class_map.ppm";
const PREDICTION_FILE: &str = "prediction.json";
const PROBS_FILE: &str = "probabilities.ckpt";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(hytnas::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Builds the effective configuration: preset, file, `--set`, then flags.
pub fn build_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    let mut v = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    hytnas::Error::MissingInput { path: path.clone() }
                } else {
                    hytnas::Error::Io {
                        path: path.clone(),
                        source: e,
                    }
                }
            })?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?
        }
        None => json!({}),
    };
    if let Some(p) = &a.preset {
        v["preset"] = json!(p);
    }
    for s in &a.sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects PATH=VALUE, got {s:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| json!(raw));
        set_path(&mut v, path, value)?;
    }
    let flags: [(&str, Option<Value>); 18] = [
        ("supernet.layers", a.layers.map(|x| json!(x))),
        ("supernet.nodes", a.nodes.map(|x| json!(x))),
        ("supernet.width", a.width.map(|x| json!(x))),
        ("supernet.space", a.space.as_ref().map(|x| json!(x.replace('-', "_")))),
        ("supernet.warmup_epochs", a.warmup_epochs.map(|x| json!(x))),
        ("supernet.search_epochs", a.search_epochs.map(|x| json!(x))),
        ("supernet.iters_per_epoch", a.iters_per_epoch.map(|x| json!(x))),
        ("supernet.patch", a.search_patch.map(|x| json!(x))),
        ("supernet.batch", a.search_batch.map(|x| json!(x))),
        ("train.patch", a.train_patch.map(|x| json!(x))),
        ("train.batch", a.train_batch.map(|x| json!(x))),
        ("train.iters", a.iters.map(|x| json!(x))),
        ("train.val_iters", a.val_iters.map(|x| json!(x))),
        ("split.n_train", a.n_train.map(|x| json!(x))),
        ("split.n_val", a.n_val.map(|x| json!(x))),
        ("infer.window", a.window.map(|x| json!(x))),
        ("transformer.heads", a.heads.map(|x| json!(x))),
        ("transformer.blocks", a.blocks.map(|x| json!(x))),
    ];
    for (path, value) in flags {
        if let Some(value) = value {
            set_path(&mut v, path, value)?;
        }
    }
    if a.no_transformer {
        set_path(&mut v, "transformer.blocks", json!(0))?;
    }
    if let Some(seed) = a.seed {
        for path in ["split.seed", "supernet.seed", "train.seed"] {
            set_path(&mut v, path, json!(seed))?;
        }
    }
    Ok(RunConfig::from_value(v)?)
}

fn seeds(cfg: &RunConfig) -> Value {
    json!({"split": cfg.split.seed, "supernet": cfg.supernet.seed, "train": cfg.train.seed})
}

fn cube_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.cube.clone())
        .ok_or_else(|| CliError::Usage("no cube given: pass --cube or set data.cube".into()))
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> CliResult<()> {
    let spec = SynthSpec {
        bands: a.bands,
        height: a.height,
        width: a.width,
        classes: a.classes,
        layout: match a.layout {
            LayoutKind::Blocks => Layout::Blocks { size: a.block },
            LayoutKind::Voronoi => Layout::Voronoi { seeds: a.seeds },
        },
        noise_std: a.noise_std,
        seed: a.seed,
    };
    let cube = synth_generate(&spec)?;
    cube.save(&a.out)?;
    let spec_json = serde_json::to_value(&spec).expect("spec serializes");
    manifest::write(&a.out, "synth", argv, Some(spec_json), json!({"synth": a.seed}), &[])?;
    println!("wrote {} × {} × {} cube with {} classes to {}", a.bands, a.height, a.width, a.classes, a.out.display());
    Ok(())
}

pub fn search(a: &SearchArgs, argv: &[String]) -> CliResult<()> {
    let cfg = build_config(&a.config)?;
    let cube_dir = cube_path(&a.cube, &cfg)?;
    let cube = load_normalized(&cube_dir)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.json"), &cfg.to_json())?;
    let split = make_split(&cfg, &cube)?;
    save_json(&a.out.join(SPLIT_FILE), &split)?;
    manifest::write(&a.out, "search", argv, Some(serde_json::to_value(&cfg).unwrap()), seeds(&cfg), &[&cube_dir])?;
    let outcome = run_search(&cfg, &cube, &split, Some(&a.out))?;
    println!(
        "best epoch {} with val OA {:.4}; wrote {} and {}",
        outcome.record.best_epoch.unwrap_or(0),
        outcome.record.best_val_oa.unwrap_or(0.0),
        a.out.join(CHECKPOINT_FILE).display(),
        a.out.join(RECORD_FILE).display()
    );
    Ok(())
}

pub fn derive(a: &DeriveArgs, argv: &[String]) -> CliResult<()> {
    let (g, stats) = derive_from_checkpoint(&a.checkpoint)?;
    create_dir(&a.out)?;
    write_text(&a.out.join(GENOTYPE_FILE), &g.to_canonical_json())?;
    let table = stats.table(&g);
    write_text(&a.out.join("genotype_stats.txt"), &table)?;
    save_json(&a.out.join("genotype_stats.json"), &stats)?;
    manifest::write(&a.out, "derive", argv, None, json!({}), &[&a.checkpoint])?;
    print!("{table}");
    Ok(())
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let cfg = build_config(&a.config)?;
    let cube_dir = cube_path(&a.cube, &cfg)?;
    let cube = load_normalized(&cube_dir)?;
    let genotype = Genotype::load(&a.genotype)?;
    let split: SampleSplit = match &a.split {
        Some(p) => load_json(p)?,
        None => make_split(&cfg, &cube)?,
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("config.json"), &cfg.to_json())?;
    save_json(&a.out.join(SPLIT_FILE), &split)?;
    let mut inputs: Vec<&Path> = vec![&cube_dir, &a.genotype];
    if let Some(p) = &a.split {
        inputs.push(p);
    }
    manifest::write(&a.out, "train", argv, Some(serde_json::to_value(&cfg).unwrap()), seeds(&cfg), &inputs)?;
    let trained = run_train(&cfg, &genotype, &cube, &split)?;
    save_model(&a.out.join(MODEL_FILE), &trained, &cfg.transformer, (cfg.train.patch, cfg.train.patch))?;
    save_json(
        &a.out.join("train_log.json"),
        &json!({"best": trained.best, "validations": trained.validations, "log": trained.log}),
    )?;
    println!(
        "best validation at iteration {}: OA {:.4}, loss {:.4}; wrote {}",
        trained.best.iter,
        trained.best.oa,
        trained.best.loss,
        a.out.join(MODEL_FILE).display()
    );
    Ok(())
}

fn parse_origin(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--attention-origin expects ROW,COL, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

pub fn predict(a: &PredictArgs, argv: &[String]) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let cube = load_normalized(&a.cube)?;
    let cfg = InferConfig {
        window: a.window.unwrap_or(model.grid.0),
        overlap: !a.no_overlap,
        batch: a.batch.max(1),
    };
    let pred = run_predict(&model, &cube, &cfg)?;
    create_dir(&a.out)?;
    let mut bytes = Vec::with_capacity(pred.class_map.len() * 4);
    for &c in &pred.class_map {
        bytes.extend_from_slice(&(c as i32).to_le_bytes());
    }
    write_atomic(&a.out.join(CLASS_MAP_BIN), &bytes)?;
    export_classmap(&pred.class_map, pred.height, pred.width, &PALETTE, &a.out.join(CLASS_MAP_PPM))?;
    let probs = Tensor::new(&[pred.classes, pred.height, pred.width], pred.probs.iter().map(|&p| p as f32).collect());
    checkpoint::save_tensors(&a.out.join(PROBS_FILE), &[("probabilities", TensorKind::Data, &probs)], json!({}))?;
    save_json(
        &a.out.join(PREDICTION_FILE),
        &json!({
            "height": pred.height,
            "width": pred.width,
            "classes": pred.classes,
            "window": cfg.window,
            "overlap": cfg.overlap,
            "stride": cfg.stride(),
        }),
    )?;
    if let Some(dir) = &a.dump_attention {
        let (r0, c0) = parse_origin(&a.attention_origin)?;
        let maps = attention_maps(&model, &cube, r0, c0)?;
        create_dir(dir)?;
        let names: Vec<String> = (0..maps.len()).map(|k| format!("block{k}")).collect();
        let list: Vec<_> = names.iter().zip(&maps).map(|(n, m)| (n.as_str(), TensorKind::Data, m)).collect();
        let meta = json!({"origin": [r0, c0], "grid": [model.grid.0, model.grid.1]});
        checkpoint::save_tensors(&dir.join("attention.ckpt"), &list, meta.clone())?;
        let blocks: Vec<Value> = names
            .iter()
            .zip(&maps)
            .map(|(n, m)| json!({"name": n, "shape": m.shape(), "layout": "[batch, head, query, key]"}))
            .collect();
        save_json(
            &dir.join("attention_index.json"),
            &json!({"file": "attention.ckpt", "origin": [r0, c0], "grid": meta["grid"], "token_order": "row-major", "blocks": blocks}),
        )?;
        if maps.is_empty() {
            log::warn!("the model has no attention blocks; wrote an empty attention dump");
        }
    }
    manifest::write(&a.out, "predict", argv, Some(serde_json::to_value(&cfg).unwrap()), json!({}), &[&a.model, &a.cube])?;
    println!(
        "predicted {} × {} map ({} stride {}); wrote {}",
        pred.height,
        pred.width,
        if cfg.overlap { "overlap" } else { "tiled" },
        cfg.stride(),
        a.out.join(CLASS_MAP_PPM).display()
    );
    Ok(())
}

/// Reads the class map written by `predict`.
pub fn read_prediction(dir: &Path, cube: &HsiCube) -> CliResult<Vec<u32>> {
    let info: Value = load_json(&dir.join(PREDICTION_FILE))?;
    let (h, w) = (info["height"].as_u64().unwrap_or(0) as usize, info["width"].as_u64().unwrap_or(0) as usize);
    if (h, w) != (cube.height, cube.width) {
        return Err(CliError::Core(hytnas::Error::Contract(format!(
            "prediction is {h} × {w}, the cube is {} × {}",
            cube.height, cube.width
        ))));
    }
    let path = dir.join(CLASS_MAP_BIN);
    let bytes = std::fs::read(&path).map_err(|e| hytnas::Error::Io { path: path.clone(), source: e })?;
    if bytes.len() != 4 * h * w {
        return Err(CliError::Core(hytnas::Error::Format {
            path,
            message: format!("expected {} bytes, found {}", 4 * h * w, bytes.len()),
        }));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()).max(0) as u32)
        .collect())
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let cube = HsiCube::load(&a.cube)?;
    let split: SampleSplit = load_json(&a.split)?;
    let pred = read_prediction(&a.pred, &cube)?;
    let pixels = match a.set {
        EvalSet::Train => &split.train,
        EvalSet::Val => &split.val,
        EvalSet::Test => &split.test,
    };
    let report = compute_metrics(&pred, cube.width, cube.num_classes(), pixels)?;
    let table = report.table(&cube.class_names);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("metrics.json"), &report.to_json())?;
        write_text(&out.join("metrics.txt"), &table)?;
        manifest::write(out, "eval", argv, None, json!({}), &[&a.pred, &a.cube, &a.split])?;
    }
    print!("{table}");
    Ok(())
}

pub fn ops_dump(a: &OpsArgs) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(&hytnas::search_space::menu_json()).expect("menu serializes");
    text.push('\n');
    if let Some(path) = &a.dump {
        write_text(path, &text)?;
    }
    print!("{text}");
    Ok(())
}
