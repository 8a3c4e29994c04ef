use std::path::Path;
use std::process::{Command, Output};

fn hytnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hytnas"))
        .args(args)
        .env_remove("HYTNAS_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hytnas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--bands", "8", "--height", "16", "--width", "16", "--classes", "3", "--seeds", "6", "--out", s(dir),
    ]);
}

const TINY: &[&str] = &[
    "--preset",
    "desk",
    "--layers",
    "1",
    "--width",
    "2",
    "--heads",
    "2",
    "--warmup-epochs",
    "1",
    "--search-epochs",
    "1",
    "--iters-per-epoch",
    "1",
    "--search-patch",
    "8",
    "--search-batch",
    "2",
    "--train-patch",
    "8",
    "--train-batch",
    "2",
    "--window",
    "8",
    "--iters",
    "3",
    "--val-iters",
    "2",
    "--n-train",
    "4",
    "--n-val",
    "2",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_chain_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (cube, search, derive, train, pred, eval) = (
        tmp.path().join("cube"),
        tmp.path().join("search"),
        tmp.path().join("derive"),
        tmp.path().join("train"),
        tmp.path().join("pred"),
        tmp.path().join("eval"),
    );
    synth(&cube);
    for f in ["header.json", "cube.bin", "labels.bin", "manifest.json"] {
        assert!(cube.join(f).is_file(), "{f}");
    }

    run(&with(&["search", "--cube", s(&cube), "--out", s(&search)], TINY));
    for f in ["config.json", "split.json", "supernet.ckpt", "search_record.json", "manifest.json"] {
        assert!(search.join(f).is_file(), "{f}");
    }
    let manifest = json(&search.join("manifest.json"));
    assert_eq!(manifest["command"], "search");
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.ends_with("cube.bin")));
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));

    let ckpt = search.join("supernet.ckpt");
    ok(&["derive", "--checkpoint", s(&ckpt), "--out", s(&derive)]);
    let genotype = json(&derive.join("genotype.json"));
    assert_eq!(genotype["layers"].as_array().unwrap().len(), 1);
    assert!(derive.join("genotype_stats.txt").is_file());

    let g = derive.join("genotype.json");
    let split = search.join("split.json");
    run(&with(
        &["train", "--cube", s(&cube), "--genotype", s(&g), "--split", s(&split), "--out", s(&train)],
        TINY,
    ));
    for f in ["model.ckpt", "train_log.json", "config.json", "manifest.json"] {
        assert!(train.join(f).is_file(), "{f}");
    }

    let model = train.join("model.ckpt");
    let attn = pred.join("attention");
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--cube",
        s(&cube),
        "--dump-attention",
        s(&attn),
        "--out",
        s(&pred),
    ]);
    let bin = std::fs::read(pred.join("class_map.bin")).unwrap();
    assert_eq!(bin.len(), 16 * 16 * 4);
    assert!(std::fs::read(pred.join("class_map.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));
    assert!(attn.join("attention.ckpt").is_file());

    let out = ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--cube",
        s(&cube),
        "--split",
        s(&split),
        "--out",
        s(&eval),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("OA"), "{table}");
    let metrics = json(&eval.join("metrics.json"));
    let oa = metrics["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));
}

#[test]
fn training_without_the_attention_block() {
    let tmp = tempfile::tempdir().unwrap();
    let (cube, search, train, pred) = (
        tmp.path().join("cube"),
        tmp.path().join("search"),
        tmp.path().join("train"),
        tmp.path().join("pred"),
    );
    synth(&cube);
    run(&with(&["search", "--cube", s(&cube), "--out", s(&search)], TINY));
    ok(&["derive", "--checkpoint", s(&search.join("supernet.ckpt")), "--out", s(&search)]);
    let g = search.join("genotype.json");
    run(&with(
        &["train", "--cube", s(&cube), "--genotype", s(&g), "--no-transformer", "--out", s(&train)],
        TINY,
    ));
    assert_eq!(json(&train.join("config.json"))["transformer"]["blocks"], 0);
    // without the fixed attention grid any window fits
    ok(&[
        "predict",
        "--model",
        s(&train.join("model.ckpt")),
        "--cube",
        s(&cube),
        "--window",
        "12",
        "--no-overlap",
        "--out",
        s(&pred),
    ]);
}

#[test]
fn synthesis_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["synth", "--height", "10", "--width", "10", "--seed", "3", "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_hytnas"))
        .args(["synth", "--height", "10", "--width", "10", "--out", s(&b)])
        .env("HYTNAS_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(&["synth", "--height", "10", "--width", "10", "--seed", "4", "--out", s(&c)]);
    let read = |d: &Path| std::fs::read(d.join("cube.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn ops_dump_lists_both_menus() {
    let out = ok(&["ops-dump"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = v.to_string();
    for op in ["acon_3-1", "econ_5-1", "con_3-5", "skip_connection", "discarding"] {
        assert!(text.contains(op), "{op} missing");
    }
    assert!(hytnas(&["ops"]).status.success());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cube = tmp.path().join("cube");
    synth(&cube);
    let out = tmp.path().join("out");

    let missing = hytnas(&["search", "--cube", s(&tmp.path().join("nope")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_field = hytnas(&["search", "--cube", s(&cube), "--set", "train.itres=5", "--out", s(&out)]);
    assert_eq!(bad_field.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_field.stderr).contains("itres"));

    let bad_heads = hytnas(&["search", "--cube", s(&cube), "--heads", "5", "--out", s(&out)]);
    assert_eq!(bad_heads.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_heads.stderr).contains("heads"));

    let bad_preset = hytnas(&["search", "--cube", s(&cube), "--preset", "indiana", "--out", s(&out)]);
    assert_eq!(bad_preset.status.code(), Some(2));

    let unknown_flag = hytnas(&["search", "--frobnicate"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
}

#[test]
fn corrupt_cube_is_reported_with_an_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let cube = tmp.path().join("cube");
    synth(&cube);
    let bytes = std::fs::read(cube.join("cube.bin")).unwrap();
    std::fs::write(cube.join("cube.bin"), &bytes[..bytes.len() - 6]).unwrap();
    let out = hytnas(&["search", "--cube", s(&cube), "--out", s(&tmp.path().join("o"))]);
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cube.bin"), "{err}");
}
