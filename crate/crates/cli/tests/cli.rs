use aerobatch::dataset::{build_primitive, stream_rng, ActionLabel, Dataset, DatasetSpec};
use aerobatch::{Vec3, FRAME_DT};
use aerobatch_cli::commands::Manifest;
use aerobatch_cli::eval::quantile;
use aerobatch_cli::plot::BoxStats;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aerobatch"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(sub: &str, config: &Path, out: &Path) -> Output {
    bin()
        .args([sub, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// A few-second configuration: small dataset, tiny model.
fn tiny() -> Value {
    json!({
        "schema_version": 1,
        "seed": 3,
        "dataset": { "targets_per_action": 2, "augment_deg": [] },
        "train": {
            "steps": 15,
            "batch_size": 4,
            "model": { "d_model": 16, "layers": 1, "heads": 2 }
        },
        "guidance": { "batch": 4 },
        "chain": { "n_aero": 2 },
        "ablation": { "seeds": [0, 1], "n_aero": 2 }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn with_inputs(mut v: Value, inputs: Value) -> Value {
    v["inputs"] = inputs;
    v
}

/// Rerun from the manifest and compare every output digest.
fn assert_rerun_identical(dir: &Path, sub: &str, scratch: &Path) {
    let again = scratch.join(format!("{sub}-rerun"));
    ok(&run(sub, &dir.join("manifest.json"), &again));
    let a = manifest(dir);
    let b = manifest(&again);
    assert_eq!(a.config_hash, b.config_hash);
    assert!(!a.outputs.is_empty());
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        assert_eq!(x.path, y.path);
        assert_eq!(x.sha256, y.sha256, "{sub}: {} differs on rerun", x.path);
    }
    assert_eq!(a.summary, b.summary);
}

#[test]
fn pipeline_runs_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let base = tiny();

    let cfg = write_config(root, "dataset.json", &base);
    let ds_dir = root.join("ds");
    ok(&run("dataset", &cfg, &ds_dir));
    assert_rerun_identical(&ds_dir, "dataset", root);
    let ds = Dataset::load(&ds_dir.join("dataset.bin")).unwrap();
    assert_eq!(ds.primitives.len(), 10);

    let mut export = base.clone();
    export["export_json"] = json!(true);
    let cfg = write_config(root, "export.json", &export);
    ok(&run("dataset", &cfg, &root.join("export")));
    let text = std::fs::read_to_string(root.join("export/dataset.json")).unwrap();
    let from_json: Dataset = serde_json::from_str(&text).unwrap();
    assert_eq!(from_json, ds);

    let cfg = write_config(root, "train.json", &with_inputs(base.clone(), json!({ "dataset": "ds/dataset.bin" })));
    let tr_dir = root.join("train");
    ok(&run("train", &cfg, &tr_dir));
    assert_rerun_identical(&tr_dir, "train", root);
    assert_eq!(manifest(&tr_dir).inputs.len(), 1);

    let mut scene = base.clone();
    scene["scenario"] = json!({ "kind": "forest", "voxel": 0.2 });
    let cfg = write_config(root, "scene.json", &scene);
    let sc_dir = root.join("scene");
    ok(&run("scene", &cfg, &sc_dir));
    assert_rerun_identical(&sc_dir, "scene", root);

    let cfg = write_config(
        root,
        "generate.json",
        &with_inputs(base.clone(), json!({ "checkpoint": "train/model.ckpt" })),
    );
    let gen_dir = root.join("gen");
    let o = run("generate", &cfg, &gen_dir);
    ok(&o);
    assert_rerun_identical(&gen_dir, "generate", root);
    let chain = Dataset::load(&gen_dir.join("chain.bin")).unwrap();
    assert_eq!(chain.primitives.len(), 2);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["primitives"], 2);

    let cfg = write_config(
        root,
        "plot.json",
        &with_inputs(base.clone(), json!({ "artifact": "gen/chain.json" })),
    );
    let pl_dir = root.join("plot-chain");
    ok(&run("plot", &cfg, &pl_dir));
    assert!(std::fs::read_to_string(pl_dir.join("chain.svg")).unwrap().starts_with("<svg"));
    assert_rerun_identical(&pl_dir, "plot", root);

    let cfg = write_config(
        root,
        "plot-loss.json",
        &with_inputs(base, json!({ "artifact": "train/loss.csv" })),
    );
    ok(&run("plot", &cfg, &root.join("plot-loss")));
    assert!(root.join("plot-loss/loss.svg").exists());
}

/// Post-processing of a template primitive; also renders its profile.
#[test]
fn postprocess_template_chain_is_feasible_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = DatasetSpec::default();
    let p = build_primitive(ActionLabel::PowerLoop, &Vec3::new(5.0, 1.0, 0.0), &spec, &mut stream_rng(11, 0)).unwrap();
    let ds = Dataset {
        n_a: spec.n_a,
        n_h: spec.n_h,
        dt: FRAME_DT,
        primitives: vec![p],
    };
    std::fs::create_dir_all(root.join("chain")).unwrap();
    ds.save(&root.join("chain/chain.bin")).unwrap();

    let cfg = write_config(root, "pp.json", &with_inputs(tiny(), json!({ "chain": "chain/chain.bin" })));
    let out = root.join("pp");
    ok(&run("postprocess", &cfg, &out));
    assert_rerun_identical(&out, "postprocess", root);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["feasible"], true);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,px,py,pz,"));
    assert!(csv.lines().count() > 100);

    let cfg = write_config(root, "plot.json", &with_inputs(tiny(), json!({ "artifact": "pp/trajectory.csv" })));
    ok(&run("plot", &cfg, &root.join("profile")));
    assert!(root.join("profile/profile.svg").exists());
}

#[test]
fn ablation_micro_run_is_thread_count_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let base = tiny();
    let cfg = write_config(root, "train.json", &base);
    ok(&run("train", &cfg, &root.join("train")));

    let mut ab = with_inputs(base, json!({ "checkpoint": "train/model.ckpt" }));
    ab["guidance"]["batch"] = json!(16);
    ab["scenario"] = json!({ "kind": "forest", "voxel": 0.2 });
    let cfg = write_config(root, "ablate.json", &ab);
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = root.join(format!("ablate-{threads}"));
        let o = bin()
            .env("AEROBATCH_THREADS", threads)
            .args(["ablate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        ok(&o);
        outs.push(out);
    }
    let a = std::fs::read(outs[0].join("ablation.json")).unwrap();
    let b = std::fs::read(outs[1].join("ablation.json")).unwrap();
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3 * 2);
    for c in cells {
        assert_eq!(c["rates"].as_array().unwrap().len(), 2);
        let m = c["median"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&m));
    }
    let table = std::fs::read_to_string(outs[0].join("ablation.txt")).unwrap();
    assert!(table.contains("N_aero=2"));
}

#[test]
fn missing_input_reports_json_and_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.json", &with_inputs(tiny(), json!({ "checkpoint": "nope.ckpt" })));
    let out = tmp.path().join("out");
    let o = run("generate", &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["error"], "missing_input");
    assert!(err["message"].as_str().unwrap().contains("nope.ckpt"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["guidance"]["lamda"] = json!(0.1);
    let cfg = write_config(tmp.path(), "bad.json", &v);
    let out = tmp.path().join("out");
    let o = run("dataset", &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("lamda"));

    let mut v = tiny();
    v["schema_version"] = json!(9);
    let cfg = write_config(tmp.path(), "schema.json", &v);
    assert_eq!(run("dataset", &cfg, &out).status.code(), Some(2));
}

#[test]
fn unsupported_plot_artifact_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("x.txt"), "hello").unwrap();
    let cfg = write_config(tmp.path(), "p.json", &with_inputs(tiny(), json!({ "artifact": "x.txt" })));
    let o = run("plot", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn quantiles_interpolate_linearly() {
    let xs = [4.0, 1.0, 3.0, 2.0];
    assert_eq!(quantile(&xs, 0.25), 1.75);
    assert_eq!(quantile(&xs, 0.5), 2.5);
    assert_eq!(quantile(&xs, 0.75), 3.25);
    assert_eq!(quantile(&[7.0], 0.3), 7.0);
    let b = BoxStats::of(&[10.0, 0.0, 5.0, 20.0, 15.0]);
    assert_eq!((b.whisker_lo, b.q1, b.median, b.q3, b.whisker_hi), (0.0, 5.0, 10.0, 15.0, 20.0));
}

#[test]
fn boxplot_artifact_carries_quantiles() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = json!({ "title": "errors", "boxplot": { "a": [4.0, 1.0, 3.0, 2.0], "b": [1.0, 2.0, 3.0] } });
    std::fs::write(tmp.path().join("b.json"), doc.to_string()).unwrap();
    let cfg = write_config(tmp.path(), "p.json", &with_inputs(tiny(), json!({ "artifact": "b.json" })));
    let out = tmp.path().join("out");
    ok(&run("plot", &cfg, &out));
    let svg = std::fs::read_to_string(out.join("boxplot.svg")).unwrap();
    assert!(svg.contains(r#"data-name="a" data-whisker-lo="1" data-q1="1.75" data-median="2.5" data-q3="3.25" data-whisker-hi="4""#));
    assert!(svg.contains(r#"data-name="b" data-whisker-lo="1" data-q1="1.5" data-median="2" data-q3="2.5""#));
}
