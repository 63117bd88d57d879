use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use repparse::bench;
use repparse::sweep;

const TINY: &str = r#"{
  "image_height": 32, "image_width": 32,
  "feature_dim": 4, "pyramid_dim": 4, "stem_dim": 4, "block1_dim": 4,
  "width": 10, "mask_stride": 4,
  "size_bounds": [16.0, 32.0, 64.0, 128.0],
  "gen": {"height": 32, "width": 32, "persons": [1, 2], "scale": [18.0, 26.0]},
  "train": {"steps": 3, "batch": 1},
  "decode": {"score_thresh": 0.001},
  "sweep": {"steps": 1, "val_scenes": 1}
}"#;

fn repparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repparse"))
        .args(args)
        .env("REPPARSE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = repparse(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn synth_writes_ten_scenes_by_default_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--seed", "3", "--out", s(&a)]);
    ok(&["synth", "--seed", "3", "--out", s(&b)]);
    let scenes = listing(&a);
    assert_eq!(scenes.len(), 10);
    assert_eq!(scenes[0], "scene_00000");
    for name in &scenes {
        let files = listing(&a.join(name));
        assert!(files.contains(&"image.ppm".to_string()));
        assert!(files.contains(&"meta.json".to_string()));
        assert!(files.iter().any(|f| f.starts_with("inst_") && f.ends_with(".pgm")));
        for f in files {
            assert_eq!(fs::read(a.join(name).join(&f)).unwrap(), fs::read(b.join(name).join(&f)).unwrap(), "{name}/{f}");
        }
    }
}

#[test]
fn persons_flag_fixes_the_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenes", "3", "--persons", "1", "--out", s(dir.path())]);
    for name in listing(dir.path()) {
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(name).join("meta.json")).unwrap()).unwrap();
        assert!(meta["instances"].as_array().unwrap().len() <= 1);
    }
}

#[test]
fn train_infer_eval_visualize_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, run, pred, vis) = (root.join("data"), root.join("run"), root.join("pred"), root.join("vis"));

    ok(&["synth", "--scenes", "3", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--gt", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,center,box,offset,relation,mask,total"));
    assert_eq!(lines.count(), 3);
    assert!(run.join("checkpoint.rppk").is_file());

    let ckpt = run.join("checkpoint.rppk");
    ok(&["infer", "--ckpt", s(&ckpt), "--gt", s(&data), "--config", s(&cfg), "--out", s(&pred)]);
    assert_eq!(listing(&pred), listing(&data));
    for name in listing(&pred) {
        let files = listing(&pred.join(&name));
        assert!(files.contains(&"pred_meta.json".to_string()), "{name}: {files:?}");
        assert!(files.contains(&"overlay.ppm".to_string()));
    }

    let report_path = root.join("report.json");
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&data), "--out", s(&report_path)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["ap_by_threshold", "ap_p_50", "ap_p_vol", "miou", "pcp_50"]);
    assert_eq!(report["ap_by_threshold"].as_object().unwrap().len(), 9);
    for k in ["miou", "ap_p_50", "ap_p_vol", "pcp_50"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(saved, report);
    let again = ok(&["eval", "--pred", s(&pred), "--gt", s(&data)]);
    assert_eq!(again.stdout, out.stdout);

    ok(&["visualize", "--pred", s(&pred), "--gt", s(&data), "--out", s(&vis)]);
    let images = listing(&vis);
    assert_eq!(images, listing(&data).iter().map(|n| format!("{n}.ppm")).collect::<Vec<_>>());
    assert!(fs::read(vis.join(&images[0])).unwrap().starts_with(b"P6"));
}

#[test]
fn bench_and_sweep_emit_well_formed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let out = ok(&["bench", "--repeats", "3", "--config", s(&cfg)]);
    let (repeats, rows) = bench::read_csv(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(repeats, 3);
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), bench::COUNTS);
    assert!(rows.iter().all(|r| r.head_ms > 0.0 && r.roi_ms > 0.0));

    let csv = dir.path().join("sweep.csv");
    ok(&["sweep", "--scenes", "2", "--config", s(&cfg), "--out", s(&csv)]);
    let rows = sweep::read_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), sweep::grid(5).len());
    assert!(rows.iter().all(|r| r.width % 5 == 0 && r.steps == 1));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = repparse(&["eval", "--pred", s(&missing), "--gt", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"widht": 10}"#).unwrap();
    let out = repparse(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = repparse(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = repparse(&["bench", "--repeats", "0"]);
    assert_eq!(out.status.code(), Some(1));
}
