use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowmatch::autodiff::{Checkpoint, Tensor};
use flowmatch::model::{FieldModel, Mlp, ModelConfig};
use flowmatch::paths::PathSchedule;
use flowmatch::rng::{standard_normal, substream, STREAM_NOISE};
use flowmatch_cli::RunConfig;
use serde_json::json;
use tempfile::TempDir;

fn flowmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = json!({
        "schema_version": 1,
        "dataset": { "kind": "checkerboard" },
        "schedule": { "kind": "ot" },
        "model": { "widths": [16, 16] },
        "training": { "steps": 20, "batch": 32 },
        "seed": 3,
        "output_dir": dir.join("run").to_str().unwrap(),
    });
    if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn training_twice_gives_identical_losses() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&flowmatch(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]));
    }
    let la = read(&a.join("loss.csv"));
    assert_eq!(la, read(&b.join("loss.csv")));
    assert_eq!(la.lines().count(), 21);
    assert!(la.starts_with("step,loss,grad_norm"));
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));
    // The snapshot carries the overrides and loads back to the same config.
    let snap = RunConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(snap.seed, 7);
    assert_eq!(snap.output_dir, a);
    assert!(a.join("timing.csv").exists());
}

#[test]
fn zero_steps_saves_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let out = tmp.path().join("init");
    ok(&flowmatch(&["train", "--config", cfg.to_str().unwrap(), "--steps", "0", "--out", out.to_str().unwrap()]));
    let ck = Checkpoint::load(out.join("checkpoint.json")).unwrap();
    let loaded = Mlp::from_checkpoint(&ck).unwrap();
    let run = RunConfig::load(&cfg).unwrap();
    let init = Mlp::init(run.model_config().unwrap(), run.seed).unwrap();
    assert_eq!(loaded, init);
    assert_eq!(read(&out.join("loss.csv")).trim(), "step,loss,grad_norm");
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        (json!({ "trianing": {} }), "trianing"),
        (json!({ "training": { "batch": 0 } }), "training.batch"),
        (json!({ "optimizer": { "lr": -1.0 } }), "optimizer.lr"),
        (json!({ "schema_version": 2 }), "schema_version"),
        (json!({ "model": { "preset": "huge" } }), "model.preset"),
    ];
    for (extra, key) in cases {
        let cfg = tiny_config(tmp.path(), extra);
        let out = flowmatch(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{key}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{key}: {err}");
    }
    let missing = flowmatch(&["train", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(
        tmp.path(),
        json!({
            "dataset": { "kind": "points", "points": [[1e200, 1e200]] },
            "training": { "steps": 10, "batch": 8 },
        }),
    );
    let out = tmp.path().join("nan");
    let res = flowmatch(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    let ck = Checkpoint::load(out.join("checkpoint-last-good.json")).unwrap();
    let m = Mlp::from_checkpoint(&ck).unwrap();
    assert!(m.params().iter().all(|p| p.all_finite()));
}

fn zero_field_checkpoint(dir: &Path) -> PathBuf {
    let m = Mlp::init(ModelConfig::desk(2), 0).unwrap();
    let path = dir.join("zero.json");
    m.to_checkpoint(json!({ "schedule": PathSchedule::ot() })).save(&path).unwrap();
    path
}

#[test]
fn zero_field_samples_are_the_noise() {
    let tmp = TempDir::new().unwrap();
    let ck = zero_field_checkpoint(tmp.path());
    let out = tmp.path().join("samples");
    ok(&flowmatch(&[
        "sample", "--checkpoint", ck.to_str().unwrap(), "--n", "50", "--seed", "11", "--nfe", "4,8,10,20",
        "--out", out.to_str().unwrap(),
    ]));
    let noise = standard_normal(&mut substream(11, STREAM_NOISE), 100);
    for k in [4, 8, 10, 20] {
        let rows = csv_rows(&out.join(format!("samples_nfe{k}.csv")));
        assert_eq!(rows.len(), 50);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r[1].parse::<f64>().unwrap(), noise[2 * i]);
            assert_eq!(r[2].parse::<f64>().unwrap(), noise[2 * i + 1]);
            assert_eq!(r[3], k.to_string());
            assert_eq!(r[4], "ok");
        }
    }
    let summary = csv_rows(&out.join("nfe_summary.csv"));
    let budgets: Vec<&str> = summary.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(budgets, ["4", "8", "10", "20"]);
    assert!(summary.iter().all(|r| r[0] == "midpoint" && r[3] == "0"));
}

#[test]
fn dopri5_sampling_reports_per_sample_nfe() {
    let tmp = TempDir::new().unwrap();
    let ck = zero_field_checkpoint(tmp.path());
    let out = tmp.path().join("d5");
    ok(&flowmatch(&[
        "sample", "--checkpoint", ck.to_str().unwrap(), "--n", "5", "--solver", "dopri5", "--atol", "1e-6",
        "--rtol", "1e-6", "--out", out.to_str().unwrap(),
    ]));
    let rows = csv_rows(&out.join("samples_dopri5.csv"));
    assert_eq!(rows.len(), 5);
    for r in &rows {
        let nfe: usize = r[3].parse().unwrap();
        assert_eq!((nfe - 1) % 6, 0);
    }
    let bad = flowmatch(&["sample", "--checkpoint", ck.to_str().unwrap(), "--solver", "dopri5", "--nfe", "8",
        "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    let odd = flowmatch(&["sample", "--checkpoint", ck.to_str().unwrap(), "--nfe", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(odd.status.code(), Some(2));
}

/// Finite for `x₀ < 0`, overflowing for `x₀ > 0`.
fn half_broken_checkpoint(dir: &Path) -> PathBuf {
    let cfg = ModelConfig {
        widths: vec![4, 4],
        ..ModelConfig::desk(2)
    };
    let shapes = cfg.layer_shapes();
    let params: Vec<Tensor> = shapes
        .iter()
        .flat_map(|&(i, o)| {
            let mut w = Tensor::zeros(&[i, o]);
            w.data_mut()[0] = 1e200;
            [w, Tensor::zeros(&[o])]
        })
        .collect();
    let m = Mlp::from_params(cfg, params).unwrap();
    let path = dir.join("broken.json");
    m.to_checkpoint(json!({ "schedule": PathSchedule::ot() })).save(&path).unwrap();
    path
}

#[test]
fn failed_samples_are_flagged_and_the_run_continues() {
    let tmp = TempDir::new().unwrap();
    let ck = half_broken_checkpoint(tmp.path());
    let out = tmp.path().join("broken");
    ok(&flowmatch(&["sample", "--checkpoint", ck.to_str().unwrap(), "--n", "40", "--nfe", "8", "--out",
        out.to_str().unwrap()]));
    let rows = csv_rows(&out.join("samples_nfe8.csv"));
    let noise = standard_normal(&mut substream(0, STREAM_NOISE), 80);
    let failed: Vec<bool> = rows.iter().map(|r| r[4].starts_with("failed")).collect();
    assert!(failed.iter().any(|f| *f) && failed.iter().any(|f| !f));
    for (i, f) in failed.iter().enumerate() {
        if noise[2 * i] < 0.0 {
            assert!(!f, "row {i}");
        }
    }
    let summary = csv_rows(&out.join("nfe_summary.csv"));
    assert_eq!(summary[0][3], failed.iter().filter(|f| **f).count().to_string());
}

#[test]
fn identity_flow_nll_is_the_gaussian_entropy() {
    let tmp = TempDir::new().unwrap();
    let m = Mlp::init(ModelConfig::desk(2), 0).unwrap();
    let ck = tmp.path().join("id.json");
    m.to_checkpoint(json!({ "schedule": PathSchedule::ot(), "dataset": { "kind": "standard_normal" } }))
        .save(&ck)
        .unwrap();
    let mut means = Vec::new();
    for mode in ["exact", "hutchinson"] {
        let out = tmp.path().join(mode);
        ok(&flowmatch(&["nll", "--checkpoint", ck.to_str().unwrap(), "--held-out", "2000", "--mode", mode,
            "--seed", "5", "--out", out.to_str().unwrap()]));
        let summary: serde_json::Value = serde_json::from_str(&read(&out.join("nll_summary.json"))).unwrap();
        let mean = summary["mean_nll"].as_f64().unwrap();
        let se = summary["stderr"].as_f64().unwrap();
        let entropy = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((mean - entropy).abs() < 3.0 * se, "{mode}: {mean} ± {se} vs {entropy}");
        means.push((mean, se));
        let rows = csv_rows(&out.join("nll.csv"));
        assert_eq!(rows.len(), 2000);
        assert!(rows.iter().all(|r| r[3] == mode && r[4] == "5"));
    }
    // A zero field has zero divergence, so both modes give the same numbers.
    assert_eq!(means[0], means[1]);
}

#[test]
fn bpd_table_lists_the_requested_k() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bpd");
    ok(&flowmatch(&["nll", "--reference", "--k-dequant", "1,5,15", "--quantized", "50", "--dim", "4", "--out",
        out.to_str().unwrap()]));
    let table = read(&out.join("bpd_table.csv"));
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("model,K=1,K=5,K=15"));
    assert!(lines.next().unwrap().starts_with("reference,"));
    assert_eq!(csv_rows(&out.join("bpd.csv")).len(), 3);
}

#[test]
fn conditional_ot_trajectories_are_straight() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("cond");
    ok(&flowmatch(&["trajectories", "--source", "conditional", "--point", "1.5,-0.5", "--n", "8", "--times", "21",
        "--out", out.to_str().unwrap()]));
    let rows = csv_rows(&out.join("trajectories.csv"));
    assert_eq!(rows.len(), 8 * 21);
    for traj in rows.chunks(21) {
        let p: Vec<[f64; 3]> = traj
            .iter()
            .map(|r| [r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap()])
            .collect();
        let (a, b) = (p[0], p[20]);
        for q in &p {
            let s = (q[0] - a[0]) / (b[0] - a[0]);
            for k in 1..3 {
                let chord = a[k] + s * (b[k] - a[k]);
                assert!((q[k] - chord).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn schedules_share_the_starting_noise() {
    let tmp = TempDir::new().unwrap();
    let mut files = Vec::new();
    for s in ["ot", "vp"] {
        let out = tmp.path().join(s);
        ok(&flowmatch(&["trajectories", "--source", "oracle", "--schedule", s, "--point", "1,1", "--point", "-1,0.5",
            "--n", "4", "--times", "5", "--seed", "2", "--out", out.to_str().unwrap()]));
        files.push(csv_rows(&out.join("trajectories.csv")));
    }
    assert_ne!(files[0], files[1]);
    for (a, b) in files[0].iter().zip(&files[1]) {
        if a[1] == "0" {
            assert_eq!(a, b);
        }
    }
}

fn read_pgm(path: &Path) -> (usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..20]).to_string();
    let mut it = text.split_whitespace();
    assert_eq!(it.next(), Some("P5"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let header = format!("P5\n{w} {w}\n255\n").len();
    (w, bytes[header..].to_vec())
}

#[test]
fn noise_raster_peaks_at_the_centre() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    ok(&flowmatch(&["raster", "--source", "oracle", "--point", "1,1", "--times", "0", "--size", "33", "--out",
        out.to_str().unwrap()]));
    let (w, px) = read_pgm(&out.join("density_t0.000.pgm"));
    assert_eq!(px.len(), w * w);
    let centre = (w / 2) * w + w / 2;
    let max = *px.iter().max().unwrap();
    assert_eq!(px[centre], max);
    assert_eq!(px.iter().filter(|&&v| v == max).count(), 1);
    // Radial symmetry: mirrored pixels match.
    for r in 0..w {
        for c in 0..w {
            assert_eq!(px[r * w + c], px[(w - 1 - r) * w + (w - 1 - c)]);
            assert_eq!(px[r * w + c], px[c * w + r]);
        }
    }
    let ppm = fs::read(out.join("density_t0.000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n33 33\n255\n"));
    assert_eq!(ppm.len(), "P6\n33 33\n255\n".len() + 3 * 33 * 33);
}

#[test]
fn raster_rejects_other_dimensions() {
    let tmp = TempDir::new().unwrap();
    let out = flowmatch(&["raster", "--source", "oracle", "--point", "1,1,1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d = 2"));
    let even = flowmatch(&["raster", "--source", "oracle", "--point", "1,1", "--size", "64", "--out",
        tmp.path().to_str().unwrap()]);
    assert_eq!(even.status.code(), Some(2));
}
