use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cotp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotp")).args(args).output().expect("cotp runs")
}

fn ok(args: &[&str]) -> Value {
    let out = cotp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn code(args: &[&str]) -> i32 {
    cotp(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_xyz(path: &Path) -> Vec<[f64; 3]> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

/// Small dataset plus a checkpoint trained on it for one step.
fn trained(dir: &Path, seed: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let ds = dir.join(format!("ds{seed}"));
    let run = dir.join(format!("run{seed}"));
    ok(&["prepare", "--synthetic", "sphere,box", "--blocks-per-shape", "2", "--points", "96", "--seed", seed, "--out", s(&ds)]);
    ok(&["train", "--dataset", s(&ds), "--out", s(&run), "--max-steps", "1", "--k-nn", "8", "--batch-size", "2", "--seed", seed]);
    (ds, run.join("final.ckpt"))
}

#[test]
fn prepare_writes_requested_synthetic_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let summary = ok(&["prepare", "--synthetic", "sphere", "--blocks-per-shape", "5", "--points", "64", "--out", s(&out)]);
    assert_eq!(summary["clouds"], 5);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let clouds = manifest["clouds"].as_array().unwrap();
    assert_eq!(clouds.len(), 5);
    for c in clouds {
        let pts = read_xyz(&out.join(c["file"].as_str().unwrap()));
        assert_eq!(pts.len(), 64);
        assert!(pts.iter().flatten().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn prepare_scene_block_counts_reconcile() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.xyz");
    let mut text = String::new();
    let mut k = 0u64;
    for i in 0..3000 {
        // a tilted plane with a little scatter, spread over several blocks
        k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let x = (i % 60) as f64;
        let y = (i / 60) as f64;
        let z = 0.3 * x + (k >> 40) as f64 / (1u64 << 24) as f64;
        text.push_str(&format!("{x} {y} {z}\n"));
    }
    std::fs::write(&scene, text).unwrap();
    let out = dir.path().join("ds");
    let summary = ok(&["prepare", "--source", s(&scene), "--points", "32", "--out", s(&out)]);
    assert_eq!(summary["source_points"], 3000);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let blocks = manifest["blocks"].as_array().unwrap();
    let total: u64 = blocks.iter().map(|b| b["points"].as_u64().unwrap()).sum();
    assert_eq!(total, 3000);
    let kept = blocks.iter().filter(|b| b["kept"] == true).count();
    assert_eq!(kept, manifest["clouds"].as_array().unwrap().len());
    assert!(blocks.iter().all(|b| (b["kept"] == true) == (b["points"].as_u64().unwrap() >= 32)));
    let mut seen = std::collections::HashSet::new();
    assert!(blocks.iter().all(|b| seen.insert(b["index"].to_string())));
}

#[test]
fn prepare_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["prepare", "--synthetic", "torus,ridged-plane", "--blocks-per-shape", "2", "--points", "48", "--seed", seed, "--out", s(&out)])["dataset_digest"]
            .clone()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}

#[test]
fn compress_and_decompress_agree_with_the_reported_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained(dir.path(), "1");
    let input = ds.join("clouds/00001.xyz");
    let stream = dir.path().join("c.cotp");
    let recon = dir.path().join("c.xyz");
    let reported = ok(&["compress", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&stream)]);
    ok(&["decompress", "--checkpoint", s(&ckpt), "--input", s(&stream), "--out", s(&recon)]);
    let measured = ok(&["evaluate", "--reference", s(&input), "--reconstruction", s(&recon), "--bitstream", s(&stream)]);
    let cd = |v: &Value| v["cd"].as_f64().unwrap();
    assert!((cd(&reported) - cd(&measured)).abs() <= 1e-9 * cd(&reported).max(1.0));
    assert_eq!(reported["payload_bits"], measured["payload_bits"]);
    let bpp = measured["payload_bits"].as_f64().unwrap() / 96.0;
    assert_eq!(measured["bpp"].as_f64().unwrap(), bpp);
    assert_eq!(reported["bpp"].as_f64().unwrap(), bpp);

    // decoding is a pure function of the stream and the weights
    let again = dir.path().join("d.xyz");
    ok(&["decompress", "--checkpoint", s(&ckpt), "--input", s(&stream), "--out", s(&again)]);
    assert_eq!(std::fs::read(&recon).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn evaluating_a_cloud_against_itself_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    ok(&["prepare", "--synthetic", "box", "--blocks-per-shape", "1", "--points", "80", "--out", s(&out)]);
    let c = out.join("clouds/00000.xyz");
    let r = ok(&["evaluate", "--reference", s(&c), "--reconstruction", s(&c)]);
    assert_eq!(r["cd"].as_f64().unwrap(), 0.0);
    assert_eq!(r["psnr_db"].as_f64().unwrap(), 100.0);
    assert_eq!(r["bpp"].as_f64().unwrap(), 0.0);
}

#[test]
fn digest_mismatches_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained(dir.path(), "2");
    let (_, other) = trained(dir.path(), "3");
    let stream = dir.path().join("c.cotp");
    ok(&["compress", "--checkpoint", s(&ckpt), "--input", s(&ds.join("clouds/00000.xyz")), "--out", s(&stream)]);
    let out = dir.path().join("x.xyz");
    assert_eq!(code(&["decompress", "--checkpoint", s(&other), "--input", s(&stream), "--out", s(&out)]), 4);

    // an edited dataset file no longer matches its manifest
    let f = ds.join("clouds/00002.xyz");
    let text = std::fs::read_to_string(&f).unwrap().replacen('0', "1", 1);
    std::fs::write(&f, text).unwrap();
    assert_eq!(code(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&ds)]), 4);
}

#[test]
fn bad_usage_and_bad_data_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["train", "--out", "x"]), 2);
    assert_eq!(code(&["train", "--dataset", "d", "--out", "x", "--ratios", "0.5,2,0.5"]), 2);
    assert_eq!(code(&["prepare", "--out", s(dir.path())]), 2);
    let junk = dir.path().join("junk.cotp");
    std::fs::write(&junk, b"not a stream").unwrap();
    let (_, ckpt) = trained(dir.path(), "4");
    assert_eq!(code(&["decompress", "--checkpoint", s(&ckpt), "--input", s(&junk), "--out", s(&dir.path().join("o.xyz"))]), 3);
    assert_eq!(code(&["compress", "--checkpoint", s(&junk), "--input", s(&junk), "--out", s(&junk)]), 3);
}

#[test]
fn plot_draws_sorted_polylines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rd.csv");
    std::fs::write(&csv, "model,lambda,bpp,cd_e3,psnr_db\nm,0.1,2.0,1.5,40\nm,1.0,1.0,3.0,35\nm,0.01,4.0,0.5,45\n").unwrap();
    let svg_path = dir.path().join("rd.svg");
    ok(&["plot", "--csv", s(&csv), "--out", s(&svg_path)]);
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        let pts = l.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        let xs: Vec<f64> = pts.split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(xs.len(), 3);
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    std::fs::write(&csv, "model,lambda,bpp,cd_e3,psnr_db\nm,0.1,2.0,1.5,40\nm,0.1,1.0,3.0,35\n").unwrap();
    let out = cotp(&["plot", "--csv", s(&csv), "--out", s(&svg_path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate RD point"));

    std::fs::write(&csv, "model,lambda,bpp,cd_e3,psnr_db\nm,0.1,2.0,1.5,40\n").unwrap();
    let out = cotp(&["plot", "--csv", s(&csv), "--out", s(&svg_path)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2"));

    std::fs::write(&csv, "model,lambda,bpp,cd_e3,psnr_db,extra\nm,0.1,2.0,1.5,40,1\n").unwrap();
    assert_eq!(code(&["plot", "--csv", s(&csv), "--out", s(&svg_path)]), 3);
}

#[test]
fn evaluate_csv_feeds_rd_curve_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let runs = dir.path().join("sweep");
    ok(&["prepare", "--synthetic", "sphere,box", "--blocks-per-shape", "1", "--points", "64", "--out", s(&ds)]);
    ok(&["train", "--dataset", s(&ds), "--out", s(&runs), "--lambda", "1.0", "--lambda", "0.01", "--max-steps", "1", "--k-nn", "8"]);
    let ckpts: Vec<_> = ["lambda_0.01", "lambda_1"].iter().map(|d| runs.join(d).join("final.ckpt")).collect();
    let mut singles = Vec::new();
    let mut args = vec!["rd-curve".to_string()];
    for (i, c) in ckpts.iter().enumerate() {
        let csv = dir.path().join(format!("{i}.csv"));
        singles.push(ok(&["evaluate", "--checkpoint", s(c), "--dataset", s(&ds), "--model", "toy", "--out", s(&csv)]));
        args.extend(["--csv".into(), s(&csv).to_string()]);
    }
    for c in &ckpts {
        args.extend(["--checkpoint".into(), s(c).to_string()]);
    }
    let merged = dir.path().join("all.csv");
    args.extend(["--dataset", s(&ds), "--model", "again", "--out", s(&merged)].map(String::from));
    let rows = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(singles[0]["lambda"].as_f64(), Some(0.01));
    for single in &singles {
        let toy = rows.iter().find(|r| r["model"] == "toy" && r["lambda"] == single["lambda"]).unwrap();
        assert_eq!(toy, single);
        let again = rows.iter().find(|r| r["model"] == "again" && r["lambda"] == single["lambda"]).unwrap();
        for k in ["bpp", "cd_e3", "psnr_db"] {
            assert_eq!(again[k], single[k], "{k}");
        }
    }
    let text = std::fs::read_to_string(&merged).unwrap();
    assert_eq!(text.lines().next(), Some("model,lambda,bpp,cd_e3,psnr_db"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn ablation_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(&["prepare", "--synthetic", "sphere,torus", "--blocks-per-shape", "1", "--points", "64", "--out", s(&ds)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = cotp(&["ablate", "--dataset", s(&ds), "--out", s(&out), "--max-steps", "2", "--k-nn", "8", "--batch-size", "2", "--seed", "9"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let table = String::from_utf8(o.stdout).unwrap();
        assert!(table.lines().any(|l| l.starts_with("fps")) && table.lines().any(|l| l.starts_with("sampler")));
        let mut rows: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
        for r in rows.as_array_mut().unwrap() {
            r.as_object_mut().unwrap().remove("checkpoint");
        }
        (rows, std::fs::read(out.join("fps/final.ckpt")).unwrap())
    };
    let (a, ca) = run("a");
    let (b, cb) = run("b");
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}
