//! End-to-end runs of the `scaledistill` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scaledistill::degradation::{gen_texture, quantize_u8, read_image};
use scaledistill::harness::{Manifest, MANIFEST_FILE};

const TINY: &str = r#"{
  "data": {"n_train": 6, "n_eval": 65, "hr_size": 16},
  "model": {"base_channels": 8, "time_embed_dim": 8},
  "train": {"steps_per_stage": 2, "batch": 2},
  "scales": [2, 4],
  "ae": {"base_channels": 8, "steps": 3, "batch": 2, "crop": 8},
  "finetune": {"steps": 2, "batch": 2},
  "eval": {"step_counts": [1, 2], "batch": 16}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scaledistill"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.json");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    bin().arg("--config").arg(&cfg).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible_and_matches_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(tmp.path(), &["gen-data", "--out", s(&a)]);
    ok(tmp.path(), &["gen-data", "--out", s(&b)]);
    assert_eq!(files(&a.join("train")).len(), 6);
    assert_eq!(files(&a.join("eval")).len(), 65);
    for sub in ["train", "eval"] {
        for (x, y) in files(&a.join(sub)).iter().zip(files(&b.join(sub))) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
    assert_eq!(fs::read(a.join(MANIFEST_FILE)).unwrap(), fs::read(b.join(MANIFEST_FILE)).unwrap());

    let m: Manifest = serde_json::from_slice(&fs::read(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    let mut seeds: Vec<u64> = m.train.iter().chain(&m.eval).map(|e| e.seed).collect();
    for e in m.train.iter().chain(&m.eval) {
        let img = read_image(&a.join(&e.file)).unwrap();
        assert_eq!(img, quantize_u8(&gen_texture(e.seed, 16, 16)));
    }
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 71, "train and eval seeds overlap");
}

#[test]
fn train_finetune_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    ok(t, &["gen-data", "--out", s(&data)]);

    let sd = t.join("sd");
    ok(t, &["train", "--mode", "scale-distill", "--data", s(&data), "--out", s(&sd)]);
    for f in ["ae.ysrc", "stage0_x2.ysrc", "stage1_x4.ysrc", "train_log.jsonl", "config.json"] {
        assert!(sd.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(sd.join("train_log.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r["step"], i % 2);
        assert_eq!(r["stage"], i / 2);
        assert!(r["loss"].as_f64().unwrap().is_finite());
    }

    // A finished run is resumed, not retrained.
    let before = fs::read(sd.join("stage1_x4.ysrc")).unwrap();
    ok(t, &["train", "--mode", "scale-distill", "--data", s(&data), "--out", s(&sd)]);
    assert_eq!(fs::read(sd.join("stage1_x4.ysrc")).unwrap(), before);
    assert_eq!(fs::read_to_string(sd.join("train_log.jsonl")).unwrap(), log);

    let direct = t.join("direct");
    let ae = sd.join("ae.ysrc");
    ok(
        t,
        &["--set", "scales=[4]", "train", "--mode", "direct", "--data", s(&data), "--out", s(&direct), "--ae", s(&ae)],
    );
    let ckpts: Vec<_> = files(&direct).into_iter().filter(|p| p.extension().is_some_and(|e| e == "ysrc")).collect();
    assert_eq!(ckpts, vec![direct.join("stage0_x4.ysrc")]);

    let ft = t.join("ft");
    let unet = sd.join("stage1_x4.ysrc");
    ok(t, &["finetune-decoder", "--data", s(&data), "--unet", s(&unet), "--ae", s(&ae), "--out", s(&ft)]);
    assert!(ft.join("ae_finetuned.ysrc").exists());
    let bad = run(
        t,
        &["--set", "finetune.sampler_steps=2", "finetune-decoder", "--data", s(&data), "--unet", s(&unet), "--ae", s(&ae), "--out", s(&ft)],
    );
    assert_eq!(bad.status.code(), Some(1));

    let pipeline = format!("{},{}", s(&unet), s(&ae));
    let csv = [t.join("e1.csv"), t.join("e2.csv")];
    for c in &csv {
        ok(t, &["eval", "--data", s(&data), "--pipeline", &pipeline, "--steps", "1,2,4,8", "--out", s(c)]);
    }
    let text = fs::read_to_string(&csv[0]).unwrap();
    assert_eq!(text, fs::read_to_string(&csv[1]).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "steps,psnr,ssim,pfid");
    assert_eq!(lines.len(), 5);
    for (line, k) in lines[1..].iter().zip(["1", "2", "4", "8"]) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[0], k);
        assert!(cols[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    assert!(t.join("e1.csv.gp").exists());
}

#[test]
fn user_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let missing = t.join("nope");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--mode", "sideways", "--data", "x", "--out", "y"],
        vec!["--set", "data.nope=1", "gen-data", "--out", s(&missing)],
        vec!["--set", "scales=[3]", "gen-data", "--out", s(&missing)],
        vec!["train", "--mode", "direct", "--data", s(&missing), "--out", s(&missing)],
        vec!["frobnicate"],
    ];
    for args in cases {
        assert_eq!(run(t, &args).status.code(), Some(1), "{args:?}");
    }
    let out = bin()
        .env("YONOS_THREADS", "0")
        .args(["gen-data", "--out", s(&missing)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("YONOS_THREADS"));
    assert!(bin().arg("--help").output().unwrap().status.success());
}
