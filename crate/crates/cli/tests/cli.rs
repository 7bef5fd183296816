use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tryon(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tryon"))
        .args(args)
        .env("TRYON_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY: &str = r#"{
  "profile": "smoke",
  "resolution": 16,
  "unet": {"base_width": 4, "time_dim": 8, "attn_dim": 8, "token_dim": 8, "tokens": 4},
  "garment_encoder": {"resolution": 16, "grid": 2, "token_dim": 8, "width": 4},
  "warmup": {"steps": 2},
  "batch": 2,
  "steps": 2,
  "checkpoint_every": 1
}"#;

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = tryon(&["gen-data", "--count", "1", "--seed", "7", "--out", name], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert!(a.contains_key("manifest.json"));
    assert_eq!(a, b);
}

#[test]
fn infer_requires_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tryon(&["infer", "--person", "p.png", "--pose", "d.png", "--garment", "c.png", "--out", "o.png"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\n  \"steps\": 10,\n  \"optimizer\": {\"lr\": \"fast\"}\n}").unwrap();
    let o = tryon(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("optimizer.lr") && err.contains("line 3"), "{err}");
    assert!(!tmp.path().join("run").exists());

    fs::write(&cfg, "{ \"steps\": 10,, }").unwrap();
    let o = tryon(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let o = tryon(&["gen-data", "--count", "24", "--seed", "3", "--resolution", "16", "--out", "data"], root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let o = tryon(
        &["train", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--out", "run", "--log-every", "0"],
        root,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = String::from_utf8(o.stdout).unwrap().trim().to_string();
    assert!(Path::new(&ckpt).join("manifest.json").exists());

    let s = data.join("000000");
    let file = |f: &str| s.join(f).display().to_string();
    let out = root.join("out.png").display().to_string();
    let o = tryon(
        &["infer", "--checkpoint", &ckpt, "--person", &file("person.png"), "--pose", &file("pose.png"), "--garment", &file("garment.png"),
          "--out", &out, "--steps", "2"],
        root,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&out).unwrap();
    let o = tryon(
        &["multi-infer", "--checkpoint", &ckpt, "--person", &file("person.png"), "--pose", &file("pose.png"),
          "--garment", &file("garment.png"), "--out", &out, "--steps", "2"],
        root,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&out).unwrap(), first);

    let ecfg = root.join("eval.json");
    fs::write(&ecfg, r#"{"sampler": {"steps": 2}, "extractor": {"widths": [4, 4, 4]}, "bootstrap_reps": 10}"#).unwrap();
    let o = tryon(
        &["eval", "--checkpoint", &ckpt, "--dataset", data.to_str().unwrap(), "--profile", "smoke", "--config", ecfg.to_str().unwrap(),
          "--out", "report.json", "--images", root.join("gen").to_str().unwrap()],
        root,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["fid"].as_f64().unwrap().is_finite());
    assert!(report["metrics"]["kernel"].as_str().unwrap().contains("degree=3"));
    assert_eq!(fs::read_dir(root.join("gen")).unwrap().count(), report["samples"].as_u64().unwrap() as usize);
}

#[test]
fn ablate_emits_three_checkpoints_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("ablate.json");
    let train: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let mut train = train.as_object().unwrap().clone();
    train.remove("profile");
    let doc = serde_json::json!({
        "profile": "smoke",
        "train": train,
        "dataset": {"count": 24, "resolution": 16},
        "eval": {"sampler": {"steps": 2}, "extractor": {"resolution": 16, "widths": [4, 4, 4]}, "bootstrap_reps": 10},
        "loss_window": 1
    });
    fs::write(&cfg, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let o = tryon(&["ablate", "--config", cfg.to_str().unwrap(), "--out", "abl"], root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for arm in ["base", "wild_aug", "wild_aug+ar"] {
        assert!(stdout.contains(&format!("| {arm} |")), "{stdout}");
    }
    let abl = root.join("abl");
    assert!(abl.join("comparison.md").exists());
    for slug in ["base", "wild_aug", "wild_aug_ar"] {
        assert!(abl.join("runs").join(slug).join("checkpoints/step-000002/manifest.json").exists());
    }
}
