use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
count = 3
views = 2
[dataset.render]
width = 16
height = 16

[model]
dim = 32
depth = 1
heads = 2
image_size = 16
views = 2
text_tokens = 2
mlp_ratio = 2
lora_rank = 4
lora_alpha = 4.0

[train]
steps = 4
batch = 2
warmup_steps = 1

[sample]
steps = 2

[eval]
samples = 2
"#;

fn refgen(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_refgen"))
        .args(args)
        .current_dir(cwd)
        .env_remove("REFGEN_OUT")
        .output()
        .expect("spawn refgen");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = refgen(&["gen-data", "--seed", "5", "--count", "3", "--out", name], dir.path());
        assert_eq!(code(&o), 0);
    }
    let a = fs::read(dir.path().join("a/samples.bin")).unwrap();
    let b = fs::read(dir.path().join("b/samples.bin")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("a/config.toml").exists());
}

#[test]
fn render_writes_three_images_per_view() {
    let dir = tempfile::tempdir().unwrap();
    let o = refgen(&["render", "--asset-seed", "3", "--views", "8"], dir.path());
    assert_eq!(code(&o), 0);
    let pngs = fs::read_dir(dir.path().join("runs/render"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 24);
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.toml"), TINY).unwrap();
    assert_eq!(code(&refgen(&["gen-data", "--config", "tiny.toml", "--out", "data"], p)), 0);
    assert_eq!(code(&refgen(&["train", "--config", "tiny.toml", "--data", "data", "--out", "run"], p)), 0);
    let ckpt = p.join("run/checkpoints/last.ckpt");
    assert!(ckpt.exists());
    let log = fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    // The model config comes from the run directory next to the checkpoint.
    let ck = "run/checkpoints/last.ckpt";
    assert_eq!(code(&refgen(&["sample", "--checkpoint", ck, "--data", "data", "--index", "1", "--out", "s"], p)), 0);
    assert!(p.join("s/rgb.png").exists() && p.join("s/pointmap.png").exists());

    let o = refgen(&["eval", "--checkpoint", ck, "--out", "e"], p);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(p.join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("sample,asset_id,caption,rgb_mse"));
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
    assert!(p.join("e/contact_sheet.png").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = refgen(&["gen-data", "--set", "dataset.nope=1"], p);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("[config]") && err.contains("nope"));

    assert_eq!(code(&refgen(&["ablate", "--variants", "bogus"], p)), 1);
    assert_eq!(code(&refgen(&["train", "--frobnicate"], p)), 1);
    assert_eq!(code(&refgen(&["sample", "--checkpoint", "missing.ckpt"], p)), 2);

    fs::create_dir(p.join("bad")).unwrap();
    fs::write(p.join("bad/manifest.toml"), "garbage").unwrap();
    assert_eq!(code(&refgen(&["train", "--data", "bad", "--set", "train.steps=1"], p)), 2);
}
