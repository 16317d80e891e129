use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_i2c2w")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
n_queries=8
model_dim=16
num_heads=2
ffn_dim=32
encoder_layers=1
backbone=4/2,8/2,8/2
steps=50
";

fn dataset(dir: &Path) -> String {
    let vocab = dir.join("words.txt");
    fs::write(&vocab, "cat\ndog\n# comment\nbird\n").unwrap();
    let out = dir.join("ds");
    let o = run(&[
        "gen-data", "--count", "10", "--vocab", vocab.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let manifest = fs::read_to_string(Path::new(&ds).join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert!(manifest.ends_with('\n'));
    for line in manifest.lines() {
        let (path, word) = line.split_once('\t').unwrap();
        assert!(Path::new(&ds).join(path).exists());
        assert!(["cat", "dog", "bird"].contains(&word));
    }
}

#[test]
fn train_then_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--manifest", &ds, "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--steps", "3", "--batch-size", "2", "--lr-backbone", "1e-3", "--lr-transformer", "1e-3", "--beta", "1",
        "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // the flag overrides steps=50 from the file
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,det_char,det_pos,recog,total"));
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let image = Path::new(&ds).join("images/000000.png");
    let image = image.to_str().unwrap();
    let o = run(&["recognize", "--ckpt", ckpt, "--image", image]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("word\t"));
    assert!(text.contains("query\tchar\tpos\tchar_prob\tpos_prob"));
    assert_eq!(text.lines().count(), 3 + 8);

    for mode in ["i2c2w", "i2c_only"] {
        let o = run(&["eval", "--ckpt", ckpt, "--manifest", &ds, "--mode", mode]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("accuracy="));
    }

    let heat = dir.path().join("heat");
    let o = run(&["attn-export", "--ckpt", ckpt, "--image", image, "--out", heat.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = fs::read_dir(&heat)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 8);
    assert!(names.iter().all(|n| n.starts_with("attn_q") && n.ends_with(").png")));
}

#[test]
fn usage_and_runtime_errors() {
    assert_eq!(code(&run(&["gen-data", "--count", "3"])), 1);
    assert_eq!(code(&run(&["eval", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    let o = run(&["eval", "--ckpt", "x", "--manifest", "y", "--mode", "both"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    let o = run(&["recognize", "--ckpt", "/nonexistent/c.bin", "--image", "/nonexistent/x.png"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}
