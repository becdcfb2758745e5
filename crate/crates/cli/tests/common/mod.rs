#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small enough that every subcommand finishes in seconds.
pub const TINY_CONFIG: &str = r#"seed = 5
backbone.num_hourglass = 1
backbone.base_channels = 4
backbone.hg_depth = 1
train.max_iterations = 3
train.batch_size = 2
train.patch_size = 8
train.classifier.epochs = 2
dataset.patch_size = 8
dataset.count = 12
dataset.synthetic_side = 32
eval.alphas = [2, 8]
eval.iterations = 2
eval.ablation_alphas = [0, 8]
eval.test_fraction = 0.25
"#;

pub fn specguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specguard"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = specguard(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs the whole command chain into `root` and returns nothing; every
/// artifact lands under `root`.
pub fn run_all(root: &Path) {
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = s(&cfg);
    let data = root.join("data");
    ok(&[
        "prepare-dataset",
        "--synthetic",
        "--config",
        c,
        "--out",
        s(&data),
    ]);
    let train = root.join("train");
    ok(&[
        "train",
        "--stage",
        "1",
        "--config",
        c,
        "--data",
        s(&data),
        "--out",
        s(&train),
    ]);
    let s1 = train.join("stage1.ckpt");
    ok(&[
        "train",
        "--stage",
        "2",
        "--config",
        c,
        "--data",
        s(&data),
        "--model-path",
        s(&s1),
        "--out",
        s(&train),
    ]);
    let cl = train.join("classifier.ckpt");
    ok(&[
        "train",
        "--stage",
        "3",
        "--config",
        c,
        "--data",
        s(&data),
        "--classifier-path",
        s(&cl),
        "--out",
        s(&train),
    ]);
    let s3 = train.join("stage3.ckpt");
    ok(&[
        "evaluate",
        "--config",
        c,
        "--data",
        s(&data),
        "--model-path",
        s(&s1),
        "--defended-path",
        s(&s3),
        "--classifier-path",
        s(&cl),
        "--out",
        s(&root.join("eval")),
    ]);
    ok(&[
        "visualize-dct",
        "--config",
        c,
        "--image",
        s(&data.join("lr/00000.png")),
        "--model-path",
        s(&s1),
        "--iterations",
        "2",
        "--out",
        s(&root.join("viz")),
    ]);
    ok(&[
        "ablate",
        "--config",
        c,
        "--data",
        s(&data),
        "--out",
        s(&root.join("ablate")),
    ]);
}

/// Every CSV under `root`, as (relative path, bytes), sorted by path.
pub fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
