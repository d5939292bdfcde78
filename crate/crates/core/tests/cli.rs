use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fctn::data::{write_dataset, Domain};
use fctn::model::{ArchSpec, ConvSpec, FctnModel};
use fctn::trainer::save_model;

fn fctn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fctn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SUBCOMMANDS: [&str; 7] = [
    "generate-data",
    "pretrain",
    "adapt",
    "label",
    "evaluate",
    "gradcheck",
    "import-data",
];

#[test]
fn help_lists_every_subcommand_and_flag() {
    let top = fctn(&["--help"]);
    assert!(top.status.success());
    for s in SUBCOMMANDS {
        assert!(text(&top).contains(s), "top-level help lacks {s}");
        let h = fctn(&[s, "--help"]);
        assert!(h.status.success(), "{s} --help failed");
    }
    let adapt = text(&fctn(&["adapt", "--help"]));
    for flag in [
        "--config",
        "--tag",
        "--out-dir",
        "--seed",
        "--source",
        "--target",
        "--val",
        "--alpha",
        "--beta",
        "--lr",
        "--pretrain-iters",
        "--rounds",
        "--steps-per-round",
        "--batch-size",
        "--threshold",
        "--checkpoint-every",
        "--update-mode",
        "--resume",
        "--init",
        "--stop-after",
    ] {
        assert!(adapt.contains(flag), "adapt --help lacks {flag}");
    }
}

#[test]
fn errors_are_distinct_and_nonzero() {
    let o = fctn(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("unrecognized subcommand"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = fctn(&["adapt", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("unknown field"), "{}", text(&o));

    let o = fctn(&["adapt", "--source", "/definitely/not/here", "--target", "/nope"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).contains("does not exist"));

    let o = fctn(&["adapt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("no source dataset"));

    let o = fctn(&["evaluate", "--checkpoint", "/nope.ckpt", "--data", "/nope"]);
    assert_eq!(o.status.code(), Some(3));

    let o = fctn(&["adapt", "--batch-size", "3", "--source", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("batch size"));
}

/// One-hot colors and hand-set 1x1 weights that reproduce the labels.
fn oracle_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = ArchSpec {
        input_channels: 3,
        num_classes: 3,
        base_layers: vec![ConvSpec::new(3, 1, 1)],
        branch_layers: vec![ConvSpec::new(3, 1, 1)],
    };
    let mut model = FctnModel::<f32>::new(spec, 0).unwrap();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let t = model.params.get_mut(&name).unwrap();
        let shape = t.shape().to_vec();
        let d = t.data_mut();
        d.iter_mut().for_each(|v| *v = 0.0);
        if name.ends_with("kernel") {
            // [1, 1, cin, cout]: identity on the color channels
            let cout = shape[3];
            for c in 0..3 {
                d[c * cout + c] = if name.starts_with("base") { 1.0 } else { 10.0 };
            }
        }
    }
    let ckpt = dir.join("oracle.ckpt");
    save_model(&model, None, &ckpt).unwrap();

    let (w, h) = (5, 4);
    let samples: Vec<(Vec<u8>, Option<Vec<u8>>)> = (0..3)
        .map(|i| {
            let mask: Vec<u8> = (0..w * h).map(|p| ((p + i) % 3) as u8).collect();
            let rgb = mask
                .iter()
                .flat_map(|&c| {
                    let mut px = [0u8; 3];
                    px[c as usize] = 255;
                    px
                })
                .collect();
            (rgb, Some(mask))
        })
        .collect();
    let data = dir.join("oracle_data");
    write_dataset(&data, Domain::Source, w, h, &samples).unwrap();
    (ckpt, data)
}

#[test]
fn evaluate_perfect_oracle_gives_unit_miou() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = oracle_fixture(dir.path());
    let out = dir.path().join("m/metrics.txt");
    let o = fctn(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    let m = fs::read_to_string(&out).unwrap();
    assert!(m.contains("eval.miou 1.000000"), "{m}");
    assert!(text(&o).contains("100.0"));
}

fn tiny_setup(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = fctn(&[
        "generate-data",
        "--out",
        p(&data),
        "--count",
        "6",
        "--val-count",
        "3",
        "--height",
        "16",
        "--width",
        "32",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let cfg = format!(
        r#"tag = "tiny"
out_dir = "{out}"

[data]
source = "{d}/source"
target = "{d}/target_train"
val = "{d}/target_val"

[arch]
input_channels = 3
num_classes = 8
base_layers = [{{ out_channels = 4, kernel_size = 3, dilation = 1 }}]
branch_layers = [
  {{ out_channels = 4, kernel_size = 3, dilation = 2 }},
  {{ out_channels = 8, kernel_size = 1, dilation = 1 }},
]

[train]
alpha = 1.0
beta = 1.0
learning_rate = 0.05
pretrain_iters = 6
rounds = 2
steps_per_round = 4
batch_size = 2
threshold = 0.0
checkpoint_every = 3
seed = 3
"#,
        out = p(&dir.join("runs")),
        d = p(&data)
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn adapt_then_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    for split in ["source", "target_train", "target_val"] {
        assert!(dir.path().join("data").join(split).join("manifest.txt").exists());
    }
    assert!(!dir.path().join("data/target_train/masks").exists());

    let o = fctn(&["adapt", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    let run = dir.path().join("runs/tiny-s3");
    let metrics = fs::read_to_string(run.join("metrics.txt")).unwrap();
    let mious: Vec<&str> = metrics.lines().filter(|l| l.contains(".miou ")).collect();
    assert_eq!(mious.len(), 3, "{metrics}");
    for prefix in ["pretrain.miou", "round1.miou", "round2.miou"] {
        assert!(metrics.contains(prefix));
    }
    assert!(run.join("config.resolved.toml").exists());
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("pseudo_labels/round2/00005.png").exists());
    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("pretrain_iters = 6"));

    let out = dir.path().join("eval.txt");
    let o = fctn(&[
        "evaluate",
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--data",
        p(&dir.path().join("data/target_val")),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(fs::read_to_string(&out).unwrap().contains("eval.miou"));

    let lab = dir.path().join("labels");
    let o = fctn(&[
        "label",
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--data",
        p(&dir.path().join("data/target_train")),
        "--out",
        p(&lab),
        "--threshold",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(lab.join("masks/00000.png").exists());
    assert!(lab.join("color/00005.png").exists());
    assert!(fs::read_to_string(lab.join("summary.txt")).unwrap().contains("coverage"));
}

#[test]
fn flags_override_config_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());

    let full = fctn(&["adapt", "--config", p(&cfg), "--tag", "full"]);
    assert!(full.status.success(), "{}", text(&full));

    let part = fctn(&["adapt", "--config", p(&cfg), "--tag", "split", "--stop-after", "9"]);
    assert!(part.status.success(), "{}", text(&part));
    let split = dir.path().join("runs/split-s3");
    assert!(!split.join("final.ckpt").exists());
    let rest = fctn(&["adapt", "--config", p(&cfg), "--tag", "split", "--resume"]);
    assert!(rest.status.success(), "{}", text(&rest));

    let full_dir = dir.path().join("runs/full-s3");
    assert_eq!(
        fs::read(full_dir.join("final.ckpt")).unwrap(),
        fs::read(split.join("final.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(full_dir.join("metrics.txt")).unwrap(),
        fs::read_to_string(split.join("metrics.txt")).unwrap()
    );
    let losses = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("run_log.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"event\":\"step\""))
            .map(|l| l[l.find("\"event\"").unwrap()..].to_string())
            .collect()
    };
    assert_eq!(losses(&full_dir), losses(&split));

    // a different seed flag lands in a different run directory
    let o = fctn(&["adapt", "--config", p(&cfg), "--tag", "full", "--seed", "5", "--rounds", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let m = fs::read_to_string(dir.path().join("runs/full-s5/metrics.txt")).unwrap();
    assert!(m.contains("round1.miou") && !m.contains("round2.miou"));
}

#[test]
fn pretrain_then_adapt_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let o = fctn(&["pretrain", "--config", p(&cfg), "--tag", "pre"]);
    assert!(o.status.success(), "{}", text(&o));
    let ckpt = dir.path().join("runs/pre-s3/pretrain.ckpt");
    assert!(ckpt.exists());
    assert!(fs::read_to_string(dir.path().join("runs/pre-s3/metrics.txt"))
        .unwrap()
        .contains("pretrain.miou"));
    let o = fctn(&["adapt", "--config", p(&cfg), "--tag", "warm", "--init", p(&ckpt)]);
    assert!(o.status.success(), "{}", text(&o));
    let log = fs::read_to_string(dir.path().join("runs/warm-s3/run_log.jsonl")).unwrap();
    assert!(!log.contains("\"event\":\"step\",\"phase\":{\"kind\":\"pretrain\"}"));
    assert_eq!(log.matches("\"event\":\"labeling\"").count(), 2);
}

#[test]
fn import_remaps_ids() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("ext");
    write_dataset(
        &src,
        Domain::Target,
        2,
        1,
        &[(vec![1, 2, 3, 4, 5, 6], Some(vec![7, 26]))],
    )
    .unwrap();
    let map = dir.path().join("map.txt");
    fs::write(&map, "# external train\n7 2\n26 5\n").unwrap();
    let out = dir.path().join("imported");
    let o = fctn(&[
        "import-data",
        "--src",
        p(&src),
        "--mapping",
        p(&map),
        "--out",
        p(&out),
        "--domain",
        "target",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let d = fctn::data::load_dataset(&out).unwrap();
    assert_eq!(d.masks[0].as_deref(), Some(&[2u8, 5][..]));
    assert_eq!(d.domain, Domain::Target);
}

#[test]
fn gradcheck_wiring() {
    let ok = fctn(&["gradcheck"]);
    assert!(ok.status.success(), "{}", text(&ok));
    assert!(text(&ok).contains(", 0 failed"));
    let bad = fctn(&["gradcheck", "--negative-control", "conv2d"]);
    assert!(!bad.status.success());
    assert!(text(&bad).contains("FAIL"));
}
