use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn saaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saaf")).args(args).output().expect("spawn saaf")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = "\
lr = 1e-3
max_steps = 3
per_device_batch = 1
grad_accum = 2
image_size = 32
d_model = 16
n_heads = 2
d_v = 16
vision_heads = 2
log_every = 1
";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = saaf(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    assert_eq!(saaf(&["gen-data"]).status.code(), Some(2));
    assert_eq!(saaf(&["eval", "--ckpt", "x", "--data", "y", "--split", "holdout"]).status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let o = saaf(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["gen-data", "train", "eval", "segment", "gradcheck"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let o = saaf(&["gen-data", "--out", dir.path().to_str().unwrap(), "--count", "100", "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("train 70, val 10, test 20"), "{}", stdout(&o));
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 1 + 3 * 100);
    assert!(ta == tb, "datasets differ");
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();
    let o = saaf(&["train", "--config", cfg.to_str().unwrap(), "--data", "/nonexistent", "--out", "/tmp/x.ckpt"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("error"));

    fs::write(&cfg, "learning_rate = 1\n").unwrap();
    let o = saaf(&["train", "--config", cfg.to_str().unwrap(), "--data", "d", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"XXXX garbage").unwrap();
    let o = saaf(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn train_eval_segment_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert_eq!(
        saaf(&[
            "gen-data",
            "--out",
            data_s,
            "--count",
            "10",
            "--seed",
            "3",
            "--size",
            "32",
            "--styles",
            "photo,line_drawing"
        ])
        .status
        .code(),
        Some(0)
    );

    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let o = saaf(&["train", "--config", cfg.to_str().unwrap(), "--data", data_s, "--out", ckpt_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("step      3"), "{}", stderr(&o));
    assert!(stdout(&o).contains("training split:"));
    let log = fs::read_to_string(dir.path().join("model.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("1,"));
    assert!(&fs::read(&ckpt).unwrap()[..5] == b"SAAF1");

    let dump = dir.path().join("dump");
    let o = saaf(&["eval", "--ckpt", ckpt_s, "--data", data_s, "--split", "train", "--dump", dump.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("photo") && table.contains("line_drawing") && table.contains("all"), "{table}");
    assert_eq!(fs::read_dir(&dump).unwrap().count(), 7);

    let image = data.join("images/000000.ppm");
    let mask = dir.path().join("mask.pgm");
    let o = saaf(&[
        "segment",
        "--ckpt",
        ckpt_s,
        "--image",
        image.to_str().unwrap(),
        "--text",
        "glazed sections",
        "--out",
        mask.to_str().unwrap(),
        "--force-seg",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), 13 + 32 * 32);

    // An untrained model rarely emits <SEG>; without --force-seg that is a model error.
    let o = saaf(&[
        "segment",
        "--ckpt",
        ckpt_s,
        "--image",
        image.to_str().unwrap(),
        "--text",
        "glazed sections",
        "--out",
        dir.path().join("m2.pgm").to_str().unwrap(),
    ]);
    match o.status.code() {
        Some(0) => {}
        Some(4) => assert!(stderr(&o).contains("<SEG>"), "{}", stderr(&o)),
        other => panic!("unexpected exit {other:?}: {}", stderr(&o)),
    }

    // Wrong image size for the model.
    let other = dir.path().join("other");
    saaf(&["gen-data", "--out", other.to_str().unwrap(), "--count", "10", "--size", "16"]);
    let o = saaf(&[
        "segment",
        "--ckpt",
        ckpt_s,
        "--image",
        other.join("images/000000.ppm").to_str().unwrap(),
        "--text",
        "glazed sections",
        "--out",
        dir.path().join("m3.pgm").to_str().unwrap(),
        "--force-seg",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_prints_a_table() {
    let o = saaf(&["gradcheck", "--seed", "1", "--tol", "1e-4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("parameter"));
    assert!(out.contains("seg.decoder.w_f") && out.contains("lm.layers.1.attn.wq.weight.lora_a"), "{out}");
    assert!(out.trim_end().ends_with("PASS"));
}
