use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn seqhtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqhtr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status,
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    format!(
        r#"regime = "hybrid"
{extra}
[encoder]
blstm_units = 12
blstm_layers = 1

[attention]
attention_dim = 8
summary_dim = 8
location_filters = 4

[decoder]
hidden_units = 12
embedding_dim = 6
beam_width = 2

[training]
epochs = 1
decay_epochs = 1
epoch_size = 8
batch_size = 4
augment = false

[data]
train = "{d}/corpus"
valid = "{d}/corpus"
output_dir = "{d}/run"
"#,
        d = dir.display()
    )
}

fn synth(dir: &Path) {
    let out = dir.join("corpus");
    let o = seqhtr(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--count",
        "8",
        "--alphabet",
        "abc",
        "--min-len",
        "2",
        "--max-len",
        "4",
        "--seed",
        "3",
    ]);
    assert_ok(&o);
    assert!(stdout(&o).contains("wrote 8 lines"));
}

#[test]
fn synth_train_eval_recognize() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, tiny_config(dir, "")).unwrap();
    let o = seqhtr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_ok(&o);
    assert!(stdout(&o).contains("trained 1 epochs"));
    let ckpt = dir.join("run/epoch-001.ckpt");
    assert!(ckpt.exists());
    assert!(dir.join("run/train_log.tsv").exists());

    let report = dir.join("report.tsv");
    let o = seqhtr(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        dir.join("corpus").to_str().unwrap(),
        "--beam",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("decoder CER") && text.contains("encoder CER"), "{text}");
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 10);

    let image = dir.join("corpus/images/line-000000.png");
    let missing = dir.join("missing.png");
    let attn = dir.join("attn");
    let o = seqhtr(&[
        "recognize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dump-attention",
        attn.to_str().unwrap(),
        image.to_str().unwrap(),
        missing.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stdout(&o).starts_with(image.to_str().unwrap()));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.png"));
    assert!(attn.join("line-000000.attn.csv").exists());
    assert!(attn.join("line-000000.attn.pgm").exists());
}

#[test]
fn pretrain_then_fixed_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let pre = dir.join("pre.toml");
    fs::write(&pre, tiny_config(dir, "")).unwrap();
    let o = seqhtr(&["pretrain-ctc", "--config", pre.to_str().unwrap(), "--output", dir.join("ctc").to_str().unwrap()]);
    assert_ok(&o);
    let ctc = dir.join("ctc/epoch-001.ckpt");
    let o = seqhtr(&[
        "recognize",
        "--checkpoint",
        ctc.to_str().unwrap(),
        dir.join("corpus/images/line-000001.png").to_str().unwrap(),
    ]);
    assert_ok(&o);

    let fixed = dir.join("fixed.toml");
    let body = tiny_config(dir, "").replace("regime = \"hybrid\"", "regime = \"fixed-encoder\"").replace(
        "output_dir",
        &format!("pretrained_encoder = \"{}\"\noutput_dir", ctc.display()),
    );
    fs::write(&fixed, body).unwrap();
    let o = seqhtr(&["train", "--config", fixed.to_str().unwrap()]);
    assert_ok(&o);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let o = seqhtr(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", "."]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "regime = \"fixed-encoder\"\n").unwrap();
    let o = seqhtr(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());

    let o = seqhtr(&["synth", "--out", tmp.path().to_str().unwrap(), "--min-len", "5", "--max-len", "2"]);
    assert!(!o.status.success());
    assert!(!seqhtr(&["frobnicate"]).status.success());
}
