use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualdec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualdec"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = dualdec(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, lines: &[&str]) {
    fs::write(dir.join(name), lines.join("\n") + "\n").unwrap();
}

const EN: &[&str] = &[
    "the house is small",
    "the cat is black",
    "a small cat",
    "the house is black",
    "a black house",
    "the cat sleeps",
];
const FR: &[&str] = &[
    "la maison est petite",
    "le chat est noir",
    "un petit chat",
    "la maison est noire",
    "une maison noire",
    "le chat dort",
];

#[test]
fn usage_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dualdec(&["make-csw", "--bogus"], dir.path()).status.code(), Some(2));
    let out = dualdec(
        &["make-csw", "--src", "missing.en", "--tgt", "missing.fr", "--output", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(dualdec(&["--help"], dir.path()).status.success());

    write(dir.path(), "bad.toml", &["[train]", "no_such_key = 1"]);
    assert_eq!(dualdec(&["train", "--config", "bad.toml"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.en", &["x y", "z"]);
    write(dir.path(), "a.fr", &["x"]);
    let out = dualdec(&["make-tri", "--src-a", "a.en", "--tgt-a", "a.fr", "--src-b", "a.en", "--tgt-b", "a.fr", "--output", "t"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn csw_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "c.en", EN);
    write(d, "c.fr", FR);
    let args = |out: &'static str| ["make-csw", "--src", "c.en", "--tgt", "c.fr", "--rep", "3", "--seed", "7", "--output", out, "--log", "log.jsonl"];
    ok(&args("one.tsv"), d);
    ok(&args("two.tsv"), d);
    let a = fs::read(d.join("one.tsv")).unwrap();
    assert_eq!(a, fs::read(d.join("two.tsv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), EN.len());
    for (line, (en, fr)) in text.lines().zip(EN.iter().zip(FR)) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!((cols[1], cols[2]), (*en, *fr));
    }
    // inputs untouched
    assert_eq!(fs::read_to_string(d.join("c.en")).unwrap(), EN.join("\n") + "\n");
}

#[test]
fn corpus_builders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "a.en", &["one", "two", "three", "four", "five"]);
    write(d, "a.de", &["eins", "zwei", "drei", "vier", "fuenf"]);
    write(d, "b.en", &["two", "five", "six", "one"]);
    write(d, "b.fr", &["deux", "cinq", "six", "un"]);
    ok(&["make-tri", "--src-a", "a.en", "--tgt-a", "a.de", "--src-b", "b.en", "--tgt-b", "b.fr", "--output", "tri.tsv"], d);
    assert_eq!(fs::read_to_string(d.join("tri.tsv")).unwrap(), "one\teins\tun\ntwo\tzwei\tdeux\nfive\tfuenf\tcinq\n");

    write(d, "s.txt", &["a b", "c"]);
    write(d, "t.txt", &["x y z", "w"]);
    ok(&["make-bidi", "--src", "s.txt", "--tgt", "t.txt", "--mode", "gold", "--output", "bidi.tsv"], d);
    assert_eq!(fs::read_to_string(d.join("bidi.tsv")).unwrap(), "a b\tx y z\tz y x\nc\tw\tw\n");
    // pseudo modes need translators
    assert_eq!(
        dualdec(&["make-bidi", "--src", "s.txt", "--tgt", "t.txt", "--mode", "pseudo", "--output", "p.tsv"], d).status.code(),
        Some(2)
    );
}

#[test]
fn eval_subcommands_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "h.txt", &["a b c d", "e f g h"]);
    write(d, "r.txt", &["a b c d", "e f g h"]);
    write(d, "rev.txt", &["d c b a", "h g f e"]);
    let out = ok(&["eval", "bleu", "--hyp", "h.txt", "--ref", "r.txt"], d);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["score"], 100.0);
    let out = ok(&["eval", "consistency", "--fwd", "h.txt", "--bwd", "rev.txt"], d);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["consistency"], 100.0);
    let out = ok(&["eval", "copy", "--src", "h.txt", "--hyp1", "r.txt", "--hyp2", "rev.txt"], d);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["both"], 100.0);
}

fn setup_training(d: &Path, extra: &str) {
    write(d, "train.en", EN);
    write(d, "train.fr", FR);
    let de = ["das haus ist klein", "die katze ist schwarz", "eine kleine katze", "das haus ist schwarz", "ein schwarzes haus", "die katze schlaeft"];
    let tri: Vec<String> = EN.iter().zip(FR).zip(de).map(|((e, f), g)| format!("{e}\t{f}\t{g}")).collect();
    let tri: Vec<&str> = tri.iter().map(String::as_str).collect();
    write(d, "train.tsv", &tri[..4]);
    write(d, "dev.tsv", &tri[4..]);
    write(d, "all.fr", FR);
    write(d, "all.de", &de);
    ok(&["bpe-train", "--input", "train.en", "--merges", "20", "--output", "src.bpe"], d);
    ok(&["bpe-train", "--input", "all.fr", "all.de", "--merges", "30", "--output", "tgt.bpe"], d);
    let cfg = format!(
        r#"seed = 3

[model]
d_model = 8
d_ff = 16
heads = 2
enc_layers = 1
dec_layers = 1
coupling = "dual"
dropout = 0.0

[train]
batch_tokens = 64
max_steps = 12
eval_interval = 3
patience = 4
{extra}

[train.adam]
peak_lr = 0.01
mode = "fixed"

[data]
train = "train.tsv"
dev = "dev.tsv"
src_bpe = "src.bpe"
tgt_bpe = "tgt.bpe"
output = "model.ck"
metrics = "metrics.jsonl"
"#
    );
    fs::write(d.join("run.toml"), cfg).unwrap();
}

#[test]
fn train_translate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_training(d, "");
    ok(&["train", "--config", "run.toml"], d);
    let first = fs::read(d.join("model.ck")).unwrap();
    ok(&["train", "--config", "run.toml", "--output", "again.ck"], d);
    assert_eq!(first, fs::read(d.join("again.ck")).unwrap());
    let metrics = fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    write(d, "in.txt", &["the cat", "a small house"]);
    let out = ok(&["translate", "--checkpoint", "model.ck", "--input", "in.txt", "--beam", "2", "--max-len", "6", "--mode", "dual"], d);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    for l in text.lines() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 3, "{l:?}");
        assert!(cols[0].parse::<f64>().unwrap() <= 0.0);
    }
    let again = ok(&["translate", "--checkpoint", "model.ck", "--input", "in.txt", "--beam", "2", "--max-len", "6"], d);
    assert_eq!(text.as_bytes(), again.stdout.as_slice());

    for mode in ["greedy", "seq1", "seq2", "bidi"] {
        ok(&["translate", "--checkpoint", "model.ck", "--input", "in.txt", "--beam", "2", "--max-len", "5", "--mode", mode], d);
    }
    write(d, "force.txt", &["le chat", "une maison"]);
    let out = ok(
        &["translate", "--checkpoint", "model.ck", "--input", "in.txt", "--beam", "2", "--max-len", "6", "--forced1", "force.txt"],
        d,
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let firsts: Vec<&str> = text.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(firsts, vec!["le chat", "une maison"]);
}

#[test]
fn flat_loss_run_stops_after_patience() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup_training(d, "max_steps = 1000");
    // With a zero learning rate the dev loss never improves after the first evaluation.
    let cfg = fs::read_to_string(d.join("run.toml")).unwrap().replace("max_steps = 12\n", "");
    fs::write(d.join("run.toml"), cfg).unwrap();
    ok(&["train", "--config", "run.toml", "--lr", "0"], d);
    let metrics = fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![3, 6, 9, 12, 15]);
}
