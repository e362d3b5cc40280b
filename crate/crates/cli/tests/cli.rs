use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn finedeep(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finedeep")).args(args).current_dir(dir).output().expect("spawn")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = finedeep(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
hidden_size = 16
n_layers = 2
n_heads = 2
intermediate_size = 32
vocab_size = 256
max_seq_len = 16
batch_size = 2
warmup_steps = 2
lr = 0.003
seed = 3
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("dense.toml"), TINY).unwrap();
    fs::write(dir.path().join("fd.toml"), format!("{TINY}arch = \"finedeep\"\nM = 2\nK = 2\n")).unwrap();
    ok(&["gen-corpus", "--bytes", "4000", "--seed", "1", "--out", "corpus.txt"], dir.path());
    dir
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(finedeep(&["params", "--config", "dense.toml"], p).status.code(), Some(0));
    let missing = finedeep(&["params", "--config", "nope.toml"], p);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    assert_eq!(finedeep(&["params"], p).status.code(), Some(2));
    assert_eq!(finedeep(&["no-such-command"], p).status.code(), Some(2));
    fs::write(p.join("junk.fdcp"), b"not a checkpoint").unwrap();
    assert_eq!(finedeep(&["ppl", "--ckpt", "junk.fdcp", "--corpus", "corpus.txt"], p).status.code(), Some(1));
}

#[test]
fn params_and_flops_match_the_library() {
    let dir = workspace();
    let p = dir.path();
    let cfg: finedeep::ModelConfig = toml::from_str(TINY).unwrap();
    let params = ok(&["params", "--config", "dense.toml"], p);
    assert!(params.contains(&finedeep::analysis::count_params(&cfg).unwrap().to_string()), "{params}");
    let flops = ok(&["flops", "--config", "dense.toml", "--batch", "2", "--seq", "8"], p);
    assert!(flops.contains(&finedeep::analysis::count_flops(&cfg, 2, 8).unwrap().to_string()), "{flops}");
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = workspace();
    let p = dir.path();
    for run in ["a", "b"] {
        ok(
            &[
                "train", "--config", "fd.toml", "--corpus", "corpus.txt", "--steps", "6", "--out", &format!("{run}.fdcp"),
                "--metrics", &format!("{run}.jsonl"), "--no-timing",
            ],
            p,
        );
    }
    let log = fs::read(p.join("a.jsonl")).unwrap();
    assert_eq!(log, fs::read(p.join("b.jsonl")).unwrap());
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 6);
    assert_eq!(fs::read(p.join("a.fdcp")).unwrap(), fs::read(p.join("b.fdcp")).unwrap());
    let ppl: f64 = ok(&["ppl", "--ckpt", "a.fdcp", "--corpus", "corpus.txt"], p)
        .split_whitespace()
        .find_map(|w| w.trim_start_matches("ppl=").parse().ok())
        .expect("a number in the ppl output");
    assert!(ppl.is_finite() && ppl > 1.0);
}

#[test]
fn convert_then_analyse() {
    let dir = workspace();
    let p = dir.path();
    ok(&["train", "--config", "dense.toml", "--corpus", "corpus.txt", "--steps", "2", "--out", "d.fdcp", "--metrics", "m.jsonl"], p);
    ok(&["convert", "--in", "d.fdcp", "--M", "2", "--K", "4", "--out", "c.fdcp"], p);
    assert_eq!(finedeep(&["convert", "--in", "d.fdcp", "--M", "3", "--K", "5", "--out", "x.fdcp"], p).status.code(), Some(1));
    let model: finedeep::LmModel<f32> = finedeep::storage::load_checkpoint(&p.join("c.fdcp")).unwrap();
    assert_eq!(model.config().sublayers, 2);

    ok(&["nsar", "--ckpt", "c.fdcp", "--corpus", "corpus.txt", "--tau", "0.1", "--tau", "0.5", "--tokens", "64", "--out", "n.csv"], p);
    let csv = fs::read_to_string(p.join("n.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,sublayer,metric,tau,value"));
    assert_eq!(lines.count(), 2 * 2 * 2);

    ok(&["dump-acts", "--ckpt", "c.fdcp", "--corpus", "corpus.txt", "--tokens", "64", "--out", "a.fdac"], p);
    let caps = finedeep::analysis::read_captures(fs::File::open(p.join("a.fdac")).unwrap()).unwrap();
    let report = finedeep::analysis::nsar_report(&caps, 0.1).unwrap();
    for (line, e) in csv.lines().skip(1).zip(&report.entries) {
        assert_eq!(line, format!("{},{},nsar,0.1,{}", e.layer, e.sublayer.unwrap(), e.rate));
    }

    ok(&["histogram", "--ckpt", "c.fdcp", "--corpus", "corpus.txt", "--bins", "-1,0,1", "--tokens", "64", "--out", "h.csv"], p);
    let hist = fs::read_to_string(p.join("h.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 4 * 2);
    assert!(hist.contains(",hist_count,-inf,"));
}

#[test]
fn gradcheck_passes_on_a_small_vocabulary() {
    let dir = workspace();
    let p = dir.path();
    fs::write(p.join("g.toml"), TINY.replace("vocab_size = 256", "vocab_size = 11") + "arch = \"finedeep\"\nM = 2\nK = 2\n")
        .unwrap();
    let out = ok(&["gradcheck", "--config", "g.toml"], p);
    assert!(out.contains("pass=true"), "{out}");
}
