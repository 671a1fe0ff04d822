use std::path::Path;

use retalign::cli::main_with;

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("retalign").chain(args.iter().copied()).map(std::ffi::OsString::from))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let data = dir.join("dial.jsonl");
    let ckpt = dir.join("m.ckpt");
    let csv = dir.join("align.csv");
    assert_eq!(run(&["--seed", "3", "gen-data", "--env", "dial", "--episodes", "40", "--out", s(&data)]), 0);
    let small = [
        "--set", "model.embed_dim=8", "--set", "model.heads=2", "--set", "model.ff_dim=16",
        "--set", "model.encoder_layers=1", "--set", "model.q_hidden=8", "--set", "train.batch_size=8",
    ];
    let mut train = small.to_vec();
    train.extend(["train", "--data", s(&data), "--out", s(&ckpt), "--steps", "15"]);
    assert_eq!(run(&train), 0);
    let eval = [
        "--set", "infer.n_candidates=4", "eval-align", "--checkpoint", s(&ckpt), "--data", s(&data),
        "--targets", "2:18:8", "--episodes", "2", "--out", s(&csv),
    ];
    assert_eq!(run(&eval), 0);
    (std::fs::read(&data).unwrap(), std::fs::read(&csv).unwrap())
}

#[test]
fn pipeline_outputs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, ca) = pipeline(a.path());
    let (db, cb) = pipeline(b.path());
    assert_eq!(da, db);
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "target,mean_return,std_return,mean_abs_err,episodes");
    assert_eq!(lines.len(), 4);
    assert!(text.ends_with('\n'));
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen-data", "--bogus"]), 2);
    assert_eq!(run(&["--set", "train.nope=1", "gen-data", "--env", "dial", "--out", "x"]), 2);
    let missing = dir.path().join("missing.ckpt");
    let data = dir.path().join("d.jsonl");
    assert_eq!(run(&["gen-data", "--env", "dial", "--episodes", "3", "--out", s(&data)]), 0);
    assert_eq!(run(&["eval-align", "--checkpoint", s(&missing), "--data", s(&data), "--out", "o.csv"]), 3);
    assert_eq!(run(&["filter-data", "drop", "--data", s(&data), "--percent", "100", "--out", "o"]), 2);
}

#[test]
fn grad_check_command_passes() {
    assert_eq!(run(&["grad-check", "--env", "dial"]), 0);
}

#[test]
fn shipped_desk_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let cfg = retalign::config::RunConfig::from_file(path).unwrap();
    assert_eq!(cfg.model.embed_dim, 32);
    assert!(cfg.train.cosine_decay);
    assert_eq!(cfg.train.mask.ratios[0], 0.1);
}
