use std::path::Path;
use std::process::{Command, Output};

fn ridgevlp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ridgevlp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_error(o: &Output, code: &str, status: i32) {
    let err = stderr(o);
    assert_eq!(o.status.code(), Some(status), "stderr: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "one line: {err:?}");
    assert!(err.starts_with(&format!("{code}: ")), "{err}");
}

const TINY: &[&str] = &[
    "--set",
    "train_data=data/studies.jsonl",
    "--set",
    "eval_data=data/studies.jsonl",
    "--set",
    "d_model=16",
    "--set",
    "d_proj=8",
    "--set",
    "heads=2",
    "--set",
    "blocks=1",
    "--set",
    "batch_size=4",
    "--set",
    "steps=3",
];

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

#[test]
fn malformed_command_lines_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_error(&ridgevlp(&["frobnicate"], dir.path()), "E_USAGE", 2);
    assert_error(&ridgevlp(&["synth", "--out", "x"], dir.path()), "E_USAGE", 2);
    assert_error(
        &ridgevlp(&["mask", "a.png", "--mode", "sideways"], dir.path()),
        "E_USAGE",
        2,
    );
    assert!(ridgevlp(&["--help"], dir.path()).status.success());
    assert!(ridgevlp(&["--version"], dir.path()).status.success());
}

#[test]
fn runtime_errors_carry_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_error(
        &ridgevlp(&["filter", "missing.png", "--out", "o.png"], dir.path()),
        "E_IO",
        1,
    );
    std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
    assert_error(
        &ridgevlp(&["filter", "junk.png", "--out", "o.png"], dir.path()),
        "E_FORMAT",
        1,
    );
    assert_error(&ridgevlp(&["pretrain", "--set", "heads=0"], dir.path()), "E_CONFIG", 1);
    assert_error(
        &ridgevlp(&["pretrain", "--set", "nonsense=1"], dir.path()),
        "E_CONFIG",
        1,
    );
    std::fs::write(dir.path().join("bad.jsonl"), "{\"study_id\": 3}\n").unwrap();
    assert_error(&ridgevlp(&["manuscript", "bad.jsonl"], dir.path()), "E_PARSE", 1);
}

#[test]
fn filter_mask_and_manuscript_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ridgevlp(&["synth", "--n", "4", "--seed", "3", "--out", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = "data/images/synth-3-000000.pgm";

    let o = ridgevlp(&["filter", img, "--out", "f.png", "--raw", "f.bin"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let info: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(info["height"], 32);
    assert!(info["max"].as_f64().unwrap() > 0.0);
    assert_eq!(std::fs::metadata(d.join("f.bin")).unwrap().len(), 8 + 32 * 32 * 8);
    assert!(d.join("f.png").exists());

    let run = |seed: &str| ridgevlp(&["mask", img, "--ratio", "0.5", "--seed", seed, "--out", "m.pgm"], d);
    let a = run("7");
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&run("7")));
    let info: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(info["patches"], 16);
    assert_eq!(info["masked"].as_array().unwrap().len(), 8);

    let o = ridgevlp(&["manuscript", "data/studies.jsonl", "--out", "m.jsonl"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let labels = v["labels"].as_array().unwrap();
        let any_yes = labels.iter().any(|l| l == 1);
        assert_eq!(v["verdict"] == 1, any_yes);
        assert!(v["full_text"].as_str().unwrap().contains('?'));
    }
}

#[test]
fn pretrain_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ridgevlp(&["synth", "--n", "8", "--seed", "5", "--out", "data"], d)
        .status
        .success());

    let o = ridgevlp(
        &with_tiny(&["pretrain"], &["--set", "out_dir=run", "--stop-after", "2"]),
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ridgevlp(&with_tiny(&["pretrain"], &["--set", "out_dir=run", "--resume"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ridgevlp(&with_tiny(&["pretrain"], &["--set", "out_dir=straight"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = |p: &str| std::fs::read_to_string(d.join(p).join("loss.jsonl")).unwrap();
    assert_eq!(log("run"), log("straight"));
    assert_eq!(log("run").lines().count(), 3);

    let o = ridgevlp(&with_tiny(&["eval"], &["--set", "out_dir=run", "--k", "8"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["image_to_text"], 1.0);
    assert_eq!(r["text_to_image"], 1.0);

    let o = ridgevlp(&with_tiny(&["eval"], &["--set", "out_dir=run", "--k", "9"]), d);
    assert_error(&o, "E_CONFIG", 1);
    let o = ridgevlp(&with_tiny(&["eval"], &["--set", "out_dir=run", "--set", "seed=4"]), d);
    assert_error(&o, "E_CHECKPOINT", 1);
}

#[test]
fn config_file_and_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ridgevlp(&["synth", "--n", "8", "--seed", "6", "--out", "data"], d)
        .status
        .success());
    std::fs::write(
        d.join("tiny.toml"),
        "train_data = \"data/studies.jsonl\"\neval_data = \"data/studies.jsonl\"\nout_dir = \"abl\"\n\
         d_model = 16\nd_proj = 8\nheads = 2\nblocks = 1\nbatch_size = 4\nsteps = 2\n",
    )
    .unwrap();
    let o = ridgevlp(
        &["ablate", "--config", "tiny.toml", "--axis", "masking", "--out", "t.csv"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("t.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    for arm in ["none", "random", "filter_guided"] {
        assert!(lines[1..].iter().any(|l| l.contains(arm)), "{csv}");
    }
}
