use std::path::Path;
use std::process::{Command, Output};

fn saff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("stdout is JSON lines"))
        .collect()
}

const TINY: &[&str] = &[
    "--set", "n_classes=8",
    "--set", "test_classes=3",
    "--set", "images_per_class=8",
    "--set", "n_patches=4",
    "--set", "dim=6",
    "--set", "scorer_hidden=8",
    "--n-way", "3",
    "--k-shot", "1",
    "--q-per-class", "2",
    "--episodes", "6",
    "--train-episodes", "4",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = saff(d, &with_tiny(&["synth-gen", "--out", "s.saff"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("# seed = 0"), "config echo missing: {stderr}");
    assert!(stderr.contains("# n_patches = 4"));

    let out = saff(d, &with_tiny(&["train", "--store", "s.saff", "--out", "p.json", "--losses", "loss.jsonl"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("loss.jsonl")).unwrap().lines().count(), 4);

    let out = saff(d, &with_tiny(&["eval", "--store", "s.saff", "--params", "p.json", "--out", "r.jsonl"]));
    assert!(out.status.success());
    let summary = &stdout_lines(&out)[0];
    assert_eq!(summary["episodes"], 6);
    // six episode records plus a summary
    assert_eq!(std::fs::read_to_string(d.join("r.jsonl")).unwrap().lines().count(), 7);

    let out = saff(d, &with_tiny(&["mcnemar", "--report-a", "r.jsonl", "--report-b", "r.jsonl"]));
    assert_eq!(out.status.code(), Some(8), "identical reports have no discordant pairs");

    let out = saff(d, &with_tiny(&["seeds", "--reports", "r.jsonl", "r.jsonl"]));
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["std"], 0.0);

    let out = saff(d, &with_tiny(&["compare-masks", "--store", "s.saff", "--params", "p.json"]));
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    assert_eq!(lines[0]["mask_mode"], "binary");
    assert_eq!(lines[1]["mask_mode"], "weighted");

    for name in ["a.jsonl", "b.jsonl"] {
        let out = saff(d, &with_tiny(&["export-attn", "--store", "s.saff", "--params", "p.json", "--ids", "0,5", "--out", name]));
        assert!(out.status.success());
    }
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 2 * 6);
}

#[test]
fn sweep_emits_nine_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(saff(d, &with_tiny(&["synth-gen", "--out", "s.saff"])).status.success());
    let out = saff(d, &with_tiny(&["sweep", "--store", "s.saff", "--train-episodes", "1", "--episodes", "2"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = stdout_lines(&out);
    assert_eq!(rows.len(), 9);
    assert_eq!((rows[0]["n_slots"].as_u64(), rows[0]["n_iters"].as_u64()), (Some(3), Some(3)));
    assert_eq!((rows[8]["n_slots"].as_u64(), rows[8]["n_iters"].as_u64()), (Some(10), Some(10)));
}

#[test]
fn errors_carry_category_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: &[(&[&str], i32, &str)] = &[
        (&["eval", "--store", "missing.saff"], 9, "error[io]"),
        (&["mcnemar", "--b", "0", "--c", "0"], 8, "error[stats]"),
        (&["gradcheck", "--set", "bogus=1"], 3, "error[config]"),
        (&["gradcheck", "--mask-mode", "soft"], 3, "error[config]"),
        (&["synth-gen", "--out", "x.saff", "--set", "relevant_fraction=0"], 3, "error[config]"),
    ];
    for (args, code, tag) in cases {
        let out = saff(d, args);
        assert_eq!(out.status.code(), Some(*code), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(tag), "{args:?}");
    }
    std::fs::write(d.join("junk.saff"), b"NOPE").unwrap();
    let out = saff(d, &["eval", "--store", "junk.saff"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[format]"));
    let out = saff(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mcnemar_from_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = saff(dir.path(), &["mcnemar", "--b", "10", "--c", "20"]);
    assert!(out.status.success());
    let line = &stdout_lines(&out)[0];
    assert_eq!(line["chi2"], 2.7);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# test\nseed = 5\nn_slots = 3\n").unwrap();
    let out = saff(d, &["gradcheck", "--config", "run.cfg", "--slots", "4"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("# seed = 5"));
    assert!(stderr.contains("# n_slots = 4"));
}
