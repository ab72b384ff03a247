use std::fs;
use std::path::Path;
use std::process::Command;

use certdispatch_cli::{run, EXIT_IO, EXIT_OK, EXIT_USAGE};

fn cli(args: &[&str]) -> certdispatch_cli::CommandResult {
    let mut argv = vec!["certdispatch"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn train_small(dir: &Path, name: &str, seed: &str) -> String {
    let out = p(dir, name);
    let r = cli(&[
        "train",
        "--seed",
        seed,
        "--hidden",
        "16,16",
        "--epochs",
        "4",
        "--samples-per-epoch",
        "256",
        "--batch-size",
        "64",
        "--val-samples",
        "64",
        "--out",
        &out,
    ]);
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);
    out
}

#[test]
fn datagen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (p(dir.path(), "a.csv"), p(dir.path(), "b.csv"), p(dir.path(), "c.csv"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let r = cli(&["datagen", "--case", "toy14", "--n", "1000", "--seed", seed, "--out", out]);
        assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);
        assert_eq!(r.artifacts.len(), 1);
    }
    let (ta, tb, tc) = (fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap(), fs::read_to_string(&c).unwrap());
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
    let lines: Vec<&str> = ta.lines().collect();
    assert_eq!(lines.len(), 1001);
    assert!(lines[0].starts_with("d0_bus"));
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
}

#[test]
fn train_is_reproducible_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a.json", "5");
    let b = train_small(dir.path(), "b.json", "5");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(format!("{a}.log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_gap,lr,wall_time");
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn solve_then_report_agree_at_the_solve_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small(dir.path(), "m.json", "1");
    let samples = p(dir.path(), "s.csv");
    let r = cli(&["solve", "--model", &model, "--n", "150", "--seed", "2", "--epsilon", "0.01", "--workers", "4", "--out", &samples]);
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);

    let text = fs::read_to_string(&samples).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 150);

    // hand accounting from the per-sample file
    let f = |r: &csv::StringRecord, k: usize| r[k].parse::<f64>().unwrap();
    let span = |t: &[f64]| (t.iter().sum::<f64>() / 4.0).max(t.iter().cloned().fold(0.0, f64::max));
    let solver: Vec<f64> = rows.iter().map(|r| f(r, 5)).collect();
    let fallback: Vec<f64> = rows.iter().filter(|r| f(r, 2) > 0.01).map(|r| f(r, 5)).collect();
    let proxy: f64 = rows.iter().map(|r| f(r, 4)).sum();
    let expected = span(&solver) / (proxy + span(&fallback));
    for r in &rows {
        let source = if f(r, 2) <= 0.01 { "proxy" } else { "fallback" };
        assert_eq!(&r[3], source);
    }
    assert!(r.summary.contains(&format!("{:.3}x", expected)), "{} vs {expected}", r.summary);

    let curve = p(dir.path(), "c.csv");
    let plot = p(dir.path(), "c.svg");
    let r = cli(&["report", "--results", &samples, "--workers", "4", "--epsilon", "0.01", "--out", &curve, "--plot", &plot]);
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);
    assert!(fs::read_to_string(&plot).unwrap().contains("<svg"));
    let text = fs::read_to_string(&curve).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let row = rdr
        .records()
        .map(|r| r.unwrap())
        .find(|r| r[0].parse::<f64>().unwrap() == 0.01)
        .unwrap();
    let n: f64 = row[1].parse().unwrap();
    assert!((n - expected).abs() <= 1e-12 * expected, "{n} vs {expected}");
}

#[test]
fn solve_reads_instance_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small(dir.path(), "m.json", "1");
    let demands = p(dir.path(), "d.csv");
    assert_eq!(cli(&["datagen", "--n", "40", "--seed", "3", "--out", &demands]).exit_code, EXIT_OK);
    let out = p(dir.path(), "s.csv");
    let r = cli(&["solve", "--model", &model, "--demands", &demands, "--out", &out]);
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 41);
}

#[test]
fn verify_passes_on_the_toy_case() {
    let r = cli(&["verify", "--case", "toy14", "--seed", "3"]);
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);
    assert_eq!(r.summary.lines().count(), 6);
    assert!(r.summary.lines().all(|l| l.starts_with("ok")));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]).exit_code, EXIT_USAGE);
    assert_eq!(cli(&["datagen", "--out", "x.csv", "--bogus"]).exit_code, EXIT_USAGE);
    assert_eq!(cli(&["datagen", "--n", "0", "--out", &p(dir.path(), "x.csv")]).exit_code, EXIT_USAGE);
    assert_eq!(cli(&["--help"]).exit_code, EXIT_OK);

    let missing = p(dir.path(), "missing.json");
    let r = cli(&["solve", "--model", &missing, "--out", &p(dir.path(), "s.csv")]);
    assert_eq!(r.exit_code, EXIT_IO);
    assert!(r.summary.contains("missing.json"));
    assert_eq!(cli(&["datagen", "--case", &missing, "--out", &p(dir.path(), "x.csv")]).exit_code, EXIT_IO);

    let garbage = p(dir.path(), "g.csv");
    fs::write(&garbage, "instance_id,gap\n1,2\n").unwrap();
    assert_eq!(cli(&["report", "--results", &garbage, "--out", &p(dir.path(), "c.csv")]).exit_code, EXIT_IO);

    let model = train_small(dir.path(), "m.json", "1");
    let short = p(dir.path(), "short.csv");
    fs::write(&short, "d0\n1.0\n").unwrap();
    assert_eq!(
        cli(&["solve", "--model", &model, "--demands", &short, "--out", &p(dir.path(), "s.csv")]).exit_code,
        EXIT_IO
    );
    let r = cli(&["solve", "--model", &model, "--n", "5", "--workers", "0", "--out", &p(dir.path(), "s.csv")]);
    assert_eq!(r.exit_code, EXIT_USAGE);
}

#[test]
fn json_format_wraps_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "d.csv");
    let r = cli(&["--format", "json", "datagen", "--n", "3", "--out", &out]);
    assert_eq!(r.exit_code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&r.summary).unwrap();
    assert_eq!(v["command"], "datagen");
    assert_eq!(v["artifacts"][0], out.as_str());
}

#[test]
fn binary_exit_status_follows_the_result() {
    let bin = env!("CARGO_BIN_EXE_certdispatch");
    let status = Command::new(bin).arg("nonsense").output().unwrap().status;
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["datagen", "--n", "2", "--out", &p(dir.path(), "d.csv")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8(out.stdout).unwrap().contains("wrote 2 instances"));
}
