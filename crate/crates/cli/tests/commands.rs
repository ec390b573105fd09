use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ntps_cli::format::{read_stats_file, ActivationHeader, ActivationWriter};
use ntps_core::{autoregressive_subspace, ntps, perception_subspace, Pooling};

fn ntps_bin(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ntps"));
    cmd.args(args).env_remove("NTPS_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ntps_bin(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes one layer file and accumulates it into `stats`.
fn synth_stats(dir: &Path, stats: &Path, extra: &[&str]) {
    let bin = dir.join("tmp.bin");
    let mut args = vec!["synth", "--out", s(&bin)];
    args.extend_from_slice(extra);
    ok(&args);
    ok(&["accumulate", s(&bin), "--out", s(stats)]);
}

fn score_row(out: &str) -> (u32, usize, f64) {
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("layer\tk\tntps"));
    let f: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert!(lines.next().is_none());
    (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
}

#[test]
fn aligned_plant_scores_high() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("a.ntss");
    synth_stats(dir.path(), &stats, &["--overlap", "1", "--sigma", "0", "--n", "600", "--layer", "4"]);
    let (layer, k, score) = score_row(&ok(&["score", s(&stats), "--k-prop", "0.125"]));
    assert_eq!((layer, k), (4, 2));
    assert!(score >= 0.99, "{score}");
}

#[test]
fn full_rank_proportion_saturates() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("a.ntss");
    synth_stats(dir.path(), &stats, &["--d", "6", "--overlap", "0.3", "--n", "300", "--no-mirror"]);
    for pooling in ["mean", "sum"] {
        let (_, k, score) = score_row(&ok(&["score", s(&stats), "--k-prop", "1.0", "--pooling", pooling]));
        assert_eq!(k, 6);
        assert!((score - 1.0).abs() < 1e-9, "{pooling}: {score}");
    }
}

#[test]
fn pooling_flag_selects_the_perception_pencil() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("a.ntss");
    synth_stats(dir.path(), &stats, &["--overlap", "0.5", "--n", "400", "--min-len", "2", "--max-len", "9"]);
    let m = read_stats_file(&stats).unwrap().finalize().unwrap();
    let v = autoregressive_subspace(&m, 4).unwrap().basis;
    for (flag, pooling) in [("mean", Pooling::Mean), ("sum", Pooling::Sum)] {
        let (_, _, printed) = score_row(&ok(&["score", s(&stats), "--k-prop", "0.25", "--pooling", flag]));
        let expected = ntps(&perception_subspace(&m, 4, pooling).unwrap().basis, &v).unwrap();
        assert_eq!(printed, expected, "{flag}");
    }
}

#[test]
fn invalid_proportions_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("a.ntss");
    synth_stats(dir.path(), &stats, &["--n", "50"]);
    for bad in ["0", "-0.5", "1.5"] {
        assert_eq!(code(&ntps_bin(&["score", s(&stats), "--k-prop", bad], &[])), 1, "{bad}");
    }
    assert_eq!(code(&ntps_bin(&["score", s(&stats)], &[])), 1);
    assert_eq!(code(&ntps_bin(&["frobnicate"], &[])), 1);
    assert_eq!(code(&ntps_bin(&["--help"], &[])), 0);
}

#[test]
fn shards_merge_to_identical_bytes_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.bin");
    let part = dir.path().join("part.bin");
    ok(&["synth", "--n", "333", "--out", s(&one)]);
    ok(&["synth", "--n", "333", "--shards", "5", "--out", s(&part)]);
    let shards: Vec<PathBuf> = (0..5).map(|i| dir.path().join(format!("part.bin.{i}"))).collect();
    let mut outputs = Vec::new();
    for (threads, inputs) in [("1", vec![one.clone()]), ("4", shards.clone()), ("0", shards.clone()), ("2", vec![one.clone()])] {
        let out = dir.path().join(format!("s{}.ntss", outputs.len()));
        let mut args = vec!["accumulate".to_string()];
        args.extend(inputs.iter().map(|p| s(p).to_string()));
        args.extend(["--out".to_string(), s(&out).to_string()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let res = ntps_bin(&args, &[("NTPS_THREADS", threads)]);
        assert!(res.status.success());
        outputs.push(std::fs::read(out).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(code(&ntps_bin(&["accumulate", s(&one), "--out", s(&dir.path().join("x"))], &[("NTPS_THREADS", "many")])), 1);
}

#[test]
fn accumulate_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let out = dir.path().join("o.ntss");
    ok(&["synth", "--d", "8", "--n", "20", "--out", s(&a)]);
    ok(&["synth", "--d", "6", "--n", "20", "--out", s(&b)]);
    let res = ntps_bin(&["accumulate", s(&a), s(&b), "--out", s(&out)], &[]);
    assert_eq!(code(&res), 2);

    let bytes = std::fs::read(&a).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let res = ntps_bin(&["accumulate", s(&cut), "--out", s(&out)], &[]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("byte offset"));

    let empty = dir.path().join("empty.bin");
    ActivationWriter::create(&empty, ActivationHeader::new(4, 2, 0, 0).unwrap()).unwrap().finish().unwrap();
    assert_eq!(code(&ntps_bin(&["accumulate", s(&empty), "--out", s(&out)], &[])), 2);
    assert_eq!(code(&ntps_bin(&["accumulate", s(&dir.path().join("missing.bin")), "--out", s(&out)], &[])), 2);
    assert!(!out.exists());
}

fn sweep_tree(root: &Path, datasets: &[(&str, &str)], layers: u32) {
    for (name, overlap) in datasets {
        let sub = root.join(name);
        std::fs::create_dir_all(&sub).unwrap();
        for layer in 0..layers {
            let l = layer.to_string();
            let seed = (layer + 10 * name.len() as u32).to_string();
            synth_stats(
                root,
                &sub.join(format!("layer{layer}.ntss")),
                &["--overlap", overlap, "--layer", &l, "--seed", &seed, "--n", "200"],
            );
        }
    }
}

#[test]
fn sweep_emits_nineteen_rows_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("single");
    std::fs::create_dir(&root).unwrap();
    for layer in 0..3 {
        synth_stats(dir.path(), &root.join(format!("l{layer}.ntss")), &["--layer", &layer.to_string(), "--n", "150"]);
    }
    let out = ok(&["sweep", s(&root)]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("dataset\tlayer\tk_prop\tk\tntps"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 57);
    for layer in 0..3 {
        let of_layer: Vec<_> = rows.iter().filter(|r| r[1] == layer.to_string()).collect();
        assert_eq!(of_layer.len(), 19);
        assert_eq!(of_layer[0][2], "0.05");
        assert_eq!(of_layer[18][2], "0.95");
    }
    for r in &rows {
        assert_eq!(r[0], "single");
        let v: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    let narrow = ok(&["sweep", s(&root), "--grid", "0.25:0.5:0.25"]);
    assert_eq!(narrow.lines().count(), 1 + 3 * 2);
}

#[test]
fn sweep_joins_metrics_across_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tree");
    sweep_tree(&root, &[("alpha", "0.1"), ("beta", "0.5"), ("gamma", "0.9")], 2);
    let metrics = dir.path().join("m.tsv");
    std::fs::write(&metrics, "dataset\tmetric_name\tvalue\nalpha\tacc\t0.5\nbeta\tacc\t0.6\ngamma\tacc\t0.9\n").unwrap();
    let report = dir.path().join("r.tsv");
    let res = ntps_bin(&["sweep", s(&root), "--metrics", s(&metrics), "--out", s(&report)], &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("best layer"));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dataset\tlayer\tk_prop\tk\tntps\tspearman_r"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3 * 2 * 19);
    for r in &rows {
        assert!(r[5] == "NA" || (-1.0..=1.0).contains(&r[5].parse::<f64>().unwrap()));
    }

    std::fs::write(&metrics, "dataset\tmetric_name\tvalue\nalpha\tacc\t0.5\nbeta\tacc\t0.6\n").unwrap();
    assert_eq!(code(&ntps_bin(&["sweep", s(&root), "--metrics", s(&metrics)], &[])), 2);
    std::fs::write(&metrics, "dataset\tmetric_name\tvalue\nalpha\tacc\t0.5\nbeta\tloss\t0.6\n").unwrap();
    assert_eq!(code(&ntps_bin(&["sweep", s(&root), "--metrics", s(&metrics)], &[])), 2);
}

#[test]
fn sweep_rejects_empty_or_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&ntps_bin(&["sweep", s(&empty)], &[])), 2);
    assert_eq!(code(&ntps_bin(&["sweep", s(&dir.path().join("nope"))], &[])), 2);
    assert_eq!(code(&ntps_bin(&["sweep", s(&empty), "--grid", "0.5:0.1:0.1"], &[])), 1);
    assert_eq!(code(&ntps_bin(&["sweep", s(&empty), "--grid", "0.1-0.5"], &[])), 1);
}

#[test]
fn validate_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.json");
    let second = dir.path().join("b.json");
    for (p, threads) in [(&first, "1"), (&second, "3")] {
        let res = ntps_bin(&["validate", "--seeds", "1", "--margin-trials", "300", "--out", s(p)], &[("NTPS_THREADS", threads)]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    let a = std::fs::read(&first).unwrap();
    assert_eq!(a, std::fs::read(&second).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(json["failed"], 0);
    assert_eq!(json["configs"].as_array().unwrap().len(), 18);
    let checks = json["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true && c["slack"].as_f64().unwrap() >= 0.0));
    assert!(checks.iter().any(|c| c["check"] == "sandwich_autoregressive"));
}

#[test]
fn validate_rejects_infeasible_configs_before_running() {
    let res = ntps_bin(&["validate", "--dims", "3"], &[]);
    assert_eq!(code(&res), 1);
    assert!(res.stdout.is_empty());
    assert!(String::from_utf8_lossy(&res.stderr).contains("infeasible"));
    assert_eq!(code(&ntps_bin(&["validate", "--grid", "0:1.5:0.5"], &[])), 1);
    assert_eq!(code(&ntps_bin(&["validate", "--seeds", "0"], &[])), 1);
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn predict_gain_ranks_low_scores_first() {
    let dir = tempfile::tempdir().unwrap();
    let scores = write(dir.path(), "n.tsv", "dataset\tmetric_name\tvalue\nfirst\tntps\t0.2\nsecond\tntps\t0.9\n");
    let out = ok(&["predict-gain", s(&scores)]);
    assert_eq!(out, "rank\tdataset\tntps\n1\tfirst\t0.2\n2\tsecond\t0.9\n");

    let gains = write(dir.path(), "g.tsv", "dataset\tmetric_name\tvalue\nfirst\tgain\t0.3\nsecond\tgain\t0.1\n");
    let out = ok(&["predict-gain", s(&scores), "--observed", s(&gains)]);
    assert_eq!(out, "rank\tdataset\tntps\tobserved_gain\tspearman_r\n1\tfirst\t0.2\t0.3\t-1\n2\tsecond\t0.9\t0.1\t-1\n");

    let lonely = write(dir.path(), "l.tsv", "dataset\tmetric_name\tvalue\nfirst\tntps\t0.2\n");
    assert_eq!(code(&ntps_bin(&["predict-gain", s(&lonely)], &[])), 2);
}

#[test]
fn commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ok(&["synth", "--seed", "5", "--n", "64", "--out", s(&a)]);
    ok(&["synth", "--seed", "5", "--n", "64", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let stats = dir.path().join("s.ntss");
    ok(&["accumulate", s(&a), "--out", s(&stats)]);
    assert_eq!(ok(&["score", s(&stats), "--k-prop", "0.3"]), ok(&["score", s(&stats), "--k-prop", "0.3"]));
    assert_eq!(code(&ntps_bin(&["synth", "--overlap", "2", "--out", s(&a)], &[])), 1);
    assert_eq!(code(&ntps_bin(&["synth", "--n", "3", "--shards", "4", "--out", s(&a)], &[])), 1);
}
