use std::path::Path;
use std::process::{Command, Output};

fn naus(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_naus"))
        .args(args)
        .current_dir(dir)
        .env("NAUS_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    ok(&naus(&["--help"], dir.path()));
    for sub in ["train-lm", "search", "train-naus", "summarize", "evaluate", "pipeline", "oracle-check", "toy-data"] {
        let out = naus(&[sub, "--help"], dir.path());
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(naus(&["search", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(naus(&["summarize", "--decoder", "sampling"], dir.path()).status.code(), Some(2));
    assert_eq!(naus(&["evaluate", "--pred", "a", "--ref", "b", "--protocol", "bleu"], dir.path()).status.code(), Some(2));
}

#[test]
fn oracle_check_passes_and_prints_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = naus(&["oracle-check", "--trials", "50"], dir.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"like I\"") && text.contains("\"I like\""), "{text}");
    assert!(text.contains("0 failed"));
    assert_eq!(naus(&["oracle-check", "--max-slots", "20"], dir.path()).status.code(), Some(2));
}

#[test]
fn staged_commands_produce_exact_length_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&naus(&["toy-data", "--sentences", "80", "--seed", "5"], d));
    ok(&naus(&["train-lm", "--corpus", "corpus.txt", "--order", "3", "--k", "0.1"], d));
    ok(&naus(
        &["search", "--corpus", "corpus.txt", "--vocab", "vocab.txt", "--lm", "lm.bin", "--vectors", "vectors.txt", "--length", "5", "--steps", "50"],
        d,
    ));
    assert_eq!(std::fs::read_to_string(d.join("pseudo.tsv")).unwrap().lines().count(), 80);
    let out = naus(
        &["train-naus", "--pairs", "pseudo.tsv", "--vocab", "vocab.txt", "--epochs", "1", "--layers", "1", "--model-dim", "16", "--ffn-dim", "32", "--max-len", "32"],
        d,
    );
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);

    std::fs::write(d.join("input.txt"), "the old bank sold the loan in oslo on monday , officials said .\nthe court\n\n").unwrap();
    let summarize = |extra: &[&str]| {
        let mut args = vec!["summarize", "--model", "model.ckpt", "--vocab", "vocab.txt", "--input", "input.txt", "--length", "10"];
        args.extend_from_slice(extra);
        naus(&args, d)
    };
    for extra in [&[][..], &["--mode", "no_merge", "--beam", "1"], &["--decoder", "truncate"]] {
        let out = summarize(extra);
        ok(&out);
        let counts: Vec<usize> = String::from_utf8_lossy(&out.stdout).lines().map(|l| l.split_whitespace().count()).collect();
        if extra.contains(&"truncate") {
            assert!(counts[0] <= 10 && counts[1] <= 2 && counts[2] == 0, "{counts:?}");
        } else {
            assert_eq!(counts, vec![10, 2, 0]);
        }
    }
    ok(&summarize(&["--timing", "timing.tsv", "--output", "pred.txt"]));
    assert_eq!(std::fs::read_to_string(d.join("timing.tsv")).unwrap().lines().count(), 3);
    assert_eq!(summarize(&["--length", "33"]).status.code(), Some(2));

    std::fs::write(d.join("ref.txt"), std::fs::read_to_string(d.join("pred.txt")).unwrap()).unwrap();
    let out = naus(&["evaluate", "--pred", "pred.txt", "--ref", "ref.txt", "--timing", "timing.tsv", "--out", "report.json"], d);
    ok(&out);
    let report = std::fs::read_to_string(d.join("report.json")).unwrap();
    assert!(report.contains("\"n_samples\": 3") && report.contains("\"timing\""), "{report}");
    let out = naus(&["evaluate", "--pred", "pred.txt", "--ref", "input.txt", "--baseline", "report.json", "--protocol", "truncated-recall"], d);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"delta_r\"") && !text.contains("\"delta_r\": null"), "{text}");
}

#[test]
fn pipeline_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), "a b c\n").unwrap();
    std::fs::write(dir.path().join("p.cfg"), "corpus=corpus.txt\nvectors=missing.txt\nworkdir=work\n").unwrap();
    let out = naus(&["pipeline", "--config", "p.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vectors file not found"));
    assert!(!dir.path().join("work").exists());
    std::fs::write(dir.path().join("bad.cfg"), "corpus=corpus.txt\nvectors=v\nworkdir=w\nlength=0\n").unwrap();
    assert_eq!(naus(&["pipeline", "--config", "bad.cfg"], dir.path()).status.code(), Some(1));
}
