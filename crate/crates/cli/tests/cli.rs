use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
synth.speakers=2
synth.utterances_per_speaker=12
synth.words=20
pooler.hidden=16
train.epochs=1
train.max_iterations=2
train.batch_size=16
kmeans.k=4
";

fn awekit(dir: &Path, args: &[&str]) -> Output {
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
    Command::new(env!("CARGO_BIN_EXE_awekit"))
        .arg("--config")
        .arg(dir.join("small.cfg"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("corpus");
    let o = awekit(dir, &["--out", corpus.to_str().unwrap(), "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    corpus
}

#[test]
fn missing_alignment_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let missing = dir.path().join("nope.ali.tsv");
    let o = awekit(
        dir.path(),
        &[
            "--out",
            dir.path().join("m").to_str().unwrap(),
            "mine",
            "--mode",
            "mpr",
            "--features",
            corpus.join("features.awf").to_str().unwrap(),
            "--alignments",
            missing.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ali.tsv"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = awekit(dir.path(), &["--set", "train.learning_rate=1", "synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.learning_rate"));
}

#[test]
fn uncapped_mining_recovers_every_ground_truth_pair() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let out = dir.path().join("mined");
    let o = awekit(
        dir.path(),
        &[
            "--out",
            out.to_str().unwrap(),
            "--set",
            "mpr.cap=0",
            "--set",
            "mpr.exclude_overlap=false",
            "mine",
            "--mode",
            "mpr",
            "--features",
            corpus.join("features.awf").to_str().unwrap(),
            "--alignments",
            corpus.join("train.ali.tsv").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = |p: &Path| std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(lines(&out.join("pairs.tsv")), lines(&corpus.join("gt_pairs.tsv")));
    assert!(out.join(awekit_cli::RUN_CONFIG_FILE).exists());
}

#[test]
fn train_then_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let f = corpus.join("features.awf");
    let train = dir.path().join("train");
    let o = awekit(
        dir.path(),
        &[
            "--out",
            train.to_str().unwrap(),
            "train",
            "--features",
            f.to_str().unwrap(),
            "--pairs",
            corpus.join("gt_pairs.tsv").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(train.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss"));
    assert_eq!(log.lines().count(), 3);

    let eval = dir.path().join("eval");
    let o = awekit(
        dir.path(),
        &[
            "--out",
            eval.to_str().unwrap(),
            "eval",
            "--features",
            f.to_str().unwrap(),
            "--words",
            corpus.join("test.words.tsv").to_str().unwrap(),
            "--pooler",
            train.join("pooler.awp").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(eval.join("report.txt")).unwrap();
    assert!(report.contains("map="), "{report}");
}
