use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use visotts::dsp::io::{read_mel, read_wav, write_matrix};

const TINY: [&str; 10] = [
    "--d", "16", "--text-blocks", "1", "--visual-blocks", "1", "--decoder-blocks", "1", "--heads", "2",
];

fn visotts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visotts"))
        .args(args)
        .env_remove("VISOTTS_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = visotts(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn gen_data(dir: &Path, name: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    ok(&["gen-data", "--utterances", "6", "--speakers", "2", "--seed", "7", "--out", s(&out)]);
    out
}

fn train(dir: &Path, corpus: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--corpus", s(corpus), "--out", s(&out), "--max-steps", "2", "--batch-size", "3"];
    args.extend(TINY);
    ok(&args);
    out
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), "a");
    let b = gen_data(dir.path(), "b");
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(f, _)| f == "manifest.json"));
    assert!(ta.iter().any(|(f, _)| f == "run_config.json"));
    let strip = |t: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        t.into_iter().filter(|(f, _)| f != "run_config.json").collect()
    };
    assert_eq!(strip(ta), strip(tb));
}

#[test]
fn train_synth_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_data(dir.path(), "corpus");
    let run = train(dir.path(), &corpus);
    assert!(run.join("loss.csv").is_file());
    assert!(run.join("run_config.json").is_file());
    let ck = run.join("checkpoint");
    assert!(ck.is_dir());

    let visual = dir.path().join("visual.f32");
    write_matrix(&visual, &Array2::from_shape_fn((7, 512), |(t, j)| ((t * 512 + j) as f32 * 0.37).sin())).unwrap();
    let synth = dir.path().join("synth");
    ok(&[
        "synth", "--checkpoint", s(&ck), "--out", s(&synth), "--visual", s(&visual),
        "--phonemes", "HH AH L OW", "--speaker", "spk_01", "--corpus", s(&corpus), "--griffin-lim-iters", "4",
    ]);
    assert_eq!(read_mel(synth.join("mel.bin")).unwrap().frames().dim(), (28, 80));
    assert_eq!(read_wav(synth.join("synth.wav")).unwrap().len(), 4480);
    let align = fs::read_to_string(synth.join("alignment.csv")).unwrap();
    assert_eq!(align.lines().count(), 8);
    assert_eq!(align.lines().next().unwrap(), "frame,p0,p1,p2,p3");

    let from_text = dir.path().join("from_text");
    ok(&[
        "synth", "--checkpoint", s(&ck), "--out", s(&from_text), "--visual", s(&visual),
        "--text", "hello world", "--speaker", "spk_00", "--corpus", s(&corpus), "--griffin-lim-iters", "4",
    ]);
    assert_eq!(read_wav(from_text.join("synth.wav")).unwrap().len(), 4480);

    let eval = dir.path().join("eval");
    let before = tree(&corpus);
    let stdout = ok(&[
        "eval", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--out", s(&eval), "--griffin-lim-iters", "4",
    ]);
    assert!(stdout.contains("mel_l1"), "{stdout}");
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "utt_id,mel_l1,stoi,estoi,diagonality,violations,frame_acc");
    assert_eq!(report.lines().count(), 7);
    assert!(eval.join("summary.json").is_file());
    assert_eq!(tree(&corpus), before);

    let attn = dir.path().join("attn");
    ok(&[
        "inspect-attn", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--out", s(&attn),
        "--utt", "utt_0002", "--utt", "utt_0004",
    ]);
    for id in ["utt_0002", "utt_0004"] {
        assert!(attn.join(format!("{id}.csv")).is_file());
        assert!(attn.join(format!("{id}.png")).is_file());
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_data(dir.path(), "corpus");
    let run = train(dir.path(), &corpus);
    let again = dir.path().join("again");
    ok(&[
        "train", "--config", s(&run.join("run_config.json")), "--out", s(&again),
    ]);
    assert_eq!(
        fs::read(run.join("loss.csv")).unwrap(),
        fs::read(again.join("loss.csv")).unwrap()
    );
    assert_eq!(tree(&run.join("checkpoint")), tree(&again.join("checkpoint")));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = visotts(&["eval", "--checkpoint", s(&missing), "--corpus", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("checkpoint not found: {}", missing.display())), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["frobnicate"],
        vec!["gen-data", "--utterances", "many", "--out", s(dir.path())],
        vec!["gen-data", "--upsample-n", "3", "--out", s(dir.path())],
        vec!["gen-data"],
        vec!["synth", "--checkpoint", "x", "--visual", "v"],
    ];
    for args in cases {
        let out = visotts(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"batch_sizee": 4}"#).unwrap();
    let out = visotts(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sizee"));
}
