use std::fs;
use std::path::Path;

use visotts::model::{Checkpoint, ModelConfig, VisoTts};
use visotts::synthcorpus::{generate_corpus, Corpus, CorpusConfig, Utterance};
use visotts::text::PhonemeVocabulary;
use visotts::training::{
    batch_indices, checkpoint_dir, make_batch, train_loop, TrainConfig, Trainer, LOSS_LOG,
};
use visotts::Error;

fn corpus(dir: &Path, utterances: usize) -> Corpus {
    let cfg = CorpusConfig {
        utterances,
        sigma_mel: 0.02,
        ..Default::default()
    };
    let root = dir.join("corpus");
    generate_corpus(&cfg, &PhonemeVocabulary::standard(), &root).unwrap();
    Corpus::open(root).unwrap()
}

fn narrow() -> ModelConfig {
    ModelConfig {
        text_blocks: 1,
        visual_blocks: 1,
        decoder_blocks: 1,
        ..ModelConfig::with_width(16)
    }
}

fn quick(max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_steps,
        warmup_steps: 10,
        log_every: 2,
        checkpoint_every: 3,
        ..Default::default()
    }
}

#[test]
fn gradients_reach_almost_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 16);
    let utts = c.load_all().unwrap();
    let batch: Vec<&Utterance> = utts.iter().collect();
    let (input, targets) = make_batch(&batch);
    let model = VisoTts::<f32>::new(ModelConfig::default(), 3).unwrap();
    let (_, grads) = model.loss_and_grads(&input, &targets, Some(11)).unwrap();
    assert_eq!(grads.len(), model.params().len());
    let dead: Vec<&str> = grads
        .iter()
        .enumerate()
        .filter(|(_, g)| g.iter().all(|v| *v == 0.0))
        .map(|(i, _)| model.params().name(i))
        .collect();
    assert!(
        dead.len() as f64 <= 0.01 * grads.len() as f64,
        "no gradient reaches {dead:?}"
    );
}

#[test]
fn zero_model_loss_is_mean_target() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 4);
    let utts = c.load_all().unwrap();
    let batch: Vec<&Utterance> = utts.iter().collect();
    let (input, targets) = make_batch(&batch);
    let mut model = VisoTts::<f32>::new(narrow(), 1).unwrap();
    for t in model.params_mut().tensors_mut() {
        t.fill(0.0);
    }
    let loss = model.loss(&input, &targets, None).unwrap() as f64;
    let mean = targets.iter().map(|&v| v as f64).sum::<f64>() / targets.len() as f64;
    assert!(loss <= 1.0);
    assert!((loss - mean).abs() < 1e-5, "loss {loss}, mean target {mean}");
}

#[test]
fn batches_cover_each_epoch_once() {
    for step in [1u64, 9, 17] {
        let mut seen: Vec<usize> = (step..step + 8).flat_map(|s| batch_indices(30, 4, 5, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }
    assert_eq!(batch_indices(30, 4, 5, 8).len(), 2);
    assert_ne!(batch_indices(30, 4, 5, 1), batch_indices(30, 4, 5, 9));
    assert_eq!(batch_indices(30, 4, 5, 3), batch_indices(30, 4, 5, 3));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 8);
    let a = train_loop(&quick(5), &narrow(), &c, dir.path().join("a"), None).unwrap();
    let b = train_loop(&quick(5), &narrow(), &c, dir.path().join("b"), None).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(fs::read(a.loss_log).unwrap(), fs::read(b.loss_log).unwrap());
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn loss_log_has_one_row_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 8);
    let out = train_loop(&quick(7), &narrow(), &c, dir.path().join("run"), None).unwrap();
    assert_eq!(out.trace.len(), 7);
    let text = fs::read_to_string(&out.loss_log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,loss"));
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![2, 4, 6]);
    for step in [3, 6] {
        assert!(checkpoint_dir(&dir.path().join("run"), step).is_dir());
    }
    assert!(!checkpoint_dir(&dir.path().join("run"), 7).exists());
    assert!(out.final_checkpoint.is_dir());
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 8);
    let full = train_loop(&quick(6), &narrow(), &c, dir.path().join("full"), None).unwrap();

    let part_dir = dir.path().join("part");
    train_loop(&quick(6), &narrow(), &c, &part_dir, None).unwrap();
    let ck = Checkpoint::load(checkpoint_dir(&part_dir, 3)).unwrap();
    let resumed = train_loop(&quick(6), &narrow(), &c, &part_dir, Some(&ck)).unwrap();

    assert_eq!(resumed.trace, full.trace[3..]);
    assert_eq!(resumed.model.params(), full.model.params());
    assert_eq!(
        fs::read(part_dir.join(LOSS_LOG)).unwrap(),
        fs::read(full.loss_log).unwrap()
    );
}

#[test]
fn resume_past_max_steps_does_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 4);
    let run = dir.path().join("run");
    train_loop(&quick(3), &narrow(), &c, &run, None).unwrap();
    let ck = Checkpoint::load(checkpoint_dir(&run, 3)).unwrap();
    let again = train_loop(&quick(3), &narrow(), &c, &run, Some(&ck)).unwrap();
    assert!(again.trace.is_empty());
}

#[test]
fn incompatible_corpus_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 4);
    let wrong = ModelConfig {
        vocab_size: 12,
        ..narrow()
    };
    let out = dir.path().join("run");
    let err = train_loop(&quick(3), &wrong, &c, &out, None).unwrap_err();
    assert!(matches!(err, Error::CorpusMismatch(_)), "{err}");
    assert!(!out.exists());
}

#[test]
fn invalid_train_config_is_rejected() {
    let model = VisoTts::<f32>::new(narrow(), 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(matches!(Trainer::new(model, cfg), Err(Error::TrainConfig(_))));
}

#[test]
fn one_utterance_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 1);
    let cfg = TrainConfig {
        batch_size: 1,
        max_steps: 2000,
        log_every: 100,
        checkpoint_every: 10_000,
        base_scale: 0.25,
        ..Default::default()
    };
    let out = train_loop(&cfg, &ModelConfig::default(), &c, dir.path().join("run"), None).unwrap();
    let first = out.trace[0].loss;
    let utts = c.load_all().unwrap();
    let (input, targets) = make_batch(&[&utts[0]]);
    let last = out.model.loss(&input, &targets, None).unwrap();
    assert!(last < 0.05, "loss {first} -> {last}");
}
