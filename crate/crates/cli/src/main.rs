mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{Map, Value};

use config::{flag_value, parse_config, ConfigError, RunConfig, SEED_ENV};
use visotts::dsp::io::{read_matrix, write_mel, write_wav};
use visotts::dsp::GriffinLim;
use visotts::eval::{alignment_diagnostics, evaluate_checkpoint, write_alignment_csv, write_alignment_png};
use visotts::model::Checkpoint;
use visotts::synthcorpus::{generate_corpus, Corpus, SpeakerEmbedding, VisualFeatureSequence, SPEAKER_DIM, VISUAL_DIM};
use visotts::text::{G2p, PhonemeSequence, PhonemeVocabulary};
use visotts::training::train_loop;

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<visotts::Error> for Failure {
    fn from(e: visotts::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn cli() -> Command {
    let mut cmd = Command::new("visotts")
        .about("Visually-conditioned text-to-speech on a synthetic corpus")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Flat JSON run configuration"),
        );
    for key in RunConfig::keys() {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key.replace('_', "-"))
                .global(true)
                .value_name("VALUE")
                .help_heading("Config overrides")
                .help(format!("Override `{key}`")),
        );
    }
    cmd.subcommand(Command::new("gen-data").about("Generate a synthetic corpus under --out"))
        .subcommand(
            Command::new("train").about("Train on --corpus, writing checkpoints and loss.csv under --out").arg(
                Arg::new("resume")
                    .long("resume")
                    .value_name("DIR")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Continue from a training checkpoint"),
            ),
        )
        .subcommand(
            Command::new("synth")
                .about("Synthesize a mel spectrogram and WAV from text, visual features and a speaker")
                .arg(Arg::new("text").long("text").help("Orthographic text, converted by the bundled dictionary"))
                .arg(Arg::new("phonemes").long("phonemes").help("Space-separated phoneme symbols"))
                .arg(
                    Arg::new("visual")
                        .long("visual")
                        .required(true)
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("T x 512 float32 matrix file"),
                )
                .arg(Arg::new("speaker").long("speaker").help("Speaker id, looked up in --corpus"))
                .arg(
                    Arg::new("speaker-file")
                        .long("speaker-file")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Raw 256 x float32 speaker embedding"),
                )
                .group(clap::ArgGroup::new("input").args(["text", "phonemes"]).required(true))
                .group(clap::ArgGroup::new("voice").args(["speaker", "speaker-file"]).required(true)),
        )
        .subcommand(Command::new("eval").about("Score --checkpoint on --corpus into report.csv and summary.json"))
        .subcommand(
            Command::new("inspect-attn")
                .about("Export alignment matrices as CSV and PNG")
                .arg(
                    Arg::new("utt")
                        .long("utt")
                        .action(ArgAction::Append)
                        .help("Utterance id (repeatable, default: the first)"),
                )
                .arg(
                    Arg::new("cell")
                        .long("cell")
                        .default_value("8")
                        .value_parser(clap::value_parser!(usize))
                        .help("Pixels per matrix cell"),
                ),
        )
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, Failure> {
    let mut flags = Map::new();
    for key in RunConfig::keys() {
        if let Some(raw) = m.get_one::<String>(&key) {
            let v: Value = flag_value(&key, raw)?;
            flags.insert(key, v);
        }
    }
    let env = std::env::var(SEED_ENV).ok();
    Ok(parse_config(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &flags, env.as_deref())?)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

fn gen_data(cfg: &RunConfig) -> Outcome {
    let out = need(&cfg.out, "out")?;
    let manifest = generate_corpus(&cfg.corpus, &PhonemeVocabulary::standard(), out)?;
    cfg.write(out)?;
    println!("wrote {} utterances to {}", manifest.utterances.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, m: &ArgMatches) -> Outcome {
    let corpus = Corpus::open(need(&cfg.corpus_dir, "corpus")?)?;
    let out = need(&cfg.out, "out")?;
    let resume = match m.get_one::<PathBuf>("resume") {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    cfg.write(out)?;
    let outcome = train_loop(&cfg.train, &cfg.model, &corpus, out, resume.as_ref())?;
    match outcome.trace.last() {
        Some(s) => println!("step {} loss {:.6}", s.step, s.loss),
        None => println!("nothing to do: already at step {}", cfg.train.max_steps),
    }
    println!("checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

fn speaker_for(cfg: &RunConfig, m: &ArgMatches) -> Result<SpeakerEmbedding, Failure> {
    if let Some(path) = m.get_one::<PathBuf>("speaker-file") {
        let bytes = fs::read(path)?;
        let v = visotts::dsp::io::decode_f32s(&bytes)
            .filter(|v| v.len() == SPEAKER_DIM)
            .ok_or_else(|| Failure::Runtime(format!("{} is not a {SPEAKER_DIM}-float embedding", path.display())))?;
        return Ok(SpeakerEmbedding::new(path.display().to_string(), v)?);
    }
    let id = m.get_one::<String>("speaker").expect("group requires one");
    let root = cfg
        .corpus_dir
        .as_deref()
        .ok_or_else(|| Failure::Usage("--speaker needs --corpus to look up the embedding".into()))?;
    Ok(Corpus::open(root)?.speaker(id)?.clone())
}

fn synth(cfg: &RunConfig, m: &ArgMatches) -> Outcome {
    let ck = Checkpoint::load(need(&cfg.checkpoint, "checkpoint")?)?;
    let out = need(&cfg.out, "out")?;
    let vocab = PhonemeVocabulary::from_symbols(ck.meta.vocabulary.clone())?;
    let phonemes: PhonemeSequence = match (m.get_one::<String>("text"), m.get_one::<String>("phonemes")) {
        (Some(text), _) => G2p::bundled().convert(text, &vocab)?,
        (None, Some(p)) => {
            let symbols: Vec<&str> = p.split_whitespace().collect();
            vocab.encode(&symbols)?
        }
        (None, None) => unreachable!("group requires one"),
    };
    let visual = VisualFeatureSequence::new(read_matrix(m.get_one::<PathBuf>("visual").unwrap(), Some(VISUAL_DIM))?)?;
    let speaker = speaker_for(cfg, m)?;
    let model = ck.model()?;
    let (mel, align) = model.infer(&phonemes, &visual, &speaker)?;
    let clip = GriffinLim::new(ck.meta.mel_normalization, cfg.griffin_lim_iters)?.reconstruct(&mel)?;
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    write_mel(out.join("mel.bin"), &mel)?;
    write_wav(out.join("synth.wav"), &clip)?;
    write_alignment_csv(out.join("alignment.csv"), &align)?;
    println!(
        "{} phonemes, {} video frames -> {} mel frames, {} samples",
        phonemes.len(),
        visual.n_frames(),
        mel.n_frames(),
        clip.len()
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Outcome {
    let ck = Checkpoint::load(need(&cfg.checkpoint, "checkpoint")?)?;
    let corpus = Corpus::open(need(&cfg.corpus_dir, "corpus")?)?;
    let out = need(&cfg.out, "out")?;
    let report = evaluate_checkpoint(&ck, &corpus, None, cfg.griffin_lim_iters)?;
    cfg.write(out)?;
    report.write(out)?;
    println!("{}", serde_json::to_string_pretty(&report.summary()).expect("serializable"));
    Ok(())
}

fn inspect(cfg: &RunConfig, m: &ArgMatches) -> Outcome {
    let ck = Checkpoint::load(need(&cfg.checkpoint, "checkpoint")?)?;
    let corpus = Corpus::open(need(&cfg.corpus_dir, "corpus")?)?;
    let out = need(&cfg.out, "out")?;
    let model = ck.model()?;
    let ids: Vec<String> = match m.get_many::<String>("utt") {
        Some(v) => v.cloned().collect(),
        None => corpus.ids().take(1).map(String::from).collect(),
    };
    let cell = *m.get_one::<usize>("cell").unwrap();
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    for id in ids {
        let utt = corpus.load_id(&id)?;
        let (_, align) = model.infer(&utt.phonemes, &utt.visual, &utt.speaker)?;
        write_alignment_csv(out.join(format!("{id}.csv")), &align)?;
        write_alignment_png(out.join(format!("{id}.png")), &align, cell)?;
        let r = alignment_diagnostics(&align, Some(&utt.oracle_alignment))?;
        println!(
            "{id}: diagonality {:.3} violations {} frame_acc {:.3}",
            r.diagonality,
            r.monotonicity_violations,
            r.frame_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn run(m: &ArgMatches) -> Outcome {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "gen-data" => gen_data(&cfg),
        "train" => train(&cfg, sub),
        "synth" => synth(&cfg, sub),
        "eval" => eval(&cfg),
        "inspect-attn" => inspect(&cfg, sub),
        other => Err(Failure::Usage(format!("unknown subcommand {other}"))),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
