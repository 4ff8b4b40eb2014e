use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use gmvc::conversion::{convert, morph_series, reconstruct, write_conversion, ConversionRequest, Strategy};
use gmvc::evaluation::{
    full_report, spectrogram_grid, write_pgm, Classifiers, EvalAttribute, EvalClassifier, EvalConfig, EvalModel,
};
use gmvc::features::{
    compute_mel, concat_chunks, generate_synthetic_corpus, load_recordings, load_wav, write_mel, ChunkedRecording,
    Manifest, ManifestEntry, MelConfig, Split, SynthConfig, SAMPLE_RATE,
};
use gmvc::gmvae::{Attribute, Gmvae};
use gmvc::nn::checkpoint::write_atomic;
use gmvc::nn::{Checkpoint, GradcheckOptions, ParamStore};
use gmvc::objective::gradcheck_objective;
use gmvc::training::{load_run, TrainConfig, Trainer, Variant, CHECKPOINT_FILE};
use gmvc::{Error, Result};

const GRADCHECK_LIMIT: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "gmvc", version, about = "Singer and vocal technique conversion with a Gaussian-mixture VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and cache log-mel spectrograms for a manifest of WAV files.
    Prepare(PrepareArgs),
    /// Write a deterministic synthetic corpus of cached spectrograms.
    Synth(SynthArgs),
    /// Train a conversion model on the train split of a cached manifest.
    Train(TrainArgs),
    /// Train the singer, technique and vowel evaluation classifiers.
    TrainEval(TrainEvalArgs),
    /// Convert one recording to a target singer or technique.
    Convert(ConvertArgs),
    /// Interpolate a conversion in equal steps of the conversion vector.
    Morph(MorphArgs),
    /// Classify reconstructions and conversions of the test split.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory that receives all outputs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// CSV manifest whose paths point at WAV files.
    #[arg(long)]
    manifest: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    singers: usize,
    #[arg(long, default_value_t = 3)]
    techniques: usize,
    #[arg(long, default_value_t = 2)]
    vowels: usize,
    /// Recordings per (singer, technique, vowel) combination.
    #[arg(long, default_value_t = 4)]
    per_class: usize,
    /// Recordings per combination assigned to the test split.
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV manifest of cached spectrograms.
    #[arg(long)]
    manifest: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    k_singers: Option<usize>,
    #[arg(long)]
    k_techniques: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    use_attention: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    fen_hidden: Option<usize>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Preset {
    /// Full-width network, batch 128.
    Full,
    /// Narrow network, batch 8.
    Desk,
}

#[derive(Args)]
struct TrainEvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SourceArgs {
    /// Trained model directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// CSV manifest of cached spectrograms.
    #[arg(long)]
    manifest: PathBuf,
    /// Recording id to convert.
    #[arg(long)]
    id: String,
    #[arg(long)]
    attribute: Attribute,
    /// Target class index.
    #[arg(long)]
    target: usize,
    #[arg(long, default_value_t = Strategy::CChunk)]
    strategy: Strategy,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: SourceArgs,
    /// Fraction of the conversion vector to apply.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

#[derive(Args)]
struct MorphArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: SourceArgs,
    /// Number of interpolation points including both ends.
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Model directories; repeat for several variants.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Directory written by `train-eval`.
    #[arg(long)]
    classifiers: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config of `key = value` lines; the variant selects the objective.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Chunks per recording.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Coordinates sampled per parameter tensor (0 checks all).
    #[arg(long, default_value_t = 32)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli.command)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("gmvc: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::InvalidInput("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, which never happens here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::TrainEval(a) => train_eval(a),
        Command::Convert(a) => convert_cmd(a),
        Command::Morph(a) => morph(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => return gradcheck_cmd(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn prepare(a: PrepareArgs) -> Result<()> {
    set_jobs(a.jobs)?;
    let manifest = Manifest::load(&a.manifest)?;
    let out = &a.common.out_dir;
    fs::create_dir_all(out.join("mels"))?;
    let cfg = MelConfig::default();
    let entries = manifest
        .entries
        .par_iter()
        .map(|e| {
            let wav = load_wav(&manifest.resolve(e), SAMPLE_RATE)?;
            let mel = compute_mel(&wav, &cfg)?;
            let path = PathBuf::from(format!("mels/{}.mel", e.id));
            write_mel(&out.join(&path), &mel)?;
            Ok(ManifestEntry { path, ..e.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(entries, out.clone())?.write(&out.join("manifest.csv"))?;
    println!("cached {} recordings under {}", manifest.len(), out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.common.seed, a.singers, a.techniques, a.vowels, a.per_class);
    if let Some(t) = a.test_per_class {
        cfg.test_per_class = t;
    }
    let corpus = generate_synthetic_corpus(&cfg)?;
    let path = corpus.write(&a.common.out_dir)?;
    println!("wrote {} recordings, manifest {}", corpus.mels.len(), path.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
        v.apply(&mut cfg.model);
    }
    let m = &mut cfg.model;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag { $field = v; })*
        };
    }
    set!(
        batch_size => cfg.batch_size,
        lr => cfg.lr,
        max_steps => cfg.max_steps,
        seed => cfg.seed,
        checkpoint_every => cfg.checkpoint_every,
        latent_dim => m.latent_dim,
        k_singers => m.k_singers,
        k_techniques => m.k_techniques,
        beta => m.beta,
        gamma => m.gamma,
        use_attention => m.use_attention,
        filters => m.filters,
        fen_hidden => m.fen_hidden,
        bottleneck => m.bottleneck,
        lstm_hidden => m.lstm_hidden,
    );
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let manifest = Manifest::load(&a.manifest)?.split(Split::Train);
    let data = load_recordings(&manifest)?;
    let mut trainer = Trainer::new(cfg, data)?;
    let ck_path = trainer.cfg.out_dir.join(CHECKPOINT_FILE);
    if a.resume && ck_path.exists() {
        trainer.restore(&Checkpoint::load(&ck_path)?)?;
        println!("resuming at step {}", trainer.step());
    }
    let every = (trainer.cfg.max_steps / 20).max(1);
    trainer.run(|s, b| {
        if s % every == 0 {
            println!(
                "step {s:>6}  total {:.3}  recon {:.3}  kld {:.3}/{:.3}  ce {:.4}/{:.4}",
                b.total, b.recon, b.kld_s, b.kld_t, b.ce_s, b.ce_t
            );
        }
    })?;
    println!("checkpoint {}", trainer.checkpoint_path().display());
    Ok(())
}

fn split_recordings(manifest: &Manifest, split: Split) -> Result<Vec<ChunkedRecording>> {
    load_recordings(&manifest.split(split))
}

fn train_eval(a: TrainEvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let train = split_recordings(&manifest, Split::Train)?;
    let holdout = split_recordings(&manifest, Split::Test)?;
    let mut cfg = match a.preset {
        Preset::Full => EvalConfig::default(),
        Preset::Desk => EvalConfig::desk(),
    };
    cfg.seed = a.common.seed;
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.max_steps = a.max_steps.unwrap_or(cfg.max_steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    let counts = manifest.observed_counts();
    let out = &a.common.out_dir;
    fs::create_dir_all(out)?;
    for attr in EvalAttribute::ALL {
        let classes = match attr {
            EvalAttribute::Singer => counts.singers,
            EvalAttribute::Technique => counts.techniques,
            EvalAttribute::Vowel => counts.vowels,
        };
        let (clf, summary) = EvalClassifier::train(attr, classes, cfg.clone(), &train, &holdout)?;
        clf.save(out)?;
        match summary.holdout_accuracy {
            Some(acc) => println!("{:<9} loss {:.4}  holdout {acc:.2}%", attr.name(), summary.final_loss),
            None => println!("{:<9} loss {:.4}", attr.name(), summary.final_loss),
        }
    }
    Ok(())
}

struct Source {
    model: Gmvae,
    store: ParamStore<f32>,
    rec: ChunkedRecording,
}

fn load_source(s: &SourceArgs) -> Result<Source> {
    let (_, model, store) = load_run(&s.run)?;
    let manifest = Manifest::load(&s.manifest)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.id == s.id)
        .ok_or_else(|| Error::InvalidInput(format!("no recording `{}` in {}", s.id, s.manifest.display())))?;
    let one = Manifest::new(vec![entry.clone()], manifest.base_dir.clone())?;
    let rec = load_recordings(&one)?.remove(0);
    Ok(Source { model, store, rec })
}

fn stem(s: &SourceArgs) -> String {
    format!("{}_{}{}_{}", s.id, s.attribute.name(), s.target, s.strategy)
}

fn convert_cmd(a: ConvertArgs) -> Result<()> {
    let src = load_source(&a.source)?;
    let req = ConversionRequest::new(a.source.attribute, a.source.target, a.source.strategy).with_lambda(a.lambda);
    let fwd = src.model.full_forward(&src.store, &src.rec.chunks)?;
    let conv = convert(&src.model, &src.store, &fwd, &req)?;
    let out = &a.common.out_dir;
    fs::create_dir_all(out)?;
    let stem = stem(&a.source);
    write_conversion(out, &stem, &src.rec.meta.id, &conv)?;
    println!("wrote {}", out.join(format!("{stem}.mel")).display());
    Ok(())
}

fn morph(a: MorphArgs) -> Result<()> {
    let src = load_source(&a.source)?;
    let req = ConversionRequest::new(a.source.attribute, a.source.target, a.source.strategy);
    let fwd = src.model.full_forward(&src.store, &src.rec.chunks)?;
    let series = morph_series(&src.model, &src.store, &fwd, &req, a.steps)?;
    let out = &a.common.out_dir;
    fs::create_dir_all(out)?;
    let stem = stem(&a.source);
    let mut panels = vec![concat_chunks(&reconstruct(&src.model, &src.store, &fwd)?)];
    for (i, conv) in series.iter().enumerate() {
        write_conversion(out, &format!("{stem}_{i:02}"), &src.rec.meta.id, conv)?;
        panels.push(concat_chunks(&conv.refined));
    }
    let (w, h, px) = spectrogram_grid(&[panels])?;
    write_pgm(&out.join(format!("{stem}.pgm")), w, h, &px)?;
    println!("wrote {} steps and {}", series.len(), out.join(format!("{stem}.pgm")).display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    set_jobs(a.jobs)?;
    let manifest = Manifest::load(&a.manifest)?;
    let test = split_recordings(&manifest, Split::Test)?;
    let classifiers = Classifiers::load(&a.classifiers)?;
    let runs = a.runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = runs.iter().map(|(c, _, _)| c.variant.to_string()).collect();
    let models: Vec<EvalModel<'_>> = runs
        .iter()
        .zip(&names)
        .map(|((_, model, store), name)| EvalModel {
            variant: name,
            model,
            store,
        })
        .collect();
    let report = full_report(&models, &classifiers, &test)?;
    let out = &a.common.out_dir;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    let text = report.to_text();
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = TrainConfig::load(&a.config)?;
    let opts = GradcheckOptions {
        eps: a.eps,
        max_coords_per_param: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck_objective(&cfg.model, a.batch, a.steps, &opts)?;
    print!("{}", report.render());
    let err = report.max_rel_error();
    println!("variant {}  max relative error {err:.3e}", cfg.variant);
    if err < GRADCHECK_LIMIT {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gmvc: gradient check failed, {err:.3e} >= {GRADCHECK_LIMIT:e}");
        Ok(ExitCode::from(1))
    }
}
