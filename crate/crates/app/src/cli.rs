//! The `diffcolor` command line.
//!
//! Exit codes: 0 success, 2 invalid input or usage, 3 training diverged,
//! 4 incomplete or damaged edit session, 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffcolor::diffusion::toy::{ToyBackend, ToyModels};
use diffcolor::guidance::ToyGuidance;
use diffcolor::metrics::{run_report, ReportConfig, ToyFeatures};
use diffcolor::stage2::prompt::{parse_color_assignments, parse_object_list};
use diffcolor::stage2::{read_manifest, EditSession, Phase, PromptSet};
use diffcolor::{ColorImage, Error, GrayImage, PipelineConfig, Result};

use crate::backend::{load_models, BackendKind};
use crate::runs;

#[derive(Debug, Parser)]
#[command(name = "diffcolor", version, about = "Text-guided colorization with latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Colorize a grayscale image from a context prompt.
    Colorize(ColorizeArgs),
    /// Build or render a prompt-editable session.
    #[command(subcommand)]
    EditSession(EditSessionCommand),
    /// Score a folder of outputs against a folder of references.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ColorizeArgs {
    #[arg(long, value_name = "PATH")]
    pub gray: PathBuf,
    /// Context prompt describing the scene, e.g. "A dog sitting on a wooden bench."
    #[arg(long)]
    pub prompt: String,
    /// Negative prompts, one per line. Replaces the configured list.
    #[arg(long, value_name = "FILE")]
    pub negatives: Option<PathBuf>,
    /// TOML or JSON pipeline config. Without it the toy-sized preset is used.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `stage1.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `stage1.lambda`.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum EditSessionCommand {
    /// Optimize the embedding, fine-tune, and save a session directory.
    Build(BuildArgs),
    /// Render recolorings from a saved session without any training.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// The colorization to edit, usually `x_pri_aligned.png` from `colorize`.
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub gray: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Comma-separated object words as they appear in the prompt.
    #[arg(long)]
    pub objects: String,
    #[arg(long, value_name = "SESSION_DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Session id; defaults to the output directory name.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, value_name = "DIR")]
    pub session: PathBuf,
    /// Color assignments, e.g. "dog=brown,wooden bench=purple".
    #[arg(long, default_value = "")]
    pub colors: String,
    #[arg(long, default_value_t = 0.85)]
    pub eta: f64,
    /// Defaults to the session's reconstruction seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Render this many variants over the default η grid instead of one image.
    #[arg(long, value_name = "N")]
    pub variants: Option<usize>,
    /// Free text appended to the target prompt.
    #[arg(long, default_value = "")]
    pub suffix: String,
    /// Output directory; defaults to `<session>/renders`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub outputs: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub refs: PathBuf,
    /// JSON object mapping file names to prompts.
    #[arg(long, value_name = "FILE")]
    pub prompts: Option<PathBuf>,
    /// Where report.csv and report.md go; defaults to the outputs directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Row label in the summary table.
    #[arg(long, default_value = "outputs")]
    pub label: String,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

/// Process exit code for a pipeline error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => 3,
        Error::SessionIncomplete(_) | Error::ChecksumMismatch | Error::BadCheckpoint(_) => 4,
        Error::BackendFrozenViolation(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Colorize(a) => colorize(a),
        Command::EditSession(EditSessionCommand::Build(a)) => build(a),
        Command::EditSession(EditSessionCommand::Render(a)) => render(a),
        Command::Eval(a) => eval(a),
    }
}

/// The config file if given, otherwise the preset for the selected backend.
fn load_config(path: Option<&Path>, kind: &BackendKind) -> Result<PipelineConfig> {
    match (path, kind) {
        (Some(p), _) => PipelineConfig::load(p),
        (None, BackendKind::Toy) => Ok(PipelineConfig::toy_demo()),
        (None, BackendKind::Adapter(_)) => Ok(PipelineConfig::default()),
    }
}

fn read_negatives(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

fn models(kind: &BackendKind, config: &PipelineConfig) -> Result<ToyModels> {
    eprintln!("loading {kind:?} backend");
    load_models(kind, config)
}

fn colorize(a: ColorizeArgs) -> Result<()> {
    let kind = BackendKind::from_env();
    let mut config = load_config(a.config.as_deref(), &kind)?;
    if let Some(seed) = a.seed {
        config = config.with_seed(seed);
    }
    if let Some(steps) = a.steps {
        config.stage1.steps = steps;
    }
    if let Some(lambda) = a.lambda {
        config.stage1.lambda = lambda;
    }
    if let Some(path) = &a.negatives {
        config.negatives = read_negatives(path)?;
    }
    config.validate()?;
    if a.prompt.trim().is_empty() {
        return Err(Error::Config("--prompt is empty".into()));
    }
    let gray = GrayImage::load(&a.gray)?;
    let models = models(&kind, &config)?;
    let every = (config.stage1.steps / 10).max(1);
    let manifest = runs::colorize_to_dir(&gray, &a.prompt, &config, &models, &a.out, |e| {
        if e.step % every == 0 {
            eprintln!("step {:>5}  t {:>4}  ldm {:.5}  cst {:.5}", e.step, e.t, e.ldm, e.cst);
        }
    })?;
    println!(
        "text alignment {:.3} -> {:.3}; wrote {}",
        manifest.alignment_before,
        manifest.alignment_after,
        a.out.join(runs::ALIGNED).display()
    );
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let kind = BackendKind::from_env();
    let mut config = load_config(a.config.as_deref(), &kind)?;
    if let Some(seed) = a.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    let objects = parse_object_list(&a.objects);
    let prompts = PromptSet::from_objects(&a.prompt, &objects, config.stage2.prompt)?;
    let primary = ColorImage::load(&a.image)?;
    let gray = GrayImage::load(&a.gray)?;
    let id = a.id.clone().unwrap_or_else(|| {
        a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "session".into())
    });
    eprintln!("rewritten prompt: {}", prompts.rewritten);
    let models = models(&kind, &config)?;
    let every = (config.stage2.embed_steps.max(config.stage2.finetune_steps) / 5).max(1);
    let session = EditSession::build(
        &id,
        &primary,
        &gray,
        prompts,
        &models.backend,
        &models.guidance,
        &config.stage2,
        &config.align,
        |e| {
            if e.step % every == 0 {
                let phase = if e.phase == Phase::Embedding { "embedding" } else { "finetune" };
                eprintln!("{phase:>9} step {:>5}  loss {:.5}", e.step, e.loss);
            }
        },
    )?;
    session.save(&a.out)?;
    runs::write_file(&a.out.join(runs::EFFECTIVE_CONFIG), config.to_json()?.as_bytes())?;
    println!("session {id} saved to {}", a.out.display());
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let kind = BackendKind::from_env();
    if let BackendKind::Adapter(_) = kind {
        load_models(&kind, &PipelineConfig::default())?;
    }
    let manifest = read_manifest(&a.session)?;
    let config = load_config(a.config.as_deref(), &kind)?;
    let guidance = ToyGuidance::new(config.toy.guidance)?;
    let session = EditSession::<ToyBackend>::load(&a.session)?;
    let colors = parse_color_assignments(&a.colors)?;
    let out = a.out.clone().unwrap_or_else(|| a.session.join("renders"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let seed = a.seed.unwrap_or(manifest.config.reconstruction_seed);

    match a.variants {
        None => {
            let edit = session.edit_with_suffix(&guidance, &colors, &a.suffix, a.eta, seed)?;
            let path = out.join(format!("render_eta{:.3}_seed{seed}.png", a.eta));
            edit.image.save(&path)?;
            println!("{}\n{}", edit.target_prompt, path.display());
        }
        Some(count) => {
            let seeds: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
            let variants = session.generate_variants(&guidance, &colors, count, None, Some(&seeds))?;
            for (i, v) in variants.iter().enumerate() {
                let path = out.join(format!("variant{i:02}_eta{:.3}_seed{}.png", v.eta, v.seed));
                v.image.save(&path)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let config = load_config(a.config.as_deref(), &BackendKind::Toy)?;
    let guidance = ToyGuidance::new(config.toy.guidance)?;
    let features = ToyFeatures::new(guidance.clone());
    let report =
        run_report(&a.outputs, &a.refs, a.prompts.as_deref(), &ReportConfig::default(), &features, &guidance)?;
    let dir = a.out.clone().unwrap_or_else(|| a.outputs.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (csv, md) = report.write(&dir, &a.label)?;
    print!("{}", report.to_markdown(&a.label));
    eprintln!("wrote {} and {}", csv.display(), md.display());
    Ok(())
}
