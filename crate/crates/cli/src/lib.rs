//! The `saaf` command line. Results go to stdout, diagnostics to stderr.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 model error.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use saaf_core::data::{
    generate_dataset, read_image, read_manifest, write_mask, GenOptions, Split, Style, MANIFEST_FILE,
};
use saaf_core::pipeline::{
    evaluate_split, load_checkpoint, model_gradcheck, report_table, save_checkpoint, segment, train_on_manifest,
    Checkpoint, ModelPredictor, SegLocator, TrainConfig, DEFAULT_H,
};
use saaf_core::ModelConfig;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MODEL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "saaf", version, about = "Referring segmentation of building facades")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic facade dataset with a split manifest.
    GenData(GenDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Segment one image from a description.
    Segment(SegmentArgs),
    /// Check every trainable gradient against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Comma-separated styles, assigned round-robin.
    #[arg(long, default_value = "photo", value_delimiter = ',', value_parser = parse_style)]
    styles: Vec<Style>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; overrides `checkpoint_out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Locate `<SEG>` in the model's own greedy answer instead of the reference.
    #[arg(long)]
    free_decode: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write every predicted mask to this directory as `<id>.pgm`.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Description of the region, e.g. "glazed sections".
    #[arg(long)]
    text: String,
    /// Output PGM mask.
    #[arg(long)]
    out: PathBuf,
    /// Append `<SEG>` when the model does not produce one.
    #[arg(long)]
    force_seg: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_H)]
    h: f64,
}

fn parse_style(s: &str) -> Result<Style, String> {
    Style::parse(s).ok_or_else(|| format!("unknown style `{s}` (photo, line_drawing, noisy_photo)"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (train, val, test)"))
}

/// A failure of the model itself rather than of its inputs.
#[derive(Debug)]
struct ModelFailure(String);

impl std::fmt::Display for ModelFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ModelFailure {}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<saaf_core::Error>() {
            return if e.is_data_error() { EXIT_DATA } else { EXIT_MODEL };
        }
        if cause.is::<ModelFailure>() {
            return EXIT_MODEL;
        }
    }
    // Anything else is file or stream I/O done here.
    EXIT_DATA
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Segment(a) => segment_image(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let opts = GenOptions { count: a.count, seed: a.seed, size: a.size, styles: a.styles };
    let manifest = generate_dataset(&a.out, &opts)?;
    let (train, test, val) = manifest.counts();
    println!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    println!("train {train}, val {val}, test {test}");
    Ok(())
}

fn manifest_at(root: &Path) -> anyhow::Result<saaf_core::data::DatasetManifest> {
    Ok(read_manifest(&root.join(MANIFEST_FILE))?)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(o) = a.out {
        cfg.checkpoint_out = Some(o);
    }
    let Some(root) = cfg.data.clone() else {
        bail!(saaf_core::Error::Config("no dataset: pass --data or set `data`".into()))
    };
    let Some(out) = cfg.checkpoint_out.clone() else {
        bail!(saaf_core::Error::Config("no checkpoint path: pass --out or set `checkpoint_out`".into()))
    };
    let manifest = manifest_at(&root)?;
    eprintln!("training {} steps, effective batch {}, lr {:e}", cfg.max_steps, cfg.effective_batch(), cfg.lr);
    let every = cfg.log_every;
    let outcome = train_on_manifest(&cfg, &root, &manifest, |r| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!("step {:>6}  L_t {:.5}  L_m {:.5}  L {:.5}", r.step, r.text, r.mask, r.total);
        }
    })?;
    let ckpt = Checkpoint { bundle: outcome.bundle, rng: outcome.rng, step: outcome.steps };
    save_checkpoint(&out, &ckpt)?;
    let log_path = cfg.loss_log.clone().unwrap_or_else(|| out.with_extension("log"));
    std::fs::write(&log_path, saaf_core::pipeline::format_log(&outcome.log))
        .with_context(|| format!("writing {}", log_path.display()))?;

    let predictor =
        ModelPredictor { bundle: &ckpt.bundle, threshold: cfg.threshold, locator: SegLocator::TeacherForced };
    let report = evaluate_split(&predictor, &root, &manifest, Split::Train, None)?;
    let last = outcome.log.last().expect("at least one step");
    println!("checkpoint {}", out.display());
    println!("loss log {}", log_path.display());
    println!("final step {}  L_t {:.6}  L_m {:.6}  L {:.6}", last.step, last.text, last.mask, last.total);
    println!("training split:");
    print!("{}", report.table());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let manifest = manifest_at(&a.data)?;
    let locator = if a.free_decode { SegLocator::FreeDecode } else { SegLocator::TeacherForced };
    let predictor = ModelPredictor { bundle: &ckpt.bundle, threshold: a.threshold, locator };
    let report = evaluate_split(&predictor, &a.data, &manifest, a.split, a.dump.as_deref())?;
    print!("{}", report.table());
    Ok(())
}

fn segment_image(a: SegmentArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let image = read_image(&a.image)?;
    let out = segment(&ckpt.bundle, &image, &a.text, a.force_seg, a.threshold)?;
    write_mask(&a.out, &out.mask)?;
    if out.forced_seg {
        eprintln!("warning: the answer had no <SEG>; one was appended");
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", out.answer)?;
    writeln!(
        stdout,
        "mask {} ({}x{}, {} foreground pixels)",
        a.out.display(),
        out.mask.height,
        out.mask.width,
        out.mask.count_ones()
    )?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if !(a.tol > 0.0 && a.h > 0.0) {
        bail!(saaf_core::Error::Config("--tol and --h must be positive".into()));
    }
    let report = model_gradcheck(&ModelConfig::default(), a.seed, a.h, a.tol)?;
    print!("{}", report_table(&report));
    if !report.passed {
        bail!(ModelFailure(format!("max relative error {:.3e} exceeds {:.1e}", report.max_rel_error(), a.tol)));
    }
    Ok(())
}
