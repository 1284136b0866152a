//! Subcommands. Exit codes: 0 success, 1 failed check or runtime error,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use vit_adapter_core::analysis::{gray_map, spectrum_profile, DEFAULT_BINS};
use vit_adapter_core::config::{
    reference_params, ModelConfig, ADAPTER_TOLERANCE, BACKBONE_TOLERANCE, PRESET_NAMES,
};
use vit_adapter_core::model::{AdapterModel, PlainVitModel, PYRAMID_STRIDES};
use vit_adapter_core::nn::{component_rng, Ctx};
use vit_adapter_core::toy::{train, ModelKind, SampleStream, TrainConfig};
use vit_adapter_core::verify::gradient_suite;
use vit_adapter_core::{Real, Tape, Tensor};

use crate::image::{read_ppm, write_pgm};
use crate::prefetch::Prefetcher;
use crate::runconfig::{attention_name, mode_name, ConfigError, Precision, RunConfig};
use crate::weights::{encode, save_weights, Entry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) | CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl From<vit_adapter_core::Error> for CliError {
    fn from(e: vit_adapter_core::Error) -> Self {
        use vit_adapter_core::Error as E;
        match e {
            E::Usage(_) | E::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Model(m) => m.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Failure(e.to_string())
            }
        }
    )*};
}
failure_from!(
    std::io::Error,
    crate::weights::WeightsError,
    crate::image::ImageError
);

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(
    name = "vit-adapter",
    version,
    about = "ViT-Adapter reference implementation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; flags override the `--config` file.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Interaction ablation.
    #[arg(long, value_parser = ["attention", "add", "none"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["deformable", "global"])]
    attention: Option<String>,
    /// Number of interaction blocks N.
    #[arg(long)]
    interactions: Option<usize>,
    #[arg(long)]
    window_size: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let pairs = [
            ("preset", self.preset.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("precision", self.precision.clone()),
            ("mode", self.mode.clone()),
            ("attention", self.attention.clone()),
            ("interactions", self.interactions.map(|n| n.to_string())),
            ("window_size", self.window_size.map(|n| n.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                run.set(k, &v)?;
            }
        }
        Ok(run)
    }
}

#[derive(Args, Debug)]
struct ImageArgs {
    /// Square side of the generated input when no image is given.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Binary PPM (P6) input image.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the model on an image and report the pyramid shapes.
    Forward {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        image: ImageArgs,
        /// Write the pyramid maps (P4..P32) in the weights format.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Parameter audit against the reference model sizes.
    Params {
        #[command(flatten)]
        common: Common,
        /// Audit every reference preset.
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference verification of all gradients (f64).
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Radial log-amplitude spectrum of one feature level, as CSV.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Analyze the plain backbone (stride 16 only) instead of the adapter.
        #[arg(long)]
        plain: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Channel-mean map of the first image as PGM.
        #[arg(long)]
        gray: Option<PathBuf>,
    },
    /// Train on the synthetic segmentation task.
    ToyTrain {
        #[command(flatten)]
        common: Common,
        /// plain-vit, adapter-none, adapter-add or vit-adapter.
        #[arg(long, default_value = "vit-adapter")]
        model: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        #[arg(long, default_value_t = 32)]
        eval_samples: usize,
        /// CSV log destination; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Save the trained weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write freshly initialized weights.
    ExportWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Describe {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Forward {
            common,
            image,
            features,
        } => {
            let run = common.resolve()?;
            match run.precision() {
                Precision::F32 => forward::<f32>(&run, &image, features.as_deref(), out),
                Precision::F64 => forward::<f64>(&run, &image, features.as_deref(), out),
            }
        }
        Command::Params { common, all } => {
            let run = common.resolve()?;
            let presets: Vec<String> = if all {
                PRESET_NAMES
                    .iter()
                    .filter(|p| **p != "micro")
                    .map(|p| p.to_string())
                    .collect()
            } else {
                vec![run.preset.clone()]
            };
            params(&run, &presets, out)
        }
        Command::Gradcheck { common } => {
            let run = common.resolve()?;
            if run.precision == Some(Precision::F32) {
                return Err(CliError::Usage("gradcheck runs in f64 only".into()));
            }
            gradcheck(&run, out)
        }
        Command::Spectrum {
            common,
            image,
            stride,
            bins,
            plain,
            out: path,
            gray,
        } => {
            let run = common.resolve()?;
            spectrum(
                &run,
                &image,
                stride,
                bins,
                plain,
                path.as_deref(),
                gray.as_deref(),
                out,
            )
        }
        Command::ToyTrain {
            common,
            model,
            steps,
            batch,
            log_every,
            eval_samples,
            log,
            weights,
        } => {
            let run = common.resolve()?;
            let kind = ModelKind::parse(&model)?;
            let tc = TrainConfig {
                steps,
                batch,
                log_every,
                eval_samples,
                seed: run.seed,
                ..Default::default()
            };
            match run.precision() {
                Precision::F32 => toy_train::<f32>(
                    &run,
                    kind,
                    &tc,
                    log.as_deref(),
                    weights.as_deref(),
                    out,
                    err,
                ),
                Precision::F64 => toy_train::<f64>(
                    &run,
                    kind,
                    &tc,
                    log.as_deref(),
                    weights.as_deref(),
                    out,
                    err,
                ),
            }
        }
        Command::ExportWeights { common, out: path } => {
            let run = common.resolve()?;
            let path = path
                .or_else(|| run.output.clone())
                .ok_or_else(|| CliError::Usage("--out is required".into()))?;
            let cfg = run.model_config()?;
            let n = match run.precision() {
                Precision::F32 => export::<f32>(&cfg, run.seed, &path)?,
                Precision::F64 => export::<f64>(&cfg, run.seed, &path)?,
            };
            writeln!(out, "wrote {n} tensors to {}", path.display())?;
            Ok(())
        }
        Command::Describe { common } => {
            let run = common.resolve()?;
            let cfg = run.model_config()?;
            write!(out, "{}", run.to_text())?;
            write!(out, "{}", describe_model(&cfg))?;
            Ok(())
        }
    }
}

fn input_image<T: Real>(run: &RunConfig, image: &ImageArgs) -> Result<Tensor<T>> {
    match image.input.as_ref().or(run.input.as_ref()) {
        Some(p) => Ok(read_ppm(p)?),
        None => {
            let s = image.size;
            let mut rng = component_rng(run.seed, "input-image");
            Ok(Tensor::from_fn(&[1, 3, s, s], |_| T::lit(rng.gen::<f64>())))
        }
    }
}

fn forward<T: Real>(
    run: &RunConfig,
    image: &ImageArgs,
    features: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = run.model_config()?;
    let img = input_image::<T>(run, image)?;
    let model = AdapterModel::<T>::new(&cfg, run.seed)?;
    let p = model.forward(&Tape::inference(), &img)?;
    writeln!(out, "{}", p.describe())?;
    if let Some(path) = features.or(run.output.as_deref()) {
        let entries: Vec<Entry> = PYRAMID_STRIDES
            .iter()
            .zip(&p.maps)
            .map(|(s, m)| Entry::from_tensor(&format!("P{s}"), m))
            .collect();
        std::fs::write(path, encode(&entries)?)?;
        writeln!(out, "features written to {}", path.display())?;
    }
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn params(run: &RunConfig, presets: &[String], out: &mut dyn Write) -> Result<()> {
    let mut failed = Vec::new();
    for name in presets {
        let mut r = run.clone();
        r.preset = name.clone();
        let cfg = r.model_config()?;
        let c = AdapterModel::<f32>::new(&cfg, run.seed)?.count_parameters();
        writeln!(
            out,
            "{name}: layers {} width {} ffn {} heads {} N {}, adapter ffn {} heads {}",
            cfg.layers,
            cfg.embed_dim,
            cfg.ffn_dim,
            cfg.heads,
            cfg.interactions,
            cfg.adapter_ffn,
            cfg.adapter_heads
        )?;
        match reference_params(&cfg.name) {
            Some((bb, ad)) => {
                for (what, n, reference, tol) in [
                    ("backbone", c.backbone, bb, BACKBONE_TOLERANCE),
                    ("adapter", c.adapter, ad, ADAPTER_TOLERANCE),
                ] {
                    let dev = n as f64 / (reference * 1e6) - 1.0;
                    let ok = dev.abs() <= tol;
                    if !ok {
                        failed.push(format!("{name} {what}"));
                    }
                    writeln!(
                        out,
                        "  {what:<8} {n:>11} ({}), paper: {reference}M, deviation {:+.1}%, tolerance {:.0}%: {}",
                        millions(n),
                        100.0 * dev,
                        100.0 * tol,
                        if ok { "pass" } else { "FAIL" }
                    )?;
                }
            }
            None => {
                writeln!(
                    out,
                    "  backbone {:>11} ({})",
                    c.backbone,
                    millions(c.backbone)
                )?;
                writeln!(
                    out,
                    "  adapter  {:>11} ({})",
                    c.adapter,
                    millions(c.adapter)
                )?;
            }
        }
        writeln!(out, "  total    {:>11} ({})", c.total, millions(c.total))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "parameter audit failed: {}",
            failed.join(", ")
        )))
    }
}

fn gradcheck(run: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let cfg = run.model_config()?;
    let cases = gradient_suite(&cfg, run.seed)?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.passed();
        failed += usize::from(!ok);
        writeln!(
            out,
            "{:<40} {:>5} entries  max rel err {:.2e}  (< {:.0e})  {}",
            c.name,
            c.entries,
            c.max_rel_err,
            c.tolerance,
            if ok { "pass" } else { "FAIL" }
        )?;
    }
    writeln!(
        out,
        "{} of {} checks passed",
        cases.len() - failed,
        cases.len()
    )?;
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Check(format!("{failed} gradient checks failed")))
    }
}

#[allow(clippy::too_many_arguments)]
fn spectrum(
    run: &RunConfig,
    image: &ImageArgs,
    stride: usize,
    bins: usize,
    plain: bool,
    path: Option<&Path>,
    gray: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    if bins == 0 {
        return Err(CliError::Usage("--bins must be positive".into()));
    }
    let cfg = run.model_config()?;
    let img = input_image::<f64>(run, image)?;
    let tape = Tape::inference();
    let features = if plain {
        if stride != 16 {
            return Err(CliError::Usage(
                "the plain backbone only has stride 16".into(),
            ));
        }
        let m = PlainVitModel::<f64>::new(&cfg, run.seed)?;
        m.net.forward_map(&Ctx::new(&tape, &m.params), &img)?
    } else {
        let p = AdapterModel::<f64>::new(&cfg, run.seed)?.forward(&tape, &img)?;
        p.stride(stride)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("stride must be one of {PYRAMID_STRIDES:?}")))?
    };
    let csv = spectrum_profile(&features, bins)?.to_csv();
    match path.or(run.output.as_deref()) {
        Some(p) => std::fs::write(p, &csv)?,
        None => write!(out, "{csv}")?,
    }
    if let Some(g) = gray {
        let (h, w, px) = gray_map(&features, 0)?;
        write_pgm(g, w, h, &px)?;
    }
    Ok(())
}

fn toy_train<T: Real>(
    run: &RunConfig,
    kind: ModelKind,
    tc: &TrainConfig,
    log: Option<&Path>,
    weights: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    if tc.steps == 0 || tc.batch == 0 {
        return Err(CliError::Usage(
            "--steps and --batch must be positive".into(),
        ));
    }
    let cfg = run.model_config()?;
    let source = Prefetcher::spawn(
        SampleStream {
            seed: tc.seed,
            batch: tc.batch,
            next_index: 0,
        },
        4,
    );
    let (result, _, params) = train::<T, _>(&cfg, kind, tc, source, |row| {
        let _ = writeln!(
            err,
            "step {:>5}  loss {:.4}  miou {:.4}",
            row.step, row.loss, row.miou
        );
    })?;
    let csv = result.to_csv();
    match log.or(run.output.as_deref()) {
        Some(p) => {
            std::fs::write(p, &csv)?;
            writeln!(out, "final_miou={:.6}", result.final_miou)?;
        }
        None => write!(out, "{csv}")?,
    }
    if let Some(w) = weights {
        save_weights(&params, w)?;
    }
    Ok(())
}

fn export<T: Real>(cfg: &ModelConfig, seed: u64, path: &Path) -> Result<usize> {
    let m = AdapterModel::<T>::new(cfg, seed)?;
    save_weights(&m.params, path)?;
    Ok(m.params.len())
}

pub fn describe_model(cfg: &ModelConfig) -> String {
    // Commented out, so the whole output still parses as a run config.
    let mut s = String::from("# resolved model\n");
    let mut kv = |k: &str, v: String| s.push_str(&format!("# {k} = {v}\n"));
    kv("name", cfg.name.clone());
    kv("layers", cfg.layers.to_string());
    kv("embed_dim", cfg.embed_dim.to_string());
    kv("ffn_dim", cfg.ffn_dim.to_string());
    kv("heads", cfg.heads.to_string());
    kv("patch_size", cfg.patch_size.to_string());
    kv("pos_grid", format!("{}x{}", cfg.pos_grid.0, cfg.pos_grid.1));
    kv("window_size", cfg.window_size.to_string());
    kv("global_interval", cfg.global_interval.to_string());
    kv("interactions", cfg.interactions.to_string());
    kv("adapter_ffn", cfg.adapter_ffn.to_string());
    kv("adapter_heads", cfg.adapter_heads.to_string());
    kv("points", cfg.points.to_string());
    kv("value_dim", cfg.value_dim().to_string());
    kv("attention", attention_name(cfg.attention).into());
    kv("mode", mode_name(cfg.mode).into());
    kv("extractor_stack", cfg.extractor_stack.to_string());
    kv(
        "spm_channels",
        format!("{} {:?}", cfg.spm.stem_channels, cfg.spm.level_channels),
    );
    s
}
