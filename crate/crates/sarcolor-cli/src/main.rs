//! Command-line workflow: synthesize full-pol scenes, train the
//! colorization model, reconstruct covariance images from a single
//! channel, evaluate reconstructions, and run target decompositions.
//!
//! Every command resolves its settings from built-in defaults, then an
//! optional `--config` key=value file, then explicit flags, and writes the
//! resolved settings next to its outputs so any run can be reproduced
//! byte-for-byte from its config log and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sarcolor::decomp;
use sarcolor::error::Error;
use sarcolor::evalmetrics;
use sarcolor::pipeline::{
    colorize, train, ExtractorConfig, ModelCheckpoint, Precision, TrainConfig, TranslatorConfig,
    DEFAULT_DB_FLOOR,
};
use sarcolor::polmath::Channel;
use sarcolor::quantizer::DecodeRule;
use sarcolor::raster::{export_png, Layout, PngMode, PolRaster};
use sarcolor::synthdata::{default_archetypes, render_scene, RegionModel, SceneSpec};

const EXIT_BAD_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sarcolor",
    about = "Full-pol SAR covariance reconstruction from single-pol intensity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic full-pol scene with speckle.
    Synth(SynthArgs),
    /// Train the colorization model on a synthesized scene directory.
    Train(TrainArgs),
    /// Reconstruct a covariance image from a single-channel intensity raster.
    Colorize(ColorizeArgs),
    /// Compare a reconstructed covariance raster against the truth.
    Eval(EvalArgs),
    /// Run a polarimetric decomposition on a covariance raster.
    Decomp(DecompArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ChannelArg {
    Hh,
    Hv,
    Vv,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Channel {
        match c {
            ChannelArg::Hh => Channel::Hh,
            ChannelArg::Hv => Channel::Hv,
            ChannelArg::Vv => Channel::Vv,
        }
    }
}

fn channel_name(c: Channel) -> &'static str {
    match c {
        Channel::Hh => "hh",
        Channel::Hv => "hv",
        Channel::Vv => "vv",
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecodeArg {
    Mode,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegionArg {
    Voronoi,
    Blobs,
    Stripes,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Pauli,
    Freeman,
    Halpha,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the scene files.
    #[arg(long)]
    out: PathBuf,
    /// Key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    region: Option<RegionArg>,
    /// Looks averaged per pixel.
    #[arg(long)]
    looks: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint and loss trace.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input intensity channel.
    #[arg(long)]
    channel: Option<ChannelArg>,
    /// Model scale preset.
    #[arg(long)]
    scale: Option<ScaleArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pixels per mini-batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Training tile side length.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    precision: Option<PrecisionArg>,
    /// Continue training from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ColorizeArgs {
    /// GRAY1 intensity raster.
    #[arg(long)]
    input: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channel: Option<ChannelArg>,
    /// How softmax outputs become continuous values.
    #[arg(long)]
    decode: Option<DecodeArg>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reconstructed COV9 raster.
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth COV9 raster.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint providing quantizer tables for the quantization-only
    /// error columns.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct DecompArgs {
    /// COV9 raster.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Colorize(args) => cmd_colorize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Decomp(args) => cmd_decomp(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ZeroPowerPixel
        | Error::UnrecoverablePower { .. }
        | Error::NotHermitian { .. }
        | Error::NegativeDiagonal { .. }
        | Error::InvalidDistribution(_)
        | Error::NotPositiveDefinite => EXIT_NUMERICAL,
        _ => EXIT_BAD_INPUT,
    }
}

// ---------------------------------------------------------------------------
// Config resolution and logging
// ---------------------------------------------------------------------------

/// Resolved settings of one run: an ordered key=value map that can be read
/// back as a `--config` file.
struct RunConfig {
    values: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
}

impl RunConfig {
    fn new(config: Option<&Path>) -> Result<Self, Error> {
        let file = match config {
            Some(path) => parse_kv_file(path)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            values: BTreeMap::new(),
            file,
        })
    }

    /// Resolve one setting: explicit flag, then config file, then default.
    fn resolve<T: std::fmt::Display + Clone>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
        parse: impl Fn(&str) -> Result<T, Error>,
    ) -> Result<T, Error> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => parse(raw)?,
                None => default,
            },
        };
        self.values.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn record(&mut self, key: &str, value: impl std::fmt::Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn write_log(&self, out_dir: &Path, command: &str) -> Result<(), Error> {
        let mut text = String::new();
        for (k, v) in &self.values {
            text.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(out_dir.join(format!("{command}.config.txt")), text)?;
        Ok(())
    }
}

fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("bad config line `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, Error>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| Error::InvalidConfig(format!("bad value `{s}`: {e}")))
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::new(args.config.as_deref())?;
    let width = cfg.resolve("width", args.width, 128, parse_num)?;
    let height = cfg.resolve("height", args.height, 128, parse_num)?;
    let seed = cfg.resolve("seed", args.seed, 0, parse_num)?;
    let looks = cfg.resolve("looks", args.looks, 9, parse_num)?;
    let region_name = cfg.resolve(
        "region",
        args.region.map(|r| {
            match r {
                RegionArg::Voronoi => "voronoi",
                RegionArg::Blobs => "blobs",
                RegionArg::Stripes => "stripes",
            }
            .to_string()
        }),
        "voronoi".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let region_model: RegionModel = region_name.parse()?;

    let classes = default_archetypes();
    for (i, c) in classes.iter().enumerate() {
        cfg.record(format!("class{i}").as_str(), &c.name);
    }

    let spec = SceneSpec {
        width,
        height,
        seed,
        region_model,
        classes,
        looks,
    };
    let scene = render_scene(&spec)?;

    ensure_dir(&args.out)?;
    let files = [
        ("covariance.pras", &scene.covariance),
        ("hh.pras", &scene.intensity_hh),
        ("hv.pras", &scene.intensity_hv),
        ("vv.pras", &scene.intensity_vv),
        ("class.pras", &scene.class_map),
    ];
    let mut manifest = String::new();
    for (name, raster) in files {
        raster.write(&args.out.join(name))?;
        manifest.push_str(&format!(
            "{name} layout={:?} width={} height={}\n",
            raster.layout, raster.width, raster.height
        ));
    }
    std::fs::write(args.out.join("manifest.txt"), manifest)?;
    cfg.write_log(&args.out, "synth")?;
    println!(
        "synth: wrote {}x{} scene ({} classes, {looks} looks) to {}",
        width,
        height,
        spec.classes.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::new(args.config.as_deref())?;
    let channel: Channel = cfg
        .resolve(
            "channel",
            args.channel.map(|c| channel_name(c.into()).to_string()),
            "vv".to_string(),
            |s| Ok(s.to_string()),
        )?
        .parse_channel()?;
    let scale = cfg.resolve(
        "scale",
        args.scale.map(|s| {
            match s {
                ScaleArg::Desk => "desk",
                ScaleArg::Paper => "paper",
            }
            .to_string()
        }),
        "desk".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let (extractor, translator) = match scale.as_str() {
        "desk" => (ExtractorConfig::desk(), TranslatorConfig::desk()),
        "paper" => (ExtractorConfig::paper(), TranslatorConfig::paper()),
        other => {
            return Err(Error::InvalidConfig(format!("unknown scale `{other}`")));
        }
    };
    let epochs = cfg.resolve("epochs", args.epochs, 10, parse_num)?;
    let batch = cfg.resolve("batch", args.batch, 2000, parse_num)?;
    let patch = cfg.resolve("patch", args.patch, 64, parse_num)?;
    let seed = cfg.resolve("seed", args.seed, 0, parse_num)?;
    let lr = cfg.resolve("lr", args.lr, 1e-4, parse_num)?;
    let precision_name = cfg.resolve(
        "precision",
        args.precision.map(|p| {
            match p {
                PrecisionArg::Single => "single",
                PrecisionArg::Double => "double",
            }
            .to_string()
        }),
        "double".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let precision = match precision_name.as_str() {
        "single" => Precision::Single,
        "double" => Precision::Double,
        other => {
            return Err(Error::InvalidConfig(format!("unknown precision `{other}`")));
        }
    };

    let intensity = PolRaster::read(&args.data.join(format!("{}.pras", channel_name(channel))))?;
    let truth = PolRaster::read(&args.data.join("covariance.pras"))?;
    let resume = match &args.resume {
        Some(path) => {
            cfg.record("resume", path.display());
            Some(ModelCheckpoint::load(path)?)
        }
        None => None,
    };

    let train_config = TrainConfig {
        batch_pixels: batch,
        patch,
        epochs,
        seed,
        precision,
        learning_rate: lr,
        db_floor: DEFAULT_DB_FLOOR,
    };
    cfg.record("db_floor", format!("{DEFAULT_DB_FLOOR:?}"));

    let pairs = [(&intensity, &truth)];
    let output = train(&pairs, extractor, translator, &train_config, channel, resume)?;

    ensure_dir(&args.out)?;
    output.checkpoint.save(&args.out.join("checkpoint.pckp"))?;
    let mut csv = String::from("epoch,step,loss\n");
    for r in &output.loss_trace {
        csv.push_str(&format!("{},{},{:.12e}\n", r.epoch, r.step, r.loss));
    }
    std::fs::write(args.out.join("loss.csv"), csv)?;
    cfg.write_log(&args.out, "train")?;
    let last = output.loss_trace.last().map(|r| r.loss);
    println!(
        "train: {} steps, final loss {:?}, checkpoint at {}",
        output.loss_trace.len(),
        last,
        args.out.join("checkpoint.pckp").display()
    );
    Ok(())
}

trait ParseChannel {
    fn parse_channel(&self) -> Result<Channel, Error>;
}

impl ParseChannel for String {
    fn parse_channel(&self) -> Result<Channel, Error> {
        match self.as_str() {
            "hh" => Ok(Channel::Hh),
            "hv" => Ok(Channel::Hv),
            "vv" => Ok(Channel::Vv),
            other => Err(Error::InvalidConfig(format!("unknown channel `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// colorize
// ---------------------------------------------------------------------------

fn cmd_colorize(args: ColorizeArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::new(args.config.as_deref())?;
    let channel: Channel = cfg
        .resolve(
            "channel",
            args.channel.map(|c| channel_name(c.into()).to_string()),
            "vv".to_string(),
            |s| Ok(s.to_string()),
        )?
        .parse_channel()?;
    let decode = cfg.resolve(
        "decode",
        args.decode.map(|d| {
            match d {
                DecodeArg::Mode => "mode",
                DecodeArg::Mean => "mean",
            }
            .to_string()
        }),
        "mode".to_string(),
        |s| Ok(s.to_string()),
    )?;
    let rule = match decode.as_str() {
        "mode" => DecodeRule::Mode,
        "mean" => DecodeRule::Mean,
        other => {
            return Err(Error::InvalidConfig(format!("unknown decode rule `{other}`")));
        }
    };
    cfg.record("input", args.input.display());
    cfg.record("checkpoint", args.checkpoint.display());

    let intensity = PolRaster::read(&args.input)?;
    let ckpt = ModelCheckpoint::load(&args.checkpoint)?;
    let output = colorize(&intensity, channel, &ckpt, rule)?;
    let (cov_raster, flag_raster) = output.to_rasters();

    ensure_dir(&args.out)?;
    cov_raster.write(&args.out.join("recon.pras"))?;
    flag_raster.write(&args.out.join("flags.pras"))?;
    export_png(&cov_raster, PngMode::Pauli, &args.out.join("pauli.png"))?;
    cfg.write_log(&args.out, "colorize")?;
    let fallbacks = output.flags.iter().filter(|&&f| f != 0).count();
    println!(
        "colorize: {}x{} reconstruction, {fallbacks} flagged pixels, outputs in {}",
        output.width,
        output.height,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::new(args.config.as_deref())?;
    cfg.record("recon", args.recon.display());
    cfg.record("truth", args.truth.display());
    let recon = PolRaster::read(&args.recon)?;
    let truth = PolRaster::read(&args.truth)?;
    let tables = match &args.checkpoint {
        Some(path) => {
            cfg.record("checkpoint", path.display());
            Some(ModelCheckpoint::load(path)?.quantizers)
        }
        None => None,
    };
    let report = evalmetrics::evaluate(&recon, &truth, tables.as_ref())?;

    ensure_dir(&args.out)?;
    std::fs::write(args.out.join("metrics.csv"), report.to_csv())?;
    report.bartlett_map.write(&args.out.join("bartlett.pras"))?;
    export_png(
        &report.bartlett_map,
        PngMode::GrayLinear,
        &args.out.join("bartlett.png"),
    )?;
    let mut hist = String::from("bin_lo,bin_hi,count\n");
    for (i, &count) in report.bartlett_hist.iter().enumerate() {
        if i < 100 {
            hist.push_str(&format!("{:.1},{:.1},{count}\n", i as f64 * 0.1, (i + 1) as f64 * 0.1));
        } else {
            hist.push_str(&format!("10.0,inf,{count}\n"));
        }
    }
    std::fs::write(args.out.join("bartlett_hist.csv"), hist)?;
    cfg.write_log(&args.out, "eval")?;
    println!(
        "eval: median Bartlett {:.4}, outputs in {}",
        report.bartlett_median,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// decomp
// ---------------------------------------------------------------------------

fn cmd_decomp(args: DecompArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::new(args.config.as_deref())?;
    cfg.record("input", args.input.display());
    let method = match args.method {
        MethodArg::Pauli => "pauli",
        MethodArg::Freeman => "freeman",
        MethodArg::Halpha => "halpha",
    };
    cfg.record("method", method);
    let cov = PolRaster::read(&args.input)?;
    if cov.layout != Layout::Cov9 {
        return Err(Error::ShapeMismatch {
            expected: "COV9 raster".into(),
            got: format!("{:?}", cov.layout),
        });
    }
    ensure_dir(&args.out)?;
    let (w, h) = (cov.width, cov.height);

    match args.method {
        MethodArg::Pauli => {
            let mut planes =
                [0, 1, 2].map(|_| PolRaster::new(w, h, Layout::Gray1));
            for y in 0..h {
                for x in 0..w {
                    let (r, g, b) = decomp::pauli_rgb(&cov.covariance(x, y)?);
                    planes[0].set(x, y, 0, r as f32);
                    planes[1].set(x, y, 0, g as f32);
                    planes[2].set(x, y, 0, b as f32);
                }
            }
            for (name, plane) in ["pauli_r", "pauli_g", "pauli_b"].iter().zip(&planes) {
                plane.write(&args.out.join(format!("{name}.pras")))?;
            }
            export_png(&cov, PngMode::Pauli, &args.out.join("pauli.png"))?;
        }
        MethodArg::Freeman => {
            let mut planes =
                [0, 1, 2].map(|_| PolRaster::new(w, h, Layout::Gray1));
            for y in 0..h {
                for x in 0..w {
                    let p = decomp::freeman_durden(&cov.covariance(x, y)?);
                    planes[0].set(x, y, 0, p.ps as f32);
                    planes[1].set(x, y, 0, p.pd as f32);
                    planes[2].set(x, y, 0, p.pv as f32);
                }
            }
            for (name, plane) in ["freeman_ps", "freeman_pd", "freeman_pv"].iter().zip(&planes) {
                plane.write(&args.out.join(format!("{name}.pras")))?;
            }
            export_png(&cov, PngMode::Freeman, &args.out.join("freeman.png"))?;
        }
        MethodArg::Halpha => {
            let mut entropy = PolRaster::new(w, h, Layout::Gray1);
            let mut alpha = PolRaster::new(w, h, Layout::Gray1);
            let mut zones = PolRaster::new(w, h, Layout::Class1);
            for y in 0..h {
                for x in 0..w {
                    let t = cov.covariance(x, y)?.to_coherency();
                    let ha = decomp::cloude_pottier(&t)?;
                    let zone = decomp::h_alpha_classify(ha.entropy, ha.mean_alpha_deg)?;
                    entropy.set(x, y, 0, ha.entropy as f32);
                    alpha.set(x, y, 0, ha.mean_alpha_deg as f32);
                    zones.set(x, y, 0, zone as f32);
                }
            }
            entropy.write(&args.out.join("entropy.pras"))?;
            alpha.write(&args.out.join("alpha.pras"))?;
            zones.write(&args.out.join("zones.pras"))?;
            export_png(&zones, PngMode::HAlphaZones, &args.out.join("zones.png"))?;
        }
    }
    cfg.write_log(&args.out, "decomp")?;
    println!("decomp: {method} outputs in {}", args.out.display());
    Ok(())
}
