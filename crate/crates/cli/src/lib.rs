//! `ledd` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error or failed check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ledd::codec::{self, CodeStream, CodecError, MAX_TAU};
use ledd::eval::{self, EvalError, RoundtripRecord};
use ledd::gradcheck_suite::{operator_suite, Precision};
use ledd::image_io::{read_pgm, write_pgm, GrayImage};
use ledd::network::{forward_refine, load_weights, Model};
use ledd::training::{train_with, RunOptions, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// An empty dataset directory is a usage problem; anything else is data.
fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::EmptyDataset(_) => usage(e.to_string()),
        other => CliError::Data(other.into()),
    }
}

type CmdResult = Result<i32, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ledd", version, about = "Near-lossless grayscale codec with a CNN refinement decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a binary PGM with a per-pixel error bound.
    Encode {
        /// Input PGM (P5, maxval 255).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output code stream.
        #[arg(long)]
        out: PathBuf,
        /// Per-pixel error bound, 0 (lossless) to 8.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=MAX_TAU as i64))]
        tau: u8,
    },
    /// Decode a code stream, optionally refining it with a trained model.
    Decode {
        /// Input code stream.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PGM.
        #[arg(long)]
        out: PathBuf,
        /// Weight file; refines the decoded image using the stream's tau.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Refine an already decoded PGM.
    Refine {
        /// Decoded PGM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PGM.
        #[arg(long)]
        out: PathBuf,
        /// Weight file.
        #[arg(long)]
        model: PathBuf,
        /// Error bound the image was compressed with, 0 to 8.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=MAX_TAU as i64))]
        tau: u8,
    },
    /// Train a refinement model on a directory of PGM images.
    Train(TrainArgs),
    /// Rate-distortion sweep written as CSV.
    Eval {
        /// Directory of PGM images.
        #[arg(long)]
        data: PathBuf,
        /// Error bounds, e.g. "1,2,4,8" or "0-8".
        #[arg(long, default_value = "0-8", value_parser = parse_taus)]
        taus: TauList,
        /// Weight file; adds refined columns.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        csv: PathBuf,
    },
    /// Check the error bound for every image and tau; exits 2 on any failure.
    Roundtrip {
        /// Directory of PGM images.
        #[arg(long)]
        data: PathBuf,
        /// Error bounds, e.g. "1,2,4,8" or "0-8".
        #[arg(long, default_value = "0-8", value_parser = parse_taus)]
        taus: TauList,
    },
    /// Finite-difference gradient checks of every operator.
    Gradcheck {
        /// Check in 64-bit precision with tolerance 1e-6.
        #[arg(long)]
        f64: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training PGM images.
    #[arg(long)]
    pub data: PathBuf,
    /// Output weight file.
    #[arg(long)]
    pub out: PathBuf,
    /// key = value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out PGM directory scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint written after every epoch [default: <out>.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint if it exists.
    #[arg(long)]
    pub resume: bool,
    /// Error bounds to train on, e.g. "1-8" or "4".
    #[arg(long, value_parser = parse_taus)]
    pub taus: Option<TauList>,
    /// Patch size in pixels (even).
    #[arg(long)]
    pub patch: Option<usize>,
    /// Patch stride in pixels.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Epochs at the high learning rate.
    #[arg(long)]
    pub epochs_hi: Option<usize>,
    /// Epochs at the low learning rate.
    #[arg(long)]
    pub epochs_lo: Option<usize>,
    /// High learning rate.
    #[arg(long)]
    pub lr_hi: Option<f64>,
    /// Low learning rate.
    #[arg(long)]
    pub lr_lo: Option<f64>,
    /// Weight of the l-infinity term in the joint loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Channels of the full-resolution layers.
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Number of dilated residual blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TauList(pub Vec<u8>);

/// Parses "1,2,4,8", "0-8" or mixes such as "0,2-4".
pub fn parse_taus(s: &str) -> Result<TauList, String> {
    let mut taus = Vec::new();
    for item in s.split(',').map(str::trim) {
        let parse = |v: &str| -> Result<u8, String> {
            let t: u8 = v.trim().parse().map_err(|_| format!("invalid tau {v:?}"))?;
            if t > MAX_TAU {
                return Err(format!("tau {t} outside 0..={MAX_TAU}"));
            }
            Ok(t)
        };
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty range {item:?}"));
                }
                taus.extend(a..=b);
            }
            None => taus.push(parse(item)?),
        }
    }
    Ok(TauList(taus))
}

/// Applies `LNL_THREADS` to the global thread pool.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("LNL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("LNL_THREADS={value:?} is not a positive integer")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

/// Parses arguments and runs the command; returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command, out));
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = match &e {
                CliError::Usage(msg) => writeln!(err, "error: {msg}"),
                CliError::Data(cause) => writeln!(err, "error: {cause:#}"),
            };
            e.code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Encode { input, out: path, tau } => cmd_encode(&input, &path, tau, out),
        Command::Decode {
            input,
            out: path,
            model,
        } => cmd_decode(&input, &path, model.as_deref(), out),
        Command::Refine {
            input,
            out: path,
            model,
            tau,
        } => cmd_refine(&input, &path, &model, tau),
        Command::Train(args) => cmd_train(&args, out),
        Command::Eval {
            data,
            taus,
            model,
            csv,
        } => cmd_eval(&data, &taus.0, model.as_deref(), &csv, out),
        Command::Roundtrip { data, taus } => {
            cmd_roundtrip(&data, &taus.0, codec::decode_bytes, out)
        }
        Command::Gradcheck { f64 } => cmd_gradcheck(
            if f64 {
                Precision::Double
            } else {
                Precision::Single
            },
            out,
        ),
    }
}

fn read_image(path: &Path) -> Result<GrayImage, CliError> {
    Ok(read_pgm(path).with_context(|| format!("reading {}", path.display()))?)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(load_weights(path).with_context(|| format!("loading model {}", path.display()))?)
}

fn io<T>(r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Data(e.into()))
}

pub fn cmd_encode(input: &Path, path: &Path, tau: u8, out: &mut dyn Write) -> CmdResult {
    let img = read_image(input)?;
    let start = Instant::now();
    let enc = codec::encode_image(&img, tau).context("encoding")?;
    let millis = start.elapsed().as_secs_f64() * 1e3;
    fs::write(path, enc.stream.to_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    io(writeln!(
        out,
        "encode,{},tau,{},bpp,{:.4},ms,{:.3}",
        input.display(),
        tau,
        codec::bits_per_pixel(&enc.stream, &img),
        millis
    ))?;
    Ok(EXIT_OK)
}

pub fn cmd_decode(input: &Path, path: &Path, model: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let stream = CodeStream::from_bytes(&bytes)
        .with_context(|| format!("parsing {}", input.display()))?;
    let start = Instant::now();
    let decoded = codec::decode_image(&stream).context("decoding")?;
    let image = match model {
        Some(m) => forward_refine(&load_model(m)?, &decoded, stream.tau).context("refining")?,
        None => decoded,
    };
    let millis = start.elapsed().as_secs_f64() * 1e3;
    write_pgm(&image, path).with_context(|| format!("writing {}", path.display()))?;
    io(writeln!(
        out,
        "decode,{},tau,{},refined,{},ms,{:.3}",
        input.display(),
        stream.tau,
        model.is_some(),
        millis
    ))?;
    Ok(EXIT_OK)
}

pub fn cmd_refine(input: &Path, path: &Path, model: &Path, tau: u8) -> CmdResult {
    let y = read_image(input)?;
    let refined = forward_refine(&load_model(model)?, &y, tau).context("refining")?;
    write_pgm(&refined, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(EXIT_OK)
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_kv_file(path).map_err(|e| match e {
            TrainError::Io(io) => CliError::Data(
                anyhow::Error::new(io).context(format!("reading {}", path.display())),
            ),
            other => usage(other.to_string()),
        })?,
        None => TrainConfig::default(),
    };
    if let Some(t) = &args.taus {
        cfg.taus = t.0.clone();
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.patch, args.patch);
    set(&mut cfg.stride, args.stride);
    set(&mut cfg.batch, args.batch);
    set(&mut cfg.epochs_hi, args.epochs_hi);
    set(&mut cfg.epochs_lo, args.epochs_lo);
    set(&mut cfg.base_channels, args.base_channels);
    set(&mut cfg.num_body_blocks, args.blocks);
    cfg.lr_hi = args.lr_hi.unwrap_or(cfg.lr_hi);
    cfg.lr_lo = args.lr_lo.unwrap_or(cfg.lr_lo);
    cfg.lambda = args.lambda.unwrap_or(cfg.lambda);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = train_config(args)?;
    let opts = RunOptions {
        val_dir: args.val.clone(),
        checkpoint: Some(
            args.checkpoint
                .clone()
                .unwrap_or_else(|| args.out.with_extension("ckpt")),
        ),
        resume: args.resume,
    };
    let mut write_err = None;
    let result = train_with(&args.data, &cfg, &args.out, &opts, |log| {
        if let Err(e) = writeln!(out, "{log}").and_then(|()| out.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(CliError::Data(e.into()));
    }
    match result {
        Ok(_) => Ok(EXIT_OK),
        Err(TrainError::Data(e)) => Err(eval_error(e)),
        Err(e) => Err(CliError::Data(e.into())),
    }
}

pub fn cmd_eval(
    data: &Path,
    taus: &[u8],
    model: Option<&Path>,
    csv: &Path,
    out: &mut dyn Write,
) -> CmdResult {
    let model = model.map(load_model).transpose()?;
    let rows = eval::rd_sweep(data, taus, model.as_ref(), Some(csv)).map_err(eval_error)?;
    io(out.write_all(eval::format_rd_csv(&rows).as_bytes()))?;
    Ok(EXIT_OK)
}

/// Per-file PASS/FAIL table; exit 0 only if every record passed.
pub fn cmd_roundtrip<D>(data: &Path, taus: &[u8], decoder: D, out: &mut dyn Write) -> CmdResult
where
    D: Fn(&[u8]) -> Result<GrayImage, CodecError> + Sync,
{
    let images = eval::load_dir(data).map_err(eval_error)?;
    let records = eval::roundtrip_check(&images, taus, decoder).map_err(eval_error)?;
    io(write_roundtrip_table(&records, out))?;
    let failures = records.iter().filter(|r| !r.pass).count();
    io(writeln!(
        out,
        "summary,{} checks,{} failed",
        records.len(),
        failures
    ))?;
    Ok(if failures == 0 { EXIT_OK } else { EXIT_DATA })
}

fn write_roundtrip_table(records: &[RoundtripRecord], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "file,tau,max_error,result")?;
    for r in records {
        let name = r.path.file_name().unwrap_or(r.path.as_os_str());
        writeln!(
            out,
            "{},{},{},{}",
            name.to_string_lossy(),
            r.tau,
            r.max_error,
            if r.pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(())
}

pub fn cmd_gradcheck(precision: Precision, out: &mut dyn Write) -> CmdResult {
    let reports = operator_suite(precision);
    io(writeln!(out, "operator,max_rel_error,tolerance,checked,excluded,result"))?;
    for r in &reports {
        io(writeln!(
            out,
            "{},{:.3e},{:.0e},{},{},{}",
            r.name,
            r.report.max_rel_error,
            r.report.tolerance,
            r.report.checked,
            r.report.excluded,
            if r.passed() { "PASS" } else { "FAIL" }
        ))?;
    }
    Ok(if reports.iter().all(|r| r.passed()) {
        EXIT_OK
    } else {
        EXIT_DATA
    })
}
