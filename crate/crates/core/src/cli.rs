//! Command-line verbs. `run` parses arguments, executes one verb and maps
//! failures to exit codes: 2 for configuration errors, 3 for invariant
//! violations, 1 for everything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::evaluation::{ablation_sweep, evaluate, render_reports, EvalOptions, EvaluationPlan, DEFAULT_ALPHA_GRID};
use crate::manipulator::{tamper, ManipulatorHandle, ManipulatorKind, TamperRegion, DEFAULT_REGION_SIZE};
use crate::metrics::{heatmap, to_metric_scale, write_heatmap_png};
use crate::trainer::{build_manipulator, fit, load_checkpoint, parse_kv_lines, protect, RunOutput, TrainingConfig};
use crate::volume::{
    generate_phantom, load_dicom_series, load_raw_volume, read_slice_cache, read_slice_file, split_dataset,
    write_dicom_slice, write_slice_cache, CtVolume, PhantomSpec, RawDType, SliceCache, SliceRecord, INDEX_FILE,
};

pub const DATA_DIR_ENV: &str = "MITSGAN_DATA_DIR";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mitsgan", version, about = "Protect CT slices against local tampering")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; later values win.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Print the resolved configuration and exit without touching data.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Convert DICOM series or raw dumps into a normalized slice cache.
    Ingest {
        #[arg(long = "dicom-dir")]
        dicom_dirs: Vec<PathBuf>,
        #[arg(long)]
        raw: Option<PathBuf>,
        /// `n,h,w` of the raw dump.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long, default_value = "i16")]
        dtype: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic phantom volumes into a slice cache.
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        slices: usize,
        #[arg(long, default_value_t = 8)]
        volumes: usize,
        #[arg(long, default_value_t = 0.3)]
        nodule_probability: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a slice cache.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Protect a slice cache or DICOM series with a trained checkpoint.
    Protect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tamper one square of every slice in a cache.
    Tamper {
        #[arg(long = "in")]
        input: PathBuf,
        /// Square centre as `cx,cy` (column, row).
        #[arg(long)]
        region: String,
        #[arg(long, default_value_t = DEFAULT_REGION_SIZE)]
        size: usize,
        #[arg(long, default_value = "blur_blend")]
        kind: String,
        /// Manipulator weights file, or a checkpoint whose manipulator is reused.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split and write report tables.
    Evaluate {
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Train and score one model per α.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHA_GRID.to_vec())]
        grid: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Export |a − b| of two cached slice files as a PNG.
    Heatmap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// `h,w`; square slices are inferred from the file size.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One-line JSON error for standard error.
pub fn error_json(kind: &str, message: &str) -> String {
    let escape = |s: &str| {
        s.chars()
            .flat_map(|c| match c {
                '"' => "\\\"".chars().collect::<Vec<_>>(),
                '\\' => "\\\\".chars().collect(),
                '\n' => "\\n".chars().collect(),
                c if (c as u32) < 0x20 => format!("\\u{:04x}", c as u32).chars().collect(),
                c => vec![c],
            })
            .collect::<String>()
    };
    format!("{{\"error\":\"{}\",\"message\":\"{}\"}}", escape(kind), escape(message))
}

pub fn exit_code(e: &Error) -> i32 {
    if matches!(e, Error::Config(_)) {
        EXIT_CONFIG
    } else if e.is_invariant_violation() {
        EXIT_INVARIANT
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (including the program name), runs the verb and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_json("usage", first));
            return EXIT_CONFIG;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Relative paths resolve against `MITSGAN_DATA_DIR` when it is set.
fn under_root(p: &Path) -> PathBuf {
    match data_root() {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    }
}

fn split_kv(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Config file pairs followed by `--set` pairs, in application order.
fn config_pairs(common: &Common) -> Result<Vec<(String, String)>> {
    let mut pairs = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            parse_kv_lines(&text)?
        }
        None => Vec::new(),
    };
    for s in &common.overrides {
        pairs.push(split_kv(s)?);
    }
    Ok(pairs)
}

pub fn resolve_training_config(common: &Common) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    for (k, v) in config_pairs(common)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_plan(common: &Common, plan: Option<&Path>) -> Result<EvaluationPlan> {
    let mut p = EvaluationPlan::new(data_root().unwrap_or_else(|| "data".into()), "run/final.safetensors", "evaluation");
    let mut pairs = match plan {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read plan {}: {e}", path.display())))?;
            parse_kv_lines(&text)?
        }
        None => Vec::new(),
    };
    for s in &common.overrides {
        pairs.push(split_kv(s)?);
    }
    for (k, v) in pairs {
        p.set(&k, &v)?;
    }
    p.options.validate()?;
    p.checkpoint = under_root(&p.checkpoint);
    p.output_dir = under_root(&p.output_dir);
    Ok(p)
}

fn parse_dims<const N: usize>(s: &str, what: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{what}: cannot parse `{s}`"))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| Error::Config(format!("{what}: expected {N} comma-separated values, got `{s}`")))
}

fn read_records(dir: &Path) -> Result<Vec<SliceRecord>> {
    if dir.join(INDEX_FILE).exists() {
        read_slice_cache(dir)
    } else {
        Ok(Vec::new())
    }
}

/// Slices of the train and test volumes of a cache.
fn split_cache(data: &Path, ratio: f64, seed: u64) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let cache = SliceCache::open(data)?;
    let split = split_dataset(&cache.volume_ids(), ratio, seed)?;
    let px = |ids: &[String]| -> Result<Vec<Array2<f64>>> {
        Ok(cache.load_volumes(ids)?.into_iter().map(|r| r.pixels).collect())
    };
    Ok((px(&split.train_ids)?, px(&split.test_ids)?))
}

fn print_resolved(cfg: &TrainingConfig, extra: &[(&str, String)]) {
    print!("{}", cfg.to_kv());
    for (k, v) in extra {
        println!("{k} = {v}");
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.verb {
        Verb::Evaluate { plan } => {
            let plan = resolve_plan(common, plan.as_deref())?;
            if common.dry_run {
                print!("{}", plan.to_kv());
                return Ok(());
            }
            let eval = evaluate(&plan)?;
            let written = render_reports(Some(&eval), None, &plan.to_kv(), &plan.output_dir)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        verb => {
            let cfg = resolve_training_config(common)?;
            if common.dry_run {
                print_resolved(&cfg, &[("verb", verb_name(verb).to_string())]);
                return Ok(());
            }
            run_verb(verb, &cfg)
        }
    }
}

fn verb_name(v: &Verb) -> &'static str {
    match v {
        Verb::Ingest { .. } => "ingest",
        Verb::Phantom { .. } => "phantom",
        Verb::Train { .. } => "train",
        Verb::Protect { .. } => "protect",
        Verb::Tamper { .. } => "tamper",
        Verb::Evaluate { .. } => "evaluate",
        Verb::Ablate { .. } => "ablate",
        Verb::Heatmap { .. } => "heatmap",
    }
}

fn run_verb(verb: &Verb, cfg: &TrainingConfig) -> Result<()> {
    match verb {
        Verb::Ingest {
            dicom_dirs,
            raw,
            dims,
            dtype,
            out,
        } => {
            let out = under_root(out);
            let mut volumes: Vec<CtVolume> = dicom_dirs.iter().map(|d| load_dicom_series(d)).collect::<Result<_>>()?;
            if let Some(raw) = raw {
                let dims = dims
                    .as_deref()
                    .ok_or_else(|| Error::Config("--raw needs --dims n,h,w".into()))?;
                let [n, h, w] = parse_dims::<3>(dims, "--dims")?;
                volumes.push(load_raw_volume(raw, n, h, w, RawDType::parse(dtype).map_err(|e| Error::Config(e.to_string()))?)?);
            }
            if volumes.is_empty() {
                return Err(Error::Config("ingest needs --dicom-dir or --raw".into()));
            }
            let mut records = read_records(&out)?;
            for v in &volumes {
                records.extend(v.slices()?);
            }
            let cache = write_slice_cache(&out, &records)?;
            println!("{} slices from {} volumes in {}", cache.entries.len(), cache.volume_ids().len(), out.display());
            Ok(())
        }
        Verb::Phantom {
            size,
            slices,
            volumes,
            nodule_probability,
            seed,
            out,
        } => {
            let out = under_root(out);
            let mut records = Vec::new();
            for v in 0..*volumes as u64 {
                let spec = PhantomSpec::new(*size, *slices, *nodule_probability, seed.wrapping_add(v));
                spec.validate()?;
                records.extend(generate_phantom(&spec)?.slices()?);
            }
            let cache = write_slice_cache(&out, &records)?;
            println!("{} slices in {}", cache.entries.len(), out.display());
            Ok(())
        }
        Verb::Train {
            data,
            out,
            split_ratio,
            split_seed,
        } => {
            let data = data.clone().or_else(data_root).ok_or_else(|| {
                Error::Config(format!("train needs --data or {DATA_DIR_ENV}"))
            })?;
            let (train, _) = split_cache(&data, *split_ratio, *split_seed)?;
            let run = RunOutput { dir: under_root(out) };
            std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
            let cfg_path = run.dir.join("config.txt");
            std::fs::write(&cfg_path, cfg.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
            let m = build_manipulator(&train, cfg)?;
            let c = fit(&train, cfg, m, Some(&run))?;
            println!("trained {} steps; final checkpoint {}", c.step, run.final_path().display());
            Ok(())
        }
        Verb::Protect { checkpoint, input, out } => {
            let ckpt_path = under_root(checkpoint.as_deref().unwrap_or(Path::new("run/final.safetensors")));
            let ckpt = load_checkpoint(&ckpt_path)?;
            let input = input.as_ref().ok_or_else(|| Error::Config("protect needs --in".into()))?;
            let out = under_root(out.as_deref().unwrap_or(Path::new("protected")));
            protect_path(&under_root(input), &out, &ckpt)
        }
        Verb::Tamper {
            input,
            region,
            size,
            kind,
            weights,
            out,
        } => {
            let [cx, cy] = parse_dims::<2>(region, "--region")?;
            let region = TamperRegion::new(cx, cy).with_size(*size);
            let kind: ManipulatorKind = kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let m = tamper_manipulator(kind, weights.as_deref())?;
            let records = read_slice_cache(&under_root(input))?;
            let tampered = records
                .into_iter()
                .map(|r| {
                    Ok(SliceRecord {
                        pixels: tamper(r.pixels.view(), region, &m)?,
                        ..r
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = under_root(out);
            write_slice_cache(&out, &tampered)?;
            println!("{} slices tampered into {}", tampered.len(), out.display());
            Ok(())
        }
        Verb::Ablate {
            grid,
            data,
            out,
            split_ratio,
            split_seed,
        } => {
            let data = data.clone().or_else(data_root).ok_or_else(|| {
                Error::Config(format!("ablate needs --data or {DATA_DIR_ENV}"))
            })?;
            let (train, test) = split_cache(&data, *split_ratio, *split_seed)?;
            let m = build_manipulator(&train, cfg)?;
            let opts = EvalOptions {
                region_size: cfg.region_size,
                ..EvalOptions::default()
            };
            let result = ablation_sweep(cfg, grid, &train, &test, &m, &opts)?;
            let manifest = format!("{}grid = {}\n", cfg.to_kv(), grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
            for p in render_reports(None, Some(&result), &manifest, &under_root(out))? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Verb::Heatmap { a, b, dims, out } => {
            let (h, w) = match dims {
                Some(d) => {
                    let [h, w] = parse_dims::<2>(d, "--dims")?;
                    (h, w)
                }
                None => infer_square(a)?,
            };
            let xa = to_metric_scale(read_slice_file(a, h, w)?.view());
            let xb = to_metric_scale(read_slice_file(b, h, w)?.view());
            write_heatmap_png(heatmap(xa.view(), xb.view())?.view(), out)?;
            println!("{}", out.display());
            Ok(())
        }
        Verb::Evaluate { .. } => unreachable!("handled in dispatch"),
    }
}

fn infer_square(path: &Path) -> Result<(usize, usize)> {
    let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize / 4;
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::Config(format!("{} is not a square slice; pass --dims h,w", path.display())));
    }
    Ok((side, side))
}

fn tamper_manipulator(kind: ManipulatorKind, weights: Option<&Path>) -> Result<ManipulatorHandle> {
    if kind == ManipulatorKind::BlurBlend {
        return Ok(ManipulatorHandle::blur_blend());
    }
    let path = weights.ok_or_else(|| Error::Config(format!("manipulator `{kind}` needs --weights")))?;
    // Either a bare manipulator file or a checkpoint carrying one.
    let m = match ManipulatorHandle::load(path) {
        Ok(m) if m.kind() == kind => m,
        _ => load_checkpoint(path)?.manipulator,
    };
    if m.kind() != kind {
        return Err(Error::Config(format!("{} holds a `{}` manipulator, not `{kind}`", path.display(), m.kind())));
    }
    Ok(m)
}

fn protect_path(input: &Path, out: &Path, ckpt: &crate::trainer::Checkpoint) -> Result<()> {
    if input.join(INDEX_FILE).exists() {
        let records = read_slice_cache(input)?;
        let protected = records
            .into_iter()
            .map(|r| {
                Ok(SliceRecord {
                    pixels: crate::trainer::protect_pixels(&r.pixels, ckpt)?,
                    ..r
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_slice_cache(out, &protected)?;
        println!("{} slices protected into {}", protected.len(), out.display());
        return Ok(());
    }
    let scan = load_dicom_series(input)?;
    let p = protect(&scan, ckpt)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dz = scan.spacing.map(|s| s[0]).unwrap_or(1.0);
    let uid = format!("2.25.{}", fnv(&p.source_id));
    for i in 0..p.n_slices() {
        let path = out.join(format!("slice_{i:04}.dcm"));
        let hu = p.voxels().index_axis(ndarray::Axis(0), i);
        write_dicom_slice(&path, hu, i as f64 * dz, i as i32 + 1, &uid)?;
    }
    println!("{} slices protected into {}", p.n_slices(), out.display());
    Ok(())
}

/// Stable numeric id for generated series UIDs.
fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}
