use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lraccel_core::bench::benchmark;
use lraccel_core::decompose::SolverKind;
use lraccel_core::io::{load_dataset, load_model, load_report, load_samples, save_model, save_report, save_samples};
use lraccel_core::pipeline::{accelerate_model, evaluate, plan_from_spectra, AccelConfig, Calibration, Mode};
use lraccel_core::rank::{layer_energy, LayerSpectrum, RankPlan};
use lraccel_core::sampler::{sample_layer, DEFAULT_POSITIONS_PER_IMAGE};
use lraccel_core::tensor::Shape;
use lraccel_core::{Error, ErrorClass, Result};

/// Low-rank acceleration of convolutional networks.
#[derive(Parser)]
#[command(name = "lraccel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample input patches and responses of one conv layer.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 3000)]
        n_images: usize,
        #[arg(long, default_value_t = DEFAULT_POSITIONS_PER_IMAGE)]
        positions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also sample inputs from this partially accelerated model.
        #[arg(long)]
        approx: Option<PathBuf>,
        /// Output file; name it `<layer>.lrtb` for use with rank-select.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select per-layer ranks from sampled response spectra.
    RankSelect {
        #[arg(long)]
        model: PathBuf,
        /// Directory of `<layer>.lrtb` sample files or `<layer>.json` spectra.
        #[arg(long)]
        spectra: PathBuf,
        #[arg(long)]
        speedup: f64,
        /// Fixed ranks, `layer=rank`, comma separated or repeated.
        #[arg(long, value_delimiter = ',')]
        freeze: Vec<String>,
        #[arg(long, default_value = "2d")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace conv layers with low-rank factorizations.
    Accelerate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        speedup: f64,
        #[arg(long, default_value = "2d")]
        mode: Mode,
        #[arg(long, default_value = "asymmetric")]
        solver: SolverKind,
        /// Use these ranks instead of running rank selection.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        freeze: Vec<String>,
        #[arg(long, default_value_t = 3000)]
        n_images: usize,
        #[arg(long, default_value_t = DEFAULT_POSITIONS_PER_IMAGE)]
        positions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative ridge added to the regressor Gram matrix.
        #[arg(long)]
        ridge: Option<f64>,
        /// Speedup taken by the spatial stage in 3d mode (default √speedup).
        #[arg(long)]
        spatial_speedup: Option<f64>,
        /// Output model directory; a report is written next to the model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a model against a reference on a dataset.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time forward passes on one thread and count multiplies.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Input shape `CxHxW`; the model's own input shape when absent.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<Shape>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Shape::new(c, h, w)),
        _ => Err(format!("expected CxHxW with positive sizes, got {s:?}")),
    }
}

fn parse_freeze(items: &[String]) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for item in items.iter().filter(|s| !s.trim().is_empty()) {
        let (id, rank) = item
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("--freeze expects layer=rank, got {item:?}")))?;
        let rank = rank
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("--freeze: bad rank in {item:?}")))?;
        if out.insert(id.trim().to_string(), rank).is_some() {
            return Err(Error::Input(format!("--freeze: layer {id:?} given twice")));
        }
    }
    Ok(out)
}

fn read_spectra(dir: &Path) -> Result<Vec<LayerSpectrum>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut spectra = Vec::new();
    for path in paths {
        match path.extension().and_then(|e| e.to_str()) {
            Some("lrtb") => {
                let samples = load_samples(&path)?;
                let id = samples.layer_id.clone();
                spectra.push(layer_energy(&samples).map_err(|e| e.in_layer(id))?);
            }
            Some("json") => {
                let s: LayerSpectrum = load_report(&path)?;
                s.validate()?;
                spectra.push(s);
            }
            _ => {}
        }
    }
    if spectra.is_empty() {
        return Err(Error::Input(format!("{}: no .lrtb or .json spectra found", dir.display())));
    }
    Ok(spectra)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample { model, data, layer, n_images, positions, seed, approx, out } => {
            let net = load_model(&model)?;
            let data = load_dataset(&data)?;
            let approx = approx.map(|p| load_model(&p)).transpose()?;
            let samples = sample_layer(&net, approx.as_ref(), &layer, &data, n_images, positions, seed)?;
            save_samples(&samples, &out)?;
            println!("{layer}: {} samples, {} responses -> {}", samples.len(), samples.response_dim(), out.display());
        }
        Command::RankSelect { model, spectra, speedup, freeze, mode, out } => {
            let net = load_model(&model)?;
            let mut cfg = AccelConfig::new(speedup, mode, SolverKind::Asymmetric);
            cfg.frozen = parse_freeze(&freeze)?;
            cfg.validate()?;
            let plan = plan_from_spectra(&net, &read_spectra(&spectra)?, &cfg)?;
            save_report(&plan, &out)?;
            for (id, d) in &plan.ranks {
                println!("{id}: {d}");
            }
            println!("complexity {:.4e} of budget {:.4e}", plan.achieved_complexity, plan.target_complexity);
        }
        Command::Accelerate {
            model,
            data,
            speedup,
            mode,
            solver,
            plan,
            freeze,
            n_images,
            positions,
            seed,
            ridge,
            spatial_speedup,
            out,
        } => {
            let net = load_model(&model)?;
            let data = load_dataset(&data)?;
            let mut cfg = AccelConfig::new(speedup, mode, solver);
            cfg.calibration = Calibration { n_images, positions_per_image: positions, seed };
            cfg.frozen = parse_freeze(&freeze)?;
            cfg.spatial_speedup = spatial_speedup;
            if let Some(r) = ridge {
                cfg.ridge = r;
            }
            cfg.plan = plan.map(|p| load_report::<RankPlan>(&p)).transpose()?;
            let result = accelerate_model(&net, &data, &cfg)?;
            save_model(&result.net, &out)?;
            save_report(&result.plan, &out.join("plan.json"))?;
            save_report(&result.layers, &out.join("layers.json"))?;
            save_report(&result.report, &out.join("report.json"))?;
            for l in &result.layers {
                println!("{}: d {} -> d′ {}{}", l.layer, l.d, l.d_prime, l.d_dprime.map(|v| format!(", d″ {v}")).unwrap_or_default());
            }
            println!(
                "theoretical speedup {:.2}x, calibration agreement {:.3}",
                result.report.theoretical_speedup, result.report.agreement
            );
        }
        Command::Eval { reference, test, data, out } => {
            let report = evaluate(&load_model(&reference)?, &load_model(&test)?, &load_dataset(&data)?)?;
            save_report(&report, &out)?;
            println!(
                "agreement {:.4}, mean |deviation| {:.4e}, theoretical speedup {:.2}x over {} images",
                report.agreement, report.mean_abs_deviation, report.theoretical_speedup, report.images
            );
        }
        Command::Bench { model, shape, reps, reference, out } => {
            let net = load_model(&model)?;
            let reference = reference.map(|p| load_model(&p)).transpose()?;
            let report = benchmark(&net, shape, reps, reference.as_ref())?;
            save_report(&report, &out)?;
            print!("median {:.3} ms", report.model.median_seconds * 1e3);
            if let (Some(t), Some(m)) = (report.theoretical_speedup, report.measured_speedup) {
                print!(", speedup {m:.2}x measured / {t:.2}x theoretical");
            }
            println!();
        }
    }
    Ok(())
}

/// Caps the worker pool from `LRACCEL_THREADS` (0 or unset: one per core).
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LRACCEL_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("LRACCEL_THREADS must be a non-negative integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Input => ExitCode::from(2),
                ErrorClass::Numerical => ExitCode::from(3),
            }
        }
    }
}
