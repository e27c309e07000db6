//! `ckm`: generate datasets, train scenes, predict channels and evaluate.
//!
//! Every run writes its resolved configuration to `<out>/config.toml`.
//! Failures print one line `error kind=<kind> message=<text>` to stderr and
//! exit with status 1 (2 for usage errors).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ckm_core::config;
use ckm_core::datagen::{generate, ArraySpec, Dataset, DatasetHeader, GenerateConfig};
use ckm_core::rendering::{trace, RenderConfig, Renderer, SceneKernels};
use ckm_core::scene::{AngleGrid, ArrayConfig, ChannelVector, Measurement, Pose, Scene};
use ckm_core::spectrum::{cbf_spectrum, gain_db};
use ckm_core::training::{evaluate, evaluate_channels, train_with_eval, TrainConfig};
use ckm_core::{CkmError, Result};

#[derive(Debug, Parser)]
#[command(name = "ckm", version, about = "Gaussian-splatting channel knowledge maps")]
struct Cli {
    /// TOML configuration file for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and test datasets from an oracle scene.
    Generate(Overrides),
    /// Train a scene on a dataset.
    Train(TrainArgs),
    /// Predict channel vectors and gains for poses.
    Predict(PredictArgs),
    /// Export the spatial spectrum of one measurement or prediction.
    Spectrum(SpectrumArgs),
    /// Gain MAE/NMAE and spectrum SSIM of a scene or of predictions.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// Dotted-key overrides such as `lr.mean=2e-4`.
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for periodic evaluation (`eval_every`).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Checkpoint to start from instead of a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Predict every pose of this dataset.
    #[arg(long, conflicts_with_all = ["tx", "pairs"])]
    data: Option<PathBuf>,
    /// Transmitter position `x,y,z`.
    #[arg(long, requires = "rx", value_parser = parse_vec3)]
    tx: Option<[f64; 3]>,
    /// Receiver position `x,y,z`.
    #[arg(long, requires = "tx", value_parser = parse_vec3)]
    rx: Option<[f64; 3]>,
    /// Receiver orientation `w,x,y,z`.
    #[arg(long, value_parser = parse_quat)]
    orientation: Option<[f64; 4]>,
    /// CSV of poses: `tx_x,tx_y,tx_z,rx_x,rx_y,rx_z[,w,x,y,z]` per line.
    #[arg(long, conflicts_with = "tx")]
    pairs: Option<PathBuf>,
    /// Also export each predicted spectrum.
    #[arg(long)]
    spectrum: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    #[arg(long)]
    data: PathBuf,
    /// Record index in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Render the pose with this checkpoint instead of using the measurement.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Predicted channels in dataset format, matched to `--data` by id.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Settings shared by predict, spectrum and eval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RenderSettings {
    render_grid: [usize; 2],
    eps_sel: f64,
    /// Spectrum grid for SSIM and exports; the array's grid when absent.
    spectrum_grid: Option<[usize; 2]>,
    /// Array used for poses without a dataset header.
    array: ArraySpec,
    threads: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        let r = RenderConfig::default();
        Self {
            render_grid: [r.grid.n_theta, r.grid.n_phi],
            eps_sel: r.eps_sel,
            spectrum_grid: None,
            array: ArraySpec::default(),
            threads: 0,
        }
    }
}

impl RenderSettings {
    fn render(&self) -> RenderConfig {
        RenderConfig {
            grid: AngleGrid::new(self.render_grid[0], self.render_grid[1]),
            eps_sel: self.eps_sel,
        }
    }

    fn spectrum_grid(&self, array: &ArrayConfig) -> AngleGrid {
        self.spectrum_grid
            .map(|[a, b]| AngleGrid::new(a, b))
            .unwrap_or(array.grid)
    }

    fn validate(&self) -> Result<()> {
        if self.render_grid.contains(&0) || self.spectrum_grid.is_some_and(|g| g.contains(&0)) {
            return Err(CkmError::InvalidConfig("grids must be non-empty".into()));
        }
        if !(self.eps_sel > 0.0 && self.eps_sel < 1.0) {
            return Err(CkmError::InvalidConfig("eps_sel must be in (0, 1)".into()));
        }
        self.array.config().validate()
    }
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected {N} comma-separated numbers"))
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn parse_quat(s: &str) -> std::result::Result<[f64; 4], String> {
    parse_floats::<4>(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(o) => cmd_generate(cli, o),
        Command::Train(a) => cmd_train(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Spectrum(a) => cmd_spectrum(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

fn prepare_out(dir: &Path, cfg: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config::to_toml(cfg)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CkmError::InvalidConfig(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn set_global_threads(threads: usize) -> Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CkmError::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

fn render_settings(cli: &Cli, o: &Overrides) -> Result<RenderSettings> {
    let mut s: RenderSettings = config::load(cli.config.as_deref(), &o.set)?;
    if let Some(t) = cli.threads {
        s.threads = t;
    }
    s.validate()?;
    set_global_threads(s.threads)?;
    Ok(s)
}

fn cmd_generate(cli: &Cli, o: &Overrides) -> Result<()> {
    if cli.config.is_none() {
        return Err(CkmError::SpecInvalid("generate needs --config with the oracle scene".into()));
    }
    let mut cfg: GenerateConfig = config::load(cli.config.as_deref(), &o.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        set_global_threads(t)?;
    }
    let (train, test) = generate(&cfg)?;
    prepare_out(&cli.out, &cfg)?;
    train.save(cli.out.join("train.jsonl"))?;
    test.save(cli.out.join("test.jsonl"))?;
    println!("train={} test={}", train.len(), test.len());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = config::load(cli.config.as_deref(), &a.overrides.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data)?;
    let held_out = a.eval_data.as_ref().map(Dataset::load).transpose()?;
    let init = a.init.as_ref().map(Scene::load).transpose()?;
    prepare_out(&cli.out, &cfg)?;
    let mut log = BufWriter::new(fs::File::create(cli.out.join("metrics.jsonl"))?);
    let out = train_with_eval(&data, held_out.as_ref(), &cfg, init, &mut log)?;
    out.scene.save(cli.out.join("scene.ckpt"))?;
    if let Some(last) = out.history.last() {
        println!("steps={} loss={:.6e} ellipsoids={}", last.step, last.loss, last.ellipsoids);
    }
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<Measurement>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| CkmError::Parse { line: i + 1, message };
        let v: Vec<f64> = line
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| parse_err(format!("`{p}`: {e}"))))
            .collect::<Result<_>>()?;
        let q = match v.len() {
            6 => [1.0, 0.0, 0.0, 0.0],
            10 => [v[6], v[7], v[8], v[9]],
            n => return Err(parse_err(format!("expected 6 or 10 values, found {n}"))),
        };
        out.push(pose_record(format!("pair{:05}", out.len()), [v[0], v[1], v[2]], [v[3], v[4], v[5]], q));
    }
    Ok(out)
}

fn pose_record(id: String, tx: [f64; 3], rx: [f64; 3], q: [f64; 4]) -> Measurement {
    Measurement {
        id,
        tx_pos: tx,
        rx_pos: rx,
        rx_orientation: q,
        channel: ChannelVector { entries: Vec::new() },
    }
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    gain_db: f64,
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let settings = render_settings(cli, &a.overrides)?;
    let scene = Scene::load(&a.checkpoint)?;
    let (array, mut records, bbox) = if let Some(path) = &a.data {
        let d = Dataset::load(path)?;
        (d.header.array, d.records, d.header.bbox)
    } else if let Some(path) = &a.pairs {
        (settings.array.config(), read_pairs(path)?, scene.bbox)
    } else if let (Some(tx), Some(rx)) = (a.tx, a.rx) {
        let q = a.orientation.unwrap_or([1.0, 0.0, 0.0, 0.0]);
        (settings.array.config(), vec![pose_record("pose".into(), tx, rx, q)], scene.bbox)
    } else {
        return Err(CkmError::InvalidConfig("predict needs --data, --pairs or --tx/--rx".into()));
    };
    for r in &records {
        if r.tx_pos == r.rx_pos || !r.rx_orientation.iter().all(|v| v.is_finite()) {
            return Err(CkmError::DegenerateGeometry(format!("pose {} is degenerate", r.id)));
        }
    }
    prepare_out(&cli.out, &settings)?;
    let kernels = SceneKernels::new(&scene, settings.eps_sel);
    let renderer = Renderer::new(array, settings.render());
    let mut gains = BufWriter::new(fs::File::create(cli.out.join("gains.jsonl"))?);
    if a.spectrum {
        fs::create_dir_all(cli.out.join("spectra"))?;
    }
    for r in &mut records {
        r.channel = trace(&kernels, &renderer, &Pose::of(r))?.channel;
        let line = PredictionLine {
            id: &r.id,
            gain_db: gain_db(&r.channel),
        };
        let text = serde_json::to_string(&line).map_err(|e| CkmError::InvalidConfig(e.to_string()))?;
        writeln!(gains, "{text}")?;
        if a.tx.is_some() {
            println!("{text}");
        }
        if a.spectrum {
            export_spectrum(&r.channel, &array, &settings, &cli.out.join("spectra").join(&r.id))?;
        }
    }
    gains.flush()?;
    let predictions = Dataset {
        header: DatasetHeader {
            wavelength: scene.wavelength,
            array,
            bbox,
            scene_hash: String::new(),
            split: "prediction".into(),
        },
        records,
    };
    predictions.save(cli.out.join("predictions.jsonl"))
}

fn export_spectrum(h: &ChannelVector, array: &ArrayConfig, s: &RenderSettings, stem: &Path) -> Result<()> {
    let grid = s.spectrum_grid(array);
    let spec = cbf_spectrum(h, &array.with_grid(grid.n_theta, grid.n_phi))?.as_db();
    let with_ext = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    spec.write_csv(with_ext(".csv"))?;
    spec.write_pgm(with_ext(".pgm"))?;
    spec.write_polar_pgm(with_ext("_polar.pgm"), 256)
}

fn cmd_spectrum(cli: &Cli, a: &SpectrumArgs) -> Result<()> {
    let settings = render_settings(cli, &a.overrides)?;
    let data = Dataset::load(&a.data)?;
    let record = data.records.get(a.index).ok_or_else(|| {
        CkmError::EmptyInput(format!("dataset has {} records, index {} requested", data.len(), a.index))
    })?;
    let channel = match &a.checkpoint {
        Some(path) => {
            let scene = Scene::load(path)?;
            let kernels = SceneKernels::new(&scene, settings.eps_sel);
            let renderer = Renderer::new(data.header.array, settings.render());
            trace(&kernels, &renderer, &Pose::of(record))?.channel
        }
        None => record.channel.clone(),
    };
    prepare_out(&cli.out, &settings)?;
    export_spectrum(&channel, &data.header.array, &settings, &cli.out.join("spectrum"))?;
    println!("id={} gain_db={:.4}", record.id, gain_db(&channel));
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let settings = render_settings(cli, &a.overrides)?;
    let data = Dataset::load(&a.data)?;
    let grid = settings.spectrum_grid(&data.header.array);
    let summary = if let Some(path) = &a.checkpoint {
        let scene = Scene::load(path)?;
        evaluate(&scene, &data, &settings.render(), grid)?
    } else {
        let pred = Dataset::load(a.predictions.as_ref().expect("clap requires one source"))?;
        pred.expect_array(&data.header.array)?;
        let by_id: std::collections::HashMap<&str, &ChannelVector> =
            pred.records.iter().map(|m| (m.id.as_str(), &m.channel)).collect();
        let channels = data
            .records
            .iter()
            .map(|m| {
                by_id
                    .get(m.id.as_str())
                    .map(|c| (*c).clone())
                    .ok_or_else(|| CkmError::ShapeMismatch(format!("no prediction for id {}", m.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate_channels(&channels, &data, grid)?
    };
    prepare_out(&cli.out, &settings)?;
    write_json(&cli.out.join("summary.json"), &summary)?;
    println!(
        "samples={} gain_mae_db={:.4} gain_nmae={:.4} ssim={:.4}",
        summary.samples, summary.gain_mae_db, summary.gain_nmae, summary.ssim
    );
    Ok(())
}
