use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elastoreg::config::ExperimentConfig;
use elastoreg::experiment::{
    dispfield_file_name, frame_index, metric_rows, read_sequence, register_all, registration_mesh, simulate,
    sweep_alpha, write_sequence, write_strain_raster,
};
use elastoreg::forward::TruthSequence;
use elastoreg::io::write_atomic;
use elastoreg::metrics::{metrics_to_csv, strain_from_displacement, RoiMask};
use elastoreg::registration::{reports_to_csv, DispField};
use elastoreg::rf::{convert_raw_frames, RawLayout, RawSampleType};
use elastoreg::{Error, QuadMesh, Result};

#[derive(Parser)]
#[command(
    name = "elastoreg",
    version,
    about = "Regularized image registration for quasi-static ultrasound elastography"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the scatterer and noise seeds.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed_override {
            cfg.override_seed(seed);
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::from(e).context(out.display().to_string()))?;
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Forward-solve the phantom and render the RF frame sequence.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Register a frame sequence with every configured regularizer.
    Register {
        #[command(flatten)]
        common: Common,
        /// Directory holding `sequence.txt` and its frames.
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Single-pair total strain error over a log-spaced α grid.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated α values replacing the configured grid.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Error and contrast metrics of registered fields against truth.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Truth sequence on the registration mesh.
        #[arg(long)]
        truth: PathBuf,
        /// A `.dispfield` file or a directory of them.
        #[arg(long)]
        measured: PathBuf,
        /// Registration mesh; defaults to `registration_mesh.txt` beside the truth file.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Convert raw little-endian RF data into an RF frame sequence.
    ConvertRf {
        /// Raw file of consecutive frames, each `lines` scan lines of
        /// `axial-samples` contiguous samples.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the converted sequence.
        #[arg(long)]
        out: PathBuf,
        /// Sample type: i16, f32 or f64.
        #[arg(long, default_value = "i16")]
        dtype: RawSampleType,
        /// Samples per scan line.
        #[arg(long)]
        axial_samples: usize,
        /// Scan lines per frame.
        #[arg(long)]
        lines: usize,
        /// Axial sample spacing in mm.
        #[arg(long)]
        axial_spacing: f64,
        /// Scan-line spacing in mm.
        #[arg(long)]
        lateral_spacing: f64,
        /// Depth of the first sample in mm.
        #[arg(long, default_value_t = 0.0)]
        origin_axial: f64,
        /// Lateral position of the first scan line in mm.
        #[arg(long, default_value_t = 0.0)]
        origin_lateral: f64,
        /// Keep every n-th frame.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::from(e).context(path.display().to_string())
}

fn cmd_simulate(common: &Common) -> Result<()> {
    let (cfg, out) = common.load()?;
    let sim = simulate(&cfg)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    sim.forward_mesh.write(&out.join("forward_mesh.txt"))?;
    TruthSequence::new(&sim.forward_mesh, sim.truth.clone())?.write(&out.join("truth.truthseq"))?;
    sim.registration_mesh.write(&out.join("registration_mesh.txt"))?;
    TruthSequence::new(&sim.registration_mesh, sim.truth_registration.clone())?
        .write(&out.join("truth_registration.truthseq"))?;
    write_atomic(&out.join("scatterers.csv"), sim.scatterers.to_csv().as_bytes())?;
    write_sequence(&out, &sim.frames)
}

fn cmd_register(common: &Common, sequence: &Path) -> Result<()> {
    let (cfg, out) = common.load()?;
    let frames = read_sequence(sequence)?;
    let mesh = registration_mesh(&cfg, frames[0].geometry())?;
    mesh.write(&out.join("registration_mesh.txt"))?;
    let runs = register_all(&cfg, &mesh, &frames)?;
    let mut rows = Vec::new();
    for run in &runs {
        let dir = out.join(run.label());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let res = &run.result;
        for (k, (inc, report)) in res.increments.iter().zip(&res.reports).enumerate() {
            DispField::new(&mesh, inc.clone(), res.accumulated[k + 1].clone())?
                .write(&dir.join(dispfield_file_name(k + 1)))?;
            rows.push((run.label().to_string(), k + 1, report));
        }
        let last = res.accumulated.last().expect("at least two frames");
        let strain = strain_from_displacement(&mesh, last)?;
        write_strain_raster(&mesh, &strain, 0, &dir.join("exx_accumulated"))?;
    }
    write_atomic(&out.join("report.csv"), reports_to_csv(&rows).as_bytes())
}

fn cmd_sweep(common: &Common, alphas: Option<&[f64]>) -> Result<()> {
    let (mut cfg, out) = common.load()?;
    if let Some(a) = alphas {
        cfg.sweep.alphas.values = Some(a.to_vec());
        cfg.validate()?;
    }
    let sweep = sweep_alpha(&cfg)?;
    write_atomic(&out.join("sweep.csv"), sweep.points_csv().as_bytes())?;
    write_atomic(&out.join("sweep_summary.csv"), sweep.summary_csv().as_bytes())
}

fn measured_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dispfield"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NotFound(path.join("*.dispfield")));
    }
    Ok(files)
}

fn cmd_metrics(common: &Common, truth_path: &Path, measured: &Path, mesh_path: Option<&Path>) -> Result<bool> {
    let (cfg, out) = common.load()?;
    let truth = TruthSequence::read(truth_path)?;
    let mesh_path = mesh_path.map(Path::to_path_buf).unwrap_or_else(|| {
        truth_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("registration_mesh.txt")
    });
    let mesh = QuadMesh::read(&mesh_path)?;
    truth.check_mesh(&mesh)?;
    let roi = RoiMask::from_shape(&mesh, &cfg.roi()?)?;
    let hash = mesh.hash();
    let mut fields = Vec::new();
    for file in measured_files(measured)? {
        let d = DispField::read(&file)?;
        if d.mesh_hash != hash {
            return Err(Error::Incompatible(format!(
                "{} was computed on mesh {} but the truth uses mesh {hash}",
                file.display(),
                d.mesh_hash
            )));
        }
        let k = frame_index(&file)
            .ok_or_else(|| Error::invalid(format!("cannot read a frame index from {}", file.display())))?;
        fields.push((k, d.accumulated));
    }
    let dir = if measured.is_dir() {
        measured
    } else {
        measured.parent().unwrap_or(Path::new("."))
    };
    let label = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("measured")
        .to_string();
    let rows = metric_rows(&cfg.name, &label, &mesh, &truth.frames, &fields, &roi)?;
    write_atomic(&out.join("metrics.csv"), metrics_to_csv(&rows).as_bytes())?;
    Ok(rows.iter().all(|r| r.value.defined))
}

fn cmd_convert(input: &Path, out: &Path, layout: RawLayout) -> Result<()> {
    let bytes = elastoreg::io::read_bytes(input)?;
    let frames = convert_raw_frames(&bytes, &layout).map_err(|e| e.context(input.display().to_string()))?;
    write_sequence(out, &frames)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("--jobs: {e}")))?;
    }
    match &cli.command {
        Command::Simulate { common } => cmd_simulate(common)?,
        Command::Register { common, sequence } => cmd_register(common, sequence)?,
        Command::SweepAlpha { common, alphas } => cmd_sweep(common, alphas.as_deref())?,
        Command::Metrics {
            common,
            truth,
            measured,
            mesh,
        } => {
            if !cmd_metrics(common, truth, measured, mesh.as_deref())? {
                eprintln!("error: undefined-metric: at least one metric is undefined (reported as inf)");
                return Ok(ExitCode::from(3));
            }
        }
        Command::ConvertRf {
            input,
            out,
            dtype,
            axial_samples,
            lines,
            axial_spacing,
            lateral_spacing,
            origin_axial,
            origin_lateral,
            stride,
        } => cmd_convert(
            input,
            out,
            RawLayout {
                sample_type: *dtype,
                axial_samples: *axial_samples,
                lines: *lines,
                axial_spacing: *axial_spacing,
                lateral_spacing: *lateral_spacing,
                origin: [*origin_axial, *origin_lateral],
                stride: *stride,
            },
        )?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {}: {msg}", e.root().code());
            ExitCode::from(1)
        }
    }
}
