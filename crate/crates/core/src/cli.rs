//! The `atlasforge` command line.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::{
    correspond_chart, correspond_sampling, domain_samples, evaluate_reconstruction, keypoint_normals, metrics_csv,
    metrics_json, CorrespondenceResult, EvalConfig, EvalError, MetricRecord,
};
use crate::geometry::{
    load_shape, read_keypoints, reconstruction_mesh, save_obj, ExportError, GeometryError, Shape, ShapeSource,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckSize, TERMS};
use crate::network::NetworkError;
use crate::sampler::{
    default_threshold, domain_svg, extract_domain, triangulate_domain, write_grid, Domain2DMesh, DomainGrid,
    SamplerError,
};
use crate::trainer::{AtlasCollection, Checkpoint, TrainConfig, TrainError, Trainer, TrainingShape};

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "atlasforge", version, about = "Learned parameterizations with analytic normals and chart maps")]
pub struct Cli {
    /// Worker threads; 0 picks the core count. 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an atlas on one shape or a collection.
    Train(TrainArgs),
    /// Export reconstructed meshes with UVs over the shared domain.
    Mesh(MeshArgs),
    /// Export the learned domain as SVG, grid and 2D mesh.
    Domain(DomainArgs),
    /// Reconstruction metrics against target shapes.
    Eval(EvalArgs),
    /// Transfer keypoints from one shape to another.
    Correspond(CorrespondArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total iterations to reach (counting those of a resumed checkpoint).
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(6..=11))]
    pub ablation_row: Option<u32>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Density threshold for the final domain figure.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// OBJ, PLY or XYZ shapes; names are file stems.
    #[arg(required = true)]
    pub shapes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DomainOpts {
    /// Density threshold (default 0.3 × mean density at the means).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub domain: DomainOpts,
    /// Shape name or index; repeatable. Defaults to every shape.
    #[arg(long = "shape-id")]
    pub shape_ids: Vec<String>,
    /// Keep vertices in the normalized training frame.
    #[arg(long)]
    pub normalized: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DomainArgs {
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub domain: DomainOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Target shapes, matched to atlas shapes by file stem.
    #[arg(required = true)]
    pub targets: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub mprime: usize,
    /// Draws averaged per reported value.
    #[arg(long, default_value_t = 3)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "custom")]
    pub dataset: String,
    /// Method label; defaults to the ablation row of the checkpoint.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransferMethod {
    Chart,
    Sampling,
    Both,
}

#[derive(Debug, Args)]
pub struct CorrespondArgs {
    pub checkpoint: PathBuf,
    /// CSV rows `shape_id,keypoint_id,x,y,z`.
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    /// Source shape file; keypoint normals come from its nearest face.
    #[arg(long)]
    pub source_shape: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TransferMethod::Chart)]
    pub method: TransferMethod,
    /// Domain samples for the sampling method.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub size: GradcheckSize,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Negate one term's analytic gradient (the check must then fail).
    #[arg(long, hide = true)]
    pub flip_sign: Option<String>,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) => EXIT_CONFIG,
            TrainError::NonFinite { .. } => EXIT_NUMERICAL,
            TrainError::Io(..) => EXIT_IO,
            TrainError::Sampler(s) => return s.clone().into(),
            _ => EXIT_DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        let code = match e {
            SamplerError::EmptyDomain { .. } | SamplerError::InvalidThreshold(_) | SamplerError::ResolutionTooSmall(_) => {
                EXIT_CONFIG
            }
            _ => EXIT_DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        let code = if matches!(e, GeometryError::Io(..)) { EXIT_IO } else { EXIT_DATA };
        CliError::new(code, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::new(EXIT_DATA, e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::new(EXIT_DATA, e.to_string())
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Network(n) => n.into(),
            ExportError::Geometry(g) => g.into(),
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Domain(a) => cmd_domain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Correspond(a) => cmd_correspond(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_training_shapes(paths: &[PathBuf], interpolate_normals: bool) -> Result<Vec<TrainingShape>, CliError> {
    let mut shapes: Vec<TrainingShape> = Vec::with_capacity(paths.len());
    for p in paths {
        let name = stem(p);
        if shapes.iter().any(|s| s.name == name) {
            return Err(CliError::new(EXIT_DATA, format!("two shapes are named '{name}'")));
        }
        let loaded = load_shape(p, true)?;
        info!("loaded {} ({} positions)", p.display(), loaded.shape.positions().len());
        shapes.push(TrainingShape {
            name,
            source: ShapeSource::new(loaded.shape, interpolate_normals)?,
            normalization: loaded.normalization,
        });
    }
    Ok(shapes)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        TrainError::Checkpoint(m) => CliError::new(EXIT_DATA, format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

fn resolve_shape(atlas: &AtlasCollection, id: &str) -> Result<usize, CliError> {
    atlas
        .shape_index(id)
        .ok_or_else(|| CliError::new(EXIT_DATA, format!("unknown shape id '{id}'")))
}

fn shared_domain(atlas: &AtlasCollection, opts: &DomainOpts) -> Result<(DomainGrid, Domain2DMesh), CliError> {
    let tau = opts.tau.unwrap_or_else(|| default_threshold(&atlas.mixture));
    let grid = extract_domain(&atlas.mixture, opts.resolution, tau)?;
    let mesh = triangulate_domain(&grid);
    if mesh.triangles.is_empty() {
        return Err(SamplerError::EmptyDomain {
            tau,
            max: atlas.mixture.peak_bound(),
        }
        .into());
    }
    Ok((grid, mesh))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    let resumed = match &a.resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if let Some(ck) = &resumed {
        config = ck.config.clone();
    } else {
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        if let Some(row) = a.ablation_row {
            config = config.with_ablation_row(row)?;
        }
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    config.validate()?;
    if a.resolution < 16 {
        return Err(SamplerError::ResolutionTooSmall(a.resolution).into());
    }
    if let Some(t) = a.tau {
        if !(t > 0.0 && t.is_finite()) {
            return Err(SamplerError::InvalidThreshold(t).into());
        }
    }
    let shapes = load_training_shapes(&a.shapes, config.interpolate_normals)?;
    create_dir(&a.out)?;
    let mut trainer = match resumed {
        Some(ck) => {
            let mut t = Trainer::resume(ck, shapes)?;
            t.config.iterations = config.iterations;
            t
        }
        None => Trainer::new(config.clone(), shapes)?,
    };
    write_file(&a.out.join("config.toml"), &trainer.config.to_toml())?;

    let append = trainer.iteration > 0;
    let open = |name: &str| -> Result<BufWriter<File>, CliError> {
        let path = a.out.join(name);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        Ok(BufWriter::new(f))
    };
    let mut log = open("log.jsonl")?;
    let mut timing = open("timing.csv")?;
    if !append {
        writeln!(timing, "iteration,seconds").map_err(|e| CliError::io(&a.out, e))?;
    }
    let ck_path = a.out.join("checkpoint.json");
    let every = trainer.config.checkpoint_every;
    let target = trainer.config.iterations;
    info!(
        "training {} shape(s) for {} iterations (from {})",
        trainer.atlas.num_shapes(),
        target,
        trainer.iteration
    );
    while trainer.iteration < target {
        match trainer.step() {
            Ok(rec) => {
                writeln!(log, "{}", rec.to_json_line()).map_err(|e| CliError::io(&a.out, e))?;
                writeln!(timing, "{},{:.6}", rec.iteration, start.elapsed().as_secs_f64())
                    .map_err(|e| CliError::io(&a.out, e))?;
                if every > 0 && rec.iteration % every == 0 {
                    trainer.checkpoint().save(&ck_path)?;
                    info!("iteration {}: total {:.6e}", rec.iteration, rec.report.total);
                }
            }
            Err(e) => {
                log.flush().map_err(|e| CliError::io(&a.out, e))?;
                trainer.checkpoint().save(&ck_path)?;
                warn!("saved last good state (iteration {}) to {}", trainer.iteration, ck_path.display());
                return Err(e.into());
            }
        }
    }
    log.flush().map_err(|e| CliError::io(&a.out, e))?;
    timing.flush().map_err(|e| CliError::io(&a.out, e))?;
    trainer.checkpoint().save(&ck_path)?;

    let opts = DomainOpts {
        tau: a.tau,
        resolution: a.resolution,
    };
    match shared_domain(&trainer.atlas, &opts) {
        Ok((grid, mesh)) => write_file(&a.out.join("density.svg"), &domain_svg(&mesh, Some(&grid)))?,
        Err(e) => warn!("no density figure: {}", e.message),
    }
    info!("done in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_domain(a: DomainArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (grid, mesh) = shared_domain(&ck.atlas, &a.domain)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("domain.svg"), &domain_svg(&mesh, Some(&grid)))?;
    write_file(&a.out.join("domain.grid"), &write_grid(&grid))?;
    save_obj(&mesh.to_triangle_mesh(), &a.out.join("domain.obj"))?;
    info!(
        "domain: {} components, {} triangles, area {:.6}",
        grid.component_count(),
        mesh.triangles.len(),
        mesh.area()
    );
    Ok(())
}

fn cmd_mesh(a: MeshArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let atlas = &ck.atlas;
    let ids: Vec<usize> = if a.shape_ids.is_empty() {
        (0..atlas.num_shapes()).collect()
    } else {
        a.shape_ids.iter().map(|s| resolve_shape(atlas, s)).collect::<Result<_, _>>()?
    };
    let (grid, domain) = shared_domain(atlas, &a.domain)?;
    create_dir(&a.out)?;
    for i in ids {
        let frame = (!a.normalized).then(|| &atlas.normalizations[i]);
        let (mesh, _) = reconstruction_mesh(&domain, &atlas.phi, atlas.phi_code(i), frame)?;
        let path = a.out.join(format!("{}.obj", atlas.shape_names[i]));
        save_obj(&mesh, &path)?;
        info!("wrote {} ({} triangles)", path.display(), mesh.triangles.len());
    }
    write_file(&a.out.join("domain.svg"), &domain_svg(&domain, Some(&grid)))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let atlas = &ck.atlas;
    let cfg = EvalConfig {
        m_prime: a.mprime,
        draws: a.draws,
        seed: a.seed,
    };
    if cfg.m_prime == 0 || cfg.draws == 0 {
        return Err(CliError::new(EXIT_CONFIG, "--mprime and --draws must be at least 1"));
    }
    let method = a.method.clone().unwrap_or_else(|| match ck.config.flags.row() {
        Some(r) => format!("row{r}"),
        None => "custom".into(),
    });
    let mut records = Vec::new();
    for p in &a.targets {
        let name = stem(p);
        let i = resolve_shape(atlas, &name)?;
        let mut loaded = load_shape(p, false)?;
        let frame = atlas.normalizations[i];
        for q in loaded.shape.positions_mut() {
            *q = frame.apply(*q);
        }
        let source = ShapeSource::new(loaded.shape, ck.config.interpolate_normals)?;
        let r = evaluate_reconstruction(atlas, ck.config.flags.use_distribution, i, &source, &cfg)?;
        info!("{name}: {:?} back-facing {:.4}", r.metrics, r.back_facing);
        records.push(MetricRecord::new(&a.dataset, &name, &method, a.seed, &r.metrics, None));
    }
    create_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), &metrics_csv(&records))?;
    write_file(&a.out.join("metrics.json"), &metrics_json(&records))?;
    Ok(())
}

fn cmd_correspond(a: CorrespondArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let atlas = &ck.atlas;
    let src = resolve_shape(atlas, &a.source)?;
    let dst = resolve_shape(atlas, &a.target)?;
    let sets = read_keypoints(&a.keypoints)?;
    let missing = |id: &str| CliError::new(EXIT_DATA, format!("no keypoints for shape '{id}'"));
    let src_set = sets.get(&atlas.shape_names[src]).ok_or_else(|| missing(&atlas.shape_names[src]))?;
    let dst_set = sets.get(&atlas.shape_names[dst]).ok_or_else(|| missing(&atlas.shape_names[dst]))?;
    let mut ids = Vec::new();
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for k in &src_set.points {
        let gt = dst_set.get(&k.id).ok_or_else(|| {
            CliError::new(EXIT_DATA, format!("keypoint '{}' missing on shape '{}'", k.id, dst_set.shape_id))
        })?;
        ids.push(k.id.clone());
        points.push(k.position);
        truth.push(gt.position);
    }
    let methods: &[TransferMethod] = match a.method {
        TransferMethod::Both => &[TransferMethod::Chart, TransferMethod::Sampling],
        TransferMethod::Chart => &[TransferMethod::Chart],
        TransferMethod::Sampling => &[TransferMethod::Sampling],
    };
    let mut outputs = Vec::new();
    for &m in methods {
        let transferred = match m {
            TransferMethod::Chart => {
                let path = a
                    .source_shape
                    .as_ref()
                    .ok_or_else(|| CliError::new(EXIT_CONFIG, "the chart method needs --source-shape"))?;
                let shape: Shape = load_shape(path, false)?.shape;
                let normals = keypoint_normals(&shape, &points)?;
                correspond_chart(atlas, src, dst, &points, &normals)?
            }
            _ => {
                if a.samples == 0 {
                    return Err(CliError::new(EXIT_CONFIG, "--samples must be at least 1"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                let domain = domain_samples(atlas, ck.config.flags.use_distribution, a.samples, &mut rng);
                correspond_sampling(atlas, src, dst, &points, &domain)?
            }
        };
        let result = CorrespondenceResult::new(transferred, truth.clone());
        let name = if m == TransferMethod::Chart { "chart" } else { "sampling" };
        info!("{name}: mean L2 {:.6e} over {} keypoints", result.mean_error, ids.len());
        outputs.push((name, result));
    }
    create_dir(&a.out)?;
    for (name, result) in outputs {
        write_file(&a.out.join(format!("correspond_{name}.csv")), &result.to_csv(&ids))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let flip = match a.flip_sign.as_deref() {
        None => None,
        Some(t) => Some(
            *TERMS
                .iter()
                .find(|&&n| n == t)
                .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown loss term '{t}'")))?,
        ),
    };
    if a.seeds == 0 {
        return Err(CliError::new(EXIT_CONFIG, "--seeds must be at least 1"));
    }
    let opts = GradcheckOptions {
        size: a.size,
        seeds: a.seeds,
        flip_sign_of: flip,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_NUMERICAL, "gradient check failed"))
    }
}
