//! Command-line front end. Every subcommand reads and writes only the paths
//! given on its own command line; diagnostics go to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nerfstego::container;
use nerfstego::dataset::{self, SceneSpec};
use nerfstego::field::{FieldConfig, TrainOptions, train_field};
use nerfstego::pipeline::{
    attacker_sweep, capacity_csv, capacity_evaluation, default_sweep_offsets, embed,
    extract_message, EmbedOptions, SweepAxis,
};
use nerfstego::codec::BitPlanes;
use nerfstego::render::{render_image, JitterPolicy, RenderOptions, ViewKey};

#[derive(Parser)]
#[command(
    name = "nerfstego",
    about = "Hide a message behind a neural radiance field; the camera viewpoint is the key",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train scene weights from a procedural scene or an image dataset
    TrainNerf(TrainNerfArgs),
    /// Write a viewpoint key file
    Keygen(KeygenArgs),
    /// Render the view a key describes
    Render(RenderArgs),
    /// Embed a message: train the extractor on the keyed view
    Embed(EmbedArgs),
    /// Recover the message from a bundle using a key
    Extract(ExtractArgs),
    /// Measure how extraction degrades as the viewpoint drifts off key
    Sweep(SweepArgs),
    /// Embed at several plane depths and tabulate convergence and leakage
    Capacity(CapacityArgs),
}

#[derive(Args)]
struct TrainNerfArgs {
    /// Scene description JSON (procedural spheres); omit for the built-in scene
    #[arg(long, conflicts_with = "dataset")]
    scene: Option<PathBuf>,
    /// Directory with transforms.json and posed images, used instead of a procedural scene
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Integer downscale factor for dataset images
    #[arg(long, default_value_t = 1)]
    downscale: usize,
    /// Number of procedural training views
    #[arg(long, default_value_t = 20)]
    views: usize,
    /// Square resolution of procedural training views
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Training iterations
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    /// Rays per batch
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of the field networks
    #[arg(long, default_value_t = 32)]
    field_width: usize,
    /// Trunk depth of the field networks
    #[arg(long, default_value_t = 2)]
    field_depth: usize,
    /// Coarse samples per ray during training
    #[arg(long, default_value_t = 32)]
    n_coarse: usize,
    /// Fine samples per ray during training
    #[arg(long, default_value_t = 32)]
    n_fine: usize,
    /// Output field container (.nrsg)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KeygenArgs {
    /// Azimuth in degrees
    #[arg(long, allow_hyphen_values = true)]
    theta: f64,
    /// Elevation in degrees (0 is the equator, -90 straight down onto the scene)
    #[arg(long, allow_hyphen_values = true)]
    phi: f64,
    /// Camera distance from the origin
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Square view resolution in pixels
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Output key file (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Field or bundle container (.nrsg)
    #[arg(long)]
    model: PathBuf,
    /// Key file naming the viewpoint
    #[arg(long)]
    key: PathBuf,
    /// Coarse samples per ray (field containers only; bundles pin their own)
    #[arg(long, default_value_t = 64)]
    n_coarse: usize,
    /// Fine samples per ray
    #[arg(long, default_value_t = 64)]
    n_fine: usize,
    /// Seed for stratified jitter
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image (.ppm default, .png by extension)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Field container (.nrsg) holding the cover scene
    #[arg(long)]
    model: PathBuf,
    /// Key file naming the secret viewpoint
    #[arg(long)]
    key: PathBuf,
    /// File whose bytes are the message
    #[arg(long)]
    message: PathBuf,
    /// Bit planes per pixel
    #[arg(long, default_value_t = 1)]
    depth: usize,
    /// Epoch budget for the extractor overfit
    #[arg(long, default_value_t = 5000)]
    epochs: usize,
    /// Adam learning rate for the extractor
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coarse samples per ray, pinned into the bundle
    #[arg(long, default_value_t = 64)]
    n_coarse: usize,
    /// Fine samples per ray, pinned into the bundle
    #[arg(long, default_value_t = 64)]
    n_fine: usize,
    /// Output bundle container (.nrsg)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// Bundle container (.nrsg)
    #[arg(long)]
    model: PathBuf,
    /// Key file naming the secret viewpoint
    #[arg(long)]
    key: PathBuf,
    /// Output file for the recovered message bytes
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Bundle container (.nrsg)
    #[arg(long)]
    model: PathBuf,
    /// Key file naming the true viewpoint
    #[arg(long)]
    key: PathBuf,
    /// The embedded message, used as ground truth for accuracy
    #[arg(long)]
    message: PathBuf,
    /// Which camera angle to perturb
    #[arg(long, default_value = "theta")]
    axis: SweepAxis,
    /// Comma-separated angle offsets in degrees
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offsets: Option<Vec<f64>>,
    /// Output table (.csv default, .json by extension)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CapacityArgs {
    /// Field container (.nrsg) holding the cover scene
    #[arg(long)]
    model: PathBuf,
    /// Key file naming the secret viewpoint
    #[arg(long)]
    key: PathBuf,
    /// File whose bytes are the message
    #[arg(long)]
    message: PathBuf,
    /// Comma-separated plane depths to evaluate
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3])]
    depths: Vec<usize>,
    /// Epoch budget per embed
    #[arg(long, default_value_t = 5000)]
    epochs: usize,
    /// Adam learning rate for the extractor
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output table (.csv)
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainNerf(a) => train_nerf(a),
        Command::Keygen(a) => keygen(a),
        Command::Render(a) => render(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Capacity(a) => capacity_cmd(a),
    }
}

fn read_key(path: &Path) -> Result<ViewKey> {
    container::load_key(path).with_context(|| format!("reading key {}", path.display()))
}

fn read_message(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading message {}", path.display()))
}

fn train_nerf(a: TrainNerfArgs) -> Result<()> {
    let views = if let Some(dir) = &a.dataset {
        dataset::load_nerf_synthetic(dir, a.downscale)
            .with_context(|| format!("loading dataset {}", dir.display()))?
    } else {
        let spec = match &a.scene {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading scene {}", path.display()))?;
                serde_json::from_str::<SceneSpec>(&text)
                    .with_context(|| format!("parsing scene {}", path.display()))?
            }
            None => SceneSpec::three_spheres(),
        };
        let key = ViewKey::with_defaults(0.0, -30.0, a.res, a.res);
        dataset::generate_training_views(
            &spec,
            a.views,
            a.res,
            a.res,
            key.radius,
            key.focal_px,
            a.seed,
        )?
    };
    let config = FieldConfig {
        width: a.field_width,
        depth: a.field_depth,
        ..FieldConfig::default()
    };
    let opts = TrainOptions {
        iters: a.iters,
        batch_rays: a.batch,
        lr: a.lr,
        seed: a.seed,
        n_coarse: a.n_coarse,
        n_fine: a.n_fine,
        ..TrainOptions::default()
    };
    eprintln!(
        "training field on {} views ({} iterations)...",
        views.len(),
        opts.iters
    );
    let run = train_field(&views, &config, &opts)?;
    let tail = &run.loss_trace[run.loss_trace.len().saturating_sub(100)..];
    let tail_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    container::save_field(&a.out, &run.params)?;
    println!(
        "trained {} iterations, final loss {:.6} (mean of last {}); wrote {}",
        run.loss_trace.len(),
        tail_loss,
        tail.len(),
        a.out.display()
    );
    Ok(())
}

fn keygen(a: KeygenArgs) -> Result<()> {
    let mut key = ViewKey::with_defaults(a.theta, a.phi, a.res, a.res);
    key.radius = a.radius;
    container::save_key(&a.out, &key)?;
    println!(
        "key: theta {}, phi {}, radius {}, {}x{}; wrote {}",
        key.theta_deg,
        key.phi_deg,
        key.radius,
        key.width,
        key.height,
        a.out.display()
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let key = read_key(&a.key)?;
    let model = container::load_model(&a.model)
        .with_context(|| format!("reading model {}", a.model.display()))?;
    let (field, opts) = match model {
        container::LoadedModel::Bundle(b) => {
            let opts = b.manifest.render_options();
            (b.field, opts)
        }
        container::LoadedModel::Field(f) => (
            f,
            RenderOptions {
                n_coarse: a.n_coarse,
                n_fine: a.n_fine,
                jitter: JitterPolicy::Seeded(a.seed),
                ..RenderOptions::default()
            },
        ),
        container::LoadedModel::Extractor(_) => {
            bail!("{} holds an extractor; rendering needs a field or bundle", a.model.display())
        }
    };
    let image = render_image(&field.coarse_eval(), &field.fine_eval(), &key, &opts)?;
    image.save(&a.out)?;
    println!("rendered {}x{} view; wrote {}", key.width, key.height, a.out.display());
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let key = read_key(&a.key)?;
    let field = container::load_field(&a.model)
        .with_context(|| format!("reading field {}", a.model.display()))?;
    let message = read_message(&a.message)?;
    let opts = EmbedOptions {
        max_epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        n_coarse: a.n_coarse,
        n_fine: a.n_fine,
        jitter_seed: a.seed,
        ..EmbedOptions::default()
    };
    let (bundle, report) = embed(&field, &key, &message, a.depth, &opts)?;
    container::save_bundle(&a.out, &bundle)?;
    println!(
        "embedded {} bytes at depth {}: exact recovery after {} epochs ({:.1}s); wrote {}",
        message.len(),
        a.depth,
        report.epochs_to_100,
        report.wall_time_s,
        a.out.display()
    );
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    let key = read_key(&a.key)?;
    let bundle = container::load_bundle(&a.model)
        .with_context(|| format!("reading bundle {}", a.model.display()))?;
    let message = extract_message(&bundle, &key)?;
    fs::write(&a.out, &message)
        .with_context(|| format!("writing message {}", a.out.display()))?;
    println!("extracted {} bytes; wrote {}", message.len(), a.out.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let key = read_key(&a.key)?;
    let bundle = container::load_bundle(&a.model)
        .with_context(|| format!("reading bundle {}", a.model.display()))?;
    let message = read_message(&a.message)?;
    let m = &bundle.manifest;
    let planes = BitPlanes::from_message(&message, m.depth_planes, m.height, m.width)?;
    let offsets = a.offsets.unwrap_or_else(default_sweep_offsets);
    let report = attacker_sweep(&bundle, &key, &planes, a.axis, &offsets)?;
    let text = match a.out.extension().and_then(|e| e.to_str()) {
        Some("json") => report.to_json(),
        _ => report.to_csv(),
    };
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "swept {} offsets along {}; wrote {}",
        report.rows.len(),
        report.axis.as_str(),
        a.out.display()
    );
    Ok(())
}

fn capacity_cmd(a: CapacityArgs) -> Result<()> {
    let key = read_key(&a.key)?;
    let field = container::load_field(&a.model)
        .with_context(|| format!("reading field {}", a.model.display()))?;
    let message = read_message(&a.message)?;
    let opts = EmbedOptions {
        max_epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        jitter_seed: a.seed,
        ..EmbedOptions::default()
    };
    let rows = capacity_evaluation(&field, &key, &message, &a.depths, &opts)?;
    fs::write(&a.out, capacity_csv(&rows))
        .with_context(|| format!("writing {}", a.out.display()))?;
    for row in &rows {
        println!(
            "depth {}: exact at epoch {}, off-key mean acc {:.4}, rs_bpp {:.4}",
            row.depth_planes, row.epochs_to_100, row.offkey_mean_acc, row.offkey_mean_rsbpp
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
