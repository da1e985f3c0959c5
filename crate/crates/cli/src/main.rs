use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hybrid_splat::checkpoint;
use hybrid_splat::config::{Ablation, Precision, TrainConfig};
use hybrid_splat::dataset::{Dataset, Split};
use hybrid_splat::image_buf::ImageBuffer;
use hybrid_splat::mesh_raster::bake_texture;
use hybrid_splat::synth::{emit_dataset, make_box_scene, EmitOptions, RoomSpec, MIN_VIEWS};
use hybrid_splat::trainer::{evaluate, render_state, TrainState, Trainer};
use hybrid_splat::Real;

/// Hybrid Gaussian / layout-mesh room reconstruction.
#[derive(Parser)]
#[command(name = "hybrid-splat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic box-room dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of ellipsoid objects in the room.
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Number of views (at least 8; every eighth is a test view).
        #[arg(long, default_value_t = 90, value_parser = parse_views)]
        views: usize,
        /// Square image resolution in pixels.
        #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u32).range(8..=4096))]
        res: u32,
        /// Plain walls and floor instead of striped / checkered ones.
        #[arg(long)]
        textureless: bool,
        /// Number of sparse initialization points.
        #[arg(long, default_value_t = 3000)]
        points: usize,
        /// Emit only disjoint ground-truth instance masks (no nested part masks).
        #[arg(long)]
        no_part_masks: bool,
    },
    /// Train on a dataset and write a checkpoint plus logs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoint.bin, config.toml, log.jsonl, report.json).
        #[arg(long)]
        out: PathBuf,
        /// TOML file whose keys override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ablation preset.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a checkpoint from a camera.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// TOML camera file, or `<dataset dir>:<view name>`.
        #[arg(long)]
        camera: String,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate PSNR/SSIM/GIoU/LIoU on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path (printed to stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replace the texture of one layout face group with an image.
    EditLayout {
        #[arg(long)]
        ckpt: PathBuf,
        /// Face group name, e.g. `wall_2` or `floor`.
        #[arg(long)]
        face: String,
        /// RGB PNG to bake onto the face.
        #[arg(long)]
        texture: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
    #[value(name = "C", alias = "c")]
    C,
    #[value(name = "D", alias = "d")]
    D,
    Ours,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::A => Ablation::A,
            AblationArg::B => Ablation::B,
            AblationArg::C => Ablation::C,
            AblationArg::D => Ablation::D,
            AblationArg::Ours => Ablation::Ours,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Gaussians composited over the mesh.
    Both,
    /// Gaussians alone over the background.
    Gauss,
    /// Mesh alone over the background.
    Mesh,
    /// Gaussian opacity map (grayscale).
    Opacity,
}

fn parse_views(s: &str) -> std::result::Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n < MIN_VIEWS {
        return Err(format!("at least {MIN_VIEWS} views are required"));
    }
    Ok(n)
}

fn synth(out: &Path, spec: RoomSpec, opts: EmitOptions) -> Result<()> {
    let scene = make_box_scene(&spec)?;
    let file = emit_dataset(&scene, &opts, out)?;
    let test = file.views.iter().filter(|v| v.split == Split::Test).count();
    println!("wrote {} ({} train / {} test views)", out.display(), file.views.len() - test, test);
    Ok(())
}

fn train<T: Real>(data: &Path, out: &Path, cfg: TrainConfig) -> Result<()> {
    let ds = Dataset::<T>::load(data, cfg.masks.min_area)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut tr = Trainer::new(cfg, &ds)?;
    tr.pretrain()?;
    log::info!("pretraining done ({} iterations)", tr.state.pretrain_done);
    let mut log_file = fs::File::create(out.join("log.jsonl"))?;
    let total = tr.config.schedule.total_iters;
    while tr.state.iteration < total {
        tr.step()?;
        for r in tr.records.drain(..) {
            log::info!(
                "it {} {:?} loss {:.5} (l1 {:.5} mask {:.5}) gaussians {}",
                r.iteration,
                r.phase,
                r.total,
                r.l1,
                r.mask,
                r.num_gaussians
            );
            writeln!(log_file, "{}", serde_json::to_string(&r)?)?;
        }
    }
    checkpoint::save(&out.join("checkpoint.bin"), &tr.state, &tr.config)?;
    fs::write(out.join("trace.json"), serde_json::to_string(&tr.trace)?)?;
    fs::write(out.join("events.json"), serde_json::to_string_pretty(&tr.events)?)?;
    let report = tr.evaluate(Split::Test)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "trained {} iterations: {} Gaussians, test PSNR {:.3} SSIM {:.4} GIoU {} LIoU {}",
        total,
        report.num_gaussians,
        report.mean.psnr,
        report.mean.ssim,
        fmt_opt(report.mean.giou),
        fmt_opt(report.mean.liou)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn load_camera<T: Real>(spec: &str) -> Result<hybrid_splat::camera::Camera<T>> {
    let cam: hybrid_splat::camera::Camera<f64> = if let Some((dir, view)) = spec.rsplit_once(':').filter(|(d, _)| Path::new(d).is_dir()) {
        let scene = hybrid_splat::dataset::SceneFile::load(&Path::new(dir).join("scene.toml"))?;
        match scene.views.into_iter().find(|v| v.name == view) {
            Some(v) => v.camera,
            None => bail!("no view named `{view}` in {dir}"),
        }
    } else {
        let text = fs::read_to_string(spec).with_context(|| format!("reading camera file {spec}"))?;
        toml::from_str(&text).with_context(|| format!("parsing camera file {spec}"))?
    };
    cam.validate()?;
    Ok(cam.cast())
}

fn render_cmd<T: Real>(ckpt: &Path, camera: &str, mode: Mode, out: &Path) -> Result<()> {
    let (state, cfg) = checkpoint::load::<T>(ckpt)?;
    let cam = load_camera::<T>(camera)?;
    let r = render_state(&state, &cam, cfg.clip_at_mesh.then(|| T::lit(cfg.cull_eps)))?;
    let bg = state.background;
    let img = match mode {
        Mode::Both => r.both,
        Mode::Gauss => {
            let mut img = r.gaussians.color.clone();
            for p in 0..img.num_pixels() {
                let t = T::one() - r.gaussians.opacity.data[p];
                for (c, v) in img.pixel_mut(p).iter_mut().enumerate() {
                    *v += t * bg[c];
                }
            }
            img
        }
        Mode::Mesh => {
            let mut img = r.mesh.color.clone();
            for p in 0..img.num_pixels() {
                if !r.mesh.is_covered(p) {
                    img.pixel_mut(p).copy_from_slice(&bg);
                }
            }
            img
        }
        Mode::Opacity => r.gaussians.opacity,
    };
    img.save_png(out)?;
    Ok(())
}

fn eval_cmd<T: Real>(ckpt: &Path, data: &Path, report: Option<&Path>) -> Result<()> {
    let (state, cfg) = checkpoint::load::<T>(ckpt)?;
    let ds = Dataset::<T>::load(data, cfg.masks.min_area)?;
    let rep = evaluate(&state, &ds, Split::Test, cfg.clip_at_mesh.then_some(cfg.cull_eps))?;
    let json = serde_json::to_string_pretty(&rep)?;
    match report {
        Some(p) => {
            fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            println!(
                "PSNR {:.3} SSIM {:.4} GIoU {} LIoU {} over {} views",
                rep.mean.psnr,
                rep.mean.ssim,
                fmt_opt(rep.mean.giou),
                fmt_opt(rep.mean.liou),
                rep.views.len()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn edit_cmd<T: Real>(ckpt: &Path, face: &str, texture: &Path, out: &Path) -> Result<()> {
    let (state, cfg): (TrainState<T>, _) = checkpoint::load(ckpt)?;
    let img = ImageBuffer::<T>::load_rgb(texture)?;
    let mesh = bake_texture(&state.mesh, face, &img)?;
    let state = TrainState { mesh, ..state };
    checkpoint::save(out, &state, &cfg)?;
    Ok(())
}

fn checkpoint_width(path: &Path) -> Result<usize> {
    let mut head = [0u8; 9];
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    std::io::Read::read_exact(&mut f, &mut head).with_context(|| format!("{} is too short to be a checkpoint", path.display()))?;
    Ok(checkpoint::peek_scalar_width(&head)?)
}

/// Runs `$f::<f32>` or `$f::<f64>` depending on the checkpoint's scalar width.
macro_rules! by_width {
    ($ckpt:expr, $f:ident($($a:expr),*)) => {
        match checkpoint_width($ckpt)? {
            8 => $f::<f64>($($a),*),
            _ => $f::<f32>($($a),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, objects, views, res, textureless, points, no_part_masks } => {
            let spec = RoomSpec { num_objects: objects, textureless, seed, ..Default::default() };
            let res = res as usize;
            let opts = EmitOptions { n_views: views, width: res, height: res, sam_like: !no_part_masks, num_points: points, ..Default::default() };
            synth(&out, spec, opts)
        }
        Command::Train { data, out, config, ablation, seed } => {
            let overrides = match &config {
                Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
                None => None,
            };
            let mut cfg = TrainConfig::compose(ablation.map(Into::into), overrides.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match cfg.precision {
                Precision::F32 => train::<f32>(&data, &out, cfg),
                Precision::F64 => train::<f64>(&data, &out, cfg),
            }
        }
        Command::Render { ckpt, camera, mode, out } => by_width!(&ckpt, render_cmd(&ckpt, &camera, mode, &out)),
        Command::Eval { ckpt, data, report } => by_width!(&ckpt, eval_cmd(&ckpt, &data, report.as_deref())),
        Command::EditLayout { ckpt, face, texture, out } => by_width!(&ckpt, edit_cmd(&ckpt, &face, &texture, &out)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
