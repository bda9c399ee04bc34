use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rangesplat::expansion::{
    expand_reconstruct, extrapolate_poses, generate_scans, make_training_pairs, save_pairs, OracleProvider,
    PassthroughProvider, ScanProvider, SpoolProvider,
};
use rangesplat::field::Scene;
use rangesplat::io::{load_ply, load_rvim, save_f32_plane, save_mask_pgm, save_ply, save_rvim, Dataset, Manifest};
use rangesplat::metrics::evaluate;
use rangesplat::optimizer::{reconstruct_single_pass, write_loss_csv, LossRecord};
use rangesplat::rangeview::{project_points, unproject, BeamTable, Pose};
use rangesplat::rasterizer::{distortion_mask, median_scale_delta, render_attributes};
use rangesplat::synth::{corridor_fixture, is_heldout, SyntheticScene};

mod config;

use config::{ConfigVersion, RunConfig};

/// LiDAR novel-view synthesis with a neural 2D Gaussian field.
#[derive(Parser)]
#[command(name = "rangesplat", version)]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a sensor-frame PLY cloud to a range image
    Project {
        #[arg(long)]
        input: PathBuf,
        /// JSON with `beams` (radians) and `width`; a manifest works too
        #[arg(long)]
        beams: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Turn a range image back into a sensor-frame PLY cloud
    Unproject {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beams: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a scene on the frames of a manifest
    Reconstruct {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        output: PathBuf,
        /// Loss log (default: <output>.loss.csv)
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        anchors: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a checkpoint at one pose
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        pose: PoseArgs,
        /// Range image to write
        #[arg(long)]
        output: PathBuf,
        /// Also write the rendered returns as a sensor-frame PLY
        #[arg(long)]
        ply: Option<PathBuf>,
        /// Also write the median-depth plane (raw little-endian f32)
        #[arg(long)]
        median: Option<PathBuf>,
        /// Also write the depth-distortion mask as a PGM image
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Mask threshold in meters (default: median splat scale at this pose)
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Build degraded/clean training pairs for a scan generator
    Pairs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory to write pairs into
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Refine a checkpoint with generated scans at laterally shifted poses
    Expand {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Real frames the checkpoint was trained on
        #[arg(long)]
        manifest: PathBuf,
        /// oracle | passthrough | external:<spool directory>
        #[arg(long)]
        provider: String,
        /// Synthetic world for the oracle provider
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Lateral offsets in meters, comma separated
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        offsets: Option<Vec<f64>>,
        /// Apply generated scans without the distortion mask
        #[arg(long)]
        no_mask: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint against the scans of a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report to write
        #[arg(long)]
        output: PathBuf,
        /// Also write the text table here
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset with ground truth for every lane
    Fixture {
        /// Only `corridor` exists
        #[arg(long, default_value = "corridor")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the default run configuration
    Config,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PoseArgs {
    /// Sensor-to-world transform, 16 row-major values, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "frame")]
    pose: Option<Vec<f64>>,
    /// Manifest providing the beams (and the pose with --frame)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Beam layout when no manifest is given
    #[arg(long)]
    beams: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    frame: Option<usize>,
}

impl PoseArgs {
    fn resolve(&self) -> Result<(BeamTable, Pose)> {
        let manifest = match (&self.manifest, &self.beams) {
            (Some(m), _) | (None, Some(m)) => Manifest::load(m).with_context(|| format!("reading {}", m.display()))?,
            (None, None) => bail!(Usage("render needs --manifest or --beams".into())),
        };
        let beams = manifest.beam_table()?;
        let pose = match (&self.pose, self.frame) {
            (Some(v), _) => {
                let arr: [f64; 16] = v.as_slice().try_into().map_err(|_| Usage(format!("--pose needs 16 values, got {}", v.len())))?;
                Pose::from_row_major(&arr, 0.0)?
            }
            (None, Some(i)) => {
                let poses = manifest.poses()?;
                *poses.get(i).ok_or_else(|| Usage(format!("frame {i} not in manifest ({} frames)", poses.len())))?
            }
            (None, None) => bail!(Usage("render needs --pose or --frame".into())),
        };
        Ok((beams, pose))
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_beams(path: &Path) -> Result<BeamTable> {
    Ok(Manifest::load(path).with_context(|| format!("reading beams {}", path.display()))?.beam_table()?)
}

fn load_checkpoint(path: &Path) -> Result<Scene> {
    Scene::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn write_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_loss_csv(f, log)?;
    Ok(())
}

fn default_log(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn provider_for(spec: &str, scene: Option<&Path>) -> Result<Box<dyn ScanProvider>> {
    Ok(match spec.split_once(':') {
        None if spec == "oracle" => {
            let path = scene.ok_or_else(|| Usage("the oracle provider needs --scene".into()))?;
            let world = SyntheticScene::load(path).with_context(|| format!("reading scene {}", path.display()))?;
            Box::new(OracleProvider { scene: world })
        }
        None if spec == "passthrough" => Box::new(PassthroughProvider),
        Some(("external", dir)) if !dir.is_empty() => Box::new(SpoolProvider::from_env(dir).map_err(|e| Usage(e.to_string()))?),
        _ => bail!(Usage(format!("unknown provider {spec:?}; use oracle, passthrough or external:<dir>"))),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Project { input, beams, output } => {
            let beams = load_beams(&beams)?;
            let points = load_ply(&input).with_context(|| format!("reading {}", input.display()))?;
            let img = project_points(&points, &beams)?;
            save_rvim(&output, &img)?;
            log::info!("{} points -> {} returns", points.len(), img.return_count());
        }
        Command::Unproject { input, beams, output } => {
            let beams = load_beams(&beams)?;
            let img = load_rvim(&input).with_context(|| format!("reading {}", input.display()))?;
            if img.dims() != (beams.height(), beams.width()) {
                bail!(rangesplat::Error::DimensionMismatch {
                    expected: (beams.height(), beams.width()),
                    got: img.dims(),
                });
            }
            let points = unproject(&img, &beams);
            save_ply(&output, &points)?;
            log::info!("{} points", points.len());
        }
        Command::Reconstruct {
            manifest,
            output,
            loss_csv,
            iters,
            anchors,
            common,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = iters {
                cfg.reconstruct.iterations = n;
            }
            if let Some(n) = anchors {
                cfg.reconstruct.anchors = n;
            }
            let data = load_dataset(&manifest)?;
            let trainer = reconstruct_single_pass(&data.frames, &data.beams, &cfg.reconstruct, cfg.seed)?;
            trainer.scene.save(&output)?;
            write_log(&loss_csv.unwrap_or_else(|| default_log(&output)), &trainer.log)?;
            log::info!("{} anchors written to {}", trainer.scene.anchor_count(), output.display());
        }
        Command::Render {
            checkpoint,
            pose,
            output,
            ply,
            median,
            mask,
            delta,
        } => {
            let scene = load_checkpoint(&checkpoint)?;
            let (beams, pose) = pose.resolve()?;
            let attrs = scene.decode(&pose);
            let out = render_attributes(&attrs, &pose, &beams, scene.config.d_min);
            save_rvim(&output, &out.image)?;
            if let Some(p) = ply {
                save_ply(&p, &unproject(&out.image, &beams))?;
            }
            if let Some(p) = median {
                save_f32_plane(&p, &out.median_depth)?;
            }
            if let Some(p) = mask {
                let delta = match delta {
                    Some(d) => d,
                    None => median_scale_delta(&attrs)?,
                };
                let m = distortion_mask(&out, delta)?;
                save_mask_pgm(&p, m.height, m.width, &m.mask)?;
                log::info!("mask: {} of {} pixels at delta {delta:.4}", m.count(), m.mask.len());
            }
        }
        Command::Pairs {
            checkpoint,
            manifest,
            output,
            sigma,
            tau,
            common,
        } => {
            let cfg = common.load()?;
            let scene = load_checkpoint(&checkpoint)?;
            let data = load_dataset(&manifest)?;
            let pairs = make_training_pairs(
                &scene,
                &data.frames,
                &data.beams,
                sigma.unwrap_or(cfg.pairs.sigma),
                tau.unwrap_or(cfg.pairs.tau),
                cfg.seed,
            )?;
            save_pairs(&output, &pairs, &data.beams)?;
            log::info!("{} pairs written to {}", pairs.len(), output.display());
        }
        Command::Expand {
            checkpoint,
            manifest,
            provider,
            scene: world,
            output,
            loss_csv,
            iters,
            offsets,
            no_mask,
            common,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = iters {
                cfg.expand.iterations = n;
            }
            if let Some(o) = offsets {
                cfg.expand.offsets = o;
            }
            if no_mask {
                cfg.expand.masked = false;
            }
            let provider = provider_for(&provider, world.as_deref())?;
            let scene = load_checkpoint(&checkpoint)?;
            let data = load_dataset(&manifest)?;
            let poses = extrapolate_poses(&data.poses(), &cfg.expand.offsets);
            let gen = generate_scans(&scene, &poses, provider.as_ref(), &data.beams)?;
            for (i, msg) in &gen.failures {
                log::warn!("extrapolated pose {i} skipped: {msg}");
            }
            log::info!("{} of {} generated scans usable", gen.scans.len(), poses.len());
            let e = expand_reconstruct(&scene, &data.frames, &gen.scans, &data.beams, &cfg.expand, cfg.seed)?;
            e.scene.save(&output)?;
            write_log(&loss_csv.unwrap_or_else(|| default_log(&output)), &e.log)?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            output,
            table,
            common,
        } => {
            let cfg = common.load()?;
            let scene = load_checkpoint(&checkpoint)?;
            let data = load_dataset(&manifest)?;
            let report = evaluate(&scene, &data.frames, &data.beams, &cfg.eval)?;
            std::fs::write(&output, serde_json::to_string_pretty(&report)?)?;
            let text = report.to_table();
            if let Some(t) = table {
                std::fs::write(&t, &text)?;
            }
            print!("{text}");
        }
        Command::Fixture { name, seed, output } => {
            if name != "corridor" {
                bail!(Usage(format!("unknown fixture {name:?}; available: corridor")));
            }
            write_fixture(seed, &output)?;
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
        }
    }
    Ok(())
}

fn write_fixture(seed: u64, dir: &Path) -> Result<()> {
    let fx = corridor_fixture(seed);
    std::fs::create_dir_all(dir)?;
    fx.scene.save(dir.join("scene.json"))?;
    Manifest {
        beams: fx.beams.elevations().to_vec(),
        width: fx.beams.width(),
        frames: Vec::new(),
    }
    .save(dir.join("beams.json"))?;
    let split = |poses: &[Pose], held: bool| -> Vec<Pose> {
        poses.iter().enumerate().filter(|(i, _)| is_heldout(*i) == held).map(|(_, p)| *p).collect()
    };
    let write = |name: &str, frames: Vec<rangesplat::io::Frame>| -> Result<()> {
        let ds = Dataset {
            beams: fx.beams.clone(),
            frames,
        };
        ds.save(dir.join(format!("{name}.json")), "scans", name)?;
        Ok(())
    };
    write("train", fx.scan(&split(&fx.center, false), 0)?)?;
    write("heldout", fx.scan(&split(&fx.center, true), 100)?)?;
    let mut side = fx.scan(&split(&fx.left, true), 1000)?;
    side.extend(fx.scan(&split(&fx.right, true), 2000)?);
    write("extrapolated", side)?;
    log::info!("corridor fixture written to {}", dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rangesplat::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<Usage>() || cause.is::<ConfigVersion>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
