//! Refining a scene with generated scans at poses off the captured
//! trajectory: degraded/clean training pairs for a generator, lateral pose
//! shifts, scan providers and the masked expansion loop.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Perturbation, Scene};
use crate::io::{load_rvim, save_rvim, Frame};
use crate::loss::LossConfig;
use crate::optimizer::{LossRecord, Supervision, Trainer};
use crate::rangeview::{BeamTable, Pose, RangeImage};
use crate::rasterizer::{median_max_scale, render, render_attributes};
use crate::synth::{raycast_scan, SyntheticScene};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// rendering from a perturbed decode
    pub condition: RangeImage,
    /// the captured scan
    pub target: RangeImage,
    pub pose: Pose,
}

/// One pair per frame; frame `i` is perturbed with seed `seed ^ i`.
pub fn make_training_pairs(scene: &Scene, frames: &[Frame], beams: &BeamTable, sigma: f64, tau: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.scan.validate()?;
            let attrs = scene.decode_perturbed(
                &f.pose,
                Perturbation {
                    sigma,
                    tau,
                    seed: seed ^ i as u64,
                },
            )?;
            let condition = render_attributes(&attrs, &f.pose, beams, scene.config.d_min).image;
            condition.ensure_dims(&f.scan)?;
            Ok(TrainingPair {
                condition,
                target: f.scan.clone(),
                pose: f.pose,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub pose: [f64; 16],
    pub condition: String,
    pub target: String,
}

/// `pairs.json` in a pair directory; paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub beams: Vec<f64>,
    pub width: usize,
    pub pairs: Vec<PairEntry>,
}

pub const PAIR_MANIFEST: &str = "pairs.json";

/// Write `condition_NNNNN.rvim`, `target_NNNNN.rvim` and the manifest.
pub fn save_pairs(dir: impl AsRef<Path>, pairs: &[TrainingPair], beams: &BeamTable) -> Result<PairManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let condition = format!("condition_{i:05}.rvim");
        let target = format!("target_{i:05}.rvim");
        save_rvim(dir.join(&condition), &p.condition)?;
        save_rvim(dir.join(&target), &p.target)?;
        entries.push(PairEntry {
            pose: p.pose.to_row_major(),
            condition,
            target,
        });
    }
    let manifest = PairManifest {
        beams: beams.elevations().to_vec(),
        width: beams.width(),
        pairs: entries,
    };
    std::fs::write(dir.join(PAIR_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_pairs(dir: impl AsRef<Path>) -> Result<(BeamTable, Vec<TrainingPair>)> {
    let dir = dir.as_ref();
    let manifest: PairManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(PAIR_MANIFEST))?)?;
    let beams = BeamTable::new(manifest.beams, manifest.width)?;
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| {
            Ok(TrainingPair {
                condition: load_rvim(dir.join(&e.condition))?,
                target: load_rvim(dir.join(&e.target))?,
                pose: Pose::from_row_major(&e.pose, 0.0)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((beams, pairs))
}

pub const DEFAULT_LATERAL_OFFSETS: [f64; 2] = [-3.5, 3.5];

/// Every pose shifted by each offset along its own +y (left) axis, frame
/// by frame.
pub fn extrapolate_poses(poses: &[Pose], offsets: &[f64]) -> Vec<Pose> {
    poses
        .iter()
        .flat_map(|p| offsets.iter().map(move |&o| p.translated_local(&Vector3::new(0.0, o, 0.0))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanSource {
    Oracle,
    Passthrough,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScan {
    pub image: RangeImage,
    pub pose: Pose,
    pub source: ScanSource,
}

/// Turns a coarse rendering at a pose into a generated scan of the same
/// size.
pub trait ScanProvider: Sync {
    fn source(&self) -> ScanSource;
    fn generate(&self, condition: &RangeImage, pose: &Pose, beams: &BeamTable) -> Result<RangeImage>;
}

/// Returns the condition unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassthroughProvider;

impl ScanProvider for PassthroughProvider {
    fn source(&self) -> ScanSource {
        ScanSource::Passthrough
    }

    fn generate(&self, condition: &RangeImage, _pose: &Pose, _beams: &BeamTable) -> Result<RangeImage> {
        Ok(condition.clone())
    }
}

/// Noise-free ray cast of a known synthetic world.
#[derive(Clone, Debug)]
pub struct OracleProvider {
    pub scene: SyntheticScene,
}

impl ScanProvider for OracleProvider {
    fn source(&self) -> ScanSource {
        ScanSource::Oracle
    }

    fn generate(&self, _condition: &RangeImage, pose: &Pose, beams: &BeamTable) -> Result<RangeImage> {
        raycast_scan(&self.scene, pose, beams, 0.0, 0.0, 0)
    }
}

/// Adds a depth offset, constant over blocks of `block_rows x block_cols`
/// pixels and drawn from N(0, sigma^2), to the returns of another provider.
/// The draw depends only on `seed` and the pose.
#[derive(Clone, Debug)]
pub struct StructuredNoise<P> {
    pub inner: P,
    pub sigma: f64,
    pub block_rows: usize,
    pub block_cols: usize,
    pub seed: u64,
}

impl<P: ScanProvider> StructuredNoise<P> {
    pub fn new(inner: P, sigma: f64, seed: u64) -> Self {
        Self {
            inner,
            sigma,
            block_rows: 4,
            block_cols: 16,
            seed,
        }
    }
}

fn pose_seed(seed: u64, pose: &Pose) -> u64 {
    pose.to_row_major()
        .iter()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3).rotate_left(17))
}

impl<P: ScanProvider> ScanProvider for StructuredNoise<P> {
    fn source(&self) -> ScanSource {
        self.inner.source()
    }

    fn generate(&self, condition: &RangeImage, pose: &Pose, beams: &BeamTable) -> Result<RangeImage> {
        if !(self.sigma >= 0.0) || self.block_rows == 0 || self.block_cols == 0 {
            return Err(Error::invalid("structured noise needs sigma >= 0 and non-empty blocks"));
        }
        let mut img = self.inner.generate(condition, pose, beams)?;
        let (h, w) = img.dims();
        let (br, bc) = (h.div_ceil(self.block_rows), w.div_ceil(self.block_cols));
        let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(self.seed, pose));
        let normal = Normal::new(0.0, self.sigma.max(f64::MIN_POSITIVE)).unwrap();
        let offsets: Vec<f64> = (0..br * bc).map(|_| if self.sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 }).collect();
        for r in 0..h {
            for c in 0..w {
                let i = img.index(r, c);
                if img.raydrop[i] >= 0.5 {
                    let o = offsets[(r / self.block_rows) * bc + c / self.block_cols];
                    img.depth[i] = (img.depth[i] + o).max(1e-3);
                }
            }
        }
        Ok(img)
    }
}

/// Environment variable holding the per-job spool timeout in seconds.
pub const SPOOL_TIMEOUT_ENV: &str = "RANGESPLAT_SPOOL_TIMEOUT";
pub const DEFAULT_SPOOL_TIMEOUT: Duration = Duration::from_secs(300);

/// Job ticket written to `jobs/<id>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpoolJob {
    /// absolute path of the condition RVIM
    pub condition_path: PathBuf,
    /// sensor-to-world transform, row-major
    pub pose: [f64; 16],
    pub beams: SpoolBeams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpoolBeams {
    /// elevation of each beam in radians, ascending
    pub elevations: Vec<f64>,
    pub width: usize,
}

/// Exchanges files with an external generator through a spool directory.
///
/// For each request a condition is written to `conditions/<id>.rvim` and a
/// ticket to `jobs/<id>.json`. The generator answers with `out/<id>.rvim`,
/// or with `out/<id>.err` holding a message. Files are created under a
/// temporary name and renamed into place, and the generator should do the
/// same.
#[derive(Clone, Debug)]
pub struct SpoolProvider {
    pub dir: PathBuf,
    pub timeout: Duration,
    pub poll: Duration,
}

static SPOOL_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl SpoolProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            timeout: DEFAULT_SPOOL_TIMEOUT,
            poll: Duration::from_millis(50),
        }
    }

    /// Timeout from [`SPOOL_TIMEOUT_ENV`] when set.
    pub fn from_env(dir: impl Into<PathBuf>) -> Result<Self> {
        let mut p = Self::new(dir);
        if let Ok(v) = std::env::var(SPOOL_TIMEOUT_ENV) {
            let secs: f64 = v
                .trim()
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite() && *s > 0.0)
                .ok_or_else(|| Error::invalid(format!("{SPOOL_TIMEOUT_ENV} must be a positive number of seconds, got {v:?}")))?;
            p.timeout = Duration::from_secs_f64(secs);
        }
        Ok(p)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn submit(&self, condition: &RangeImage, pose: &Pose, beams: &BeamTable) -> Result<String> {
        for sub in ["jobs", "conditions", "out"] {
            std::fs::create_dir_all(self.dir.join(sub))?;
        }
        let id = format!("{:08x}-{:06}", std::process::id(), SPOOL_COUNTER.fetch_add(1, Ordering::Relaxed));
        let cond = std::path::absolute(self.dir.join("conditions").join(format!("{id}.rvim")))?;
        write_atomic(&cond, |p| save_rvim(p, condition))?;
        let job = SpoolJob {
            condition_path: cond,
            pose: pose.to_row_major(),
            beams: SpoolBeams {
                elevations: beams.elevations().to_vec(),
                width: beams.width(),
            },
        };
        let text = serde_json::to_string_pretty(&job)?;
        write_atomic(&self.dir.join("jobs").join(format!("{id}.json")), |p| Ok(std::fs::write(p, &text)?))?;
        Ok(id)
    }

    fn wait(&self, id: &str) -> Result<RangeImage> {
        let out = self.dir.join("out").join(format!("{id}.rvim"));
        let err = self.dir.join("out").join(format!("{id}.err"));
        let start = Instant::now();
        loop {
            if out.exists() {
                return load_rvim(&out).map_err(|e| Error::Provider(format!("job {id}: unreadable output: {e}")));
            }
            if err.exists() {
                let msg = std::fs::read_to_string(&err).unwrap_or_default();
                return Err(Error::Provider(format!("job {id}: {}", msg.trim())));
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::Provider(format!("job {id}: no answer within {:?}", self.timeout)));
            }
            std::thread::sleep(self.poll);
        }
    }
}

impl ScanProvider for SpoolProvider {
    fn source(&self) -> ScanSource {
        ScanSource::External
    }

    fn generate(&self, condition: &RangeImage, pose: &Pose, beams: &BeamTable) -> Result<RangeImage> {
        let id = self.submit(condition, pose, beams)?;
        self.wait(&id)
    }
}

/// Generated scans plus the poses whose request failed.
#[derive(Clone, Debug, Default)]
pub struct Generation {
    pub scans: Vec<GeneratedScan>,
    /// (index into the requested poses, message)
    pub failures: Vec<(usize, String)>,
}

/// Render each pose and ask the provider for a scan conditioned on it.
/// Provider failures and invalid outputs skip the pose; an output of the
/// wrong size is an error.
pub fn generate_scans(scene: &Scene, poses: &[Pose], provider: &dyn ScanProvider, beams: &BeamTable) -> Result<Generation> {
    let conditions: Vec<RangeImage> = poses.iter().map(|p| render(scene, p, beams).image).collect();
    let results: Vec<Result<RangeImage>> = conditions
        .par_iter()
        .zip(poses)
        .map(|(c, p)| provider.generate(c, p, beams))
        .collect();
    let mut gen = Generation::default();
    for (i, (r, cond)) in results.into_iter().zip(&conditions).enumerate() {
        match r {
            Ok(image) => {
                if image.dims() != cond.dims() {
                    return Err(Error::DimensionMismatch {
                        expected: cond.dims(),
                        got: image.dims(),
                    });
                }
                match image.validate() {
                    Ok(()) => gen.scans.push(GeneratedScan {
                        image,
                        pose: poses[i],
                        source: provider.source(),
                    }),
                    Err(e) => gen.failures.push((i, e.to_string())),
                }
            }
            Err(e) => {
                log::warn!("pose {i}: {e}");
                gen.failures.push((i, e.to_string()));
            }
        }
    }
    Ok(gen)
}

/// Median of the larger splat scale, pooled over the decodes at `poses`.
pub fn expansion_delta(scene: &Scene, poses: &[Pose]) -> Result<f64> {
    let scales: Vec<[f64; 2]> = poses.iter().flat_map(|p| scene.decode(p).scale).collect();
    median_max_scale(scales.iter())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpandConfig {
    pub iterations: usize,
    /// weight generated steps by the distortion mask; off means full injection
    pub masked: bool,
    /// fixed mask threshold instead of the scene's median splat scale
    pub delta: Option<f64>,
    pub offsets: Vec<f64>,
    pub loss: LossConfig,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            masked: true,
            delta: None,
            offsets: DEFAULT_LATERAL_OFFSETS.to_vec(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Expansion {
    pub scene: Scene,
    pub delta: f64,
    pub log: Vec<LossRecord>,
    pub generated_steps: usize,
}

/// Continue training on real frames and generated scans in strict
/// alternation, starting with a real frame. The mask threshold is fixed
/// before the first step.
pub fn expand_reconstruct(scene: &Scene, frames: &[Frame], generated: &[GeneratedScan], beams: &BeamTable, cfg: &ExpandConfig, seed: u64) -> Result<Expansion> {
    if frames.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    cfg.loss.validate()?;
    let delta = match cfg.delta {
        Some(d) if d > 0.0 => d,
        Some(_) => return Err(Error::invalid("distortion threshold must be positive")),
        None => expansion_delta(scene, &frames.iter().map(|f| f.pose).collect::<Vec<_>>())?,
    };
    log::info!("expansion: delta {delta:.4} m, {} generated scans", generated.len());
    let mut trainer = Trainer::new(scene.clone());
    let mut real_rng = ChaCha8Rng::seed_from_u64(seed);
    real_rng.set_stream(2);
    let mut gen_rng = ChaCha8Rng::seed_from_u64(seed);
    gen_rng.set_stream(3);
    let mut generated_steps = 0;
    for it in 0..cfg.iterations {
        let terms = if it % 2 == 1 && !generated.is_empty() {
            generated_steps += 1;
            let g = &generated[gen_rng.random_range(0..generated.len())];
            let sup = if cfg.masked { Supervision::Distortion(delta) } else { Supervision::Full };
            trainer.step(&g.pose, &g.image, beams, &cfg.loss, sup, false)?
        } else {
            let f = &frames[real_rng.random_range(0..frames.len())];
            trainer.step(&f.pose, &f.scan, beams, &cfg.loss, Supervision::Full, false)?
        };
        if (it + 1) % 100 == 0 {
            log::info!("expand iter {}: loss {:.5}", it + 1, terms.total);
        }
    }
    Ok(Expansion {
        scene: trainer.scene,
        delta,
        log: trainer.log,
        generated_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::small_scene;
    use crate::rasterizer::render;
    use crate::synth::corridor_fixture;

    fn tiny_beams() -> BeamTable {
        BeamTable::uniform(-0.4, 0.2, 8, 64).unwrap()
    }

    fn frames_for(scene: &Scene, beams: &BeamTable, n: usize) -> Vec<Frame> {
        (0..n)
            .map(|i| {
                let pose = Pose::from_translation(Vector3::new(0.3 * i as f64, 0.0, 0.0));
                Frame {
                    pose,
                    scan: render(scene, &pose, beams).image,
                }
            })
            .collect()
    }

    #[test]
    fn unperturbed_pairs_are_clean_renders() {
        let scene = small_scene(12, 4);
        let beams = tiny_beams();
        let frames = frames_for(&scene, &beams, 3);
        let pairs = make_training_pairs(&scene, &frames, &beams, 0.0, 0.0, 7).unwrap();
        assert_eq!(pairs.len(), 3);
        for (p, f) in pairs.iter().zip(&frames) {
            assert_eq!(p.condition, render(&scene, &f.pose, &beams).image);
            assert_eq!(p.target, f.scan);
        }
        let noisy = make_training_pairs(&scene, &frames, &beams, 0.2, 0.1, 7).unwrap();
        assert_ne!(noisy[0].condition, pairs[0].condition);
        assert_eq!(noisy, make_training_pairs(&scene, &frames, &beams, 0.2, 0.1, 7).unwrap());
    }

    #[test]
    fn pairs_round_trip_through_directory() {
        let scene = small_scene(8, 5);
        let beams = tiny_beams();
        let frames = frames_for(&scene, &beams, 2);
        let pairs = make_training_pairs(&scene, &frames, &beams, 0.2, 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_pairs(dir.path(), &pairs, &beams).unwrap();
        assert_eq!(m.pairs.len(), 2);
        let (b, back) = load_pairs(dir.path()).unwrap();
        assert_eq!(b, beams);
        for (a, b) in pairs.iter().zip(&back) {
            // RVIM stores f32
            assert_eq!(a.pose.to_row_major(), b.pose.to_row_major());
            assert!(a.condition.depth.iter().zip(&b.condition.depth).all(|(x, y)| (x - y).abs() <= 1e-5 * x.abs().max(1.0)));
        }
    }

    #[test]
    fn lateral_shift_examples() {
        let poses = vec![Pose::identity(), Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)).rotated_about_z(0.5)];
        let same = extrapolate_poses(&poses, &[0.0]);
        for (a, b) in same.iter().zip(&poses) {
            assert_eq!(a.to_row_major(), b.to_row_major());
        }
        let shifted = extrapolate_poses(&poses[..1], &[3.5]);
        assert_eq!(shifted[0].translation(), Vector3::new(0.0, 3.5, 0.0));
        assert_eq!(extrapolate_poses(&poses, &DEFAULT_LATERAL_OFFSETS).len(), 4);
        // rotated pose moves along its own left axis
        let r = extrapolate_poses(&poses[1..], &[1.0])[0];
        let d = r.translation() - poses[1].translation();
        assert!((d - Vector3::new(-0.5f64.sin(), 0.5f64.cos(), 0.0)).norm() < 1e-12);
    }

    #[test]
    fn passthrough_and_oracle_providers() {
        let fx = corridor_fixture(3);
        let beams = BeamTable::uniform(-0.4, 0.1, 8, 128).unwrap();
        let scene = small_scene(10, 2);
        let poses = extrapolate_poses(&fx.center[..2], &DEFAULT_LATERAL_OFFSETS);
        let pass = generate_scans(&scene, &poses, &PassthroughProvider, &beams).unwrap();
        assert_eq!(pass.scans.len(), 4);
        for (s, p) in pass.scans.iter().zip(&poses) {
            assert_eq!(s.image, render(&scene, p, &beams).image);
            assert_eq!(s.source, ScanSource::Passthrough);
        }
        let oracle = OracleProvider { scene: fx.scene.clone() };
        let gen = generate_scans(&scene, &poses, &oracle, &beams).unwrap();
        for (s, p) in gen.scans.iter().zip(&poses) {
            assert_eq!(s.image, raycast_scan(&fx.scene, p, &beams, 0.0, 0.0, 0).unwrap());
        }
    }

    #[test]
    fn structured_noise_is_blockwise_and_seeded() {
        let fx = corridor_fixture(1);
        let beams = BeamTable::uniform(-0.4, 0.1, 8, 64).unwrap();
        let pose = fx.center[3];
        let clean = raycast_scan(&fx.scene, &pose, &beams, 0.0, 0.0, 0).unwrap();
        let p = StructuredNoise::new(OracleProvider { scene: fx.scene.clone() }, 0.1, 9);
        let a = p.generate(&clean, &pose, &beams).unwrap();
        assert_eq!(a, p.generate(&clean, &pose, &beams).unwrap());
        assert_eq!(a.raydrop, clean.raydrop);
        let off = |r: usize, c: usize| a.depth[a.index(r, c)] - clean.depth[clean.index(r, c)];
        assert!((off(0, 0) - off(3, 15)).abs() < 1e-9);
        assert!((off(0, 0) - off(0, 16)).abs() > 1e-6);
        let other = StructuredNoise::new(OracleProvider { scene: fx.scene.clone() }, 0.1, 10);
        assert_ne!(a, other.generate(&clean, &pose, &beams).unwrap());
    }

    struct Failing;
    impl ScanProvider for Failing {
        fn source(&self) -> ScanSource {
            ScanSource::External
        }
        fn generate(&self, c: &RangeImage, pose: &Pose, _: &BeamTable) -> Result<RangeImage> {
            if pose.translation().x > 0.0 {
                Err(Error::Provider("boom".into()))
            } else {
                Ok(c.clone())
            }
        }
    }

    struct WrongSize;
    impl ScanProvider for WrongSize {
        fn source(&self) -> ScanSource {
            ScanSource::External
        }
        fn generate(&self, _: &RangeImage, _: &Pose, _: &BeamTable) -> Result<RangeImage> {
            Ok(RangeImage::zeros(2, 2))
        }
    }

    #[test]
    fn failures_skip_poses_and_wrong_sizes_abort() {
        let scene = small_scene(6, 3);
        let beams = tiny_beams();
        let poses = vec![
            Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        ];
        let g = generate_scans(&scene, &poses, &Failing, &beams).unwrap();
        assert_eq!(g.scans.len(), 1);
        assert_eq!(g.failures.len(), 1);
        assert_eq!(g.failures[0].0, 1);
        assert!(matches!(generate_scans(&scene, &poses, &WrongSize, &beams), Err(Error::DimensionMismatch { .. })));
    }

    fn serve_one(dir: PathBuf, answer: impl Fn(&SpoolJob, &Path, &str) + Send + 'static) -> std::thread::JoinHandle<()> {
        std::thread::spawn(move || {
            let jobs = dir.join("jobs");
            for _ in 0..400 {
                if let Ok(rd) = std::fs::read_dir(&jobs) {
                    for e in rd.flatten() {
                        let path = e.path();
                        if path.extension().is_some_and(|x| x == "json") {
                            let job: SpoolJob = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
                            let id = path.file_stem().unwrap().to_str().unwrap().to_string();
                            std::fs::remove_file(&path).unwrap();
                            answer(&job, &dir.join("out"), &id);
                            return;
                        }
                    }
                }
                std::thread::sleep(Duration::from_millis(10));
            }
        })
    }

    #[test]
    fn spool_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let beams = tiny_beams();
        let scene = small_scene(6, 8);
        let pose = Pose::from_translation(Vector3::new(0.5, -0.2, 0.1));
        let cond = render(&scene, &pose, &beams).image;
        let server = serve_one(dir.path().to_path_buf(), |job, out, id| {
            let mut img = load_rvim(&job.condition_path).unwrap();
            assert_eq!(job.beams.width, 64);
            assert_eq!(job.pose[3], 0.5);
            for d in &mut img.depth {
                *d *= 2.0;
            }
            write_atomic(&out.join(format!("{id}.rvim")), |p| save_rvim(p, &img)).unwrap();
        });
        let p = SpoolProvider::new(dir.path()).with_timeout(Duration::from_secs(20));
        let got = p.generate(&cond, &pose, &beams).unwrap();
        server.join().unwrap();
        let want = load_rvim(dir.path().join("conditions").read_dir().unwrap().next().unwrap().unwrap().path()).unwrap();
        for (g, w) in got.depth.iter().zip(&want.depth) {
            assert_eq!(*g, 2.0 * w);
        }
    }

    #[test]
    fn spool_error_file_and_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let beams = tiny_beams();
        let cond = RangeImage::zeros(8, 64);
        let server = serve_one(dir.path().to_path_buf(), |_, out, id| {
            std::fs::write(out.join(format!("{id}.err")), "sampler crashed\n").unwrap();
        });
        let p = SpoolProvider::new(dir.path()).with_timeout(Duration::from_secs(20));
        let e = p.generate(&cond, &Pose::identity(), &beams).unwrap_err();
        server.join().unwrap();
        assert!(matches!(&e, Error::Provider(m) if m.contains("sampler crashed")), "{e}");
        let quick = SpoolProvider::new(dir.path()).with_timeout(Duration::from_millis(120));
        assert!(matches!(quick.generate(&cond, &Pose::identity(), &beams), Err(Error::Provider(_))));
    }

    #[test]
    fn no_generated_scans_is_plain_training() {
        let scene = small_scene(10, 6);
        let beams = tiny_beams();
        let target = small_scene(10, 7);
        let frames = frames_for(&target, &beams, 3);
        let cfg = ExpandConfig {
            iterations: 6,
            delta: Some(0.1),
            ..Default::default()
        };
        let e = expand_reconstruct(&scene, &frames, &[], &beams, &cfg, 3).unwrap();
        assert_eq!(e.generated_steps, 0);
        let mut t = Trainer::new(scene.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(2);
        for _ in 0..6 {
            let f = &frames[rng.random_range(0..frames.len())];
            t.step(&f.pose, &f.scan, &beams, &cfg.loss, Supervision::Full, false).unwrap();
        }
        assert_eq!(t.scene, e.scene);
    }

    #[test]
    fn generated_steps_alternate_and_empty_mask_is_inert() {
        let scene = small_scene(10, 6);
        let beams = tiny_beams();
        let frames = frames_for(&small_scene(10, 7), &beams, 2);
        // a huge threshold leaves the mask empty, so generated steps only
        // move the scale regulariser
        let far = Pose::from_translation(Vector3::new(0.0, 0.0, 500.0));
        let gen = vec![GeneratedScan {
            image: frames[0].scan.clone(),
            pose: far,
            source: ScanSource::Oracle,
        }];
        let cfg = ExpandConfig {
            iterations: 5,
            delta: Some(1e9),
            ..Default::default()
        };
        let e = expand_reconstruct(&scene, &frames, &gen, &beams, &cfg, 1).unwrap();
        assert_eq!(e.generated_steps, 2);
        assert_eq!(e.log.len(), 5);
        for r in e.log.iter().filter(|r| r.iteration % 2 == 0) {
            assert_eq!(r.terms.depth, 0.0);
            assert_eq!(r.terms.intensity, 0.0);
            assert_eq!(r.terms.raydrop, 0.0);
        }
        assert!(expand_reconstruct(&scene, &[], &gen, &beams, &cfg, 1).is_err());
    }

    #[test]
    fn delta_pools_all_poses() {
        let scene = small_scene(9, 2);
        let poses = [Pose::identity(), Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))];
        let mut all: Vec<f64> = poses.iter().flat_map(|p| scene.decode(p).scale.into_iter().map(|s| s[0].max(s[1]))).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(expansion_delta(&scene, &poses).unwrap(), all[(all.len() - 1) / 2]);
    }
}
