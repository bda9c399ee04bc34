//! Single-pass training on the corridor, then expansion with an oracle
//! generator and with a noisy one, masked and unmasked. Prints mean Chamfer
//! distance on held-out centre-lane and side-lane frames.
//! `cargo run --release --example expansion -- [checkpoint] [expand iterations] [runs]`
//! where runs is a comma list of oracle, noisy-mask, noisy-full, oracle-full.

use std::path::PathBuf;
use std::time::Instant;

use rangesplat::expansion::{
    expand_reconstruct, extrapolate_poses, generate_scans, ExpandConfig, OracleProvider, ScanProvider, StructuredNoise,
    DEFAULT_LATERAL_OFFSETS,
};
use rangesplat::field::Scene;
use rangesplat::io::Frame;
use rangesplat::metrics::{evaluate, EvalConfig};
use rangesplat::optimizer::{reconstruct_single_pass, ReconstructConfig};
use rangesplat::synth::{corridor_fixture, is_heldout};

fn split(frames: Vec<Frame>) -> (Vec<Frame>, Vec<Frame>) {
    let (a, b): (Vec<_>, Vec<_>) = frames.into_iter().enumerate().partition(|(i, _)| !is_heldout(*i));
    (a.into_iter().map(|x| x.1).collect(), b.into_iter().map(|x| x.1).collect())
}

fn main() -> rangesplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "/tmp/corridor.ckpt".into()));
    let iters: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let modes = args.next().unwrap_or_else(|| "oracle,noisy-mask,noisy-full".into());
    let fx = corridor_fixture(0);
    let (train, held) = split(fx.scan(&fx.center, 0)?);
    let (_, held_left) = split(fx.scan(&fx.left, 1000)?);
    let (_, held_right) = split(fx.scan(&fx.right, 2000)?);
    let extrap: Vec<Frame> = held_left.into_iter().chain(held_right).collect();
    let scene = if ckpt.exists() {
        Scene::load(&ckpt)?
    } else {
        let t = Instant::now();
        let tr = reconstruct_single_pass(&train, &fx.beams, &ReconstructConfig { iterations: 2000, ..Default::default() }, 0)?;
        println!("single pass {:.1}s", t.elapsed().as_secs_f64());
        tr.scene.save(&ckpt)?;
        tr.scene
    };
    let ec = EvalConfig::default();
    let report = |name: &str, s: &Scene| -> rangesplat::Result<()> {
        let i = evaluate(s, &held, &fx.beams, &ec)?.mean;
        let e = evaluate(s, &extrap, &fx.beams, &ec)?.mean;
        println!(
            "{name:>10}: interp CD {:.4} F {:.3} L1 {:.4} | extrap CD {:.4} F {:.3} L1 {:.4}",
            i.chamfer, i.fscore, i.depth_l1, e.chamfer, e.fscore, e.depth_l1
        );
        Ok(())
    };
    report("single", &scene)?;
    let poses = extrapolate_poses(&train.iter().map(|f| f.pose).collect::<Vec<_>>(), &DEFAULT_LATERAL_OFFSETS);
    let oracle = OracleProvider { scene: fx.scene.clone() };
    let noisy = StructuredNoise::new(oracle.clone(), 0.1, 11);
    let runs: [(&str, &dyn ScanProvider, bool); 4] =
        [("oracle", &oracle, true), ("noisy-mask", &noisy, true), ("noisy-full", &noisy, false), ("oracle-full", &oracle, false)];
    for (name, provider, masked) in runs {
        if !modes.split(',').any(|m| m == name) {
            continue;
        }
        let t = Instant::now();
        let gen = generate_scans(&scene, &poses, provider, &fx.beams)?;
        let cfg = ExpandConfig {
            iterations: iters,
            masked,
            ..Default::default()
        };
        let e = expand_reconstruct(&scene, &train, &gen.scans, &fx.beams, &cfg, 0)?;
        println!("{name}: delta {:.4}, {:.1}s", e.delta, t.elapsed().as_secs_f64());
        report(name, &e.scene)?;
    }
    Ok(())
}
