//! Train on the synthetic corridor and report held-out depth and intensity
//! errors. `cargo run --release --example corridor -- [iterations] [anchors]`

use std::time::Instant;

use rangesplat::optimizer::{reconstruct_single_pass, ReconstructConfig};
use rangesplat::rasterizer::render;
use rangesplat::synth::{corridor_fixture, is_heldout};

fn main() -> rangesplat::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let fixture = corridor_fixture(0);
    let frames = fixture.scan(&fixture.center, 0)?;
    let (train, held): (Vec<_>, Vec<_>) = frames.into_iter().enumerate().partition(|(i, _)| !is_heldout(*i));
    let train: Vec<_> = train.into_iter().map(|(_, f)| f).collect();
    let cfg = ReconstructConfig {
        iterations: args.first().copied().unwrap_or(2000),
        anchors: args.get(1).copied().unwrap_or(3000),
        ..Default::default()
    };
    let start = Instant::now();
    let trainer = reconstruct_single_pass(&train, &fixture.beams, &cfg, 0)?;
    println!("trained in {:.1}s, {} anchors", start.elapsed().as_secs_f64(), trainer.scene.anchor_count());
    for r in trainer.log.iter().step_by(100) {
        println!("{} {:.5} {:.5} {:.5} {:.5} {:.5}", r.iteration, r.terms.total, r.terms.depth, r.terms.intensity, r.terms.raydrop, r.terms.scale);
    }
    for (i, f) in held {
        let out = render(&trainer.scene, &f.pose, &fixture.beams);
        let n = f.scan.len();
        let ret: Vec<usize> = (0..n).filter(|&k| f.scan.raydrop[k] > 0.5).collect();
        let l1 = ret.iter().map(|&k| (out.image.depth[k] - f.scan.depth[k]).abs()).sum::<f64>() / ret.len() as f64;
        let mse = (0..n).map(|k| (out.image.intensity[k] - f.scan.intensity[k]).powi(2)).sum::<f64>() / n as f64;
        let mut errs: Vec<f64> = ret.iter().map(|&k| (out.image.depth[k] - f.scan.depth[k]).abs()).collect();
        errs.sort_by(f64::total_cmp);
        println!(
            "frame {i}: depth L1 {l1:.4} (median {:.4}, p99 {:.3}), intensity PSNR {:.2} dB, mean opacity {:.4}",
            errs[errs.len() / 2],
            errs[errs.len() * 99 / 100],
            10.0 * (1.0 / mse).log10(),
            out.opacity.iter().sum::<f64>() / n as f64
        );
    }
    Ok(())
}
