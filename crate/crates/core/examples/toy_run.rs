//! Trains a toy protector on synthetic phantoms and prints the defense effect.
//!
//! cargo run --release --example toy_run -p mitsgan -- [alpha] [epochs] [lr] [key=value ...]

use std::time::Instant;

use mitsgan::manipulator::{sample_region, tamper};
use mitsgan::metrics::{roi_metrics, ssim, to_metric_scale, MetricConfig};
use mitsgan::trainer::{
    build_manipulator, fit_with_history, load_checkpoint, protect_pixels, steps_per_epoch, Checkpoint, RunOutput,
    TrainingConfig,
};
use mitsgan::manipulator::ManipulatorHandle;
use mitsgan::volume::{generate_phantom, PhantomSpec};
use rand::SeedableRng;

fn main() -> mitsgan::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let alpha: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-4);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for v in 0..8 {
        let vol = generate_phantom(&PhantomSpec::new(64, 32, 0.3, v))?;
        let slices = vol.slices()?.into_iter().map(|r| r.pixels);
        if v < 7 { train.extend(slices) } else { test.extend(slices) }
    }
    let mut cfg = TrainingConfig::toy();
    cfg.alpha = alpha;
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let t0 = Instant::now();
    let m = build_manipulator(&train, &cfg)?;
    println!("surrogate {:.1}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let mut history = Vec::new();
    let dir = std::env::temp_dir().join(format!("toy_run_{alpha}_{lr}_{}", args.get(4..).unwrap_or(&[]).join("_")));
    let out = RunOutput { dir: dir.clone() };
    let ckpt = fit_with_history(&train, &cfg, m.clone(), Some(&out), &mut history)?;
    for (e, chunk) in history.chunks(steps_per_epoch(train.len(), cfg.batch_size)).enumerate() {
        let n = chunk.len() as f64;
        let mean = |f: fn(&mitsgan::objective::LossBreakdown) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        println!(
            "epoch {e}: d {:.4} g_adv {:.4} l_m {:.3e}",
            mean(|l| l.d_loss),
            mean(|l| l.g_adv),
            mean(|l| l.l_m)
        );
    }
    println!("fit {:.1}s ({} slices)", t1.elapsed().as_secs_f64(), train.len());

    for e in 1..=epochs {
        let c = load_checkpoint(&out.checkpoint_path(e))?;
        report(&format!("epoch {e}"), &test, &c, &m)?;
    }
    report(&format!("alpha {alpha}"), &test, &ckpt, &m)?;
    Ok(())
}

fn report(label: &str, test: &[ndarray::Array2<f64>], ckpt: &Checkpoint, m: &ManipulatorHandle) -> mitsgan::Result<()> {
    let mc = MetricConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let (mut whole, mut sp, mut su, mut rp, mut ru) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for x in test {
        let xp = protect_pixels(x, ckpt)?;
        let r = sample_region(64, 64, 32, &mut rng)?;
        let tp = tamper(xp.view(), r, m)?;
        let tu = tamper(x.view(), r, m)?;
        let (xs, xps) = (to_metric_scale(x.view()), to_metric_scale(xp.view()));
        whole += ssim(xs.view(), xps.view(), &mc)?;
        let a = roi_metrics(xs.view(), to_metric_scale(tp.view()).view(), r, &mc)?;
        let b = roi_metrics(xs.view(), to_metric_scale(tu.view()).view(), r, &mc)?;
        sp += a.ssim;
        su += b.ssim;
        rp += a.rmse;
        ru += b.rmse;
    }
    let n = test.len() as f64;
    println!("{label}: whole ssim(x,xp) {:.4}", whole / n);
    println!("roi ssim prot-tampered {:.4} unprot-tampered {:.4}", sp / n, su / n);
    println!("roi rmse prot-tampered {:.2} unprot-tampered {:.2}", rp / n, ru / n);
    Ok(())
}
