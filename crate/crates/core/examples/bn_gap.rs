//! Compares train-mode and eval-mode generator outputs for a saved checkpoint.
//!
//! cargo run --release --example bn_gap -p mitsgan -- <checkpoint>

use mitsgan::metrics::{ssim, to_metric_scale, MetricConfig};
use mitsgan::nn::Tensor;
use mitsgan::trainer::{load_checkpoint, protect_pixels};
use mitsgan::volume::{generate_phantom, PhantomSpec};

fn main() -> mitsgan::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let c = load_checkpoint(std::path::Path::new(&path))?;
    let test: Vec<_> = generate_phantom(&PhantomSpec::new(64, 32, 0.3, 7))?
        .slices()?
        .into_iter()
        .map(|r| r.pixels)
        .collect();
    let mc = MetricConfig::default();
    let x = Tensor::from_planes(test[..16].iter().map(|s| s.view()))?;
    let mut p = c.perturbation.clone();
    let delta = p.next_batch(16);
    let (xp_train, _) = c.generator.clone().forward_train(&x, &delta)?;
    let (mut s_train, mut s_eval) = (0.0, 0.0);
    for i in 0..16 {
        let a = to_metric_scale(test[i].view());
        let t = to_metric_scale(xp_train.to_array2(i).view());
        let e = to_metric_scale(protect_pixels(&test[i], &c)?.view());
        s_train += ssim(a.view(), t.view(), &mc)?;
        s_eval += ssim(a.view(), e.view(), &mc)?;
    }
    println!("ssim(x, G_train(x)) {:.4}  ssim(x, G_eval(x)) {:.4}", s_train / 16.0, s_eval / 16.0);
    Ok(())
}
