//! Prints the size of the adversarial and manipulation gradients at initialization.

use mitsgan::nn::{Module, Tensor};
use mitsgan::trainer::{build_manipulator, Trainer, TrainingConfig};
use mitsgan::volume::{generate_phantom, PhantomSpec};

fn grads(t: &Trainer) -> Vec<f64> {
    t.generator.named_params("").into_iter().flat_map(|(_, p)| p.grad.clone()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> mitsgan::Result<()> {
    let vol = generate_phantom(&PhantomSpec::new(64, 32, 0.3, 0))?;
    let xs: Vec<_> = vol.slices()?.into_iter().map(|r| r.pixels).collect();
    let mut cfg = TrainingConfig::toy();
    cfg.surrogate_epochs = 3;
    let m = build_manipulator(&xs, &cfg)?;
    let x = Tensor::from_planes(xs[..16].iter().map(|s| s.view()))?;
    let mut t = Trainer::new(&cfg, 64, 64, m, Some(&x))?;
    let delta = t.perturbation.next_batch(16);
    let regions = t.step_regions(16, 64, 64)?;
    let (xp, cache) = t.generator.forward_train(&x, &delta)?;
    let mut t0 = t.clone();
    t0.generator_gradients(&x, &xp, &cache, &regions, 0.0)?;
    let ga = grads(&t0);
    let mut t1 = t.clone();
    let (g_adv, l_m) = t1.generator_gradients(&x, &xp, &cache, &regions, 1.0)?;
    let gm: Vec<f64> = grads(&t1).iter().zip(&ga).map(|(a, b)| b - a).collect();
    println!("g_adv {g_adv:.4} l_m {l_m:.3e}");
    println!("|grad g_adv| {:.3e}  |grad L_m| {:.3e}", norm(&ga), norm(&gm));
    for (name, p) in t1.generator.named_params("") {
        let n = p.grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("{name:40} {n:.3e}");
    }
    Ok(())
}
