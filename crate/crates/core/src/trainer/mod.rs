//! Adversarial training loop, checkpoints and scan protection.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{parse_kv_lines, TrainingConfig, CONFIG_KEYS};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manipulator::{sample_region, train_inpaint_net, InpaintConfig, ManipulatorHandle, ManipulatorKind, TamperRegion};
use crate::models::{Discriminator, Generator, GeneratorCache};
use crate::nn::{Adam, Module, Tensor};
use crate::objective::{
    discriminator_loss, discriminator_loss_grads, generator_adversarial_grads, generator_adversarial_loss,
    LossBreakdown, LossWeights, LOG_HEADER,
};
use crate::perturbation::{sample_perturbation, Perturbation};
use crate::volume::{denormalize_slice, CtVolume};

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_REGIONS: u64 = 3;
// The surrogate draws from its own seed so it does not depend on GAN settings.
const SURROGATE_SEED_SALT: u64 = 0x5eed_0004;

/// Generator for stream `tag` at `(a, b)`; a pure function of `(seed, tag, a, b)`.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) ^ (a << 28) ^ b);
    rng
}

/// Training-data order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_ORDER, epoch as u64, 0));
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn stack(slices: &[Array2<f64>], idx: &[usize]) -> Result<Tensor> {
    Tensor::from_planes(idx.iter().map(|&i| slices[i].view()))
}

/// Live training state: both networks, their optimizers and the frozen manipulator.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub perturbation: Perturbation,
    pub manipulator: ManipulatorHandle,
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    /// Fresh state for `h × w` slices. With `passthrough_init`, `calibration`
    /// supplies the slices used to start the generator near the identity.
    pub fn new(cfg: &TrainingConfig, h: usize, w: usize, manipulator: ManipulatorHandle, calibration: Option<&Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, STREAM_INIT, 0, 0);
        let mut generator = Generator::new(&cfg.generator_spec(), &mut rng);
        let discriminator = Discriminator::new(&cfg.discriminator_spec(), &mut rng);
        let perturbation = sample_perturbation(h, w, cfg.sigma, cfg.seed)?.with_mode(cfg.perturbation_mode);
        if cfg.passthrough_init {
            if let Some(x) = calibration {
                let delta = Tensor::from_planes([perturbation.field.view()])?;
                generator.calibrate_passthrough(x, &delta)?;
            }
        }
        let (b1, b2) = cfg.adam_betas;
        Ok(Trainer {
            cfg: cfg.clone(),
            generator,
            discriminator,
            opt_g: Adam::new(cfg.learning_rate, b1, b2),
            opt_d: Adam::new(cfg.learning_rate, b1, b2),
            perturbation,
            manipulator,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Trainer {
            cfg: c.config,
            generator: c.generator,
            discriminator: c.discriminator,
            opt_g: c.opt_g,
            opt_d: c.opt_d,
            perturbation: c.perturbation,
            manipulator: c.manipulator,
            epoch: c.epoch,
            step: c.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
            perturbation: self.perturbation.clone(),
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            manipulator: self.manipulator.clone(),
        }
    }

    /// One random square per sample for the current step.
    pub fn step_regions(&self, n: usize, h: usize, w: usize) -> Result<Vec<TamperRegion>> {
        let mut rng = stream_rng(self.cfg.seed, STREAM_REGIONS, self.epoch as u64, self.step);
        (0..n).map(|_| sample_region(h, w, self.cfg.region_size, &mut rng)).collect()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, x: &Tensor, delta: &Tensor, regions: &[TamperRegion]) -> Result<LossBreakdown> {
        if regions.len() != x.n() {
            return Err(Error::Shape(format!("{} regions for a batch of {}", regions.len(), x.n())));
        }
        let step = self.step as usize;
        let weights = LossWeights::new(self.cfg.alpha)?;

        // Generator forward; x^p is treated as a constant during the D update.
        let (xp, g_cache) = self.generator.forward_train(x, delta)?;

        // Discriminator update: original slices are real, protected slices fake.
        // Both halves share one batch so normalization cannot hide a global shift.
        let n = x.n();
        self.discriminator.zero_grad();
        let (d_all, c_all) = self.discriminator.forward_train(&Tensor::concat_batch(x, &xp)?)?;
        let (d_real, d_fake) = d_all.split_at(n);
        let d_loss = discriminator_loss(d_real, d_fake)?;
        if !d_loss.is_finite() {
            return Err(Error::Training { step, term: "d_loss" });
        }
        let (mut g_all, g_fake) = discriminator_loss_grads(d_real, d_fake);
        g_all.extend(g_fake);
        self.discriminator.backward(&c_all, &g_all, true);
        self.opt_d.update(self.discriminator.named_params_mut("").into_iter().map(|(_, p)| p));
        self.discriminator.zero_grad();

        let (g_adv, l_m) = self.generator_gradients(x, &xp, &g_cache, regions, weights.alpha)?;
        let losses = LossBreakdown::new(d_loss, g_adv, l_m, weights);
        if let Some(term) = losses.non_finite_term() {
            return Err(Error::Training { step, term });
        }
        self.opt_g.update(self.generator.named_params_mut("").into_iter().map(|(_, p)| p));
        self.generator.zero_grad();
        self.step += 1;
        Ok(losses)
    }

    /// Back-propagates `g_adv − α·L_m` for protected slices `xp` into the
    /// generator's parameter gradients. The discriminator scores `[x; xp]` as
    /// one batch, as in its own update, and only receives an input-gradient pass.
    pub fn generator_gradients(
        &mut self,
        x: &Tensor,
        xp: &Tensor,
        g_cache: &GeneratorCache,
        regions: &[TamperRegion],
        alpha: f64,
    ) -> Result<(f64, f64)> {
        let n = x.n();
        let (d_all, c_all) = self.discriminator.forward_train(&Tensor::concat_batch(x, xp)?)?;
        let g_adv = generator_adversarial_loss(&d_all[n..])?;
        let mut d_prob = vec![0.0; n];
        d_prob.extend(generator_adversarial_grads(&d_all[n..]));
        let (_, mut dxp) = self.discriminator.backward(&c_all, &d_prob, false).split_batch(n);
        let (l_m, dx_m) = manipulation_term(xp, regions, &self.manipulator)?;
        for (g, m) in dxp.data_mut().iter_mut().zip(dx_m.data()) {
            *g -= alpha * m;
        }
        self.generator.zero_grad();
        self.generator.backward(g_cache, &dxp);
        Ok((g_adv, l_m))
    }

    /// Forward-only value of the generator objective, for gradient checks.
    pub fn generator_objective(&mut self, x: &Tensor, delta: &Tensor, regions: &[TamperRegion], alpha: f64) -> Result<f64> {
        let (xp, _) = self.generator.forward_train(x, delta)?;
        let (d_all, _) = self.discriminator.forward_train(&Tensor::concat_batch(x, &xp)?)?;
        let g_adv = generator_adversarial_loss(&d_all[x.n()..])?;
        let (l_m, _) = manipulation_term(&xp, regions, &self.manipulator)?;
        Ok(g_adv - alpha * l_m)
    }
}

/// `L_m` over the batch and its gradient w.r.t. the protected slices.
///
/// Tampering is local, so with `q` a protected square and `r = M(q) − q`,
/// `∂L_m/∂q = (2/T)(Jᵀr − r)` with `T` the number of pixels in the batch.
pub fn manipulation_term(xp: &Tensor, regions: &[TamperRegion], m: &ManipulatorHandle) -> Result<(f64, Tensor)> {
    let (n, h, w) = (xp.n(), xp.h(), xp.w());
    let size = regions.first().map(|r| r.size).unwrap_or(0);
    let mut patches = Tensor::zeros(n, 1, size, size);
    for (i, r) in regions.iter().enumerate() {
        if r.size != size {
            return Err(Error::Region("all squares in a batch must share one size".into()));
        }
        r.validate(h, w)?;
        let img = xp.to_array2(i);
        let q = img.slice(s![r.rows(), r.cols()]);
        for (dst, &v) in patches.plane_mut(i, 0).iter_mut().zip(q.iter()) {
            *dst = v;
        }
    }
    let (out, cache) = m.forward_patches(&patches)?;
    let mut resid = out;
    for (r, q) in resid.data_mut().iter_mut().zip(patches.data()) {
        *r -= q;
    }
    let total = (n * h * w) as f64;
    let l_m = resid.data().iter().map(|v| v * v).sum::<f64>() / total;
    let jt = m.patch_vjp(&cache, &resid);
    let mut grad = Tensor::zeros(n, 1, h, w);
    for (i, r) in regions.iter().enumerate() {
        let (jp, rp) = (jt.plane(i, 0), resid.plane(i, 0));
        let plane = grad.plane_mut(i, 0);
        for (py, y) in r.rows().enumerate() {
            for (px, x) in r.cols().enumerate() {
                let k = py * size + px;
                plane[y * w + x] = 2.0 / total * (jp[k] - rp[k]);
            }
        }
    }
    Ok((l_m, grad))
}

/// Builds the manipulator named by the config, training the surrogate on `slices` if needed.
pub fn build_manipulator(slices: &[Array2<f64>], cfg: &TrainingConfig) -> Result<ManipulatorHandle> {
    match cfg.manipulator_kind {
        ManipulatorKind::BlurBlend => Ok(ManipulatorHandle::blur_blend()),
        ManipulatorKind::External => {
            let path = cfg
                .manipulator_weights
                .as_ref()
                .ok_or_else(|| Error::Config("the external manipulator needs `manipulator_weights`".into()))?;
            ManipulatorHandle::load(path)
        }
        ManipulatorKind::InpaintSurrogate => {
            let icfg = InpaintConfig {
                epochs: cfg.surrogate_epochs,
                seed: cfg.seed ^ SURROGATE_SEED_SALT,
                width: cfg.surrogate_width,
                patch: cfg.region_size,
                ..InpaintConfig::default()
            };
            Ok(ManipulatorHandle::inpaint(train_inpaint_net(slices, &icfg)?))
        }
    }
}

/// Where `fit` writes per-epoch checkpoints and the step log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.safetensors"))
    }
    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.safetensors")
    }
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

/// Runs `epochs × ⌈N / batch⌉` steps. With `out`, a checkpoint is written after
/// every epoch and each step's losses are appended to the log.
pub fn fit(
    slices: &[Array2<f64>],
    cfg: &TrainingConfig,
    manipulator: ManipulatorHandle,
    out: Option<&RunOutput>,
) -> Result<Checkpoint> {
    let mut history = Vec::new();
    fit_with_history(slices, cfg, manipulator, out, &mut history)
}

pub fn fit_with_history(
    slices: &[Array2<f64>],
    cfg: &TrainingConfig,
    manipulator: ManipulatorHandle,
    out: Option<&RunOutput>,
    history: &mut Vec<LossBreakdown>,
) -> Result<Checkpoint> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    let (h, w) = first.dim();
    if let Some(bad) = slices.iter().position(|s| s.dim() != (h, w)) {
        return Err(Error::Shape(format!("slice {bad} is {:?}, expected {:?}", slices[bad].dim(), (h, w))));
    }
    cfg.validate()?;
    let calib_idx: Vec<usize> = epoch_order(slices.len(), cfg.seed, 0)
        .into_iter()
        .take(cfg.batch_size.max(16))
        .collect();
    let calib = stack(slices, &calib_idx)?;
    let mut t = Trainer::new(cfg, h, w, manipulator, Some(&calib))?;

    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log_path();
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    for epoch in 0..cfg.epochs {
        t.epoch = epoch;
        let order = epoch_order(slices.len(), cfg.seed, epoch);
        for idx in order.chunks(cfg.batch_size) {
            let x = stack(slices, idx)?;
            let delta = t.perturbation.next_batch(idx.len());
            let regions = t.step_regions(idx.len(), h, w)?;
            let step = t.step as usize;
            let losses = t.train_step(&x, &delta, &regions)?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", losses.csv_row(step)).map_err(|e| Error::io(&*path, e))?;
            }
            history.push(losses);
        }
        t.epoch = epoch + 1;
        if let Some(o) = out {
            save_checkpoint(&t.checkpoint(), &o.checkpoint_path(epoch + 1))?;
        }
    }
    let c = t.checkpoint();
    if let Some(o) = out {
        save_checkpoint(&c, &o.final_path())?;
    }
    Ok(c)
}

/// Protects every slice of `scan` with the checkpoint's generator and perturbation.
pub fn protect(scan: &CtVolume, c: &Checkpoint) -> Result<CtVolume> {
    let slices: Vec<Array2<f64>> = scan
        .slices()?
        .into_iter()
        .map(|r| protect_pixels(&r.pixels, c))
        .collect::<Result<_>>()?;
    CtVolume::from_normalized(&slices, scan.spacing, format!("{}-protected", scan.source_id))
}

/// Protects one normalized slice.
pub fn protect_pixels(pixels: &Array2<f64>, c: &Checkpoint) -> Result<Array2<f64>> {
    if pixels.dim() != c.perturbation.dim() {
        return Err(Error::Shape(format!(
            "slice {:?} does not match the checkpoint's {:?} perturbation",
            pixels.dim(),
            c.perturbation.dim()
        )));
    }
    c.generator.protect_slice(pixels.view(), c.perturbation.field.view())
}

/// Protected slice in Hounsfield units, rounded like a stored volume.
pub fn protect_hu(pixels: &Array2<f64>, c: &Checkpoint) -> Result<Array2<f64>> {
    Ok(denormalize_slice(protect_pixels(pixels, c)?.view())?.mapv(f64::round))
}

pub fn load_run_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manipulator::InpaintNet;
    use crate::volume::{generate_phantom, PhantomSpec};

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            epochs: 1,
            batch_size: 4,
            trunk_width: 4,
            residual_blocks: 1,
            disc_base_width: 2,
            disc_min_input: 8,
            region_size: 16,
            manipulator_kind: ManipulatorKind::BlurBlend,
            ..TrainingConfig::default()
        }
    }

    fn slices(n: usize, size: usize, seed: u64) -> Vec<Array2<f64>> {
        let v = generate_phantom(&PhantomSpec::new(size, n, 0.5, seed)).unwrap();
        v.slices().unwrap().into_iter().map(|r| r.pixels).collect()
    }

    #[test]
    fn epoch_bookkeeping() {
        assert_eq!(steps_per_epoch(200, 16), 13);
        assert_eq!(steps_per_epoch(16, 16), 1);
        assert_eq!(epoch_order(50, 3, 2), epoch_order(50, 3, 2));
        assert_ne!(epoch_order(50, 3, 2), epoch_order(50, 3, 1));
        let mut o = epoch_order(50, 3, 0);
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn manipulation_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ManipulatorHandle::inpaint(InpaintNet::new(2, &mut rng));
        let xs = slices(2, 32, 1);
        let x = stack(&xs, &[0, 1]).unwrap().map(|v| v * 0.9);
        let regions = [TamperRegion::new(16, 16).with_size(8), TamperRegion::new(9, 20).with_size(8)];
        let (_, g) = manipulation_term(&x, &regions, &m).unwrap();
        for &idx in &[16 * 32 + 16, 32 * 32 + 20 * 32 + 9, 32 * 32 + 17 * 32 + 7, 0] {
            let h = 1e-6;
            let mut a = x.clone();
            a.data_mut()[idx] += h;
            let mut b = x.clone();
            b.data_mut()[idx] -= h;
            let fd = (manipulation_term(&a, &regions, &m).unwrap().0 - manipulation_term(&b, &regions, &m).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-7, "pixel {idx}: {fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn step_updates_discriminator_and_leaves_manipulator_frozen() {
        let cfg = tiny_cfg();
        let xs = slices(4, 32, 2);
        let x = stack(&xs, &[0, 1, 2, 3]).unwrap();
        let mut t = Trainer::new(&cfg, 32, 32, ManipulatorHandle::blur_blend(), Some(&x)).unwrap();
        let d_before = t.discriminator.clone();
        let g_before = t.generator.clone();
        let delta = t.perturbation.next_batch(4);
        let regions = t.step_regions(4, 32, 32).unwrap();
        let a = t.clone().train_step(&x, &delta, &regions).unwrap();
        let b = t.train_step(&x, &delta, &regions).unwrap();
        assert_eq!(a, b);
        let moved = |m1: &dyn Fn() -> Vec<f64>, m2: Vec<f64>| m1() != m2;
        let params = |m: &dyn Module| m.named_params("").into_iter().flat_map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        assert!(moved(&|| params(&d_before), params(&t.discriminator)));
        assert!(moved(&|| params(&g_before), params(&t.generator)));
        assert_eq!(t.step, 1);
    }

    #[test]
    fn fit_checkpoints_round_trip_and_protect_identically() {
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput { dir: dir.path().join("run") };
        let cfg = TrainingConfig { epochs: 2, ..tiny_cfg() };
        let xs = slices(6, 32, 3);
        let mut history = Vec::new();
        let c = fit_with_history(&xs, &cfg, ManipulatorHandle::blur_blend(), Some(&out), &mut history).unwrap();
        assert_eq!(history.len(), 2 * steps_per_epoch(6, 4));
        assert_eq!((c.epoch, c.step), (2, 4));
        assert!(out.checkpoint_path(1).exists() && out.checkpoint_path(2).exists());
        let log = std::fs::read_to_string(out.log_path()).unwrap();
        assert_eq!(log.lines().next(), Some(LOG_HEADER));
        assert_eq!(log.lines().count(), 5);

        let back = load_checkpoint(&out.final_path()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        assert_eq!(back.config, cfg);
        assert_eq!(back.opt_g, c.opt_g);
        for x in &xs[..2] {
            assert_eq!(protect_pixels(x, &back).unwrap(), protect_pixels(x, &c).unwrap());
        }

        let bytes = std::fs::read(out.final_path()).unwrap();
        let cut = dir.path().join("cut.safetensors");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint { .. })));
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.safetensors")),
            Err(Error::CheckpointNotFound(_))
        ));
    }

    #[test]
    fn protect_preserves_volume_shape() {
        let cfg = tiny_cfg();
        let vol = generate_phantom(&PhantomSpec::new(32, 3, 0.5, 4)).unwrap();
        let xs: Vec<_> = vol.slices().unwrap().into_iter().map(|r| r.pixels).collect();
        let c = fit(&xs, &cfg, ManipulatorHandle::blur_blend(), None).unwrap();
        let p = protect(&vol, &c).unwrap();
        assert_eq!(p.dims(), vol.dims());
        assert_eq!(protect(&vol, &c).unwrap().voxels(), p.voxels());
        let wrong = generate_phantom(&PhantomSpec::new(48, 1, 0.5, 4)).unwrap();
        assert!(protect(&wrong, &c).is_err());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let cfg = tiny_cfg();
        assert!(fit(&[], &cfg, ManipulatorHandle::blur_blend(), None).is_err());
        let mixed = vec![Array2::zeros((32, 32)), Array2::zeros((40, 32))];
        assert!(fit(&mixed, &cfg, ManipulatorHandle::blur_blend(), None).is_err());
        let external = TrainingConfig {
            manipulator_kind: ManipulatorKind::External,
            manipulator_weights: None,
            ..cfg
        };
        assert!(build_manipulator(&[], &external).is_err());
    }
}
