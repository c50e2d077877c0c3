use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::manipulator::ManipulatorHandle;
use crate::models::{Discriminator, Generator};
use crate::nn::{Adam, Module};
use crate::perturbation::{Perturbation, PerturbationMode};
use crate::store::NamedArrays;

pub const FORMAT_VERSION: &str = "1";

/// Everything needed to resume training or to protect new scans.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub perturbation: Perturbation,
    pub config: TrainingConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub manipulator: ManipulatorHandle,
}

fn export_module<M: Module>(m: &M, a: &mut NamedArrays) {
    for (name, p) in m.named_params("") {
        a.insert(name, &p.shape, &p.value);
    }
    for (name, b) in m.named_buffers("") {
        a.insert(name, &b.shape, &b.value);
    }
}

fn import_module<M: Module>(m: &mut M, a: &NamedArrays, section: &str) -> Result<()> {
    for (name, p) in m.named_params_mut("") {
        let shape = p.shape.clone();
        p.value.copy_from_slice(a.get(section, &name, &shape)?);
        p.zero_grad();
    }
    for (name, b) in m.named_buffers_mut("") {
        let shape = b.shape.clone();
        b.value.copy_from_slice(a.get(section, &name, &shape)?);
    }
    Ok(())
}

fn export_adam<M: Module>(opt: &Adam, model: &M, tag: &str, a: &mut NamedArrays) {
    a.set_meta(format!("{tag}.step"), opt.step.to_string());
    a.set_meta(format!("{tag}.lr"), opt.lr.to_string());
    a.set_meta(format!("{tag}.betas"), format!("{},{}", opt.beta1, opt.beta2));
    a.set_meta(format!("{tag}.eps"), opt.eps.to_string());
    for (i, (name, p)) in model.named_params("").into_iter().enumerate() {
        if let (Some(m), Some(v)) = (opt.m.get(i), opt.v.get(i)) {
            a.insert(format!("{tag}.m.{name}"), &p.shape, m);
            a.insert(format!("{tag}.v.{name}"), &p.shape, v);
        }
    }
}

fn import_adam<M: Module>(model: &M, tag: &str, a: &NamedArrays) -> Result<Adam> {
    let betas = a.meta(tag, &format!("{tag}.betas"))?;
    let (b1, b2) = betas
        .split_once(',')
        .and_then(|(x, y)| Some((x.parse().ok()?, y.parse().ok()?)))
        .ok_or_else(|| Error::Checkpoint {
            section: tag.into(),
            message: format!("malformed betas `{betas}`"),
        })?;
    let mut opt = Adam::new(a.meta_parse(tag, &format!("{tag}.lr"))?, b1, b2);
    opt.eps = a.meta_parse(tag, &format!("{tag}.eps"))?;
    opt.step = a.meta_parse(tag, &format!("{tag}.step"))?;
    if opt.step > 0 {
        for (name, p) in model.named_params("") {
            opt.m.push(a.get(tag, &format!("{tag}.m.{name}"), &p.shape)?.to_vec());
            opt.v.push(a.get(tag, &format!("{tag}.v.{name}"), &p.shape)?.to_vec());
        }
    }
    Ok(opt)
}

impl Checkpoint {
    pub fn to_named(&self) -> NamedArrays {
        let mut a = NamedArrays::new();
        a.set_meta("format", FORMAT_VERSION);
        a.set_meta("config", self.config.to_kv());
        a.set_meta("epoch", self.epoch.to_string());
        a.set_meta("step", self.step.to_string());
        export_module(&self.generator, &mut a);
        export_module(&self.discriminator, &mut a);
        export_adam(&self.opt_g, &self.generator, "opt_g", &mut a);
        export_adam(&self.opt_d, &self.discriminator, "opt_d", &mut a);
        let p = &self.perturbation;
        let (h, w) = p.dim();
        a.insert("perturbation.field", &[h, w], p.field.as_slice().expect("standard layout"));
        a.set_meta("perturbation.sigma", p.sigma.to_string());
        a.set_meta("perturbation.seed", p.seed.to_string());
        a.set_meta("perturbation.mode", p.mode.to_string());
        a.set_meta("perturbation.draws", p.draws.to_string());
        self.manipulator.export(&mut a, "m.");
        a
    }

    pub fn from_named(a: &NamedArrays) -> Result<Self> {
        let version = a.meta("header", "format")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                section: "header".into(),
                message: format!("unsupported format version `{version}`"),
            });
        }
        let config = TrainingConfig::from_kv(a.meta("config", "config")?).map_err(|e| Error::Checkpoint {
            section: "config".into(),
            message: e.to_string(),
        })?;
        // Structure comes from the config; every value is then overwritten.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(&config.generator_spec(), &mut rng);
        import_module(&mut generator, a, "generator")?;
        let mut discriminator = Discriminator::new(&config.discriminator_spec(), &mut rng);
        import_module(&mut discriminator, a, "discriminator")?;
        let opt_g = import_adam(&generator, "opt_g", a)?;
        let opt_d = import_adam(&discriminator, "opt_d", a)?;

        let sec = "perturbation";
        let (shape, _) = a.arrays.get("perturbation.field").ok_or_else(|| Error::Checkpoint {
            section: sec.into(),
            message: "missing array `perturbation.field`".into(),
        })?;
        if shape.len() != 2 {
            return Err(Error::Checkpoint {
                section: sec.into(),
                message: format!("field has shape {shape:?}"),
            });
        }
        let (h, w) = (shape[0], shape[1]);
        let field = a.get(sec, "perturbation.field", &[h, w])?.to_vec();
        let mode: PerturbationMode = a.meta(sec, "perturbation.mode")?.parse().map_err(|e: Error| Error::Checkpoint {
            section: sec.into(),
            message: e.to_string(),
        })?;
        let perturbation = Perturbation {
            field: ndarray::Array2::from_shape_vec((h, w), field).expect("shape checked"),
            sigma: a.meta_parse(sec, "perturbation.sigma")?,
            seed: a.meta_parse(sec, "perturbation.seed")?,
            mode,
            draws: a.meta_parse(sec, "perturbation.draws")?,
        };
        let manipulator = ManipulatorHandle::import(a, "m.")?;
        Ok(Checkpoint {
            generator,
            discriminator,
            opt_g,
            opt_d,
            perturbation,
            config,
            epoch: a.meta_parse("state", "epoch")?,
            step: a.meta_parse("state", "step")?,
            manipulator,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_named().to_bytes()
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    c.to_named().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_named(&NamedArrays::load(path)?)
}
