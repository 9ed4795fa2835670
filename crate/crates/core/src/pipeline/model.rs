//! Trainable networks, their optimizer states, and checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, NamedTensor, TensorData};
use crate::nn::disc::Discriminator;
use crate::nn::extractors::{ToyIdentityNet, ToyPerceptualNet};
use crate::nn::pas::Pas;
use crate::nn::unet::Unet;
use crate::nn::{AdamState, ParamStore};
use crate::synthdata::mix;

const SALT_PAS: u64 = 0x9a5;
const SALT_GEN: u64 = 0x6e7;
const SALT_DISC: u64 = 0xd15;
const SPECTRAL_WARMUP: usize = 20;

/// One network's parameters and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub store: ParamStore,
    pub adam: AdamState,
}

impl Trainable {
    fn new(store: ParamStore) -> Self {
        let adam = AdamState::new(&store);
        Self { store, adam }
    }

    fn tensors(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for (k, p) in self.store.params().iter().enumerate() {
            out.push(NamedTensor::f64(format!("{prefix}/{}", p.name), &p.shape, p.value.clone()));
            out.push(NamedTensor::f64(format!("{prefix}.m/{}", p.name), &p.shape, self.adam.m[k].clone()));
            out.push(NamedTensor::f64(format!("{prefix}.v/{}", p.name), &p.shape, self.adam.v[k].clone()));
        }
        for b in self.store.buffers() {
            out.push(NamedTensor::f64(format!("{prefix}.buf/{}", b.name), &[b.value.len()], b.value.clone()));
        }
        out.push(NamedTensor::u64(format!("{prefix}.adam_step"), vec![self.adam.step]));
    }

    fn restore(&mut self, prefix: &str, tensors: &[NamedTensor], path: &Path) -> Result<usize> {
        let find = |name: String| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::format(path, format!("checkpoint lacks tensor {name}")))
        };
        let f64s = |t: &NamedTensor| -> Result<Vec<f64>> {
            match &t.data {
                TensorData::F64(v) => Ok(v.clone()),
                _ => Err(Error::format(path, format!("tensor {} is not f64", t.name))),
            }
        };
        let mut used = 0;
        let names: Vec<String> = self.store.params().iter().map(|p| p.name.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let value = f64s(find(format!("{prefix}/{name}"))?)?;
            self.store
                .load_named(name, &value)
                .map_err(|e| Error::format(path, e.to_string()))?;
            for (slot, tag) in [(&mut self.adam.m[k], "m"), (&mut self.adam.v[k], "v")] {
                let v = f64s(find(format!("{prefix}.{tag}/{name}"))?)?;
                if v.len() != slot.len() {
                    return Err(Error::format(path, format!("moment {prefix}.{tag}/{name} has wrong length")));
                }
                *slot = v;
            }
            used += 3;
        }
        let buffers: Vec<String> = self.store.buffers().iter().map(|b| b.name.clone()).collect();
        for name in buffers {
            let value = f64s(find(format!("{prefix}.buf/{name}"))?)?;
            self.store
                .load_named(&name, &value)
                .map_err(|e| Error::format(path, e.to_string()))?;
            used += 1;
        }
        match &find(format!("{prefix}.adam_step"))?.data {
            TensorData::U64(v) if v.len() == 1 => self.adam.step = v[0],
            _ => return Err(Error::format(path, format!("bad {prefix}.adam_step"))),
        }
        Ok(used + 1)
    }
}

/// Everything needed to continue training: networks, optimizer moments,
/// the number of completed steps and the configuration. Batches are drawn
/// from an RNG keyed by `(seed, step)`, so the step counter is the whole
/// RNG state. The frozen feature extractors are rebuilt from the config.
pub struct TrainState {
    pub cfg: Config,
    pub step: u64,
    pub pas: Pas,
    pub unet: Unet,
    pub disc: Discriminator,
    pub pas_net: Trainable,
    pub gen_net: Trainable,
    pub disc_net: Trainable,
    pub perceptual: ToyPerceptualNet,
    pub identity: ToyIdentityNet,
}

impl TrainState {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let rng = |salt: u64| ChaCha8Rng::seed_from_u64(mix(cfg.seed, salt));
        let mut pas_store = ParamStore::new();
        let pas = Pas::new(&mut pas_store, cfg.pas(), &mut rng(SALT_PAS))?;
        let mut gen_store = ParamStore::new();
        let unet = Unet::new(&mut gen_store, cfg.unet(), &mut rng(SALT_GEN))?;
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, cfg.disc(), &mut rng(SALT_DISC));
        disc.converge_spectral(&mut disc_store, SPECTRAL_WARMUP);
        let perceptual = ToyPerceptualNet::new(cfg.extractor_seed, 3, &cfg.perceptual_taps);
        let identity = ToyIdentityNet::new(mix(cfg.extractor_seed, 1), 3, cfg.id_dim);
        Ok(Self {
            cfg,
            step: 0,
            pas,
            unet,
            disc,
            pas_net: Trainable::new(pas_store),
            gen_net: Trainable::new(gen_store),
            disc_net: Trainable::new(disc_store),
            perceptual,
            identity,
        })
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![
            NamedTensor::bytes("meta.config", self.cfg.to_text().into_bytes()),
            NamedTensor::u64("meta.step", vec![self.step]),
        ];
        self.pas_net.tensors("pas", &mut out);
        self.gen_net.tensors("gen", &mut out);
        self.disc_net.tensors("disc", &mut out);
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor], path: &Path) -> Result<Self> {
        let meta = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.data)
                .ok_or_else(|| Error::format(path, format!("checkpoint lacks {name}")))
        };
        let cfg = match meta("meta.config")? {
            TensorData::U8(b) => {
                let text = std::str::from_utf8(b).map_err(|_| Error::format(path, "config is not UTF-8"))?;
                Config::parse(text).map_err(|e| Error::format(path, format!("embedded config: {e}")))?
            }
            _ => return Err(Error::format(path, "meta.config has the wrong type")),
        };
        let step = match meta("meta.step")? {
            TensorData::U64(v) if v.len() == 1 => v[0],
            _ => return Err(Error::format(path, "meta.step has the wrong type")),
        };
        let mut state = Self::new(cfg)?;
        state.step = step;
        let mut used = 2;
        used += state.pas_net.restore("pas", tensors, path)?;
        used += state.gen_net.restore("gen", tensors, path)?;
        used += state.disc_net.restore("disc", tensors, path)?;
        if used != tensors.len() {
            return Err(Error::format(
                path,
                format!("checkpoint has {} tensors, expected {used}", tensors.len()),
            ));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?, path)
    }
}
