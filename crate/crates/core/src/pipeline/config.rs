//! Plain-text `key = value` configuration. Blank lines and `#` comments are
//! ignored; unknown keys and malformed values are errors naming the key.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::LandmarkGroup;
use crate::losses::LossConfig;
use crate::nn::adam::AdamConfig;
use crate::nn::disc::DiscConfig;
use crate::nn::pas::{PasConfig, POSE_COND_DIM};
use crate::nn::unet::UnetConfig;
use crate::synthdata::DatasetConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub resolution: usize,
    pub batch_size: usize,
    // data
    pub n_ids: usize,
    pub n_styles: usize,
    pub n_pairs: usize,
    pub n_test_pairs: usize,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    pub occlusion_min: f64,
    pub occlusion_max: f64,
    // schedule and optimizer
    pub pretrain_steps: usize,
    pub joint_steps: usize,
    pub checkpoint_every: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub disc_power_iters: usize,
    // losses
    pub recon_weight_pas: f64,
    pub lambda_inpaint: f64,
    pub tv_normalized: bool,
    pub perceptual_normalized: bool,
    pub perceptual_taps: Vec<usize>,
    // architecture
    pub pas_widths: Vec<usize>,
    pub pas_attention_after: usize,
    pub pas_embed_dim: usize,
    pub pas_hidden_dim: usize,
    pub gen_widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    pub id_dim: usize,
    pub extractor_seed: u64,
    // pipeline switches
    pub use_pas: bool,
    pub pas_grad_from_inpaint: bool,
    pub fit_groups: Vec<LandmarkGroup>,
    pub warp_fill: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 32,
            batch_size: 4,
            n_ids: 8,
            n_styles: 4,
            n_pairs: 64,
            n_test_pairs: 16,
            max_yaw_deg: 45.0,
            max_pitch_deg: 15.0,
            max_roll_deg: 10.0,
            occlusion_min: 0.1,
            occlusion_max: 0.3,
            pretrain_steps: 500,
            joint_steps: 2000,
            checkpoint_every: 500,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            disc_power_iters: 1,
            recon_weight_pas: 0.1,
            lambda_inpaint: 0.1,
            tv_normalized: false,
            perceptual_normalized: true,
            perceptual_taps: vec![1, 3, 5, 7, 9],
            pas_widths: vec![16, 32, 48, 64],
            pas_attention_after: 2,
            pas_embed_dim: 512,
            pas_hidden_dim: 512,
            gen_widths: vec![16, 32, 64, 64],
            disc_widths: vec![32, 64, 128],
            id_dim: 64,
            extractor_seed: 1234,
            use_pas: true,
            pas_grad_from_inpaint: false,
            fit_groups: vec![
                LandmarkGroup::Jaw,
                LandmarkGroup::Brow,
                LandmarkGroup::Eye,
                LandmarkGroup::NoseBridge,
            ],
            warp_fill: 0.0,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected true/false, got {v:?}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|t| num(key, t.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line, format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "resolution" => self.resolution = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "n_ids" => self.n_ids = num(key, v)?,
            "n_styles" => self.n_styles = num(key, v)?,
            "n_pairs" => self.n_pairs = num(key, v)?,
            "n_test_pairs" => self.n_test_pairs = num(key, v)?,
            "max_yaw_deg" => self.max_yaw_deg = num(key, v)?,
            "max_pitch_deg" => self.max_pitch_deg = num(key, v)?,
            "max_roll_deg" => self.max_roll_deg = num(key, v)?,
            "occlusion_min" => self.occlusion_min = num(key, v)?,
            "occlusion_max" => self.occlusion_max = num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = num(key, v)?,
            "joint_steps" => self.joint_steps = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "disc_power_iters" => self.disc_power_iters = num(key, v)?,
            "recon_weight_pas" => self.recon_weight_pas = num(key, v)?,
            "lambda_inpaint" => self.lambda_inpaint = num(key, v)?,
            "tv_normalized" => self.tv_normalized = flag(key, v)?,
            "perceptual_normalized" => self.perceptual_normalized = flag(key, v)?,
            "perceptual_taps" => self.perceptual_taps = list(key, v)?,
            "pas_widths" => self.pas_widths = list(key, v)?,
            "pas_attention_after" => self.pas_attention_after = num(key, v)?,
            "pas_embed_dim" => self.pas_embed_dim = num(key, v)?,
            "pas_hidden_dim" => self.pas_hidden_dim = num(key, v)?,
            "gen_widths" => self.gen_widths = list(key, v)?,
            "disc_widths" => self.disc_widths = list(key, v)?,
            "id_dim" => self.id_dim = num(key, v)?,
            "extractor_seed" => self.extractor_seed = num(key, v)?,
            "use_pas" => self.use_pas = flag(key, v)?,
            "pas_grad_from_inpaint" => self.pas_grad_from_inpaint = flag(key, v)?,
            "fit_groups" => {
                self.fit_groups = v
                    .split(',')
                    .map(|g| LandmarkGroup::from_name(g.trim()).ok_or_else(|| bad(key, format!("unknown landmark group {g:?}"))))
                    .collect::<Result<_>>()?
            }
            "warp_fill" => self.warp_fill = num(key, v)?,
            _ => return Err(bad(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.pas_widths.len().max(self.gen_widths.len());
        if self.resolution == 0 || self.resolution % (1 << depth) != 0 {
            return Err(bad("resolution", format!("must be a positive multiple of 2^{depth}")));
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("n_ids", self.n_ids),
            ("n_styles", self.n_styles),
            ("n_pairs", self.n_pairs),
            ("n_test_pairs", self.n_test_pairs),
            ("checkpoint_every", self.checkpoint_every),
            ("id_dim", self.id_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(bad(k, "must be positive"));
        }
        for (k, v) in [("pas_widths", &self.pas_widths), ("gen_widths", &self.gen_widths), ("disc_widths", &self.disc_widths), ("perceptual_taps", &self.perceptual_taps)] {
            if v.is_empty() || (k != "perceptual_taps" && v.contains(&0)) {
                return Err(bad(k, "must be a non-empty list of positive values"));
            }
        }
        if self.perceptual_taps.iter().any(|&t| t >= 10) {
            return Err(bad("perceptual_taps", "tap indices must be below 10"));
        }
        if self.pas_attention_after > self.pas_widths.len() {
            return Err(bad("pas_attention_after", "exceeds the number of embedder blocks"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        for (k, v) in [("recon_weight_pas", self.recon_weight_pas), ("lambda_inpaint", self.lambda_inpaint)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(k, "weights must be non-negative"));
            }
        }
        if !(0.0 < self.occlusion_min && self.occlusion_min <= self.occlusion_max && self.occlusion_max <= 1.0) {
            return Err(bad("occlusion_min", "need 0 < occlusion_min <= occlusion_max <= 1"));
        }
        for (k, v, lim) in [("max_yaw_deg", self.max_yaw_deg, 75.0), ("max_pitch_deg", self.max_pitch_deg, 30.0), ("max_roll_deg", self.max_roll_deg, 20.0)] {
            if !(0.0..=lim).contains(&v) {
                return Err(bad(k, format!("must lie in [0, {lim}]")));
            }
        }
        if self.fit_groups.is_empty() {
            return Err(bad("fit_groups", "need at least one landmark group"));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("resolution", self.resolution.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("n_ids", self.n_ids.to_string());
        kv("n_styles", self.n_styles.to_string());
        kv("n_pairs", self.n_pairs.to_string());
        kv("n_test_pairs", self.n_test_pairs.to_string());
        kv("max_yaw_deg", self.max_yaw_deg.to_string());
        kv("max_pitch_deg", self.max_pitch_deg.to_string());
        kv("max_roll_deg", self.max_roll_deg.to_string());
        kv("occlusion_min", self.occlusion_min.to_string());
        kv("occlusion_max", self.occlusion_max.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("joint_steps", self.joint_steps.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("disc_power_iters", self.disc_power_iters.to_string());
        kv("recon_weight_pas", self.recon_weight_pas.to_string());
        kv("lambda_inpaint", self.lambda_inpaint.to_string());
        kv("tv_normalized", self.tv_normalized.to_string());
        kv("perceptual_normalized", self.perceptual_normalized.to_string());
        kv("perceptual_taps", join(&self.perceptual_taps));
        kv("pas_widths", join(&self.pas_widths));
        kv("pas_attention_after", self.pas_attention_after.to_string());
        kv("pas_embed_dim", self.pas_embed_dim.to_string());
        kv("pas_hidden_dim", self.pas_hidden_dim.to_string());
        kv("gen_widths", join(&self.gen_widths));
        kv("disc_widths", join(&self.disc_widths));
        kv("id_dim", self.id_dim.to_string());
        kv("extractor_seed", self.extractor_seed.to_string());
        kv("use_pas", self.use_pas.to_string());
        kv("pas_grad_from_inpaint", self.pas_grad_from_inpaint.to_string());
        kv("fit_groups", self.fit_groups.iter().map(|g| g.name()).collect::<Vec<_>>().join(","));
        kv("warp_fill", self.warp_fill.to_string());
        s
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.joint_steps
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            resolution: self.resolution,
            n_ids: self.n_ids,
            n_styles: self.n_styles,
            n_pairs: self.n_pairs,
            max_yaw: self.max_yaw_deg.to_radians(),
            max_pitch: self.max_pitch_deg.to_radians(),
            max_roll: self.max_roll_deg.to_radians(),
            occlusion_min: self.occlusion_min,
            occlusion_max: self.occlusion_max,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            recon_weight_pas: self.recon_weight_pas,
            lambda_inpaint: self.lambda_inpaint,
            tv_normalized: self.tv_normalized,
            perceptual_normalized: self.perceptual_normalized,
            perceptual_taps: self.perceptual_taps.clone(),
        }
    }

    pub fn pas(&self) -> PasConfig {
        PasConfig {
            resolution: self.resolution,
            in_channels: 3,
            widths: self.pas_widths.clone(),
            attention_after: self.pas_attention_after,
            embed_dim: self.pas_embed_dim,
            hidden_dim: self.pas_hidden_dim,
            cond_dim: POSE_COND_DIM,
        }
    }

    pub fn unet(&self) -> UnetConfig {
        UnetConfig {
            resolution: self.resolution,
            in_channels: 3,
            out_channels: 3,
            widths: self.gen_widths.clone(),
            cond_dim: POSE_COND_DIM + self.id_dim,
        }
    }

    pub fn disc(&self) -> DiscConfig {
        DiscConfig {
            in_channels: 3,
            widths: self.disc_widths.clone(),
            cond_dim: POSE_COND_DIM,
        }
    }
}

/// Small network widths for fast unit tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> Config {
    Config {
        resolution: 16,
        batch_size: 2,
        pas_widths: vec![4, 6, 8, 8],
        pas_embed_dim: 16,
        pas_hidden_dim: 16,
        gen_widths: vec![4, 8, 8, 8],
        disc_widths: vec![4, 8],
        id_dim: 8,
        ..Config::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.lr = 3e-4;
        cfg.fit_groups = vec![LandmarkGroup::Eye, LandmarkGroup::Mouth];
        cfg.tv_normalized = true;
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = Config::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_value_names_the_key() {
        let err = Config::parse("batch_size = four").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# desk run\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn bad_resolution_rejected() {
        assert!(Config::parse("resolution = 40").is_err());
    }
}
