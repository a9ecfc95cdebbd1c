//! Flat `key = value` run configuration over [`TrainConfig`].
//!
//! Keys are dotted field paths (`model.nerf.hidden`, `posterior.steps`, ...).
//! Values are JSON literals; bare words are read as strings. `#` starts a
//! comment. The optional `preset` key selects the base configuration and must
//! come first.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Ordered key/value overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub entries: Vec<(String, String)>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .expect("flattened keys address objects")
            .entry(part.to_string())
            .or_insert(Value::Object(Map::new()));
    }
    *cur = v;
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        _ => v.to_string(),
    }
}

/// Reads `text` as the same kind of value as `like`.
fn parse_value(text: &str, like: &Value) -> Value {
    match (like, serde_json::from_str::<Value>(text)) {
        (Value::String(_), Ok(Value::String(s))) => Value::String(s),
        (Value::String(_), _) => Value::String(text.to_string()),
        (_, Ok(v)) => v,
        (_, Err(_)) => Value::String(text.to_string()),
    }
}

/// Every key of a configuration with its value as written.
pub fn config_keys(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let v = serde_json::to_value(cfg).expect("config serialises");
    let mut flat = BTreeMap::new();
    flatten("", &v, &mut flat);
    flat.into_iter().map(|(k, v)| (k, render_value(&v))).collect()
}

/// One line of documentation per key group; [`describe`] resolves a key to
/// the longest matching prefix.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("preset", "base configuration (desk-mcmc, desk-amortized, desk-nopose, full-*)"),
    ("algorithm", "mcmc | amortized | amortized-nopose"),
    ("model.nerf.variant", "latent conditioning of the radiance field: concat | film"),
    ("model.nerf.hidden", "radiance field layer width"),
    ("model.nerf.trunk_depth", "hidden layers in the shape trunk"),
    ("model.nerf.pos_freqs", "positional-encoding frequencies for points"),
    ("model.nerf.dir_freqs", "positional-encoding frequencies for view directions"),
    ("model.nerf.dim_a", "appearance latent dimension"),
    ("model.nerf.dim_s", "shape latent dimension"),
    ("model.nerf.mapping_layers", "FiLM mapping network depth"),
    ("model.nerf.film_layers", "FiLM-modulated layers"),
    ("model.nerf", "radiance field architecture"),
    ("model.ebm_a", "appearance energy net: size (small | large) and width"),
    ("model.ebm_s", "shape energy net: size (small | large) and width"),
    ("model.prior_a", "appearance prior: reference (normal | uniform), sigma, bound, dim, Langevin steps, step_size, noise_weight"),
    ("model.prior_s", "shape prior: same fields as model.prior_a"),
    ("model.sigma_eps", "pixel noise standard deviation"),
    ("model.render", "camera and ray sampling: width, height, fov_y, near, far, samples, background, deterministic, scene_radius (null = unbounded)"),
    ("model.radius", "camera distance from the origin"),
    ("model", "generator and priors"),
    ("encoder.widths", "channels of the stride-2 conv blocks"),
    ("encoder.head_hidden", "hidden width of each encoder head"),
    ("encoder.dim_a", "appearance latent dimension (must equal model.nerf.dim_a)"),
    ("encoder.dim_s", "shape latent dimension (must equal model.nerf.dim_s)"),
    ("encoder.pose_conditioned", "latent heads see the pose (true exactly for amortized)"),
    ("lr_alpha", "energy net learning rate"),
    ("lr_theta", "generator learning rate"),
    ("lr_phi", "encoder feature and pose-head learning rate"),
    ("lr_phi_heads", "encoder latent-head learning rate"),
    ("posterior.steps", "posterior Langevin steps per iteration"),
    ("posterior.step_size", "posterior Langevin step size"),
    ("posterior.noise_weight", "posterior Langevin noise weight"),
    ("posterior.rays", "rays per view during posterior steps: all | count"),
    ("persistent", "persistent per-object latent chains updated by Adam"),
    ("latent_lr", "Adam rate of persistent chains"),
    ("batch_size", "objects per iteration"),
    ("views_per_object", "views per object per iteration"),
    ("cross_view", "amortised: each encoder sample also reconstructs another view of its object"),
    ("rays", "rays per view in the parameter update: all | count"),
    ("iterations", "iteration budget"),
    ("seed", "master random seed"),
    ("mask_aware", "likelihood over visible pixels only"),
    ("probe_every", "reconstruction PSNR probe period (0 disables)"),
    ("probe_images", "images in the PSNR probe"),
];

pub fn describe(key: &str) -> Option<&'static str> {
    KEY_DOCS
        .iter()
        .filter(|(k, _)| key == *k || key.starts_with(&format!("{k}.")))
        .max_by_key(|(k, _)| k.len())
        .map(|&(_, d)| d)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", n + 1)))?;
            rc.set(k.trim(), v.trim())?;
        }
        Ok(rc)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(cfg_err("empty key"));
        }
        if key == "preset" {
            if !self.entries.is_empty() {
                return Err(cfg_err("preset must precede other keys"));
            }
            self.preset = Some(value.to_string());
        } else {
            self.entries.retain(|(k, _)| k != key);
            self.entries.push((key.to_string(), value.to_string()));
        }
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn merge(&mut self, other: &RunConfig) -> Result<()> {
        if let Some(p) = &other.preset {
            if self.entries.is_empty() {
                self.preset = Some(p.clone());
            } else {
                return Err(cfg_err("preset cannot override existing keys"));
            }
        }
        for (k, v) in &other.entries {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies the entries over the preset (or `default_preset`) and validates.
    pub fn resolve(&self, default_preset: &str) -> Result<TrainConfig> {
        let base = TrainConfig::preset(self.preset.as_deref().unwrap_or(default_preset))?;
        let mut root = serde_json::to_value(&base).expect("config serialises");
        let mut flat = BTreeMap::new();
        flatten("", &root, &mut flat);
        for (k, v) in &self.entries {
            let like = flat.get(k).ok_or_else(|| cfg_err(format!("unknown key {k:?}")))?;
            set_path(&mut root, k, parse_value(v, like));
        }
        let cfg: TrainConfig = serde_json::from_value(root).map_err(|e| cfg_err(format!("bad value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key of `cfg`, one per line; parses back to `cfg`.
    pub fn serialize(cfg: &TrainConfig) -> String {
        let mut s = String::new();
        for (k, v) in config_keys(cfg) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PRESETS;

    #[test]
    fn serialize_parse_roundtrip() {
        for p in PRESETS {
            let cfg = TrainConfig::preset(p).unwrap();
            let text = RunConfig::serialize(&cfg);
            let back = RunConfig::parse(&text).unwrap().resolve(p).unwrap();
            assert_eq!(back, cfg, "{p}");
            // stable under a second pass
            assert_eq!(RunConfig::serialize(&back), text);
            // and independent of the base preset
            let other = RunConfig::parse(&text).unwrap().resolve("desk-mcmc");
            assert_eq!(other.unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let rc = RunConfig::parse("model.nerf.hiden = 3").unwrap();
        assert!(matches!(rc.resolve("desk-mcmc"), Err(Error::Config(_))));
        // an object-valued key is not a leaf
        let rc = RunConfig::parse("model.nerf = 3").unwrap();
        assert!(rc.resolve("desk-mcmc").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let rc =
            RunConfig::parse("preset = desk-amortized\n# comment\niterations = 7\nrays = all\nseed = 9 # trailing")
                .unwrap();
        let c = rc.resolve("desk-mcmc").unwrap();
        assert_eq!(c.algorithm, crate::trainer::Algorithm::Amortized);
        assert_eq!((c.iterations, c.seed), (7, 9));
        assert_eq!(c.rays, crate::inference::RaySubset::All);
        let bad = RunConfig::parse("lr_theta = -1").unwrap();
        assert!(bad.resolve("desk-mcmc").is_err());
        let bad = RunConfig::parse("iterations = lots").unwrap();
        assert!(bad.resolve("desk-mcmc").is_err());
        let mut late = RunConfig::parse("seed = 1").unwrap();
        assert!(late.set("preset", "desk-mcmc").is_err());
    }

    #[test]
    fn every_key_documented() {
        for p in PRESETS {
            for k in config_keys(&TrainConfig::preset(p).unwrap()).keys() {
                assert!(describe(k).is_some(), "undocumented key {k}");
            }
        }
    }
}
