//! Flat `key = value` experiment files with `APGAN_*` environment overrides.
//!
//! `#` starts a comment. `task` is resolved first because task-dependent
//! defaults (image size, generator depth) are derived from it. Optional values
//! accept `none` or an empty right-hand side.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scheduler::PolicyMode;
use crate::tasks::data::TextureFamily;
use crate::tasks::TaskKind;
use crate::trainer::{Backbone, TrainConfig};

pub const ENV_PREFIX: &str = "APGAN_";

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "task",
    "name",
    "output_dir",
    "seed",
    "epochs",
    "max_steps",
    "batch_size",
    "checkpoint_every",
    "policy",
    "phi",
    "backbone",
    "sn",
    "alpha_p",
    "alpha_d",
    "alpha_g",
    "beta1",
    "beta2",
    "adam_eps",
    "image_size",
    "train_images",
    "eval_images",
    "texture",
    "texture_x",
    "texture_y",
    "data_root",
    "extractor_weights",
    "pixel_loss",
    "pixel_weight",
    "cycle_weight",
    "generator_channels",
    "generator_blocks",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub name: Option<String>,
    pub output_dir: Option<PathBuf>,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn optional(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

fn texture(key: &str, v: &str) -> Result<TextureFamily> {
    TextureFamily::parse(v).ok_or_else(|| Error::config(key, format!("unknown texture family `{v}`")))
}

impl ExperimentConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            train: TrainConfig::new(kind),
            name: None,
            output_dir: None,
        }
    }

    /// Parses, applies `env` overrides, then validates.
    pub fn from_pairs(pairs: &[(String, String)], env: &[(String, String)]) -> Result<Self> {
        let mut all: Vec<(String, String)> = pairs.to_vec();
        for (k, v) in env {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                all.push((key.to_ascii_lowercase(), v.clone()));
            }
        }
        let kind = match all.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => TaskKind::parse(v).ok_or_else(|| {
                Error::config(
                    "task",
                    format!("unknown task `{v}` (expected sisr, paired or unpaired)"),
                )
            })?,
            None => return Err(Error::config("task", "missing; set task = sisr | paired | unpaired")),
        };
        let mut cfg = Self::new(kind);
        for (k, v) in &all {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, env: &[(String, String)]) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, env)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::parse(&text, &env)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let task = &mut t.task;
        match key {
            "task" => {
                let kind = TaskKind::parse(v).ok_or_else(|| Error::config("task", format!("unknown task `{v}`")))?;
                if kind != task.kind {
                    return Err(Error::config("task", "conflicting task values"));
                }
            }
            "name" => self.name = optional(v).map(str::to_string),
            "output_dir" => self.output_dir = optional(v).map(PathBuf::from),
            "seed" => t.seed = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "max_steps" => t.max_steps = optional(v).map(|s| num(key, s)).transpose()?,
            "batch_size" => t.batch_size = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "policy" => {
                t.policy = PolicyMode::parse(v).ok_or_else(|| {
                    Error::config(
                        key,
                        format!("unknown policy `{v}` (expected progressive, frozen or normal)"),
                    )
                })?
            }
            "phi" => t.phi = num(key, v)?,
            "backbone" => t.backbone = Backbone::parse(v)?,
            "sn" => task.sn = flag(key, v)?,
            "alpha_p" => t.alpha_p = num(key, v)?,
            "alpha_d" => t.alpha_d = num(key, v)?,
            "alpha_g" => t.alpha_g = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "adam_eps" => t.adam_eps = num(key, v)?,
            "image_size" => task.image_size = num(key, v)?,
            "train_images" => task.train_images = num(key, v)?,
            "eval_images" => task.eval_images = num(key, v)?,
            "texture" => task.texture = texture(key, v)?,
            "texture_x" => task.texture_x = texture(key, v)?,
            "texture_y" => task.texture_y = texture(key, v)?,
            "data_root" => task.data_root = optional(v).map(PathBuf::from),
            "extractor_weights" => task.extractor_weights = optional(v).map(PathBuf::from),
            "pixel_loss" => task.pixel_loss = flag(key, v)?,
            "pixel_weight" => task.pixel_weight = num(key, v)?,
            "cycle_weight" => task.cycle_weight = num(key, v)?,
            "generator_channels" => task.generator_channels = num(key, v)?,
            "generator_blocks" => task.generator_blocks = num(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = to_kv(&self.train, self.output_dir.as_deref());
        if let Some(n) = &self.name {
            s.insert_str(s.find('\n').map_or(0, |i| i + 1), &format!("name = {n}\n"));
        }
        s
    }
}

/// Splits `key = value` lines; rejects lines without `=`.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", i + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Serializes every key of `c`; parsing the result reproduces `c`.
pub fn to_kv(c: &TrainConfig, output_dir: Option<&Path>) -> String {
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map_or_else(|| "none".into(), |v| v.to_string())
    }
    let t = &c.task;
    let path = |p: Option<&Path>| opt(p.map(|p| p.display()));
    let rows: Vec<(&str, String)> = vec![
        ("task", t.kind.as_str().into()),
        ("output_dir", path(output_dir)),
        ("seed", c.seed.to_string()),
        ("epochs", c.epochs.to_string()),
        ("max_steps", opt(c.max_steps)),
        ("batch_size", c.batch_size.to_string()),
        ("checkpoint_every", c.checkpoint_every.to_string()),
        ("policy", c.policy.as_str().into()),
        ("phi", c.phi.to_string()),
        ("backbone", c.backbone.as_str().into()),
        ("sn", t.sn.to_string()),
        ("alpha_p", c.alpha_p.to_string()),
        ("alpha_d", c.alpha_d.to_string()),
        ("alpha_g", c.alpha_g.to_string()),
        ("beta1", c.beta1.to_string()),
        ("beta2", c.beta2.to_string()),
        ("adam_eps", c.adam_eps.to_string()),
        ("image_size", t.image_size.to_string()),
        ("train_images", t.train_images.to_string()),
        ("eval_images", t.eval_images.to_string()),
        ("texture", t.texture.as_str().into()),
        ("texture_x", t.texture_x.as_str().into()),
        ("texture_y", t.texture_y.as_str().into()),
        ("data_root", path(t.data_root.as_deref())),
        ("extractor_weights", path(t.extractor_weights.as_deref())),
        ("pixel_loss", t.pixel_loss.to_string()),
        ("pixel_weight", t.pixel_weight.to_string()),
        ("cycle_weight", t.cycle_weight.to_string()),
        ("generator_channels", t.generator_channels.to_string()),
        ("generator_blocks", t.generator_blocks.to_string()),
    ];
    rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// 64-bit FNV-1a; stable across toolchains, used for config fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_follow_task() {
        let c = ExperimentConfig::parse("task = sisr\n", &[]).unwrap();
        assert_eq!(c.train.task.image_size, 128);
        assert_eq!(c.train.phi, 0.66);
        assert_eq!(c.train.alpha_p, 1e-6);
        let c = ExperimentConfig::parse("task = unpaired", &[]).unwrap();
        assert_eq!(c.train.task.image_size, 64);
    }

    #[test]
    fn invalid_phi_names_field() {
        let err = ExperimentConfig::parse("task = sisr\nphi = 1.2\n", &[]).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "phi"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn learning_rate_order_enforced() {
        let err = ExperimentConfig::parse("task = sisr\nalpha_p = 1e-3\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "alpha_p"));
    }

    #[test]
    fn unknown_key_and_bad_types_rejected() {
        assert!(
            matches!(ExperimentConfig::parse("task = sisr\nfoo = 1", &[]), Err(Error::Config { ref field, .. }) if field == "foo")
        );
        assert!(
            matches!(ExperimentConfig::parse("task = sisr\nepochs = x", &[]), Err(Error::Config { ref field, .. }) if field == "epochs")
        );
        assert!(
            matches!(ExperimentConfig::parse("phi = 0.5", &[]), Err(Error::Config { ref field, .. }) if field == "task")
        );
        assert!(
            matches!(ExperimentConfig::parse("task = sisr\nbackbone = vgg", &[]), Err(Error::Config { ref field, .. }) if field == "backbone")
        );
    }

    #[test]
    fn env_overrides_file() {
        let c = ExperimentConfig::parse(
            "task = paired # comment\nseed = 3\n",
            &env(&[("APGAN_SEED", "9"), ("APGAN_POLICY", "frozen"), ("OTHER_SEED", "1")]),
        )
        .unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.policy, PolicyMode::Frozen);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            prop_oneof![Just(TaskKind::Sisr), Just(TaskKind::Paired), Just(TaskKind::Unpaired)],
            any::<u64>(),
            1usize..50,
            proptest::option::of(1usize..10_000),
            0.0f64..=1.0,
            prop_oneof![
                Just(PolicyMode::Progressive),
                Just(PolicyMode::Frozen),
                Just(PolicyMode::Normal)
            ],
            (1e-9f64..1e-5, 1e-4f64..1e-2, 0.0f64..0.99, any::<bool>()),
            (1usize..4, proptest::option::of("[a-z]{1,8}"), 0.0f64..200.0),
        )
            .prop_map(
                |(kind, seed, epochs, max_steps, phi, policy, (ap, ad, b1, sn), (mult, dir, pw))| {
                    let mut c = ExperimentConfig::new(kind);
                    let t = &mut c.train;
                    t.seed = seed;
                    t.epochs = epochs;
                    t.max_steps = max_steps;
                    t.phi = phi;
                    t.policy = policy;
                    t.alpha_p = ap;
                    t.alpha_d = ad;
                    t.beta1 = b1;
                    t.task.sn = sn;
                    t.task.image_size = kind.head_kind().total_stride() * mult;
                    t.task.pixel_weight = pw;
                    t.task.data_root = dir.clone().map(PathBuf::from);
                    c.output_dir = dir.map(|d| PathBuf::from(format!("runs/{d}")));
                    c
                },
            )
    }

    proptest! {
        #[test]
        fn kv_round_trip(c in arb_config()) {
            let text = c.to_kv();
            let back = ExperimentConfig::parse(&text, &[]).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
