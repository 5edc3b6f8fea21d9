//! Ablation matrices: one base config, several `backbone+SN+policy` variants.

use std::path::{Path, PathBuf};

use apgan::config::{parse_pairs, ExperimentConfig, ENV_PREFIX};
use apgan::metrics::comparison_table;
use apgan::scheduler::PolicyMode;
use apgan::trainer::Backbone;
use apgan::Error;

/// A variant label such as `Dense_D+SN+UF`. Without `SN` spectral
/// normalization is off; exactly one policy token (`F`, `UF`, `N`) is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub backbone: Backbone,
    pub sn: bool,
    pub policy: PolicyMode,
}

fn config_error(message: String) -> Error {
    Error::Config {
        field: "variants".into(),
        message,
    }
}

impl Variant {
    pub fn parse(label: &str) -> Result<Self, Error> {
        let mut tokens = label.split('+').map(str::trim);
        let backbone = match tokens.next() {
            Some("Dense_D") => Backbone::Dense,
            Some("VGG_D") => Backbone::parse("vgg")?,
            other => {
                return Err(config_error(format!(
                    "`{label}`: unknown backbone {other:?} (expected Dense_D)"
                )))
            }
        };
        let (mut sn, mut policy) = (false, None);
        for t in tokens {
            let p = match t {
                "SN" if !sn => {
                    sn = true;
                    continue;
                }
                "F" => PolicyMode::Frozen,
                "UF" => PolicyMode::Progressive,
                "N" => PolicyMode::Normal,
                _ => return Err(config_error(format!("`{label}`: unexpected token `{t}`"))),
            };
            if policy.replace(p).is_some() {
                return Err(config_error(format!("`{label}`: more than one policy token")));
            }
        }
        let policy = policy.ok_or_else(|| config_error(format!("`{label}`: missing policy token (F, UF or N)")))?;
        Ok(Self { backbone, sn, policy })
    }

    pub fn label(&self) -> String {
        let backbone = match self.backbone {
            Backbone::Dense => "Dense_D",
        };
        let policy = match self.policy {
            PolicyMode::Frozen => "F",
            PolicyMode::Progressive => "UF",
            PolicyMode::Normal => "N",
        };
        if self.sn {
            format!("{backbone}+SN+{policy}")
        } else {
            format!("{backbone}+{policy}")
        }
    }

    fn overrides(&self) -> [(String, String); 3] {
        [
            ("backbone".into(), self.backbone.as_str().into()),
            ("sn".into(), self.sn.to_string()),
            ("policy".into(), self.policy.as_str().into()),
        ]
    }
}

type Pairs = Vec<(String, String)>;

/// Splits a matrix file into base pairs, variants and the parent output directory.
pub fn parse_matrix(text: &str) -> Result<(Pairs, Vec<Variant>, Option<PathBuf>), Error> {
    let mut base = Vec::new();
    let mut variants = None;
    let mut out = None;
    for (k, v) in parse_pairs(text)? {
        match k.as_str() {
            "variants" => {
                variants = Some(
                    v.split(',')
                        .map(|s| Variant::parse(s.trim()))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            "output_dir" => out = Some(PathBuf::from(v)),
            "name" => {}
            _ => base.push((k, v)),
        }
    }
    let variants = variants
        .filter(|v| !v.is_empty())
        .ok_or_else(|| config_error("matrix lists no variants".into()))?;
    Ok((base, variants, out))
}

pub fn variant_config(
    base: &[(String, String)],
    env: &[(String, String)],
    v: &Variant,
    parent: &Path,
) -> Result<ExperimentConfig, Error> {
    let mut pairs = base.to_vec();
    pairs.extend(env.iter().filter_map(|(k, val)| {
        k.strip_prefix(ENV_PREFIX)
            .map(|k| (k.to_ascii_lowercase(), val.clone()))
    }));
    pairs.extend(v.overrides());
    pairs.push(("name".into(), v.label()));
    pairs.push(("output_dir".into(), parent.join(v.label()).display().to_string()));
    ExperimentConfig::from_pairs(&pairs, &[])
}

/// Runs each variant in order; returns the combined comparison table or the
/// first failing variant with its error.
pub fn run(matrix: &Path, out: Option<&Path>) -> Result<String, (String, Error)> {
    let text = std::fs::read_to_string(matrix).map_err(|e| {
        let msg = format!("cannot read {}: {e}", matrix.display());
        (
            "matrix".to_string(),
            Error::Config {
                field: "matrix".into(),
                message: msg,
            },
        )
    })?;
    let (base, variants, file_out) = parse_matrix(&text).map_err(|e| ("matrix".to_string(), e))?;
    let parent = out
        .map(Path::to_path_buf)
        .or(file_out)
        .unwrap_or_else(|| PathBuf::from("runs/ablation"));
    let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    // Validate the whole matrix before spending compute on any variant.
    let configs = variants
        .iter()
        .map(|v| variant_config(&base, &env, v, &parent).map_err(|e| (v.label(), e)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (v, cfg) in variants.iter().zip(configs) {
        let dir = parent.join(v.label());
        let report = crate::run_experiment(cfg, &dir, true).map_err(|e| (v.label(), e))?;
        let dataset = report.metrics.metadata.get("dataset").cloned().unwrap_or_default();
        rows.push((v.label(), dataset, report.metrics));
    }
    let table = comparison_table(&rows);
    let path = parent.join("comparison.md");
    std::fs::write(&path, &table).map_err(|e| ("comparison".to_string(), Error::Io { path, source: e }))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for l in [
            "Dense_D+F",
            "Dense_D+SN+F",
            "Dense_D+SN+UF",
            "Dense_D+UF",
            "Dense_D+SN+N",
        ] {
            assert_eq!(Variant::parse(l).unwrap().label(), l);
        }
        let v = Variant::parse("Dense_D+SN+UF").unwrap();
        assert!(v.sn && v.policy == PolicyMode::Progressive);
    }

    #[test]
    fn malformed_labels_rejected() {
        for l in [
            "Dense_D",
            "Dense_D+SN",
            "Dense_D+F+UF",
            "Res_D+F",
            "Dense_D+SN+SN+F",
            "VGG_D+F",
        ] {
            assert!(Variant::parse(l).is_err(), "{l}");
        }
    }

    #[test]
    fn variants_share_seed_and_base() {
        let (base, vs, out) =
            parse_matrix("task = sisr\nseed = 4\nvariants = Dense_D+F, Dense_D+SN+UF\noutput_dir = abl\n").unwrap();
        assert_eq!(out, Some(PathBuf::from("abl")));
        let cs: Vec<_> = vs
            .iter()
            .map(|v| variant_config(&base, &[], v, Path::new("abl")).unwrap())
            .collect();
        assert!(cs.iter().all(|c| c.train.seed == 4));
        assert!(!cs[0].train.task.sn && cs[1].train.task.sn);
        assert_eq!(cs[1].output_dir, Some(PathBuf::from("abl/Dense_D+SN+UF")));
    }
}
