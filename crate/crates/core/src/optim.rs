//! Adam with per-parameter moments and step counts.
//!
//! Each parameter keeps its own step count so a unit that starts training
//! mid-run gets the bias correction of a fresh optimizer.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::manifest::WeightManifest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter in `group` that has a gradient, with rate `lr`.
    pub fn step(&mut self, grads: &GradStore, group: &[(String, Var)], lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, var) in group {
            // Gradients can still reference the forward graph; moments must not.
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else {
                continue;
            };
            let g = &g;
            let st = match self.state.get_mut(name) {
                Some(s) => s,
                None => {
                    let z = var.as_tensor().zeros_like()?;
                    self.state.entry(name.clone()).or_insert(Moments {
                        m: z.clone(),
                        v: z,
                        t: 0,
                    })
                }
            };
            st.t += 1;
            st.m = ((&st.m * beta1)? + (g * (1.0 - beta1))?)?;
            st.v = ((&st.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let denom = ((&st.v / c2)?.sqrt()? + eps)?;
            let delta = ((&st.m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (delta * lr)?)?)?;
        }
        Ok(())
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.state.get(name).map(|s| s.t)
    }

    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.state.keys()
    }

    /// Drops moments of parameters outside `keep`.
    pub fn retain(&mut self, keep: &dyn Fn(&str) -> bool) {
        self.state.retain(|k, _| keep(k));
    }

    pub fn export(&self, manifest: &mut WeightManifest, prefix: &str) -> Result<()> {
        let mut steps = serde_json::Map::new();
        for (name, s) in &self.state {
            manifest.insert(&format!("{prefix}{name}.m"), &s.m)?;
            manifest.insert(&format!("{prefix}{name}.v"), &s.v)?;
            steps.insert(name.clone(), s.t.into());
        }
        manifest.metadata.insert(format!("{prefix}steps"), steps.into());
        Ok(())
    }

    pub fn load(config: AdamConfig, manifest: &WeightManifest, prefix: &str) -> Result<Self> {
        let mut state = BTreeMap::new();
        let device = candle_core::Device::Cpu;
        if let Some(serde_json::Value::Object(steps)) = manifest.metadata.get(&format!("{prefix}steps")) {
            for (name, t) in steps {
                let t = t
                    .as_u64()
                    .ok_or_else(|| crate::Error::CorruptFile(format!("optimizer step count of `{name}`")))?;
                let m = manifest.tensor(&format!("{prefix}{name}.m"), &device)?;
                let v = manifest.tensor(&format!("{prefix}{name}.v"), &device)?;
                state.insert(name.clone(), Moments { m, v, t });
            }
        }
        Ok(Self { config, state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::Device;

    fn var(v: &[f64]) -> Var {
        Var::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = var(&[3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig {
            beta1: 0.9,
            ..Default::default()
        });
        let group = vec![("x".to_string(), x.clone())];
        for _ in 0..2000 {
            let g = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&g, &group, 0.05).unwrap();
        }
        assert!(to_vec_f64(x.as_tensor()).unwrap().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let x = var(&[1.0, 1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let loss = (x.as_tensor() * &Tensor::new(&[4.0, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap(), &[("x".into(), x.clone())], 0.1)
            .unwrap();
        let v = to_vec_f64(x.as_tensor()).unwrap();
        assert!((v[0] - 0.9).abs() < 1e-7 && (v[1] - 1.1).abs() < 1e-7, "{v:?}");
        assert_eq!(opt.step_count("x"), Some(1));
    }

    #[test]
    fn group_rates_scale_deltas() {
        let (a, b) = (var(&[0.0; 4]), var(&[0.0; 4]));
        let loss = (a.as_tensor().sum_all().unwrap() + b.as_tensor().sum_all().unwrap()).unwrap();
        let g = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&g, &[("d".into(), a.clone())], 2e-4).unwrap();
        opt.step(&g, &[("p".into(), b.clone())], 1e-6).unwrap();
        let ratio = to_vec_f64(b.as_tensor()).unwrap()[0] / to_vec_f64(a.as_tensor()).unwrap()[0];
        assert!((ratio - 5e-3).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn late_parameters_start_fresh_and_state_round_trips() {
        let (a, b) = (var(&[1.0]), var(&[1.0]));
        let mut opt = Adam::new(AdamConfig::default());
        for i in 0..3 {
            let loss = (a.as_tensor().sqr().unwrap() + b.as_tensor().sqr().unwrap())
                .unwrap()
                .sum_all()
                .unwrap();
            let g = loss.backward().unwrap();
            let mut group = vec![("a".to_string(), a.clone())];
            if i == 2 {
                group.push(("b".into(), b.clone()));
            }
            opt.step(&g, &group, 0.01).unwrap();
        }
        assert_eq!(opt.step_count("a"), Some(3));
        assert_eq!(opt.step_count("b"), Some(1));
        assert!((to_vec_f64(b.as_tensor()).unwrap()[0] - 0.99).abs() < 1e-7);

        let mut m = WeightManifest::new();
        opt.export(&mut m, "opt.").unwrap();
        let back = Adam::load(
            opt.config,
            &WeightManifest::from_bytes(&m.to_bytes().unwrap()).unwrap(),
            "opt.",
        )
        .unwrap();
        assert_eq!(back.step_count("a"), Some(3));
        assert_eq!(
            to_vec_f64(&back.state["a"].v).unwrap(),
            to_vec_f64(&opt.state["a"].v).unwrap()
        );

        opt.retain(&|n| n == "a");
        assert!(!opt.has_state("b"));
    }
}
