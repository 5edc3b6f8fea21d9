//! Alternating discriminator/generator training with progressive unfreezing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, NonFiniteDiagnostic, Result};
use crate::extractor::FreezeState;
use crate::manifest::WeightManifest;
use crate::metrics::MetricReport;
use crate::nn::scalar_f64;
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;
use crate::scheduler::{PolicyMode, UnfreezePolicy};
use crate::tasks::{build_pipeline, Batch, Split, TaskConfig, TaskKind, TaskPipeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Dense,
}

impl Backbone {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "vgg" => Err(Error::config(
                "backbone",
                "the vgg backbone is an extension point; no weights or graph are bundled",
            )),
            other => Err(Error::config(
                "backbone",
                format!("unknown backbone `{other}` (expected dense)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        "dense"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha_p: f64,
    pub alpha_d: f64,
    pub alpha_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimization steps, possibly mid-epoch.
    pub max_steps: Option<usize>,
    pub phi: f64,
    pub policy: PolicyMode,
    pub backbone: Backbone,
    pub seed: u64,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub task: TaskConfig,
}

impl TrainConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            alpha_p: 1e-6,
            alpha_d: 2e-4,
            alpha_g: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            epochs: 10,
            max_steps: None,
            phi: 0.66,
            policy: PolicyMode::Progressive,
            backbone: Backbone::Dense,
            seed: 0,
            checkpoint_every: 0,
            task: TaskConfig::new(kind),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("alpha_p", self.alpha_p),
            ("alpha_d", self.alpha_d),
            ("alpha_g", self.alpha_g),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be finite and positive, got {v}")));
            }
        }
        if self.alpha_p >= self.alpha_d {
            return Err(Error::config(
                "alpha_p",
                format!("must be smaller than alpha_d ({} >= {})", self.alpha_p, self.alpha_d),
            ));
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::config("phi", format!("must lie in [0, 1], got {}", self.phi)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        self.task.validate()
    }

    fn data_seed(&self) -> u64 {
        self.seed ^ 0xD47A_5EED
    }

    fn policy_seed(&self) -> u64 {
        self.seed ^ 0x5C4E_D01E
    }
}

/// Mutable progress of a run; everything needed to resume besides weights.
#[derive(Debug, Clone)]
pub struct RunState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub freeze: FreezeState,
    pub policy: UnfreezePolicy,
    /// Head and unfrozen-extractor moments.
    pub opt_d: Adam,
    pub opt_g: Adam,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_aux: f64,
    pub g_total: f64,
    pub unfrozen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub losses: Vec<LossRecord>,
    /// `(epoch, unit name)` in unfreeze order.
    pub unfreeze_log: Vec<(usize, String)>,
    pub initial_metrics: MetricReport,
    pub metrics: MetricReport,
    pub checkpoints: Vec<PathBuf>,
    pub dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub pipeline: TaskPipeline,
    pub state: RunState,
    pub history: Vec<LossRecord>,
}

const CHECKPOINT_KIND: &str = "apgan-checkpoint";

fn finite_or_abort(values: &[(&str, f64)], epoch: usize, step: usize, stats: crate::tasks::ScoreStats) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite(Box::new(NonFiniteDiagnostic {
        epoch,
        step,
        losses: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        real_scores: stats.real,
        fake_scores: stats.fake,
    })))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pipeline = build_pipeline(&config.task, config.seed)?;
        let state = RunState {
            epoch: 0,
            step: 0,
            freeze: FreezeState::frozen(),
            policy: UnfreezePolicy::new(config.policy, config.phi, config.policy_seed())?,
            opt_d: Adam::new(config.adam()),
            opt_g: Adam::new(config.adam()),
            checkpoint_every: config.checkpoint_every,
        };
        Ok(Self {
            config,
            pipeline,
            state,
            history: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Scheduler step for the upcoming epoch, applied to every discriminator.
    pub fn begin_epoch(&mut self) {
        let units = self.pipeline.unit_count();
        self.state.freeze = self
            .state
            .policy
            .step_epoch(&self.state.freeze, self.state.epoch, units);
        self.pipeline.apply_freeze(&self.state.freeze);
    }

    /// One discriminator update then one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let (epoch, step) = (self.state.epoch, self.state.step);
        let c = &self.config;
        let fakes = self.pipeline.generate(batch)?;

        let (d_loss, stats) = self.pipeline.discriminator_step_loss(batch, &fakes)?;
        let d_val = scalar_f64(&d_loss)?;
        finite_or_abort(&[("d_loss", d_val)], epoch, step, stats)?;
        let grads = d_loss.backward()?;
        let (head, ext) = self.pipeline.discriminator_groups();
        self.state.opt_d.step(&grads, &head, c.alpha_d)?;
        self.state.opt_d.step(&grads, &ext, c.alpha_p)?;
        drop(grads);

        let (g_loss, parts) = self.pipeline.generator_step_loss(batch, &fakes)?;
        let g_val = scalar_f64(&g_loss)?;
        finite_or_abort(
            &[
                ("d_loss", d_val),
                ("g_adv", parts.adversarial),
                ("g_aux", parts.auxiliary),
                ("g_total", g_val),
            ],
            epoch,
            step,
            stats,
        )?;
        let grads = g_loss.backward()?;
        self.state
            .opt_g
            .step(&grads, &self.pipeline.generator_params(), c.alpha_g)?;

        self.state.step += 1;
        let rec = LossRecord {
            epoch,
            step,
            d_loss: d_val,
            g_adv: parts.adversarial,
            g_aux: parts.auxiliary,
            g_total: g_val,
            unfrozen: self.state.freeze.unfrozen_count,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs the next epoch (or what remains of the step budget).
    pub fn run_epoch(&mut self) -> Result<Vec<LossRecord>> {
        self.begin_epoch();
        let plan = self
            .pipeline
            .epoch_plan(self.state.epoch, self.config.batch_size, self.config.data_seed())?;
        let mut out = Vec::with_capacity(plan.len());
        for idx in &plan {
            if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            let batch = self.pipeline.batch(&self.pipeline.train, idx)?;
            out.push(self.train_step(&batch)?);
        }
        self.state.epoch += 1;
        Ok(out)
    }

    pub fn evaluate(&self, split: &Split) -> Result<MetricReport> {
        Ok(self.pipeline.evaluate(split, self.metric_metadata())?.0)
    }

    pub fn metric_metadata(&self) -> BTreeMap<String, String> {
        let t = &self.config.task;
        let dataset = match &t.data_root {
            Some(p) => p.display().to_string(),
            None if t.kind == TaskKind::Unpaired => {
                format!("procedural:{}->{}", t.texture_x.as_str(), t.texture_y.as_str())
            }
            None => format!("procedural:{}", t.texture.as_str()),
        };
        let text = crate::config::to_kv(&self.config, None);
        BTreeMap::from([
            ("run_id".into(), format!("{}-seed{}", t.kind.as_str(), self.config.seed)),
            ("dataset".into(), dataset),
            (
                "config_hash".into(),
                format!("{:016x}", crate::config::fnv1a(text.as_bytes())),
            ),
        ])
    }

    pub fn unfreeze_log(&self) -> Vec<(usize, String)> {
        let units = self.pipeline.units();
        self.state
            .freeze
            .epoch_log
            .iter()
            .map(|e| (e.epoch, units[e.unit_index].name.clone()))
            .collect()
    }

    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let mut m = WeightManifest::new();
        self.pipeline.export(&mut m)?;
        self.state.opt_d.export(&mut m, "opt_d.")?;
        self.state.opt_g.export(&mut m, "opt_g.")?;
        m.metadata.insert("kind".into(), CHECKPOINT_KIND.into());
        m.metadata.insert("config".into(), json(&self.config));
        m.metadata.insert("epoch".into(), self.state.epoch.into());
        m.metadata.insert("step".into(), self.state.step.into());
        m.metadata.insert("freeze".into(), json(&self.state.freeze));
        m.metadata
            .insert("policy_rng".into(), json(&self.state.policy.rng_state()));
        m.metadata
            .insert("head_kind".into(), json(&self.config.task.kind.head_kind()));
        m.metadata.insert("sn".into(), self.config.task.sn.into());
        m.write(path)
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let m = WeightManifest::read(path)?;
        Self::from_manifest(&m)
    }

    pub fn from_manifest(m: &WeightManifest) -> Result<Self> {
        fn field<T: serde::de::DeserializeOwned>(m: &WeightManifest, key: &str) -> Result<T> {
            let v = m
                .metadata
                .get(key)
                .ok_or_else(|| Error::CorruptFile(format!("checkpoint lacks `{key}`")))?;
            serde_json::from_value(v.clone()).map_err(|e| Error::CorruptFile(format!("checkpoint `{key}`: {e}")))
        }
        if m.metadata.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::CorruptFile("not a training checkpoint".into()));
        }
        let mut config: TrainConfig = field(m, "config")?;
        config.task.extractor_weights = None;
        let mut t = Self::new(config)?;
        t.pipeline.load(m)?;
        t.state.epoch = field(m, "epoch")?;
        t.state.step = field(m, "step")?;
        t.state.freeze = field(m, "freeze")?;
        let rng: RngState = field(m, "policy_rng")?;
        t.state.policy.restore_rng(rng);
        t.state.opt_d = Adam::load(t.config.adam(), m, "opt_d.")?;
        t.state.opt_g = Adam::load(t.config.adam(), m, "opt_g.")?;
        t.pipeline.apply_freeze(&t.state.freeze);
        Ok(t)
    }

    /// Trains to completion, writing a report directory when `out` is given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunReport> {
        let initial_metrics = self.evaluate(&self.pipeline.eval)?;
        let mut checkpoints = Vec::new();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write(&dir.join("config.txt"), &crate::config::to_kv(&self.config, Some(dir)))?;
        }
        while !self.is_done() {
            self.run_epoch()?;
            log::info!(
                "epoch {} step {} unfrozen {}/{}",
                self.state.epoch,
                self.state.step,
                self.state.freeze.unfrozen_count,
                self.pipeline.unit_count()
            );
            if let Some(dir) = out {
                if self.state.checkpoint_every > 0
                    && self.state.epoch.is_multiple_of(self.state.checkpoint_every)
                    && !self.is_done()
                {
                    let p = dir
                        .join("checkpoints")
                        .join(format!("epoch_{:04}.ckpt", self.state.epoch));
                    self.checkpoint(&p)?;
                    checkpoints.push(p);
                }
            }
        }
        let metrics = self.evaluate(&self.pipeline.eval)?;
        let report = RunReport {
            losses: self.history.clone(),
            unfreeze_log: self.unfreeze_log(),
            initial_metrics,
            metrics,
            checkpoints,
            dir: out.map(Path::to_path_buf),
        };
        match out {
            Some(dir) => self.write_report(dir, report),
            None => Ok(report),
        }
    }

    fn write_report(&self, dir: &Path, mut report: RunReport) -> Result<RunReport> {
        write(&dir.join("losses.csv"), &losses_csv(&report.losses))?;
        let mut log = String::from("epoch,unit_index,unit\n");
        for (e, (epoch, name)) in self.state.freeze.epoch_log.iter().zip(&report.unfreeze_log) {
            let _ = writeln!(log, "{epoch},{},{name}", e.unit_index);
        }
        write(&dir.join("unfreeze_log.csv"), &log)?;
        write(&dir.join("metrics.json"), &report.metrics.to_json())?;
        write(&dir.join("metrics_initial.json"), &report.initial_metrics.to_json())?;
        let p = dir.join("checkpoints").join("final.ckpt");
        self.checkpoint(&p)?;
        report.checkpoints.push(p);
        Ok(report)
    }
}

/// `(step, epoch, name, value)` rows.
pub fn losses_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,epoch,name,value\n");
    for r in records {
        for (name, v) in [
            ("d_loss", r.d_loss),
            ("g_adv", r.g_adv),
            ("g_aux", r.g_aux),
            ("g_total", r.g_total),
            ("unfrozen", r.unfrozen as f64),
        ] {
            let _ = writeln!(s, "{},{},{name},{v:e}", r.step, r.epoch);
        }
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// Convenience wrapper: build, train and report.
pub fn train(config: TrainConfig, out: Option<&Path>) -> Result<RunReport> {
    Trainer::new(config)?.run(out)
}

/// Largest absolute difference per tensor between two snapshots.
pub fn drift(before: &BTreeMap<String, Tensor>, after: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, f64>> {
    before
        .iter()
        .map(|(k, b)| {
            let a = after.get(k).ok_or_else(|| Error::MissingTensors(vec![k.clone()]))?;
            let d = (a - b)?.abs()?.flatten_all()?.max(0)?;
            Ok((k.clone(), scalar_f64(&d)?))
        })
        .collect()
}

/// Every exported parameter and buffer of the pipeline, by manifest name.
pub fn pipeline_snapshot(pipeline: &TaskPipeline) -> Result<BTreeMap<String, Tensor>> {
    let mut m = WeightManifest::new();
    pipeline.export(&mut m)?;
    m.names()
        .map(|n| Ok((n.clone(), m.tensor(n, &candle_core::Device::Cpu)?)))
        .collect()
}
