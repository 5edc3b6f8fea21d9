//! Task pipelines: 4× super-resolution, paired translation and unpaired
//! translation with cycle consistency.

pub mod data;
pub mod degrade;
pub mod generators;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminator::{AdaptivePerceptualDiscriminator, DiscriminatorInput, HeadKind, HeadSpec, InputMode};
use crate::error::{Error, Result};
use crate::extractor::{build_extractor, ExtractorSpec, FreezeState, UnfreezeUnit};
use crate::losses::{cycle_consistency_loss, discriminator_loss, generator_adversarial_loss, pixel_loss};
use crate::manifest::WeightManifest;
use crate::metrics::{Image, MetricReport, MetricRow};
use crate::nn::{scalar_f64, sigmoid, to_vec_f64, Mode};
use crate::params::NamedVars;
use data::{epoch_order, load_domain, procedural_set, unpaired_stream, TextureFamily};
pub use degrade::degrade;
use generators::{Generator, GeneratorKind, GeneratorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sisr,
    Paired,
    Unpaired,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sisr" => Some(Self::Sisr),
            "paired" => Some(Self::Paired),
            "unpaired" => Some(Self::Unpaired),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sisr => "sisr",
            Self::Paired => "paired",
            Self::Unpaired => "unpaired",
        }
    }

    pub fn generator_kind(self) -> GeneratorKind {
        match self {
            Self::Sisr => GeneratorKind::SrResNet,
            Self::Paired => GeneratorKind::UNet,
            Self::Unpaired => GeneratorKind::ResidualTranslator,
        }
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            Self::Sisr => HeadKind::SuperResolution,
            _ => HeadKind::Translation,
        }
    }

    pub fn input_mode(self) -> InputMode {
        match self {
            Self::Paired => InputMode::Paired,
            _ => InputMode::Single,
        }
    }
}

pub const SR_SCALE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Side of the high-resolution (sisr) or translated images.
    pub image_size: usize,
    /// Procedural images per split; ignored when `data_root` is set.
    pub train_images: usize,
    pub eval_images: usize,
    /// Texture family for sisr and paired runs.
    pub texture: TextureFamily,
    /// Unpaired source and target families.
    pub texture_x: TextureFamily,
    pub texture_y: TextureFamily,
    pub data_root: Option<PathBuf>,
    pub extractor_weights: Option<PathBuf>,
    pub sn: bool,
    pub pixel_loss: bool,
    pub pixel_weight: f64,
    pub cycle_weight: f64,
    pub generator_channels: usize,
    pub generator_blocks: usize,
}

impl TaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        let spec = GeneratorSpec::new(kind.generator_kind());
        Self {
            kind,
            image_size: if kind == TaskKind::Sisr { 128 } else { 64 },
            train_images: 64,
            eval_images: 8,
            texture: TextureFamily::Mixed,
            texture_x: TextureFamily::Stripes,
            texture_y: TextureFamily::Checkerboard,
            data_root: None,
            extractor_weights: None,
            sn: true,
            pixel_loss: true,
            pixel_weight: 100.0,
            cycle_weight: 10.0,
            generator_channels: spec.base_channels,
            generator_blocks: spec.blocks,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            kind: self.kind.generator_kind(),
            base_channels: self.generator_channels,
            blocks: self.generator_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.kind.head_kind().total_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::config(
                "image_size",
                format!(
                    "{} task needs a positive multiple of {stride}, got {}",
                    self.kind.as_str(),
                    self.image_size
                ),
            ));
        }
        if self.data_root.is_none() && (self.train_images == 0 || self.eval_images == 0) {
            return Err(Error::config("train_images", "procedural splits must be non-empty"));
        }
        if self.generator_channels == 0 {
            return Err(Error::config("generator_channels", "must be positive"));
        }
        for (field, v) in [("pixel_weight", self.pixel_weight), ("cycle_weight", self.cycle_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    field,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// One aligned example: generator input and its reference output.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone)]
pub enum Split {
    Aligned(Vec<Example>),
    Unaligned {
        x: Vec<(String, Tensor)>,
        y: Vec<(String, Tensor)>,
    },
}

impl Split {
    pub fn len(&self) -> usize {
        match self {
            Split::Aligned(v) => v.len(),
            Split::Unaligned { x, y } => x.len().max(y.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator inputs and their real counterparts, stacked on dim 0. For the
/// unpaired task `input` holds domain X and `target` domain Y.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub input: Tensor,
    pub target: Tensor,
}

/// Score summaries (mean, min, max) kept for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreStats {
    pub real: (f64, f64, f64),
    pub fake: (f64, f64, f64),
}

fn summarize(logits: &[Tensor]) -> Result<(f64, f64, f64)> {
    let mut v = Vec::new();
    for l in logits {
        v.extend(to_vec_f64(&sigmoid(&l.detach())?)?);
    }
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((mean, min, max))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorLosses {
    pub adversarial: f64,
    /// Pixel loss for aligned tasks, cycle loss for the unpaired task.
    pub auxiliary: f64,
}

fn seed_for(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

fn to_luma3(t: &Tensor) -> Result<Tensor> {
    let w = Tensor::new(&[0.299f32, 0.587, 0.114], t.device())?.reshape((3, 1, 1))?;
    let y = t.broadcast_mul(&w)?.sum_keepdim(0)?;
    Ok(y.repeat((3, 1, 1))?)
}

fn crop_to_multiple(t: &Tensor, m: usize) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    let (ch, cw) = (h / m * m, w / m * m);
    if ch == 0 || cw == 0 {
        return Err(Error::SpatialSize(format!("{h}x{w} image is smaller than {m}")));
    }
    Ok(t.narrow(1, (h - ch) / 2, ch)?.narrow(2, (w - cw) / 2, cw)?)
}

fn sr_examples(hr: Vec<(String, Tensor)>) -> Result<Vec<Example>> {
    hr.into_iter()
        .map(|(id, target)| {
            let target = crop_to_multiple(&target, SR_SCALE)?;
            Ok(Example {
                id,
                input: degrade(&target, SR_SCALE)?,
                target,
            })
        })
        .collect()
}

fn paired_examples(a: Vec<(String, Tensor)>, b: Vec<(String, Tensor)>) -> Result<Vec<Example>> {
    let targets: BTreeMap<String, Tensor> = b.into_iter().collect();
    a.into_iter()
        .map(|(id, input)| {
            let target = targets
                .get(&id)
                .ok_or_else(|| Error::Data(format!("paired image `{id}` has no counterpart in domain b")))?
                .clone();
            if target.dims() != input.dims() {
                return Err(Error::Data(format!(
                    "paired image `{id}` differs in size between domains"
                )));
            }
            Ok(Example { id, input, target })
        })
        .collect()
}

#[derive(Debug)]
pub struct TaskPipeline {
    pub config: TaskConfig,
    /// One generator, or `[G: X→Y, F: Y→X]` for the unpaired task.
    pub generators: Vec<Generator>,
    /// One discriminator, or `[D_Y, D_X]` for the unpaired task.
    pub discriminators: Vec<AdaptivePerceptualDiscriminator>,
    pub train: Split,
    pub eval: Split,
}

/// Builds models and data for `config`. Model initialization and
/// procedural data depend only on `seed`.
pub fn build_pipeline(config: &TaskConfig, seed: u64) -> Result<TaskPipeline> {
    config.validate()?;
    let kind = config.kind;
    let weights = match &config.extractor_weights {
        Some(p) => Some(WeightManifest::read(p)?),
        None => None,
    };
    let n_models = if kind == TaskKind::Unpaired { 2 } else { 1 };
    let mut generators = Vec::new();
    let mut discriminators = Vec::new();
    for i in 0..n_models as u64 {
        generators.push(Generator::new(
            config.generator_spec(),
            DType::F32,
            seed_for(seed, 10 + i),
        )?);
        let ex = build_extractor(
            ExtractorSpec::default(),
            weights.as_ref(),
            DType::F32,
            seed_for(seed, 20),
        )?;
        discriminators.push(AdaptivePerceptualDiscriminator::new(
            ex,
            HeadSpec::new(kind.head_kind(), config.sn),
            kind.input_mode(),
            seed_for(seed, 30 + i),
        )?);
    }
    let (train, eval) = match &config.data_root {
        Some(root) => (load_split(config, root, "train")?, load_split(config, root, "test")?),
        None => (
            procedural_split(config, config.train_images, seed_for(seed, 40))?,
            procedural_split(config, config.eval_images, seed_for(seed, 41))?,
        ),
    };
    Ok(TaskPipeline {
        config: config.clone(),
        generators,
        discriminators,
        train,
        eval,
    })
}

fn procedural_split(config: &TaskConfig, count: usize, seed: u64) -> Result<Split> {
    let s = config.image_size;
    Ok(match config.kind {
        TaskKind::Sisr => Split::Aligned(sr_examples(procedural_set(config.texture, count, s, seed)?)?),
        TaskKind::Paired => Split::Aligned(
            procedural_set(config.texture, count, s, seed)?
                .into_iter()
                .map(|(id, target)| {
                    Ok(Example {
                        id,
                        input: to_luma3(&target)?,
                        target,
                    })
                })
                .collect::<Result<_>>()?,
        ),
        TaskKind::Unpaired => Split::Unaligned {
            x: procedural_set(config.texture_x, count, s, seed)?,
            y: procedural_set(config.texture_y, count, s, seed_for(seed, 1))?,
        },
    })
}

fn load_split(config: &TaskConfig, root: &Path, split: &str) -> Result<Split> {
    let crop = Some(config.image_size);
    Ok(match config.kind {
        TaskKind::Sisr => Split::Aligned(sr_examples(load_domain(root, split, "hr", crop)?)?),
        TaskKind::Paired => Split::Aligned(paired_examples(
            load_domain(root, split, "a", crop)?,
            load_domain(root, split, "b", crop)?,
        )?),
        TaskKind::Unpaired => Split::Unaligned {
            x: load_domain(root, split, "x", crop)?,
            y: load_domain(root, split, "y", crop)?,
        },
    })
}

impl TaskPipeline {
    pub fn kind(&self) -> TaskKind {
        self.config.kind
    }

    /// Examples from a folder for evaluation: HR images (sisr), `a/` and
    /// `b/` subfolders (paired), or domain-X images (unpaired).
    pub fn eval_split_from_dir(&self, dir: &Path) -> Result<Split> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let load = |root: &Path, domain: &str| -> Result<Vec<(String, Tensor)>> {
            let raw = load_domain(root, "", domain, None)?;
            let m = self.size_multiple();
            raw.into_iter()
                .map(|(id, t)| Ok((id, crop_to_multiple(&t, m)?)))
                .collect()
        };
        if !dir.is_dir() {
            return Err(Error::MissingDataset(dir.to_path_buf()));
        }
        Ok(match self.kind() {
            TaskKind::Sisr => Split::Aligned(sr_examples(load(parent, &name)?)?),
            TaskKind::Paired => Split::Aligned(paired_examples(load(dir, "a")?, load(dir, "b")?)?),
            TaskKind::Unpaired => Split::Unaligned {
                x: load(parent, &name)?,
                y: Vec::new(),
            },
        })
    }

    fn size_multiple(&self) -> usize {
        let g = self.config.generator_spec().size_multiple();
        match self.kind() {
            TaskKind::Sisr => SR_SCALE,
            _ => g.max(self.discriminators[0].head.spec().kind.total_stride()),
        }
    }

    /// All discriminators share one freeze state.
    pub fn apply_freeze(&mut self, state: &FreezeState) {
        for d in &mut self.discriminators {
            d.extractor.apply_freeze(state);
        }
    }

    pub fn unit_count(&self) -> usize {
        self.discriminators[0].extractor.unit_count()
    }

    pub fn units(&self) -> &[UnfreezeUnit] {
        self.discriminators[0].extractor.unfreeze_order()
    }

    pub fn generator_params(&self) -> NamedVars {
        self.generators
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.params().into_iter().map(move |(n, v)| (format!("g{i}.{n}"), v)))
            .collect()
    }

    /// `(head parameters, unfrozen extractor parameters)` across discriminators.
    pub fn discriminator_groups(&self) -> (NamedVars, NamedVars) {
        let mut head = Vec::new();
        let mut ext = Vec::new();
        for (i, d) in self.discriminators.iter().enumerate() {
            let (h, e) = d.trainable_params();
            head.extend(h.into_iter().map(|(n, v)| (format!("d{i}.head.{n}"), v)));
            ext.extend(e.into_iter().map(|(n, v)| (format!("d{i}.extractor.{n}"), v)));
        }
        (head, ext)
    }

    /// Every extractor parameter name, prefixed as in [`Self::discriminator_groups`].
    pub fn extractor_param_names(&self) -> Vec<String> {
        self.discriminators
            .iter()
            .enumerate()
            .flat_map(|(i, d)| {
                d.extractor
                    .store()
                    .params()
                    .keys()
                    .map(move |n| format!("d{i}.extractor.{n}"))
            })
            .collect()
    }

    /// Index batches of one epoch, seeded by `(seed, epoch)`.
    pub fn epoch_plan(&self, epoch: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<(usize, usize)>>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(match &self.train {
            Split::Aligned(v) => epoch_order(v.len(), seed, epoch)
                .chunks(batch_size)
                .map(|c| c.iter().map(|&i| (i, i)).collect())
                .collect(),
            Split::Unaligned { x, y } => unpaired_stream(x.len(), y.len(), batch_size, seed)?.epoch(epoch),
        })
    }

    pub fn batch(&self, split: &Split, indices: &[(usize, usize)]) -> Result<Batch> {
        let (ids, inputs, targets): (Vec<String>, Vec<Tensor>, Vec<Tensor>) = match split {
            Split::Aligned(v) => indices
                .iter()
                .map(|&(i, _)| (v[i].id.clone(), v[i].input.clone(), v[i].target.clone()))
                .fold((vec![], vec![], vec![]), |mut acc, (a, b, c)| {
                    acc.0.push(a);
                    acc.1.push(b);
                    acc.2.push(c);
                    acc
                }),
            Split::Unaligned { x, y } => indices
                .iter()
                .map(|&(i, j)| (format!("{}|{}", x[i].0, y[j].0), x[i].1.clone(), y[j].1.clone()))
                .fold((vec![], vec![], vec![]), |mut acc, (a, b, c)| {
                    acc.0.push(a);
                    acc.1.push(b);
                    acc.2.push(c);
                    acc
                }),
        };
        Ok(Batch {
            ids,
            input: Tensor::stack(&inputs, 0)?,
            target: Tensor::stack(&targets, 0)?,
        })
    }

    /// Generator outputs for a batch: `[G(input)]`, or `[G(x), F(y)]`.
    pub fn generate(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        match self.kind() {
            TaskKind::Unpaired => Ok(vec![
                self.generators[0].forward(&batch.input)?,
                self.generators[1].forward(&batch.target)?,
            ]),
            _ => Ok(vec![self.generators[0].forward(&batch.input)?]),
        }
    }

    /// Discriminator objective with detached fakes. Spectral-norm estimates
    /// are refined once per discriminator per call.
    pub fn discriminator_step_loss(&self, batch: &Batch, fakes: &[Tensor]) -> Result<(Tensor, ScoreStats)> {
        let m = Mode::Train;
        let mut reals = Vec::new();
        let mut fks = Vec::new();
        let loss = match self.kind() {
            TaskKind::Sisr => {
                let d = &self.discriminators[0];
                let r = d
                    .discriminate_with(DiscriminatorInput::Single(&batch.target), m, true)?
                    .logits;
                let f = d
                    .discriminate_with(DiscriminatorInput::Single(&fakes[0].detach()), m, false)?
                    .logits;
                let l = discriminator_loss(&r, &f)?;
                reals.push(r);
                fks.push(f);
                l
            }
            TaskKind::Paired => {
                let d = &self.discriminators[0];
                let real = DiscriminatorInput::Paired {
                    condition: &batch.input,
                    candidate: &batch.target,
                };
                let r = d.discriminate_with(real, m, true)?.logits;
                let fake = fakes[0].detach();
                let f = d
                    .discriminate_with(
                        DiscriminatorInput::Paired {
                            condition: &batch.input,
                            candidate: &fake,
                        },
                        m,
                        false,
                    )?
                    .logits;
                let l = discriminator_loss(&r, &f)?;
                reals.push(r);
                fks.push(f);
                l
            }
            TaskKind::Unpaired => {
                let pairs = [
                    (&self.discriminators[0], &batch.target, &fakes[0]),
                    (&self.discriminators[1], &batch.input, &fakes[1]),
                ];
                let mut total: Option<Tensor> = None;
                for (d, real, fake) in pairs {
                    let r = d.discriminate_with(DiscriminatorInput::Single(real), m, true)?.logits;
                    let f = d
                        .discriminate_with(DiscriminatorInput::Single(&fake.detach()), m, false)?
                        .logits;
                    let l = discriminator_loss(&r, &f)?;
                    total = Some(match total {
                        Some(t) => (t + l)?,
                        None => l,
                    });
                    reals.push(r);
                    fks.push(f);
                }
                total.expect("two discriminators")
            }
        };
        Ok((
            loss,
            ScoreStats {
                real: summarize(&reals)?,
                fake: summarize(&fks)?,
            },
        ))
    }

    /// Generator objective. Discriminators run without refreshing their
    /// spectral-norm estimates.
    pub fn generator_step_loss(&self, batch: &Batch, fakes: &[Tensor]) -> Result<(Tensor, GeneratorLosses)> {
        let m = Mode::Train;
        let c = &self.config;
        let (adv, aux) = match self.kind() {
            TaskKind::Sisr | TaskKind::Paired => {
                let d = &self.discriminators[0];
                let input = match self.kind() {
                    TaskKind::Sisr => DiscriminatorInput::Single(&fakes[0]),
                    _ => DiscriminatorInput::Paired {
                        condition: &batch.input,
                        candidate: &fakes[0],
                    },
                };
                let adv = generator_adversarial_loss(&d.discriminate_with(input, m, false)?.logits)?;
                let aux = if c.pixel_loss {
                    Some(pixel_loss(&fakes[0], &batch.target, c.pixel_weight)?)
                } else {
                    None
                };
                (adv, aux)
            }
            TaskKind::Unpaired => {
                let (gx, fy) = (&fakes[0], &fakes[1]);
                let a1 = generator_adversarial_loss(
                    &self.discriminators[0]
                        .discriminate_with(DiscriminatorInput::Single(gx), m, false)?
                        .logits,
                )?;
                let a2 = generator_adversarial_loss(
                    &self.discriminators[1]
                        .discriminate_with(DiscriminatorInput::Single(fy), m, false)?
                        .logits,
                )?;
                let x_rec = self.generators[1].forward(gx)?;
                let y_rec = self.generators[0].forward(fy)?;
                let cyc = cycle_consistency_loss(&batch.input, &x_rec, &batch.target, &y_rec, c.cycle_weight)?;
                ((a1 + a2)?, Some(cyc))
            }
        };
        let losses = GeneratorLosses {
            adversarial: scalar_f64(&adv)?,
            auxiliary: match &aux {
                Some(a) => scalar_f64(a)?,
                None => 0.0,
            },
        };
        let total = match aux {
            Some(a) => (adv + a)?,
            None => adv,
        };
        Ok((total, losses))
    }

    /// Unweighted cycle reconstruction error `MAE(x, F(G(x))) + MAE(y, G(F(y)))`.
    pub fn cycle_error(&self, batch: &Batch) -> Result<f64> {
        let fakes = self.generate(batch)?;
        let x_rec = self.generators[1].forward(&fakes[0])?;
        let y_rec = self.generators[0].forward(&fakes[1])?;
        scalar_f64(&cycle_consistency_loss(
            &batch.input,
            &x_rec,
            &batch.target,
            &y_rec,
            1.0,
        )?)
    }

    /// Runs the generator over `split` in evaluation mode. Aligned tasks are
    /// scored against their targets; the unpaired task against the cycle
    /// reconstruction `F(G(x))`.
    pub fn evaluate(
        &self,
        split: &Split,
        metadata: BTreeMap<String, String>,
    ) -> Result<(MetricReport, Vec<(String, Tensor)>)> {
        let mut rows = Vec::new();
        let mut outputs = Vec::new();
        let mut meta = metadata;
        meta.insert("task".into(), self.kind().as_str().into());
        match split {
            Split::Aligned(v) => {
                meta.insert("reference".into(), "target".into());
                for e in v {
                    let out = self.generators[0].forward(&e.input.unsqueeze(0)?)?.squeeze(0)?;
                    let (a, b) = (Image::from_signed_tensor(&out)?, Image::from_signed_tensor(&e.target)?);
                    rows.push(row(&e.id, &a, &b)?);
                    outputs.push((e.id.clone(), out));
                }
            }
            Split::Unaligned { x, .. } => {
                meta.insert("reference".into(), "cycle_reconstruction".into());
                for (id, img) in x {
                    let out = self.generators[0].forward(&img.unsqueeze(0)?)?;
                    let rec = self.generators[1].forward(&out)?.squeeze(0)?;
                    let (a, b) = (Image::from_signed_tensor(&rec)?, Image::from_signed_tensor(img)?);
                    rows.push(row(id, &a, &b)?);
                    outputs.push((id.clone(), out.squeeze(0)?));
                }
            }
        }
        Ok((MetricReport::from_rows(rows, meta), outputs))
    }

    pub fn export(&self, manifest: &mut WeightManifest) -> Result<()> {
        for (i, g) in self.generators.iter().enumerate() {
            g.store().export(manifest, &format!("g{i}."))?;
        }
        for (i, d) in self.discriminators.iter().enumerate() {
            d.export(manifest, &format!("d{i}."))?;
        }
        manifest.units = self.units().iter().map(|u| u.name.clone()).collect();
        Ok(())
    }

    pub fn load(&self, manifest: &WeightManifest) -> Result<()> {
        for (i, g) in self.generators.iter().enumerate() {
            g.store().load(manifest, &format!("g{i}."))?;
        }
        for (i, d) in self.discriminators.iter().enumerate() {
            d.load(manifest, &format!("d{i}."))?;
        }
        Ok(())
    }
}

fn row(id: &str, a: &Image, b: &Image) -> Result<MetricRow> {
    Ok(MetricRow {
        id: id.to_string(),
        psnr: crate::metrics::psnr(a, b, 1.0)?,
        ssim: crate::metrics::ssim(a, b)?,
    })
}
