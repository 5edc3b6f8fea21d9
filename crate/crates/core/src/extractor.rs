//! Perceptual feature extractor: a strided convolutional stem followed by a
//! dense block, with freeze control at the granularity of single
//! convolutions ("units").
//!
//! Parameter names follow the torchvision DenseNet layout
//! (`features.conv0.weight`, `features.denseblock1.denselayer1.norm1.weight`, ...)
//! so converted pre-trained weights load without renaming.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::WeightManifest;
use crate::nn::{max_pool2d, BatchNorm, Conv2d, Mode};
use crate::params::{NamedVars, ParamStore};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub bottleneck_channels: usize,
    pub growth: usize,
    pub dense_layers: usize,
}

impl Default for ExtractorSpec {
    /// First dense block of DenseNet-121.
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            bottleneck_channels: 128,
            growth: 32,
            dense_layers: 6,
        }
    }
}

impl ExtractorSpec {
    /// Channels after dense layer `i` (1-based); `i = 0` is the stem output.
    pub fn channels_after(&self, i: usize) -> usize {
        self.stem_channels + self.growth * i
    }

    pub fn out_channels(&self) -> usize {
        self.channels_after(self.dense_layers)
    }

    /// Stem stride times pool stride.
    pub const STRIDE: usize = 4;

    pub fn unit_count(&self) -> usize {
        2 * self.dense_layers + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfreezeUnit {
    pub index: usize,
    pub name: String,
    pub parameter_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfreezeEvent {
    pub epoch: usize,
    pub unit_index: usize,
}

/// Units `0..unfrozen_count` are trainable; the rest are frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeState {
    pub unfrozen_count: usize,
    pub epoch_log: Vec<UnfreezeEvent>,
}

impl FreezeState {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn with_unfrozen(count: usize) -> Self {
        Self {
            unfrozen_count: count,
            epoch_log: Vec::new(),
        }
    }
}

#[derive(Debug)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv2d,
    norm2: BatchNorm,
    conv2: Conv2d,
    unit_conv1: usize,
    unit_conv2: usize,
}

/// Intermediate activations, used to verify the dense connectivity.
#[derive(Debug)]
pub struct ExtractorTrace {
    pub stem: Tensor,
    pub layer_inputs: Vec<Tensor>,
    pub layer_outputs: Vec<Tensor>,
    pub output: Tensor,
}

#[derive(Debug)]
pub struct Extractor {
    spec: ExtractorSpec,
    store: ParamStore,
    stem_conv: Conv2d,
    stem_norm: BatchNorm,
    stem_unit: usize,
    layers: Vec<DenseLayer>,
    units: Vec<UnfreezeUnit>,
    trainable: Vec<bool>,
    input_mean: Tensor,
    input_std: Tensor,
}

const PREFIX: &str = "features";

fn layer_prefix(i: usize) -> String {
    format!("{PREFIX}.denseblock1.denselayer{}", i + 1)
}

/// Builds an extractor, all units frozen. With `weights`, every parameter and
/// normalization statistic must be present in the manifest with the right shape.
pub fn build_extractor(
    spec: ExtractorSpec,
    weights: Option<&WeightManifest>,
    dtype: DType,
    seed: u64,
) -> Result<Extractor> {
    let mut store = ParamStore::new(dtype, seed);
    let stem_conv = Conv2d::new(
        &mut store,
        &format!("{PREFIX}.conv0"),
        3,
        spec.stem_channels,
        spec.stem_kernel,
        2,
        spec.stem_kernel / 2,
        false,
    )?;
    let stem_norm = BatchNorm::new(&mut store, &format!("{PREFIX}.norm0"), spec.stem_channels)?;

    let n = spec.dense_layers;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let p = layer_prefix(i);
        let cin = spec.channels_after(i);
        let norm1 = BatchNorm::new(&mut store, &format!("{p}.norm1"), cin)?;
        let conv1 = Conv2d::new(
            &mut store,
            &format!("{p}.conv1"),
            cin,
            spec.bottleneck_channels,
            1,
            1,
            0,
            false,
        )?;
        let norm2 = BatchNorm::new(&mut store, &format!("{p}.norm2"), spec.bottleneck_channels)?;
        let conv2 = Conv2d::new(
            &mut store,
            &format!("{p}.conv2"),
            spec.bottleneck_channels,
            spec.growth,
            3,
            1,
            1,
            false,
        )?;
        // Walking backward from the head: the last layer's 3x3 conv is unit 0,
        // its 1x1 conv unit 1, and so on; the stem comes last.
        let unit_conv2 = 2 * (n - 1 - i);
        layers.push(DenseLayer {
            norm1,
            conv1,
            norm2,
            conv2,
            unit_conv1: unit_conv2 + 1,
            unit_conv2,
        });
    }
    let stem_unit = 2 * n;

    let mut units = vec![None; spec.unit_count()];
    for (i, l) in layers.iter().enumerate() {
        let p = layer_prefix(i);
        units[l.unit_conv2] = Some(UnfreezeUnit {
            index: l.unit_conv2,
            name: format!("{}.conv2", &p[PREFIX.len() + 1..]),
            parameter_names: vec![
                format!("{p}.conv2.weight"),
                format!("{p}.norm2.weight"),
                format!("{p}.norm2.bias"),
            ],
        });
        units[l.unit_conv1] = Some(UnfreezeUnit {
            index: l.unit_conv1,
            name: format!("{}.conv1", &p[PREFIX.len() + 1..]),
            parameter_names: vec![
                format!("{p}.conv1.weight"),
                format!("{p}.norm1.weight"),
                format!("{p}.norm1.bias"),
            ],
        });
    }
    units[stem_unit] = Some(UnfreezeUnit {
        index: stem_unit,
        name: "conv0".into(),
        parameter_names: vec![
            format!("{PREFIX}.conv0.weight"),
            format!("{PREFIX}.norm0.weight"),
            format!("{PREFIX}.norm0.bias"),
        ],
    });
    let units: Vec<UnfreezeUnit> = units.into_iter().map(|u| u.expect("every unit assigned")).collect();

    if let Some(manifest) = weights {
        store.load(manifest, "")?;
    }

    let device = store.device().clone();
    let input_mean = Tensor::new(&IMAGENET_MEAN, &device)?
        .to_dtype(dtype)?
        .reshape((1, 3, 1, 1))?;
    let input_std = Tensor::new(&IMAGENET_STD, &device)?
        .to_dtype(dtype)?
        .reshape((1, 3, 1, 1))?;
    let trainable = vec![false; units.len()];
    Ok(Extractor {
        spec,
        store,
        stem_conv,
        stem_norm,
        stem_unit,
        layers,
        units,
        trainable,
        input_mean,
        input_std,
    })
}

impl Extractor {
    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Units in unfreeze order: nearest the head first, stem last.
    pub fn unfreeze_order(&self) -> &[UnfreezeUnit] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn unfrozen_count(&self) -> usize {
        self.trainable.iter().take_while(|t| **t).count()
    }

    pub fn apply_freeze(&mut self, state: &FreezeState) {
        let count = state.unfrozen_count.min(self.units.len());
        for (j, t) in self.trainable.iter_mut().enumerate() {
            *t = j < count;
        }
    }

    pub fn is_unit_trainable(&self, unit: usize) -> bool {
        self.trainable[unit]
    }

    /// Parameters of the currently unfrozen units, in unit order.
    pub fn trainable_params(&self) -> NamedVars {
        self.units
            .iter()
            .filter(|u| self.trainable[u.index])
            .flat_map(|u| u.parameter_names.iter())
            .map(|n| (n.clone(), self.store.params()[n].clone()))
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(x, mode, None)?.output)
    }

    /// Forward pass that records the per-layer inputs. `zero_layer = Some(k)`
    /// replaces the output of dense layer `k` (0-based) with zeros.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode, zero_layer: Option<usize>) -> Result<ExtractorTrace> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                name: "extractor input channels".into(),
                expected: vec![3],
                found: vec![c],
            });
        }
        let s = ExtractorSpec::STRIDE;
        if h < s || w < s || h % s != 0 || w % s != 0 {
            return Err(Error::SpatialSize(format!(
                "extractor input {h}x{w} must be a positive multiple of {s}"
            )));
        }
        let x = x
            .affine(0.5, 0.5)?
            .broadcast_sub(&self.input_mean)?
            .broadcast_div(&self.input_std)?;
        let stem_t = self.trainable[self.stem_unit];
        let h = self.stem_conv.forward(&x, stem_t)?;
        let h = self.stem_norm.forward(&h, mode, stem_t)?.relu()?;
        let stem = max_pool2d(&h, 3, 2, 1)?;

        let mut feats = vec![stem.clone()];
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let input = Tensor::cat(&feats, 1)?;
            let t1 = self.trainable[l.unit_conv1];
            let t2 = self.trainable[l.unit_conv2];
            let y = l.conv1.forward(&l.norm1.forward(&input, mode, t1)?.relu()?, t1)?;
            let mut y = l.conv2.forward(&l.norm2.forward(&y, mode, t2)?.relu()?, t2)?;
            if zero_layer == Some(i) {
                y = y.zeros_like()?;
            }
            layer_inputs.push(input);
            layer_outputs.push(y.clone());
            feats.push(y);
        }
        let output = Tensor::cat(&feats, 1)?;
        Ok(ExtractorTrace {
            stem,
            layer_inputs,
            layer_outputs,
            output,
        })
    }
}

/// A manifest with randomly initialized weights for `spec`, carrying the
/// unit ordering in its header.
pub fn random_manifest(spec: ExtractorSpec, seed: u64) -> Result<WeightManifest> {
    let ex = build_extractor(spec, None, DType::F32, seed)?;
    let mut m = WeightManifest::new();
    ex.store.export(&mut m, "")?;
    m.units = ex.units.iter().map(|u| u.name.clone()).collect();
    m.metadata.insert("backbone".into(), serde_json::json!("dense"));
    Ok(m)
}
