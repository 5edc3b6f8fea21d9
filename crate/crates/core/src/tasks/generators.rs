//! Compact generators for the three tasks. All end in `tanh`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, pixel_shuffle, Conv2d};
use crate::params::{NamedVars, ParamStore};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Residual blocks followed by two ×2 sub-pixel upsampling stages.
    SrResNet,
    /// Three-level encoder-decoder with skip connections.
    UNet,
    /// One downsampling stage, residual blocks, one upsampling stage.
    ResidualTranslator,
    /// Returns its input unchanged; has no parameters.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub base_channels: usize,
    pub blocks: usize,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        let blocks = match kind {
            GeneratorKind::SrResNet => 4,
            GeneratorKind::ResidualTranslator => 3,
            _ => 0,
        };
        Self {
            kind,
            base_channels: 32,
            blocks,
        }
    }

    pub fn scale(&self) -> usize {
        match self.kind {
            GeneratorKind::SrResNet => 4,
            _ => 1,
        }
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.kind {
            GeneratorKind::UNet => 8,
            GeneratorKind::ResidualTranslator => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Residual {
    a: Conv2d,
    b: Conv2d,
}

impl Residual {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), c, c, 3, 1, 1, true)?,
            b: Conv2d::new(store, &format!("{name}.b"), c, c, 3, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.b.forward(&leaky_relu(&self.a.forward(x, true)?, SLOPE)?, true)?;
        Ok((x + y)?)
    }
}

#[derive(Debug)]
enum Body {
    SrResNet {
        input: Conv2d,
        blocks: Vec<Residual>,
        mid: Conv2d,
        up: [Conv2d; 2],
        output: Conv2d,
    },
    UNet {
        down: [Conv2d; 3],
        up: [Conv2d; 3],
        output: Conv2d,
    },
    Translator {
        input: Conv2d,
        down: Conv2d,
        blocks: Vec<Residual>,
        up: Conv2d,
        output: Conv2d,
    },
    Identity,
}

#[derive(Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    body: Body,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, dtype: DType, seed: u64) -> Result<Self> {
        let mut s = ParamStore::new(dtype, seed);
        let c = spec.base_channels;
        let st = &mut s;
        let body = match spec.kind {
            GeneratorKind::SrResNet => Body::SrResNet {
                input: Conv2d::new(st, "input", 3, c, 3, 1, 1, true)?,
                blocks: (0..spec.blocks)
                    .map(|i| Residual::new(st, &format!("block{i}"), c))
                    .collect::<Result<_>>()?,
                mid: Conv2d::new(st, "mid", c, c, 3, 1, 1, true)?,
                up: [
                    Conv2d::new(st, "up0", c, 4 * c, 3, 1, 1, true)?,
                    Conv2d::new(st, "up1", c, 4 * c, 3, 1, 1, true)?,
                ],
                output: Conv2d::new(st, "output", c, 3, 3, 1, 1, true)?,
            },
            GeneratorKind::UNet => Body::UNet {
                down: [
                    Conv2d::new(st, "down0", 3, c, 4, 2, 1, true)?,
                    Conv2d::new(st, "down1", c, 2 * c, 4, 2, 1, true)?,
                    Conv2d::new(st, "down2", 2 * c, 4 * c, 4, 2, 1, true)?,
                ],
                up: [
                    Conv2d::new(st, "up2", 4 * c, 4 * 2 * c, 3, 1, 1, true)?,
                    Conv2d::new(st, "up1", 4 * c, 4 * c, 3, 1, 1, true)?,
                    Conv2d::new(st, "up0", 2 * c, 4 * c, 3, 1, 1, true)?,
                ],
                output: Conv2d::new(st, "output", c + 3, 3, 3, 1, 1, true)?,
            },
            GeneratorKind::ResidualTranslator => Body::Translator {
                input: Conv2d::new(st, "input", 3, c, 3, 1, 1, true)?,
                down: Conv2d::new(st, "down", c, 2 * c, 4, 2, 1, true)?,
                blocks: (0..spec.blocks)
                    .map(|i| Residual::new(st, &format!("block{i}"), 2 * c))
                    .collect::<Result<_>>()?,
                up: Conv2d::new(st, "up", 2 * c, 4 * c, 3, 1, 1, true)?,
                output: Conv2d::new(st, "output", c, 3, 3, 1, 1, true)?,
            },
            GeneratorKind::Identity => Body::Identity,
        };
        Ok(Self { spec, store: s, body })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn params(&self) -> NamedVars {
        self.store
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.spec.size_multiple();
        if c != 3 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::SpatialSize(format!(
                "generator input must be 3 channels with sides divisible by {m}, got {c}x{h}x{w}"
            )));
        }
        let lrelu = |t: Tensor| leaky_relu(&t, SLOPE);
        let y = match &self.body {
            Body::SrResNet {
                input,
                blocks,
                mid,
                up,
                output,
            } => {
                let f0 = lrelu(input.forward(x, true)?)?;
                let mut r = f0.clone();
                for b in blocks {
                    r = b.forward(&r)?;
                }
                let mut f = (mid.forward(&r, true)? + f0)?;
                for u in up {
                    f = lrelu(pixel_shuffle(&u.forward(&f, true)?, 2)?)?;
                }
                output.forward(&f, true)?
            }
            Body::UNet { down, up, output } => {
                let e1 = lrelu(down[0].forward(x, true)?)?;
                let e2 = lrelu(down[1].forward(&e1, true)?)?;
                let e3 = lrelu(down[2].forward(&e2, true)?)?;
                let d2 = pixel_shuffle(&up[0].forward(&e3, true)?, 2)?.relu()?;
                let d1 = pixel_shuffle(&up[1].forward(&Tensor::cat(&[d2, e2], 1)?, true)?, 2)?.relu()?;
                let d0 = pixel_shuffle(&up[2].forward(&Tensor::cat(&[d1, e1], 1)?, true)?, 2)?.relu()?;
                output.forward(&Tensor::cat(&[d0, x.clone()], 1)?, true)?
            }
            Body::Translator {
                input,
                down,
                blocks,
                up,
                output,
            } => {
                let f = lrelu(input.forward(x, true)?)?;
                let mut r = lrelu(down.forward(&f, true)?)?;
                for b in blocks {
                    r = b.forward(&r)?;
                }
                let u = lrelu(pixel_shuffle(&up.forward(&r, true)?, 2)?)?;
                output.forward(&u, true)?
            }
            Body::Identity => return Ok(x.clone()),
        };
        Ok(y.tanh()?)
    }
}
