//! Adaptive perceptual discriminator: the dense-block extractor followed by a
//! task-specific stack of discriminative layers.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{Extractor, ExtractorSpec};
use crate::manifest::WeightManifest;
use crate::nn::{global_avg_pool, leaky_relu, sigmoid, Conv2d, Mode};
use crate::params::{Init, NamedVars, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SuperResolution,
    Translation,
}

impl HeadKind {
    /// Stride-2 convolution widths after the extractor output.
    pub fn widths(self) -> &'static [usize] {
        match self {
            HeadKind::SuperResolution => &[128, 64, 32],
            HeadKind::Translation => &[128, 64, 32, 16],
        }
    }

    /// Total downsampling factor from image to the last stride-2 map.
    pub fn total_stride(self) -> usize {
        ExtractorSpec::STRIDE << self.widths().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub sn_enabled: bool,
    pub leaky_slope: f64,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, sn_enabled: bool) -> Self {
        Self {
            kind,
            sn_enabled,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Single,
    Paired,
}

/// Persistent power-iteration state for one normalized weight.
#[derive(Debug, Clone)]
pub struct SpectralNormState {
    /// Left singular vector estimate, shape `(out_channels,)`.
    pub u: Var,
    pub power_iterations: usize,
    pub epsilon: f64,
}

impl SpectralNormState {
    pub fn new(u: Var) -> Self {
        Self {
            u,
            power_iterations: 1,
            epsilon: 1e-12,
        }
    }
}

fn normalize(v: &Tensor, eps: f64) -> Result<Tensor> {
    let n = v.sqr()?.sum_all()?.sqrt()?.maximum(eps)?;
    Ok(v.broadcast_div(&n)?)
}

/// Divides `weight` by a power-iteration estimate of its largest singular
/// value, viewing it as `(out, fan_in)`. Runs `state.power_iterations` steps
/// and writes the refined `u` back. The gradient flows through `weight` only.
pub fn apply_spectral_norm(weight: &Tensor, state: &SpectralNormState) -> Result<Tensor> {
    spectral_norm_with(weight, state, state.power_iterations)
}

fn spectral_norm_with(weight: &Tensor, state: &SpectralNormState, iterations: usize) -> Result<Tensor> {
    let o = weight.dims()[0];
    let w2 = weight.reshape((o, ()))?;
    let wd = w2.detach();
    let mut u = state.u.as_tensor().detach().reshape((o, 1))?;
    let mut v = normalize(&wd.t()?.matmul(&u)?, state.epsilon)?;
    for _ in 0..iterations {
        u = normalize(&wd.matmul(&v)?, state.epsilon)?;
        v = normalize(&wd.t()?.matmul(&u)?, state.epsilon)?;
    }
    if iterations > 0 {
        state.u.set(&u.reshape(o)?)?;
    }
    let sigma = u.t()?.matmul(&w2.matmul(&v)?)?.reshape(())?.maximum(state.epsilon)?;
    Ok(weight.broadcast_div(&sigma)?)
}

#[derive(Debug)]
struct HeadConv {
    conv: Conv2d,
    sn: Option<SpectralNormState>,
    activate: bool,
}

impl HeadConv {
    fn forward(&self, x: &Tensor, refresh_sn: bool, slope: f64) -> Result<Tensor> {
        let kernel = match &self.sn {
            Some(sn) => {
                let iters = if refresh_sn { sn.power_iterations } else { 0 };
                spectral_norm_with(self.conv.weight.as_tensor(), sn, iters)?
            }
            None => self.conv.weight.as_tensor().clone(),
        };
        let y = self.conv.forward_with_kernel(x, &kernel, true)?;
        if self.activate {
            leaky_relu(&y, slope)
        } else {
            Ok(y)
        }
    }
}

/// The discriminative learning layers. Always trainable.
#[derive(Debug)]
pub struct Head {
    spec: HeadSpec,
    in_channels: usize,
    store: ParamStore,
    strided: Vec<HeadConv>,
    tail: Vec<HeadConv>,
}

impl Head {
    pub fn new(spec: HeadSpec, in_channels: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let mut idx = 0;
        let mut make = |store: &mut ParamStore,
                        cin: usize,
                        cout: usize,
                        k: usize,
                        stride: usize,
                        pad: usize,
                        sn: bool,
                        activate: bool|
         -> Result<HeadConv> {
            let name = format!("conv{idx}");
            idx += 1;
            let conv = Conv2d::new(store, &name, cin, cout, k, stride, pad, true)?;
            let sn = if sn {
                Some(SpectralNormState::new(store.buffer(
                    &format!("{name}.weight_u"),
                    cout,
                    Init::UnitVector,
                )?))
            } else {
                None
            };
            Ok(HeadConv { conv, sn, activate })
        };
        let mut strided = Vec::new();
        let mut c = in_channels;
        for &w in spec.kind.widths() {
            strided.push(make(&mut store, c, w, 3, 2, 1, spec.sn_enabled, true)?);
            c = w;
        }
        let tail = match spec.kind {
            HeadKind::SuperResolution => vec![
                make(&mut store, c, c, 1, 1, 0, spec.sn_enabled, true)?,
                make(&mut store, c, 1, 1, 1, 0, false, false)?,
            ],
            HeadKind::Translation => vec![make(&mut store, c, 1, 4, 1, 2, spec.sn_enabled, false)?],
        };
        Ok(Self {
            spec,
            in_channels,
            store,
            strided,
            tail,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
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

    /// The convolution producing the logits.
    pub fn final_conv(&self) -> &Conv2d {
        &self.tail.last().expect("head has a final layer").conv
    }

    /// Logits of shape `(b,)`. Translation heads average their patch logits.
    /// With `refresh_sn`, every normalized layer runs its power iterations
    /// and stores the refined `u`; otherwise the stored `u` is used as is.
    pub fn forward(&self, features: &Tensor, refresh_sn: bool) -> Result<Tensor> {
        let (b, c, _, _) = features.dims4()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                name: "head input channels".into(),
                expected: vec![self.in_channels],
                found: vec![c],
            });
        }
        let slope = self.spec.leaky_slope;
        let mut y = features.clone();
        for l in &self.strided {
            y = l.forward(&y, refresh_sn, slope)?;
        }
        if self.spec.kind == HeadKind::SuperResolution {
            y = global_avg_pool(&y)?;
        }
        for l in &self.tail {
            y = l.forward(&y, refresh_sn, slope)?;
        }
        Ok(y.flatten_from(1)?.mean(1)?.reshape(b)?)
    }
}

/// What the discriminator scores for one batch.
#[derive(Debug, Clone, Copy)]
pub enum DiscriminatorInput<'a> {
    Single(&'a Tensor),
    /// Condition and candidate images, scored jointly.
    Paired {
        condition: &'a Tensor,
        candidate: &'a Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct Discrimination {
    pub logits: Tensor,
    pub scores: Tensor,
}

#[derive(Debug)]
pub struct AdaptivePerceptualDiscriminator {
    pub extractor: Extractor,
    pub head: Head,
    pub input_mode: InputMode,
}

impl AdaptivePerceptualDiscriminator {
    pub fn new(extractor: Extractor, head_spec: HeadSpec, input_mode: InputMode, seed: u64) -> Result<Self> {
        let feat = extractor.spec().out_channels();
        let in_channels = match input_mode {
            InputMode::Single => feat,
            InputMode::Paired => 2 * feat,
        };
        let head = Head::new(head_spec, in_channels, extractor.store().dtype(), seed)?;
        Ok(Self {
            extractor,
            head,
            input_mode,
        })
    }

    fn check_size(&self, x: &Tensor) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        let s = self.head.spec.kind.total_stride();
        if h < s || w < s || h % s != 0 || w % s != 0 {
            return Err(Error::SpatialSize(format!(
                "discriminator input {h}x{w} must be a positive multiple of {s}"
            )));
        }
        Ok(())
    }

    /// Extractor features as seen by the head (concatenated in paired mode).
    pub fn features(&self, input: DiscriminatorInput<'_>, mode: Mode) -> Result<Tensor> {
        match (self.input_mode, input) {
            (InputMode::Single, DiscriminatorInput::Single(x)) => {
                self.check_size(x)?;
                self.extractor.forward(x, mode)
            }
            (InputMode::Paired, DiscriminatorInput::Paired { condition, candidate }) => {
                if condition.dims() != candidate.dims() {
                    return Err(Error::ShapeMismatch {
                        name: "paired candidate".into(),
                        expected: condition.dims().to_vec(),
                        found: candidate.dims().to_vec(),
                    });
                }
                self.check_size(condition)?;
                let a = self.extractor.forward(condition, mode)?;
                let b = self.extractor.forward(candidate, mode)?;
                Ok(Tensor::cat(&[a, b], 1)?)
            }
            (m, _) => Err(Error::Unsupported(format!(
                "input does not match discriminator mode {m:?}"
            ))),
        }
    }

    /// Scores a batch. In `Mode::Train` the spectral-norm estimates are
    /// refined once per call.
    pub fn discriminate(&self, input: DiscriminatorInput<'_>, mode: Mode) -> Result<Discrimination> {
        self.discriminate_with(input, mode, mode == Mode::Train)
    }

    pub fn discriminate_with(
        &self,
        input: DiscriminatorInput<'_>,
        mode: Mode,
        refresh_sn: bool,
    ) -> Result<Discrimination> {
        let logits = self.head.forward(&self.features(input, mode)?, refresh_sn)?;
        let scores = sigmoid(&logits)?;
        Ok(Discrimination { logits, scores })
    }

    /// Head parameters plus the currently unfrozen extractor parameters.
    pub fn trainable_params(&self) -> (NamedVars, NamedVars) {
        (self.head.params(), self.extractor.trainable_params())
    }

    pub fn snapshot(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut all: std::collections::BTreeMap<String, Tensor> = self
            .extractor
            .store()
            .snapshot()
            .into_iter()
            .map(|(k, v)| (format!("extractor.{k}"), v))
            .collect();
        all.extend(
            self.head
                .store
                .snapshot()
                .into_iter()
                .map(|(k, v)| (format!("head.{k}"), v)),
        );
        all
    }

    pub fn export(&self, manifest: &mut WeightManifest, prefix: &str) -> Result<()> {
        self.extractor
            .store()
            .export(manifest, &format!("{prefix}extractor."))?;
        self.head.store.export(manifest, &format!("{prefix}head."))
    }

    pub fn load(&self, manifest: &WeightManifest, prefix: &str) -> Result<()> {
        self.extractor.store().load(manifest, &format!("{prefix}extractor."))?;
        self.head.store.load(manifest, &format!("{prefix}head."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::build_extractor;
    use crate::nn::to_vec_f64;
    use candle_core::Device;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(kind: HeadKind, mode: InputMode, sn: bool) -> AdaptivePerceptualDiscriminator {
        let ex = build_extractor(ExtractorSpec::default(), None, DType::F32, 1).unwrap();
        AdaptivePerceptualDiscriminator::new(ex, HeadSpec::new(kind, sn), mode, 2).unwrap()
    }

    fn images(b: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 3 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, s, s), &Device::Cpu).unwrap()
    }

    fn top_singular(w: &Tensor) -> f64 {
        let (r, c) = w.dims2().unwrap();
        DMatrix::from_row_slice(r, c, &to_vec_f64(w).unwrap())
            .singular_values()
            .max()
    }

    fn sn_state(n: usize, iters: usize, seed: u64) -> SpectralNormState {
        let mut store = ParamStore::new(DType::F64, seed);
        let mut s = SpectralNormState::new(store.buffer("u", n, Init::UnitVector).unwrap());
        s.power_iterations = iters;
        s
    }

    #[test]
    fn single_mode_scores_in_unit_interval() {
        let d = disc(HeadKind::SuperResolution, InputMode::Single, true);
        let out = d
            .discriminate(DiscriminatorInput::Single(&images(4, 64, 0)), Mode::Eval)
            .unwrap();
        let s = to_vec_f64(&out.scores).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn paired_head_sees_concatenated_features() {
        let d = disc(HeadKind::Translation, InputMode::Paired, true);
        assert_eq!(d.head.in_channels(), 512);
        let (a, b) = (images(2, 64, 1), images(2, 64, 2));
        let f = d
            .features(
                DiscriminatorInput::Paired {
                    condition: &a,
                    candidate: &b,
                },
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(f.dims(), &[2, 512, 16, 16]);
        let out = d
            .discriminate(
                DiscriminatorInput::Paired {
                    condition: &a,
                    candidate: &b,
                },
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(out.scores.dims(), &[2]);
    }

    #[test]
    fn swapping_pair_changes_score() {
        let d = disc(HeadKind::Translation, InputMode::Paired, true);
        let (a, b) = (images(1, 64, 3), images(1, 64, 4));
        let s1 = d
            .discriminate(
                DiscriminatorInput::Paired {
                    condition: &a,
                    candidate: &b,
                },
                Mode::Eval,
            )
            .unwrap();
        let s2 = d
            .discriminate(
                DiscriminatorInput::Paired {
                    condition: &b,
                    candidate: &a,
                },
                Mode::Eval,
            )
            .unwrap();
        let (l1, l2) = (to_vec_f64(&s1.logits).unwrap()[0], to_vec_f64(&s2.logits).unwrap()[0]);
        assert!((l1 - l2).abs() > 1e-6, "{l1} vs {l2}");
    }

    #[test]
    fn zero_final_layer_gives_half() {
        for kind in [HeadKind::SuperResolution, HeadKind::Translation] {
            let d = disc(kind, InputMode::Single, true);
            let fc = d.head.final_conv();
            fc.weight.set(&fc.weight.zeros_like().unwrap()).unwrap();
            let b = fc.bias.as_ref().unwrap();
            b.set(&b.zeros_like().unwrap()).unwrap();
            let out = d
                .discriminate(DiscriminatorInput::Single(&images(3, 64, 5)), Mode::Train)
                .unwrap();
            assert!(to_vec_f64(&out.scores).unwrap().iter().all(|v| *v == 0.5));
        }
    }

    #[test]
    fn spatial_underflow_is_an_error() {
        let d = disc(HeadKind::Translation, InputMode::Single, false);
        let err = d
            .discriminate(DiscriminatorInput::Single(&images(1, 32, 6)), Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::SpatialSize(_)), "{err}");
        let d = disc(HeadKind::SuperResolution, InputMode::Single, false);
        assert!(d
            .discriminate(DiscriminatorInput::Single(&images(1, 48, 6)), Mode::Eval)
            .is_err());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let d = disc(HeadKind::SuperResolution, InputMode::Single, false);
        let a = images(1, 64, 7);
        assert!(d
            .discriminate(
                DiscriminatorInput::Paired {
                    condition: &a,
                    candidate: &a
                },
                Mode::Eval
            )
            .is_err());
    }

    #[test]
    fn generator_side_gradient_is_nonzero() {
        let d = disc(HeadKind::SuperResolution, InputMode::Single, true);
        let x = Var::from_tensor(&images(2, 64, 8)).unwrap();
        let out = d
            .discriminate(DiscriminatorInput::Single(x.as_tensor()), Mode::Train)
            .unwrap();
        let g = out.logits.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap();
        assert!(to_vec_f64(&gx.sqr().unwrap().sum_all().unwrap()).unwrap()[0] > 0.0);
    }

    #[test]
    fn spectral_norm_identity_and_scaled_identity() {
        for c in [1.0, 3.5] {
            let w = (Tensor::eye(8, DType::F64, &Device::Cpu).unwrap() * c).unwrap();
            let n = apply_spectral_norm(&w, &sn_state(8, 5, 0)).unwrap();
            let diff = to_vec_f64(
                &(n - Tensor::eye(8, DType::F64, &Device::Cpu).unwrap())
                    .unwrap()
                    .abs()
                    .unwrap(),
            )
            .unwrap();
            assert!(diff.iter().all(|d| *d < 1e-12), "c={c}");
        }
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_finite() {
        let w = Tensor::zeros((4, 6), DType::F64, &Device::Cpu).unwrap();
        let n = apply_spectral_norm(&w, &sn_state(4, 3, 0)).unwrap();
        assert!(to_vec_f64(&n).unwrap().iter().all(|v| *v == 0.0));
    }

    /// `Q1 · diag(s) · Q2ᵀ` with orthogonal factors from QR of random matrices.
    fn with_spectrum(n: usize, s: &[f64], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = || DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let (q1, q2) = (q(), q());
        let m = &q1 * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(s)) * q2.transpose();
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        Tensor::from_vec(rows, (n, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let spectrum: Vec<f64> = (0..64).map(|i| 4.0 * 0.8f64.powi(i)).collect();
        let w = with_spectrum(64, &spectrum, 9);
        assert!((top_singular(&w) - 4.0).abs() < 1e-9);
        let state = sn_state(64, 50, 1);
        let n = apply_spectral_norm(&w, &state).unwrap();
        assert!((top_singular(&n) - 1.0).abs() < 1e-3);
        let u = to_vec_f64(state.u.as_tensor()).unwrap();
        assert!((u.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn persistent_u_keeps_refining() {
        let spectrum: Vec<f64> = (0..32).map(|i| 2.0 - 0.01 * i as f64).collect();
        let w = with_spectrum(32, &spectrum, 3);
        let state = sn_state(32, 1, 2);
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let mut err = 0.0;
            for _ in 0..100 {
                err = (top_singular(&apply_spectral_norm(&w, &state).unwrap()) - 1.0).abs();
            }
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(last < 1e-3, "{last}");
    }

    #[test]
    fn trained_head_weights_have_unit_spectrum() {
        let d = disc(HeadKind::SuperResolution, InputMode::Single, true);
        for l in d.head.strided.iter() {
            let mut sn = l.sn.clone().unwrap();
            sn.power_iterations = 200;
            let w = apply_spectral_norm(l.conv.weight.as_tensor(), &sn).unwrap();
            let o = w.dims()[0];
            let s = top_singular(&w.reshape((o, ())).unwrap());
            assert!((s - 1.0).abs() < 1e-2, "{s}");
        }
    }
}
