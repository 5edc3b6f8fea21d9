//! Full-reference image quality: PSNR on RGB and SSIM on luma.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(channels, height, width)` image in row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                name: "image data".into(),
                expected: vec![channels, height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// From a `(c, h, w)` tensor already in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        Self::new(c, h, w, data)
    }

    /// From a `(c, h, w)` tensor in generator range `[-1, 1]`, clamped.
    pub fn from_signed_tensor(t: &Tensor) -> Result<Self> {
        let mut img = Self::from_tensor(t)?;
        for v in &mut img.data {
            *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0);
        }
        Ok(img)
    }

    fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            name: "metric operands".into(),
            expected: a.dims(),
            found: b.dims(),
        });
    }
    Ok(())
}

/// `10 · log10(max² / MSE)` over all channels; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// ITU-R BT.601 luma of an RGB image; single-channel images pass through.
pub fn luma(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let n = img.height * img.width;
            let (r, rest) = img.data.split_at(n);
            let (g, b) = rest.split_at(n);
            let y = (0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
            Image::new(1, img.height, img.width, y)
        }
        c => Err(Error::Unsupported(format!("luma of a {c}-channel image"))),
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every fully contained 11×11 Gaussian window of the luma
/// channels, with dynamic range `l`.
pub fn ssim_with_range(a: &Image, b: &Image, l: f64) -> Result<f64> {
    check_same(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::SpatialSize(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let (ya, yb) = (luma(a)?, luma(b)?);
    let (h, w) = (a.height, a.width);
    let g = gaussian_window();
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = g[i] * g[j];
                    let idx = (oy + i) * w + ox + j;
                    let (pa, pb) = (ya.data[idx], yb.data[idx]);
                    ma += k * pa;
                    mb += k * pb;
                    saa += k * pa * pa;
                    sbb += k * pb * pb;
                    sab += k * pa * pb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_range(a, b, 1.0)
}

mod f64_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    #[serde(with = "f64_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    #[serde(with = "f64_or_inf")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<MetricRow>, mut metadata: BTreeMap<String, String>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_psnr = per_image.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|r| r.ssim).sum::<f64>() / n;
        metadata.entry("psnr_channels".into()).or_insert_with(|| "rgb".into());
        metadata
            .entry("ssim_channels".into())
            .or_insert_with(|| "luma_bt601".into());
        metadata.entry("value_range".into()).or_insert_with(|| "0..1".into());
        Self {
            per_image,
            mean_psnr,
            mean_ssim,
            metadata,
        }
    }

    /// Scores each `(id, output, reference)` triple.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (String, &'a Image, &'a Image)>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let rows = pairs
            .into_iter()
            .map(|(id, out, reference)| {
                Ok(MetricRow {
                    id,
                    psnr: psnr(out, reference, 1.0)?,
                    ssim: ssim(out, reference)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(rows, metadata))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::CorruptFile(format!("metric report: {e}")))
    }
}

/// Methods as rows, datasets as column pairs of PSNR / SSIM.
pub fn comparison_table(entries: &[(String, String, MetricReport)]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for (m, d, _) in entries {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
        if !datasets.contains(&d.as_str()) {
            datasets.push(d);
        }
    }
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    let _ = write!(out, "| {:width$} |", "Method");
    for d in &datasets {
        let _ = write!(out, " {d} PSNR | {d} SSIM |");
    }
    out.push('\n');
    let _ = write!(out, "|{}|", "-".repeat(width + 2));
    for d in &datasets {
        let _ = write!(out, "{}|{}|", "-".repeat(d.len() + 7), "-".repeat(d.len() + 7));
    }
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "| {m:width$} |");
        for d in &datasets {
            let r = entries.iter().find(|(em, ed, _)| em == m && ed == d).map(|e| &e.2);
            let w = d.len() + 5;
            match r {
                Some(r) => {
                    let _ = write!(out, " {:>w$.4} | {:>w$.4} |", r.mean_psnr, r.mean_ssim);
                }
                None => {
                    let _ = write!(out, " {:>w$} | {:>w$} |", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Image {
        Image::new(c, n, n, (0..c * n * n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn constant(c: usize, n: usize, v: f64) -> Image {
        Image::new(c, n, n, vec![v; c * n * n]).unwrap()
    }

    #[test]
    fn psnr_special_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(&mut rng, 3, 16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&constant(3, 8, 0.0), &constant(3, 8, 1.0), 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &constant(3, 8, 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let c1: f64 = 1e-4;
        let got = ssim(&constant(1, 16, 0.0), &constant(1, 16, 1.0)).unwrap();
        assert!((got - c1 / (1.0 + c1)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(matches!(
            ssim(&constant(1, 10, 0.0), &constant(1, 10, 0.0)),
            Err(Error::SpatialSize(_))
        ));
    }

    #[test]
    fn psnr_decreases_along_noise_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 32);
        let noise: Vec<f64> = (0..a.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = Image::new(3, 32, 32, a.data.iter().zip(&noise).map(|(x, n)| x + amp * n).collect()).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn report_means_and_json() {
        let rows = vec![
            MetricRow {
                id: "a".into(),
                psnr: 20.0,
                ssim: 0.5,
            },
            MetricRow {
                id: "b".into(),
                psnr: 30.0,
                ssim: 0.7,
            },
        ];
        let r = MetricReport::from_rows(rows, BTreeMap::new());
        assert_eq!(r.mean_psnr, 25.0);
        assert!((r.mean_ssim - 0.6).abs() < 1e-12);
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
        let inf = MetricReport::from_rows(
            vec![MetricRow {
                id: "x".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
            }],
            BTreeMap::new(),
        );
        assert_eq!(
            MetricReport::from_json(&inf.to_json()).unwrap().mean_psnr,
            f64::INFINITY
        );
    }

    #[test]
    fn table_has_one_row_per_method() {
        let r = MetricReport::from_rows(
            vec![MetricRow {
                id: "a".into(),
                psnr: 20.0,
                ssim: 0.5,
            }],
            BTreeMap::new(),
        );
        let entries = vec![
            ("Dense_D+F".to_string(), "toy".to_string(), r.clone()),
            ("Dense_D+SN+F".to_string(), "toy".to_string(), r.clone()),
            ("Dense_D+SN+UF".to_string(), "toy".to_string(), r),
        ];
        let t = comparison_table(&entries);
        assert_eq!(t.lines().count(), 5);
        assert!(t.contains("20.0000"));
    }

    proptest! {
        #[test]
        fn symmetric_and_self_similar(seed in any::<u64>(), c in prop_oneof![Just(1usize), Just(3usize)]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, c, 13);
            let b = random(&mut rng, c, 13);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
