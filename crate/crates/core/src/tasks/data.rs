//! Procedural textures, PNG folders and seeded sample ordering.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Checkerboard,
    Stripes,
    Noise,
    Mixed,
}

impl TextureFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "checkerboard" => Some(Self::Checkerboard),
            "stripes" => Some(Self::Stripes),
            "noise" => Some(Self::Noise),
            "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Checkerboard => "checkerboard",
            Self::Stripes => "stripes",
            Self::Noise => "noise",
            Self::Mixed => "mixed",
        }
    }
}

type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Checkerboard {
        period: f64,
        offset: (f64, f64),
        colors: [Rgb; 2],
    },
    Stripes {
        period: f64,
        angle: f64,
        phase: f64,
        colors: [Rgb; 2],
    },
    /// Two octaves of smoothly interpolated lattice noise.
    ValueNoise {
        cell: f64,
        lattice_seed: u64,
        colors: [Rgb; 2],
    },
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (smoothstep(x - x0), smoothstep(y - y0));
    let (xi, yi) = (x0 as i64, y0 as i64);
    let a = lattice(seed, xi, yi) * (1.0 - tx) + lattice(seed, xi + 1, yi) * tx;
    let b = lattice(seed, xi, yi + 1) * (1.0 - tx) + lattice(seed, xi + 1, yi + 1) * tx;
    a * (1.0 - ty) + b * ty
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
    ]
}

impl Texture {
    pub fn random(family: TextureFamily, rng: &mut ChaCha8Rng) -> Self {
        let family = match family {
            TextureFamily::Mixed => [
                TextureFamily::Checkerboard,
                TextureFamily::Stripes,
                TextureFamily::Noise,
            ][rng.random_range(0..3)],
            f => f,
        };
        let colors = [random_color(rng), random_color(rng)];
        match family {
            TextureFamily::Checkerboard => Texture::Checkerboard {
                period: rng.random_range(8.0..32.0),
                offset: (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)),
                colors,
            },
            TextureFamily::Stripes => Texture::Stripes {
                period: rng.random_range(6.0..24.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                colors,
            },
            _ => Texture::ValueNoise {
                cell: rng.random_range(8.0..24.0),
                lattice_seed: rng.random(),
                colors,
            },
        }
    }

    /// Mixing weight in `[0, 1]` between the two colors at pixel `(x, y)`.
    fn blend(&self, x: f64, y: f64) -> f64 {
        match self {
            Texture::Checkerboard { period, offset, .. } => {
                let cx = ((x + offset.0) / period).floor() as i64;
                let cy = ((y + offset.1) / period).floor() as i64;
                ((cx + cy).rem_euclid(2)) as f64
            }
            Texture::Stripes {
                period, angle, phase, ..
            } => {
                let t = x * angle.cos() + y * angle.sin();
                0.5 + 0.5 * (std::f64::consts::TAU * t / period + phase).sin()
            }
            Texture::ValueNoise { cell, lattice_seed, .. } => {
                let a = value_noise(*lattice_seed, x / cell, y / cell);
                let b = value_noise(lattice_seed.wrapping_add(1), 2.0 * x / cell, 2.0 * y / cell);
                (0.7 * a + 0.3 * b).clamp(0.0, 1.0)
            }
        }
    }

    fn colors(&self) -> &[Rgb; 2] {
        match self {
            Texture::Checkerboard { colors, .. }
            | Texture::Stripes { colors, .. }
            | Texture::ValueNoise { colors, .. } => colors,
        }
    }

    /// A `(3, size, size)` image in `[-1, 1]`.
    pub fn render(&self, size: usize) -> Result<Tensor> {
        let [c0, c1] = *self.colors();
        let mut data = vec![0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let t = self.blend(x as f64, y as f64);
                for ch in 0..3 {
                    data[ch * size * size + y * size + x] = (c0[ch] * (1.0 - t) + c1[ch] * t) as f32;
                }
            }
        }
        Ok(Tensor::from_vec(data, (3, size, size), &Device::Cpu)?)
    }
}

/// `count` textures of `family`, deterministic in `seed`.
pub fn procedural_set(family: TextureFamily, count: usize, size: usize, seed: u64) -> Result<Vec<(String, Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            Ok((
                format!("{}_{i:04}", family.as_str()),
                Texture::random(family, &mut rng).render(size)?,
            ))
        })
        .collect()
}

/// Reads `<root>/<split>/<domain>/*.png` in file-name order as `[-1, 1]` RGB,
/// center-cropped to `crop × crop` when given.
pub fn load_domain(root: &Path, split: &str, domain: &str, crop: Option<usize>) -> Result<Vec<(String, Tensor)>> {
    if !root.is_dir() {
        return Err(Error::MissingDataset(root.to_path_buf()));
    }
    let dir = root.join(split).join(domain);
    if !dir.is_dir() {
        return Err(Error::MissingDataset(dir));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, load_png(p, crop)?))
        })
        .collect()
}

pub fn load_png(path: &Path, crop: Option<usize>) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (cw, ch) = match crop {
        Some(c) if c > w || c > h => {
            return Err(Error::Data(format!(
                "{} is {w}x{h}, smaller than the {c}x{c} crop",
                path.display()
            )));
        }
        Some(c) => (c, c),
        None => (w, h),
    };
    let (x0, y0) = ((w - cw) / 2, (h - ch) / 2);
    let mut data = vec![0f32; 3 * cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let px = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                data[c * cw * ch + y * cw + x] = px[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (3, ch, cw), &Device::Cpu)?)
}

/// Writes a `(3, h, w)` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Unsupported(format!("saving a {c}-channel image")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px =
                std::array::from_fn(|ch| ((v[ch * h * w + y * w + x] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x1_0000_0000).wrapping_add(epoch as u64));
    rng
}

/// Seeded sample order for one dataset: a fresh permutation per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut epoch_rng(seed, epoch, 0));
    idx
}

/// Batches of independently shuffled `(x, y)` indices from two domains.
/// An epoch covers the larger domain once; the smaller one is reshuffled
/// each time it runs out. Batch `k` of epoch `e` depends only on
/// `(seed, e, k)`.
#[derive(Debug, Clone)]
pub struct UnpairedStream {
    nx: usize,
    ny: usize,
    batch: usize,
    seed: u64,
}

impl UnpairedStream {
    fn draw(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            out.extend(p);
        }
        out.truncate(count);
        out
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.nx.max(self.ny).div_ceil(self.batch)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<(usize, usize)>> {
        let total = self.batches_per_epoch() * self.batch;
        let xs = Self::draw(self.nx, total, &mut epoch_rng(self.seed, epoch, 1));
        let ys = Self::draw(self.ny, total, &mut epoch_rng(self.seed, epoch, 2));
        xs.chunks(self.batch)
            .zip(ys.chunks(self.batch))
            .map(|(a, b)| a.iter().copied().zip(b.iter().copied()).collect())
            .collect()
    }
}

pub fn unpaired_stream(nx: usize, ny: usize, batch: usize, seed: u64) -> Result<UnpairedStream> {
    if nx == 0 || ny == 0 {
        return Err(Error::Data("unpaired stream needs non-empty domains".into()));
    }
    if batch == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    Ok(UnpairedStream { nx, ny, batch, seed })
}
