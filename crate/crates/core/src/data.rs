//! `RLPD1` image datasets and the procedural-shapes generator.
//!
//! File layout: the 5 magic bytes `RLPD1`, then five little-endian u32
//! (count, classes, channels, height, width), then `count·C·H·W` u8 pixels
//! in NCHW order, then `count` u8 labels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::derive;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"RLPD1";
const HEADER: usize = 5 + 5 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    /// `C×H×W`
    pub shape: [usize; 3],
    pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(classes: usize, shape: [usize; 3], pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel bytes for {} samples of {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::Data(format!("class count {classes} outside 1..=256")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} with {classes} classes")));
        }
        Ok(Self {
            classes,
            shape,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Images at `indices`, scaled to [0, 1], with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| p as f32 / 255.0));
        }
        let [c, h, w] = self.shape;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), c, h, w], data), labels)
    }

    /// The first `n` samples (all of them when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            classes: self.classes,
            shape: self.shape,
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.pixels.len() + self.len());
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.classes, self.shape[0], self.shape[1], self.shape[2]] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..5] != MAGIC {
            return Err(Error::Data("missing RLPD1 header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (count, classes) = (field(0), field(1));
        let shape = [field(2), field(3), field(4)];
        let per: usize = shape.iter().product();
        let want = HEADER + count * per + count;
        if bytes.len() != want {
            return Err(Error::Data(format!(
                "RLPD1 body is {} bytes, header implies {want}",
                bytes.len()
            )));
        }
        let pixels = bytes[HEADER..HEADER + count * per].to_vec();
        let labels = bytes[HEADER + count * per..].iter().map(|&l| l as usize).collect();
        Self::new(classes, shape, pixels, labels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Train, reward-evaluation and test splits, stored as `train.rlpd`,
/// `reward.rlpd` and `test.rlpd`.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub reward: Dataset,
    pub test: Dataset,
}

pub const SPLIT_FILES: [&str; 3] = ["train.rlpd", "reward.rlpd", "test.rlpd"];

impl Splits {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::read(&dir.join(SPLIT_FILES[0]))?,
            reward: Dataset::read(&dir.join(SPLIT_FILES[1]))?,
            test: Dataset::read(&dir.join(SPLIT_FILES[2]))?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.train.write(&dir.join(SPLIT_FILES[0]))?;
        self.reward.write(&dir.join(SPLIT_FILES[1]))?;
        self.test.write(&dir.join(SPLIT_FILES[2]))
    }
}

#[derive(Clone, Debug)]
pub struct ShapesSpec {
    pub classes: usize,
    pub train: usize,
    pub reward: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 3000,
            reward: 500,
            test: 1000,
            seed: 0,
        }
    }
}

pub const SHAPE_NAMES: [&str; 10] = [
    "square", "disc", "triangle", "plus", "ring", "h-stripes", "v-stripes", "cross", "frame", "dots",
];

const SIDE: usize = 32;

/// Render one 3×32×32 sample of class `label`.
fn render(label: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let cx = 16.0 + rng.random_range(-6.0f32..6.0);
    let cy = 16.0 + rng.random_range(-6.0f32..6.0);
    let r = rng.random_range(5.0f32..11.0);
    let thick = rng.random_range(1.5f32..3.0);
    let period = rng.random_range(4.0f32..7.0);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2f32..0.8));
    // foreground may be lighter or darker than the background
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let fg: [f32; 3] = std::array::from_fn(|i| (bg[i] + sign * rng.random_range(0.15f32..0.4)).clamp(0.0, 1.0));
    let noise = Normal::new(0.0f32, 0.1).expect("positive std");
    let clutter: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0f32..32.0), rng.random_range(0.0f32..32.0));
            let s = rng.random_range(1.0f32..2.5);
            (x, y, s, std::array::from_fn(|_| rng.random_range(0.0f32..1.0)))
        })
        .collect();

    let inside = |x: f32, y: f32| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let d = (dx * dx + dy * dy).sqrt();
        let box_ = dx.abs() <= r && dy.abs() <= r;
        match label {
            0 => box_,
            1 => d <= r,
            2 => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
            3 => (dx.abs() <= thick && dy.abs() <= r) || (dy.abs() <= thick && dx.abs() <= r),
            4 => (d - r * 0.8).abs() <= thick,
            5 => box_ && (dy + r).rem_euclid(period) < period * 0.5,
            6 => box_ && (dx + r).rem_euclid(period) < period * 0.5,
            7 => box_ && ((dx - dy).abs() <= thick * 1.2 || (dx + dy).abs() <= thick * 1.2),
            8 => box_ && (dx.abs() >= r - thick || dy.abs() >= r - thick),
            _ => {
                let (u, v) = ((dx + r).rem_euclid(period), (dy + r).rem_euclid(period));
                box_ && (u - period * 0.5).abs() < period * 0.25 && (v - period * 0.5).abs() < period * 0.25
            }
        }
    };

    let mut px = vec![0u8; 3 * SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let on = inside(fx, fy);
            let blot = clutter.iter().find(|b| (fx - b.0).abs() <= b.2 && (fy - b.1).abs() <= b.2);
            for c in 0..3 {
                let base = match (on, blot) {
                    (_, Some(b)) => b.3[c],
                    (true, None) => fg[c],
                    (false, None) => bg[c],
                };
                let v = (base + noise.sample(rng)).clamp(0.0, 1.0);
                px[(c * SIDE + y) * SIDE + x] = (v * 255.0).round() as u8;
            }
        }
    }
    px
}

fn split(spec: &ShapesSpec, which: u64, count: usize) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(count * 3 * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[which, i as u64]));
        pixels.extend(render(label, &mut rng));
        labels.push(label);
    }
    Dataset::new(spec.classes, [3, SIDE, SIDE], pixels, labels)
}

/// Deterministic procedural-shapes splits. Labels cycle through the classes,
/// so every split with a multiple of `classes` samples is exactly balanced.
pub fn generate_shapes(spec: &ShapesSpec) -> Result<Splits> {
    if spec.classes == 0 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::Config(format!(
            "shapes dataset supports 1..={} classes, got {}",
            SHAPE_NAMES.len(),
            spec.classes
        )));
    }
    Ok(Splits {
        train: split(spec, 0, spec.train)?,
        reward: split(spec, 1, spec.reward)?,
        test: split(spec, 2, spec.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapesSpec {
        ShapesSpec {
            classes: 10,
            train: 600,
            reward: 20,
            test: 20,
            seed: 5,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_shapes(&small()).unwrap();
        let b = generate_shapes(&small()).unwrap();
        assert_eq!(a.train.to_bytes(), b.train.to_bytes());
        let c = generate_shapes(&ShapesSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a.train.to_bytes(), c.train.to_bytes());
    }

    #[test]
    fn labels_exactly_balanced() {
        let s = generate_shapes(&small()).unwrap();
        let mut hist = [0usize; 10];
        s.train.labels.iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [60; 10]);
    }

    #[test]
    fn bytes_roundtrip_and_reject_truncation() {
        let s = generate_shapes(&small()).unwrap();
        let bytes = s.reward.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), s.reward);
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
        assert!(matches!(Dataset::from_bytes(b"NOPE!"), Err(Error::Data(_))));
    }

    #[test]
    fn batch_scales_to_unit_interval() {
        let s = generate_shapes(&small()).unwrap();
        let (x, y) = s.test.batch(&[0, 3]);
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y, vec![0, 3]);
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
