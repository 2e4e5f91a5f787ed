//! Host-image ingestion (random crops, deterministic order), code-batch
//! generation, and synthetic host fixtures for toy runs.

use crate::error::{Error, Result};
use crate::img::{self, Image};
use crate::model::derive_seed;
use crate::qr::{self, ModuleMatrix};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Message charset for generated codes (byte-mode alphanumerics).
pub const CHARSET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

pub struct QrSample {
    pub message: String,
    pub matrix: ModuleMatrix,
    pub image: Image<f32>,
}

pub struct HostDataset {
    images: Vec<Image<f32>>,
    pub skipped: usize,
    side: usize,
}

impl HostDataset {
    /// Load every readable PNG/JPEG under `dir` (sorted by file name) that is
    /// at least `side` pixels on both axes; others are skipped and counted.
    pub fn load(dir: &Path, side: usize) -> Result<Self> {
        let mut names: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()).map(|s| s.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        names.sort();
        let mut images = Vec::new();
        let mut skipped = 0usize;
        for path in &names {
            match img::load::<f32>(path) {
                Ok(image) => {
                    let (_, h, w) = image.dim();
                    if h >= side && w >= side {
                        images.push(image);
                    } else {
                        skipped += 1;
                    }
                }
                Err(_) => skipped += 1,
            }
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset(dir.display().to_string()));
        }
        Ok(HostDataset {
            images,
            skipped,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One epoch = one pass over the files.
    pub fn steps_per_epoch(&self, batch: usize) -> u64 {
        (self.len() as u64).div_ceil(batch as u64)
    }

    pub fn epoch_of(&self, iteration: u64, batch: usize) -> u64 {
        iteration * batch as u64 / self.len() as u64
    }

    /// Deterministic batch of random crops for one iteration: files are
    /// re-shuffled per epoch and crop offsets derive from the global sample
    /// index, so any iteration can be reproduced in isolation.
    pub fn batch(&self, seed: u64, batch: usize, iteration: u64) -> Vec<Image<f32>> {
        (0..batch)
            .map(|k| {
                let global = iteration * batch as u64 + k as u64;
                let epoch = global / self.len() as u64;
                let pos = (global % self.len() as u64) as usize;
                let mut order: Vec<usize> = (0..self.len()).collect();
                let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE90C, epoch]));
                order.shuffle(&mut erng);
                let image = &self.images[order[pos]];
                let (_, h, w) = image.dim();
                let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC909, global]));
                let top = if h > self.side {
                    crng.gen_range(0..=h - self.side)
                } else {
                    0
                };
                let left = if w > self.side {
                    crng.gen_range(0..=w - self.side)
                } else {
                    0
                };
                Image::from_shape_fn((3, self.side, self.side), |(c, y, x)| {
                    image[[c, top + y, left + x]]
                })
            })
            .collect()
    }
}

/// Random maximum-payload messages over [`CHARSET`], their matrices, and
/// renders at the flow input size. Deterministic per seed.
pub fn generate_qr_batch(
    count: usize,
    version: u8,
    seed: u64,
    image_side: usize,
) -> Result<Vec<QrSample>> {
    let cap = qr::capacity(version)?;
    let n = qr::module_count(version)?;
    let px = (image_side / n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let message: String = (0..cap)
                .map(|_| CHARSET[rng.gen_range(0..CHARSET.len())] as char)
                .collect();
            let matrix = qr::encode_message(message.as_bytes(), version)?;
            let image = qr::render(&matrix, px, image_side)?;
            Ok(QrSample {
                message,
                matrix,
                image,
            })
        })
        .collect()
}

/// Write smooth synthetic host PNGs (cosine mixtures), sized `side x side`,
/// for toy training and tests.
pub fn synth_host_images(dir: &Path, count: usize, side: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5A9D, i as u64]));
        let mut params = Vec::new();
        for _ in 0..4 {
            params.push((
                rng.gen_range(0.5..3.0) / side as f64,
                rng.gen_range(0.5..3.0) / side as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..0.22),
                [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
            ));
        }
        let image = Image::from_shape_fn((3, side, side), |(c, y, x)| {
            let mut v = 0.5;
            for (fy, fx, phase, amp, gains) in &params {
                v += amp
                    * gains[c]
                    * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
            }
            v.clamp(0.0, 1.0) as f32
        });
        img::save(&image, &dir.join(format!("host_{i:03}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_batch_is_deterministic_and_decodable() {
        let a = generate_qr_batch(4, 5, 11, 64).unwrap();
        let b = generate_qr_batch(4, 5, 11, 64).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.message, y.message);
            assert_eq!(x.matrix, y.matrix);
        }
        // Distinct matrices, every one decodes to its message.
        assert_ne!(a[0].matrix, a[1].matrix);
        for s in &a {
            assert_eq!(
                qr::decode_matrix(&s.matrix).as_deref(),
                Some(s.message.as_bytes())
            );
            assert_eq!(s.image.dim(), (3, 64, 64));
        }
    }

    #[test]
    fn dataset_loads_crops_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        synth_host_images(dir.path(), 5, 80, 3).unwrap();
        // A junk file and an undersized image are skipped with a count.
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        synth_host_images(&dir.path().join("small"), 1, 16, 4).unwrap();
        std::fs::rename(
            dir.path().join("small").join("host_000.png"),
            dir.path().join("small.png"),
        )
        .unwrap();

        let ds = HostDataset::load(dir.path(), 64).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.skipped, 2);
        assert_eq!(ds.steps_per_epoch(8), 1);

        let b1 = ds.batch(7, 4, 13);
        let b2 = ds.batch(7, 4, 13);
        for (x, y) in b1.iter().zip(b2.iter()) {
            assert_eq!(x, y);
            assert_eq!(x.dim(), (3, 64, 64));
        }
        let b3 = ds.batch(7, 4, 14);
        assert_ne!(b1[0], b3[0]);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            HostDataset::load(dir.path(), 64),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn exact_size_image_crops_to_identity() {
        let dir = tempfile::tempdir().unwrap();
        synth_host_images(dir.path(), 1, 64, 9).unwrap();
        let ds = HostDataset::load(dir.path(), 64).unwrap();
        let orig = img::load::<f32>(&dir.path().join("host_000.png")).unwrap();
        let got = ds.batch(1, 1, 0);
        assert_eq!(got[0], orig);
    }
}
