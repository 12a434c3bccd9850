//! Training corpora.
//!
//! A corpus spec is either a directory of images (`png`/`jpg`, loaded with
//! shorter-edge resize then center crop) or a procedural source of the form
//! `synth:SEED:COUNT`, which generates a seeded set of smooth gradient +
//! soft-shape images. The synthetic source keeps desk-scale runs hermetic:
//! no downloads, fully reproducible.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::images::ImageBatch;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CorpusSpec {
    Dir(PathBuf),
    Synthetic { seed: u64, count: usize },
}

impl CorpusSpec {
    /// Parses `synth:SEED:COUNT` or treats the string as a directory path,
    /// resolved against `data_root` when relative.
    pub fn parse(spec: &str, data_root: Option<&Path>) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("synth:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "synthetic corpus spec must be synth:SEED:COUNT, got {spec:?}"
                )));
            }
            let seed = parts[0]
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("bad corpus seed in {spec:?}: {e}")))?;
            let count = parts[1]
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad corpus count in {spec:?}: {e}")))?;
            if count == 0 {
                return Err(Error::Config("corpus count must be positive".to_string()));
            }
            Ok(Self::Synthetic { seed, count })
        } else {
            let path = PathBuf::from(spec);
            let path = match (path.is_relative(), data_root) {
                (true, Some(root)) => root.join(path),
                _ => path,
            };
            Ok(Self::Dir(path))
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Dir(p) => p.display().to_string(),
            Self::Synthetic { seed, count } => format!("synth:{seed}:{count}"),
        }
    }
}

/// An in-memory image set at a fixed resolution.
pub struct Corpus {
    images: Vec<Tensor>,
    resolution: usize,
    describe: String,
}

impl Corpus {
    pub fn load(spec: &CorpusSpec, resolution: usize, device: &Device) -> Result<Self> {
        let images = match spec {
            CorpusSpec::Synthetic { seed, count } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| synthesize_image(&mut rng, resolution, device))
                    .collect::<Result<Vec<_>>>()?
            }
            CorpusSpec::Dir(dir) => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::Data(format!("corpus dir {}: {e}", dir.display())))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("png") | Some("jpg") | Some("jpeg") | Some("PNG") | Some("JPG")
                        )
                    })
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    return Err(Error::Data(format!(
                        "no png/jpg images in {}",
                        dir.display()
                    )));
                }
                paths
                    .iter()
                    .map(|p| load_image(p, resolution, device))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self {
            images,
            resolution,
            describe: spec.describe(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn describe(&self) -> &str {
        &self.describe
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    /// Stacks the images at `indices` into an N x 3 x R x R batch.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let picks: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        ImageBatch::new(Tensor::stack(&picks, 0)?)
    }

    pub fn all(&self) -> Result<ImageBatch> {
        let refs: Vec<&Tensor> = self.images.iter().collect();
        ImageBatch::new(Tensor::stack(&refs, 0)?)
    }

    /// Shuffled epoch order, deterministic in the rng state.
    pub fn epoch_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }
}

/// Shorter edge resized to `resolution`, then center crop.
fn load_image(path: &Path, resolution: usize, device: &Device) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let r = resolution as u32;
    let (nw, nh) = if w < h {
        (r, (h as f64 * r as f64 / w as f64).round().max(r as f64) as u32)
    } else {
        ((w as f64 * r as f64 / h as f64).round().max(r as f64) as u32, r)
    };
    let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
    let x0 = (nw - r) / 2;
    let y0 = (nh - r) / 2;
    let cropped = image::imageops::crop_imm(&resized, x0, y0, r, r).to_image();
    let batch = ImageBatch::from_rgb8(&[cropped], device)?;
    Ok(batch.tensor().narrow(0, 0, 1)?.squeeze(0)?)
}

/// One synthetic image: low-frequency sinusoid gradients per channel, a few
/// soft-edged shapes, and light texture noise.
fn synthesize_image<R: Rng + ?Sized>(
    rng: &mut R,
    resolution: usize,
    device: &Device,
) -> Result<Tensor> {
    let n = resolution;
    let mut planes = vec![0.0f32; 3 * n * n];

    // Per-channel smooth background.
    for c in 0..3 {
        let fx = rng.gen_range(0.3..2.0) * std::f32::consts::PI / n as f32;
        let fy = rng.gen_range(0.3..2.0) * std::f32::consts::PI / n as f32;
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let amp = rng.gen_range(0.3..0.7);
        let bias = rng.gen_range(-0.3..0.3);
        for i in 0..n {
            for j in 0..n {
                let v = amp * (fx * j as f32 + fy * i as f32 + phase).sin() + bias;
                planes[c * n * n + i * n + j] = v;
            }
        }
    }

    // Soft shapes shared across channels with per-channel colors.
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let cx = rng.gen_range(0.0..n as f32);
        let cy = rng.gen_range(0.0..n as f32);
        let radius = rng.gen_range(n as f32 * 0.1..n as f32 * 0.35);
        let softness = rng.gen_range(1.0..4.0);
        let color = [
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
        ];
        for i in 0..n {
            for j in 0..n {
                let d = ((j as f32 - cx).powi(2) + (i as f32 - cy).powi(2)).sqrt();
                let m = 1.0 / (1.0 + ((d - radius) / softness).exp());
                for c in 0..3 {
                    let idx = c * n * n + i * n + j;
                    planes[idx] = planes[idx] * (1.0 - m) + color[c] * m;
                }
            }
        }
    }

    // Light texture so images are not trivially smooth.
    for v in planes.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(-1.0, 1.0);
    }

    Ok(Tensor::from_vec(planes, (3, n, n), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device() -> Device {
        Device::Cpu
    }

    #[test]
    fn synthetic_corpus_is_seeded_and_in_range() {
        let spec = CorpusSpec::parse("synth:9:12", None).unwrap();
        let a = Corpus::load(&spec, 32, &device()).unwrap();
        let b = Corpus::load(&spec, 32, &device()).unwrap();
        assert_eq!(a.len(), 12);
        let va = a.all().unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = b.all().unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().all(|x| (-1.0..=1.0).contains(x)));

        let c = Corpus::load(&CorpusSpec::parse("synth:10:12", None).unwrap(), 32, &device()).unwrap();
        let vc = c.all().unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(va, vc);
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            CorpusSpec::parse("synth:3:100", None).unwrap(),
            CorpusSpec::Synthetic { seed: 3, count: 100 }
        );
        assert!(CorpusSpec::parse("synth:x:100", None).is_err());
        assert!(CorpusSpec::parse("synth:3:0", None).is_err());
        assert_eq!(
            CorpusSpec::parse("imgs", Some(Path::new("/data"))).unwrap(),
            CorpusSpec::Dir(PathBuf::from("/data/imgs"))
        );
        assert_eq!(
            CorpusSpec::parse("/abs/imgs", Some(Path::new("/data"))).unwrap(),
            CorpusSpec::Dir(PathBuf::from("/abs/imgs"))
        );
    }

    #[test]
    fn directory_corpus_resize_center_crop() {
        let dir = tempfile::tempdir().unwrap();
        // 40x20 gradient image: shorter edge 20 -> resized to 16, width 32,
        // center crop takes columns 8..24.
        let img = image::RgbImage::from_fn(40, 20, |x, _y| {
            image::Rgb([(x * 6) as u8, 128, 255 - (x * 6) as u8])
        });
        img.save(dir.path().join("a.png")).unwrap();
        let corpus = Corpus::load(
            &CorpusSpec::Dir(dir.path().to_path_buf()),
            16,
            &device(),
        )
        .unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.image(0).dims(), &[3, 16, 16]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = match Corpus::load(&CorpusSpec::Dir(dir.path().to_path_buf()), 16, &device()) {
            Err(e) => e,
            Ok(_) => panic!("expected error on empty directory"),
        };
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let corpus = Corpus::load(
            &CorpusSpec::parse("synth:1:7", None).unwrap(),
            16,
            &device(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut order = corpus.epoch_order(&mut rng);
        order.sort();
        assert_eq!(order, (0..7).collect::<Vec<_>>());
    }
}
