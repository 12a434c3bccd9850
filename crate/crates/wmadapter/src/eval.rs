//! Bit accuracy, image-quality metrics, and the multi-user tracing protocol.
//!
//! Matching packs keys into 64-bit words and uses population counts so a
//! 10^6-user pool against thousands of queries completes in seconds; the
//! scalar brute-force oracle lives in the test suite as the correctness
//! reference.

use std::collections::HashSet;

use candle_core::DType;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::AttackSpec;
use crate::error::{Error, Result};
use crate::images::ImageBatch;
use crate::keys::{BitLogits, WatermarkKey, KEY_BITS};

/// Fraction of correctly decoded bits.
pub fn bit_accuracy(decoded: &BitLogits, key: WatermarkKey) -> f64 {
    let matches = KEY_BITS as u32 - decoded.decode().hamming(key);
    matches as f64 / KEY_BITS as f64
}

/// PSNR in dB, computed in [0,1] space, capped at 100 per image, averaged
/// over the batch.
pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    let (n, c, h, w) = a.dims();
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            context: "psnr".to_string(),
            expected: format!("{:?}", a.dims()),
            actual: format!("{:?}", b.dims()),
        });
    }
    let av = unit_vec(a)?;
    let bv = unit_vec(b)?;
    let per = c * h * w;
    let mut total = 0.0;
    for i in 0..n {
        let mut mse = 0.0f64;
        for j in 0..per {
            let d = av[i * per + j] - bv[i * per + j];
            mse += d * d;
        }
        mse /= per as f64;
        let p = if mse <= 0.0 {
            100.0
        } else {
            (10.0 * (1.0 / mse).log10()).min(100.0)
        };
        total += p;
    }
    Ok(total / n as f64)
}

fn unit_vec(x: &ImageBatch) -> Result<Vec<f64>> {
    Ok(x
        .to_unit()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Standard windowed SSIM (11x11 Gaussian, sigma 1.5, K1 0.01, K2 0.03,
/// L 1.0), valid window positions only, channel- and batch-averaged, in
/// [0,1] space.
pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    let (n, c, h, w) = a.dims();
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            context: "ssim".to_string(),
            expected: format!("{:?}", a.dims()),
            actual: format!("{:?}", b.dims()),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            context: "ssim".to_string(),
            expected: format!(">= {SSIM_WINDOW}x{SSIM_WINDOW}"),
            actual: format!("{h}x{w}"),
        });
    }
    let av = unit_vec(a)?;
    let bv = unit_vec(b)?;
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for y in 0..=(h - SSIM_WINDOW) {
                for x in 0..=(w - SSIM_WINDOW) {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let g = win[i * SSIM_WINDOW + j];
                            let xv = av[base + (y + i) * w + x + j];
                            let yv = bv[base + (y + i) * w + x + j];
                            mx += g * xv;
                            my += g * yv;
                            mxx += g * xv * xv;
                            myy += g * yv * yv;
                            mxy += g * xv * yv;
                        }
                    }
                    let vx = mxx - mx * mx;
                    let vy = myy - my * my;
                    let cov = mxy - mx * my;
                    let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Feature source for FID; the desk-scale default is the seeded frozen
/// [`crate::losses::FeatureNet`]. Reports carry the extractor id because FID
/// magnitudes are only comparable under the same extractor.
pub trait FeatureExtractor {
    fn features(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>>;
    fn id(&self) -> String;
}

impl FeatureExtractor for crate::losses::FeatureNet {
    fn features(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        let pooled = self.pooled(images.tensor())?.to_dtype(DType::F64)?;
        Ok(pooled.to_vec2::<f64>()?)
    }

    fn id(&self) -> String {
        crate::losses::FeatureNet::id(self).to_string()
    }
}

/// Frechet distance between Gaussian fits of the two feature sets.
pub fn fid(a: &ImageBatch, b: &ImageBatch, extractor: &dyn FeatureExtractor) -> Result<f64> {
    fid_from_features(&extractor.features(a)?, &extractor.features(b)?)
}

const FID_EPS: f64 = 1e-6;

pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data(format!(
            "fid needs >= 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    let (mu_a, cov_a) = gaussian_fit(a, d)?;
    let (mu_b, cov_b) = gaussian_fit(b, d)?;

    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    // Regularize both covariances, then tr(sqrtm(Ca Cb)) via the symmetric
    // form sqrtm(sqrt(Ca) Cb sqrt(Ca)).
    let eye = DMatrix::<f64>::identity(d, d);
    let ca = &cov_a + &eye * FID_EPS;
    let cb = &cov_b + &eye * FID_EPS;
    let sqrt_a = sqrtm(&ca);
    let inner = &sqrt_a * &cb * &sqrt_a;
    let tr_sqrt = sqrtm(&inner).trace();

    Ok(mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt)
}

fn gaussian_fit(feats: &[Vec<f64>], d: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = feats.len();
    for f in feats {
        if f.len() != d {
            return Err(Error::Shape {
                context: "fid features".to_string(),
                expected: format!("{d}"),
                actual: format!("{}", f.len()),
            });
        }
    }
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, v) in mu.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in feats {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (f[i] - mu[i]) * (f[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from rounding are clamped to zero.
fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// A pool of distinct user keys; index <-> user is stable given the seed.
pub struct UserPool {
    keys: Vec<u64>,
    seed: u64,
}

impl UserPool {
    /// Uniform draws with rejection on duplicates.
    pub fn generate(n_users: usize, seed: u64) -> Result<Self> {
        if n_users == 0 {
            return Err(Error::Config("user pool must be nonempty".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::with_capacity(n_users * 2);
        let mut keys = Vec::with_capacity(n_users);
        while keys.len() < n_users {
            let k = WatermarkKey::random(&mut rng).packed();
            if seen.insert(k) {
                keys.push(k);
            }
        }
        Ok(Self { keys, seed })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self, user: usize) -> WatermarkKey {
        WatermarkKey::from_packed(self.keys[user])
    }

    pub fn packed(&self) -> &[u64] {
        &self.keys
    }
}

/// Nearest user by Hamming distance; ties break to the lowest index.
pub fn match_key(decoded: &BitLogits, pool: &UserPool) -> usize {
    match_packed(decoded.decode().packed(), pool)
}

pub fn match_packed(query: u64, pool: &UserPool) -> usize {
    let chunk = 1 << 16;
    let best = pool
        .keys
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, keys)| {
            let mut best = (u32::MAX, usize::MAX);
            for (i, &k) in keys.iter().enumerate() {
                let d = (k ^ query).count_ones();
                if d < best.0 {
                    best = (d, ci * chunk + i);
                }
            }
            best
        })
        .min()
        .expect("nonempty pool");
    best.1
}

/// Source of decoded logits for the tracing protocol. The real channel
/// watermarks an image, attacks it and extracts; stubs short-circuit for
/// protocol-mechanics tests.
pub trait TraceChannel {
    fn observe(
        &mut self,
        image_index: usize,
        key: WatermarkKey,
        attack: &AttackSpec,
    ) -> Result<BitLogits>;
}

/// Returns the true key's logits exactly.
pub struct PerfectChannel;

impl TraceChannel for PerfectChannel {
    fn observe(&mut self, _i: usize, key: WatermarkKey, _a: &AttackSpec) -> Result<BitLogits> {
        Ok(BitLogits::perfect(key))
    }
}

/// Flips each bit independently with probability `p`.
pub struct FlipChannel {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl FlipChannel {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl TraceChannel for FlipChannel {
    fn observe(&mut self, _i: usize, key: WatermarkKey, _a: &AttackSpec) -> Result<BitLogits> {
        let mut vals = [0.0f32; KEY_BITS];
        for (i, v) in vals.iter_mut().enumerate() {
            let bit = key.bit(i) ^ (self.rng.gen::<f64>() < self.p);
            *v = if bit { 10.0 } else { -10.0 };
        }
        Ok(BitLogits::new(vals))
    }
}

#[derive(Clone, Debug)]
pub struct TraceOutcome {
    pub accuracy: f64,
    pub pool_size: usize,
    pub pool_seed: u64,
    pub n_users: usize,
    pub images_per_user: usize,
    pub attack: String,
    /// Wall time of the matching phase only.
    pub match_seconds: f64,
}

/// Tracing protocol: build a pool, select users, watermark `images_per_user`
/// images per selected user (cycling through `n_images` sources), optionally
/// attack, extract, match; accuracy is the fraction of correct user matches.
#[allow(clippy::too_many_arguments)]
pub fn trace_protocol(
    channel: &mut dyn TraceChannel,
    pool_size: usize,
    pool_seed: u64,
    n_users: usize,
    images_per_user: usize,
    n_images: usize,
    attack: &AttackSpec,
    select_seed: u64,
) -> Result<TraceOutcome> {
    let pool = UserPool::generate(pool_size, pool_seed)?;
    run_trace(
        channel,
        &pool,
        n_users,
        images_per_user,
        n_images,
        attack,
        select_seed,
    )
}

pub fn run_trace(
    channel: &mut dyn TraceChannel,
    pool: &UserPool,
    n_users: usize,
    images_per_user: usize,
    n_images: usize,
    attack: &AttackSpec,
    select_seed: u64,
) -> Result<TraceOutcome> {
    if n_users > pool.len() {
        return Err(Error::Config(format!(
            "cannot select {n_users} users from a pool of {}",
            pool.len()
        )));
    }
    if n_images == 0 {
        return Err(Error::Data("tracing needs at least one source image".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(select_seed);
    let mut selected = HashSet::with_capacity(n_users * 2);
    let mut users = Vec::with_capacity(n_users);
    while users.len() < n_users {
        let u = rng.gen_range(0..pool.len());
        if selected.insert(u) {
            users.push(u);
        }
    }

    let mut observations = Vec::with_capacity(n_users * images_per_user);
    let mut img_cursor = 0usize;
    for &user in &users {
        let key = pool.key(user);
        for _ in 0..images_per_user {
            let logits = channel.observe(img_cursor % n_images, key, attack)?;
            observations.push((user, logits.decode().packed()));
            img_cursor += 1;
        }
    }

    let t0 = std::time::Instant::now();
    let correct: usize = observations
        .par_iter()
        .map(|&(user, packed)| (match_packed(packed, pool) == user) as usize)
        .sum();
    let match_seconds = t0.elapsed().as_secs_f64();

    Ok(TraceOutcome {
        accuracy: correct as f64 / observations.len() as f64,
        pool_size: pool.len(),
        pool_seed: pool.seed(),
        n_users,
        images_per_user,
        attack: attack.to_string(),
        match_seconds,
    })
}
