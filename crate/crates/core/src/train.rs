//! Dataset synthesis, latent-autoencoder pretraining, joint main-network
//! training and the PCA fixed-pattern baseline.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::brdf::{sample_brdf, BRDFSample, SampleConfig};
use crate::device::VirtualDevice;
use crate::error::{Error, Result};
use crate::lightstage::{render_lumitexel, LedSet, LightingPattern, PatternForm, RenderMode};
use crate::moe::{
    eval_loss, train_step, BatchLabels, ModelBundle, ModelConfig, TrainCheckpoint, TrainerState,
};
use crate::nn::{AdamConfig, Mode, Stack, Tensor2};
use crate::seeding::{derive_seed, derived_rng, rng_from_seed};

/// Floats of per-record metadata: position, normal, tangent, diffuse and
/// specular albedo, two roughnesses.
pub const META_FLOATS: usize = 17;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub count: usize,
    pub num_leds: usize,
    pub num_diffuse_leds: usize,
    pub seed: u64,
    pub device_hash: u64,
    pub full: Vec<f32>,
    pub diffuse: Vec<f32>,
    pub specular: Vec<f32>,
    pub meta: Vec<f32>,
}

impl Dataset {
    pub fn full_row(&self, i: usize) -> &[f32] {
        &self.full[i * self.num_leds..(i + 1) * self.num_leds]
    }

    pub fn diffuse_row(&self, i: usize) -> &[f32] {
        &self.diffuse[i * self.num_diffuse_leds..(i + 1) * self.num_diffuse_leds]
    }

    pub fn specular_row(&self, i: usize) -> &[f32] {
        &self.specular[i * self.num_leds..(i + 1) * self.num_leds]
    }

    pub fn meta_row(&self, i: usize) -> &[f32] {
        &self.meta[i * META_FLOATS..(i + 1) * META_FLOATS]
    }

    /// 5% validation tail, fixed by the generation seed.
    pub fn val_count(&self) -> usize {
        (self.count / 20).max(1).min(self.count)
    }

    pub fn train_count(&self) -> usize {
        self.count - self.val_count()
    }
}

/// Perturb sampled BRDF parameters with multiplicative Gaussian noise so
/// rendered inputs and labels stay mutually consistent.
fn perturb_params(sample: &mut BRDFSample, sigma: f64, cfg: &SampleConfig, rng: &mut ChaCha8Rng) {
    let factor = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        1.0 + sigma * z
    };
    let p = &mut sample.params;
    for c in 0..3 {
        p.diffuse_albedo[c] = (p.diffuse_albedo[c] * factor(rng)).clamp(0.0, 1.0);
    }
    for c in 0..3 {
        p.specular_albedo[c] = (p.specular_albedo[c] * factor(rng)).max(0.0);
    }
    p.roughness_x = (p.roughness_x * factor(rng)).clamp(cfg.alpha_min, cfg.alpha_max);
    p.roughness_y = (p.roughness_y * factor(rng)).clamp(cfg.alpha_min, cfg.alpha_max);
}

/// Generate `count` gray-channel training records by random sampling.
/// Each record derives its own generator from the seed, so the dataset is
/// reproducible bitwise regardless of thread count.
pub fn generate_dataset(
    device: &VirtualDevice,
    count: usize,
    seed: u64,
    sample_cfg: &SampleConfig,
    param_noise_sigma: f64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid_argument("dataset count must be at least 1"));
    }
    let l = device.num_leds();
    let d = device.num_diffuse_leds();
    let mut full = vec![0.0f32; count * l];
    let mut diffuse = vec![0.0f32; count * d];
    let mut specular = vec![0.0f32; count * l];
    let mut meta = vec![0.0f32; count * META_FLOATS];

    let chunks: Vec<(usize, &mut [f32], &mut [f32], &mut [f32], &mut [f32])> = full
        .chunks_mut(l)
        .zip(diffuse.chunks_mut(d))
        .zip(specular.chunks_mut(l))
        .zip(meta.chunks_mut(META_FLOATS))
        .enumerate()
        .map(|(i, (((f, df), sp), mt))| (i, f, df, sp, mt))
        .collect();

    let results: Vec<Result<()>> = chunks
        .into_par_iter()
        .map(|(i, f, df, sp, mt)| {
            let mut rng = derived_rng(seed, &[0x11, i as u64]);
            let mut sample = sample_brdf(&mut rng, &device.plane, sample_cfg);
            perturb_params(&mut sample, param_noise_sigma, sample_cfg, &mut rng);
            let gray = BRDFSample { params: sample.params.gray(), ..sample };
            let lum_full = render_lumitexel(&gray, device, 0, RenderMode::Full, LedSet::Main)?;
            let lum_diff =
                render_lumitexel(&gray, device, 0, RenderMode::DiffuseOnly, LedSet::Diffuse)?;
            let lum_spec =
                render_lumitexel(&gray, device, 0, RenderMode::SpecularOnly, LedSet::Main)?;
            for (dst, v) in f.iter_mut().zip(lum_full.values()) {
                *dst = *v as f32;
            }
            for (dst, v) in df.iter_mut().zip(lum_diff.values()) {
                *dst = *v as f32;
            }
            for (dst, v) in sp.iter_mut().zip(lum_spec.values()) {
                *dst = *v as f32;
            }
            let p = &sample.params;
            let vals = [
                sample.position.x,
                sample.position.y,
                sample.position.z,
                sample.frame.normal.x,
                sample.frame.normal.y,
                sample.frame.normal.z,
                sample.frame.tangent.x,
                sample.frame.tangent.y,
                sample.frame.tangent.z,
                p.diffuse_albedo.x,
                p.diffuse_albedo.y,
                p.diffuse_albedo.z,
                p.specular_albedo.x,
                p.specular_albedo.y,
                p.specular_albedo.z,
                p.roughness_x,
                p.roughness_y,
            ];
            for (dst, v) in mt.iter_mut().zip(vals) {
                *dst = v as f32;
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    Ok(Dataset {
        count,
        num_leds: l,
        num_diffuse_leds: d,
        seed,
        device_hash: device.geometry_hash(),
        full,
        diffuse,
        specular,
        meta,
    })
}

// ---------------------------------------------------------------------------
// Dataset files.
// ---------------------------------------------------------------------------

const LUMI_MAGIC: &[u8; 4] = b"LUMI";
const LUMI_VERSION: u32 = 1;

impl Dataset {
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LUMI_MAGIC)?;
        w.write_all(&LUMI_VERSION.to_le_bytes())?;
        w.write_all(&(self.count as u64).to_le_bytes())?;
        w.write_all(&(self.num_leds as u32).to_le_bytes())?;
        w.write_all(&(self.num_diffuse_leds as u32).to_le_bytes())?;
        w.write_all(&self.device_hash.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::new();
        for i in 0..self.count {
            buf.clear();
            for v in self
                .full_row(i)
                .iter()
                .chain(self.diffuse_row(i))
                .chain(self.specular_row(i))
                .chain(self.meta_row(i))
            {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LUMI_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != LUMI_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let l = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let device_hash = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);

        let rec = l + d + l + META_FLOATS;
        let mut full = vec![0.0f32; count * l];
        let mut diffuse = vec![0.0f32; count * d];
        let mut specular = vec![0.0f32; count * l];
        let mut meta = vec![0.0f32; count * META_FLOATS];
        let mut buf = vec![0u8; rec * 4];
        for i in 0..count {
            r.read_exact(&mut buf)?;
            let mut at = 0usize;
            let mut take = |dst: &mut [f32]| {
                for v in dst.iter_mut() {
                    *v = f32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
                    at += 4;
                }
            };
            take(&mut full[i * l..(i + 1) * l]);
            take(&mut diffuse[i * d..(i + 1) * d]);
            take(&mut specular[i * l..(i + 1) * l]);
            take(&mut meta[i * META_FLOATS..(i + 1) * META_FLOATS]);
        }
        Ok(Dataset {
            count,
            num_leds: l,
            num_diffuse_leds: d,
            seed,
            device_hash,
            full,
            diffuse,
            specular,
            meta,
        })
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut w)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Dataset::load(&mut r)
    }
}

/// FNV-1a over a file's bytes; used to verify dataset reproducibility.
pub fn file_checksum(path: &Path) -> Result<u64> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Training configuration and curves.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evaluate validation loss every this many iterations (plus at the
    /// fixed probe iteration 100 and at the end).
    pub val_every: u64,
    /// Cap on validation rows per evaluation (0 = use the whole split).
    pub val_max_rows: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 50,
            learning_rate: 1e-4,
            val_every: 1000,
            val_max_rows: 0,
            checkpoint_every: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch_size must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid_argument("iterations must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn write_curves_csv(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,train_loss,val_loss")?;
    for p in curves {
        match p.val_loss {
            Some(v) => writeln!(w, "{},{},{}", p.iteration, p.train_loss, v)?,
            None => writeln!(w, "{},{},", p.iteration, p.train_loss)?,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Latent autoencoder pretraining.
// ---------------------------------------------------------------------------

pub struct PretrainResult {
    pub encoder: Stack<f32>,
    pub head: Stack<f32>,
    pub curves: Vec<CurvePoint>,
}

fn batch_rows(data: &[f32], width: usize, indices: &[usize]) -> Tensor2<f32> {
    let mut t = Tensor2::zeros(indices.len(), width);
    for (r, &i) in indices.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&data[i * width..(i + 1) * width]);
    }
    t
}

/// Squared-error-plus-log1p loss of a prediction batch against labels, and
/// its gradient; the same bracketed objective the gated loss weights.
fn bracket_loss_grad(
    preds: &Tensor2<f32>,
    labels_d: &Tensor2<f32>,
    labels_s: &Tensor2<f32>,
    lambda_d: f32,
    lambda_s: f32,
) -> (f64, Tensor2<f32>) {
    let b = preds.rows;
    let d_diff = labels_d.cols;
    let l = labels_s.cols;
    let inv_b = 1.0 / b as f32;
    let mut grad = Tensor2::zeros(b, preds.cols);
    let mut loss = 0.0f64;
    for r in 0..b {
        let row = preds.row(r);
        let lab_d = labels_d.row(r);
        let lab_s = labels_s.row(r);
        let grow = grad.row_mut(r);
        let mut acc = 0.0f32;
        for c in 0..d_diff {
            let dv = row[c] - lab_d[c];
            acc += lambda_d * dv * dv;
            grow[c] = inv_b * lambda_d * 2.0 * dv;
        }
        for c in 0..l {
            let p = row[d_diff + c];
            let dl = p.ln_1p() - lab_s[c].ln_1p();
            acc += lambda_s * dl * dl;
            grow[d_diff + c] = inv_b * lambda_s * 2.0 * dl / (1.0 + p);
        }
        loss += acc as f64 * inv_b as f64;
    }
    (loss, grad)
}

/// Train the 17-fc dumbbell autoencoder (full lumitexel in, concatenated
/// diffuse/specular labels out) and return the post-bottleneck half.
pub fn pretrain_latent(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<PretrainResult> {
    train_cfg.validate()?;
    if dataset.count == 0 {
        return Err(Error::invalid_argument("dataset is empty"));
    }
    let seed = derive_seed(train_cfg.seed, &[0xAE]);
    let mut encoder = Stack::new(model_cfg.num_leds, &model_cfg.encoder_specs())?;
    encoder.xavier_init(&mut rng_from_seed(derive_seed(seed, &[1])));
    let mut head = Stack::new(model_cfg.latent_dim, &model_cfg.head_specs())?;
    head.xavier_init(&mut rng_from_seed(derive_seed(seed, &[2])));

    let adam = train_cfg.adam();
    let enc_lens: Vec<usize> = encoder.param_arrays().iter().map(|p| p.len()).collect();
    let head_lens: Vec<usize> = head.param_arrays().iter().map(|p| p.len()).collect();
    let mut enc_adam = crate::nn::AdamState::<f32>::new(adam, &enc_lens);
    let mut head_adam = crate::nn::AdamState::<f32>::new(adam, &head_lens);

    let mut master = rng_from_seed(derive_seed(seed, &[3]));
    let train_count = dataset.train_count();
    let lam_d = model_cfg.loss.lambda_d as f32;
    let lam_s = model_cfg.loss.lambda_s as f32;
    let sigma = model_cfg.measurement_noise_sigma;

    let mut curves = Vec::new();
    let mut recent = std::collections::VecDeque::with_capacity(100);
    for iter in 0..train_cfg.iterations {
        let indices: Vec<usize> =
            (0..train_cfg.batch_size).map(|_| master.random_range(0..train_count)).collect();
        let noise_seed = master.next_u64();
        let mut input = batch_rows(&dataset.full, dataset.num_leds, &indices);
        if sigma > 0.0 {
            let mut nrng = rng_from_seed(noise_seed);
            for v in input.data.iter_mut() {
                let z: f64 = nrng.sample(StandardNormal);
                *v *= (1.0 + sigma * z) as f32;
            }
        }
        let labels_d = batch_rows(&dataset.diffuse, dataset.num_diffuse_leds, &indices);
        let labels_s = batch_rows(&dataset.specular, dataset.num_leds, &indices);

        let (code, enc_cache) = encoder.forward(&input, Mode::Train, None, true)?;
        let (preds, head_cache) = head.forward(&code, Mode::Train, None, true)?;
        let (loss, dpred) = bracket_loss_grad(&preds, &labels_d, &labels_s, lam_d, lam_s);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("autoencoder loss diverged at iteration {iter}")));
        }
        let (hg, dcode) = head.backward(head_cache.as_ref().unwrap(), &dpred, true)?;
        let (eg, _) = encoder.backward(enc_cache.as_ref().unwrap(), &dcode, true)?;
        {
            let grads = hg.unwrap();
            let garr = Stack::grad_arrays(&grads);
            let mut params = head.param_arrays_mut();
            head_adam.step(&mut params, &garr)?;
        }
        {
            let grads = eg.unwrap();
            let garr = Stack::grad_arrays(&grads);
            let mut params = encoder.param_arrays_mut();
            enc_adam.step(&mut params, &garr)?;
        }

        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(loss);
        let is_probe = iter + 1 == train_cfg.iterations
            || (train_cfg.val_every > 0 && iter > 0 && iter % train_cfg.val_every == 0);
        if is_probe {
            let train_ma = recent.iter().sum::<f64>() / recent.len() as f64;
            let val = autoencoder_val_loss(dataset, &encoder, &head, model_cfg, train_cfg)?;
            curves.push(CurvePoint { iteration: iter + 1, train_loss: train_ma, val_loss: Some(val) });
        }
    }
    Ok(PretrainResult { encoder, head, curves })
}

fn autoencoder_val_loss(
    dataset: &Dataset,
    encoder: &Stack<f32>,
    head: &Stack<f32>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<f64> {
    let val_start = dataset.train_count();
    let mut n = dataset.val_count();
    if train_cfg.val_max_rows > 0 {
        n = n.min(train_cfg.val_max_rows);
    }
    let indices: Vec<usize> = (val_start..val_start + n).collect();
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in indices.chunks(512) {
        let input = batch_rows(&dataset.full, dataset.num_leds, chunk);
        let labels_d = batch_rows(&dataset.diffuse, dataset.num_diffuse_leds, chunk);
        let labels_s = batch_rows(&dataset.specular, dataset.num_leds, chunk);
        let (code, _) = encoder.forward_eval(&input, false)?;
        let (preds, _) = head.forward_eval(&code, false)?;
        let (loss, _) = bracket_loss_grad(
            &preds,
            &labels_d,
            &labels_s,
            model_cfg.loss.lambda_d as f32,
            model_cfg.loss.lambda_s as f32,
        );
        total += loss * chunk.len() as f64;
        rows += chunk.len();
    }
    Ok(total / rows.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Main training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum PatternMode {
    /// Patterns optimized jointly with the network.
    Trainable,
    /// Fixed signed patterns (PCA baseline); no pattern gradients.
    Fixed(Vec<Vec<f32>>),
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub curves: Vec<CurvePoint>,
    pub final_val_loss: f64,
}

pub struct TrainOptions<'a> {
    pub pattern_mode: PatternMode,
    /// Directory for periodic training checkpoints, if any.
    pub checkpoint_dir: Option<&'a Path>,
    /// Resume from a previously captured checkpoint.
    pub resume: Option<TrainCheckpoint>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { pattern_mode: PatternMode::Trainable, checkpoint_dir: None, resume: None }
    }
}

/// Mean gated validation loss of a bundle over the dataset's validation
/// split (eval mode).
pub fn validation_loss(
    bundle: &ModelBundle,
    dataset: &Dataset,
    max_rows: usize,
) -> Result<f64> {
    let val_start = dataset.train_count();
    let mut n = dataset.val_count();
    if max_rows > 0 {
        n = n.min(max_rows);
    }
    let indices: Vec<usize> = (val_start..val_start + n).collect();
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in indices.chunks(256) {
        let full = batch_rows(&dataset.full, dataset.num_leds, chunk);
        let labels_d = batch_rows(&dataset.diffuse, dataset.num_diffuse_leds, chunk);
        let labels_s = batch_rows(&dataset.specular, dataset.num_leds, chunk);
        let labels = BatchLabels { diffuse: &labels_d, specular: &labels_s };
        total += eval_loss(bundle, &full, &labels)? * chunk.len() as f64;
        rows += chunk.len();
    }
    Ok(total / rows.max(1) as f64)
}

/// Joint training of patterns, gating and decoders against a frozen latent
/// head. Deterministic given the seed; checkpoints capture the full
/// optimizer and generator state so a resumed run is bitwise identical.
pub fn train_main(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    head: &Stack<f32>,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if dataset.num_leds != model_cfg.num_leds || dataset.num_diffuse_leds != model_cfg.num_diffuse_leds
    {
        return Err(Error::invalid_argument("dataset dimensions do not match model config"));
    }

    let (mut bundle, mut state, mut master) = match options.resume {
        Some(ck) => {
            let mut bundle = ck.bundle.clone();
            let (state, rng) = ck.restore_state(&mut bundle, train_cfg.adam());
            (bundle, state, rng)
        }
        None => {
            let mut bundle = ModelBundle::new(model_cfg.clone(), derive_seed(train_cfg.seed, &[0x10]))?;
            bundle.head = head.clone();
            let trainable = match &options.pattern_mode {
                PatternMode::Trainable => true,
                PatternMode::Fixed(patterns) => {
                    if patterns.len() != model_cfg.n_trained_patterns {
                        return Err(Error::invalid_argument(format!(
                            "expected {} fixed patterns, got {}",
                            model_cfg.n_trained_patterns,
                            patterns.len()
                        )));
                    }
                    for (j, p) in patterns.iter().enumerate() {
                        if p.len() != model_cfg.num_leds {
                            return Err(Error::invalid_argument("fixed pattern length mismatch"));
                        }
                        for (ll, v) in p.iter().enumerate() {
                            bundle.patterns.set(j, ll, *v);
                        }
                    }
                    bundle.clip_patterns();
                    false
                }
            };
            let state = TrainerState::new(&mut bundle, train_cfg.adam(), trainable);
            let master = rng_from_seed(derive_seed(train_cfg.seed, &[0x20]));
            (bundle, state, master)
        }
    };
    let rng_seed = master.get_seed();

    let train_count = dataset.train_count();
    let mut curves = Vec::new();
    let mut recent = std::collections::VecDeque::with_capacity(100);
    let mut final_val = f64::NAN;

    let start = state.iteration;
    for iter in start..train_cfg.iterations {
        let indices: Vec<usize> =
            (0..train_cfg.batch_size).map(|_| master.random_range(0..train_count)).collect();
        let full = batch_rows(&dataset.full, dataset.num_leds, &indices);
        let labels_d = batch_rows(&dataset.diffuse, dataset.num_diffuse_leds, &indices);
        let labels_s = batch_rows(&dataset.specular, dataset.num_leds, &indices);
        let labels = BatchLabels { diffuse: &labels_d, specular: &labels_s };
        let stats = train_step(&mut bundle, &mut state, &full, &labels, &mut master)
            .map_err(|e| match e {
                Error::NumericFailure(m) => {
                    Error::numeric(format!("{m} at iteration {iter}"))
                }
                other => other,
            })?;

        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(stats.loss);

        let done = iter + 1 == train_cfg.iterations;
        let probe = iter + 1 == 100
            || done
            || (train_cfg.val_every > 0 && (iter + 1) % train_cfg.val_every == 0);
        if probe {
            let val = validation_loss(&bundle, dataset, train_cfg.val_max_rows)?;
            let train_ma = recent.iter().sum::<f64>() / recent.len() as f64;
            curves.push(CurvePoint { iteration: iter + 1, train_loss: train_ma, val_loss: Some(val) });
            if done {
                final_val = val;
            }
        }

        if train_cfg.checkpoint_every > 0
            && (iter + 1) % train_cfg.checkpoint_every == 0
            && options.checkpoint_dir.is_some()
        {
            let dir = options.checkpoint_dir.unwrap();
            std::fs::create_dir_all(dir)?;
            let ck = TrainCheckpoint::capture(&bundle, &state, &master, rng_seed);
            ck.save_file(&dir.join(format!("checkpoint_{:08}.mtck", iter + 1)))?;
        }
    }

    Ok(TrainOutcome { bundle, curves, final_val_loss: final_val })
}

/// Trainable parameter count of the decoders-plus-gating part of a config.
pub fn network_param_count(cfg: &ModelConfig) -> Result<usize> {
    let gating: usize = (0..cfg.num_bits())
        .map(|_| Stack::<f32>::new(cfg.n_trained_patterns, &cfg.gating_specs()).map(|s| s.num_params()))
        .sum::<Result<usize>>()?;
    let dec = Stack::<f32>::new(cfg.n_trained_patterns, &cfg.decoder_specs())?.num_params();
    Ok(gating + dec * cfg.n_decoders)
}

/// Configuration for the unified single-decoder baseline with hidden widths
/// scaled so its trainable parameter count matches the mixture's.
pub fn matched_unified_config(cfg: &ModelConfig) -> Result<ModelConfig> {
    let target = network_param_count(cfg)?;
    let mut best: Option<(usize, ModelConfig)> = None;
    // Scan widths; decoder params grow ~quadratically in the hidden width.
    let base = *cfg.decoder_hidden.first().unwrap_or(&256);
    let lo = base;
    let hi = base * 5;
    let mut w = lo;
    while w <= hi {
        let mut uni = cfg.clone();
        uni.n_decoders = 1;
        uni.decoder_hidden = vec![w; cfg.decoder_hidden.len()];
        let count = network_param_count(&uni)?;
        let diff = count.abs_diff(target);
        if best.as_ref().map_or(true, |(d, _)| diff < *d) {
            best = Some((diff, uni));
        }
        w += 4;
    }
    let (diff, uni) = best.unwrap();
    let rel = diff as f64 / target as f64;
    if rel > 0.05 {
        return Err(Error::invalid_state(format!(
            "could not match parameter count within 5% (off by {:.1}%)",
            rel * 100.0
        )));
    }
    Ok(uni)
}

// ---------------------------------------------------------------------------
// PCA fixed-pattern baseline.
// ---------------------------------------------------------------------------

/// Top principal directions of the (uncentered) lumitexel matrix, each
/// rescaled to max-abs 1 as signed patterns.
pub fn pca_patterns(dataset: &Dataset, n_patterns: usize) -> Result<Vec<LightingPattern>> {
    let rows = dataset.train_count();
    if rows < n_patterns {
        return Err(Error::invalid_argument(format!(
            "dataset has {rows} training records, need at least {n_patterns}"
        )));
    }
    let l = dataset.num_leds;

    // Second-moment matrix in f64, accumulated in fixed chunk order.
    let chunk_rows = 2048usize;
    let starts: Vec<usize> = (0..rows).step_by(chunk_rows).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + chunk_rows).min(rows);
            let m = e - s;
            let x: Vec<f64> =
                dataset.full[s * l..e * l].iter().map(|v| *v as f64).collect();
            let mut g = vec![0.0f64; l * l];
            unsafe {
                matrixmultiply::dgemm(
                    l,
                    m,
                    l,
                    1.0,
                    x.as_ptr(),
                    1,
                    l as isize,
                    x.as_ptr(),
                    l as isize,
                    1,
                    0.0,
                    g.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            g
        })
        .collect();
    let mut moment = vec![0.0f64; l * l];
    for p in &partials {
        for i in 0..l * l {
            moment[i] += p[i];
        }
    }
    let inv = 1.0 / rows as f64;
    for v in moment.iter_mut() {
        *v *= inv;
    }

    // Block power iteration with Gram-Schmidt orthonormalization.
    let k = n_patterns;
    let mut q = vec![0.0f64; l * k];
    let mut rng = rng_from_seed(derive_seed(dataset.seed, &[0x9C]));
    for v in q.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    orthonormalize(&mut q, l, k)?;
    let mut z = vec![0.0f64; l * k];
    let mut eigvals = vec![0.0f64; k];
    for _ in 0..500 {
        // z = moment . q
        unsafe {
            matrixmultiply::dgemm(
                l,
                l,
                k,
                1.0,
                moment.as_ptr(),
                l as isize,
                1,
                q.as_ptr(),
                k as isize,
                1,
                0.0,
                z.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut new_eig = vec![0.0f64; k];
        for j in 0..k {
            let mut dot = 0.0;
            for i in 0..l {
                dot += q[i * k + j] * z[i * k + j];
            }
            new_eig[j] = dot;
        }
        std::mem::swap(&mut q, &mut z);
        orthonormalize(&mut q, l, k)?;
        let delta: f64 = new_eig
            .iter()
            .zip(&eigvals)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-30))
            .fold(0.0, f64::max);
        eigvals = new_eig;
        if delta < 1e-12 {
            break;
        }
    }

    // Order by descending eigenvalue and rank-check.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let top = eigvals[order[0]];
    if top <= 0.0 {
        return Err(Error::invalid_argument("lumitexel matrix is zero"));
    }
    for &j in &order {
        if eigvals[j] <= 1e-12 * top {
            return Err(Error::invalid_argument(format!(
                "lumitexel matrix rank is below {n_patterns}"
            )));
        }
    }

    let mut out = Vec::with_capacity(k);
    for &j in &order {
        let mut w: Vec<f64> = (0..l).map(|i| q[i * k + j]).collect();
        let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for v in w.iter_mut() {
            *v /= max_abs;
        }
        out.push(LightingPattern { weights: w, form: PatternForm::Signed });
    }
    Ok(out)
}

/// Modified Gram-Schmidt on the columns of a row-major (l x k) matrix.
fn orthonormalize(q: &mut [f64], l: usize, k: usize) -> Result<()> {
    for j in 0..k {
        for prev in 0..j {
            let mut dot = 0.0;
            for i in 0..l {
                dot += q[i * k + j] * q[i * k + prev];
            }
            for i in 0..l {
                q[i * k + j] -= dot * q[i * k + prev];
            }
        }
        let mut norm = 0.0;
        for i in 0..l {
            norm += q[i * k + j] * q[i * k + j];
        }
        let norm = norm.sqrt();
        if norm < 1e-14 {
            return Err(Error::invalid_argument("rank deficiency during orthonormalization"));
        }
        for i in 0..l {
            q[i * k + j] /= norm;
        }
    }
    Ok(())
}
