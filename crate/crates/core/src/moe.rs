//! Gated mixture-of-experts reconstruction model.
//!
//! The trainable pieces: a lighting-pattern layer that maps a lumitexel to
//! its photometric measurements, log2(n) single-bit gating subnets whose
//! outputs factorize a probability over n decoders, and the decoders
//! themselves. A frozen latent-transform head (the post-bottleneck half of
//! a pretrained autoencoder) maps each decoder's latent code to a
//! diffuse/specular lumitexel pair. The whole thing is differentiable end
//! to end, so pattern weights are optimized jointly with the network.
//!
//! Forward/backward is generic over f32/f64: training runs in f32, the
//! gradient checks instantiate the identical code at f64.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, read_u32, read_u64, write_u32, write_u64};
use crate::nn::tensor::Real;
use crate::nn::{AdamConfig, AdamState, LayerSpec, Mode, Stack, StackCache, StackGrads, Tensor2};
use crate::seeding::{derive_seed, rng_from_seed};

/// Loss weights of the reconstruction objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_d: 1.0, lambda_s: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of specialized decoders; must be a power of two.
    pub n_decoders: usize,
    /// Trained (signed) lighting patterns; physically realized count is twice this.
    pub n_trained_patterns: usize,
    pub latent_dim: usize,
    /// Main LED count (specular lumitexel length).
    pub num_leds: usize,
    /// Coarse LED count (diffuse lumitexel length).
    pub num_diffuse_leds: usize,
    pub gating_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub softmax_noise_sigma: f64,
    pub dropout_rate: f64,
    pub measurement_noise_sigma: f64,
    /// Global scale applied to measurements before they enter the network.
    pub measurement_scale: f64,
    pub leak: f64,
    pub bn_momentum: f64,
    pub loss: LossWeights,
}

impl ModelConfig {
    pub fn desk(num_leds: usize, num_diffuse_leds: usize) -> Self {
        ModelConfig {
            n_decoders: 8,
            n_trained_patterns: 4,
            latent_dim: 128,
            num_leds,
            num_diffuse_leds,
            gating_hidden: vec![128, 128, 64, 32],
            decoder_hidden: vec![256; 6],
            head_hidden: vec![160, 192, 192, 192, 192, 192, 192, 192],
            encoder_hidden: vec![512, 384, 320, 256, 224, 192, 160],
            softmax_noise_sigma: 0.05,
            dropout_rate: 0.30,
            measurement_noise_sigma: 0.05,
            measurement_scale: 1.0,
            leak: 0.01,
            bn_momentum: 0.9,
            loss: LossWeights::default(),
        }
    }

    /// Tiny configuration for fast tests.
    pub fn tiny(num_leds: usize, num_diffuse_leds: usize, n_decoders: usize, patterns: usize) -> Self {
        ModelConfig {
            n_decoders,
            n_trained_patterns: patterns,
            latent_dim: 16,
            num_leds,
            num_diffuse_leds,
            gating_hidden: vec![24, 16],
            decoder_hidden: vec![32, 32],
            head_hidden: vec![24, 32],
            encoder_hidden: vec![48, 32],
            softmax_noise_sigma: 0.05,
            dropout_rate: 0.30,
            measurement_noise_sigma: 0.05,
            measurement_scale: 1.0,
            leak: 0.01,
            bn_momentum: 0.9,
            loss: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_decoders == 0 || !self.n_decoders.is_power_of_two() {
            return Err(Error::invalid_argument("n_decoders must be a power of two"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid_argument("latent_dim must be positive"));
        }
        if self.n_trained_patterns == 0 {
            return Err(Error::invalid_argument("need at least one trained pattern"));
        }
        if self.loss.lambda_d <= 0.0 || self.loss.lambda_s <= 0.0 {
            return Err(Error::invalid_argument("loss weights must be positive"));
        }
        Ok(())
    }

    pub fn num_bits(&self) -> usize {
        self.n_decoders.trailing_zeros() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.num_diffuse_leds + self.num_leds
    }

    fn hidden_block(&self, specs: &mut Vec<LayerSpec>, inp: usize, out: usize, dropout: bool) {
        specs.push(LayerSpec::Fc { inp, out });
        specs.push(LayerSpec::Batchnorm { width: out, momentum: self.bn_momentum });
        specs.push(LayerSpec::LeakyRelu { leak: self.leak });
        if dropout && self.dropout_rate > 0.0 {
            specs.push(LayerSpec::Dropout { rate: self.dropout_rate });
        }
    }

    /// One single-bit gating subnet: 5 fc layers ending in a 2-way softmax,
    /// with multiplicative noise on the softmax input in train mode.
    pub fn gating_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut w = self.n_trained_patterns;
        for &h in &self.gating_hidden {
            self.hidden_block(&mut specs, w, h, false);
            w = h;
        }
        specs.push(LayerSpec::Fc { inp: w, out: 2 });
        specs.push(LayerSpec::MulNoise { sigma: self.softmax_noise_sigma });
        specs.push(LayerSpec::Softmax);
        specs
    }

    /// One decoder: 7 fc layers from measurements to a latent code.
    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut w = self.n_trained_patterns;
        for &h in &self.decoder_hidden {
            self.hidden_block(&mut specs, w, h, true);
            w = h;
        }
        specs.push(LayerSpec::Fc { inp: w, out: self.latent_dim });
        specs
    }

    /// Latent-transform head: post-bottleneck half of the autoencoder,
    /// ending in softplus so predicted lumitexels are non-negative.
    pub fn head_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut w = self.latent_dim;
        for &h in &self.head_hidden {
            self.hidden_block(&mut specs, w, h, false);
            w = h;
        }
        specs.push(LayerSpec::Fc { inp: w, out: self.output_dim() });
        specs.push(LayerSpec::Softplus);
        specs
    }

    /// Autoencoder encoder: full lumitexel down to the latent bottleneck
    /// (linear at the bottleneck).
    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut w = self.num_leds;
        for &h in &self.encoder_hidden {
            self.hidden_block(&mut specs, w, h, false);
            w = h;
        }
        specs.push(LayerSpec::Fc { inp: w, out: self.latent_dim });
        specs
    }
}

/// Per-bit probabilities g(k) that the selected decoder's k-th index bit is 1.
#[derive(Debug, Clone)]
pub struct GatingOutput {
    pub bits: Vec<f64>,
}

/// Prediction of one decoder after the latent transform.
#[derive(Debug, Clone)]
pub struct DecoderPrediction {
    pub latent: Vec<f32>,
    pub diffuse: Vec<f32>,
    pub specular: Vec<f32>,
}

/// Probability that decoder `a` is selected, from the per-bit factorization.
pub fn decoder_probability(gating: &GatingOutput, a: usize) -> Result<f64> {
    let n = 1usize << gating.bits.len();
    if a >= n {
        return Err(Error::invalid_argument(format!("decoder index {a} out of range (n={n})")));
    }
    let mut p = 1.0;
    for (k, g) in gating.bits.iter().enumerate() {
        let bit = (a >> k) & 1;
        p *= if bit == 1 { *g } else { 1.0 - *g };
    }
    Ok(p)
}

/// Index of the most probable decoder. Because the distribution factorizes
/// over independent bits, the argmax is per-bit thresholding; a bit at
/// exactly 0.5 resolves to 0.
pub fn select_decoder(gating: &GatingOutput) -> usize {
    let mut a = 0usize;
    for (k, g) in gating.bits.iter().enumerate() {
        if *g > 0.5 {
            a |= 1 << k;
        }
    }
    a
}

/// The trained artifact: patterns, gating subnets, decoders and the frozen
/// latent-transform head.
#[derive(Debug, Clone)]
pub struct ModelBundle<T: Real = f32> {
    pub config: ModelConfig,
    /// Signed pattern weights, one row per trained pattern, clipped to [-1, 1].
    pub patterns: Tensor2<T>,
    pub gating: Vec<Stack<T>>,
    pub decoders: Vec<Stack<T>>,
    pub head: Stack<T>,
}

impl<T: Real> ModelBundle<T> {
    /// Fresh bundle with Xavier-initialized stacks and patterns. The head is
    /// typically replaced by a pretrained one before training.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut patterns = Tensor2::zeros(config.n_trained_patterns, config.num_leds);
        let bound = (6.0 / (config.num_leds + config.n_trained_patterns) as f64).sqrt();
        let mut prng = rng_from_seed(derive_seed(seed, &[0]));
        for v in patterns.data.iter_mut() {
            *v = T::from_f64(prng.random_range(-bound..=bound));
        }
        let mut gating = Vec::new();
        for k in 0..config.num_bits() {
            let mut s = Stack::new(config.n_trained_patterns, &config.gating_specs())?;
            s.xavier_init(&mut rng_from_seed(derive_seed(seed, &[1, k as u64])));
            gating.push(s);
        }
        let mut decoders = Vec::new();
        for a in 0..config.n_decoders {
            let mut s = Stack::new(config.n_trained_patterns, &config.decoder_specs())?;
            s.xavier_init(&mut rng_from_seed(derive_seed(seed, &[2, a as u64])));
            decoders.push(s);
        }
        let mut head = Stack::new(config.latent_dim, &config.head_specs())?;
        head.xavier_init(&mut rng_from_seed(derive_seed(seed, &[3])));
        Ok(ModelBundle { config, patterns, gating, decoders, head })
    }

    pub fn num_trainable_params(&self) -> usize {
        self.patterns.data.len()
            + self.gating.iter().map(|s| s.num_params()).sum::<usize>()
            + self.decoders.iter().map(|s| s.num_params()).sum::<usize>()
    }

    /// Encode a batch of lumitexels into measurements with the current
    /// signed patterns (noise-free differentiable stand-in for acquisition).
    pub fn encode_batch(&self, lumitexels: &Tensor2<T>) -> Result<Tensor2<T>> {
        if lumitexels.cols != self.config.num_leds {
            return Err(Error::invalid_argument(format!(
                "lumitexel length {} does not match device ({})",
                lumitexels.cols, self.config.num_leds
            )));
        }
        let mut meas = lumitexels.matmul_wt(&self.patterns);
        let s = T::from_f64(self.config.measurement_scale);
        if self.config.measurement_scale != 1.0 {
            for v in meas.data.iter_mut() {
                *v = *v * s;
            }
        }
        Ok(meas)
    }

    /// Clamp pattern weights into their signed range.
    pub fn clip_patterns(&mut self) {
        let one = T::one();
        for v in self.patterns.data.iter_mut() {
            if *v > one {
                *v = one;
            } else if *v < -one {
                *v = -one;
            }
        }
    }
}

impl ModelBundle<f32> {
    /// Single-lumitexel encode.
    pub fn encode(&self, lumitexel: &[f32]) -> Result<Vec<f32>> {
        let t = Tensor2::from_vec(1, lumitexel.len(), lumitexel.to_vec());
        Ok(self.encode_batch(&t)?.data)
    }

    /// Gating output for one measurement vector (eval mode, deterministic).
    pub fn gate(&self, measurements: &[f32]) -> Result<GatingOutput> {
        if measurements.len() != self.config.n_trained_patterns {
            return Err(Error::invalid_argument(format!(
                "expected {} measurements, got {}",
                self.config.n_trained_patterns,
                measurements.len()
            )));
        }
        let x = Tensor2::from_vec(1, measurements.len(), measurements.to_vec());
        let mut bits = Vec::with_capacity(self.gating.len());
        for stack in &self.gating {
            let (y, _) = stack.forward_eval(&x, false)?;
            bits.push(y.get(0, 0) as f64);
        }
        Ok(GatingOutput { bits })
    }

    /// Decode one measurement vector with decoder `a` (eval mode).
    pub fn decode(&self, measurements: &[f32], a: usize) -> Result<DecoderPrediction> {
        if a >= self.config.n_decoders {
            return Err(Error::invalid_argument(format!("decoder index {a} out of range")));
        }
        let x = Tensor2::from_vec(1, measurements.len(), measurements.to_vec());
        let (latent, _) = self.decoders[a].forward_eval(&x, false)?;
        let (out, _) = self.head.forward_eval(&latent, false)?;
        let d = self.config.num_diffuse_leds;
        Ok(DecoderPrediction {
            latent: latent.data,
            diffuse: out.data[..d].to_vec(),
            specular: out.data[d..].to_vec(),
        })
    }

    /// Signed patterns as lightstage types.
    pub fn lighting_patterns(&self) -> Vec<crate::lightstage::LightingPattern> {
        (0..self.patterns.rows)
            .map(|j| {
                crate::lightstage::LightingPattern {
                    weights: self.patterns.row(j).iter().map(|w| *w as f64).collect(),
                    form: crate::lightstage::PatternForm::Signed,
                }
            })
            .collect()
    }
}

/// Reconstruction error of one decoder's prediction against labels, the
/// bracketed term of the gated loss.
pub fn prediction_error(
    pred_d: &[f32],
    pred_s: &[f32],
    label_d: &[f32],
    label_s: &[f32],
    weights: &LossWeights,
) -> Result<f64> {
    let mut ed = 0.0f64;
    for (p, l) in pred_d.iter().zip(label_d) {
        let d = (*p - *l) as f64;
        ed += d * d;
    }
    let mut es = 0.0f64;
    for (p, l) in pred_s.iter().zip(label_s) {
        if *p <= -1.0 || *l <= -1.0 {
            return Err(Error::numeric("negative value inside log1p"));
        }
        let d = (*p as f64).ln_1p() - (*l as f64).ln_1p();
        es += d * d;
    }
    Ok(weights.lambda_d * ed + weights.lambda_s * es)
}

/// The gated loss for one sample: per-decoder errors weighted by the
/// factorized selection probabilities.
pub fn gated_loss(
    predictions: &[DecoderPrediction],
    label_diffuse: &[f32],
    label_specular: &[f32],
    gating: &GatingOutput,
    weights: &LossWeights,
) -> Result<f64> {
    let n = 1usize << gating.bits.len();
    if predictions.len() != n {
        return Err(Error::invalid_argument(format!(
            "expected {n} predictions, got {}",
            predictions.len()
        )));
    }
    let mut total = 0.0;
    for (a, pred) in predictions.iter().enumerate() {
        let pr = decoder_probability(gating, a)?;
        let e = prediction_error(&pred.diffuse, &pred.specular, label_diffuse, label_specular, weights)?;
        total += pr * e;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Batched forward/backward, generic over precision.
// ---------------------------------------------------------------------------

/// Pr(b, a) for a batch of gating outputs, LSB-first bits.
pub fn batch_probabilities<T: Real>(g: &Tensor2<T>, n: usize) -> Tensor2<T> {
    let b = g.rows;
    let one = T::one();
    let mut pr = Tensor2::zeros(b, n);
    for r in 0..b {
        for a in 0..n {
            let mut p = one;
            for k in 0..g.cols {
                let gv = g.get(r, k);
                p = p * if (a >> k) & 1 == 1 { gv } else { one - gv };
            }
            pr.set(r, a, p);
        }
    }
    pr
}

pub struct BatchLabels<'a, T: Real = f32> {
    pub diffuse: &'a Tensor2<T>,
    pub specular: &'a Tensor2<T>,
}

/// Gradients of one batch's gated loss for every trainable group.
pub struct ModelGrads<T: Real> {
    pub loss: f64,
    pub patterns: Option<Tensor2<T>>,
    pub gating: Vec<StackGrads<T>>,
    pub decoders: Vec<StackGrads<T>>,
}

struct EncodeCache<T: Real> {
    eps_pos: Tensor2<T>,
    eps_neg: Tensor2<T>,
}

fn encode_noisy<T: Real>(
    bundle: &ModelBundle<T>,
    lumitexels: &Tensor2<T>,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor2<T>, EncodeCache<T>) {
    let (bt, l) = (bundle.config.n_trained_patterns, bundle.config.num_leds);
    let b = lumitexels.rows;
    let zero = T::zero();
    let mut pos = Tensor2::zeros(bt, l);
    let mut neg = Tensor2::zeros(bt, l);
    for i in 0..bt * l {
        let w = bundle.patterns.data[i];
        if w >= zero {
            pos.data[i] = w;
        } else {
            neg.data[i] = -w;
        }
    }
    let pos_meas = lumitexels.matmul_wt(&pos);
    let neg_meas = lumitexels.matmul_wt(&neg);
    let mut eps_pos = Tensor2::zeros(b, bt);
    let mut eps_neg = Tensor2::zeros(b, bt);
    for i in 0..b * bt {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        eps_pos.data[i] = T::from_f64(1.0 + sigma * z1);
        eps_neg.data[i] = T::from_f64(1.0 + sigma * z2);
    }
    let scale = T::from_f64(bundle.config.measurement_scale);
    let mut meas = Tensor2::zeros(b, bt);
    for i in 0..b * bt {
        meas.data[i] =
            scale * (eps_pos.data[i] * pos_meas.data[i] - eps_neg.data[i] * neg_meas.data[i]);
    }
    (meas, EncodeCache { eps_pos, eps_neg })
}

fn encode_backward<T: Real>(
    bundle: &ModelBundle<T>,
    lumitexels: &Tensor2<T>,
    cache: &EncodeCache<T>,
    d_meas: &Tensor2<T>,
) -> Tensor2<T> {
    let (bt, l) = (bundle.config.n_trained_patterns, bundle.config.num_leds);
    let b = lumitexels.rows;
    let scale = T::from_f64(bundle.config.measurement_scale);
    // Per-branch upstream gradients, then one GEMM each.
    let mut a_pos = Tensor2::zeros(b, bt);
    let mut a_neg = Tensor2::zeros(b, bt);
    for i in 0..b * bt {
        let g = scale * d_meas.data[i];
        a_pos.data[i] = g * cache.eps_pos.data[i];
        a_neg.data[i] = g * cache.eps_neg.data[i];
    }
    let g_pos = Tensor2::grad_wt(&a_pos, lumitexels);
    let g_neg = Tensor2::grad_wt(&a_neg, lumitexels);
    let mut dw = Tensor2::zeros(bt, l);
    let zero = T::zero();
    for i in 0..bt * l {
        // Positive side owns w = 0 (subgradient choice).
        dw.data[i] = if bundle.patterns.data[i] >= zero { g_pos.data[i] } else { g_neg.data[i] };
    }
    dw
}

/// One batch's forward and (optionally) backward pass: encode with
/// acquisition noise, gate with softmax noise, decode with every decoder
/// through the frozen head, and form the probability-weighted loss. Noise
/// and dropout seeds derive from `master` in a fixed order, so the result
/// is reproducible independent of thread count.
pub fn gated_forward_backward<T: Real>(
    bundle: &mut ModelBundle<T>,
    batch_full: &Tensor2<T>,
    labels: &BatchLabels<T>,
    master: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<ModelGrads<T>> {
    let cfg = bundle.config.clone();
    let b = batch_full.rows;
    let n = cfg.n_decoders;
    let kbits = cfg.num_bits();
    let d_diff = cfg.num_diffuse_leds;
    let out_dim = cfg.output_dim();
    let one = T::one();
    let profile = std::env::var("LUMOE_PROFILE_STEP").is_ok();
    let mut tmark = std::time::Instant::now();
    let phase = |name: &str, tmark: &mut std::time::Instant| {
        if profile {
            eprintln!("  {name}: {:.2} ms", tmark.elapsed().as_secs_f64() * 1e3);
            *tmark = std::time::Instant::now();
        }
    };

    // Fixed-order seed draws: measurement noise, gating, decoders.
    let noise_seed = master.next_u64();
    let gate_seeds: Vec<u64> = (0..kbits).map(|_| master.next_u64()).collect();
    let dec_seeds: Vec<u64> = (0..n).map(|_| master.next_u64()).collect();

    // Encode with acquisition noise.
    let mut noise_rng = rng_from_seed(noise_seed);
    let (meas, enc_cache) =
        encode_noisy(bundle, batch_full, cfg.measurement_noise_sigma, &mut noise_rng);
    phase("encode", &mut tmark);

    // Gating forward.
    let mut g = Tensor2::zeros(b, kbits);
    let mut gate_caches: Vec<StackCache<T>> = Vec::with_capacity(kbits);
    for k in 0..kbits {
        let mut rng = rng_from_seed(gate_seeds[k]);
        let (y, cache) = bundle.gating[k].forward(&meas, Mode::Train, Some(&mut rng), true)?;
        for r in 0..b {
            g.set(r, k, y.get(r, 0));
        }
        gate_caches.push(cache.expect("cache"));
    }
    let pr = batch_probabilities(&g, n);
    phase("gating fwd", &mut tmark);

    // Decoder forwards in parallel.
    let dec_results: Vec<Result<(Tensor2<T>, StackCache<T>)>> = bundle
        .decoders
        .par_iter_mut()
        .enumerate()
        .map(|(a, stack)| {
            let mut rng = rng_from_seed(dec_seeds[a]);
            let (latent, cache) = stack.forward(&meas, Mode::Train, Some(&mut rng), true)?;
            Ok((latent, cache.expect("cache")))
        })
        .collect();
    let mut latents = Vec::with_capacity(n);
    let mut dec_caches = Vec::with_capacity(n);
    for r in dec_results {
        let (l, c) = r?;
        latents.push(l);
        dec_caches.push(c);
    }
    phase("decoders fwd", &mut tmark);

    // Concatenate latents (decoder-major) and push through the frozen head,
    // split into row chunks so both the GEMMs and the softplus spread over
    // the thread pool. Eval-mode batchnorm is per-feature, so chunking is
    // exact.
    let mut concat = Tensor2::zeros(n * b, cfg.latent_dim);
    for (a, latent) in latents.iter().enumerate() {
        concat.data[a * b * cfg.latent_dim..(a + 1) * b * cfg.latent_dim]
            .copy_from_slice(&latent.data);
    }
    let chunk_rows = (n * b).div_ceil(rayon::current_num_threads().max(1)).max(1);
    let head = &bundle.head;
    let head_chunks: Vec<Result<(Tensor2<T>, Option<StackCache<T>>)>> = concat
        .data
        .par_chunks(chunk_rows * cfg.latent_dim)
        .map(|rows| {
            let x = Tensor2::from_vec(rows.len() / cfg.latent_dim, cfg.latent_dim, rows.to_vec());
            head.forward_eval(&x, want_grads)
        })
        .collect();
    let mut preds = Tensor2::zeros(n * b, out_dim);
    let mut head_caches = Vec::new();
    {
        let mut at = 0usize;
        for c in head_chunks {
            let (y, cache) = c?;
            preds.data[at * out_dim..(at + y.rows) * out_dim].copy_from_slice(&y.data);
            at += y.rows;
            head_caches.push(cache);
        }
    }
    phase("head fwd", &mut tmark);

    // Loss and gradient w.r.t. predictions, parallel over decoders.
    let inv_b = T::from_f64(1.0 / b as f64);
    let ld = T::from_f64(cfg.loss.lambda_d);
    let ls = T::from_f64(cfg.loss.lambda_s);
    let two = T::from_f64(2.0);
    // Label log1p computed once, shared by every decoder block.
    let log_lab_s: Vec<T> = labels.specular.data.iter().map(|v| v.ln_1p()).collect();
    struct BlockOut<T> {
        err: Vec<T>,
        dpred: Option<Vec<T>>,
    }
    let blocks: Vec<BlockOut<T>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut err = vec![T::zero(); b];
            let mut dp = if want_grads { vec![T::zero(); b * out_dim] } else { Vec::new() };
            for r in 0..b {
                let row = preds.row(a * b + r);
                let lab_d = labels.diffuse.row(r);
                let lab_ls = &log_lab_s[r * cfg.num_leds..(r + 1) * cfg.num_leds];
                let w = pr.get(r, a) * inv_b;
                let mut ed = T::zero();
                let mut es = T::zero();
                if want_grads {
                    let drow = &mut dp[r * out_dim..(r + 1) * out_dim];
                    for c in 0..d_diff {
                        let d = row[c] - lab_d[c];
                        ed = ed + d * d;
                        drow[c] = w * ld * two * d;
                    }
                    for c in 0..cfg.num_leds {
                        let p = row[d_diff + c];
                        let dl = p.ln_1p() - lab_ls[c];
                        es = es + dl * dl;
                        drow[d_diff + c] = w * ls * two * dl / (one + p);
                    }
                } else {
                    for c in 0..d_diff {
                        let d = row[c] - lab_d[c];
                        ed = ed + d * d;
                    }
                    for c in 0..cfg.num_leds {
                        let dl = row[d_diff + c].ln_1p() - lab_ls[c];
                        es = es + dl * dl;
                    }
                }
                err[r] = ld * ed + ls * es;
            }
            BlockOut { err, dpred: want_grads.then_some(dp) }
        })
        .collect();
    let mut e = Tensor2::zeros(b, n);
    let mut dpred = if want_grads { Tensor2::zeros(n * b, out_dim) } else { Tensor2::zeros(0, 0) };
    let mut loss = 0.0f64;
    for (a, block) in blocks.into_iter().enumerate() {
        for r in 0..b {
            e.set(r, a, block.err[r]);
            loss += (pr.get(r, a) * block.err[r]).as_f64() / b as f64;
        }
        if let Some(dp) = block.dpred {
            dpred.data[a * b * out_dim..(a + 1) * b * out_dim].copy_from_slice(&dp);
        }
    }
    phase("loss+dpred", &mut tmark);
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite training loss"));
    }
    if !want_grads {
        return Ok(ModelGrads { loss, patterns: None, gating: Vec::new(), decoders: Vec::new() });
    }

    // Backward through the frozen head (input gradient only), chunked the
    // same way as the forward.
    let head = &bundle.head;
    let back_chunks: Vec<Result<Tensor2<T>>> = head_caches
        .par_iter()
        .enumerate()
        .map(|(ci, cache)| {
            let cache = cache.as_ref().expect("cache");
            let rows0 = ci * chunk_rows;
            let rows1 = ((ci + 1) * chunk_rows).min(n * b);
            let dy = Tensor2::from_vec(
                rows1 - rows0,
                out_dim,
                dpred.data[rows0 * out_dim..rows1 * out_dim].to_vec(),
            );
            let (_, dx) = head.backward(cache, &dy, false)?;
            Ok(dx)
        })
        .collect();
    let mut dlatent = Tensor2::zeros(n * b, cfg.latent_dim);
    {
        let mut at = 0usize;
        for c in back_chunks {
            let dx = c?;
            dlatent.data[at * cfg.latent_dim..(at + dx.rows) * cfg.latent_dim]
                .copy_from_slice(&dx.data);
            at += dx.rows;
        }
    }
    phase("head bwd", &mut tmark);

    // Decoder backwards in parallel.
    let dec_grads: Vec<Result<(StackGrads<T>, Tensor2<T>)>> = bundle
        .decoders
        .par_iter()
        .enumerate()
        .map(|(a, stack)| {
            let mut dy = Tensor2::zeros(b, cfg.latent_dim);
            dy.data
                .copy_from_slice(&dlatent.data[a * b * cfg.latent_dim..(a + 1) * b * cfg.latent_dim]);
            let (grads, dx) = stack.backward(&dec_caches[a], &dy, true)?;
            Ok((grads.expect("grads"), dx))
        })
        .collect();

    let mut d_meas = Tensor2::zeros(b, cfg.n_trained_patterns);
    let mut decoder_grads = Vec::with_capacity(n);
    for r in dec_grads {
        let (grads, dx) = r?;
        for i in 0..d_meas.data.len() {
            d_meas.data[i] = d_meas.data[i] + dx.data[i];
        }
        decoder_grads.push(grads);
    }
    phase("decoders bwd", &mut tmark);

    // Gating backward: dL/dg(k) via the factorization derivative.
    let mut gating_grads = Vec::with_capacity(kbits);
    for k in 0..kbits {
        let mut dy = Tensor2::zeros(b, 2);
        for r in 0..b {
            let mut dg = 0.0f64;
            for a in 0..n {
                // dPr(a)/dg(k) = (2 a_k - 1) * prod_{j != k} [a_j g_j + (1-a_j)(1-g_j)]
                let mut prod = 1.0f64;
                for j in 0..kbits {
                    if j == k {
                        continue;
                    }
                    let gv = g.get(r, j).as_f64();
                    prod *= if (a >> j) & 1 == 1 { gv } else { 1.0 - gv };
                }
                let sign = if (a >> k) & 1 == 1 { 1.0 } else { -1.0 };
                dg += e.get(r, a).as_f64() / b as f64 * sign * prod;
            }
            dy.set(r, 0, T::from_f64(dg));
        }
        let (grads, dx) = bundle.gating[k].backward(&gate_caches[k], &dy, true)?;
        for i in 0..d_meas.data.len() {
            d_meas.data[i] = d_meas.data[i] + dx.data[i];
        }
        gating_grads.push(grads.expect("grads"));
    }

    // Pattern gradient.
    let dw = encode_backward(bundle, batch_full, &enc_cache, &d_meas);
    phase("gating bwd + patterns", &mut tmark);

    Ok(ModelGrads { loss, patterns: Some(dw), gating: gating_grads, decoders: decoder_grads })
}

// ---------------------------------------------------------------------------
// Training step (f32) and evaluation.
// ---------------------------------------------------------------------------

pub struct StepStats {
    pub loss: f64,
}

/// Optimizer state for everything trainable in a bundle.
pub struct TrainerState {
    pub pattern_adam: AdamState<f32>,
    pub gating_adams: Vec<AdamState<f32>>,
    pub decoder_adams: Vec<AdamState<f32>>,
    pub iteration: u64,
    pub patterns_trainable: bool,
}

impl TrainerState {
    pub fn new(bundle: &mut ModelBundle<f32>, adam: AdamConfig, patterns_trainable: bool) -> Self {
        let pattern_adam = AdamState::new(adam, &[bundle.patterns.data.len()]);
        let gating_adams = bundle
            .gating
            .iter()
            .map(|s| {
                let lens: Vec<usize> = s.param_arrays().iter().map(|p| p.len()).collect();
                AdamState::new(adam, &lens)
            })
            .collect();
        let decoder_adams = bundle
            .decoders
            .iter()
            .map(|s| {
                let lens: Vec<usize> = s.param_arrays().iter().map(|p| p.len()).collect();
                AdamState::new(adam, &lens)
            })
            .collect();
        TrainerState { pattern_adam, gating_adams, decoder_adams, iteration: 0, patterns_trainable }
    }
}

/// One training iteration over a batch: forward/backward, Adam updates and
/// pattern clipping.
pub fn train_step(
    bundle: &mut ModelBundle<f32>,
    state: &mut TrainerState,
    batch_full: &Tensor2<f32>,
    labels: &BatchLabels<f32>,
    master: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let grads = gated_forward_backward(bundle, batch_full, labels, master, true)?;

    for (k, gg) in grads.gating.iter().enumerate() {
        let garrays = Stack::grad_arrays(gg);
        let mut params = bundle.gating[k].param_arrays_mut();
        state.gating_adams[k].step(&mut params, &garrays)?;
    }
    if state.patterns_trainable {
        let dw = grads.patterns.as_ref().expect("pattern grads");
        let mut arrays = [bundle.patterns.data.as_mut_slice()];
        state.pattern_adam.step(&mut arrays, &[dw.data.as_slice()])?;
        bundle.clip_patterns();
    }
    for (a, gg) in grads.decoders.iter().enumerate() {
        let garrays = Stack::grad_arrays(gg);
        let mut params = bundle.decoders[a].param_arrays_mut();
        state.decoder_adams[a].step(&mut params, &garrays)?;
    }

    state.iteration += 1;
    Ok(StepStats { loss: grads.loss })
}

/// Mean gated loss over a batch in eval mode (no noise, no dropout,
/// batchnorm running statistics).
pub fn eval_loss(bundle: &ModelBundle<f32>, full: &Tensor2<f32>, labels: &BatchLabels<f32>) -> Result<f64> {
    let cfg = &bundle.config;
    let b = full.rows;
    let n = cfg.n_decoders;
    let kbits = cfg.num_bits();
    let meas = bundle.encode_batch(full)?;
    let mut g = Tensor2::zeros(b, kbits);
    for k in 0..kbits {
        let (y, _) = bundle.gating[k].forward_eval(&meas, false)?;
        for r in 0..b {
            g.set(r, k, y.get(r, 0));
        }
    }
    let pr = batch_probabilities(&g, n);
    let errs = decoder_errors(bundle, &meas, labels)?;
    let mut loss = 0.0;
    for r in 0..b {
        for a in 0..n {
            loss += (pr.get(r, a) * errs.get(r, a)) as f64;
        }
    }
    Ok(loss / b as f64)
}

/// Per-sample, per-decoder reconstruction errors in eval mode.
pub fn decoder_errors(
    bundle: &ModelBundle<f32>,
    meas: &Tensor2<f32>,
    labels: &BatchLabels<f32>,
) -> Result<Tensor2<f32>> {
    let cfg = &bundle.config;
    let b = meas.rows;
    let n = cfg.n_decoders;
    let d_diff = cfg.num_diffuse_leds;
    let ld = cfg.loss.lambda_d as f32;
    let ls = cfg.loss.lambda_s as f32;
    let errs: Vec<Result<Vec<f32>>> = bundle
        .decoders
        .par_iter()
        .map(|stack| {
            let (latent, _) = stack.forward_eval(meas, false)?;
            let (preds, _) = bundle.head.forward_eval(&latent, false)?;
            let mut out = vec![0.0f32; b];
            for r in 0..b {
                let row = preds.row(r);
                let lab_d = labels.diffuse.row(r);
                let lab_s = labels.specular.row(r);
                let mut ed = 0.0f32;
                for c in 0..d_diff {
                    let d = row[c] - lab_d[c];
                    ed += d * d;
                }
                let mut es = 0.0f32;
                for c in 0..cfg.num_leds {
                    let dl = row[d_diff + c].ln_1p() - lab_s[c].ln_1p();
                    es += dl * dl;
                }
                out[r] = ld * ed + ls * es;
            }
            Ok(out)
        })
        .collect();
    let mut e = Tensor2::zeros(b, n);
    for (a, col) in errs.into_iter().enumerate() {
        let col = col?;
        for r in 0..b {
            e.set(r, a, col[r]);
        }
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Bundle checkpoints.
// ---------------------------------------------------------------------------

const BUNDLE_MAGIC: &[u8; 4] = b"MBDL";
const BUNDLE_VERSION: u32 = 1;

impl ModelBundle<f32> {
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        write_u32(w, BUNDLE_VERSION)?;
        let manifest = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        write_u32(w, manifest.len() as u32)?;
        w.write_all(&manifest)?;
        checkpoint::write_f32s(w, &self.patterns.data)?;
        for s in &self.gating {
            checkpoint::save_stack(w, s, &serde_json::Value::Null)?;
        }
        for s in &self.decoders {
            checkpoint::save_stack(w, s, &serde_json::Value::Null)?;
        }
        checkpoint::save_stack(w, &self.head, &serde_json::Value::Null)?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format("bad bundle magic".into()));
        }
        let version = read_u32(r)?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        let config: ModelConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        config.validate()?;
        let mut bundle = ModelBundle::new(config, 0)?;
        checkpoint::read_f32s(r, &mut bundle.patterns.data)?;
        for s in bundle.gating.iter_mut() {
            checkpoint::load_stack(r, s)?;
        }
        for s in bundle.decoders.iter_mut() {
            checkpoint::load_stack(r, s)?;
        }
        checkpoint::load_stack(r, &mut bundle.head)?;
        Ok(bundle)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        ModelBundle::load(&mut f)
    }
}

/// Full training checkpoint: bundle + optimizer moments + rng position.
pub struct TrainCheckpoint {
    pub bundle: ModelBundle<f32>,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub pattern_moments: (Vec<f32>, Vec<f32>, u64),
    pub gating_moments: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>, u64)>,
    pub decoder_moments: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>, u64)>,
    pub patterns_trainable: bool,
}

fn write_vecs(w: &mut impl Write, vecs: &[Vec<f32>]) -> Result<()> {
    write_u32(w, vecs.len() as u32)?;
    for v in vecs {
        write_u32(w, v.len() as u32)?;
        checkpoint::write_f32s(w, v)?;
    }
    Ok(())
}

fn read_vecs(r: &mut impl Read) -> Result<Vec<Vec<f32>>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut v = vec![0.0f32; len];
        checkpoint::read_f32s(r, &mut v)?;
        out.push(v);
    }
    Ok(out)
}

impl TrainCheckpoint {
    pub fn capture(
        bundle: &ModelBundle<f32>,
        state: &TrainerState,
        rng: &ChaCha8Rng,
        rng_seed: [u8; 32],
    ) -> Self {
        TrainCheckpoint {
            bundle: bundle.clone(),
            iteration: state.iteration,
            rng_seed,
            rng_word_pos: rng.get_word_pos(),
            pattern_moments: (
                state.pattern_adam.m[0].clone(),
                state.pattern_adam.v[0].clone(),
                state.pattern_adam.step,
            ),
            gating_moments: state
                .gating_adams
                .iter()
                .map(|a| (a.m.clone(), a.v.clone(), a.step))
                .collect(),
            decoder_moments: state
                .decoder_adams
                .iter()
                .map(|a| (a.m.clone(), a.v.clone(), a.step))
                .collect(),
            patterns_trainable: state.patterns_trainable,
        }
    }

    /// Restore optimizer state into a freshly built trainer for `bundle`.
    pub fn restore_state(
        &self,
        bundle: &mut ModelBundle<f32>,
        adam: AdamConfig,
    ) -> (TrainerState, ChaCha8Rng) {
        let mut state = TrainerState::new(bundle, adam, self.patterns_trainable);
        state.pattern_adam.m[0] = self.pattern_moments.0.clone();
        state.pattern_adam.v[0] = self.pattern_moments.1.clone();
        state.pattern_adam.step = self.pattern_moments.2;
        for (dst, src) in state.gating_adams.iter_mut().zip(&self.gating_moments) {
            dst.m = src.0.clone();
            dst.v = src.1.clone();
            dst.step = src.2;
        }
        for (dst, src) in state.decoder_adams.iter_mut().zip(&self.decoder_moments) {
            dst.m = src.0.clone();
            dst.v = src.1.clone();
            dst.step = src.2;
        }
        state.iteration = self.iteration;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        (state, rng)
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"MTCK")?;
        write_u32(w, 1)?;
        self.bundle.save(w)?;
        write_u64(w, self.iteration)?;
        w.write_all(&self.rng_seed)?;
        w.write_all(&self.rng_word_pos.to_le_bytes())?;
        write_u32(w, self.patterns_trainable as u32)?;
        write_vecs(w, std::slice::from_ref(&self.pattern_moments.0))?;
        write_vecs(w, std::slice::from_ref(&self.pattern_moments.1))?;
        write_u64(w, self.pattern_moments.2)?;
        write_u32(w, self.gating_moments.len() as u32)?;
        for (m, v, step) in &self.gating_moments {
            write_vecs(w, m)?;
            write_vecs(w, v)?;
            write_u64(w, *step)?;
        }
        write_u32(w, self.decoder_moments.len() as u32)?;
        for (m, v, step) in &self.decoder_moments {
            write_vecs(w, m)?;
            write_vecs(w, v)?;
            write_u64(w, *step)?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MTCK" {
            return Err(Error::Format("bad training checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format("unsupported training checkpoint version".into()));
        }
        let bundle = ModelBundle::load(r)?;
        let iteration = read_u64(r)?;
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let mut posb = [0u8; 16];
        r.read_exact(&mut posb)?;
        let rng_word_pos = u128::from_le_bytes(posb);
        let patterns_trainable = read_u32(r)? != 0;
        let pm = read_vecs(r)?.remove(0);
        let pv = read_vecs(r)?.remove(0);
        let pstep = read_u64(r)?;
        let ng = read_u32(r)? as usize;
        let mut gating_moments = Vec::with_capacity(ng);
        for _ in 0..ng {
            let m = read_vecs(r)?;
            let v = read_vecs(r)?;
            let step = read_u64(r)?;
            gating_moments.push((m, v, step));
        }
        let nd = read_u32(r)? as usize;
        let mut decoder_moments = Vec::with_capacity(nd);
        for _ in 0..nd {
            let m = read_vecs(r)?;
            let v = read_vecs(r)?;
            let step = read_u64(r)?;
            decoder_moments.push((m, v, step));
        }
        Ok(TrainCheckpoint {
            bundle,
            iteration,
            rng_seed,
            rng_word_pos,
            pattern_moments: (pm, pv, pstep),
            gating_moments,
            decoder_moments,
            patterns_trainable,
        })
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        TrainCheckpoint::load(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    fn tiny_bundle(seed: u64) -> ModelBundle<f32> {
        ModelBundle::new(ModelConfig::tiny(40, 12, 8, 3), seed).unwrap()
    }

    #[test]
    fn uniform_gating_gives_uniform_probabilities() {
        let g = GatingOutput { bits: vec![0.5; 3] };
        for a in 0..8 {
            assert!((decoder_probability(&g, a).unwrap() - 1.0 / 8.0).abs() < 1e-12);
        }
        assert!(decoder_probability(&g, 8).is_err());
    }

    #[test]
    fn deterministic_bits_pick_last_decoder() {
        let g = GatingOutput { bits: vec![1.0; 4] };
        assert_eq!(decoder_probability(&g, 15).unwrap(), 1.0);
        for a in 0..15 {
            assert_eq!(decoder_probability(&g, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn probabilities_match_bitwise_enumeration() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let bits: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let g = GatingOutput { bits: bits.clone() };
            for a in 0..8usize {
                // Brute force: explicit product over the three bits.
                let b0 = if a & 1 == 1 { bits[0] } else { 1.0 - bits[0] };
                let b1 = if (a >> 1) & 1 == 1 { bits[1] } else { 1.0 - bits[1] };
                let b2 = if (a >> 2) & 1 == 1 { bits[2] } else { 1.0 - bits[2] };
                let expect = b0 * b1 * b2;
                assert!((decoder_probability(&g, a).unwrap() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = rng_from_seed(6);
        for &n in &[2usize, 8, 128] {
            let kbits = n.trailing_zeros() as usize;
            for _ in 0..200 {
                let g = GatingOutput {
                    bits: (0..kbits).map(|_| rng.random_range(0.0..1.0)).collect(),
                };
                let total: f64 = (0..n).map(|a| decoder_probability(&g, a).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-6, "n={n} total={total}");
            }
        }
    }

    #[test]
    fn select_decoder_thresholds_bits() {
        let g = GatingOutput { bits: vec![0.9, 0.2, 0.6] };
        assert_eq!(select_decoder(&g), 0b101);
        // Exact 0.5 resolves to 0.
        let g = GatingOutput { bits: vec![0.5, 0.7] };
        assert_eq!(select_decoder(&g), 0b10);
    }

    #[test]
    fn select_matches_exhaustive_argmax() {
        let mut rng = rng_from_seed(7);
        for _ in 0..10_000 {
            let kbits = 3;
            let g = GatingOutput {
                bits: (0..kbits).map(|_| rng.random_range(0.0..1.0)).collect(),
            };
            let fast = select_decoder(&g);
            let mut best = 0;
            let mut best_p = -1.0;
            for a in 0..(1 << kbits) {
                let p = decoder_probability(&g, a).unwrap();
                if p > best_p {
                    best_p = p;
                    best = a;
                }
            }
            assert_eq!(fast, best);
        }
    }

    #[test]
    fn encode_one_hot_rows_select_entries() {
        let mut bundle = tiny_bundle(1);
        let l = bundle.config.num_leds;
        bundle.patterns = Tensor2::zeros(3, l);
        bundle.patterns.set(0, 4, 1.0);
        bundle.patterns.set(1, 17, 1.0);
        bundle.patterns.set(2, 30, 1.0);
        let mut rng = rng_from_seed(2);
        let lum: Vec<f32> = (0..l).map(|_| rng.random_range(0.0f32..2.0)).collect();
        let m = bundle.encode(&lum).unwrap();
        assert_eq!(m, vec![lum[4], lum[17], lum[30]]);
        let zeros = vec![0.0f32; l];
        assert!(bundle.encode(&zeros).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_decoders_give_identical_predictions() {
        let mut bundle = tiny_bundle(3);
        bundle.decoders[1] = bundle.decoders[0].clone();
        let meas = vec![0.3f32, -0.2, 0.7];
        let a = bundle.decode(&meas, 0).unwrap();
        let b = bundle.decode(&meas, 1).unwrap();
        assert_eq!(a.diffuse, b.diffuse);
        assert_eq!(a.specular, b.specular);
        assert_eq!(a.diffuse.len(), bundle.config.num_diffuse_leds);
        assert_eq!(a.specular.len(), bundle.config.num_leds);
    }

    #[test]
    fn gate_is_deterministic_in_eval_and_in_range() {
        let bundle = tiny_bundle(4);
        let meas = vec![0.5f32, 0.1, -0.4];
        let a = bundle.gate(&meas).unwrap();
        let b = bundle.gate(&meas).unwrap();
        assert_eq!(a.bits, b.bits);
        for g in &a.bits {
            assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn symmetric_softmax_inputs_give_half() {
        // A gating stack with all-zero final fc weights produces equal
        // softmax inputs, hence g = 0.5.
        let mut bundle = tiny_bundle(5);
        let stack = &mut bundle.gating[0];
        let last_fc = stack
            .layers
            .iter_mut()
            .rev()
            .find_map(|l| match &mut l.state {
                crate::nn::LayerState::Fc { w, b } => Some((w, b)),
                _ => None,
            })
            .unwrap();
        for v in last_fc.0.data.iter_mut() {
            *v = 0.0;
        }
        for v in last_fc.1.iter_mut() {
            *v = 0.0;
        }
        let g = bundle.gate(&[0.4, 0.2, -0.1]).unwrap();
        assert!((g.bits[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn gated_loss_zero_when_predictions_match_labels() {
        let cfg = ModelConfig::tiny(10, 4, 2, 2);
        let label_d = vec![0.5f32; 4];
        let label_s = vec![1.5f32; 10];
        let pred = DecoderPrediction {
            latent: vec![],
            diffuse: label_d.clone(),
            specular: label_s.clone(),
        };
        let g = GatingOutput { bits: vec![0.3] };
        let loss = gated_loss(&[pred.clone(), pred], &label_d, &label_s, &g, &cfg.loss).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn degenerate_gating_reduces_to_single_decoder_loss() {
        let cfg = ModelConfig::tiny(6, 3, 2, 2);
        let label_d = vec![0.2f32, 0.4, 0.1];
        let label_s = vec![0.9f32; 6];
        let p0 = DecoderPrediction {
            latent: vec![],
            diffuse: vec![0.25, 0.43, 0.12],
            specular: vec![1.1; 6],
        };
        let p1 = DecoderPrediction {
            latent: vec![],
            diffuse: vec![9.0; 3],
            specular: vec![9.0; 6],
        };
        let g = GatingOutput { bits: vec![0.0] };
        let loss = gated_loss(&[p0.clone(), p1], &label_d, &label_s, &g, &cfg.loss).unwrap();
        let direct =
            prediction_error(&p0.diffuse, &p0.specular, &label_d, &label_s, &cfg.loss).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn gated_loss_matches_direct_f64_evaluation() {
        let cfg = ModelConfig::tiny(8, 4, 4, 2);
        let mut rng = rng_from_seed(9);
        for _ in 0..20 {
            let label_d: Vec<f32> = (0..4).map(|_| rng.random_range(0.0f32..1.0)).collect();
            let label_s: Vec<f32> = (0..8).map(|_| rng.random_range(0.0f32..10.0)).collect();
            let preds: Vec<DecoderPrediction> = (0..4)
                .map(|_| DecoderPrediction {
                    latent: vec![],
                    diffuse: (0..4).map(|_| rng.random_range(0.0f32..1.0)).collect(),
                    specular: (0..8).map(|_| rng.random_range(0.0f32..10.0)).collect(),
                })
                .collect();
            let g = GatingOutput {
                bits: (0..2).map(|_| rng.random_range(0.0..1.0)).collect(),
            };
            let got = gated_loss(&preds, &label_d, &label_s, &g, &cfg.loss).unwrap();
            // Independent 64-bit transcription of the weighted objective.
            let mut expect = 0.0f64;
            for (a, p) in preds.iter().enumerate() {
                let b0 = if a & 1 == 1 { g.bits[0] } else { 1.0 - g.bits[0] };
                let b1 = if (a >> 1) & 1 == 1 { g.bits[1] } else { 1.0 - g.bits[1] };
                let mut ed = 0.0f64;
                for c in 0..4 {
                    ed += (p.diffuse[c] as f64 - label_d[c] as f64).powi(2);
                }
                let mut es = 0.0f64;
                for c in 0..8 {
                    es += ((1.0 + p.specular[c] as f64).ln() - (1.0 + label_s[c] as f64).ln())
                        .powi(2);
                }
                expect += b0 * b1 * (cfg.loss.lambda_d * ed + cfg.loss.lambda_s * es);
            }
            assert!((got - expect).abs() < 1e-9 * expect.max(1e-9), "{got} vs {expect}");
        }
    }

    #[test]
    fn gated_loss_rejects_values_below_minus_one() {
        let cfg = ModelConfig::tiny(2, 1, 2, 2);
        let pred = DecoderPrediction {
            latent: vec![],
            diffuse: vec![0.0],
            specular: vec![-1.5, 0.0],
        };
        let g = GatingOutput { bits: vec![0.5] };
        let err = gated_loss(&[pred.clone(), pred], &[0.0], &[0.0, 0.0], &g, &cfg.loss);
        assert!(matches!(err, Err(Error::NumericFailure(_))));
    }

    #[test]
    fn bundle_round_trips_through_checkpoint() {
        let bundle = tiny_bundle(11);
        let mut buf = Vec::new();
        bundle.save(&mut buf).unwrap();
        let loaded = ModelBundle::load(&mut buf.as_slice()).unwrap();
        assert_eq!(bundle.patterns.data, loaded.patterns.data);
        let meas = vec![0.2f32, -0.1, 0.5];
        let a = bundle.decode(&meas, 3).unwrap();
        let b = loaded.decode(&meas, 3).unwrap();
        assert_eq!(a.diffuse, b.diffuse);
        assert_eq!(a.specular, b.specular);
        let ga = bundle.gate(&meas).unwrap();
        let gb = loaded.gate(&meas).unwrap();
        assert_eq!(ga.bits, gb.bits);
    }

    #[test]
    fn train_step_runs_and_patterns_stay_clipped() {
        let mut bundle = tiny_bundle(13);
        let cfg = bundle.config.clone();
        let mut state = TrainerState::new(
            &mut bundle,
            AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() },
            true,
        );
        let mut master = rng_from_seed(100);
        let b = 10;
        let mut rng = rng_from_seed(200);
        let full = Tensor2::from_vec(
            b,
            cfg.num_leds,
            (0..b * cfg.num_leds).map(|_| rng.random_range(0.0f32..2.0)).collect(),
        );
        let labels_d = Tensor2::from_vec(
            b,
            cfg.num_diffuse_leds,
            (0..b * cfg.num_diffuse_leds).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        );
        let labels_s = Tensor2::from_vec(
            b,
            cfg.num_leds,
            (0..b * cfg.num_leds).map(|_| rng.random_range(0.0f32..3.0)).collect(),
        );
        let labels = BatchLabels { diffuse: &labels_d, specular: &labels_s };
        let mut losses = Vec::new();
        for _ in 0..30 {
            let stats = train_step(&mut bundle, &mut state, &full, &labels, &mut master).unwrap();
            losses.push(stats.loss);
            for v in &bundle.patterns.data {
                assert!(*v >= -1.0 && *v <= 1.0);
            }
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
    }

    #[test]
    fn train_steps_are_bitwise_reproducible() {
        let run = || -> Vec<f32> {
            let mut bundle = tiny_bundle(17);
            let cfg = bundle.config.clone();
            let mut state = TrainerState::new(&mut bundle, AdamConfig::default(), true);
            let mut master = rng_from_seed(55);
            let mut rng = rng_from_seed(66);
            let b = 6;
            let full = Tensor2::from_vec(
                b,
                cfg.num_leds,
                (0..b * cfg.num_leds).map(|_| rng.random_range(0.0f32..2.0)).collect(),
            );
            let labels_d = Tensor2::zeros(b, cfg.num_diffuse_leds);
            let labels_s = Tensor2::zeros(b, cfg.num_leds);
            let labels = BatchLabels { diffuse: &labels_d, specular: &labels_s };
            for _ in 0..5 {
                train_step(&mut bundle, &mut state, &full, &labels, &mut master).unwrap();
            }
            let mut out = bundle.patterns.data.clone();
            for s in &bundle.decoders {
                for p in s.param_arrays() {
                    out.extend_from_slice(p);
                }
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_probability_blocks_decoder_gradients() {
        // Force g(0) = 1 by saturating the softmax input, then check that
        // bit0=0 decoders receive exactly zero gradient.
        let cfg = ModelConfig::tiny(12, 5, 2, 2);
        let mut bundle = ModelBundle::<f32>::new(cfg.clone(), 21).unwrap();
        let last_fc = bundle.gating[0]
            .layers
            .iter_mut()
            .rev()
            .find_map(|l| match &mut l.state {
                crate::nn::LayerState::Fc { w, b } => Some((w, b)),
                _ => None,
            })
            .unwrap();
        for v in last_fc.0.data.iter_mut() {
            *v = 0.0;
        }
        last_fc.1[0] = 60.0;
        last_fc.1[1] = -60.0;

        let mut state = TrainerState::new(&mut bundle, AdamConfig::default(), true);
        let before: Vec<Vec<f32>> =
            bundle.decoders[0].param_arrays().iter().map(|p| p.to_vec()).collect();
        let mut master = rng_from_seed(77);
        let b = 4;
        let mut rng = rng_from_seed(88);
        let full = Tensor2::from_vec(
            b,
            cfg.num_leds,
            (0..b * cfg.num_leds).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        );
        let labels_d = Tensor2::zeros(b, cfg.num_diffuse_leds);
        let labels_s = Tensor2::zeros(b, cfg.num_leds);
        let labels = BatchLabels { diffuse: &labels_d, specular: &labels_s };
        train_step(&mut bundle, &mut state, &full, &labels, &mut master).unwrap();
        let after: Vec<Vec<f32>> =
            bundle.decoders[0].param_arrays().iter().map(|p| p.to_vec()).collect();
        for (b0, a0) in before.iter().zip(&after) {
            assert_eq!(b0, a0);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences_f64() {
        // The whole differentiable path (patterns -> gating -> decoders ->
        // frozen head -> gated loss) at 64-bit against central differences.
        let cfg = ModelConfig::tiny(16, 6, 2, 2);
        let mut bundle = ModelBundle::<f64>::new(cfg.clone(), 31).unwrap();
        let b = 4;
        let mut rng = rng_from_seed(41);
        let full = Tensor2::from_vec(
            b,
            cfg.num_leds,
            (0..b * cfg.num_leds).map(|_| rng.random_range(0.0f64..2.0)).collect(),
        );
        let labels_d = Tensor2::from_vec(
            b,
            cfg.num_diffuse_leds,
            (0..b * cfg.num_diffuse_leds).map(|_| rng.random_range(0.0f64..1.0)).collect(),
        );
        let labels_s = Tensor2::from_vec(
            b,
            cfg.num_leds,
            (0..b * cfg.num_leds).map(|_| rng.random_range(0.0f64..3.0)).collect(),
        );
        let labels = BatchLabels { diffuse: &labels_d, specular: &labels_s };
        let master_seed = 5150u64;

        let analytic = {
            let mut master = rng_from_seed(master_seed);
            gated_forward_backward(&mut bundle, &full, &labels, &mut master, true).unwrap()
        };
        let mut eval = |bundle: &mut ModelBundle<f64>| -> f64 {
            let mut master = rng_from_seed(master_seed);
            gated_forward_backward(bundle, &full, &labels, &mut master, false).unwrap().loss
        };

        let h = 1e-5;
        let rel = |a: f64, f: f64| -> f64 {
            let d = (a - f).abs();
            if d <= 1e-9 {
                0.0
            } else {
                d / a.abs().max(f.abs()).max(1e-12)
            }
        };
        let mut max_rel = 0.0f64;

        // Pattern weights (spot-check a grid; the full matrix is checked by
        // the acceptance suite).
        let dw = analytic.patterns.as_ref().unwrap();
        for idx in (0..bundle.patterns.data.len()).step_by(7) {
            let orig = bundle.patterns.data[idx];
            bundle.patterns.data[idx] = orig + h;
            let lp = eval(&mut bundle);
            bundle.patterns.data[idx] = orig - h;
            let lm = eval(&mut bundle);
            bundle.patterns.data[idx] = orig;
            max_rel = max_rel.max(rel(dw.data[idx], (lp - lm) / (2.0 * h)));
        }
        // Gating and decoder parameters (spot-check).
        for k in 0..bundle.gating.len() {
            let ga: Vec<Vec<f64>> = Stack::grad_arrays(&analytic.gating[k])
                .iter()
                .map(|s| s.to_vec())
                .collect();
            for ai in 0..ga.len() {
                for idx in (0..ga[ai].len()).step_by(13) {
                    let orig = bundle.gating[k].param_arrays()[ai][idx];
                    bundle.gating[k].param_arrays_mut()[ai][idx] = orig + h;
                    let lp = eval(&mut bundle);
                    bundle.gating[k].param_arrays_mut()[ai][idx] = orig - h;
                    let lm = eval(&mut bundle);
                    bundle.gating[k].param_arrays_mut()[ai][idx] = orig;
                    max_rel = max_rel.max(rel(ga[ai][idx], (lp - lm) / (2.0 * h)));
                }
            }
        }
        for a in 0..bundle.decoders.len() {
            let da: Vec<Vec<f64>> = Stack::grad_arrays(&analytic.decoders[a])
                .iter()
                .map(|s| s.to_vec())
                .collect();
            for ai in 0..da.len() {
                for idx in (0..da[ai].len()).step_by(29) {
                    let orig = bundle.decoders[a].param_arrays()[ai][idx];
                    bundle.decoders[a].param_arrays_mut()[ai][idx] = orig + h;
                    let lp = eval(&mut bundle);
                    bundle.decoders[a].param_arrays_mut()[ai][idx] = orig - h;
                    let lm = eval(&mut bundle);
                    bundle.decoders[a].param_arrays_mut()[ai][idx] = orig;
                    max_rel = max_rel.max(rel(da[ai][idx], (lp - lm) / (2.0 * h)));
                }
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
