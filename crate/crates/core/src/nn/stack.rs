//! Fully-connected layer stacks with hand-written backpropagation.
//!
//! The layer vocabulary is fixed: fc, batchnorm, leaky ReLU, softmax,
//! dropout, softplus and multiplicative Gaussian noise. Stochastic layers
//! are active only in train mode and draw from an explicit generator, so a
//! forward pass is reproducible from its seed.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Fc { inp: usize, out: usize },
    Batchnorm { width: usize, momentum: f64 },
    LeakyRelu { leak: f64 },
    Softmax,
    Dropout { rate: f64 },
    Softplus,
    /// Elementwise multiplication by N(1, sigma) noise in train mode.
    MulNoise { sigma: f64 },
}

impl LayerSpec {
    fn width_out(&self, width_in: usize) -> Result<usize> {
        match self {
            LayerSpec::Fc { inp, out } => {
                if *inp != width_in {
                    return Err(Error::invalid_argument(format!(
                        "fc expects width {inp}, got {width_in}"
                    )));
                }
                Ok(*out)
            }
            LayerSpec::Batchnorm { width, .. } => {
                if *width != width_in {
                    return Err(Error::invalid_argument(format!(
                        "batchnorm expects width {width}, got {width_in}"
                    )));
                }
                Ok(width_in)
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::invalid_argument("dropout rate must be in [0, 1)"));
                }
                Ok(width_in)
            }
            _ => Ok(width_in),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub enum LayerState<T> {
    Fc { w: Tensor2<T>, b: Vec<T> },
    Batchnorm { gamma: Vec<T>, beta: Vec<T>, running_mean: Vec<T>, running_var: Vec<T> },
    Stateless,
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub state: LayerState<T>,
}

/// Per-layer cached values from a forward pass, consumed by backward.
pub enum LayerCache<T> {
    Fc { x: Tensor2<T> },
    BatchnormTrain { xhat: Tensor2<T>, inv_std: Vec<T> },
    BatchnormEval { xhat: Tensor2<T>, inv_std: Vec<T> },
    LeakyRelu { x: Tensor2<T> },
    Softmax { y: Tensor2<T> },
    Dropout { scaled_mask: Tensor2<T> },
    Identity,
    Softplus { x: Tensor2<T> },
    MulNoise { noise: Tensor2<T> },
}

/// Gradients for one layer's parameters, in the same order as the state.
#[derive(Debug, Clone)]
pub enum LayerGrads<T> {
    Fc { dw: Tensor2<T>, db: Vec<T> },
    Batchnorm { dgamma: Vec<T>, dbeta: Vec<T> },
    Stateless,
}

pub struct StackCache<T> {
    pub layers: Vec<LayerCache<T>>,
}

pub type StackGrads<T> = Vec<LayerGrads<T>>;

#[derive(Debug, Clone)]
pub struct Stack<T> {
    pub layers: Vec<Layer<T>>,
    pub width_in: usize,
    pub width_out: usize,
}

impl<T: Real> Stack<T> {
    /// Build a stack with zeroed fc weights; call [`Stack::xavier_init`] to
    /// randomize.
    pub fn new(width_in: usize, specs: &[LayerSpec]) -> Result<Self> {
        let mut width = width_in;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let next = spec.width_out(width)?;
            let state = match spec {
                LayerSpec::Fc { inp, out } => {
                    LayerState::Fc { w: Tensor2::zeros(*out, *inp), b: vec![T::zero(); *out] }
                }
                LayerSpec::Batchnorm { width, .. } => LayerState::Batchnorm {
                    gamma: vec![T::one(); *width],
                    beta: vec![T::zero(); *width],
                    running_mean: vec![T::zero(); *width],
                    running_var: vec![T::one(); *width],
                },
                _ => LayerState::Stateless,
            };
            layers.push(Layer { spec: *spec, state });
            width = next;
        }
        Ok(Stack { layers, width_in, width_out: width })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Xavier-uniform fc weights, zero biases; batchnorm scale one, shift zero.
    pub fn xavier_init(&mut self, rng: &mut ChaCha8Rng) {
        for layer in &mut self.layers {
            if let LayerState::Fc { w, b } = &mut layer.state {
                let (fan_out, fan_in) = (w.rows, w.cols);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in w.data.iter_mut() {
                    *v = T::from_f64(rng.random_range(-bound..=bound));
                }
                for v in b.iter_mut() {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.trainable_param_lens().iter().sum()
    }

    fn trainable_param_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        for layer in &self.layers {
            match &layer.state {
                LayerState::Fc { w, b } => {
                    lens.push(w.data.len());
                    lens.push(b.len());
                }
                LayerState::Batchnorm { gamma, beta, .. } => {
                    lens.push(gamma.len());
                    lens.push(beta.len());
                }
                LayerState::Stateless => {}
            }
        }
        lens
    }

    /// Mutable views of the trainable parameter arrays, in canonical order
    /// (per layer: fc weights, fc bias; batchnorm gamma, beta).
    pub fn param_arrays_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.state {
                LayerState::Fc { w, b } => {
                    out.push(w.data.as_mut_slice());
                    out.push(b.as_mut_slice());
                }
                LayerState::Batchnorm { gamma, beta, .. } => {
                    out.push(gamma.as_mut_slice());
                    out.push(beta.as_mut_slice());
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    pub fn param_arrays(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.layers {
            match &layer.state {
                LayerState::Fc { w, b } => {
                    out.push(w.data.as_slice());
                    out.push(b.as_slice());
                }
                LayerState::Batchnorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    /// Flatten gradients to match [`Stack::param_arrays_mut`] ordering.
    pub fn grad_arrays(grads: &StackGrads<T>) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for g in grads {
            match g {
                LayerGrads::Fc { dw, db } => {
                    out.push(dw.data.as_slice());
                    out.push(db.as_slice());
                }
                LayerGrads::Batchnorm { dgamma, dbeta } => {
                    out.push(dgamma.as_slice());
                    out.push(dbeta.as_slice());
                }
                LayerGrads::Stateless => {}
            }
        }
        out
    }

    /// Forward pass. Train mode updates batchnorm running statistics and
    /// requires a generator when stochastic layers are present. Returns the
    /// output and, when requested, the cache for a later backward pass.
    pub fn forward(
        &mut self,
        input: &Tensor2<T>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        want_cache: bool,
    ) -> Result<(Tensor2<T>, Option<StackCache<T>>)> {
        if input.cols != self.width_in {
            return Err(Error::invalid_argument(format!(
                "stack expects input width {}, got {}",
                self.width_in, input.cols
            )));
        }
        let mut x = input.clone();
        let mut caches = if want_cache { Vec::with_capacity(self.layers.len()) } else { Vec::new() };
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let (y, cache) = layer.forward(&x, mode, rng.as_deref_mut(), want_cache)?;
            if let Some(pos) = y.first_nonfinite() {
                return Err(Error::numeric(format!(
                    "non-finite activation at layer {li} (flat index {pos})"
                )));
            }
            if want_cache {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x, want_cache.then_some(StackCache { layers: caches })))
    }

    /// Eval-mode forward without mutation; pure function of the input.
    pub fn forward_eval(
        &self,
        input: &Tensor2<T>,
        want_cache: bool,
    ) -> Result<(Tensor2<T>, Option<StackCache<T>>)> {
        if input.cols != self.width_in {
            return Err(Error::invalid_argument(format!(
                "stack expects input width {}, got {}",
                self.width_in, input.cols
            )));
        }
        let mut x = input.clone();
        let mut caches = if want_cache { Vec::with_capacity(self.layers.len()) } else { Vec::new() };
        for (li, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward_immutable(&x, want_cache)?;
            if let Some(pos) = y.first_nonfinite() {
                return Err(Error::numeric(format!(
                    "non-finite activation at layer {li} (flat index {pos})"
                )));
            }
            if want_cache {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x, want_cache.then_some(StackCache { layers: caches })))
    }

    /// Backward pass from cached activations. Returns parameter gradients
    /// (unless skipped for frozen stacks) and the input gradient.
    pub fn backward(
        &self,
        cache: &StackCache<T>,
        output_grad: &Tensor2<T>,
        want_param_grads: bool,
    ) -> Result<(Option<StackGrads<T>>, Tensor2<T>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::invalid_state("cache does not match stack layers"));
        }
        let mut g = output_grad.clone();
        let mut grads: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(cache.layers.iter()).rev() {
            let (pg, gx) = layer.backward(lc, &g, want_param_grads);
            if want_param_grads {
                grads.push(pg);
            }
            g = gx;
        }
        grads.reverse();
        Ok((want_param_grads.then_some(grads), g))
    }
}

impl<T: Real> Layer<T> {
    fn forward(
        &mut self,
        x: &Tensor2<T>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        want_cache: bool,
    ) -> Result<(Tensor2<T>, LayerCache<T>)> {
        match (&mut self.state, self.spec) {
            (LayerState::Fc { w, b }, _) => Ok(fc_forward(x, w, b, want_cache)),
            (LayerState::Batchnorm { gamma, beta, running_mean, running_var }, spec) => {
                let momentum = match spec {
                    LayerSpec::Batchnorm { momentum, .. } => momentum,
                    _ => unreachable!(),
                };
                match mode {
                    Mode::Train => Ok(bn_forward_train(
                        x,
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        momentum,
                    )),
                    Mode::Eval => Ok(bn_forward_eval(x, gamma, beta, running_mean, running_var)),
                }
            }
            (LayerState::Stateless, spec) => stateless_forward(x, spec, mode, rng),
        }
    }

    fn forward_immutable(
        &self,
        x: &Tensor2<T>,
        want_cache: bool,
    ) -> Result<(Tensor2<T>, LayerCache<T>)> {
        match (&self.state, self.spec) {
            (LayerState::Fc { w, b }, _) => Ok(fc_forward(x, w, b, want_cache)),
            (LayerState::Batchnorm { gamma, beta, running_mean, running_var }, _) => {
                Ok(bn_forward_eval(x, gamma, beta, running_mean, running_var))
            }
            (LayerState::Stateless, spec) => stateless_forward(x, spec, Mode::Eval, None),
        }
    }

    fn backward(
        &self,
        cache: &LayerCache<T>,
        g: &Tensor2<T>,
        want_param_grads: bool,
    ) -> (LayerGrads<T>, Tensor2<T>) {
        match (&self.state, cache) {
            (LayerState::Fc { w, .. }, LayerCache::Fc { x }) => {
                let gx = g.matmul_w(w);
                let pg = if want_param_grads {
                    let dw = Tensor2::grad_wt(g, x);
                    let mut db = vec![T::zero(); g.cols];
                    for r in 0..g.rows {
                        for (c, db_c) in db.iter_mut().enumerate() {
                            *db_c = *db_c + g.get(r, c);
                        }
                    }
                    LayerGrads::Fc { dw, db }
                } else {
                    LayerGrads::Stateless
                };
                (pg, gx)
            }
            (
                LayerState::Batchnorm { gamma, .. },
                LayerCache::BatchnormTrain { xhat, inv_std },
            ) => bn_backward_train(g, gamma, xhat, inv_std, want_param_grads),
            (
                LayerState::Batchnorm { gamma, .. },
                LayerCache::BatchnormEval { xhat, inv_std },
            ) => bn_backward_eval(g, gamma, xhat, inv_std, want_param_grads),
            (_, LayerCache::LeakyRelu { x }) => {
                let leak = match self.spec {
                    LayerSpec::LeakyRelu { leak } => T::from_f64(leak),
                    _ => unreachable!(),
                };
                let mut gx = g.clone();
                for (gv, xv) in gx.data.iter_mut().zip(&x.data) {
                    if *xv < T::zero() {
                        *gv = *gv * leak;
                    }
                }
                (LayerGrads::Stateless, gx)
            }
            (_, LayerCache::Softmax { y }) => {
                let mut gx = Tensor2::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let dot: T = (0..g.cols)
                        .map(|c| g.get(r, c) * y.get(r, c))
                        .fold(T::zero(), |a, b| a + b);
                    for c in 0..g.cols {
                        gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                (LayerGrads::Stateless, gx)
            }
            (_, LayerCache::Dropout { scaled_mask }) => {
                let mut gx = g.clone();
                for (gv, m) in gx.data.iter_mut().zip(&scaled_mask.data) {
                    *gv = *gv * *m;
                }
                (LayerGrads::Stateless, gx)
            }
            (_, LayerCache::Softplus { x }) => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data.iter_mut().zip(&x.data) {
                    *gv = *gv * sigmoid(*xv);
                }
                (LayerGrads::Stateless, gx)
            }
            (_, LayerCache::MulNoise { noise }) => {
                let mut gx = g.clone();
                for (gv, n) in gx.data.iter_mut().zip(&noise.data) {
                    *gv = *gv * *n;
                }
                (LayerGrads::Stateless, gx)
            }
            (_, LayerCache::Identity) => (LayerGrads::Stateless, g.clone()),
            _ => unreachable!("cache kind does not match layer"),
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn fc_forward<T: Real>(
    x: &Tensor2<T>,
    w: &Tensor2<T>,
    b: &[T],
    want_cache: bool,
) -> (Tensor2<T>, LayerCache<T>) {
    let mut y = x.matmul_wt(w);
    for r in 0..y.rows {
        let row = y.row_mut(r);
        for (v, bb) in row.iter_mut().zip(b) {
            *v = *v + *bb;
        }
    }
    let cache = if want_cache { LayerCache::Fc { x: x.clone() } } else { LayerCache::Identity };
    (y, cache)
}

fn bn_forward_train<T: Real>(
    x: &Tensor2<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    momentum: f64,
) -> (Tensor2<T>, LayerCache<T>) {
    let n = x.rows;
    let w = x.cols;
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(BN_EPS);
    let mut mean = vec![T::zero(); w];
    let mut var = vec![T::zero(); w];
    for r in 0..n {
        let row = x.row(r);
        for (c, m) in mean.iter_mut().enumerate() {
            *m = *m + row[c];
        }
    }
    for m in mean.iter_mut() {
        *m = *m / nf;
    }
    for r in 0..n {
        let row = x.row(r);
        for (c, v) in var.iter_mut().enumerate() {
            let d = row[c] - mean[c];
            *v = *v + d * d;
        }
    }
    for v in var.iter_mut() {
        *v = *v / nf;
    }

    let mom = T::from_f64(momentum);
    let one_minus = T::from_f64(1.0 - momentum);
    // Running variance tracks the unbiased estimate.
    let unbias = if n > 1 { T::from_f64(n as f64 / (n as f64 - 1.0)) } else { T::one() };
    for c in 0..w {
        running_mean[c] = mom * running_mean[c] + one_minus * mean[c];
        running_var[c] = mom * running_var[c] + one_minus * var[c] * unbias;
    }

    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = Tensor2::zeros(n, w);
    let mut y = Tensor2::zeros(n, w);
    for r in 0..n {
        for c in 0..w {
            let h = (x.get(r, c) - mean[c]) * inv_std[c];
            xhat.set(r, c, h);
            y.set(r, c, gamma[c] * h + beta[c]);
        }
    }
    (y, LayerCache::BatchnormTrain { xhat, inv_std })
}

fn bn_forward_eval<T: Real>(
    x: &Tensor2<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor2<T>, LayerCache<T>) {
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = Tensor2::zeros(x.rows, x.cols);
    let mut y = Tensor2::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for c in 0..x.cols {
            let h = (x.get(r, c) - running_mean[c]) * inv_std[c];
            xhat.set(r, c, h);
            y.set(r, c, gamma[c] * h + beta[c]);
        }
    }
    (y, LayerCache::BatchnormEval { xhat, inv_std })
}

fn bn_backward_train<T: Real>(
    g: &Tensor2<T>,
    gamma: &[T],
    xhat: &Tensor2<T>,
    inv_std: &[T],
    want_param_grads: bool,
) -> (LayerGrads<T>, Tensor2<T>) {
    let n = g.rows;
    let w = g.cols;
    let nf = T::from_f64(n as f64);
    let mut dgamma = vec![T::zero(); w];
    let mut dbeta = vec![T::zero(); w];
    let mut sum_dxhat = vec![T::zero(); w];
    let mut sum_dxhat_xhat = vec![T::zero(); w];
    for r in 0..n {
        for c in 0..w {
            let gv = g.get(r, c);
            let h = xhat.get(r, c);
            dgamma[c] = dgamma[c] + gv * h;
            dbeta[c] = dbeta[c] + gv;
            let dxh = gv * gamma[c];
            sum_dxhat[c] = sum_dxhat[c] + dxh;
            sum_dxhat_xhat[c] = sum_dxhat_xhat[c] + dxh * h;
        }
    }
    let mut gx = Tensor2::zeros(n, w);
    for r in 0..n {
        for c in 0..w {
            let dxh = g.get(r, c) * gamma[c];
            let h = xhat.get(r, c);
            let v = inv_std[c] / nf * (nf * dxh - sum_dxhat[c] - h * sum_dxhat_xhat[c]);
            gx.set(r, c, v);
        }
    }
    let pg = if want_param_grads {
        LayerGrads::Batchnorm { dgamma, dbeta }
    } else {
        LayerGrads::Stateless
    };
    (pg, gx)
}

fn bn_backward_eval<T: Real>(
    g: &Tensor2<T>,
    gamma: &[T],
    xhat: &Tensor2<T>,
    inv_std: &[T],
    want_param_grads: bool,
) -> (LayerGrads<T>, Tensor2<T>) {
    let mut gx = Tensor2::zeros(g.rows, g.cols);
    for r in 0..g.rows {
        for c in 0..g.cols {
            gx.set(r, c, g.get(r, c) * gamma[c] * inv_std[c]);
        }
    }
    let pg = if want_param_grads {
        let mut dgamma = vec![T::zero(); g.cols];
        let mut dbeta = vec![T::zero(); g.cols];
        for r in 0..g.rows {
            for c in 0..g.cols {
                dgamma[c] = dgamma[c] + g.get(r, c) * xhat.get(r, c);
                dbeta[c] = dbeta[c] + g.get(r, c);
            }
        }
        LayerGrads::Batchnorm { dgamma, dbeta }
    } else {
        LayerGrads::Stateless
    };
    (pg, gx)
}

fn stateless_forward<T: Real>(
    x: &Tensor2<T>,
    spec: LayerSpec,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor2<T>, LayerCache<T>)> {
    match spec {
        LayerSpec::LeakyRelu { leak } => {
            let lk = T::from_f64(leak);
            let mut y = x.clone();
            for v in y.data.iter_mut() {
                if *v < T::zero() {
                    *v = *v * lk;
                }
            }
            Ok((y, LayerCache::LeakyRelu { x: x.clone() }))
        }
        LayerSpec::Softmax => {
            let mut y = Tensor2::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let row = x.row(r);
                let max = row.iter().fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
                let mut sum = T::zero();
                for c in 0..x.cols {
                    let e = (row[c] - max).exp();
                    y.set(r, c, e);
                    sum = sum + e;
                }
                for c in 0..x.cols {
                    y.set(r, c, y.get(r, c) / sum);
                }
            }
            Ok((y.clone(), LayerCache::Softmax { y }))
        }
        LayerSpec::Dropout { rate } => match mode {
            Mode::Eval => Ok((x.clone(), LayerCache::Identity)),
            Mode::Train => {
                let rng = rng.ok_or_else(|| {
                    Error::invalid_state("dropout in train mode needs a generator")
                })?;
                let keep = 1.0 - rate;
                // One u32 draw per unit: keep iff draw < keep * 2^32.
                let threshold = (keep * 4_294_967_296.0).min(u32::MAX as f64) as u32;
                let scale = T::from_f64(1.0 / keep);
                let mut mask = Tensor2::zeros(x.rows, x.cols);
                let mut y = x.clone();
                for (i, v) in y.data.iter_mut().enumerate() {
                    if rng.next_u32() < threshold {
                        mask.data[i] = scale;
                        *v = *v * scale;
                    } else {
                        *v = T::zero();
                    }
                }
                Ok((y, LayerCache::Dropout { scaled_mask: mask }))
            }
        },
        LayerSpec::Softplus => {
            let mut y = x.clone();
            for v in y.data.iter_mut() {
                *v = softplus(*v);
            }
            Ok((y, LayerCache::Softplus { x: x.clone() }))
        }
        LayerSpec::MulNoise { sigma } => match mode {
            Mode::Eval => Ok((x.clone(), LayerCache::Identity)),
            Mode::Train => {
                let rng = rng.ok_or_else(|| {
                    Error::invalid_state("noise layer in train mode needs a generator")
                })?;
                let s = T::from_f64(sigma);
                let mut noise = Tensor2::zeros(x.rows, x.cols);
                let mut y = x.clone();
                for (i, v) in y.data.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let f = T::one() + s * T::from_f64(z);
                    noise.data[i] = f;
                    *v = *v * f;
                }
                Ok((y, LayerCache::MulNoise { noise }))
            }
        },
        _ => unreachable!("stateless forward on stateful layer"),
    }
}

fn softplus<T: Real>(x: T) -> T {
    let hi = T::from_f64(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn identity_fc_in_eval_mode_passes_input_through() {
        let mut stack: Stack<f64> =
            Stack::new(3, &[LayerSpec::Fc { inp: 3, out: 3 }]).unwrap();
        if let LayerState::Fc { w, .. } = &mut stack.layers[0].state {
            for i in 0..3 {
                w.set(i, i, 1.0);
            }
        }
        let x = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let (y, _) = stack.forward_eval(&x, false).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut stack: Stack<f64> =
            Stack::new(2, &[LayerSpec::LeakyRelu { leak: 0.01 }]).unwrap();
        let x = Tensor2::from_vec(1, 2, vec![-1.0, 2.0]);
        let (y, _) = stack.forward(&x, Mode::Eval, None, false).unwrap();
        assert_eq!(y.data, vec![-0.01, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut stack: Stack<f64> = Stack::new(4, &[LayerSpec::Softmax]).unwrap();
        let mut rng = rng_from_seed(5);
        let x = Tensor2::from_vec(8, 4, (0..32).map(|_| rng.random_range(-10.0..10.0)).collect());
        let (y, _) = stack.forward(&x, Mode::Eval, None, false).unwrap();
        for r in 0..8 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-7);
            assert!(y.row(r).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let err = Stack::<f32>::new(3, &[LayerSpec::Fc { inp: 4, out: 2 }]);
        assert!(err.is_err());
        let mut stack: Stack<f32> = Stack::new(3, &[LayerSpec::Fc { inp: 3, out: 2 }]).unwrap();
        let x = Tensor2::zeros(1, 5);
        assert!(stack.forward(&x, Mode::Eval, None, false).is_err());
    }

    #[test]
    fn nan_input_reports_layer_index() {
        let mut stack: Stack<f64> = Stack::new(2, &[LayerSpec::Fc { inp: 2, out: 2 }]).unwrap();
        let x = Tensor2::from_vec(1, 2, vec![f64::NAN, 0.0]);
        let err = match stack.forward(&x, Mode::Eval, None, false) { Err(e) => e, Ok(_) => panic!("expected error") };
        assert!(format!("{err}").contains("layer 0"), "{err}");
    }

    #[test]
    fn dropout_fraction_and_inverted_scaling() {
        let rate = 0.3;
        let mut stack: Stack<f64> = Stack::new(1, &[LayerSpec::Dropout { rate }]).unwrap();
        let n = 100_000;
        let x = Tensor2::from_vec(n, 1, vec![1.0; n]);
        let mut rng = rng_from_seed(11);
        let (y, _) = stack.forward(&x, Mode::Train, Some(&mut rng), false).unwrap();
        let zeros = y.data.iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        let tol = 3.0 * (rate * (1.0 - rate) / n as f64).sqrt();
        assert!((frac - rate).abs() < tol, "dropped fraction {frac}");
        for v in &y.data {
            assert!(*v == 0.0 || (*v - 1.0 / (1.0 - rate)).abs() < 1e-12);
        }
        // Eval mode is the identity: no rescaling needed.
        let (ye, _) = stack.forward(&x, Mode::Eval, None, false).unwrap();
        assert_eq!(ye.data, x.data);
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let mut rng = rng_from_seed(3);
        let mut stack: Stack<f32> = Stack::new(
            6,
            &[
                LayerSpec::Fc { inp: 6, out: 8 },
                LayerSpec::Batchnorm { width: 8, momentum: 0.9 },
                LayerSpec::LeakyRelu { leak: 0.01 },
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::Fc { inp: 8, out: 3 },
                LayerSpec::Softmax,
            ],
        )
        .unwrap();
        stack.xavier_init(&mut rng);
        let x = Tensor2::from_vec(4, 6, (0..24).map(|i| (i as f32 * 0.37).sin()).collect());
        // Touch train mode first so running stats move off their defaults.
        let _ = stack.forward(&x, Mode::Train, Some(&mut rng), false).unwrap();
        let (a, _) = stack.forward_eval(&x, false).unwrap();
        let (b, _) = stack.forward_eval(&x, false).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn batchnorm_eval_tracks_train_statistics() {
        let mut stack: Stack<f64> =
            Stack::new(3, &[LayerSpec::Batchnorm { width: 3, momentum: 0.9 }]).unwrap();
        let mut rng = rng_from_seed(7);
        // Fixed synthetic stream: mean (1, -2, 0.5), std (0.5, 2.0, 1.0).
        let mu = [1.0, -2.0, 0.5];
        let sd = [0.5, 2.0, 1.0];
        for _ in 0..400 {
            let b = 512;
            let mut data = Vec::with_capacity(b * 3);
            for _ in 0..b {
                for c in 0..3 {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(mu[c] + sd[c] * z);
                }
            }
            let x = Tensor2::from_vec(b, 3, data);
            stack.forward(&x, Mode::Train, Some(&mut rng), false).unwrap();
        }
        // Eval on fresh data from the same stream: output should be near
        // standard normal per column (2% tolerance on mean/var over 20k).
        let n = 20_000;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            for c in 0..3 {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu[c] + sd[c] * z);
            }
        }
        let x = Tensor2::from_vec(n, 3, data);
        let (y, _) = stack.forward_eval(&x, false).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..n).map(|r| y.get(r, c)).sum::<f64>() / n as f64;
            let var: f64 = (0..n).map(|r| (y.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "col {c} mean {mean}");
            assert!((var - 1.0).abs() < 0.02 + 3.0 / (n as f64).sqrt(), "col {c} var {var}");
        }
    }
}
