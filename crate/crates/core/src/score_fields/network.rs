//! Small fully connected noise-prediction network trained by denoising score
//! matching, with hand-written reverse-mode gradients.
//!
//! The input is `(x, t/T)`; the output is the noise prediction `ε(x, t)`.
//! All parameters live in one flat vector, layer by layer, each layer storing
//! its row-major weight matrix followed by its bias.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use super::{check_input, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;
use crate::schedules::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Softplus,
}

impl Activation {
    fn apply<S: Real>(self, z: S) -> S {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (S::one() + (-z).exp()),
            Activation::Softplus => {
                if z > S::lit(30.0) {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    fn derivative<S: Real>(self, z: S) -> S {
        match self {
            Activation::Tanh => {
                let y = z.tanh();
                S::one() - y * y
            }
            Activation::Silu => {
                let sig = S::one() / (S::one() + (-z).exp());
                sig * (S::one() + z * (S::one() - sig))
            }
            Activation::Softplus => S::one() / (S::one() + (-z).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetwork<S> {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<S>,
}

/// Intermediate values of one forward pass.
struct Tape<S> {
    /// Input to each layer.
    inputs: Vec<Vec<S>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<S>>,
    output: Vec<S>,
}

impl<S: Real> ScoreNetwork<S> {
    /// Network for `dim`-dimensional data with the given hidden widths.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dim + 1);
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut params = Vec::with_capacity(param_count(&widths));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(S::lit(std * rng.sample::<f64, _>(StandardNormal)));
            }
            params.extend(std::iter::repeat_n(S::zero(), fan_out));
        }
        Ok(Self { widths, activation, params })
    }

    pub fn from_parts(widths: Vec<usize>, activation: Activation, params: Vec<S>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("network needs at least two positive layer widths".into()));
        }
        if widths[0] != widths[widths.len() - 1] + 1 {
            return Err(Error::InvalidParameter(format!(
                "input width {} must equal output width {} + 1 (time input)",
                widths[0],
                widths[widths.len() - 1]
            )));
        }
        check_dim(param_count(&widths), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self { widths, activation, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn params(&self) -> &[S] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }
    pub fn data_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// Raw network output for an input `(x, t/T)`.
    pub fn forward(&self, input: &[S]) -> Vec<S> {
        let n_layers = self.widths.len() - 1;
        let mut h = input.to_vec();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let last = l + 1 == n_layers;
            h = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = row.iter().zip(&h).fold(b[o], |acc, (&wi, &hi)| acc + wi * hi);
                    if last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
        }
        h
    }

    fn forward_tape(&self, input: &[S]) -> Tape<S> {
        let n_layers = self.widths.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut h = input.to_vec();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<S> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(&h).fold(b[o], |acc, (&wi, &hi)| acc + wi * hi)
                })
                .collect();
            inputs.push(std::mem::take(&mut h));
            if l + 1 == n_layers {
                h = z;
            } else {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
            }
        }
        Tape { inputs, pre, output: h }
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    fn backward(&self, tape: &Tape<S>, d_output: &[S], grad: &mut [S]) {
        let n_layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut g = d_output.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let h = &tape.inputs[l];
            for o in 0..fan_out {
                let go = g[o];
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (r, &hi) in row.iter_mut().zip(h) {
                    *r = *r + go * hi;
                }
                grad[off + fan_in * fan_out + o] = grad[off + fan_in * fan_out + o] + go;
            }
            if l > 0 {
                let w = &self.params[off..off + fan_in * fan_out];
                let z = &tape.pre[l - 1];
                g = (0..fan_in)
                    .map(|i| {
                        let back = (0..fan_out).fold(S::zero(), |acc, o| acc + w[o * fan_in + i] * g[o]);
                        back * self.activation.derivative(z[i])
                    })
                    .collect();
            }
        }
    }

    fn input_for(&self, x: &[S], t_normalized: S) -> Vec<S> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(t_normalized);
        input
    }

    /// Smallest time at which the learned field is evaluated; earlier times
    /// are clamped to it.
    pub fn time_floor(schedule: &NoiseSchedule<S>) -> S {
        schedule.t_min().max(S::lit(1e-3) * schedule.t_end())
    }

    /// Flat little-endian parameter blob preceded by a JSON header:
    /// `u32 header_len | header | params`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = std::mem::size_of::<S>();
        let header = serde_json::json!({
            "widths": self.widths,
            "activation": self.activation,
            "scalar_bytes": width,
            "param_count": self.params.len(),
        })
        .to_string();
        let mut out = Vec::with_capacity(4 + header.len() + width * self.params.len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in &self.params {
            if width == 4 {
                out.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&p.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            widths: Vec<usize>,
            activation: Activation,
            scalar_bytes: usize,
            param_count: usize,
        }
        let short = || Error::Serialization("network blob truncated".into());
        let len = u32::from_le_bytes(bytes.get(0..4).ok_or_else(short)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(bytes.get(4..4 + len).ok_or_else(short)?)?;
        if header.scalar_bytes != 4 && header.scalar_bytes != 8 {
            return Err(Error::Serialization(format!("unsupported scalar width {}", header.scalar_bytes)));
        }
        let body = &bytes[4 + len..];
        if body.len() != header.scalar_bytes * header.param_count {
            return Err(short());
        }
        let params = body
            .chunks_exact(header.scalar_bytes)
            .map(|c| {
                let v = if header.scalar_bytes == 4 {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(c.try_into().unwrap())
                };
                S::lit(v)
            })
            .collect();
        Self::from_parts(header.widths, header.activation, params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<S: Real> ScoreField<S> for ScoreNetwork<S> {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        check_input(self.data_dim(), x)?;
        schedule.check_time(t)?;
        let tc = t.max(Self::time_floor(schedule));
        let k = schedule.noise_scale(tc);
        let eps = self.forward(&self.input_for(x, tc / schedule.t_end()));
        Ok(eps.into_iter().map(|e| -e / k).collect())
    }

    fn eps(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        check_input(self.data_dim(), x)?;
        schedule.check_time(t)?;
        let tc = t.max(Self::time_floor(schedule));
        let eps = self.forward(&self.input_for(x, tc / schedule.t_end()));
        if tc == t {
            Ok(eps)
        } else {
            let ratio = schedule.noise_scale(t) / schedule.noise_scale(tc);
            Ok(eps.into_iter().map(|e| ratio * e).collect())
        }
    }
}

/// One denoising example: noisy input, normalized time, injected noise.
#[derive(Clone, Debug)]
pub struct DsmExample<S> {
    pub x_t: Vec<S>,
    pub t_normalized: S,
    pub eps: Vec<S>,
}

/// Minibatch DSM loss `mean_b ‖ε − ε_θ(x_t, t)‖²` and its parameter gradient.
pub fn dsm_loss_and_gradient<S: Real>(net: &ScoreNetwork<S>, batch: &[DsmExample<S>]) -> (S, Vec<S>) {
    let inv_b = S::one() / S::from_usize_lossy(batch.len().max(1));
    // Fixed chunking and an in-order reduction keep the result independent
    // of the thread count.
    let parts: Vec<(S, Vec<S>)> = batch
        .par_chunks(DSM_CHUNK)
        .map(|chunk| {
            let mut grad = vec![S::zero(); net.params.len()];
            let mut loss = S::zero();
            let two = S::lit(2.0);
            for ex in chunk {
                let tape = net.forward_tape(&net.input_for(&ex.x_t, ex.t_normalized));
                let resid: Vec<S> = tape.output.iter().zip(&ex.eps).map(|(&o, &e)| o - e).collect();
                loss = loss + resid.iter().map(|&r| r * r).sum::<S>() * inv_b;
                let d_out: Vec<S> = resid.iter().map(|&r| two * r * inv_b).collect();
                net.backward(&tape, &d_out, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = vec![S::zero(); net.params.len()];
    let mut loss = S::zero();
    for (l, g) in parts {
        loss = loss + l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    (loss, grad)
}

const DSM_CHUNK: usize = 16;

/// Loss trajectory of a training call.
#[derive(Clone, Debug, Default)]
pub struct DsmReport<S> {
    pub losses: Vec<S>,
}

impl<S: Real> DsmReport<S> {
    /// Mean of the losses in `[start, start + window)`.
    pub fn window_mean(&self, start: usize, window: usize) -> Option<S> {
        let end = (start + window).min(self.losses.len());
        (end > start).then(|| self.losses[start..end].iter().copied().sum::<S>() / S::from_usize_lossy(end - start))
    }
}

/// SGD-with-momentum trainer. Keeps its velocity between calls so repeated
/// short training bursts continue the same optimization.
#[derive(Clone, Debug)]
pub struct DsmTrainer<S> {
    pub learning_rate: S,
    pub momentum: S,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<S>,
    velocity: Vec<S>,
    steps_taken: usize,
}

impl<S: Real> DsmTrainer<S> {
    pub fn new(learning_rate: S, momentum: S, batch_size: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            batch_size,
            max_grad_norm: None,
            velocity: Vec::new(),
            steps_taken: 0,
        }
    }

    pub fn with_grad_clip(mut self, max_norm: S) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Performs `steps` minibatch updates on `samples` drawn from the data distribution.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        net: &mut ScoreNetwork<S>,
        samples: &[Vec<S>],
        schedule: &NoiseSchedule<S>,
        steps: usize,
        rng: &mut R,
    ) -> Result<DsmReport<S>> {
        if steps == 0 {
            return Ok(DsmReport::default());
        }
        if samples.is_empty() {
            return Err(Error::InvalidParameter("denoising score matching needs samples".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        let d = net.data_dim();
        for s in samples {
            check_dim(d, s.len())?;
        }
        if self.velocity.len() != net.params.len() {
            self.velocity = vec![S::zero(); net.params.len()];
        }
        let (t_lo, t_hi) = (schedule.t_min().as_f64(), schedule.t_max().as_f64());
        let t_end = schedule.t_end();
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch: Vec<DsmExample<S>> = (0..self.batch_size)
                .map(|_| {
                    let x0 = &samples[rng.random_range(0..samples.len())];
                    let t = S::lit(rng.random_range(t_lo..t_hi));
                    let eps: Vec<S> = (0..d).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect();
                    let x_t = schedule.perturb(x0, t, &eps).expect("time within schedule range");
                    DsmExample { x_t, t_normalized: t / t_end, eps }
                })
                .collect();
            let (loss, mut grad) = dsm_loss_and_gradient(net, &batch);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: self.steps_taken + step,
                    loss: loss.as_f64(),
                    batch: self.batch_size,
                });
            }
            if let Some(max_norm) = self.max_grad_norm {
                let norm = grad.iter().map(|&g| g * g).sum::<S>().sqrt();
                if norm > max_norm {
                    let scale = max_norm / norm;
                    grad.iter_mut().for_each(|g| *g = *g * scale);
                }
            }
            for ((p, v), g) in net.params.iter_mut().zip(&mut self.velocity).zip(&grad) {
                *v = self.momentum * *v - self.learning_rate * *g;
                *p = *p + *v;
            }
            losses.push(loss);
        }
        self.steps_taken += steps;
        Ok(DsmReport { losses })
    }
}

/// Trains a copy of `net` for `steps` updates with minibatch 128 and momentum 0.9.
pub fn train_dsm<S: Real, R: Rng + ?Sized>(
    samples: &[Vec<S>],
    schedule: &NoiseSchedule<S>,
    net: &ScoreNetwork<S>,
    steps: usize,
    learning_rate: S,
    rng: &mut R,
) -> Result<(ScoreNetwork<S>, DsmReport<S>)> {
    let mut trained = net.clone();
    let mut trainer = DsmTrainer::new(learning_rate, S::lit(0.9), 128);
    let report = trainer.train(&mut trained, samples, schedule, steps, rng)?;
    Ok((trained, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(activation: Activation) -> ScoreNetwork<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ScoreNetwork::new(2, &[8, 8], activation, &mut rng).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng) -> Vec<DsmExample<f64>> {
        (0..5)
            .map(|_| DsmExample {
                x_t: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                t_normalized: rng.random_range(0.0..1.0),
                eps: vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        for act in [Activation::Tanh, Activation::Silu, Activation::Softplus] {
            let net = small_net(act);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let b = batch(&mut rng);
            let (_, grad) = dsm_loss_and_gradient(&net, &b);
            let h = 1e-6;
            for i in 0..net.params.len() {
                let mut plus = net.clone();
                plus.params[i] += h;
                let mut minus = net.clone();
                minus.params[i] -= h;
                let fd = (dsm_loss_and_gradient(&plus, &b).0 - dsm_loss_and_gradient(&minus, &b).0) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "{act:?} param {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn zero_steps_leaves_network_unchanged() {
        let net = small_net(Activation::Silu);
        let s = NoiseSchedule::ve(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (trained, report) = train_dsm(&[vec![0.0, 0.0]], &s, &net, 0, 1e-3, &mut rng).unwrap();
        assert_eq!(trained, net);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn nan_loss_aborts() {
        let mut net = small_net(Activation::Tanh);
        net.params[0] = f64::NAN;
        let s = NoiseSchedule::ve(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = train_dsm(&[vec![0.0, 0.0]], &s, &net, 5, 1e-3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { step: 0, .. }));
    }

    #[test]
    fn rejects_bad_samples() {
        let net = small_net(Activation::Tanh);
        let s = NoiseSchedule::ve(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(train_dsm(&[], &s, &net, 1, 1e-3, &mut rng).is_err());
        assert!(train_dsm(&[vec![0.0]], &s, &net, 1, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn blob_roundtrip_and_truncation() {
        let net = small_net(Activation::Softplus);
        let bytes = net.to_bytes();
        assert_eq!(ScoreNetwork::<f64>::from_bytes(&bytes).unwrap(), net);
        assert!(ScoreNetwork::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let as32 = ScoreNetwork::<f32>::from_bytes(&bytes).unwrap();
        assert!((as32.params()[0] as f64 - net.params()[0]).abs() < 1e-6);
    }

    #[test]
    fn learned_eps_and_score_agree_above_floor() {
        let net = small_net(Activation::Silu);
        let s = NoiseSchedule::vp_linear(0.1, 20.0);
        let x = [0.3, -0.2];
        let eps = net.eps(&s, &x, 0.5).unwrap();
        let score = net.score(&s, &x, 0.5).unwrap();
        let k = s.noise_scale(0.5);
        for j in 0..2 {
            assert!((eps[j] + k * score[j]).abs() < 1e-14);
        }
        // Below the floor the score is frozen at the floor value.
        assert_eq!(net.score(&s, &x, 0.0).unwrap(), net.score(&s, &x, 0.02).unwrap());
    }
}
