use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dabn::{dabn_var, DomainParams};
use super::metrics::{da_loss_var, DaLossWeights};
use super::{gaussian_kernel, gaussian_smooth, SaliencyMap, SMOOTH_KERNEL};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Binder, ParamStore};
use crate::optim::{accumulate, scale_grads, Grads, Sgd};
use crate::par;
use crate::tensor::{Tape, Tensor, Var};

const STRIDE_BLOCKS: usize = 3;
const DABN_PREFIX: &str = "dabn";

/// Per-town prior width (in coarse grid cells) and output smoothing (pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainProfile {
    pub prior_sigma: f64,
    pub smooth_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyConfig {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; STRIDE_BLOCKS],
    pub dabn_eps: f64,
    pub profiles: BTreeMap<u32, DomainProfile>,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        let sigmas = [(2.0, 2.0), (2.5, 2.5), (3.0, 3.0), (2.5, 2.0)];
        Self {
            height: 64,
            width: 64,
            channels: [8, 16, 16],
            dabn_eps: 1e-5,
            profiles: sigmas
                .iter()
                .enumerate()
                .map(|(t, &(p, s))| {
                    (
                        t as u32,
                        DomainProfile {
                            prior_sigma: p,
                            smooth_sigma: s,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl SaliencyConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height >> STRIDE_BLOCKS, self.width >> STRIDE_BLOCKS)
    }

    fn profile(&self, town: u32) -> Result<&DomainProfile> {
        self.profiles.get(&town).ok_or(Error::UnknownDomain(town))
    }

    /// Centered Gaussian log-prior on the coarse grid, row-major `1×(gh·gw)`.
    pub fn log_prior(&self, town: u32) -> Result<Tensor> {
        let sigma = self.profile(town)?.prior_sigma;
        let (gh, gw) = self.grid();
        let (cy, cx) = ((gh as f64 - 1.0) / 2.0, (gw as f64 - 1.0) / 2.0);
        let data = (0..gh * gw)
            .map(|i| {
                let dy = (i / gw) as f64 - cy;
                let dx = (i % gw) as f64 - cx;
                -(dy * dy + dx * dx) / (2.0 * sigma * sigma)
            })
            .collect();
        Tensor::new(&[1, gh * gw], data)
    }
}

/// Recurrent state of one camera stream.
#[derive(Clone, Debug, Default)]
pub struct SaliencyStream {
    hidden: Option<Tensor>,
}

impl SaliencyStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.hidden = None;
    }

    pub fn hidden(&self) -> Option<&Tensor> {
        self.hidden.as_ref()
    }
}

/// Small conv encoder, domain-adaptive normalization, self-attention, one
/// GRU step per frame, attention decoder, prior, upsample, smooth.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyPredictor {
    pub config: SaliencyConfig,
    pub params: ParamStore,
}

impl SaliencyPredictor {
    pub fn new(config: SaliencyConfig, seed: u64) -> Result<Self> {
        let (h, w) = (config.height, config.width);
        if h == 0 || w == 0 || h % (1 << STRIDE_BLOCKS) != 0 || w % (1 << STRIDE_BLOCKS) != 0 {
            return Err(Error::Config(format!(
                "saliency resolution {h}×{w} must be a multiple of {}",
                1 << STRIDE_BLOCKS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            p.init_conv(&format!("conv{}", i + 1), cin, c, 3, &mut rng);
            cin = c;
        }
        for &town in config.profiles.keys() {
            DomainParams::identity(town, cin).register(&mut p, DABN_PREFIX);
        }
        p.init_attention("enc_attn", cin, &mut rng);
        p.init_gru("gru", cin, cin, &mut rng);
        p.init_attention("dec_attn", cin, &mut rng);
        p.init_linear("out", cin, 1, &mut rng);
        Ok(Self { config, params: p })
    }

    pub fn zero_final_layer(&mut self) -> Result<()> {
        for name in ["out.w", "out.b"] {
            self.params.get_mut(name)?.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    pub fn domain(&self, town: u32) -> Result<DomainParams> {
        DomainParams::lookup(&self.params, DABN_PREFIX, town)
    }

    /// Builds the graph for one frame. Returns the `1×H×W` map (sums to one)
    /// and the next GRU state.
    pub fn forward_var<'t>(
        &self,
        b: &Binder<'t, '_>,
        front: Var<'t>,
        town: u32,
        hidden: Option<&Tensor>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let cfg = &self.config;
        let fs = front.shape();
        if fs != [3, cfg.height, cfg.width] {
            return dim_err("predict_saliency", format!("front {fs:?}, expected [3, {}, {}]", cfg.height, cfg.width));
        }
        let profile = *cfg.profile(town)?;
        let tape = b.tape();
        let (gh, gw) = cfg.grid();
        let c = cfg.channels[STRIDE_BLOCKS - 1];

        let mut x = front;
        for i in 0..STRIDE_BLOCKS {
            x = b.conv(&format!("conv{}", i + 1), x, 2, 1)?.relu();
        }
        let alpha = b.get(&DomainParams::alpha_key(DABN_PREFIX, town)).map_err(|_| Error::UnknownDomain(town))?;
        let beta = b.get(&DomainParams::beta_key(DABN_PREFIX, town))?;
        let x = dabn_var(x, alpha, beta, cfg.dabn_eps)?.relu();

        let tokens = x.reshape(&[c, gh * gw])?.t()?;
        let tokens = tokens.add(b.attention("enc_attn", tokens, tokens, 1)?)?;
        let h0 = match hidden {
            Some(h) if h.shape() == [gh * gw, c] => tape.constant(h.clone()),
            Some(h) => return dim_err("saliency stream", format!("state {:?}", h.shape())),
            None => tape.constant(Tensor::zeros(&[gh * gw, c])),
        };
        let h1 = b.gru_cell("gru", tokens, h0)?;
        let dec = h1.add(b.attention("dec_attn", h1, h1, 1)?)?;

        let logits = b
            .linear("out", dec)?
            .reshape(&[1, gh * gw])?
            .add(tape.constant(cfg.log_prior(town)?))?;
        let cells = (cfg.height / gh) * (cfg.width / gw);
        let map = logits
            .softmax(1)?
            .reshape(&[1, gh, gw])?
            .upsample_nearest(cfg.height / gh, cfg.width / gw)?
            .scale(1.0 / cells as f64)
            .smooth(&gaussian_kernel(SMOOTH_KERNEL, profile.smooth_sigma))?;
        Ok((map, h1))
    }

    /// Predicts one frame of a stream, advancing its GRU state.
    pub fn predict(&self, stream: &mut SaliencyStream, front: &Tensor, town: u32) -> Result<SaliencyMap> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params, false);
        let (map, h) = self.forward_var(&b, tape.constant(front.clone()), town, stream.hidden.as_ref())?;
        stream.hidden = Some(h.value());
        Ok(SaliencyMap::from_tensor(&map.value())?.normalized())
    }

    /// Output of the prior path alone: what a zeroed final layer yields.
    pub fn prior_map(&self, town: u32) -> Result<SaliencyMap> {
        let cfg = &self.config;
        let (gh, gw) = cfg.grid();
        let lp = cfg.log_prior(town)?;
        let (fy, fx) = (cfg.height / gh, cfg.width / gw);
        let mut v = vec![0.0; cfg.height * cfg.width];
        for (i, val) in v.iter_mut().enumerate() {
            let (r, c) = (i / cfg.width, i % cfg.width);
            *val = lp.data()[(r / fy) * gw + c / fx].exp();
        }
        let m = SaliencyMap::new(cfg.height, cfg.width, v)?.normalized();
        Ok(gaussian_smooth(&m, cfg.profile(town)?.smooth_sigma))
    }
}

/// Synthetic gaze target for a front raster: attention on agents (channel 1)
/// and traffic controls (channel 2), plus a weak blob on the road ahead.
pub fn synthetic_gaze(front: &Tensor) -> Result<SaliencyMap> {
    let s = front.shape();
    if s.len() != 3 || s[0] != 3 {
        return dim_err("synthetic_gaze", format!("{s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = front.data();
    let (cy, cx) = (h as f64 * 0.4, (w as f64 - 1.0) / 2.0);
    let spread = h.min(w) as f64 / 5.0;
    let mut v = vec![0.0; plane];
    let mut focus = 0.0;
    for (i, val) in v.iter_mut().enumerate() {
        let f = d[plane + i] + 0.7 * d[2 * plane + i];
        focus += f;
        *val = f;
    }
    let center_weight = 0.15 * focus.max(1.0) / (2.0 * std::f64::consts::PI * spread * spread);
    for (i, val) in v.iter_mut().enumerate() {
        let dy = (i / w) as f64 - cy;
        let dx = (i % w) as f64 - cx;
        *val += center_weight * (-(dy * dy + dx * dx) / (2.0 * spread * spread)).exp();
    }
    let m = SaliencyMap::new(h, w, v)?.normalized();
    Ok(gaussian_smooth(&m, 2.5))
}

/// One training example: the previous frame seeds the GRU state.
#[derive(Clone, Debug)]
pub struct SaliencySample {
    pub prev_front: Option<Tensor>,
    pub front: Tensor,
    pub town: u32,
    pub gaze: SaliencyMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: DaLossWeights,
    pub seed: u64,
}

impl Default for SaliencyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            lr: 0.02,
            lr_decay: 0.8,
            momentum: 0.9,
            weight_decay: 1e-4,
            weights: DaLossWeights::default(),
            seed: 0,
        }
    }
}

impl SaliencyPredictor {
    fn sample_loss(&self, s: &SaliencySample, w: &DaLossWeights) -> Result<(f64, Grads)> {
        let hidden = match &s.prev_front {
            Some(prev) => {
                let mut stream = SaliencyStream::new();
                self.predict(&mut stream, prev, s.town)?;
                stream.hidden
            }
            None => None,
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params, true);
        let (map, _) = self.forward_var(&b, tape.constant(s.front.clone()), s.town, hidden.as_ref())?;
        let target = tape.constant(s.gaze.to_tensor());
        let loss = da_loss_var(map, target, w)?;
        tape.backward(loss)?;
        Ok((loss.scalar_value(), b.grads()))
    }

    /// Mean DA loss over `samples` without updating.
    pub fn evaluate(&self, samples: &[SaliencySample], w: &DaLossWeights) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySequence("saliency samples"));
        }
        let losses = par::map(samples, |s| -> Result<f64> {
            let mut stream = SaliencyStream::new();
            if let Some(prev) = &s.prev_front {
                self.predict(&mut stream, prev, s.town)?;
            }
            let m = self.predict(&mut stream, &s.front, s.town)?;
            super::da_loss(&m, &s.gaze, w)
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / samples.len() as f64)
    }
}

/// Momentum SGD on the DA loss with per-epoch learning-rate decay.
/// Returns the mean training loss of each epoch.
pub fn train_saliency(
    model: &mut SaliencyPredictor,
    samples: &[SaliencySample],
    cfg: &SaliencyTrainConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("saliency samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let model_ref = &*model;
            let results = par::map(chunk, |&i| model_ref.sample_loss(&samples[i], &cfg.weights));
            let mut grads = Grads::new();
            for r in results {
                let (l, g) = r?;
                epoch_loss += l;
                accumulate(&mut grads, &g);
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            opt.step(&mut model.params, &grads);
        }
        history.push(epoch_loss / samples.len() as f64);
        opt.lr *= cfg.lr_decay;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_front(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_is_a_distribution() {
        let p = SaliencyPredictor::new(SaliencyConfig::default(), 1).unwrap();
        let mut stream = SaliencyStream::new();
        for seed in 0..3 {
            let m = p.predict(&mut stream, &random_front(seed), seed as u32).unwrap();
            assert!(m.is_normalized());
            assert!(m.values().iter().all(|v| *v >= 0.0));
            assert_eq!((m.height(), m.width()), (64, 64));
        }
        assert!(stream.hidden().is_some());
    }

    #[test]
    fn zeroed_final_layer_yields_smoothed_prior() {
        let mut p = SaliencyPredictor::new(SaliencyConfig::default(), 2).unwrap();
        p.zero_final_layer().unwrap();
        for town in 0..4 {
            let m = p.predict(&mut SaliencyStream::new(), &random_front(9), town).unwrap();

            // Independent trace: Gaussian on the 8×8 grid, nearest upsample, smooth.
            let sigma = p.config.profiles[&town].prior_sigma;
            let mut v = vec![0.0; 64 * 64];
            for (i, val) in v.iter_mut().enumerate() {
                let gy = (i / 64 / 8) as f64 - 3.5;
                let gx = (i % 64 / 8) as f64 - 3.5;
                *val = (-(gy * gy + gx * gx) / (2.0 * sigma * sigma)).exp();
            }
            let oracle = gaussian_smooth(
                &SaliencyMap::new(64, 64, v).unwrap().normalized(),
                p.config.profiles[&town].smooth_sigma,
            );
            for (a, b) in m.values().iter().zip(oracle.values()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in m.values().iter().zip(p.prior_map(town).unwrap().values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_upsample_gives_blocky_map_before_smoothing() {
        let mut cfg = SaliencyConfig::default();
        for prof in cfg.profiles.values_mut() {
            prof.smooth_sigma = 1e-3;
        }
        let p = SaliencyPredictor::new(cfg, 3).unwrap();
        let m = p.predict(&mut SaliencyStream::new(), &random_front(1), 0).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let base = m.values()[(r / 8 * 8) * 64 + c / 8 * 8];
                assert!((m.values()[r * 64 + c] - base).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_unknown_domain_and_bad_shape() {
        let p = SaliencyPredictor::new(SaliencyConfig::default(), 1).unwrap();
        let mut s = SaliencyStream::new();
        assert!(matches!(
            p.predict(&mut s, &random_front(0), 9),
            Err(Error::UnknownDomain(9))
        ));
        assert!(p.predict(&mut s, &Tensor::zeros(&[3, 32, 32]), 0).is_err());
    }

    #[test]
    fn state_changes_prediction() {
        let p = SaliencyPredictor::new(SaliencyConfig::default(), 4).unwrap();
        let mut s = SaliencyStream::new();
        let a = p.predict(&mut s, &random_front(5), 0).unwrap();
        let b = p.predict(&mut s, &random_front(5), 0).unwrap();
        assert_ne!(a, b);
        s.reset();
        assert_eq!(p.predict(&mut s, &random_front(5), 0).unwrap(), a);
    }

    #[test]
    fn training_reduces_loss() {
        let mut p = SaliencyPredictor::new(SaliencyConfig::default(), 6).unwrap();
        let mut samples = Vec::new();
        for i in 0..12u64 {
            let mut front = Tensor::zeros(&[3, 64, 64]);
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (r, c) = (rng.gen_range(8..56), rng.gen_range(8..56));
            for dr in 0..4 {
                for dc in 0..4 {
                    front.data_mut()[64 * 64 + (r + dr) * 64 + c + dc] = 1.0;
                }
            }
            let gaze = synthetic_gaze(&front).unwrap();
            samples.push(SaliencySample {
                prev_front: None,
                front,
                town: (i % 4) as u32,
                gaze,
            });
        }
        let w = DaLossWeights::default();
        let before = p.evaluate(&samples, &w).unwrap();
        let cfg = SaliencyTrainConfig {
            epochs: 6,
            batch_size: 4,
            ..Default::default()
        };
        let hist = train_saliency(&mut p, &samples, &cfg).unwrap();
        let after = p.evaluate(&samples, &w).unwrap();
        assert_eq!(hist.len(), 6);
        assert!(after < before, "{after} !< {before}");
    }
}
