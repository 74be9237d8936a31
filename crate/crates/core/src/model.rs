//! Toy-scale driving network: convolutional camera and lidar encoders, the
//! fusion block, the transformer encoder/decoder and the three heads.
//!
//! Inputs are average-pooled before the encoders: cameras from 64×64 to
//! `4·grid`, the lidar BEV (log counts) from 256×256 to `8·grid`. Two
//! stride-2 convolutions per camera and three for lidar bring every modality
//! to `dim×grid×grid`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bev::{rasterize, GRID_SIZE};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::heads::{self, HeadOutputs, HeadsConfig, Heatmap, TrafficState};
use crate::nn::{Binder, ParamStore};
use crate::saliency::{apply_attention_mask, SaliencyConfig, SaliencyMap, SaliencyPredictor};
use crate::sim::sensors::{SensorBundle, IMAGE_SIZE};
use crate::tensor::{Tape, Tensor, Var};

pub const CAMERA_PREFIX: &str = "backbone.camera";
pub const LIDAR_PREFIX: &str = "backbone.lidar";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    /// Side of every modality feature map.
    pub grid: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub gru_hidden: usize,
    pub token_dropout: f64,
    pub camera_channels: usize,
    pub lidar_channels: (usize, usize),
    /// Reweight the front camera with the predicted driver-attention map.
    pub use_da_mask: bool,
    /// Sequential lidar/image cross-attention; off passes the concatenated
    /// tokens straight to the encoder.
    pub lva_fusion: bool,
    pub self_attention: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            grid: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 1,
            mlp_hidden: 32,
            gru_hidden: 16,
            token_dropout: 0.1,
            camera_channels: 8,
            lidar_channels: (8, 16),
            use_da_mask: true,
            lva_fusion: true,
            self_attention: false,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !IMAGE_SIZE.is_multiple_of(4 * self.grid) || !GRID_SIZE.is_multiple_of(8 * self.grid) {
            return Err(Error::Config(format!(
                "grid {} must divide {} by 4 and {GRID_SIZE} by 8",
                self.grid, IMAGE_SIZE
            )));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} with {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            dim: self.dim,
            grid: (self.grid, self.grid),
            heads: self.heads,
            self_attention: self.self_attention,
            cross_attention: self.lva_fusion,
            embed_std: 0.02,
        }
    }

    pub fn heads(&self) -> HeadsConfig {
        HeadsConfig {
            dim: self.dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            token_dropout: self.token_dropout,
            gru_hidden: self.gru_hidden,
            query_std: 0.02,
        }
    }

    fn camera_pool(&self) -> usize {
        IMAGE_SIZE / (4 * self.grid)
    }

    fn lidar_pool(&self) -> usize {
        GRID_SIZE / (8 * self.grid)
    }
}

/// Block-average pooling of a `C×H×W` tensor by `f` in both directions.
pub fn avg_pool(t: &Tensor, f: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || f == 0 || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
        return dim_err("avg_pool", format!("{s:?} by {f}"));
    }
    let (c, h, w) = (s[0], s[1] / f, s[2] / f);
    let mut out = vec![0.0; c * h * w];
    let d = t.data();
    let norm = 1.0 / (f * f) as f64;
    for ch in 0..c {
        for r in 0..s[1] {
            for col in 0..s[2] {
                out[(ch * h + r / f) * w + col / f] += d[(ch * s[1] + r) * s[2] + col] * norm;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Pooled network inputs for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// Left, front (attention-weighted when enabled), right; `3×4g×4g`.
    pub cameras: [Tensor; 3],
    /// `1×8g×8g`.
    pub lidar: Tensor,
    pub target: (f64, f64),
}

pub fn prepare_input(
    cfg: &ModelConfig,
    sensors: &SensorBundle,
    target: (f64, f64),
    mask: Option<&SaliencyMap>,
) -> Result<ModelInput> {
    let cp = cfg.camera_pool();
    let mut cams = Vec::with_capacity(3);
    for (i, c) in sensors.cameras.iter().enumerate() {
        let mut t = c.to_tensor();
        if i == 1 {
            if let Some(m) = mask {
                t = apply_attention_mask(&t, m)?;
            }
        }
        cams.push(avg_pool(&t, cp)?);
    }
    let bev = rasterize(&sensors.lidar).to_tensor(true);
    let lidar = avg_pool(&bev, cfg.lidar_pool())?;
    let [l, f, r]: [Tensor; 3] = cams.try_into().expect("three cameras");
    Ok(ModelInput {
        cameras: [l, f, r],
        lidar,
        target,
    })
}

pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    store.init_conv(&format!("{CAMERA_PREFIX}.conv1"), 3, cfg.camera_channels, 3, rng);
    store.init_conv(&format!("{CAMERA_PREFIX}.conv2"), cfg.camera_channels, cfg.dim, 3, rng);
    let (a, b) = cfg.lidar_channels;
    store.init_conv(&format!("{LIDAR_PREFIX}.conv1"), 1, a, 3, rng);
    store.init_conv(&format!("{LIDAR_PREFIX}.conv2"), a, b, 3, rng);
    store.init_conv(&format!("{LIDAR_PREFIX}.conv3"), b, cfg.dim, 3, rng);
    fusion::init_params(store, &cfg.fusion(), rng);
    heads::init_params(store, &cfg.heads(), rng);
}

fn camera_features<'t>(b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    let h = b.conv(&format!("{CAMERA_PREFIX}.conv1"), x, 2, 1)?.relu();
    b.conv(&format!("{CAMERA_PREFIX}.conv2"), h, 2, 1)
}

fn lidar_features<'t>(b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    let h = b.conv(&format!("{LIDAR_PREFIX}.conv1"), x, 2, 1)?.relu();
    let h = b.conv(&format!("{LIDAR_PREFIX}.conv2"), h, 2, 1)?.relu();
    b.conv(&format!("{LIDAR_PREFIX}.conv3"), h, 2, 1)
}

/// Full forward graph. `drop` is the token-dropout mask for training.
pub fn forward_var<'t>(
    b: &Binder<'t, '_>,
    cfg: &ModelConfig,
    input: &ModelInput,
    drop: Option<&[bool]>,
) -> Result<HeadOutputs<'t>> {
    let tape = b.tape();
    let cams = [0, 1, 2].map(|i| tape.constant(input.cameras[i].clone()));
    let feats = [
        camera_features(b, cams[0])?,
        camera_features(b, cams[1])?,
        camera_features(b, cams[2])?,
        lidar_features(b, tape.constant(input.lidar.clone()))?,
    ];
    let tokens = fusion::fuse_var(b, &cfg.fusion(), feats)?;
    let hc = cfg.heads();
    let memory = heads::encode_var(b, &hc, tokens, drop)?;
    let decoded = heads::decode_var(b, &hc, memory)?;
    let target = tape.constant(Tensor::new(&[1, 2], vec![input.target.0, input.target.1])?);
    heads::heads_var(b, decoded, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub waypoints: Vec<[f64; 2]>,
    pub heatmap: Heatmap,
    pub traffic: TrafficState,
}

/// Network parameters plus the driver-attention predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivingModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub saliency: SaliencyPredictor,
}

impl DrivingModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        init_params(&mut params, &config, &mut rng);
        let saliency = SaliencyPredictor::new(SaliencyConfig::default(), config.init_seed ^ 0xda)?;
        Ok(Self {
            config,
            params,
            saliency,
        })
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Prediction> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params, false);
        let out = forward_var(&b, &self.config, input, None)?;
        Ok(Prediction {
            waypoints: out.waypoints.value().data().chunks(2).map(|c| [c[0], c[1]]).collect(),
            heatmap: Heatmap::from_tensor(&out.heatmap.value())?,
            traffic: TrafficState::from_slice(out.traffic.value().data())?,
        })
    }
}
