//! Driver-attention saliency: map type, smoothing, metrics, domain-adaptive
//! normalization, the toy predictor, and image masking.

mod dabn;
mod metrics;
mod predictor;

use std::io::{BufRead, Read, Write};

pub use dabn::{dabn, dabn_var, DomainParams};
pub use metrics::{cc, cc_var, da_loss, da_loss_var, kld, kld_var, sim, sim_var, DaLossWeights, KLD_EPS};
pub use predictor::{
    synthetic_gaze, train_saliency, DomainProfile, SaliencyConfig, SaliencyPredictor, SaliencySample,
    SaliencyStream, SaliencyTrainConfig,
};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

pub const SMOOTH_KERNEL: usize = 15;
const NORM_TOL: f64 = 1e-9;

/// Nonnegative `h×w` map; `normalized` is set when it sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h * w != values.len() || h == 0 || w == 0 {
            return Err(Error::Dimension {
                op: "saliency",
                detail: format!("{h}×{w} vs {} values", values.len()),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Precondition("saliency values must be finite and nonnegative".into()));
        }
        let normalized = (values.iter().sum::<f64>() - 1.0).abs() <= NORM_TOL;
        Ok(Self {
            h,
            w,
            values,
            normalized,
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![0.0; h * w],
            normalized: false,
        }
    }

    /// Rescales to unit sum. An all-zero map is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let s: f64 = self.values.iter().sum();
        if s > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= s);
            self.normalized = true;
        }
        self
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.h, self.w], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => {
                return Err(Error::Dimension {
                    op: "saliency",
                    detail: format!("expected H×W or 1×H×W, got {s:?}"),
                })
            }
        };
        // Clamp away negative round-off from upstream arithmetic.
        Self::new(h, w, t.data().iter().map(|v| v.max(0.0)).collect())
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Dimension {
                op,
                detail: format!("{}×{} vs {}×{}", self.h, self.w, other.h, other.w),
            });
        }
        Ok(())
    }

    /// Raw little-endian f32 raster, row-major, no header.
    pub fn write_f32<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_f32<R: Read>(r: &mut R, h: usize, w: usize) -> Result<Self> {
        let mut raw = vec![0u8; h * w * 4];
        r.read_exact(&mut raw).map_err(|e| Error::Format {
            what: "saliency raster",
            detail: e.to_string(),
        })?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(h, w, values)
    }
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// 15×15 separable Gaussian smoothing with symmetric-reflect borders.
/// Preserves total mass and nonnegativity.
pub fn gaussian_smooth(map: &SaliencyMap, sigma: f64) -> SaliencyMap {
    let kernel = gaussian_kernel(SMOOTH_KERNEL, sigma);
    let values = kernels::smooth_planes(&map.values, 1, map.h, map.w, &kernel)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect::<Vec<_>>();
    let normalized = map.normalized && (values.iter().sum::<f64>() - 1.0).abs() <= NORM_TOL;
    SaliencyMap {
        h: map.h,
        w: map.w,
        values,
        normalized,
    }
}

/// `front ⊙ (1 + S / max S)` on every channel; a zero map leaves `front` as is.
pub fn apply_attention_mask(front: &Tensor, s: &SaliencyMap) -> Result<Tensor> {
    let shape = front.shape();
    if shape.len() != 3 || shape[1] != s.h || shape[2] != s.w {
        return Err(Error::Dimension {
            op: "apply_attention_mask",
            detail: format!("image {shape:?} vs saliency {}×{}", s.h, s.w),
        });
    }
    let m = s.max();
    if m <= 0.0 {
        return Ok(front.clone());
    }
    let plane = s.h * s.w;
    let data = front
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 + s.values[i % plane] / m))
        .collect();
    Tensor::new(shape, data)
}

/// One row of the fixture manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureRow {
    pub predicted: String,
    pub ground_truth: String,
    pub height: usize,
    pub width: usize,
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
}

pub const MANIFEST_HEADER: &str = "predicted,ground_truth,height,width,kld,cc,sim";

pub fn write_manifest<W: Write>(w: &mut W, rows: &[FixtureRow]) -> Result<()> {
    writeln!(w, "{MANIFEST_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:e},{:e},{:e}",
            r.predicted, r.ground_truth, r.height, r.width, r.kld, r.cc, r.sim
        )?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<FixtureRow>> {
    let bad = |detail: String| Error::Format {
        what: "fixture manifest",
        detail,
    };
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("line {}: expected 7 fields", n + 1)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
        rows.push(FixtureRow {
            predicted: f[0].to_string(),
            ground_truth: f[1].to_string(),
            height: int(f[2])?,
            width: int(f[3])?,
            kld: num(f[4])?,
            cc: num(f[5])?,
            sim: num(f[6])?,
        });
    }
    Ok(rows)
}
