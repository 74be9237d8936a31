//! Imitation losses: waypoint L1, balanced heatmap BCE, heatmap attribute
//! L1, weighted traffic BCE, and their weighted total.
//!
//! Every loss has a tape form (prediction as a [`Var`], labels constant) and
//! a plain value form.

use crate::error::{dim_err, Result};
use crate::heads::{Heatmap, TrafficState, HEATMAP_CHANNELS, PERCEPTION_QUERIES};
use crate::tensor::{Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub wp: f64,
    pub ht: f64,
    pub tf: f64,
    pub tl: f64,
    pub sl: f64,
    pub i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            wp: 0.8,
            ht: 1.0,
            tf: 0.8,
            tl: 0.5,
            sl: 0.1,
            i: 0.1,
        }
    }
}

impl LossWeights {
    pub fn traffic(&self) -> [f64; 3] {
        [self.tl, self.sl, self.i]
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return dim_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `Σ_t ‖w_t − w_t*‖₁`.
pub fn waypoint_loss(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return dim_err("waypoint_loss", format!("{} vs {} steps", pred.len(), gt.len()));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).abs() + (p[1] - g[1]).abs())
        .sum())
}

/// Mean BCE over positive cells and over negative cells, averaged.
/// An empty class contributes zero.
pub fn heatmap_prob_loss(pred: &Heatmap, gt: &Heatmap) -> f64 {
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for k in 0..PERCEPTION_QUERIES {
        let (r, c) = (k / 20, k % 20);
        let y = gt.get(r, c, 0);
        let l = bce(pred.get(r, c, 0), y);
        if y >= 0.5 {
            pos += l;
            np += 1;
        } else {
            neg += l;
            nn += 1;
        }
    }
    let mp = if np > 0 { pos / np as f64 } else { 0.0 };
    let mn = if nn > 0 { neg / nn as f64 } else { 0.0 };
    (mp + mn) / 2.0
}

/// Attribute L1 over positive cells divided by the object count.
pub fn heatmap_attr_loss(pred: &Heatmap, gt: &Heatmap) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..PERCEPTION_QUERIES {
        let (r, c) = (k / 20, k % 20);
        if gt.get(r, c, 0) < 0.5 {
            continue;
        }
        count += 1;
        for ch in 1..HEATMAP_CHANNELS {
            total += (pred.get(r, c, ch) - gt.get(r, c, ch)).abs();
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn traffic_loss(pred: &TrafficState, gt: &TrafficState, w: &LossWeights) -> f64 {
    let p = pred.to_array();
    let g = gt.to_array();
    w.traffic()
        .iter()
        .enumerate()
        .map(|(j, wj)| wj * bce(p[j], g[j]))
        .sum()
}

/// `λ_wp·l_wp + λ_ht·l_ht + λ_tf·l_tf` with `l_ht` = probability + attribute.
pub fn total_loss(l_wp: f64, l_ht: f64, l_tf: f64, w: &LossWeights) -> f64 {
    w.wp * l_wp + w.ht * l_ht + w.tf * l_tf
}

pub fn waypoint_loss_var<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    check_same("waypoint_loss", &pred.shape(), gt.shape())?;
    Ok(pred.sub(pred.tape().constant(gt.clone()))?.abs().sum())
}

/// Masks (`n×1`) of positive and negative rows and their counts.
fn class_masks(gt: &Tensor) -> (Tensor, Tensor, usize, usize) {
    let n = gt.rows();
    let mut pos = vec![0.0; n];
    let mut neg = vec![0.0; n];
    for (r, (p, q)) in pos.iter_mut().zip(neg.iter_mut()).enumerate() {
        if gt.get2(r, 0) >= 0.5 {
            *p = 1.0;
        } else {
            *q = 1.0;
        }
    }
    let np = pos.iter().filter(|v| **v > 0.0).count();
    (
        Tensor::new(&[n, 1], pos).expect("n > 0"),
        Tensor::new(&[n, 1], neg).expect("n > 0"),
        np,
        n - np,
    )
}

fn heatmap_rows(op: &'static str, pred: &Var<'_>, gt: &Tensor) -> Result<Tensor> {
    let gt = gt.reshape(&[PERCEPTION_QUERIES, HEATMAP_CHANNELS])?;
    check_same(op, &pred.shape(), gt.shape())?;
    Ok(gt)
}

/// `pred`: `400×7` rows from the heatmap head; `gt`: any `400·7` layout.
pub fn heatmap_prob_loss_var<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    let gt = heatmap_rows("heatmap_prob_loss", &pred, gt)?;
    let tape = pred.tape();
    let (pos, neg, np, nn) = class_masks(&gt);
    let p = pred.slice_cols(0, 1)?.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let mut terms = Vec::new();
    if np > 0 {
        terms.push(p.ln().mul(tape.constant(pos))?.sum().scale(-1.0 / np as f64));
    }
    if nn > 0 {
        terms.push(p.one_minus().ln().mul(tape.constant(neg))?.sum().scale(-1.0 / nn as f64));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for t in terms {
        total = total.add(t)?;
    }
    Ok(total.scale(0.5))
}

pub fn heatmap_attr_loss_var<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    let gt = heatmap_rows("heatmap_attr_loss", &pred, gt)?;
    let tape = pred.tape();
    let (pos, _, np, _) = class_masks(&gt);
    if np == 0 {
        return Ok(pred.slice_cols(1, HEATMAP_CHANNELS - 1)?.scale(0.0).sum());
    }
    let k = HEATMAP_CHANNELS - 1;
    let mut target = Vec::with_capacity(PERCEPTION_QUERIES * k);
    let mut mask = Vec::with_capacity(PERCEPTION_QUERIES * k);
    for r in 0..PERCEPTION_QUERIES {
        target.extend_from_slice(&gt.row(r)[1..]);
        mask.extend(std::iter::repeat_n(pos.data()[r], k));
    }
    let diff = pred
        .slice_cols(1, k)?
        .sub(tape.constant(Tensor::new(&[PERCEPTION_QUERIES, k], target)?))?
        .abs();
    Ok(diff
        .mul(tape.constant(Tensor::new(&[PERCEPTION_QUERIES, k], mask)?))?
        .sum()
        .scale(1.0 / np as f64))
}

/// `pred`: `1×3` probabilities.
pub fn traffic_loss_var<'t>(pred: Var<'t>, gt: &TrafficState, w: &LossWeights) -> Result<Var<'t>> {
    check_same("traffic_loss", &pred.shape(), &[1, 3])?;
    let tape = pred.tape();
    let g = gt.to_array();
    let wt = w.traffic();
    let pos: Vec<f64> = (0..3).map(|j| -wt[j] * g[j]).collect();
    let neg: Vec<f64> = (0..3).map(|j| -wt[j] * (1.0 - g[j])).collect();
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let a = p.ln().mul(tape.constant(Tensor::new(&[1, 3], pos)?))?.sum();
    let b = p.one_minus().ln().mul(tape.constant(Tensor::new(&[1, 3], neg)?))?.sum();
    a.add(b)
}

pub fn total_loss_var<'t>(l_wp: Var<'t>, l_ht: Var<'t>, l_tf: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    l_wp.scale(w.wp).add(l_ht.scale(w.ht))?.add(l_tf.scale(w.tf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_heatmaps(seed: u64, positives: usize) -> (Heatmap, Heatmap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pred = Tensor::zeros(&[400, 7]);
        for v in pred.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for r in 0..400 {
            pred.data_mut()[r * 7] = rng.gen_range(0.02..0.98);
        }
        let mut gt = Heatmap::default();
        for _ in 0..positives {
            let k = rng.gen_range(0..400);
            gt.set(k / 20, k % 20, 0, 1.0);
            for ch in 1..7 {
                gt.set(k / 20, k % 20, ch, rng.gen_range(-1.0..1.0));
            }
        }
        (Heatmap::from_tensor(&pred).unwrap(), gt)
    }

    #[test]
    fn default_weights_and_total_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w), 2.6);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(w.traffic(), [0.5, 0.1, 0.1]);
        let tape = Tape::new();
        let parts: Vec<_> = (0..3).map(|_| tape.param(Tensor::scalar(1.0))).collect();
        let t = total_loss_var(parts[0], parts[1], parts[2], &w).unwrap();
        assert_eq!(t.scalar_value(), 2.6);
        tape.backward(t).unwrap();
        let g: Vec<f64> = parts.iter().map(|p| p.grad().unwrap().data()[0]).collect();
        assert_eq!(g, vec![0.8, 1.0, 0.8]);
    }

    #[test]
    fn waypoint_cases() {
        assert_eq!(waypoint_loss(&[[1.0, 2.0]], &[[0.0, 0.0]]).unwrap(), 3.0);
        assert_eq!(waypoint_loss(&[[1.0, 2.0]], &[[1.0, 2.0]]).unwrap(), 0.0);
        assert!(waypoint_loss(&[[1.0, 2.0]], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen(), rng.gen()]).collect();
        let g: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen(), rng.gen()]).collect();
        let mut oracle = 0.0;
        for t in 0..10 {
            for k in 0..2 {
                oracle += (p[t][k] - g[t][k]).abs();
            }
        }
        assert!((waypoint_loss(&p, &g).unwrap() - oracle).abs() < 1e-12);
        let tape = Tape::new();
        let pv = tape.constant(Tensor::new(&[10, 2], p.concat()).unwrap());
        let gv = Tensor::new(&[10, 2], g.concat()).unwrap();
        assert!((waypoint_loss_var(pv, &gv).unwrap().scalar_value() - oracle).abs() < 1e-12);
    }

    #[test]
    fn prob_loss_cases() {
        let (_, gt) = random_heatmaps(2, 5);
        let perfect = gt.clone();
        assert!(heatmap_prob_loss(&perfect, &gt) < 1e-5);

        let empty = Heatmap::default();
        let mut half = Heatmap::default();
        for k in 0..400 {
            half.set(k / 20, k % 20, 0, 0.5);
        }
        let expect = -(0.5f64).ln() / 2.0;
        assert!((heatmap_prob_loss(&half, &empty) - expect).abs() < 1e-12);

        // One positive among 399 negatives carries half the total.
        let mut one = Heatmap::default();
        one.set(3, 4, 0, 1.0);
        let mut pred = half.clone();
        pred.set(3, 4, 0, 0.25);
        let total = heatmap_prob_loss(&pred, &one);
        let pos_part = -(0.25f64).ln() / 2.0;
        assert!((total - pos_part - expect).abs() < 1e-12);
    }

    #[test]
    fn prob_loss_invariant_to_negative_permutation() {
        let (pred, gt) = random_heatmaps(3, 4);
        let negatives: Vec<usize> = (0..400).filter(|&k| gt.get(k / 20, k % 20, 0) < 0.5).collect();
        let mut permuted = pred.clone();
        for (i, &k) in negatives.iter().enumerate() {
            let src = negatives[(i * 7 + 3) % negatives.len()];
            permuted.set(k / 20, k % 20, 0, pred.get(src / 20, src % 20, 0));
        }
        assert!((heatmap_prob_loss(&pred, &gt) - heatmap_prob_loss(&permuted, &gt)).abs() < 1e-12);
    }

    #[test]
    fn attr_loss_cases() {
        assert_eq!(heatmap_attr_loss(&Heatmap::default(), &Heatmap::default()), 0.0);
        let mut gt = Heatmap::default();
        gt.set(1, 1, 0, 1.0);
        let mut pred = Heatmap::default();
        for ch in 1..7 {
            pred.set(1, 1, ch, 1.0);
        }
        assert_eq!(heatmap_attr_loss(&pred, &gt), 6.0);

        let (pred, gt) = random_heatmaps(4, 6);
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..20 {
            for c in 0..20 {
                if gt.get(r, c, 0) == 1.0 {
                    count += 1.0;
                    for ch in 1..7 {
                        total += (pred.get(r, c, ch) - gt.get(r, c, ch)).abs();
                    }
                }
            }
        }
        assert!((heatmap_attr_loss(&pred, &gt) - total / count).abs() < 1e-12);
    }

    #[test]
    fn traffic_cases() {
        let w = LossWeights::default();
        let gt = TrafficState {
            red_light: 1.0,
            stop_sign: 0.0,
            intersection: 1.0,
        };
        assert!(traffic_loss(&gt, &gt, &w) < 1e-5);
        let half = TrafficState {
            red_light: 0.5,
            stop_sign: 0.5,
            intersection: 0.5,
        };
        let expect = 0.7 * -(0.5f64).ln();
        assert!((traffic_loss(&half, &gt, &w) - expect).abs() < 1e-12);
    }

    #[test]
    fn tape_forms_match_values() {
        let w = LossWeights::default();
        for (seed, positives) in [(5, 0), (6, 3), (7, 12)] {
            let (pred, gt) = random_heatmaps(seed, positives);
            let tape = Tape::new();
            let pv = tape.constant(pred.tensor().reshape(&[400, 7]).unwrap());
            let a = heatmap_prob_loss_var(pv, gt.tensor()).unwrap().scalar_value();
            let b = heatmap_attr_loss_var(pv, gt.tensor()).unwrap().scalar_value();
            assert!((a - heatmap_prob_loss(&pred, &gt)).abs() < 1e-12);
            assert!((b - heatmap_attr_loss(&pred, &gt)).abs() < 1e-12);
        }
        let p = TrafficState {
            red_light: 0.3,
            stop_sign: 0.8,
            intersection: 0.6,
        };
        let g = TrafficState {
            red_light: 1.0,
            stop_sign: 0.0,
            intersection: 1.0,
        };
        let tape = Tape::new();
        let pv = tape.constant(Tensor::new(&[1, 3], p.to_array().to_vec()).unwrap());
        let v = traffic_loss_var(pv, &g, &w).unwrap().scalar_value();
        assert!((v - traffic_loss(&p, &g, &w)).abs() < 1e-12);
    }

    #[test]
    fn losses_pass_finite_differences() {
        let w = LossWeights::default();
        for seed in 0..5 {
            let (pred, gt) = random_heatmaps(20 + seed, 4);
            let x = pred.tensor().reshape(&[400, 7]).unwrap();
            let g = gt.tensor().clone();
            let err = finite_diff_check(
                |_, v| heatmap_prob_loss_var(v, &g)?.add(heatmap_attr_loss_var(v, &g)?),
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "heatmap {err}");

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wp = Tensor::new(&[10, 2], (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let wg = Tensor::new(&[10, 2], (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let err = finite_diff_check(|_, v| waypoint_loss_var(v, &wg), &wp, 1e-6).unwrap();
            assert!(err < 1e-4, "waypoint {err}");

            let tp = Tensor::new(&[1, 3], (0..3).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
            let tg = TrafficState {
                red_light: 1.0,
                stop_sign: 0.0,
                intersection: (seed % 2) as f64,
            };
            let err = finite_diff_check(|_, v| traffic_loss_var(v, &tg, &w), &tp, 1e-6).unwrap();
            assert!(err < 1e-4, "traffic {err}");
        }
    }
}
