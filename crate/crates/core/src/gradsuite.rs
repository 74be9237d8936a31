//! Finite-difference check of every differentiable tape op, the composite
//! blocks built from them, and every loss.
//!
//! Each case draws its inputs from a seeded generator, keeps them away from
//! kinks (ReLU, |·|, min, clamp) by at least 0.1, and reduces the output to
//! a scalar with fixed non-uniform weights so no gradient vanishes by
//! symmetry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::heads::{Heatmap, TrafficState, HEATMAP_CHANNELS, PERCEPTION_QUERIES, WAYPOINTS};
use crate::losses::{
    heatmap_attr_loss_var, heatmap_prob_loss_var, total_loss_var, traffic_loss_var, waypoint_loss_var, LossWeights,
};
use crate::nn::{split_head_attention, Binder, ParamStore};
use crate::saliency::{cc_var, da_loss_var, dabn_var, kld_var, sim_var, DaLossWeights, KLD_EPS};
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    /// Worst relative error over all seeds.
    pub worst: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values with magnitude in `[0.2, 1.2)` and random sign.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(0.2..1.2);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `other` offset from `base` by at least 0.2 in a random direction.
fn apart(base: &Tensor, r: &mut ChaCha8Rng) -> Tensor {
    let data = base
        .data()
        .iter()
        .map(|v| v + if r.gen::<bool>() { 1.0 } else { -1.0 } * r.gen_range(0.2..1.0))
        .collect();
    Tensor::new(base.shape(), data).expect("same shape")
}

/// Each entry of `base` multiplied by `up` or `down` at random.
fn rescaled(base: &Tensor, up: f64, down: f64, r: &mut ChaCha8Rng) -> Tensor {
    let data = base.data().iter().map(|v| v * if r.gen::<bool>() { up } else { down }).collect();
    Tensor::new(base.shape(), data).expect("same shape")
}

fn positive_map(n: usize, r: &mut ChaCha8Rng) -> Tensor {
    let t = uniform(&[1, n], 0.1, 1.0, r);
    let s = t.sum();
    t.map(|v| v / s)
}

/// `Σ wᵢ yᵢ` with fixed weights in `[0.5, 1.5)`.
fn project<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.shape().iter().product::<usize>();
    let w = (0..n).map(|i| 0.5 + ((i * 7919 + 13) % 101) as f64 / 101.0).collect();
    Ok(y.mul(y.tape().constant(Tensor::new(&y.shape(), w)?))?.sum())
}

fn check<F>(x: &Tensor, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check(f, x, STEP)
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> Result<f64>);

fn cases() -> Vec<Case> {
    vec![
        ("matmul.lhs", |r| {
            let w = uniform(&[3, 4], -1.0, 1.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| project(v.matmul(t.constant(w.clone()))?))
        }),
        ("matmul.rhs", |r| {
            let a = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[3, 4], -1.0, 1.0, r), move |t, v| project(t.constant(a.clone()).matmul(v)?))
        }),
        ("transpose", |r| check(&uniform(&[2, 3], -1.0, 1.0, r), |_, v| project(v.t()?))),
        ("add", |r| {
            let b = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| project(v.add(t.constant(b.clone()))?))
        }),
        ("sub", |r| {
            let b = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| project(t.constant(b.clone()).sub(v)?))
        }),
        ("mul", |r| {
            let b = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| project(v.mul(t.constant(b.clone()))?))
        }),
        ("div.numerator", |r| {
            let b = uniform(&[2, 3], 0.5, 2.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| project(v.div(t.constant(b.clone()))?))
        }),
        ("div.denominator", |r| {
            let a = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[2, 3], 0.5, 2.0, r), move |t, v| project(t.constant(a.clone()).div(v)?))
        }),
        ("minimum", |r| {
            let x = uniform(&[2, 3], -1.0, 1.0, r);
            let b = apart(&x, r);
            check(&x, move |t, v| project(v.minimum(t.constant(b.clone()))?))
        }),
        ("add_row.x", |r| {
            let b = uniform(&[3], -1.0, 1.0, r);
            check(&uniform(&[4, 3], -1.0, 1.0, r), move |t, v| project(v.add_row(t.constant(b.clone()))?))
        }),
        ("add_row.bias", |r| {
            let x = uniform(&[4, 3], -1.0, 1.0, r);
            check(&uniform(&[3], -1.0, 1.0, r), move |t, v| project(t.constant(x.clone()).add_row(v)?))
        }),
        ("scale", |r| check(&uniform(&[5], -1.0, 1.0, r), |_, v| project(v.scale(-1.7)))),
        ("add_scalar", |r| check(&uniform(&[5], -1.0, 1.0, r), |_, v| project(v.add_scalar(0.3).mul(v)?))),
        ("add_scalar_var", |r| {
            let x = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[1], -1.0, 1.0, r), move |t, v| {
                let y = t.constant(x.clone()).add_scalar_var(v)?;
                project(y.mul(y)?)
            })
        }),
        ("mul_scalar_var.x", |r| {
            let s = uniform(&[1], 0.5, 1.5, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| project(v.mul_scalar_var(t.constant(s.clone()))?))
        }),
        ("mul_scalar_var.s", |r| {
            let x = uniform(&[2, 3], -1.0, 1.0, r);
            check(&uniform(&[1], 0.5, 1.5, r), move |t, v| project(t.constant(x.clone()).mul_scalar_var(v)?))
        }),
        ("relu", |r| check(&off_zero(&[2, 4], r), |_, v| project(v.relu()))),
        ("sigmoid", |r| check(&uniform(&[2, 4], -3.0, 3.0, r), |_, v| project(v.sigmoid()))),
        ("tanh", |r| check(&uniform(&[2, 4], -2.0, 2.0, r), |_, v| project(v.tanh()))),
        ("exp", |r| check(&uniform(&[2, 4], -2.0, 2.0, r), |_, v| project(v.exp()))),
        ("ln", |r| check(&uniform(&[2, 4], 0.2, 3.0, r), |_, v| project(v.ln()))),
        ("abs", |r| check(&off_zero(&[2, 4], r), |_, v| project(v.abs()))),
        ("powf", |r| check(&uniform(&[2, 4], 0.2, 3.0, r), |_, v| project(v.powf(-0.5)))),
        ("clamp", |r| {
            let n = 8;
            let data = (0..n)
                .map(|i| match i % 3 {
                    0 => r.gen_range(-1.0..-0.6),
                    1 => r.gen_range(-0.4..0.4),
                    _ => r.gen_range(0.6..1.0),
                })
                .collect();
            check(&Tensor::new(&[2, 4], data)?, |_, v| project(v.clamp(-0.5, 0.5)))
        }),
        ("one_minus", |r| check(&uniform(&[3], -1.0, 1.0, r), |_, v| project(v.one_minus().mul(v)?))),
        ("softmax.rows", |r| check(&uniform(&[3, 4], -2.0, 2.0, r), |_, v| project(v.softmax(1)?))),
        ("softmax.cols", |r| check(&uniform(&[3, 4], -2.0, 2.0, r), |_, v| project(v.softmax(0)?))),
        ("layer_norm.x", |r| {
            let g = uniform(&[4], 0.5, 1.5, r);
            let b = uniform(&[4], -0.5, 0.5, r);
            check(&uniform(&[3, 4], -1.0, 1.0, r), move |t, v| {
                project(v.layer_norm(t.constant(g.clone()), t.constant(b.clone()), 1e-5)?)
            })
        }),
        ("layer_norm.gain", |r| {
            let x = uniform(&[3, 4], -1.0, 1.0, r);
            let b = uniform(&[4], -0.5, 0.5, r);
            check(&uniform(&[4], 0.5, 1.5, r), move |t, v| {
                project(t.constant(x.clone()).layer_norm(v, t.constant(b.clone()), 1e-5)?)
            })
        }),
        ("layer_norm.bias", |r| {
            let x = uniform(&[3, 4], -1.0, 1.0, r);
            let g = uniform(&[4], 0.5, 1.5, r);
            check(&uniform(&[4], -0.5, 0.5, r), move |t, v| {
                project(t.constant(x.clone()).layer_norm(t.constant(g.clone()), v, 1e-5)?)
            })
        }),
        ("global_avg_pool", |r| check(&uniform(&[2, 3, 3], -1.0, 1.0, r), |_, v| project(v.global_avg_pool()?))),
        ("sum", |r| check(&uniform(&[2, 3], -1.0, 1.0, r), |_, v| Ok(v.mul(v)?.sum()))),
        ("mean", |r| check(&uniform(&[2, 3], -1.0, 1.0, r), |_, v| Ok(v.mul(v)?.mean()))),
        ("reshape", |r| check(&uniform(&[2, 6], -1.0, 1.0, r), |_, v| project(v.reshape(&[3, 4])?.t()?))),
        ("concat_rows", |r| {
            let b = uniform(&[1, 3], -1.0, 1.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| {
                project(t.concat_rows(&[v, t.constant(b.clone()), v])?)
            })
        }),
        ("concat_cols", |r| {
            let b = uniform(&[2, 1], -1.0, 1.0, r);
            check(&uniform(&[2, 3], -1.0, 1.0, r), move |t, v| {
                project(t.concat_cols(&[t.constant(b.clone()), v, v])?)
            })
        }),
        ("slice_rows", |r| check(&uniform(&[4, 3], -1.0, 1.0, r), |_, v| project(v.slice_rows(1, 2)?))),
        ("slice_cols", |r| check(&uniform(&[3, 4], -1.0, 1.0, r), |_, v| project(v.slice_cols(1, 2)?))),
        ("conv2d.x", |r| {
            let w = uniform(&[2, 2, 3, 3], -1.0, 1.0, r);
            let b = uniform(&[2], -1.0, 1.0, r);
            check(&uniform(&[2, 5, 5], -1.0, 1.0, r), move |t, v| {
                project(v.conv2d(t.constant(w.clone()), t.constant(b.clone()), 2, 1)?)
            })
        }),
        ("conv2d.weight", |r| {
            let x = uniform(&[2, 5, 5], -1.0, 1.0, r);
            let b = uniform(&[2], -1.0, 1.0, r);
            check(&uniform(&[2, 2, 3, 3], -1.0, 1.0, r), move |t, v| {
                project(t.constant(x.clone()).conv2d(v, t.constant(b.clone()), 1, 1)?)
            })
        }),
        ("conv2d.bias", |r| {
            let x = uniform(&[2, 5, 5], -1.0, 1.0, r);
            let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, r);
            check(&uniform(&[3], -1.0, 1.0, r), move |t, v| {
                project(t.constant(x.clone()).conv2d(t.constant(w.clone()), v, 2, 0)?)
            })
        }),
        ("channel_affine.x", |r| {
            let a = uniform(&[2], 0.5, 1.5, r);
            let b = uniform(&[2], -1.0, 1.0, r);
            check(&uniform(&[2, 2, 3], -1.0, 1.0, r), move |t, v| {
                project(v.channel_affine(t.constant(a.clone()), t.constant(b.clone()))?)
            })
        }),
        ("channel_affine.alpha", |r| {
            let x = uniform(&[2, 2, 3], -1.0, 1.0, r);
            let b = uniform(&[2], -1.0, 1.0, r);
            check(&uniform(&[2], 0.5, 1.5, r), move |t, v| {
                project(t.constant(x.clone()).channel_affine(v, t.constant(b.clone()))?)
            })
        }),
        ("channel_affine.beta", |r| {
            let x = uniform(&[2, 2, 3], -1.0, 1.0, r);
            let a = uniform(&[2], 0.5, 1.5, r);
            check(&uniform(&[2], -1.0, 1.0, r), move |t, v| {
                project(t.constant(x.clone()).channel_affine(t.constant(a.clone()), v)?)
            })
        }),
        ("upsample_nearest", |r| check(&uniform(&[2, 2, 3], -1.0, 1.0, r), |_, v| project(v.upsample_nearest(2, 3)?))),
        ("smooth", |r| {
            let k = crate::saliency::gaussian_kernel(5, 1.2);
            check(&uniform(&[2, 6, 7], -1.0, 1.0, r), move |_, v| project(v.smooth(&k)?))
        }),
        ("cumsum_rows", |r| check(&uniform(&[5, 2], -1.0, 1.0, r), |_, v| project(v.cumsum_rows()?))),
        ("attention.query", |r| {
            let k = uniform(&[5, 4], -1.0, 1.0, r);
            let val = uniform(&[5, 3], -1.0, 1.0, r);
            check(&uniform(&[2, 4], -1.0, 1.0, r), move |t, v| {
                project(v.attention(t.constant(k.clone()), t.constant(val.clone()), 4)?)
            })
        }),
        ("attention.keys", |r| {
            let q = uniform(&[2, 4], -1.0, 1.0, r);
            let val = uniform(&[5, 3], -1.0, 1.0, r);
            check(&uniform(&[5, 4], -1.0, 1.0, r), move |t, v| {
                project(t.constant(q.clone()).attention(v, t.constant(val.clone()), 4)?)
            })
        }),
        ("attention.values", |r| {
            let q = uniform(&[2, 4], -1.0, 1.0, r);
            let k = uniform(&[5, 4], -1.0, 1.0, r);
            check(&uniform(&[5, 3], -1.0, 1.0, r), move |t, v| {
                project(t.constant(q.clone()).attention(t.constant(k.clone()), v, 4)?)
            })
        }),
        ("split_head_attention", |r| {
            let m = uniform(&[5, 4], -1.0, 1.0, r);
            check(&uniform(&[3, 4], -1.0, 1.0, r), move |t, v| {
                let mem = t.constant(m.clone());
                project(split_head_attention(v, mem, mem, 2)?)
            })
        }),
        ("gru_cell", |r| {
            let mut store = ParamStore::new();
            store.init_gru("g", 3, 4, r);
            let h = uniform(&[1, 4], -1.0, 1.0, r);
            check(&uniform(&[1, 3], -1.0, 1.0, r), move |t, v| {
                let b = Binder::new(t, &store, false);
                project(b.gru_cell("g", v, t.constant(h.clone()))?)
            })
        }),
        ("projected_attention", |r| {
            let mut store = ParamStore::new();
            store.init_attention("a", 4, r);
            let m = uniform(&[5, 4], -1.0, 1.0, r);
            check(&uniform(&[3, 4], -1.0, 1.0, r), move |t, v| {
                let b = Binder::new(t, &store, false);
                project(b.attention("a", v, t.constant(m.clone()), 2)?)
            })
        }),
        ("dabn", |r| {
            let a = uniform(&[2], 0.5, 1.5, r);
            let b = uniform(&[2], -1.0, 1.0, r);
            check(&uniform(&[2, 3, 3], -1.0, 1.0, r), move |t, v| {
                project(dabn_var(v, t.constant(a.clone()), t.constant(b.clone()), 1e-5)?)
            })
        }),
        ("loss.waypoint", |r| {
            let pred = uniform(&[WAYPOINTS, 2], -5.0, 5.0, r);
            let gt = apart(&pred, r);
            check(&pred, move |_, v| waypoint_loss_var(v, &gt))
        }),
        ("loss.heatmap_prob", |r| {
            let (pred, gt) = heatmap_pair(r);
            check(&pred, move |_, v| heatmap_prob_loss_var(v, &gt))
        }),
        ("loss.heatmap_attr", |r| {
            let (pred, gt) = heatmap_pair(r);
            check(&pred, move |_, v| heatmap_attr_loss_var(v, &gt))
        }),
        ("loss.traffic", |r| {
            let gt = traffic_label(r);
            check(&uniform(&[1, 3], 0.05, 0.95, r), move |_, v| traffic_loss_var(v, &gt, &LossWeights::default()))
        }),
        ("loss.total", |r| {
            let pred = uniform(&[WAYPOINTS, 2], -5.0, 5.0, r);
            let gt = apart(&pred, r);
            let (hp, hg) = heatmap_pair(r);
            let tg = traffic_label(r);
            let tp = uniform(&[1, 3], 0.05, 0.95, r);
            check(&pred, move |t, v| {
                let w = LossWeights::default();
                let l_wp = waypoint_loss_var(v, &gt)?;
                let ht = t.constant(hp.clone());
                let l_ht = heatmap_prob_loss_var(ht, &hg)?.add(heatmap_attr_loss_var(ht, &hg)?)?;
                let l_tf = traffic_loss_var(t.constant(tp.clone()), &tg, &w)?;
                total_loss_var(l_wp, l_ht, l_tf, &w)
            })
        }),
        ("loss.kld", |r| {
            let s_star = positive_map(12, r);
            check(&positive_map(12, r), move |t, v| kld_var(v, t.constant(s_star.clone()), KLD_EPS))
        }),
        ("loss.cc", |r| {
            let s_star = positive_map(12, r);
            check(&positive_map(12, r), move |t, v| cc_var(v, t.constant(s_star.clone())))
        }),
        ("loss.sim", |r| {
            let x = uniform(&[1, 12], 0.1, 1.0, r);
            let s_star = rescaled(&x, 1.5, 0.5, r);
            check(&x, move |t, v| sim_var(v, t.constant(s_star.clone())))
        }),
        ("loss.da", |r| {
            let x = positive_map(12, r);
            let s_star = rescaled(&x, 1.5, 0.6, r);
            check(&x, move |t, v| da_loss_var(v, t.constant(s_star.clone()), &DaLossWeights::default()))
        }),
    ]
}

/// Prediction rows (`400×7`, probabilities inside the clamp, attributes off
/// their labels) and a label map with a handful of positives.
fn heatmap_pair(r: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let mut pred = Vec::with_capacity(PERCEPTION_QUERIES * HEATMAP_CHANNELS);
    let mut gt = Heatmap::default();
    for q in 0..PERCEPTION_QUERIES {
        pred.push(r.gen_range(0.05..0.95));
        let positive = q % 37 == 5;
        for ch in 1..HEATMAP_CHANNELS {
            let p: f64 = r.gen_range(-1.0..1.0);
            pred.push(p);
            if positive {
                gt.set(q / 20, q % 20, ch, p + if r.gen::<bool>() { 0.5 } else { -0.5 });
            }
        }
        if positive {
            gt.set(q / 20, q % 20, 0, 1.0);
        }
    }
    (
        Tensor::new(&[PERCEPTION_QUERIES, HEATMAP_CHANNELS], pred).expect("fixed shape"),
        gt.tensor().clone(),
    )
}

fn traffic_label(r: &mut ChaCha8Rng) -> TrafficState {
    let mut b = || if r.gen::<bool>() { 1.0 } else { 0.0 };
    TrafficState {
        red_light: b(),
        stop_sign: b(),
        intersection: b(),
    }
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Runs every case for seeds `0..seeds` and reports the worst error per case.
pub fn run(seeds: u64) -> Result<Vec<GradCase>> {
    let all = cases();
    let per_case = crate::par::map(&all, |(name, f)| -> Result<GradCase> {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491) ^ name.len() as u64);
            worst = worst.max(f(&mut rng)?);
        }
        Ok(GradCase { name, worst })
    });
    per_case.into_iter().collect()
}
