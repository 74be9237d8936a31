use super::SaliencyMap;
use crate::error::{Error, Result};
use crate::tensor::Var;

pub const KLD_EPS: f64 = 1e-7;

/// `Σ S·ln(eps + S / (eps + S*))`, with `S` the prediction.
pub fn kld(s: &SaliencyMap, s_star: &SaliencyMap, eps: f64) -> Result<f64> {
    s.check_same_shape(s_star, "kld")?;
    Ok(s
        .values()
        .iter()
        .zip(s_star.values())
        .map(|(p, q)| p * (eps + p / (eps + q)).ln())
        .sum())
}

/// Pearson correlation of the two maps.
pub fn cc(s: &SaliencyMap, s_star: &SaliencyMap) -> Result<f64> {
    s.check_same_shape(s_star, "cc")?;
    pearson(s.values(), s_star.values())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Histogram intersection `Σ min(S, S*)`.
pub fn sim(s: &SaliencyMap, s_star: &SaliencyMap) -> Result<f64> {
    s.check_same_shape(s_star, "sim")?;
    Ok(s.values().iter().zip(s_star.values()).map(|(p, q)| p.min(*q)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaLossWeights {
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
}

impl Default for DaLossWeights {
    fn default() -> Self {
        Self {
            kld: 0.9,
            cc: 0.1,
            sim: 0.1,
        }
    }
}

pub fn da_loss(s: &SaliencyMap, s_star: &SaliencyMap, w: &DaLossWeights) -> Result<f64> {
    Ok(w.kld * kld(s, s_star, KLD_EPS)? - w.cc * cc(s, s_star)? - w.sim * sim(s, s_star)?)
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn kld_var<'t>(s: Var<'t>, s_star: Var<'t>, eps: f64) -> Result<Var<'t>> {
    same_shape(&s, &s_star, "kld")?;
    let ratio = s.div(s_star.add_scalar(eps))?.add_scalar(eps).ln();
    Ok(s.mul(ratio)?.sum())
}

pub fn cc_var<'t>(s: Var<'t>, s_star: Var<'t>) -> Result<Var<'t>> {
    same_shape(&s, &s_star, "cc")?;
    let center = |v: Var<'t>| v.add_scalar_var(v.mean().scale(-1.0));
    let a = center(s)?;
    let b = center(s_star)?;
    let va = a.mul(a)?.sum();
    let vb = b.mul(b)?.sum();
    if va.scalar_value() <= 0.0 || vb.scalar_value() <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    a.mul(b)?.sum().div(va.mul(vb)?.powf(0.5))
}

pub fn sim_var<'t>(s: Var<'t>, s_star: Var<'t>) -> Result<Var<'t>> {
    same_shape(&s, &s_star, "sim")?;
    Ok(s.minimum(s_star)?.sum())
}

pub fn da_loss_var<'t>(s: Var<'t>, s_star: Var<'t>, w: &DaLossWeights) -> Result<Var<'t>> {
    let k = kld_var(s, s_star, KLD_EPS)?.scale(w.kld);
    let c = cc_var(s, s_star)?.scale(w.cc);
    let m = sim_var(s, s_star)?.scale(w.sim);
    k.sub(c)?.sub(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck::finite_diff_check, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(n: usize, rng: &mut ChaCha8Rng) -> SaliencyMap {
        SaliencyMap::new(1, n, (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect())
            .unwrap()
            .normalized()
    }

    #[test]
    fn identities_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s = random_map(64, &mut rng);
            assert!(kld(&s, &s, KLD_EPS).unwrap() < 1e-6);
            assert!((cc(&s, &s).unwrap() - 1.0).abs() < 1e-10);
            assert!((sim(&s, &s).unwrap() - 1.0).abs() < 1e-10);
            // kld(S,S) is about −(n−1)·eps here, so the loss sits just below −0.2.
            assert!((da_loss(&s, &s, &DaLossWeights::default()).unwrap() + 0.2).abs() < 1e-4);
        }
    }

    #[test]
    fn kld_matches_direct_sum_and_diverges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_map(50, &mut rng);
        let t = random_map(50, &mut rng);
        let mut oracle = 0.0;
        for i in 0..50 {
            let p = s.values()[i];
            let q = t.values()[i];
            oracle += p * (1e-7 + p / (1e-7 + q)).ln();
        }
        assert!((kld(&s, &t, 1e-7).unwrap() - oracle).abs() < 1e-12);

        let peaked = SaliencyMap::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let elsewhere = SaliencyMap::new(1, 4, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(kld(&peaked, &elsewhere, 1e-7).unwrap() > 10.0);
        assert!(kld(&peaked, &SaliencyMap::zeros(2, 2), 1e-7).is_err());
    }

    #[test]
    fn cc_cases() {
        let a = SaliencyMap::new(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = SaliencyMap::new(1, 4, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        assert!((cc(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let flat = SaliencyMap::new(1, 4, vec![0.25; 4]).unwrap();
        assert!(matches!(cc(&a, &flat), Err(Error::ZeroVariance)));
    }

    #[test]
    fn sim_disjoint_is_zero() {
        let a = SaliencyMap::new(1, 4, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let b = SaliencyMap::new(1, 4, vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(sim(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn loss_decreases_along_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_map(40, &mut rng);
        let t = random_map(40, &mut rng);
        let w = DaLossWeights::default();
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let a = k as f64 / 10.0;
            let v = s.values().iter().zip(t.values()).map(|(p, q)| (1.0 - a) * p + a * q).collect();
            let m = SaliencyMap::new(1, 40, v).unwrap();
            let l = da_loss(&m, &t, &w).unwrap();
            assert!(l < prev, "step {k}: {l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn tape_versions_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_map(30, &mut rng);
        let t = random_map(30, &mut rng);
        let tape = Tape::new();
        let sv = tape.constant(s.to_tensor());
        let tv = tape.constant(t.to_tensor());
        let w = DaLossWeights::default();
        assert!((kld_var(sv, tv, KLD_EPS).unwrap().scalar_value() - kld(&s, &t, KLD_EPS).unwrap()).abs() < 1e-12);
        assert!((cc_var(sv, tv).unwrap().scalar_value() - cc(&s, &t).unwrap()).abs() < 1e-12);
        assert!((sim_var(sv, tv).unwrap().scalar_value() - sim(&s, &t).unwrap()).abs() < 1e-12);
        assert!((da_loss_var(sv, tv, &w).unwrap().scalar_value() - da_loss(&s, &t, &w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kld_and_cc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_map(20, &mut rng).to_tensor();
        let t = random_map(20, &mut rng).to_tensor();
        let err = finite_diff_check(
            |tape, x| {
                let k = kld_var(x, tape.constant(t.clone()), KLD_EPS)?;
                let c = cc_var(x, tape.constant(t.clone()))?;
                k.add(c)
            },
            &s,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn cc_scale_invariant(seed in any::<u64>(), a in 0.1f64..10.0, b in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_map(32, &mut rng);
            let t = random_map(32, &mut rng);
            let scaled = SaliencyMap::new(1, 32, s.values().iter().map(|v| a * v + b.abs()).collect()).unwrap();
            prop_assert!((cc(&scaled, &t).unwrap() - cc(&s, &t).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn sim_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_map(32, &mut rng);
            let t = random_map(32, &mut rng);
            prop_assert_eq!(sim(&s, &t).unwrap(), sim(&t, &s).unwrap());
        }
    }
}
