use crate::error::{dim_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Tensor, Var};

/// Per-domain affine parameters of domain-adaptive normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainParams {
    pub town: u32,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl DomainParams {
    pub fn identity(town: u32, channels: usize) -> Self {
        Self {
            town,
            alpha: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn alpha_key(prefix: &str, town: u32) -> String {
        format!("{prefix}.t{town}.alpha")
    }

    pub fn beta_key(prefix: &str, town: u32) -> String {
        format!("{prefix}.t{town}.beta")
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) {
        let c = self.alpha.len();
        store.insert(Self::alpha_key(prefix, self.town), Tensor::from_parts(vec![c], self.alpha.clone()));
        store.insert(Self::beta_key(prefix, self.town), Tensor::from_parts(vec![c], self.beta.clone()));
    }

    pub fn lookup(store: &ParamStore, prefix: &str, town: u32) -> Result<Self> {
        let a = store
            .get(&Self::alpha_key(prefix, town))
            .map_err(|_| Error::UnknownDomain(town))?;
        let b = store.get(&Self::beta_key(prefix, town))?;
        Ok(Self {
            town,
            alpha: a.data().to_vec(),
            beta: b.data().to_vec(),
        })
    }
}

/// `alpha[c]·(x − μ)/√(σ² + eps) + beta[c]` with μ, σ² taken over every entry
/// of the `C×H×W` input.
pub fn dabn(x: &Tensor, domain: &DomainParams, eps: f64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || domain.alpha.len() != s[0] || domain.beta.len() != s[0] {
        return dim_err(
            "dabn",
            format!("features {s:?} vs {} domain channels", domain.alpha.len()),
        );
    }
    let n = x.len() as f64;
    let mu = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let plane = s[1] * s[2];
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            domain.alpha[c] * (v - mu) * inv + domain.beta[c]
        })
        .collect();
    Tensor::new(s, data)
}

pub fn dabn_var<'t>(x: Var<'t>, alpha: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    if x.shape().len() != 3 {
        return dim_err("dabn", format!("{:?}", x.shape()));
    }
    let centered = x.add_scalar_var(x.mean().scale(-1.0))?;
    let inv = centered.mul(centered)?.mean().add_scalar(eps).powf(-0.5);
    centered.mul_scalar_var(inv)?.channel_affine(alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck::finite_diff_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 4.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn constant_input_gives_beta() {
        let x = Tensor::full(&[2, 3, 3], 7.5);
        let d = DomainParams {
            town: 1,
            alpha: vec![3.0, -2.0],
            beta: vec![0.25, -1.0],
        };
        let y = dabn(&x, &d, 1e-5).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, d.beta[i / 9]);
        }
    }

    #[test]
    fn identity_params_standardize() {
        for seed in 0..10 {
            let x = random(&[4, 6, 5], seed);
            let y = dabn(&x, &DomainParams::identity(0, 4), 1e-5).unwrap();
            let n = y.len() as f64;
            let mean = y.sum() / n;
            let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn alpha_ratio_scales_output() {
        let x = random(&[3, 4, 4], 2);
        let a = DomainParams {
            town: 0,
            alpha: vec![1.0, 2.0, 0.5],
            beta: vec![0.0; 3],
        };
        let b = DomainParams {
            town: 1,
            alpha: vec![3.0, 1.0, 2.0],
            beta: vec![0.0; 3],
        };
        let ya = dabn(&x, &a, 1e-5).unwrap();
        let yb = dabn(&x, &b, 1e-5).unwrap();
        for i in 0..x.len() {
            let c = i / 16;
            let ratio = b.alpha[c] / a.alpha[c];
            assert!((yb.data()[i] - ratio * ya.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn registry_lookup() {
        let mut store = ParamStore::new();
        DomainParams::identity(2, 3).register(&mut store, "dabn");
        assert_eq!(DomainParams::lookup(&store, "dabn", 2).unwrap().alpha, vec![1.0; 3]);
        assert!(matches!(
            DomainParams::lookup(&store, "dabn", 5),
            Err(Error::UnknownDomain(5))
        ));
    }

    #[test]
    fn tape_matches_value_and_gradients() {
        let x = random(&[2, 3, 4], 9);
        let d = DomainParams {
            town: 0,
            alpha: vec![1.5, 0.5],
            beta: vec![0.1, -0.2],
        };
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2], d.alpha.clone()).unwrap());
        let b = tape.constant(Tensor::new(&[2], d.beta.clone()).unwrap());
        let y = dabn_var(tape.constant(x.clone()), a, b, 1e-5).unwrap().value();
        let expect = dabn(&x, &d, 1e-5).unwrap();
        for (p, q) in y.data().iter().zip(expect.data()) {
            assert!((p - q).abs() < 1e-12);
        }

        let w = random(&[2, 3, 4], 10);
        let err = finite_diff_check(
            |t, v| {
                let a = t.constant(Tensor::new(&[2], vec![1.5, 0.5])?);
                let b = t.constant(Tensor::new(&[2], vec![0.1, -0.2])?);
                Ok(dabn_var(v, a, b, 1e-5)?.mul(t.constant(w.clone()))?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
