//! Modality tokens and sequential lidar-then-image cross-attention fusion.
//!
//! Each modality feature map `d×H×W` becomes `H·W` local tokens (features +
//! 2D sinusoidal position + view embedding ζ) followed by one global token
//! (spatial mean + sensor embedding ϑ + ζ). The four sequences are
//! concatenated in the order left, front-attention, right, lidar and fused:
//!
//! ```text
//! K_inter = LN(K_concat + Attn(K_concat, K_lidar, K_lidar))
//! K_fused = LN(K_inter  + Attn(K_inter,  K_image, K_image))
//! ```
//!
//! where `K_image` concatenates the three camera sequences and `Attn` has no
//! projections. An optional projected self-attention block follows.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{split_head_attention, Binder, ParamStore};
use crate::tensor::{Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Left,
    FrontAttention,
    Right,
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Left, Modality::FrontAttention, Modality::Right, Modality::Lidar];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Left => "left",
            Modality::FrontAttention => "front_attention",
            Modality::Right => "right",
            Modality::Lidar => "lidar",
        }
    }

    pub fn sensor(self) -> &'static str {
        match self {
            Modality::Lidar => "lidar",
            _ => "camera",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown modality {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeature {
    pub modality: Modality,
    /// `d×H×W`.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `N×d`.
    pub tokens: Tensor,
    pub tags: Vec<Modality>,
    pub global: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    fn with_tokens(&self, tokens: Tensor) -> Self {
        Self {
            tokens,
            tags: self.tags.clone(),
            global: self.global.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub dim: usize,
    /// Spatial extent of every modality feature map.
    pub grid: (usize, usize),
    pub heads: usize,
    pub self_attention: bool,
    /// When false the concatenated tokens pass through unfused.
    pub cross_attention: bool,
    pub embed_std: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            grid: (8, 8),
            heads: 1,
            self_attention: true,
            cross_attention: true,
            embed_std: 0.02,
        }
    }
}

impl FusionConfig {
    pub fn tokens_per_modality(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }

    pub fn total_tokens(&self) -> usize {
        4 * self.tokens_per_modality()
    }
}

/// Fixed 2D sinusoidal table, `(h·w)×d`. The first half of the channels
/// encodes the row, the second half the column. `d` must be a multiple of 4.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Precondition(format!("positional encoding width {d} not a multiple of 4")));
    }
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d..(r * w + c + 1) * d];
            for (offset, pos) in [(0, r), (half, c)] {
                for k in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                    row[offset + 2 * k] = (pos as f64 * freq).sin();
                    row[offset + 2 * k + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::new(&[h * w, d], data)
}

pub fn init_params<R: Rng>(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut R) {
    let d = cfg.dim;
    for m in Modality::ALL {
        store.normal(&format!("fusion.zeta.{}", m.name()), &[d], cfg.embed_std, rng);
    }
    for s in ["camera", "lidar"] {
        store.normal(&format!("fusion.theta.{s}"), &[d], cfg.embed_std, rng);
    }
    store.init_layer_norm("fusion.ln_lidar", d);
    store.init_layer_norm("fusion.ln_image", d);
    store.init_attention("fusion.self_attn", d, rng);
    store.init_layer_norm("fusion.ln_self", d);
}

/// Local tokens then one global token for a `d×H×W` feature map.
pub fn build_tokens_var<'t>(b: &Binder<'t, '_>, modality: Modality, feat: Var<'t>, pe: &Tensor) -> Result<Var<'t>> {
    let s = feat.shape();
    if s.len() != 3 || pe.shape() != [s[1] * s[2], s[0]] {
        return dim_err(
            "build_tokens",
            format!("features {s:?} vs positional table {:?}", pe.shape()),
        );
    }
    let zeta = b.get(&format!("fusion.zeta.{}", modality.name()))?;
    let theta = b.get(&format!("fusion.theta.{}", modality.sensor()))?;
    let local = feat
        .reshape(&[s[0], s[1] * s[2]])?
        .t()?
        .add(b.tape().constant(pe.clone()))?
        .add_row(zeta)?;
    let global = feat.global_avg_pool()?.t()?.add_row(theta)?.add_row(zeta)?;
    b.tape().concat_rows(&[local, global])
}

fn cross_stage<'t>(query: Var<'t>, memory: Var<'t>, g: Var<'t>, bias: Var<'t>, heads: usize) -> Result<Var<'t>> {
    if memory.shape()[0] == 0 {
        return Err(Error::EmptySequence("cross-attention memory"));
    }
    query
        .add(split_head_attention(query, memory, memory, heads)?)?
        .layer_norm(g, bias, LN_EPS)
}

pub fn lidar_cross_attention_var<'t>(b: &Binder<'t, '_>, concat: Var<'t>, lidar: Var<'t>, heads: usize) -> Result<Var<'t>> {
    cross_stage(concat, lidar, b.get("fusion.ln_lidar.g")?, b.get("fusion.ln_lidar.b")?, heads)
}

pub fn image_cross_attention_var<'t>(b: &Binder<'t, '_>, inter: Var<'t>, images: Var<'t>, heads: usize) -> Result<Var<'t>> {
    cross_stage(inter, images, b.get("fusion.ln_image.g")?, b.get("fusion.ln_image.b")?, heads)
}

/// Tokens for all four modalities (in the fixed order) through the full
/// fusion stack. Returns `N×d`.
pub fn fuse_var<'t>(b: &Binder<'t, '_>, cfg: &FusionConfig, feats: [Var<'t>; 4]) -> Result<Var<'t>> {
    let pe = positional_encoding(cfg.grid.0, cfg.grid.1, cfg.dim)?;
    let mut seqs = Vec::with_capacity(4);
    for (m, f) in Modality::ALL.into_iter().zip(feats) {
        seqs.push(build_tokens_var(b, m, f, &pe)?);
    }
    let tape = b.tape();
    let concat = tape.concat_rows(&seqs)?;
    if !cfg.cross_attention {
        return Ok(concat);
    }
    let inter = lidar_cross_attention_var(b, concat, seqs[3], cfg.heads)?;
    let images = tape.concat_rows(&seqs[..3])?;
    let fused = image_cross_attention_var(b, inter, images, cfg.heads)?;
    if !cfg.self_attention {
        return Ok(fused);
    }
    fused
        .add(b.attention("fusion.self_attn", fused, fused, cfg.heads)?)?
        .layer_norm(b.get("fusion.ln_self.g")?, b.get("fusion.ln_self.b")?, LN_EPS)
}

/// Order-preserving concatenation of the four per-modality sequences.
pub fn concat_modalities(seqs: &[TokenSequence]) -> Result<TokenSequence> {
    if seqs.len() != 4 {
        return Err(Error::Precondition(format!("expected 4 modality sequences, got {}", seqs.len())));
    }
    if seqs.iter().any(TokenSequence::is_empty) {
        return Err(Error::EmptySequence("concat_modalities"));
    }
    let d = seqs[0].dim();
    if let Some(s) = seqs.iter().find(|s| s.dim() != d) {
        return dim_err("concat_modalities", format!("token dim {} vs {d}", s.dim()));
    }
    let mut data = Vec::new();
    let mut tags = Vec::new();
    let mut global = Vec::new();
    for s in seqs {
        data.extend_from_slice(s.tokens.data());
        tags.extend_from_slice(&s.tags);
        global.extend_from_slice(&s.global);
    }
    Ok(TokenSequence {
        tokens: Tensor::new(&[tags.len(), d], data)?,
        tags,
        global,
    })
}

/// Parameter-owning fusion block with value-level entry points.
#[derive(Clone, Debug, PartialEq)]
pub struct LvaFusion {
    pub config: FusionConfig,
    pub params: ParamStore,
}

impl LvaFusion {
    pub fn new<R: Rng>(config: FusionConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        init_params(&mut params, &config, rng);
        Self { config, params }
    }

    fn run<F>(&self, f: F) -> Result<Tensor>
    where
        F: for<'t> FnOnce(&Binder<'t, '_>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params, false);
        Ok(f(&b)?.value())
    }

    pub fn build_tokens(&self, f: &ModalityFeature) -> Result<TokenSequence> {
        let s = f.features.shape();
        if s.len() != 3 || s[0] != self.config.dim {
            return dim_err("build_tokens", format!("features {s:?}, dim {}", self.config.dim));
        }
        let pe = positional_encoding(s[1], s[2], s[0])?;
        let tokens = self.run(|b| build_tokens_var(b, f.modality, b.tape().constant(f.features.clone()), &pe))?;
        let n = s[1] * s[2];
        let mut global = vec![false; n];
        global.push(true);
        Ok(TokenSequence {
            tokens,
            tags: vec![f.modality; n + 1],
            global,
        })
    }

    pub fn lidar_cross_attention(&self, concat: &TokenSequence, lidar: &TokenSequence) -> Result<TokenSequence> {
        if lidar.is_empty() {
            return Err(Error::EmptySequence("lidar tokens"));
        }
        let out = self.run(|b| {
            let t = b.tape();
            lidar_cross_attention_var(b, t.constant(concat.tokens.clone()), t.constant(lidar.tokens.clone()), self.config.heads)
        })?;
        Ok(concat.with_tokens(out))
    }

    pub fn image_cross_attention(&self, inter: &TokenSequence, images: &TokenSequence) -> Result<TokenSequence> {
        if images.is_empty() {
            return Err(Error::EmptySequence("image tokens"));
        }
        let out = self.run(|b| {
            let t = b.tape();
            image_cross_attention_var(b, t.constant(inter.tokens.clone()), t.constant(images.tokens.clone()), self.config.heads)
        })?;
        Ok(inter.with_tokens(out))
    }

    /// Full pipeline over the four modality features, in the fixed order.
    pub fn fuse(&self, feats: &[ModalityFeature]) -> Result<TokenSequence> {
        if feats.len() != 4 || feats.iter().zip(Modality::ALL).any(|(f, m)| f.modality != m) {
            return Err(Error::Precondition(
                "features must be given as left, front_attention, right, lidar".into(),
            ));
        }
        let seqs = feats.iter().map(|f| self.build_tokens(f)).collect::<Result<Vec<_>>>()?;
        let concat = concat_modalities(&seqs)?;
        let tokens = self.run(|b| {
            let t = b.tape();
            let vars = [0, 1, 2, 3].map(|i| t.constant(feats[i].features.clone()));
            fuse_var(b, &self.config, vars)
        })?;
        Ok(concat.with_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, scaled_dot_attention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(dim: usize, grid: (usize, usize)) -> FusionConfig {
        FusionConfig {
            dim,
            grid,
            ..Default::default()
        }
    }

    fn ln(x: &Tensor) -> Tensor {
        let d = x.cols();
        x.layer_norm(&vec![1.0; d], &vec![0.0; d], LN_EPS).unwrap()
    }

    fn add(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
    }

    #[test]
    fn zero_features_give_positional_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = LvaFusion::new(small(8, (3, 2)), &mut rng);
        for (_, t) in f.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let seq = f
            .build_tokens(&ModalityFeature {
                modality: Modality::Left,
                features: Tensor::zeros(&[8, 3, 2]),
            })
            .unwrap();
        let pe = positional_encoding(3, 2, 8).unwrap();
        assert_eq!(&seq.tokens.data()[..6 * 8], pe.data());
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.global, vec![false, false, false, false, false, false, true]);
    }

    #[test]
    fn single_cell_map_global_token_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = LvaFusion::new(small(8, (1, 1)), &mut rng);
        let feat = random(&[8, 1, 1], &mut rng);
        let seq = f
            .build_tokens(&ModalityFeature {
                modality: Modality::Lidar,
                features: feat,
            })
            .unwrap();
        assert_eq!(seq.len(), 2);
        let pe = positional_encoding(1, 1, 8).unwrap();
        let theta = f.params.get("fusion.theta.lidar").unwrap();
        for j in 0..8 {
            let expect = seq.tokens.get2(0, j) - pe.data()[j] + theta.data()[j];
            assert!((seq.tokens.get2(1, j) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn token_count_and_concat_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = LvaFusion::new(small(8, (8, 8)), &mut rng);
        let seqs: Vec<_> = Modality::ALL
            .iter()
            .map(|&m| {
                f.build_tokens(&ModalityFeature {
                    modality: m,
                    features: random(&[8, 8, 8], &mut rng),
                })
                .unwrap()
            })
            .collect();
        let all = concat_modalities(&seqs).unwrap();
        assert_eq!(all.len(), 260);
        assert_eq!(all.len(), seqs.iter().map(TokenSequence::len).sum::<usize>());
        for (m, s) in seqs.iter().enumerate() {
            for i in [0, 17, 64] {
                assert_eq!(all.tokens.row(m * 65 + i), s.tokens.row(i));
                assert_eq!(all.tags[m * 65 + i], Modality::ALL[m]);
            }
        }
        let mut bad = seqs.clone();
        bad[2] = TokenSequence {
            tokens: Tensor::zeros(&[1, 8]),
            tags: vec![],
            global: vec![],
        };
        assert!(concat_modalities(&bad).is_err());
        assert!(concat_modalities(&seqs[..3]).is_err());
    }

    #[test]
    fn one_lidar_token_is_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = LvaFusion::new(small(8, (2, 2)), &mut rng);
        let concat = random(&[5, 8], &mut rng);
        let tok = random(&[1, 8], &mut rng);
        let seq = |t: &Tensor| TokenSequence {
            tokens: t.clone(),
            tags: vec![Modality::Left; t.rows()],
            global: vec![false; t.rows()],
        };
        let out = f.lidar_cross_attention(&seq(&concat), &seq(&tok)).unwrap();
        let mut summed = concat.clone();
        for r in 0..5 {
            for c in 0..8 {
                summed.data_mut()[r * 8 + c] += tok.data()[c];
            }
        }
        let expect = ln(&summed);
        for (a, b) in out.tokens.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stages_match_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = LvaFusion::new(small(8, (2, 2)), &mut rng);
        let seq = |t: Tensor| TokenSequence {
            tags: vec![Modality::Left; t.rows()],
            global: vec![false; t.rows()],
            tokens: t,
        };
        let concat = random(&[11, 8], &mut rng);
        let lidar = random(&[4, 8], &mut rng);
        let images = random(&[7, 8], &mut rng);
        let inter = f.lidar_cross_attention(&seq(concat.clone()), &seq(lidar.clone())).unwrap();
        let expect = ln(&add(&concat, &scaled_dot_attention(&concat, &lidar, &lidar, 8).unwrap()));
        for (a, b) in inter.tokens.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let fused = f.image_cross_attention(&inter, &seq(images.clone())).unwrap();
        let expect = ln(&add(&inter.tokens, &scaled_dot_attention(&inter.tokens, &images, &images, 8).unwrap()));
        for (a, b) in fused.tokens.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }

        let same = Tensor::new(&[6, 8], images.row(0).repeat(6)).unwrap();
        let out = f.image_cross_attention(&inter, &seq(same)).unwrap();
        let mut shifted = inter.tokens.clone();
        for r in 0..11 {
            for c in 0..8 {
                shifted.data_mut()[r * 8 + c] += images.row(0)[c];
            }
        }
        for (a, b) in out.tokens.data().iter().zip(ln(&shifted).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let empty = TokenSequence {
            tokens: Tensor::zeros(&[1, 8]),
            tags: vec![],
            global: vec![],
        };
        assert!(matches!(f.image_cross_attention(&inter, &empty), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn permuting_queries_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LvaFusion::new(small(8, (2, 2)), &mut rng);
        let seq = |t: Tensor| TokenSequence {
            tags: vec![Modality::Left; t.rows()],
            global: vec![false; t.rows()],
            tokens: t,
        };
        let concat = random(&[6, 8], &mut rng);
        let lidar = random(&[5, 8], &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| concat.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = f.lidar_cross_attention(&seq(concat), &seq(lidar.clone())).unwrap();
        let b = f.lidar_cross_attention(&seq(permuted), &seq(lidar)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.tokens.row(k), a.tokens.row(i));
        }
    }

    fn four_features(cfg: &FusionConfig, seed: u64) -> Vec<ModalityFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Modality::ALL
            .iter()
            .map(|&m| ModalityFeature {
                modality: m,
                features: random(&[cfg.dim, cfg.grid.0, cfg.grid.1], &mut rng),
            })
            .collect()
    }

    #[test]
    fn full_pipeline_shape_and_determinism() {
        let cfg = FusionConfig::default();
        let feats = four_features(&cfg, 7);
        let mut sums = Vec::new();
        for _ in 0..2 {
            let f = LvaFusion::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(42));
            let out = f.fuse(&feats).unwrap();
            assert_eq!(out.tokens.shape(), &[260, 256]);
            sums.push(out.tokens.checksum());
        }
        assert_eq!(sums[0], sums[1]);
    }

    #[test]
    fn multi_head_and_baseline_shapes() {
        let cfg = FusionConfig {
            heads: 2,
            ..small(8, (2, 2))
        };
        let feats = four_features(&cfg, 8);
        let f = LvaFusion::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(f.fuse(&feats).unwrap().tokens.shape(), &[20, 8]);

        let base = LvaFusion::new(
            FusionConfig {
                cross_attention: false,
                ..cfg
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let seqs: Vec<_> = feats.iter().map(|x| base.build_tokens(x).unwrap()).collect();
        assert_eq!(base.fuse(&feats).unwrap(), concat_modalities(&seqs).unwrap());
    }

    #[test]
    fn gradients_through_full_stack() {
        let cfg = small(8, (2, 2));
        let f = LvaFusion::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        let feats = four_features(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = random(&[20, 8], &mut rng);
        let err = finite_diff_check(
            |tape, x| {
                let b = Binder::new(tape, &f.params, false);
                let vars = [
                    x,
                    tape.constant(feats[1].features.clone()),
                    tape.constant(feats[2].features.clone()),
                    tape.constant(feats[3].features.clone()),
                ];
                Ok(fuse_var(&b, &cfg, vars)?.mul(tape.constant(weights.clone()))?.sum())
            },
            &feats[0].features,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
