//! Transformer encoder over fused tokens, learned-query decoder, and the
//! waypoint, object-heatmap and traffic-state heads.

use rand::Rng;

use crate::bev::{EXTENT_FRONT, EXTENT_SIDE};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Binder, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const WAYPOINTS: usize = 10;
pub const HEATMAP_SIZE: usize = 20;
pub const HEATMAP_CHANNELS: usize = 7;
pub const PERCEPTION_QUERIES: usize = HEATMAP_SIZE * HEATMAP_SIZE;
pub const TOTAL_QUERIES: usize = WAYPOINTS + PERCEPTION_QUERIES + 1;
/// Side of one heatmap cell in meters (the grid spans the 32 m BEV extent).
pub const HEATMAP_CELL: f64 = 2.0 * EXTENT_SIDE / HEATMAP_SIZE as f64;
pub const DETECTION_THRESHOLD: f64 = 0.9;
pub const V_MAX: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadsConfig {
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub token_dropout: f64,
    pub gru_hidden: usize,
    pub query_std: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 1,
            mlp_hidden: 512,
            token_dropout: 0.1,
            gru_hidden: 64,
            query_std: 0.02,
        }
    }
}

pub fn init_params<R: Rng>(store: &mut ParamStore, cfg: &HeadsConfig, rng: &mut R) {
    let d = cfg.dim;
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        store.init_attention(&format!("{p}.attn"), d, rng);
        store.init_layer_norm(&format!("{p}.ln1"), d);
        store.init_linear(&format!("{p}.fc1"), d, cfg.mlp_hidden, rng);
        store.init_linear(&format!("{p}.fc2"), cfg.mlp_hidden, d, rng);
        store.init_layer_norm(&format!("{p}.ln2"), d);
    }
    store.normal("dec.queries", &[TOTAL_QUERIES, d], cfg.query_std, rng);
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.{l}");
        store.init_attention(&format!("{p}.attn"), d, rng);
        store.init_layer_norm(&format!("{p}.ln1"), d);
        store.init_linear(&format!("{p}.fc1"), d, cfg.mlp_hidden, rng);
        store.init_linear(&format!("{p}.fc2"), cfg.mlp_hidden, d, rng);
        store.init_layer_norm(&format!("{p}.ln2"), d);
    }
    store.init_linear("wp.embed", 2, cfg.gru_hidden, rng);
    store.init_gru("wp.gru", d + 4, cfg.gru_hidden, rng);
    store.init_linear("wp.out", cfg.gru_hidden, 2, rng);
    store.init_linear("ht.fc1", d, d, rng);
    store.init_linear("ht.fc2", d, HEATMAP_CHANNELS, rng);
    store.init_linear("tf.fc", d, 3, rng);
}

fn mlp<'t>(b: &Binder<'t, '_>, p: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = b.linear(&format!("{p}.fc1"), x)?.relu();
    b.linear(&format!("{p}.fc2"), h)
}

/// Bernoulli token-dropout mask (`true` = drop), for training only.
pub fn dropout_mask<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < p).collect()
}

/// Post-norm encoder layers. `drop` zeroes the marked tokens before layer one.
pub fn encode_var<'t>(b: &Binder<'t, '_>, cfg: &HeadsConfig, x: Var<'t>, drop: Option<&[bool]>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 2 || s[1] != cfg.dim {
        return dim_err("encode", format!("tokens {s:?}, dim {}", cfg.dim));
    }
    let mut x = x;
    if let Some(mask) = drop {
        if mask.len() != s[0] {
            return dim_err("encode", format!("mask {} vs {} tokens", mask.len(), s[0]));
        }
        if mask.iter().any(|&m| m) {
            let keep: Vec<f64> = mask
                .iter()
                .flat_map(|&m| std::iter::repeat_n(if m { 0.0 } else { 1.0 }, s[1]))
                .collect();
            x = x.mul(b.tape().constant(Tensor::new(&s, keep)?))?;
        }
    }
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        x = x
            .add(b.attention(&format!("{p}.attn"), x, x, cfg.heads)?)?
            .layer_norm(b.get(&format!("{p}.ln1.g"))?, b.get(&format!("{p}.ln1.b"))?, crate::tensor::LN_EPS)?;
        x = x
            .add(mlp(b, &p, x)?)?
            .layer_norm(b.get(&format!("{p}.ln2.g"))?, b.get(&format!("{p}.ln2.b"))?, crate::tensor::LN_EPS)?;
    }
    Ok(x)
}

/// Learned queries cross-attend to `memory`; rows are waypoint (10),
/// perception (400), traffic (1).
pub fn decode_var<'t>(b: &Binder<'t, '_>, cfg: &HeadsConfig, memory: Var<'t>) -> Result<Var<'t>> {
    if memory.shape()[0] == 0 {
        return Err(Error::EmptySequence("decoder memory"));
    }
    let mut q = b.get("dec.queries")?;
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.{l}");
        q = q
            .add(b.attention(&format!("{p}.attn"), q, memory, cfg.heads)?)?
            .layer_norm(b.get(&format!("{p}.ln1.g"))?, b.get(&format!("{p}.ln1.b"))?, crate::tensor::LN_EPS)?;
        q = q
            .add(mlp(b, &p, q)?)?
            .layer_norm(b.get(&format!("{p}.ln2.g"))?, b.get(&format!("{p}.ln2.b"))?, crate::tensor::LN_EPS)?;
    }
    Ok(q)
}

/// Autoregressive GRU over the waypoint queries. Returns `10×2` positions,
/// the running sum of the per-step increments.
pub fn waypoint_head_var<'t>(b: &Binder<'t, '_>, z_wp: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let tape = b.tape();
    let steps = z_wp.shape()[0];
    let mut h = b.linear("wp.embed", target)?;
    let mut prev = tape.constant(Tensor::zeros(&[1, 2]));
    let mut incs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.concat_cols(&[z_wp.slice_rows(t, 1)?, prev, target])?;
        h = b.gru_cell("wp.gru", x, h)?;
        let inc = b.linear("wp.out", h)?;
        prev = prev.add(inc)?;
        incs.push(inc);
    }
    tape.concat_rows(&incs)?.cumsum_rows()
}

/// Two-layer MLP per perception query; column 0 through a sigmoid. `400×7`.
pub fn heatmap_head_var<'t>(b: &Binder<'t, '_>, z_ht: Var<'t>) -> Result<Var<'t>> {
    let raw = b.linear("ht.fc2", b.linear("ht.fc1", z_ht)?.relu())?;
    let prob = raw.slice_cols(0, 1)?.sigmoid();
    b.tape().concat_cols(&[prob, raw.slice_cols(1, HEATMAP_CHANNELS - 1)?])
}

/// Red light, stop sign, at-intersection probabilities. `1×3`.
pub fn traffic_head_var<'t>(b: &Binder<'t, '_>, z_tf: Var<'t>) -> Result<Var<'t>> {
    Ok(b.linear("tf.fc", z_tf)?.sigmoid())
}

/// All three heads from the decoder output.
pub struct HeadOutputs<'t> {
    pub waypoints: Var<'t>,
    pub heatmap: Var<'t>,
    pub traffic: Var<'t>,
}

pub fn heads_var<'t>(b: &Binder<'t, '_>, decoded: Var<'t>, target: Var<'t>) -> Result<HeadOutputs<'t>> {
    Ok(HeadOutputs {
        waypoints: waypoint_head_var(b, decoded.slice_rows(0, WAYPOINTS)?, target)?,
        heatmap: heatmap_head_var(b, decoded.slice_rows(WAYPOINTS, PERCEPTION_QUERIES)?)?,
        traffic: traffic_head_var(b, decoded.slice_rows(WAYPOINTS + PERCEPTION_QUERIES, 1)?)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrafficState {
    pub red_light: f64,
    pub stop_sign: f64,
    pub intersection: f64,
}

impl TrafficState {
    pub fn to_array(self) -> [f64; 3] {
        [self.red_light, self.stop_sign, self.intersection]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 3 {
            return dim_err("traffic state", format!("{} values", v.len()));
        }
        Ok(Self {
            red_light: v[0],
            stop_sign: v[1],
            intersection: v[2],
        })
    }
}

/// `20×20×7`: existence, x offset, y offset, width, length, speed/v_max,
/// (yaw+π)/2π.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    values: Tensor,
}

impl Default for Heatmap {
    fn default() -> Self {
        Self {
            values: Tensor::zeros(&[HEATMAP_SIZE, HEATMAP_SIZE, HEATMAP_CHANNELS]),
        }
    }
}

impl Heatmap {
    /// Accepts `400×7` query-major rows or `20×20×7`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.len() != PERCEPTION_QUERIES * HEATMAP_CHANNELS {
            return dim_err("heatmap", format!("{:?}", t.shape()));
        }
        Ok(Self {
            values: t.reshape(&[HEATMAP_SIZE, HEATMAP_SIZE, HEATMAP_CHANNELS])?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values.data()[(row * HEATMAP_SIZE + col) * HEATMAP_CHANNELS + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.values.data_mut()[(row * HEATMAP_SIZE + col) * HEATMAP_CHANNELS + ch] = v;
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * HEATMAP_SIZE + col) * HEATMAP_CHANNELS;
        &self.values.data()[i..i + HEATMAP_CHANNELS]
    }
}

/// Ego-frame center of a heatmap cell (x forward, y right).
pub fn cell_center(row: usize, col: usize) -> (f64, f64) {
    (
        EXTENT_FRONT - (row as f64 + 0.5) * HEATMAP_CELL,
        -EXTENT_SIDE + (col as f64 + 0.5) * HEATMAP_CELL,
    )
}

pub fn heatmap_cell_of(x: f64, y: f64) -> Option<(usize, usize)> {
    let r = ((EXTENT_FRONT - x) / HEATMAP_CELL).floor();
    let c = ((y + EXTENT_SIDE) / HEATMAP_CELL).floor();
    let n = HEATMAP_SIZE as f64;
    ((0.0..n).contains(&r) && (0.0..n).contains(&c)).then_some((r as usize, c as usize))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectedObject {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub length: f64,
    pub speed: f64,
    pub yaw: f64,
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Cells with existence above `threshold`, keeping only 8-neighborhood
/// maxima (ties go to the lower cell index). Ordered by cell index.
pub fn decode_heatmap(m: &Heatmap, threshold: f64) -> Result<Vec<DetectedObject>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Precondition(format!("threshold {threshold} outside (0,1)")));
    }
    let n = HEATMAP_SIZE as isize;
    let p = |r: isize, c: isize| m.get(r as usize, c as usize, 0);
    let mut out = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let pv = p(r, c);
            if pv <= threshold {
                continue;
            }
            let idx = r * n + c;
            let dominated = (-1..=1).flat_map(|dr| (-1..=1).map(move |dc| (dr, dc))).any(|(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= n || cc >= n {
                    return false;
                }
                let q = p(rr, cc);
                q > threshold && (q > pv || (q == pv && rr * n + cc < idx))
            });
            if dominated {
                continue;
            }
            let v = m.cell(r as usize, c as usize);
            let (cx, cy) = cell_center(r as usize, c as usize);
            out.push(DetectedObject {
                x: cx + v[1],
                y: cy + v[2],
                width: v[3].max(0.0),
                length: v[4].max(0.0),
                speed: v[5] * V_MAX,
                yaw: wrap_angle(v[6] * 2.0 * std::f64::consts::PI - std::f64::consts::PI),
            });
        }
    }
    Ok(out)
}

/// Ground-truth style heatmap for a set of objects; in a shared cell the
/// object nearest the cell center wins. Objects outside the grid are skipped.
pub fn encode_objects(objects: &[DetectedObject]) -> Heatmap {
    use std::f64::consts::PI;
    let mut m = Heatmap::default();
    let mut best = vec![f64::INFINITY; PERCEPTION_QUERIES];
    for o in objects {
        let Some((r, c)) = heatmap_cell_of(o.x, o.y) else { continue };
        let (cx, cy) = cell_center(r, c);
        let d = (o.x - cx).hypot(o.y - cy);
        if d >= best[r * HEATMAP_SIZE + c] {
            continue;
        }
        best[r * HEATMAP_SIZE + c] = d;
        let vals = [
            1.0,
            o.x - cx,
            o.y - cy,
            o.width,
            o.length,
            (o.speed / V_MAX).clamp(0.0, 1.0),
            (wrap_angle(o.yaw) + PI) / (2.0 * PI),
        ];
        for (ch, v) in vals.into_iter().enumerate() {
            m.set(r, c, ch, v);
        }
    }
    m
}

/// Parameter-owning encoder/decoder/heads with value-level entry points.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivingHeads {
    pub config: HeadsConfig,
    pub params: ParamStore,
}

impl DrivingHeads {
    pub fn new<R: Rng>(config: HeadsConfig, rng: &mut R) -> Self {
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

    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        self.run(|b| encode_var(b, &self.config, b.tape().constant(tokens.clone()), None))
    }

    pub fn decode(&self, memory: &Tensor) -> Result<Tensor> {
        self.run(|b| decode_var(b, &self.config, b.tape().constant(memory.clone())))
    }

    pub fn waypoint_head(&self, z_wp: &Tensor, target: (f64, f64)) -> Result<Vec<[f64; 2]>> {
        let t = self.run(|b| {
            let tape = b.tape();
            waypoint_head_var(b, tape.constant(z_wp.clone()), tape.constant(Tensor::new(&[1, 2], vec![target.0, target.1])?))
        })?;
        Ok(t.data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn heatmap_head(&self, z_ht: &Tensor) -> Result<Heatmap> {
        Heatmap::from_tensor(&self.run(|b| heatmap_head_var(b, b.tape().constant(z_ht.clone())))?)
    }

    pub fn traffic_head(&self, z_tf: &Tensor) -> Result<TrafficState> {
        TrafficState::from_slice(self.run(|b| traffic_head_var(b, b.tape().constant(z_tf.clone())))?.data())
    }
}
