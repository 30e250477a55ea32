//! The factorized spatiotemporal denoiser.
//!
//! Spatial blocks run per-frame: a ResBlock followed by adapter-combined
//! cross-attention, `Z = CA(to_q(x), to_kv(emb_txt)) + λ·CA(to_q(x), to_kv_adp(emb_img))`,
//! both branches sharing the query and output projections. Temporal blocks
//! attend over the frame axis per pixel and cross-attend to the motion
//! caption embedding. Every up-block carries one pixel-aware cross-attention
//! (PACA) unit whose keys/values come from the latent first frame `y` pooled
//! to the block's grid, and `y` is additionally channel-concatenated to the
//! noisy input at the stem conv.
//!
//! The caption encoders are trainable stand-ins: an embedding table plus one
//! self-attention layer per pathway (spatial and motion pathways are
//! independent), and a small conv + global-average-pool head for the global
//! image embedding. Attention is single-head throughout.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab;

/// Level names for the four attention-bearing blocks plus the mid ResBlock.
const DOWN_LEVELS: [&str; 2] = ["d0", "d1"];
const UP_LEVELS: [&str; 2] = ["u1", "u0"];

#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    /// Video channels (3, pixel space is the latent space).
    pub channels: usize,
    /// Feature width at full resolution.
    pub width0: usize,
    /// Feature width at half resolution.
    pub width1: usize,
    /// Caption/image embedding dimension.
    pub emb_dim: usize,
    /// Timestep embedding dimension.
    pub time_dim: usize,
    /// Group-norm groups.
    pub groups: usize,
    /// Caption vocabulary size.
    pub vocab: usize,
    /// Largest frame count the temporal blocks support (sizes the learned
    /// frame-position table).
    pub max_frames: usize,
    /// Adapter balance λ; non-trainable, 1 by default.
    pub lambda: f64,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            channels: 3,
            width0: 32,
            width1: 64,
            emb_dim: 32,
            time_dim: 64,
            groups: 8,
            vocab: vocab::size(),
            max_frames: 16,
            lambda: 1.0,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.width0 % self.groups != 0 || self.width1 % self.groups != 0 {
            return Err(Error::BadGroups {
                groups: self.groups,
                channels: self.width0,
            });
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Contract("time_dim must be even".into()));
        }
        Ok(())
    }

    /// `key=value` lines for the checkpoint descriptor file.
    pub fn render(&self) -> String {
        format!(
            "channels={}\nwidth0={}\nwidth1={}\nemb_dim={}\ntime_dim={}\ngroups={}\nvocab={}\nmax_frames={}\nlambda={}\n",
            self.channels,
            self.width0,
            self.width1,
            self.emb_dim,
            self.time_dim,
            self.groups,
            self.vocab,
            self.max_frames,
            self.lambda
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut d = ArchDescriptor::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad descriptor line `{line}`")))?;
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad descriptor value `{v}`")))
            };
            match k {
                "channels" => d.channels = parse_usize(v)?,
                "width0" => d.width0 = parse_usize(v)?,
                "width1" => d.width1 = parse_usize(v)?,
                "emb_dim" => d.emb_dim = parse_usize(v)?,
                "time_dim" => d.time_dim = parse_usize(v)?,
                "groups" => d.groups = parse_usize(v)?,
                "vocab" => d.vocab = parse_usize(v)?,
                "max_frames" => d.max_frames = parse_usize(v)?,
                "lambda" => {
                    d.lambda = v
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad lambda `{v}`")))?
                }
                other => return Err(Error::Config(format!("unknown descriptor key `{other}`"))),
            }
        }
        d.validate()?;
        Ok(d)
    }
}

/// Named parameter collection; iteration order is the sorted name order,
/// which keeps every consumer (optimizer, checkpoints, binding) deterministic.
#[derive(Debug, Clone)]
pub struct ParamSet<E> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<E>) {
        self.map.insert(String::from(name), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn merge(&mut self, other: ParamSet<E>) {
        self.map.extend(other.map);
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<F>()))
                .collect(),
        }
    }
}

/// Parameters bound onto a tape for one forward pass.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

/// Bind every parameter as a tape leaf (trainable) or constant (inference).
pub fn bind_params<E: Scalar>(
    tape: &mut Tape<E>,
    params: &ParamSet<E>,
    trainable: bool,
) -> BoundParams {
    let mut map = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let var = if trainable {
            tape.param(tensor.clone())
        } else {
            tape.input(tensor.clone())
        };
        map.insert(name.clone(), var);
    }
    BoundParams { map }
}

// ---- initialization ---------------------------------------------------------

struct Init<'a, E: Scalar> {
    set: &'a mut ParamSet<E>,
    rng: Rng,
}

impl<'a, E: Scalar> Init<'a, E> {
    fn randn(&mut self, name: &str, shape: &[usize], std: f64) {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = (0..numel)
            .map(|_| E::from_f64(self.rng.next_normal() * std))
            .collect();
        self.set
            .insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.set.insert(name, Tensor::zeros(shape));
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        self.set.insert(name, Tensor::full(shape, E::ONE));
    }

    fn conv(&mut self, name: &str, o: usize, c: usize, k: usize) {
        let std = libm::sqrt(2.0 / (c * k * k) as f64);
        self.randn(&format!("{name}/w"), &[o, c, k, k], std);
        self.zeros(&format!("{name}/b"), &[o]);
    }

    /// Conv with zero weights; used for block outputs so the network starts
    /// near the identity.
    fn conv_zero(&mut self, name: &str, o: usize, c: usize, k: usize) {
        self.zeros(&format!("{name}/w"), &[o, c, k, k]);
        self.zeros(&format!("{name}/b"), &[o]);
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let std = libm::sqrt(1.0 / din as f64);
        self.randn(name, &[din, dout], std);
    }

    fn layer_norm(&mut self, name: &str, d: usize) {
        self.ones(&format!("{name}/g"), &[d]);
        self.zeros(&format!("{name}/b"), &[d]);
    }

    fn frame_pos(&mut self, prefix: &str, max_frames: usize, d: usize) {
        self.randn(&format!("{prefix}/pos"), &[max_frames, d], 0.02);
    }

    fn cross_attn(&mut self, prefix: &str, d: usize, d_emb: usize, adapter: bool) {
        self.layer_norm(&format!("{prefix}/ln"), d);
        self.linear(&format!("{prefix}/wq"), d, d);
        self.linear(&format!("{prefix}/wk"), d_emb, d);
        self.linear(&format!("{prefix}/wv"), d_emb, d);
        if adapter {
            self.linear(&format!("{prefix}/wk_adp"), d_emb, d);
            self.linear(&format!("{prefix}/wv_adp"), d_emb, d);
        }
        // zero out-projection: attention starts as a no-op on the residual path
        self.zeros(&format!("{prefix}/wo"), &[d, d]);
        self.zeros(&format!("{prefix}/bo"), &[d]);
    }

    fn resblock(&mut self, prefix: &str, c: usize, time_dim: usize) {
        self.layer_norm(&format!("{prefix}/n1"), c); // group-norm affine params
        self.conv(&format!("{prefix}/conv1"), c, c, 3);
        self.linear(&format!("{prefix}/temb/w"), time_dim, c);
        self.zeros(&format!("{prefix}/temb/b"), &[c]);
        self.layer_norm(&format!("{prefix}/n2"), c);
        self.conv_zero(&format!("{prefix}/conv2"), c, c, 3);
    }

    fn token_encoder(&mut self, prefix: &str, vocab: usize, d: usize) {
        self.randn(&format!("{prefix}/table"), &[vocab, d], 0.05);
        self.layer_norm(&format!("{prefix}/ln1"), d);
        self.linear(&format!("{prefix}/wq"), d, d);
        self.linear(&format!("{prefix}/wk"), d, d);
        self.linear(&format!("{prefix}/wv"), d, d);
        self.linear(&format!("{prefix}/wo"), d, d);
        self.layer_norm(&format!("{prefix}/ln2"), d);
    }
}

/// Deterministically initialize all denoiser parameters (encoders included).
pub fn init_params<E: Scalar>(desc: &ArchDescriptor, seed: u64) -> Result<ParamSet<E>> {
    desc.validate()?;
    let mut set = ParamSet::new();
    let mut init = Init {
        set: &mut set,
        rng: Rng::new(seed),
    };
    let (c, w0, w1, de, dt) = (
        desc.channels,
        desc.width0,
        desc.width1,
        desc.emb_dim,
        desc.time_dim,
    );

    init.token_encoder("enc_spatial", desc.vocab, de);
    init.token_encoder("enc_motion", desc.vocab, de);
    // image embedding head: conv, pool, conv, global pool, projection
    init.conv("enc_img/conv1", de, c, 3);
    init.conv("enc_img/conv2", de, de, 3);
    init.linear("enc_img/proj", de, de);

    init.linear("time/w1", dt, dt);
    init.zeros("time/b1", &[dt]);
    init.linear("time/w2", dt, dt);
    init.zeros("time/b2", &[dt]);

    init.conv("conv_in", w0, 2 * c, 3);

    for (level, width) in DOWN_LEVELS.iter().zip([w0, w1]) {
        init.resblock(&format!("{level}/res"), width, dt);
        init.cross_attn(&format!("{level}/ca"), width, de, true);
        init.frame_pos(&format!("{level}/tattn"), desc.max_frames, width);
        init.cross_attn(&format!("{level}/tattn"), width, width, false);
        init.cross_attn(&format!("{level}/mca"), width, de, false);
    }
    init.conv("down", w1, w0, 3);
    init.resblock("mid/res", w1, dt);

    for (level, width) in UP_LEVELS.iter().zip([w1, w0]) {
        init.conv(&format!("{level}/fuse"), width, 2 * width, 1);
        init.resblock(&format!("{level}/res"), width, dt);
        init.cross_attn(&format!("{level}/ca"), width, de, true);
        init.frame_pos(&format!("{level}/tattn"), desc.max_frames, width);
        init.cross_attn(&format!("{level}/tattn"), width, width, false);
        init.cross_attn(&format!("{level}/mca"), width, de, false);
        init.cross_attn(&format!("{level}/paca"), width, c, false);
    }
    init.conv("up", w0, w1, 3);

    init.layer_norm("out/norm", w0);
    init.conv_zero("out/conv", c, w0, 3);

    Ok(set)
}

// ---- attention primitives ----------------------------------------------------

/// Projection parameters of one cross-attention unit.
#[derive(Clone, Copy)]
pub struct CrossAttnParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl CrossAttnParams {
    pub fn from_bound(v: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(CrossAttnParams {
            wq: v.get(&format!("{prefix}/wq"))?,
            wk: v.get(&format!("{prefix}/wk"))?,
            wv: v.get(&format!("{prefix}/wv"))?,
            wo: v.get(&format!("{prefix}/wo"))?,
            bo: v.get(&format!("{prefix}/bo"))?,
        })
    }
}

/// Single-head scaled dot-product cross-attention; returns (output, attention)
/// where attention is the row-stochastic [n, L] matrix.
pub fn cross_attention_with_attn<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    emb: Var,
    p: &CrossAttnParams,
) -> Result<(Var, Var)> {
    let dk = tape.value(p.wq).shape()[1];
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(emb, p.wk)?;
    let v = tape.matmul(emb, p.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(dk as f64))?;
    let attn = tape.softmax(scaled, 1)?;
    let z = tape.matmul(attn, v)?;
    let proj = tape.matmul(z, p.wo)?;
    let d = tape.value(p.bo).numel();
    let bo_row = tape.reshape(p.bo, &[1, d])?;
    let out = tape.add(proj, bo_row)?;
    Ok((out, attn))
}

/// `Z = CA(to_q(x), to_kv(emb))`, output projected back to x's width.
pub fn cross_attention<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    emb: Var,
    p: &CrossAttnParams,
) -> Result<Var> {
    cross_attention_with_attn(tape, x, emb, p).map(|(out, _)| out)
}

/// Adapter parameters: the text pathway plus the λ-weighted image pathway.
/// Query and output projections are shared between the branches.
#[derive(Clone, Copy)]
pub struct AdapterParams {
    pub base: CrossAttnParams,
    pub wk_adp: Option<Var>,
    pub wv_adp: Option<Var>,
}

impl AdapterParams {
    pub fn from_bound(v: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(AdapterParams {
            base: CrossAttnParams::from_bound(v, prefix)?,
            wk_adp: v.get(&format!("{prefix}/wk_adp")).ok(),
            wv_adp: v.get(&format!("{prefix}/wv_adp")).ok(),
        })
    }
}

/// `Z = CA(to_q(x), to_kv(emb_txt)) + λ·CA(to_q(x), to_kv_adp(emb_img))`.
/// λ = 0 takes exactly the plain cross-attention path, bit for bit.
pub fn adapter_cross_attention<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    emb_txt: Var,
    emb_img: Var,
    lambda: f64,
    p: &AdapterParams,
) -> Result<Var> {
    if lambda == 0.0 {
        return cross_attention(tape, x, emb_txt, &p.base);
    }
    let (wk_adp, wv_adp) = match (p.wk_adp, p.wv_adp) {
        (Some(k), Some(v)) => (k, v),
        _ => {
            return Err(Error::Contract(
                "adapter cross-attention with lambda != 0 requires to_kv_adp parameters".into(),
            ))
        }
    };
    let txt = cross_attention(tape, x, emb_txt, &p.base)?;
    let img_params = CrossAttnParams {
        wq: p.base.wq,
        wk: wk_adp,
        wv: wv_adp,
        wo: p.base.wo,
        bo: p.base.bo,
    };
    let img = cross_attention(tape, x, emb_img, &img_params)?;
    let scaled = tape.scale(img, lambda)?;
    tape.add(txt, scaled)
}

/// Pixel-aware cross-attention: keys/values from the flattened latent first
/// frame rather than a global embedding.
pub fn paca<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    y_feat: Var,
    p: &CrossAttnParams,
) -> Result<Var> {
    cross_attention(tape, x, y_feat, p)
}

// ---- condition encoding --------------------------------------------------------

/// Tape handles for one sample's conditioning set.
#[derive(Clone, Copy)]
pub struct EmbeddingVars {
    /// [L_s, emb_dim] spatial caption embedding.
    pub emb_txt: Var,
    /// [1, emb_dim] global first-frame embedding.
    pub emb_img: Var,
    /// [L_m, emb_dim] motion caption embedding.
    pub emb_motion: Var,
    /// [C, H, W] latent first frame (identity autoencoder: the first frame).
    pub y: Var,
}

fn token_encoder<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    prefix: &str,
    ids: &[u32],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Contract(format!("{prefix}: empty token list")));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let table = v.get(&format!("{prefix}/table"))?;
    let e = tape.gather_rows(table, &idx)?;
    let g1 = v.get(&format!("{prefix}/ln1/g"))?;
    let b1 = v.get(&format!("{prefix}/ln1/b"))?;
    let h = tape.layer_norm(e, g1, b1)?;
    let d = tape.value(h).shape()[1];
    let q = tape.matmul(h, v.get(&format!("{prefix}/wq"))?)?;
    let k = tape.matmul(h, v.get(&format!("{prefix}/wk"))?)?;
    let val = tape.matmul(h, v.get(&format!("{prefix}/wv"))?)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(d as f64))?;
    let attn = tape.softmax(scaled, 1)?;
    let z = tape.matmul(attn, val)?;
    let zo = tape.matmul(z, v.get(&format!("{prefix}/wo"))?)?;
    let res = tape.add(e, zo)?;
    let g2 = v.get(&format!("{prefix}/ln2/g"))?;
    let b2 = v.get(&format!("{prefix}/ln2/b"))?;
    tape.layer_norm(res, g2, b2)
}

fn image_encoder<E: Scalar>(tape: &mut Tape<E>, v: &BoundParams, y: Var) -> Result<Var> {
    let ys = tape.value(y).shape().to_vec();
    let y4 = tape.reshape(y, &[1, ys[0], ys[1], ys[2]])?;
    let h = tape.conv2d(
        y4,
        v.get("enc_img/conv1/w")?,
        Some(v.get("enc_img/conv1/b")?),
    )?;
    let h = tape.silu(h)?;
    let h = tape.avg_pool2(h)?;
    let h = tape.conv2d(
        h,
        v.get("enc_img/conv2/w")?,
        Some(v.get("enc_img/conv2/b")?),
    )?;
    let h = tape.silu(h)?;
    let pooled = tape.global_avg_pool(h)?; // [1, emb]
    tape.matmul(pooled, v.get("enc_img/proj")?)
}

/// Encode captions and the first frame. With `null_condition` both caption
/// pathways see the learned `<null>` token and the image embedding is zero;
/// `y` itself is never dropped. `opts.single_encoder` reuses the spatial
/// encoder for the motion pathway.
pub fn encode_conditions<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    desc: &ArchDescriptor,
    spatial_tokens: &[u32],
    motion_tokens: &[u32],
    y: Var,
    null_condition: bool,
    opts: ForwardOpts,
) -> Result<EmbeddingVars> {
    let null_ids = [vocab::NULL];
    let (sp, mo): (&[u32], &[u32]) = if null_condition {
        (&null_ids, &null_ids)
    } else {
        (spatial_tokens, motion_tokens)
    };
    let motion_encoder = if opts.single_encoder {
        "enc_spatial"
    } else {
        "enc_motion"
    };
    let emb_txt = token_encoder(tape, v, "enc_spatial", sp)?;
    let emb_motion = token_encoder(tape, v, motion_encoder, mo)?;
    let emb_img = if null_condition || opts.direct_t2v {
        tape.input(Tensor::zeros(&[1, desc.emb_dim]))
    } else {
        image_encoder(tape, v, y)?
    };
    Ok(EmbeddingVars {
        emb_txt,
        emb_img,
        emb_motion,
        y,
    })
}

// ---- blocks ----------------------------------------------------------------------

/// Inference-time switches used by tests and ablations.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Skip temporal blocks entirely (identity), leaving pure per-frame
    /// spatial processing.
    pub bypass_temporal: bool,
    /// Zero-weight override for PACA units.
    pub zero_paca: bool,
    /// Skip adapter/PACA image pathways and y-concat (the direct-T2V ablation).
    pub direct_t2v: bool,
    /// Route the motion caption through the spatial encoder (the
    /// single-encoder ablation).
    pub single_encoder: bool,
}

pub(crate) fn sinusoidal_time_embedding<E: Scalar>(t: usize, dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        data.push(E::from_f64(libm::cos(t as f64 * freq)));
    }
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        data.push(E::from_f64(libm::sin(t as f64 * freq)));
    }
    Tensor::new(alloc::vec![1, dim], data).expect("time embedding shape")
}

fn time_mlp<E: Scalar>(tape: &mut Tape<E>, v: &BoundParams, t: usize, dim: usize) -> Result<Var> {
    let sin = tape.input(sinusoidal_time_embedding::<E>(t, dim));
    let h = tape.matmul(sin, v.get("time/w1")?)?;
    let b1 = v.get("time/b1")?;
    let b1r = tape.reshape(b1, &[1, dim])?;
    let h = tape.add(h, b1r)?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, v.get("time/w2")?)?;
    let b2 = v.get("time/b2")?;
    let b2r = tape.reshape(b2, &[1, dim])?;
    tape.add(h, b2r)
}

fn resblock<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    prefix: &str,
    h: Var,
    temb: Var,
    groups: usize,
) -> Result<Var> {
    let c = tape.value(h).shape()[1];
    let r = tape.group_norm(
        h,
        v.get(&format!("{prefix}/n1/g"))?,
        v.get(&format!("{prefix}/n1/b"))?,
        groups,
    )?;
    let r = tape.silu(r)?;
    let r = tape.conv2d(
        r,
        v.get(&format!("{prefix}/conv1/w"))?,
        Some(v.get(&format!("{prefix}/conv1/b"))?),
    )?;
    let ts = tape.silu(temb)?;
    let tp = tape.matmul(ts, v.get(&format!("{prefix}/temb/w"))?)?;
    let tb = v.get(&format!("{prefix}/temb/b"))?;
    let tbr = tape.reshape(tb, &[1, c])?;
    let tp = tape.add(tp, tbr)?;
    let tp = tape.reshape(tp, &[c])?;
    let r = tape.add_chan(r, tp)?;
    let r = tape.group_norm(
        r,
        v.get(&format!("{prefix}/n2/g"))?,
        v.get(&format!("{prefix}/n2/b"))?,
        groups,
    )?;
    let r = tape.silu(r)?;
    let r = tape.conv2d(
        r,
        v.get(&format!("{prefix}/conv2/w"))?,
        Some(v.get(&format!("{prefix}/conv2/b"))?),
    )?;
    tape.add(h, r)
}

/// [N,C,H,W] -> tokens [N·H·W, C].
fn to_tokens<E: Scalar>(tape: &mut Tape<E>, h: Var) -> Result<(Var, [usize; 4])> {
    let s = tape.value(h).shape().to_vec();
    let dims = [s[0], s[1], s[2], s[3]];
    let p = tape.permute(h, &[0, 2, 3, 1])?;
    let tok = tape.reshape(p, &[dims[0] * dims[2] * dims[3], dims[1]])?;
    Ok((tok, dims))
}

fn from_tokens<E: Scalar>(tape: &mut Tape<E>, tok: Var, dims: [usize; 4]) -> Result<Var> {
    let p = tape.reshape(tok, &[dims[0], dims[2], dims[3], dims[1]])?;
    tape.permute(p, &[0, 3, 1, 2])
}

fn spatial_block<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    prefix: &str,
    h: Var,
    temb: Var,
    embs: &EmbeddingVars,
    desc: &ArchDescriptor,
    opts: ForwardOpts,
) -> Result<Var> {
    let h = resblock(tape, v, &format!("{prefix}/res"), h, temb, desc.groups)?;
    let (tok, dims) = to_tokens(tape, h)?;
    let ca = format!("{prefix}/ca");
    let ln_g = v.get(&format!("{ca}/ln/g"))?;
    let ln_b = v.get(&format!("{ca}/ln/b"))?;
    let tn = tape.layer_norm(tok, ln_g, ln_b)?;
    let params = AdapterParams::from_bound(v, &ca)?;
    let lambda = if opts.direct_t2v { 0.0 } else { desc.lambda };
    let z = adapter_cross_attention(tape, tn, embs.emb_txt, embs.emb_img, lambda, &params)?;
    let tok = tape.add(tok, z)?;
    from_tokens(tape, tok, dims)
}

fn temporal_block<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    prefix: &str,
    h: Var,
    embs: &EmbeddingVars,
    opts: ForwardOpts,
) -> Result<Var> {
    if opts.bypass_temporal {
        return Ok(h);
    }
    let s = tape.value(h).shape().to_vec();
    let (t, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let b = hh * ww;
    let ta = format!("{prefix}/tattn");

    // learned frame-position marks; without them every pixel's frame
    // sequence would be permutation-blind and no caption could ever pick a
    // motion direction
    let pos_table = v.get(&format!("{ta}/pos"))?;
    if tape.value(pos_table).shape()[0] < t {
        return Err(Error::Contract(format!(
            "temporal block supports up to {} frames, got {t}",
            tape.value(pos_table).shape()[0]
        )));
    }
    let frame_ids: alloc::vec::Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = tape.gather_rows(pos_table, &frame_ids)?; // [B*T, C]

    // self-attention over the frame axis, one sequence per pixel
    let p = tape.permute(h, &[2, 3, 0, 1])?; // [H,W,T,C]
    let mut flat = tape.reshape(p, &[b * t, c])?;
    flat = tape.add(flat, pos)?;
    let ln_g = v.get(&format!("{ta}/ln/g"))?;
    let ln_b = v.get(&format!("{ta}/ln/b"))?;
    let nrm = tape.layer_norm(flat, ln_g, ln_b)?;
    let q = tape.matmul(nrm, v.get(&format!("{ta}/wq"))?)?;
    let k = tape.matmul(nrm, v.get(&format!("{ta}/wk"))?)?;
    let val = tape.matmul(nrm, v.get(&format!("{ta}/wv"))?)?;
    let q3 = tape.reshape(q, &[b, t, c])?;
    let k3 = tape.reshape(k, &[b, t, c])?;
    let v3 = tape.reshape(val, &[b, t, c])?;
    let kt = tape.permute(k3, &[0, 2, 1])?;
    let scores = tape.bmm(q3, kt)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(c as f64))?;
    let attn = tape.softmax(scaled, 2)?;
    let z = tape.bmm(attn, v3)?;
    let zf = tape.reshape(z, &[b * t, c])?;
    let zo = tape.matmul(zf, v.get(&format!("{ta}/wo"))?)?;
    let bo = v.get(&format!("{ta}/bo"))?;
    let bor = tape.reshape(bo, &[1, c])?;
    let zo = tape.add(zo, bor)?;
    let tok = tape.add(flat, zo)?;

    // motion-caption cross-attention on the same tokens
    let mca = format!("{prefix}/mca");
    let ln_g = v.get(&format!("{mca}/ln/g"))?;
    let ln_b = v.get(&format!("{mca}/ln/b"))?;
    let nrm2 = tape.layer_norm(tok, ln_g, ln_b)?;
    let params = CrossAttnParams::from_bound(v, &mca)?;
    let z2 = cross_attention(tape, nrm2, embs.emb_motion, &params)?;
    let tok = tape.add(tok, z2)?;

    let back = tape.reshape(tok, &[hh, ww, t, c])?;
    tape.permute(back, &[2, 3, 0, 1])
}

fn paca_block<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    prefix: &str,
    h: Var,
    embs: &EmbeddingVars,
    opts: ForwardOpts,
) -> Result<Var> {
    if opts.zero_paca || opts.direct_t2v {
        return Ok(h);
    }
    let s = tape.value(h).shape().to_vec();
    let (hh, ww) = (s[2], s[3]);
    let ys = tape.value(embs.y).shape().to_vec();
    let (c, yh, yw) = (ys[0], ys[1], ys[2]);
    if yh % hh != 0 || yw % ww != 0 || yh / hh != yw / ww {
        return Err(Error::Contract(format!(
            "paca: cannot pool y {yh}x{yw} to block grid {hh}x{ww}"
        )));
    }
    // pool y down to the block grid by factors of two
    let mut y4 = tape.reshape(embs.y, &[1, c, yh, yw])?;
    let mut cur = yh;
    while cur > hh {
        y4 = tape.avg_pool2(y4)?;
        cur /= 2;
    }
    if tape.value(y4).shape()[2] != hh {
        return Err(Error::Contract(format!(
            "paca: y pooling missed the {hh}x{ww} grid"
        )));
    }
    let yp = tape.permute(y4, &[0, 2, 3, 1])?;
    let ytok = tape.reshape(yp, &[hh * ww, c])?;

    let (tok, dims) = to_tokens(tape, h)?;
    let pa = format!("{prefix}/paca");
    let ln_g = v.get(&format!("{pa}/ln/g"))?;
    let ln_b = v.get(&format!("{pa}/ln/b"))?;
    let tn = tape.layer_norm(tok, ln_g, ln_b)?;
    let params = CrossAttnParams::from_bound(v, &pa)?;
    let z = paca(tape, tn, ytok, &params)?;
    let tok = tape.add(tok, z)?;
    from_tokens(tape, tok, dims)
}

// ---- full forward ------------------------------------------------------------------

/// Recorded intermediates of one denoiser pass. `skip0`/`skip1`/`mid` are the
/// down-path activations PredictNet consumes as its skip inputs.
pub struct ForwardTrace {
    pub eps_hat: Var,
    pub skip0: Var,
    pub skip1: Var,
    pub mid: Var,
    pub temb: Var,
}

/// The upsampling branch, shared structurally with PredictNet (which calls it
/// with the `predictnet/` parameter prefix and its own copied weights).
pub(crate) fn up_branch<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    pre: &str,
    desc: &ArchDescriptor,
    mid: Var,
    skip0: Var,
    skip1: Var,
    temb: Var,
    embs: &EmbeddingVars,
    opts: ForwardOpts,
) -> Result<Var> {
    let cat1 = tape.concat(&[mid, skip1], 1)?;
    let mut h = tape.conv2d(
        cat1,
        v.get(&format!("{pre}u1/fuse/w"))?,
        Some(v.get(&format!("{pre}u1/fuse/b"))?),
    )?;
    h = spatial_block(tape, v, &format!("{pre}u1"), h, temb, embs, desc, opts)?;
    h = temporal_block(tape, v, &format!("{pre}u1"), h, embs, opts)?;
    h = paca_block(tape, v, &format!("{pre}u1"), h, embs, opts)?;
    h = tape.upsample2(h)?;
    h = tape.conv2d(
        h,
        v.get(&format!("{pre}up/w"))?,
        Some(v.get(&format!("{pre}up/b"))?),
    )?;
    let cat0 = tape.concat(&[h, skip0], 1)?;
    h = tape.conv2d(
        cat0,
        v.get(&format!("{pre}u0/fuse/w"))?,
        Some(v.get(&format!("{pre}u0/fuse/b"))?),
    )?;
    h = spatial_block(tape, v, &format!("{pre}u0"), h, temb, embs, desc, opts)?;
    h = temporal_block(tape, v, &format!("{pre}u0"), h, embs, opts)?;
    h = paca_block(tape, v, &format!("{pre}u0"), h, embs, opts)?;
    Ok(h)
}

/// Predict the noise in `x_t` ([T,C,H,W]) at timestep `t`.
pub fn forward<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    desc: &ArchDescriptor,
    x_t: Var,
    t: usize,
    embs: &EmbeddingVars,
    opts: ForwardOpts,
) -> Result<ForwardTrace> {
    let s = tape.value(x_t).shape().to_vec();
    if s.len() != 4 || s[1] != desc.channels {
        return Err(Error::ShapeMismatch {
            op: "denoiser forward",
            lhs: s,
            rhs: alloc::vec![0, desc.channels, 0, 0],
        });
    }
    let (frames, h, w) = (s[0], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!(
            "denoiser needs even spatial extents, got {h}x{w}"
        )));
    }
    let ys = tape.value(embs.y).shape();
    if ys != [desc.channels, h, w] {
        return Err(Error::ShapeMismatch {
            op: "denoiser y",
            lhs: ys.to_vec(),
            rhs: alloc::vec![desc.channels, h, w],
        });
    }

    let temb = time_mlp(tape, v, t, desc.time_dim)?;

    // first-frame conditioning: channel-concat y alongside PACA
    let stem = if opts.direct_t2v {
        let zeros = tape.input(Tensor::zeros(&[frames, desc.channels, h, w]));
        tape.concat(&[x_t, zeros], 1)?
    } else {
        let yt = tape.repeat_outer(embs.y, frames)?;
        tape.concat(&[x_t, yt], 1)?
    };
    let mut feat = tape.conv2d(stem, v.get("conv_in/w")?, Some(v.get("conv_in/b")?))?;

    feat = spatial_block(tape, v, "d0", feat, temb, embs, desc, opts)?;
    feat = temporal_block(tape, v, "d0", feat, embs, opts)?;
    let skip0 = feat;

    feat = tape.avg_pool2(feat)?;
    feat = tape.conv2d(feat, v.get("down/w")?, Some(v.get("down/b")?))?;
    feat = spatial_block(tape, v, "d1", feat, temb, embs, desc, opts)?;
    feat = temporal_block(tape, v, "d1", feat, embs, opts)?;
    let skip1 = feat;

    let mid = resblock(tape, v, "mid/res", feat, temb, desc.groups)?;

    let up = up_branch(tape, v, "", desc, mid, skip0, skip1, temb, embs, opts)?;
    let hn = tape.group_norm(up, v.get("out/norm/g")?, v.get("out/norm/b")?, desc.groups)?;
    let hs = tape.silu(hn)?;
    let eps_hat = tape.conv2d(hs, v.get("out/conv/w")?, Some(v.get("out/conv/b")?))?;

    Ok(ForwardTrace {
        eps_hat,
        skip0,
        skip1,
        mid,
        temb,
    })
}
