//! Conditional noise predictor over width-concatenated latents.
//!
//! Input is `[E(LR) | E(HR)_t]` stacked along the width axis, so the same
//! network accepts any spatial size divisible by 4 without extra input
//! channels. Two embedding branches with identical architecture (timestep and
//! relative acquisition offset) produce per-block bias vectors that are summed
//! and added after the first convolution of every block.
//!
//! ```text
//! in_conv  lc -> c                     (16 x 32 for a 32 px image)
//! down1    c -> 2c -> 2c   skip1, pool
//! down2    2c -> 4c -> 4c  skip2, pool
//! mid      4c -> 4c -> 4c
//! up1      up, [.|skip2] 8c -> 2c -> 2c
//! up2      up, [.|skip1] 4c -> c -> c
//! out_conv c -> lc                     zero-initialized
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};
use crate::rng::{derive_key, tag, Stream};
use crate::tensor::{Planes, Tensor3};
use crate::Real;

/// `(h, 2w, c)` latent holding the LR half on the left and the HR slot on the
/// right.
pub type ConcatLatent<T = f32> = Tensor3<T>;

pub fn concat_latents<T: Real>(z_lr: &Tensor3<T>, z_hr: &Tensor3<T>) -> Result<ConcatLatent<T>> {
    z_lr.ensure_same_shape(z_hr, "concat_latents")?;
    let (h, w, c) = z_lr.shape();
    let mut data = Vec::with_capacity(2 * z_lr.len());
    let row = w * c;
    for y in 0..h {
        data.extend_from_slice(&z_lr.as_slice()[y * row..(y + 1) * row]);
        data.extend_from_slice(&z_hr.as_slice()[y * row..(y + 1) * row]);
    }
    Tensor3::from_vec(h, 2 * w, c, data)
}

fn check_even_width<T: Real>(full: &ConcatLatent<T>) -> Result<usize> {
    let w = full.width();
    if !w.is_multiple_of(2) || w == 0 {
        return Err(Error::Shape(format!("concatenated latent width {w} is not even")));
    }
    Ok(w / 2)
}

/// The masking operator: keep the HR half (right), drop the LR half.
pub fn mask_hr<T: Real>(full: &ConcatLatent<T>) -> Result<Tensor3<T>> {
    let half = check_even_width(full)?;
    Ok(full.crop_width(half, half))
}

/// The LR half (left).
pub fn lr_half<T: Real>(full: &ConcatLatent<T>) -> Result<Tensor3<T>> {
    let half = check_even_width(full)?;
    Ok(full.crop_width(0, half))
}

/// Map a signed day offset to the embedding input range `[-1, 1]`.
pub fn normalize_dt(dt_days: f64) -> f64 {
    (dt_days / 365.0).clamp(-1.0, 1.0)
}

/// Scale from normalized offsets into the sinusoidal encoder.
pub const DT_ENCODER_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub embed_hidden: usize,
    /// When false the offset branch is held at zero and never updated.
    pub use_dt: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 12,
            base_channels: 32,
            embed_dim: 64,
            embed_hidden: 128,
            use_dt: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.latent_channels", self.latent_channels),
            ("model.base_channels", self.base_channels),
            ("model.embed_dim", self.embed_dim),
            ("model.embed_hidden", self.embed_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    fn block_channels(&self) -> [usize; 5] {
        let c = self.base_channels;
        [2 * c, 4 * c, 4 * c, 2 * c, c]
    }

    fn bias_len(&self) -> usize {
        self.block_channels().iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct EmbedMlp {
    fc1: Dense,
    fc2: Dense,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    in_conv: Conv,
    d1a: Conv,
    d1b: Conv,
    d2a: Conv,
    d2b: Conv,
    ma: Conv,
    mb: Conv,
    u1a: Conv,
    u1b: Conv,
    u2a: Conv,
    u2b: Conv,
    out_conv: Conv,
    temb: EmbedMlp,
    dtemb: EmbedMlp,
}

/// Per-block bias vectors produced by the embedding branches, in block order
/// `down1, down2, mid, up1, up2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBiases<T> {
    pub blocks: Vec<Vec<T>>,
}

impl<T: Real> BlockBiases<T> {
    pub fn flatten(&self) -> Vec<T> {
        self.blocks.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser<T = f32> {
    config: DenoiserConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

struct ConvCache<T> {
    col: Vec<T>,
    pre: Vec<T>,
}

struct MlpCache<T> {
    input: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

/// Activations kept for the backward pass of one sample.
pub struct ForwardCache<T> {
    h: usize,
    w: usize,
    in_conv: Vec<T>,
    d1a: ConvCache<T>,
    d1b: ConvCache<T>,
    d2a: ConvCache<T>,
    d2b: ConvCache<T>,
    ma: ConvCache<T>,
    mb: ConvCache<T>,
    u1a: ConvCache<T>,
    u1b: ConvCache<T>,
    u2a: ConvCache<T>,
    u2b: ConvCache<T>,
    out_conv: Vec<T>,
    temb: MlpCache<T>,
    dtemb: Option<MlpCache<T>>,
}

fn add_conv<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut Stream,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
) -> Conv {
    let n = cout * cin * 9;
    let w = if zero {
        vec![T::zero(); n]
    } else {
        nn::he_normal(rng, n, cin * 9)
    };
    let wi = params.push(format!("{name}.weight"), vec![cout, cin, 3, 3], w);
    let bi = params.push(format!("{name}.bias"), vec![cout], vec![T::zero(); cout]);
    Conv {
        w: wi,
        b: bi,
        cin,
        cout,
    }
}

fn add_dense<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut Stream,
    name: &str,
    din: usize,
    dout: usize,
    zero: bool,
) -> Dense {
    let w = if zero {
        vec![T::zero(); din * dout]
    } else {
        nn::he_normal(rng, din * dout, din)
    };
    let wi = params.push(format!("{name}.weight"), vec![dout, din], w);
    let bi = params.push(format!("{name}.bias"), vec![dout], vec![T::zero(); dout]);
    Dense { w: wi, b: bi }
}

impl<T: Real> Denoiser<T> {
    /// He-initialized network with a zero output convolution, so the initial
    /// prediction is exactly zero everywhere.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::new(derive_key(seed, &[tag::INIT_WEIGHTS]));
        let mut p = ParamSet::default();
        let c = config.base_channels;
        let lc = config.latent_channels;
        let in_conv = add_conv(&mut p, &mut rng, "in_conv", lc, c, false);
        let d1a = add_conv(&mut p, &mut rng, "down1.conv_a", c, 2 * c, false);
        let d1b = add_conv(&mut p, &mut rng, "down1.conv_b", 2 * c, 2 * c, false);
        let d2a = add_conv(&mut p, &mut rng, "down2.conv_a", 2 * c, 4 * c, false);
        let d2b = add_conv(&mut p, &mut rng, "down2.conv_b", 4 * c, 4 * c, false);
        let ma = add_conv(&mut p, &mut rng, "mid.conv_a", 4 * c, 4 * c, false);
        let mb = add_conv(&mut p, &mut rng, "mid.conv_b", 4 * c, 4 * c, false);
        let u1a = add_conv(&mut p, &mut rng, "up1.conv_a", 8 * c, 2 * c, false);
        let u1b = add_conv(&mut p, &mut rng, "up1.conv_b", 2 * c, 2 * c, false);
        let u2a = add_conv(&mut p, &mut rng, "up2.conv_a", 4 * c, c, false);
        let u2b = add_conv(&mut p, &mut rng, "up2.conv_b", c, c, false);
        let out_conv = add_conv(&mut p, &mut rng, "out_conv", c, lc, true);
        let (ed, eh, bl) = (config.embed_dim, config.embed_hidden, config.bias_len());
        let temb = EmbedMlp {
            fc1: add_dense(&mut p, &mut rng, "time_embed.fc1", ed, eh, false),
            fc2: add_dense(&mut p, &mut rng, "time_embed.fc2", eh, bl, false),
        };
        let zero_dt = !config.use_dt;
        let dtemb = EmbedMlp {
            fc1: add_dense(&mut p, &mut rng, "dt_embed.fc1", ed, eh, zero_dt),
            fc2: add_dense(&mut p, &mut rng, "dt_embed.fc2", eh, bl, zero_dt),
        };
        Ok(Denoiser {
            config: config.clone(),
            params: p,
            layout: Layout {
                in_conv,
                d1a,
                d1b,
                d2a,
                d2b,
                ma,
                mb,
                u1a,
                u1b,
                u2a,
                u2b,
                out_conv,
                temb,
                dtemb,
            },
        })
    }

    /// Rebuild a network around existing parameters, checking names and shapes.
    pub fn from_params(config: &DenoiserConfig, params: ParamSet<T>) -> Result<Self> {
        let mut fresh = Denoiser::<T>::init(config, 0)?;
        if fresh.params.tensors.len() != params.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                fresh.params.tensors.len(),
                params.tensors.len()
            )));
        }
        for (a, b) in fresh.params.tensors.iter().zip(&params.tensors) {
            if a.name != b.name || a.shape != b.shape || b.data.len() != a.data.len() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameter indices belonging to the offset embedding branch.
    pub fn dt_param_indices(&self) -> [usize; 4] {
        let d = self.layout.dtemb;
        [d.fc1.w, d.fc1.b, d.fc2.w, d.fc2.b]
    }

    fn mlp_forward(&self, mlp: &EmbedMlp, input: Vec<T>) -> (Vec<T>, MlpCache<T>) {
        let p = &self.params;
        let mut hidden = nn::dense_forward(&input, p.get(mlp.fc1.w), p.get(mlp.fc1.b));
        let hidden_pre = nn::silu_inplace(&mut hidden);
        let out = nn::dense_forward(&hidden, p.get(mlp.fc2.w), p.get(mlp.fc2.b));
        (
            out,
            MlpCache {
                input,
                hidden_pre,
                hidden,
            },
        )
    }

    fn mlp_backward(&self, mlp: &EmbedMlp, cache: &MlpCache<T>, dout: &[T], grads: &mut ParamSet<T>) {
        let p = &self.params;
        let (fc2w, fc2b) = (mlp.fc2.w, mlp.fc2.b);
        let mut dh = {
            let mut dw = std::mem::take(&mut grads.tensors[fc2w].data);
            let mut db = std::mem::take(&mut grads.tensors[fc2b].data);
            let dh = nn::dense_backward(&cache.hidden, dout, p.get(fc2w), &mut dw, &mut db);
            grads.tensors[fc2w].data = dw;
            grads.tensors[fc2b].data = db;
            dh
        };
        nn::silu_backward(&cache.hidden_pre, &mut dh);
        let (fc1w, fc1b) = (mlp.fc1.w, mlp.fc1.b);
        let mut dw = std::mem::take(&mut grads.tensors[fc1w].data);
        let mut db = std::mem::take(&mut grads.tensors[fc1b].data);
        nn::dense_backward(&cache.input, &dh, p.get(fc1w), &mut dw, &mut db);
        grads.tensors[fc1w].data = dw;
        grads.tensors[fc1b].data = db;
    }

    fn split_biases(&self, flat: &[T]) -> BlockBiases<T> {
        let mut off = 0;
        let blocks = self
            .config
            .block_channels()
            .iter()
            .map(|&n| {
                let b = flat[off..off + n].to_vec();
                off += n;
                b
            })
            .collect();
        BlockBiases { blocks }
    }

    fn embed_cached(&self, t: usize, dt_norm: f64) -> (Vec<T>, MlpCache<T>, Option<MlpCache<T>>) {
        let ed = self.config.embed_dim;
        let (mut total, tcache) = self.mlp_forward(&self.layout.temb, nn::sinusoidal(t as f64, ed));
        let dcache = if self.config.use_dt {
            let dt = dt_norm.clamp(-1.0, 1.0) * DT_ENCODER_SCALE;
            let (d, cache) = self.mlp_forward(&self.layout.dtemb, nn::sinusoidal(dt, ed));
            for (a, b) in total.iter_mut().zip(d) {
                *a = *a + b;
            }
            Some(cache)
        } else {
            None
        };
        (total, tcache, dcache)
    }

    /// Sum of the timestep and offset embeddings, split per block.
    pub fn embed(&self, t: usize, dt_norm: f64) -> BlockBiases<T> {
        let (flat, _, _) = self.embed_cached(t, dt_norm);
        self.split_biases(&flat)
    }

    /// Timestep branch alone.
    pub fn time_embedding(&self, t: usize) -> Vec<T> {
        self.mlp_forward(&self.layout.temb, nn::sinusoidal(t as f64, self.config.embed_dim))
            .0
    }

    /// Offset branch alone (zero when the branch is disabled).
    pub fn dt_embedding(&self, dt_norm: f64) -> Vec<T> {
        if !self.config.use_dt {
            return vec![T::zero(); self.config.bias_len()];
        }
        let dt = dt_norm.clamp(-1.0, 1.0) * DT_ENCODER_SCALE;
        self.mlp_forward(&self.layout.dtemb, nn::sinusoidal(dt, self.config.embed_dim))
            .0
    }

    fn conv(&self, layer: Conv, x: &Planes<T>) -> (Planes<T>, Vec<T>) {
        nn::conv3x3_forward(x, self.params.get(layer.w), self.params.get(layer.b), layer.cout)
    }

    /// conv -> (+bias) -> SiLU
    fn conv_act(
        &self,
        layer: Conv,
        x: &Planes<T>,
        bias: Option<&[T]>,
        name: &str,
    ) -> Result<(Planes<T>, ConvCache<T>)> {
        let (mut y, col) = self.conv(layer, x);
        if let Some(b) = bias {
            nn::add_channel_bias(&mut y, b);
        }
        let pre = nn::silu_inplace(&mut y.data);
        nn::ensure_finite(&y.data, name)?;
        Ok((y, ConvCache { col, pre }))
    }

    fn check_input(&self, x: &ConcatLatent<T>) -> Result<()> {
        let (h, w, c) = x.shape();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "denoiser expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "denoiser input {h}x{w} must be a nonzero multiple of 4"
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite denoiser input".into()));
        }
        Ok(())
    }

    /// Predicted noise over both halves of `x`.
    pub fn forward(&self, x: &ConcatLatent<T>, t: usize, dt_norm: f64) -> Result<ConcatLatent<T>> {
        self.forward_cached(x, t, dt_norm).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        x: &ConcatLatent<T>,
        t: usize,
        dt_norm: f64,
    ) -> Result<(ConcatLatent<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let l = &self.layout;
        let (emb, tcache, dcache) = self.embed_cached(t, dt_norm);
        let bias = self.split_biases(&emb);

        let input = Planes::from_hwc(x);
        let (h0, in_col) = self.conv(l.in_conv, &input);
        nn::ensure_finite(&h0.data, "in_conv")?;
        let (a, d1a) = self.conv_act(l.d1a, &h0, Some(&bias.blocks[0]), "down1.conv_a")?;
        let (skip1, d1b) = self.conv_act(l.d1b, &a, None, "down1.conv_b")?;
        let p1 = nn::avg_pool2(&skip1);
        let (a, d2a) = self.conv_act(l.d2a, &p1, Some(&bias.blocks[1]), "down2.conv_a")?;
        let (skip2, d2b) = self.conv_act(l.d2b, &a, None, "down2.conv_b")?;
        let p2 = nn::avg_pool2(&skip2);
        let (a, ma) = self.conv_act(l.ma, &p2, Some(&bias.blocks[2]), "mid.conv_a")?;
        let (m, mb) = self.conv_act(l.mb, &a, None, "mid.conv_b")?;
        let cat = nn::concat_channels(&nn::upsample2(&m), &skip2);
        let (a, u1a) = self.conv_act(l.u1a, &cat, Some(&bias.blocks[3]), "up1.conv_a")?;
        let (u1, u1b) = self.conv_act(l.u1b, &a, None, "up1.conv_b")?;
        let cat = nn::concat_channels(&nn::upsample2(&u1), &skip1);
        let (a, u2a) = self.conv_act(l.u2a, &cat, Some(&bias.blocks[4]), "up2.conv_a")?;
        let (u2, u2b) = self.conv_act(l.u2b, &a, None, "up2.conv_b")?;
        let (out, out_col) = self.conv(l.out_conv, &u2);
        nn::ensure_finite(&out.data, "out_conv")?;

        Ok((
            out.to_hwc(),
            ForwardCache {
                h: x.height(),
                w: x.width(),
                in_conv: in_col,
                d1a,
                d1b,
                d2a,
                d2b,
                ma,
                mb,
                u1a,
                u1b,
                u2a,
                u2b,
                out_conv: out_col,
                temb: tcache,
                dtemb: dcache,
            },
        ))
    }

    fn conv_backward(
        &self,
        layer: Conv,
        col: &[T],
        dy: &Planes<T>,
        grads: &mut ParamSet<T>,
        need_dx: bool,
    ) -> Option<Planes<T>> {
        let mut dw = std::mem::take(&mut grads.tensors[layer.w].data);
        let mut db = std::mem::take(&mut grads.tensors[layer.b].data);
        let dx = nn::conv3x3_backward(col, layer.cin, dy, self.params.get(layer.w), &mut dw, &mut db, need_dx);
        grads.tensors[layer.w].data = dw;
        grads.tensors[layer.b].data = db;
        dx
    }

    /// SiLU then conv backward; returns the input gradient and, for blocks
    /// that receive an embedding bias, the gradient w.r.t. that bias.
    fn conv_act_backward(
        &self,
        layer: Conv,
        cache: &ConvCache<T>,
        mut dy: Planes<T>,
        grads: &mut ParamSet<T>,
    ) -> (Planes<T>, Vec<T>) {
        nn::silu_backward(&cache.pre, &mut dy.data);
        let dbias = nn::channel_sums(&dy);
        let dx = self
            .conv_backward(layer, &cache.col, &dy, grads, true)
            .expect("input gradient requested");
        (dx, dbias)
    }

    /// Accumulate parameter gradients of `<d_out, forward(x)>` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &ConcatLatent<T>, grads: &mut ParamSet<T>) {
        let l = &self.layout;
        let c = self.config.base_channels;
        let dy = Planes::from_hwc(d_out);
        debug_assert_eq!((dy.h, dy.w), (cache.h, cache.w));

        let du2 = self
            .conv_backward(l.out_conv, &cache.out_conv, &dy, grads, true)
            .unwrap();
        let (da, _) = self.conv_act_backward(l.u2b, &cache.u2b, du2, grads);
        let (dcat, db_up2) = self.conv_act_backward(l.u2a, &cache.u2a, da, grads);
        let (dup, mut dskip1) = nn::split_channels(&dcat, 2 * c);
        let du1 = nn::upsample2_backward(&dup);
        let (da, _) = self.conv_act_backward(l.u1b, &cache.u1b, du1, grads);
        let (dcat, db_up1) = self.conv_act_backward(l.u1a, &cache.u1a, da, grads);
        let (dup, mut dskip2) = nn::split_channels(&dcat, 4 * c);
        let dm = nn::upsample2_backward(&dup);
        let (da, _) = self.conv_act_backward(l.mb, &cache.mb, dm, grads);
        let (dp2, db_mid) = self.conv_act_backward(l.ma, &cache.ma, da, grads);
        let dskip2_pool = nn::avg_pool2_backward(&dp2);
        for (a, b) in dskip2.data.iter_mut().zip(dskip2_pool.data) {
            *a = *a + b;
        }
        let (da, _) = self.conv_act_backward(l.d2b, &cache.d2b, dskip2, grads);
        let (dp1, db_down2) = self.conv_act_backward(l.d2a, &cache.d2a, da, grads);
        let dskip1_pool = nn::avg_pool2_backward(&dp1);
        for (a, b) in dskip1.data.iter_mut().zip(dskip1_pool.data) {
            *a = *a + b;
        }
        let (da, _) = self.conv_act_backward(l.d1b, &cache.d1b, dskip1, grads);
        let (dh0, db_down1) = self.conv_act_backward(l.d1a, &cache.d1a, da, grads);
        self.conv_backward(l.in_conv, &cache.in_conv, &dh0, grads, false);

        let demb: Vec<T> = [db_down1, db_down2, db_mid, db_up1, db_up2].concat();
        self.mlp_backward(&l.temb, &cache.temb, &demb, grads);
        if let Some(dc) = &cache.dtemb {
            self.mlp_backward(&l.dtemb, dc, &demb, grads);
        }
    }
}
