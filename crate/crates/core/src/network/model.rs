use alloc::format;
use alloc::vec::Vec;

use super::config::{NetworkConfig, LEVELS};
use crate::autodiff::{Backend, Eval};
use crate::blocks::{conv, mefc_forward, stb_forward, MefcParams, StbParams};
use crate::error::{arg_err, shape_err, Result};
use crate::init::Initializer;
use crate::ops::ConvGeometry;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Spatial extents must be divisible by this.
pub const SIZE_MULTIPLE: usize = 1 << (LEVELS - 1);

/// Where each parameter of the network lives in the store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub patch_embed: (ParamId, ParamId),
    pub mefc_pre: Vec<MefcParams>,
    /// Levels 1..=4 on the way down; the last entry is the bottleneck.
    pub encoder: [Vec<StbParams>; LEVELS],
    /// `down[l]`: level `l+1` to `l+2`, `[2c, 4c, 1, 1]`.
    pub down: [ParamId; LEVELS - 1],
    /// `up[l]`: level `l+2` to `l+1`, `[4c, 2c, 1, 1]` before the shuffle.
    pub up: [ParamId; LEVELS - 1],
    /// `fuse[l]`: `[c, 2c, 1, 1]` merging the skip at level `l+1`.
    pub fuse: [ParamId; LEVELS - 1],
    /// Decoder stacks for levels 1..=3.
    pub decoder: [Vec<StbParams>; LEVELS - 1],
    pub mefc_post: Vec<MefcParams>,
    pub output: (ParamId, ParamId),
}

/// Parameters plus the structure that interprets them.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

/// Feature boundaries reported by [`forward_traced`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Embedded,
    Encoder(usize),
    Decoder(usize),
    Compensated,
}

fn stack<T: Real>(
    init: &mut Initializer<'_, T>,
    prefix: &str,
    n: usize,
    c: usize,
    heads: usize,
    cfg: &NetworkConfig,
) -> Result<Vec<StbParams>> {
    (0..n)
        .map(|i| {
            StbParams::build(
                init,
                &format!("{prefix}.{i}"),
                c,
                heads,
                &cfg.ratios,
                cfg.ffn_ratio,
            )
        })
        .collect()
}

fn mefcs<T: Real>(
    init: &mut Initializer<'_, T>,
    prefix: &str,
    cfg: &NetworkConfig,
) -> Result<Vec<MefcParams>> {
    let n = if cfg.mefc { cfg.mefc_blocks } else { 0 };
    (0..n)
        .map(|i| {
            MefcParams::build(
                init,
                &format!("{prefix}.{i}"),
                cfg.channels,
                cfg.experts,
                cfg.gate_hidden,
            )
        })
        .collect()
}

/// Builds and initializes every parameter deterministically from `seed`.
pub fn build_model<T: Real>(config: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let cfg = config;
    let c0 = cfg.channels;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, seed);
    let patch_embed = (
        init.weight("patch_embed.weight", [c0, 3, 3, 3]),
        init.zeros("patch_embed.bias", [c0]),
    );
    let mefc_pre = mefcs(&mut init, "mefc_pre", cfg)?;
    let mut encoder: [Vec<StbParams>; LEVELS] = Default::default();
    for (l, slot) in encoder.iter_mut().enumerate() {
        let name = if l + 1 == LEVELS {
            "bottleneck".into()
        } else {
            format!("encoder{}", l + 1)
        };
        *slot = stack(
            &mut init,
            &name,
            cfg.depths[l],
            cfg.level_channels(l),
            cfg.heads[l],
            cfg,
        )?;
    }
    let down = core::array::from_fn(|l| {
        let c = cfg.level_channels(l);
        init.weight(format!("down{}", l + 1), [2 * c, 4 * c, 1, 1])
    });
    let mut up = [ParamId(0); LEVELS - 1];
    let mut fuse = [ParamId(0); LEVELS - 1];
    let mut decoder: [Vec<StbParams>; LEVELS - 1] = Default::default();
    for l in (0..LEVELS - 1).rev() {
        let c = cfg.level_channels(l);
        up[l] = init.weight(format!("up{}", l + 1), [4 * c, 2 * c, 1, 1]);
        fuse[l] = init.weight(format!("fuse{}", l + 1), [c, 2 * c, 1, 1]);
        decoder[l] = stack(
            &mut init,
            &format!("decoder{}", l + 1),
            cfg.depths[l],
            c,
            cfg.heads[l],
            cfg,
        )?;
    }
    let mefc_post = mefcs(&mut init, "mefc_post", cfg)?;
    let output = (
        init.weight("output.weight", [3, c0, 3, 3]),
        init.zeros("output.bias", [3]),
    );
    Ok(Model {
        config: config.clone(),
        store,
        layout: Layout {
            patch_embed,
            mefc_pre,
            encoder,
            down,
            up,
            fuse,
            decoder,
            mefc_post,
            output,
        },
    })
}

/// Pixel-unshuffle by 2, then `4c → 2c` pointwise.
pub fn downsample<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, weight: ParamId) -> Result<B::Var> {
    let u = b.pixel_unshuffle(x, 2)?;
    conv(b, &u, weight, None, ConvGeometry::pointwise())
}

/// `c → 2c` pointwise, then pixel-shuffle by 2 down to `c / 2`.
pub fn upsample<T: Real, B: Backend<T>>(b: &mut B, x: &B::Var, weight: ParamId) -> Result<B::Var> {
    let y = conv(b, x, weight, None, ConvGeometry::pointwise())?;
    b.pixel_shuffle(&y, 2)
}

/// Concatenates decoder and encoder features and reduces back to the decoder width.
pub fn skip_fuse<T: Real, B: Backend<T>>(
    b: &mut B,
    decoder: &B::Var,
    encoder: &B::Var,
    weight: ParamId,
) -> Result<B::Var> {
    let (d, e) = (b.shape(decoder), b.shape(encoder));
    if d.len() != 3 || e.len() != 3 || d[1..] != e[1..] {
        return Err(shape_err("skip_fuse", format!("spatial mismatch {d:?} vs {e:?}")));
    }
    let cat = b.concat_channels(&[decoder, encoder])?;
    conv(b, &cat, weight, None, ConvGeometry::pointwise())
}

/// Residual restoration `F(x) + x` of a `[3, H, W]` image.
pub fn forward<T: Real, B: Backend<T>>(b: &mut B, layout: &Layout, x: &B::Var) -> Result<B::Var> {
    forward_traced(b, layout, x, &mut |_, _| {})
}

/// [`forward`], reporting the shape at every level boundary.
pub fn forward_traced<T: Real, B: Backend<T>>(
    b: &mut B,
    layout: &Layout,
    x: &B::Var,
    trace: &mut dyn FnMut(Stage, &[usize]),
) -> Result<B::Var> {
    let shape = b.shape(x).to_vec();
    match shape[..] {
        [3, h, w] if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 && h > 0 && w > 0 => {}
        [3, h, w] => {
            return Err(arg_err(
                "forward",
                format!(
                "{h}x{w} is not a multiple of {SIZE_MULTIPLE}; pad the image (reflect) and crop the result"
            ),
            ))
        }
        _ => return Err(shape_err("forward", format!("expected [3, H, W], got {shape:?}"))),
    }
    let blocks = |b: &mut B, mut f: B::Var, stbs: &[StbParams]| -> Result<B::Var> {
        for p in stbs {
            f = stb_forward(b, &f, p)?;
        }
        Ok(f)
    };
    let geom3 = ConvGeometry::same(3, 1, 1);
    let mut f = conv(b, x, layout.patch_embed.0, Some(layout.patch_embed.1), geom3)?;
    trace(Stage::Embedded, b.shape(&f));
    for m in &layout.mefc_pre {
        f = mefc_forward(b, &f, m)?;
    }
    let mut skips = Vec::with_capacity(LEVELS - 1);
    for l in 0..LEVELS {
        f = blocks(b, f, &layout.encoder[l])?;
        trace(Stage::Encoder(l + 1), b.shape(&f));
        if l + 1 < LEVELS {
            let d = downsample(b, &f, layout.down[l])?;
            skips.push(f);
            f = d;
        }
    }
    for l in (0..LEVELS - 1).rev() {
        let u = upsample(b, &f, layout.up[l])?;
        let skip = skips.pop().expect("one skip per level");
        let u = skip_fuse(b, &u, &skip, layout.fuse[l])?;
        f = blocks(b, u, &layout.decoder[l])?;
        trace(Stage::Decoder(l + 1), b.shape(&f));
    }
    for m in &layout.mefc_post {
        f = mefc_forward(b, &f, m)?;
    }
    trace(Stage::Compensated, b.shape(&f));
    let out = conv(b, &f, layout.output.0, Some(layout.output.1), geom3)?;
    b.add(&out, x)
}

impl<T: Real> Model<T> {
    /// Inference on one image without recording gradients.
    pub fn derain(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut b = Eval::new(&self.store);
        let xv = b.constant(x.clone());
        Ok(forward(&mut b, &self.layout, &xv)?.into_owned())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }
}
