//! Finite-difference suites over the differentiable operations, the blocks
//! and the whole network, run in `f64`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Backend;
use crate::blocks::{
    mefc_forward, msfn_forward, stb_forward, tksa_forward, AttentionParams, MefcParams, MsfnParams, StbParams,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_params_scaled, Coverage, Objective, STEP};
use crate::init::Initializer;
use crate::network::{build_model, downsample, forward, skip_fuse, upsample, Layout, NetworkConfig};
use crate::ops::{kept_count, ConvGeometry, LAYER_NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const THRESHOLD: f64 = 1e-4;

/// Uniform noise in `(-scale, scale)`.
pub fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Replaces every parameter with uniform noise so no gradient is trivially zero.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&shape, seed * 1000 + i as u64, scale);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Network,
}

impl core::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "blocks" => Ok(Self::Blocks),
            "network" => Ok(Self::Network),
            _ => Err(Error::Config(format!(
                "unknown scope {s:?} (ops, blocks, network)"
            ))),
        }
    }
}

/// Worst error of one checked unit over all of its tensors.
#[derive(Clone, Debug)]
pub struct UnitReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl UnitReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub scope: Scope,
    pub seed: u64,
    pub units: Vec<UnitReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.units.iter().all(UnitReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.units.iter().map(|u| u.max_rel_error).fold(0.0, f64::max)
    }
}

/// Names of the units `run` checks for `scope`.
pub fn unit_names(scope: Scope) -> Vec<&'static str> {
    match scope {
        Scope::Ops => OPS.iter().map(|(n, _)| *n).collect(),
        Scope::Blocks => BLOCKS.iter().map(|(n, _)| *n).collect(),
        Scope::Network => vec![NETWORK],
    }
}

/// Runs every unit of `scope`.
pub fn run(scope: Scope, seed: u64) -> Result<SuiteReport> {
    run_with(scope, seed, None)
}

/// Like [`run`], but multiplies the analytic gradient of the unit named
/// `corrupt` by 1.5. This is the negative control: the suite must fail.
pub fn run_with(scope: Scope, seed: u64, corrupt: Option<&str>) -> Result<SuiteReport> {
    if let Some(name) = corrupt {
        if !unit_names(scope).contains(&name) {
            return Err(Error::Config(format!("no unit {name:?} in this scope")));
        }
    }
    let scale = |name: &str| if corrupt == Some(name) { 1.5 } else { 1.0 };
    let mut units = Vec::new();
    match scope {
        Scope::Ops => {
            for (name, kind) in OPS {
                units.push(check_op(name, *kind, seed, scale(name))?);
            }
        }
        Scope::Blocks => {
            for (name, unit) in BLOCKS {
                let (checked, max_rel_error) = unit(seed, scale(name))?;
                units.push(UnitReport {
                    name: name.to_string(),
                    checked,
                    max_rel_error,
                });
            }
        }
        Scope::Network => {
            let (checked, max_rel_error) = network(seed, scale(NETWORK))?;
            units.push(UnitReport {
                name: NETWORK.to_string(),
                checked,
                max_rel_error,
            });
        }
    }
    Ok(SuiteReport { scope, seed, units })
}

fn summarize(
    f: &impl Objective,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    coverage: Coverage,
    scale: f64,
) -> Result<(usize, f64)> {
    let r = check_params_scaled(f, store, x, STEP, coverage, scale)?;
    Ok((r.units.iter().map(|u| u.checked).sum(), r.max_rel_error()))
}

/// Reduces any output to a scalar through a fixed random projection, which
/// keeps the readout smooth.
fn readout<B: Backend<f64>>(b: &mut B, y: &B::Var) -> Result<B::Var> {
    let n: usize = b.shape(y).iter().product();
    let flat = b.reshape(y, &[1, 1, n])?;
    let probe = b.constant(random(&[1, n, 1], 0x5eed, 1.0));
    let p = b.matmul(&flat, &probe, false)?;
    Ok(b.sum(&p))
}

// ---- single operations -------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum OpKind {
    Conv {
        weight: [usize; 4],
        bias: bool,
        geometry: ConvGeometry,
    },
    AvgPool,
    MatMul {
        transpose_b: bool,
    },
    Softmax,
    TopK,
    LayerNorm,
    Relu,
    Add,
    Scale,
    Concat,
    Slice,
    Reshape,
    GlobalAvg,
    WeightedSum,
    Shuffle,
    Unshuffle,
    L1,
    Sum,
}

const fn geom(stride: usize, dilation: usize, padding: usize, groups: usize) -> ConvGeometry {
    ConvGeometry {
        stride,
        dilation,
        padding,
        groups,
    }
}

const OPS: &[(&str, OpKind)] = &[
    (
        "conv2d.strided",
        OpKind::Conv {
            weight: [4, 3, 3, 3],
            bias: true,
            geometry: geom(2, 1, 1, 1),
        },
    ),
    (
        "conv2d.grouped_dilated",
        OpKind::Conv {
            weight: [6, 2, 3, 3],
            bias: false,
            geometry: geom(1, 2, 2, 2),
        },
    ),
    (
        "conv2d.pointwise",
        OpKind::Conv {
            weight: [3, 4, 1, 1],
            bias: true,
            geometry: geom(1, 1, 0, 1),
        },
    ),
    (
        "conv2d.depthwise",
        OpKind::Conv {
            weight: [4, 1, 5, 5],
            bias: false,
            geometry: geom(1, 1, 2, 4),
        },
    ),
    ("avg_pool2d", OpKind::AvgPool),
    ("matmul", OpKind::MatMul { transpose_b: false }),
    ("matmul_bt", OpKind::MatMul { transpose_b: true }),
    ("softmax_rows", OpKind::Softmax),
    ("top_k_mixture", OpKind::TopK),
    ("layer_norm", OpKind::LayerNorm),
    ("relu", OpKind::Relu),
    ("add", OpKind::Add),
    ("scale", OpKind::Scale),
    ("concat_channels", OpKind::Concat),
    ("slice_channels", OpKind::Slice),
    ("reshape", OpKind::Reshape),
    ("global_avg_channels", OpKind::GlobalAvg),
    ("weighted_sum", OpKind::WeightedSum),
    ("pixel_shuffle", OpKind::Shuffle),
    ("pixel_unshuffle", OpKind::Unshuffle),
    ("l1_loss", OpKind::L1),
    ("sum", OpKind::Sum),
];

struct OpObjective {
    kind: OpKind,
    params: Vec<ParamId>,
}

const TOP_K_RATIOS: [f64; 3] = [0.25, 0.5, 1.0];

impl Objective for OpObjective {
    fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let p: Vec<B::Var> = self.params.iter().map(|&id| b.param(id)).collect();
        let y = match self.kind {
            OpKind::Conv { bias, geometry, .. } => b.conv2d(x, &p[0], bias.then(|| &p[1]), geometry)?,
            OpKind::AvgPool => b.avg_pool2d(x, 3, 1, 1)?,
            OpKind::MatMul { transpose_b } => b.matmul(x, &p[0], transpose_b)?,
            OpKind::Softmax => b.softmax_rows(x)?,
            OpKind::TopK => {
                let cols = *b.shape(x).last().expect("matrix");
                let ks: Vec<usize> = TOP_K_RATIOS.iter().map(|&r| kept_count(r, cols)).collect();
                b.top_k_mixture(x, &p[0], &ks)?
            }
            OpKind::LayerNorm => b.layer_norm(x, &p[0], &p[1], LAYER_NORM_EPS)?,
            OpKind::Relu => b.relu(x),
            OpKind::Add => b.add(x, &p[0])?,
            OpKind::Scale => b.scale(x, -1.7),
            OpKind::Concat => b.concat_channels(&[&p[0], x])?,
            OpKind::Slice => b.slice_channels(x, 1, 3)?,
            OpKind::Reshape => b.reshape(x, &[3, 8])?,
            OpKind::GlobalAvg => b.global_avg_channels(x)?,
            OpKind::WeightedSum => b.weighted_sum(&[&p[0], x, &p[1]], &p[2])?,
            OpKind::Shuffle => b.pixel_shuffle(x, 2)?,
            OpKind::Unshuffle => b.pixel_unshuffle(x, 2)?,
            OpKind::L1 => return b.l1_loss(x, &p[0]),
            OpKind::Sum => return Ok(b.sum(x)),
        };
        readout(b, &y)
    }
}

/// Input shape and parameter shapes for each operation.
fn op_shapes(kind: OpKind) -> (Vec<usize>, Vec<Vec<usize>>) {
    match kind {
        OpKind::Conv {
            weight,
            bias,
            geometry,
        } => {
            let cin = weight[1] * geometry.groups;
            let mut params = vec![weight.to_vec()];
            if bias {
                params.push(vec![weight[0]]);
            }
            (vec![cin, 6, 7], params)
        }
        OpKind::AvgPool => (vec![2, 5, 5], vec![]),
        OpKind::MatMul { transpose_b: false } => (vec![2, 3, 4], vec![vec![2, 4, 5]]),
        OpKind::MatMul { transpose_b: true } => (vec![2, 3, 4], vec![vec![2, 5, 4]]),
        OpKind::Softmax => (vec![2, 3, 5], vec![]),
        OpKind::TopK => (vec![2, 4, 8], vec![vec![TOP_K_RATIOS.len()]]),
        OpKind::LayerNorm => (vec![4, 3, 3], vec![vec![4], vec![4]]),
        OpKind::Relu | OpKind::Scale => (vec![2, 3, 3], vec![]),
        OpKind::Add => (vec![2, 3, 3], vec![vec![2, 3, 3]]),
        OpKind::Concat => (vec![2, 3, 3], vec![vec![3, 3, 3]]),
        OpKind::Slice => (vec![5, 3, 3], vec![]),
        OpKind::Reshape => (vec![2, 3, 4], vec![]),
        OpKind::GlobalAvg => (vec![3, 4, 4], vec![]),
        OpKind::WeightedSum => (vec![2, 3, 3], vec![vec![2, 3, 3], vec![2, 3, 3], vec![3]]),
        OpKind::Shuffle => (vec![8, 2, 3], vec![]),
        OpKind::Unshuffle => (vec![2, 4, 6], vec![]),
        OpKind::L1 => (vec![2, 3, 3], vec![vec![2, 3, 3]]),
        OpKind::Sum => (vec![2, 3], vec![]),
    }
}

fn check_op(name: &str, kind: OpKind, seed: u64, scale: f64) -> Result<UnitReport> {
    let (input, shapes) = op_shapes(kind);
    let mut store = ParamStore::new();
    let params = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random(s, seed * 7919 + i as u64 + 1, 1.0)))
        .collect();
    let x = random(&input, seed * 7919, 1.0);
    let f = OpObjective { kind, params };
    let (checked, max_rel_error) = summarize(&f, &store, &x, Coverage::All, scale)?;
    Ok(UnitReport {
        name: name.to_string(),
        checked,
        max_rel_error,
    })
}

// ---- blocks ----------------------------------------------------------------

type BlockUnit = fn(u64, f64) -> Result<(usize, f64)>;

const BLOCKS: &[(&str, BlockUnit)] = &[
    ("tksa", tksa),
    ("msfn", msfn),
    ("mefc", mefc),
    ("stb", stb),
    ("downsample", resample_down),
    ("upsample", resample_up),
    ("skip_fuse", skip),
    ("l1_loss", l1),
];

/// L1 against a fixed target, the training objective.
struct Against<F>(F, Tensor<f64>);

impl<F> Against<F> {
    fn target<B: Backend<f64>>(&self, b: &mut B, y: &B::Var) -> Result<B::Var> {
        let t = b.constant(self.1.clone());
        b.l1_loss(y, &t)
    }
}

macro_rules! block_objective {
    ($params:ty, $forward:ident) => {
        impl Objective for Against<&$params> {
            fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
                let y = $forward(b, x, self.0)?;
                self.target(b, &y)
            }
        }
    };
}

block_objective!(AttentionParams, tksa_forward);
block_objective!(MsfnParams, msfn_forward);
block_objective!(MefcParams, mefc_forward);
block_objective!(StbParams, stb_forward);

fn block_check<P>(
    build: impl FnOnce(&mut Initializer<'_, f64>) -> Result<P>,
    shape: &[usize],
    seed: u64,
    scale: f64,
) -> Result<(usize, f64)>
where
    for<'p> Against<&'p P>: Objective,
{
    let mut store = ParamStore::new();
    let p = build(&mut Initializer::new(&mut store, seed))?;
    randomize(&mut store, seed + 1, 0.8);
    let x = random(shape, seed + 2, 1.0);
    let f = Against(&p, random(shape, seed + 3, 1.0));
    summarize(&f, &store, &x, Coverage::All, scale)
}

fn tksa(seed: u64, scale: f64) -> Result<(usize, f64)> {
    block_check(
        |i| AttentionParams::build(i, "attn", 8, 2, &[0.5, 0.75, 1.0]),
        &[8, 3, 3],
        seed,
        scale,
    )
}

fn msfn(seed: u64, scale: f64) -> Result<(usize, f64)> {
    block_check(|i| MsfnParams::build(i, "ffn", 3, 1.5), &[3, 4, 4], seed, scale)
}

fn mefc(seed: u64, scale: f64) -> Result<(usize, f64)> {
    block_check(|i| MefcParams::build(i, "mefc", 3, 8, 4), &[3, 5, 5], seed, scale)
}

fn stb(seed: u64, scale: f64) -> Result<(usize, f64)> {
    block_check(
        |i| StbParams::build(i, "stb", 4, 2, &[0.5, 1.0], 1.5),
        &[4, 3, 4],
        seed,
        scale,
    )
}

#[derive(Clone, Copy)]
enum Resample {
    Down(ParamId),
    Up(ParamId),
    Skip(ParamId, ParamId),
}

impl Objective for Against<Resample> {
    fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let y = match self.0 {
            Resample::Down(w) => downsample(b, x, w)?,
            Resample::Up(w) => upsample(b, x, w)?,
            Resample::Skip(encoder, w) => {
                let e = b.param(encoder);
                skip_fuse(b, x, &e, w)?
            }
        };
        self.target(b, &y)
    }
}

fn resample_check(
    shape: [usize; 3],
    out: [usize; 3],
    params: &[Vec<usize>],
    make: impl FnOnce(&[ParamId]) -> Resample,
    seed: u64,
    scale: f64,
) -> Result<(usize, f64)> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("w{i}"), random(s, seed * 31 + i as u64, 0.8)))
        .collect();
    let f = Against(make(&ids), random(&out, seed + 5, 1.0));
    summarize(&f, &store, &random(&shape, seed + 6, 1.0), Coverage::All, scale)
}

fn resample_down(seed: u64, scale: f64) -> Result<(usize, f64)> {
    resample_check(
        [2, 4, 6],
        [4, 2, 3],
        &[vec![4, 8, 1, 1]],
        |p| Resample::Down(p[0]),
        seed,
        scale,
    )
}

fn resample_up(seed: u64, scale: f64) -> Result<(usize, f64)> {
    resample_check(
        [4, 2, 3],
        [2, 4, 6],
        &[vec![8, 4, 1, 1]],
        |p| Resample::Up(p[0]),
        seed,
        scale,
    )
}

fn skip(seed: u64, scale: f64) -> Result<(usize, f64)> {
    resample_check(
        [2, 3, 4],
        [2, 3, 4],
        &[vec![2, 3, 4], vec![2, 4, 1, 1]],
        |p| Resample::Skip(p[0], p[1]),
        seed,
        scale,
    )
}

struct L1Target(ParamId);

impl Objective for L1Target {
    fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let t = b.param(self.0);
        b.l1_loss(x, &t)
    }
}

fn l1(seed: u64, scale: f64) -> Result<(usize, f64)> {
    let mut store = ParamStore::new();
    let t = store.add("target", random(&[3, 4, 4], seed + 9, 1.0));
    summarize(
        &L1Target(t),
        &store,
        &random(&[3, 4, 4], seed + 10, 1.0),
        Coverage::All,
        scale,
    )
}

// ---- network ---------------------------------------------------------------

const NETWORK: &str = "network.smoke";

struct EndToEnd<'a>(&'a Layout, Tensor<f64>);

impl Objective for EndToEnd<'_> {
    fn eval<B: Backend<f64>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let y = forward(b, self.0, x)?;
        let t = b.constant(self.1.clone());
        b.l1_loss(&y, &t)
    }
}

fn network(seed: u64, scale: f64) -> Result<(usize, f64)> {
    let m = build_model::<f64>(&NetworkConfig::smoke(), seed)?;
    let mut store = m.store.clone();
    randomize(&mut store, seed + 1, 0.3);
    let x = random(&[3, 8, 8], seed + 2, 0.5).map(|v| v + 0.5);
    let f = EndToEnd(&m.layout, random(&[3, 8, 8], seed + 3, 0.5).map(|v| v + 0.5));
    summarize(&f, &store, &x, Coverage::Sample { per_tensor: 4, seed }, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_passes_and_lists_every_unit() {
        let r = run(Scope::Ops, 0).unwrap();
        let names: Vec<&str> = r.units.iter().map(|u| u.name.as_str()).collect();
        assert_eq!(names, unit_names(Scope::Ops));
        assert!(r.passed(), "{r:?}");
        assert!(r.units.iter().all(|u| u.checked > 0));
    }

    #[test]
    fn corrupted_unit_fails() {
        let r = run_with(Scope::Ops, 1, Some("layer_norm")).unwrap();
        assert!(!r.passed());
        let bad: Vec<&str> = r
            .units
            .iter()
            .filter(|u| !u.passed())
            .map(|u| u.name.as_str())
            .collect();
        assert_eq!(bad, ["layer_norm"]);
        assert!(run_with(Scope::Ops, 1, Some("nope")).is_err());
    }

    #[test]
    fn blocks_suite_passes() {
        let r = run(Scope::Blocks, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
