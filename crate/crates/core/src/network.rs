//! Three-block convolutional policy mapping a scenario descriptor to antenna
//! positions, precoders and the sensing beamformer.
//!
//! Block 1 is seven conv/ELU/max-pool stages. Block 2 runs two parallel
//! sigmoid convolutions that are averaged over length and scaled into the
//! position boxes. Block 3 is two dense heads over the pooled block-1 features
//! and the block-2 outputs; their outputs are normalized so the power and
//! unit-norm constraints hold exactly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::linalg::CMatrix;
use crate::metrics::BeamformingSet;
use crate::scenario::{Aabb, MaPlacement, PaPlacement, Scenario, SystemConfig};

pub const DEPTH: usize = 7;
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("{0}")]
    OutsideInterval(String),
    #[error("parameter set does not match the network shape: {0}")]
    ParamShape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Whether the antenna positions are learned or held at the fixed layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Proposed,
    FixAnt,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::FixAnt => "fix-ant",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed" => Ok(Variant::Proposed),
            "fix-ant" => Ok(Variant::FixAnt),
            other => Err(format!("unknown variant '{other}' (expected proposed or fix-ant)")),
        }
    }
}

/// Layer sizes derived from a [`SystemConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// C.
    pub channels: usize,
    pub input_len: usize,
    pub n_tx: usize,
    pub users: usize,
    pub n_ma: usize,
    /// 2K·N_k.
    pub ma_head: usize,
    /// 2K·N_t·N_k.
    pub precoder_head: usize,
    /// 2N_t.
    pub beam_head: usize,
    pub waveguide_length: f64,
    pub ma_region: f64,
    pub p_max: f64,
}

impl NetworkConfig {
    pub fn from_system(cfg: &SystemConfig) -> Self {
        let (nt, k, nk) = (cfg.n_tx, cfg.users, cfg.n_ma);
        Self {
            channels: nt + 2 * k * nk + 2 * k * nt * nk + 2 * k * nt,
            input_len: nt + 3 * k + 3 * cfg.scatterers + 3,
            n_tx: nt,
            users: k,
            n_ma: nk,
            ma_head: 2 * k * nk,
            precoder_head: 2 * k * nt * nk,
            beam_head: 2 * nt,
            waveguide_length: cfg.waveguide_length,
            ma_region: cfg.ma_region,
            p_max: cfg.p_max,
        }
    }

    /// Width of the dense-head input: pooled features plus block-2 outputs.
    pub fn dense_input(&self) -> usize {
        self.channels + self.n_tx + self.ma_head
    }

    /// Sequence length after each block-1 stage, starting with the input.
    pub fn lengths(&self) -> Vec<usize> {
        let mut l = vec![self.input_len];
        for _ in 0..DEPTH {
            let last = *l.last().unwrap();
            l.push(last.div_ceil(2));
        }
        l
    }

    /// (name, shape, fan_in, fan_out) of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize, usize)> {
        let c = self.channels;
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, KERNEL], cin * KERNEL, cout * KERNEL));
            out.push((format!("{name}.b"), vec![cout], 0, 0));
        };
        conv("conv1".into(), 2 * c, 1);
        conv("conv2".into(), c, 2 * c);
        for i in 3..=DEPTH {
            conv(format!("conv{i}"), c, c);
        }
        conv("pa".into(), self.n_tx, c);
        conv("ma".into(), self.ma_head, c);
        let d = self.dense_input();
        for (name, width) in [("precoder", self.precoder_head), ("beam", self.beam_head)] {
            out.push((format!("{name}.w"), vec![d, width], d, width));
            out.push((format!("{name}.b"), vec![width], 0, 0));
        }
        out
    }
}

/// Network weights in the order given by [`NetworkConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn check(&self, cfg: &NetworkConfig) -> Result<(), NetworkError> {
        let layout = cfg.layout();
        if layout.len() != self.tensors.len() {
            return Err(NetworkError::ParamShape(format!("{} tensors, expected {}", self.tensors.len(), layout.len())));
        }
        for ((name, shape, _, _), t) in layout.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(NetworkError::ParamShape(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(NetworkError::ParamShape(format!("{name} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Glorot-uniform kernels, zero biases.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = cfg
        .layout()
        .into_iter()
        .map(|(_, shape, fan_in, fan_out)| {
            if fan_in == 0 {
                return Tensor::zeros(&shape);
            }
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(shape, data).expect("layout shape")
        })
        .collect();
    NetworkParams { tensors }
}

fn normalize_into(out: &mut Vec<f64>, value: f64, lo: f64, hi: f64, what: &str) -> Result<(), NetworkError> {
    if !(value >= lo && value <= hi) {
        return Err(NetworkError::OutsideInterval(format!("{what} = {value} outside [{lo}, {hi}]")));
    }
    out.push(if hi > lo { (value - lo) / (hi - lo) } else { 0.0 });
    Ok(())
}

fn push_point(out: &mut Vec<f64>, p: &[f64; 3], b: &Aabb, what: &str) -> Result<(), NetworkError> {
    for axis in 0..3 {
        normalize_into(out, p[axis], b.min[axis], b.max[axis], what)?;
    }
    Ok(())
}

/// Network input `[y_t, b_1..b_K, ξ_1..ξ_L, q_p]`, each element min-max
/// normalized by its feasible interval. `y_t` is the uniform reference grid.
pub fn assemble_and_preprocess(scenario: &Scenario, cfg: &SystemConfig) -> Result<Vec<f64>, NetworkError> {
    if scenario.user_origins.len() != cfg.users || scenario.scatterers.len() != cfg.scatterers {
        return Err(NetworkError::OutsideInterval("scenario does not match the configuration sizes".into()));
    }
    let mut out = Vec::with_capacity(NetworkConfig::from_system(cfg).input_len);
    for y in PaPlacement::uniform(cfg).y {
        normalize_into(&mut out, y, 0.0, cfg.waveguide_length, "y_t")?;
    }
    for (k, (b, bx)) in scenario.user_origins.iter().zip(&cfg.user_boxes).enumerate() {
        push_point(&mut out, b, bx, &format!("user {k} position"))?;
    }
    for (i, s) in scenario.scatterers.iter().enumerate() {
        push_point(&mut out, s, &cfg.scatterer_box, &format!("scatterer {i} position"))?;
    }
    push_point(&mut out, &scenario.target, &cfg.target_box, "target position")?;
    Ok(out)
}

/// Graph handles of the network outputs for a batch of `B` inputs.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    /// `[B, N_t]` PA offsets in `[0, D_t]`.
    pub y_t: Var,
    /// `[B, 2K·N_k]` MA coordinates in `[0, D_k]`, laid out `[k][b][x̃, ỹ]`.
    pub ma: Var,
    /// `[B, 2K·N_t·N_k]` precoders, real parts `[k][n][b]` then imaginary parts.
    pub w: Var,
    /// `[B, 2N_t]` beamformer, real parts then imaginary parts.
    pub v: Var,
}

/// Fixed PA offsets and MA coordinates (flattened like [`NetworkOutput`]).
pub fn fixed_layout(cfg: &NetworkConfig) -> (Vec<f64>, Vec<f64>) {
    let y: Vec<f64> =
        (0..cfg.n_tx).map(|n| n as f64 * cfg.waveguide_length / (cfg.n_tx - 1) as f64).collect();
    let step = if cfg.n_ma > 1 { cfg.ma_region / (cfg.n_ma - 1) as f64 } else { 0.0 };
    let mut ma = Vec::with_capacity(cfg.ma_head);
    for _ in 0..cfg.users {
        for b in 0..cfg.n_ma {
            ma.push(0.5 * cfg.ma_region);
            ma.push(b as f64 * step);
        }
    }
    (y, ma)
}

/// Unit-norm rows of a `[B, n]` tensor.
fn row_normalize(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let n = g.norm(x, 1)?;
    let inv = g.recip(n);
    g.mul(x, inv)
}

fn repeat_rows(g: &mut Graph, row: &[f64], batch: usize) -> Var {
    let data = (0..batch).flat_map(|_| row.iter().copied()).collect();
    g.constant(Tensor::new(vec![batch, row.len()], data).expect("row shape"))
}

/// Runs the network on `input` (`[B, 1, input_len]`).
pub fn forward(
    g: &mut Graph,
    input: Var,
    params: &[Var],
    cfg: &NetworkConfig,
    variant: Variant,
) -> Result<NetworkOutput, NetworkError> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 3 || shape[1] != 1 || shape[2] != cfg.input_len {
        return Err(NetworkError::ParamShape(format!("input shape {shape:?}")));
    }
    if params.len() != cfg.layout().len() {
        return Err(NetworkError::ParamShape(format!("{} parameter handles", params.len())));
    }
    let batch = shape[0];
    let mut h = input;
    for layer in 0..DEPTH {
        let c = g.conv1d(h, params[2 * layer], params[2 * layer + 1])?;
        let e = g.elu(c);
        h = g.maxpool1d(e)?;
    }
    let p = 2 * DEPTH;
    let features = g.gap(h)?;

    let (s_pa, s_ma) = match variant {
        Variant::Proposed => {
            let mut branch = |w: Var, b: Var| -> Result<Var, AutodiffError> {
                let c = g.conv1d(h, w, b)?;
                let s = g.sigmoid(c);
                g.gap(s)
            };
            (branch(params[p], params[p + 1])?, branch(params[p + 2], params[p + 3])?)
        }
        Variant::FixAnt => {
            let (y, ma) = fixed_layout(cfg);
            let y: Vec<f64> = y.iter().map(|v| v / cfg.waveguide_length).collect();
            let ma: Vec<f64> = ma.iter().map(|v| v / cfg.ma_region).collect();
            (repeat_rows(g, &y, batch), repeat_rows(g, &ma, batch))
        }
    };
    let y_t = g.scale(s_pa, cfg.waveguide_length);
    let ma = g.scale(s_ma, cfg.ma_region);

    let z = g.concat(&[features, s_pa, s_ma], 1)?;
    let hw = g.matmul(z, params[p + 4])?;
    let hw = g.add(hw, params[p + 5])?;
    let w_unit = row_normalize(g, hw)?;
    let w = g.scale(w_unit, cfg.p_max.sqrt());
    let hv = g.matmul(z, params[p + 6])?;
    let hv = g.add(hv, params[p + 7])?;
    let v = row_normalize(g, hv)?;
    Ok(NetworkOutput { y_t, ma, w, v })
}

/// One sample's decision in the types used by channel synthesis and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub pa: PaPlacement,
    pub ma: MaPlacement,
    pub beams: BeamformingSet,
}

/// Unpacks sample `b` of a forward pass.
pub fn decision(g: &Graph, out: &NetworkOutput, b: usize, cfg: &NetworkConfig) -> Decision {
    let row = |v: Var| {
        let t = g.value(v);
        let w = t.shape()[1];
        t.data()[b * w..(b + 1) * w].to_vec()
    };
    let (nt, k, nk) = (cfg.n_tx, cfg.users, cfg.n_ma);
    let y = row(out.y_t);
    let m = row(out.ma);
    let local = (0..k).map(|u| (0..nk).map(|a| [m[(u * nk + a) * 2], m[(u * nk + a) * 2 + 1]]).collect()).collect();
    let w = row(out.w);
    let half = k * nt * nk;
    let precoders = (0..k)
        .map(|u| CMatrix::from_fn(nt, nk, |n, a| (w[(u * nt + n) * nk + a], w[half + (u * nt + n) * nk + a])))
        .collect();
    let v = row(out.v);
    let beam = CMatrix::from_fn(nt, 1, |n, _| (v[n], v[nt + n]));
    Decision { pa: PaPlacement { y }, ma: MaPlacement { local }, beams: BeamformingSet { w: precoders, v: beam } }
}

/// Network inputs for a batch of scenarios as a `[B, 1, L]` tensor.
pub fn batch_input(scenarios: &[&Scenario], cfg: &SystemConfig) -> Result<Tensor, NetworkError> {
    let len = NetworkConfig::from_system(cfg).input_len;
    let mut data = Vec::with_capacity(scenarios.len() * len);
    for s in scenarios {
        data.extend(assemble_and_preprocess(s, cfg)?);
    }
    Ok(Tensor::new(vec![scenarios.len(), 1, len], data)?)
}

/// Forward pass without gradients, returning one decision per scenario.
pub fn infer(
    params: &NetworkParams,
    scenarios: &[&Scenario],
    cfg: &SystemConfig,
    variant: Variant,
) -> Result<Vec<Decision>, NetworkError> {
    let ncfg = NetworkConfig::from_system(cfg);
    params.check(&ncfg)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(batch_input(scenarios, cfg)?);
    let out = forward(&mut g, x, &vars, &ncfg, variant)?;
    Ok((0..scenarios.len()).map(|b| decision(&g, &out, b, &ncfg)).collect())
}
