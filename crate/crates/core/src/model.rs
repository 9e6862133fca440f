//! The update network, the goal encoders and the forward dynamics.
//!
//! One step perturbs the hidden channels of live cells by the encoded goal,
//! perceives each cell's 3x3 neighborhood through three learned depthwise
//! kernels per channel, maps the features through three per-cell affine
//! layers (rectifier after the first two), and adds the result to the state
//! of the cells that fire. Cells that were dead before the step or are dead
//! after it are zeroed, and everything else is clamped to the clip range.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{StepRecord, Tape};
use crate::error::{Error, Result};
use crate::grid::{AliveMask, CellGrid, RGBA};
use crate::linalg::{gemm, Layout};

/// Width of the two hidden 1x1 layers.
pub const HIDDEN_WIDTH: usize = 64;
/// Width of the two hidden layers of the MLP goal encoder.
pub const ENCODER_WIDTH: usize = 32;
/// Learned kernels per cell channel.
pub const KERNELS_PER_CHANNEL: usize = 3;

/// Dense affine map `y = x·W + b` with `W` stored inputs×outputs row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±1/sqrt(inputs)` for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        d.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        d.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        d
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs
    }

    /// Single-vector forward pass.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
                for (yo, w) in y.iter_mut().zip(row) {
                    *yo += xi * w;
                }
            }
        }
        y
    }

    /// Batched forward pass over `n` row-major inputs.
    pub(crate) fn forward_batch(&self, n: usize, x: &[f32], out: &mut Vec<f32>) {
        out.clear();
        out.reserve(n * self.outputs);
        for _ in 0..n {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            n,
            self.inputs,
            self.outputs,
            x,
            Layout::row_major(self.inputs),
            &self.weight,
            Layout::row_major(self.outputs),
            1.0,
            out,
        );
    }
}

/// Parameters of the per-cell update rule for `channels` cell channels.
#[derive(Clone, Debug, PartialEq)]
pub struct NcaParams {
    pub channels: usize,
    /// `3C` kernels of 3x3 weights; kernel `j` reads cell channel `j / 3`.
    pub perception_kernels: Vec<f32>,
    pub perception_bias: Vec<f32>,
    pub layer1: Dense,
    pub layer2: Dense,
    pub layer3: Dense,
}

impl NcaParams {
    pub fn zeros(channels: usize) -> Self {
        let features = KERNELS_PER_CHANNEL * channels;
        Self {
            channels,
            perception_kernels: vec![0.0; features * 9],
            perception_bias: vec![0.0; features],
            layer1: Dense::zeros(features, HIDDEN_WIDTH),
            layer2: Dense::zeros(HIDDEN_WIDTH, HIDDEN_WIDTH),
            layer3: Dense::zeros(HIDDEN_WIDTH, channels),
        }
    }

    /// Random initialization with an all-zero output layer, so a fresh
    /// network proposes no updates.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let features = KERNELS_PER_CHANNEL * channels;
        let bound = 1.0 / 3.0;
        let mut p = Self::zeros(channels);
        p.perception_kernels
            .iter_mut()
            .chain(p.perception_bias.iter_mut())
            .for_each(|w| *w = rng.random_range(-bound..bound));
        p.layer1 = Dense::uniform(features, HIDDEN_WIDTH, rng);
        p.layer2 = Dense::uniform(HIDDEN_WIDTH, HIDDEN_WIDTH, rng);
        p
    }

    pub fn features(&self) -> usize {
        KERNELS_PER_CHANNEL * self.channels
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// `27C + 3C + (3C·64 + 64) + (64·64 + 64) + (64·C + C)`.
    pub fn closed_form_count(channels: usize) -> usize {
        let c = channels;
        let h = HIDDEN_WIDTH;
        27 * c + 3 * c + (3 * c * h + h) + (h * h + h) + (h * c + c)
    }

    pub fn arrays(&self) -> Vec<&[f32]> {
        vec![
            &self.perception_kernels,
            &self.perception_bias,
            &self.layer1.weight,
            &self.layer1.bias,
            &self.layer2.weight,
            &self.layer2.bias,
            &self.layer3.weight,
            &self.layer3.bias,
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            &mut self.perception_kernels,
            &mut self.perception_bias,
            &mut self.layer1.weight,
            &mut self.layer1.bias,
            &mut self.layer2.weight,
            &mut self.layer2.bias,
            &mut self.layer3.weight,
            &mut self.layer3.bias,
        ]
    }

    pub fn array_names() -> [&'static str; 8] {
        [
            "perception.kernels",
            "perception.bias",
            "layer1.weight",
            "layer1.bias",
            "layer2.weight",
            "layer2.bias",
            "layer3.weight",
            "layer3.bias",
        ]
    }

    pub fn same_shape(&self, other: &NcaParams) -> bool {
        self.channels == other.channels
            && self.layer1.same_shape(&other.layer1)
            && self.layer2.same_shape(&other.layer2)
            && self.layer3.same_shape(&other.layer3)
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Lookup table, one learned row per goal.
    Embedding,
    /// one-hot → 32 → 32 → n_hidden with rectifiers between layers.
    Mlp3,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Embedding => "embedding",
            EncoderKind::Mlp3 => "mlp3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(EncoderKind::Embedding),
            "mlp3" => Ok(EncoderKind::Mlp3),
            other => Err(Error::InvalidValue(format!(
                "unknown encoder '{other}' (expected embedding or mlp3)"
            ))),
        }
    }
}

/// Maps a goal id to the perturbation added to live cells' hidden channels.
#[derive(Clone, Debug, PartialEq)]
pub enum GoalEncoder {
    Embedding {
        n_goals: usize,
        n_hidden: usize,
        table: Vec<f32>,
    },
    Mlp3 {
        n_goals: usize,
        n_hidden: usize,
        layers: [Dense; 3],
    },
}

impl GoalEncoder {
    pub fn zeros(kind: EncoderKind, n_goals: usize, n_hidden: usize) -> Self {
        match kind {
            EncoderKind::Embedding => GoalEncoder::Embedding {
                n_goals,
                n_hidden,
                table: vec![0.0; n_goals * n_hidden],
            },
            EncoderKind::Mlp3 => GoalEncoder::Mlp3 {
                n_goals,
                n_hidden,
                layers: [
                    Dense::zeros(n_goals, ENCODER_WIDTH),
                    Dense::zeros(ENCODER_WIDTH, ENCODER_WIDTH),
                    Dense::zeros(ENCODER_WIDTH, n_hidden),
                ],
            },
        }
    }

    /// Embedding rows are drawn from N(0, 0.1²); MLP layers use the uniform
    /// fan-in initialization.
    pub fn init<R: Rng + ?Sized>(kind: EncoderKind, n_goals: usize, n_hidden: usize, rng: &mut R) -> Self {
        match kind {
            EncoderKind::Embedding => {
                let table = (0..n_goals * n_hidden)
                    .map(|_| 0.1 * Distribution::<f32>::sample(&StandardNormal, rng))
                    .collect::<Vec<f32>>();
                GoalEncoder::Embedding {
                    n_goals,
                    n_hidden,
                    table,
                }
            }
            EncoderKind::Mlp3 => GoalEncoder::Mlp3 {
                n_goals,
                n_hidden,
                layers: [
                    Dense::uniform(n_goals, ENCODER_WIDTH, rng),
                    Dense::uniform(ENCODER_WIDTH, ENCODER_WIDTH, rng),
                    Dense::uniform(ENCODER_WIDTH, n_hidden, rng),
                ],
            },
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            GoalEncoder::Embedding { .. } => EncoderKind::Embedding,
            GoalEncoder::Mlp3 { .. } => EncoderKind::Mlp3,
        }
    }

    pub fn n_goals(&self) -> usize {
        match self {
            GoalEncoder::Embedding { n_goals, .. } | GoalEncoder::Mlp3 { n_goals, .. } => *n_goals,
        }
    }

    pub fn n_hidden(&self) -> usize {
        match self {
            GoalEncoder::Embedding { n_hidden, .. } | GoalEncoder::Mlp3 { n_hidden, .. } => *n_hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn arrays(&self) -> Vec<&[f32]> {
        match self {
            GoalEncoder::Embedding { table, .. } => vec![table],
            GoalEncoder::Mlp3 { layers, .. } => layers
                .iter()
                .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
                .collect(),
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            GoalEncoder::Embedding { table, .. } => vec![table],
            GoalEncoder::Mlp3 { layers, .. } => layers
                .iter_mut()
                .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
                .collect(),
        }
    }

    pub fn array_names(&self) -> Vec<&'static str> {
        match self {
            GoalEncoder::Embedding { .. } => vec!["encoder.table"],
            GoalEncoder::Mlp3 { .. } => vec![
                "encoder.layer1.weight",
                "encoder.layer1.bias",
                "encoder.layer2.weight",
                "encoder.layer2.bias",
                "encoder.layer3.weight",
                "encoder.layer3.bias",
            ],
        }
    }

    pub fn same_shape(&self, other: &GoalEncoder) -> bool {
        self.kind() == other.kind() && self.n_goals() == other.n_goals() && self.n_hidden() == other.n_hidden()
    }

    pub fn encode(&self, goal: usize) -> Result<Vec<f32>> {
        Ok(self.encode_traced(goal)?.output)
    }

    /// Forward pass keeping the hidden pre-activations of the MLP variant.
    pub(crate) fn encode_traced(&self, goal: usize) -> Result<EncoderTrace> {
        let n_goals = self.n_goals();
        if goal >= n_goals {
            return Err(Error::GoalOutOfRange { goal, n_goals });
        }
        Ok(match self {
            GoalEncoder::Embedding { n_hidden, table, .. } => EncoderTrace {
                output: table[goal * n_hidden..(goal + 1) * n_hidden].to_vec(),
                pre1: Vec::new(),
                pre2: Vec::new(),
            },
            GoalEncoder::Mlp3 { layers, .. } => {
                let mut one_hot = vec![0.0; n_goals];
                one_hot[goal] = 1.0;
                let pre1 = layers[0].apply(&one_hot);
                let pre2 = layers[1].apply(&relu(&pre1));
                let output = layers[2].apply(&relu(&pre2));
                EncoderTrace { output, pre1, pre2 }
            }
        })
    }
}

pub(crate) struct EncoderTrace {
    pub output: Vec<f32>,
    pub pre1: Vec<f32>,
    pub pre2: Vec<f32>,
}

fn relu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|x| x.max(0.0)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    /// Probability that a live cell applies its update in a step.
    pub fire_rate: f32,
    /// Probability that a live cell receives the goal perturbation in a step.
    pub goal_rate: f32,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            fire_rate: 1.0,
            goal_rate: 1.0,
        }
    }
}

impl StepConfig {
    pub fn new(fire_rate: f32, goal_rate: f32) -> Result<Self> {
        let cfg = Self { fire_rate, goal_rate };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fire_rate", self.fire_rate), ("goal_rate", self.goal_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidValue(format!("{name} {v} out of [0,1]")));
            }
        }
        Ok(())
    }
}

/// One Bernoulli draw per cell. Rates of exactly 0 or 1 consume no randomness.
pub fn sample_bits<R: Rng + ?Sized>(rng: &mut R, rate: f32, n: usize) -> Vec<bool> {
    if rate >= 1.0 {
        vec![true; n]
    } else if rate <= 0.0 {
        vec![false; n]
    } else {
        (0..n).map(|_| rng.random::<f32>() < rate).collect()
    }
}

/// Perturbation bits actually applied: selected and alive.
pub(crate) fn goal_recipients(selected: &[bool], alive: &AliveMask) -> Vec<bool> {
    selected.iter().zip(alive.bits()).map(|(s, a)| *s && *a).collect()
}

pub(crate) fn add_perturbation(grid: &mut CellGrid, pvec: &[f32], recipients: &[bool]) {
    let n = grid.plane_len();
    for (h, &p) in pvec.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let plane = grid.channel_mut(RGBA + h);
        for i in 0..n {
            if recipients[i] {
                plane[i] += p;
            }
        }
    }
}

/// Add `pvec` to the hidden channels of live cells selected with probability `goal_rate`.
pub fn perturb_hidden<R: Rng + ?Sized>(
    grid: &CellGrid,
    pvec: &[f32],
    mask: &AliveMask,
    goal_rate: f32,
    rng: &mut R,
) -> Result<CellGrid> {
    if pvec.len() != grid.n_hidden() {
        return Err(Error::DimensionMismatch(format!(
            "perturbation has {} entries, grid has {} hidden channels",
            pvec.len(),
            grid.n_hidden()
        )));
    }
    let selected = sample_bits(rng, goal_rate, grid.plane_len());
    let mut out = grid.clone();
    add_perturbation(&mut out, pvec, &goal_recipients(&selected, mask));
    Ok(out)
}

/// Channel planes copied into a zero border one cell wide.
pub(crate) struct Padded {
    pub data: Vec<f32>,
    pub pw: usize,
    pub plane: usize,
}

impl Padded {
    pub fn new(grid: &CellGrid) -> Self {
        let (h, w) = (grid.height(), grid.width());
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut data = vec![0.0; grid.channels() * plane];
        for c in 0..grid.channels() {
            let src = grid.channel(c);
            for y in 0..h {
                let at = c * plane + (y + 1) * pw + 1;
                data[at..at + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        Self { data, pw, plane }
    }

    /// Offset of the top-left neighbor of cell `i` in channel 0.
    #[inline]
    pub fn corner(&self, i: usize, w: usize) -> usize {
        (i / w) * self.pw + i % w
    }

    #[inline]
    pub fn patch(&self, c: usize, corner: usize) -> [f32; 9] {
        let b = c * self.plane + corner;
        let (r0, r1, r2) = (b, b + self.pw, b + 2 * self.pw);
        let d = &self.data;
        [
            d[r0],
            d[r0 + 1],
            d[r0 + 2],
            d[r1],
            d[r1 + 1],
            d[r1 + 2],
            d[r2],
            d[r2 + 1],
            d[r2 + 2],
        ]
    }
}

#[inline]
pub(crate) fn dot9(a: &[f32], b: &[f32; 9]) -> f32 {
    let a: &[f32; 9] = a.try_into().expect("3x3 kernel");
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3] + a[4] * b[4] + a[5] * b[5] + a[6] * b[6] + a[7] * b[7] + a[8] * b[8]
}

/// Perception rows (`3C` values each) for the listed cells.
pub(crate) fn perceive_cells(grid: &CellGrid, params: &NcaParams, cells: &[u32], out: &mut [f32]) {
    let w = grid.width();
    let f = params.features();
    let padded = Padded::new(grid);
    let kernels = &params.perception_kernels;
    let bias = &params.perception_bias;
    for (row, &i) in out.chunks_exact_mut(f.max(1)).zip(cells) {
        let corner = padded.corner(i as usize, w);
        for c in 0..grid.channels() {
            let patch = padded.patch(c, corner);
            for k in 0..KERNELS_PER_CHANNEL {
                let j = c * KERNELS_PER_CHANNEL + k;
                row[j] = bias[j] + dot9(&kernels[j * 9..j * 9 + 9], &patch);
            }
        }
    }
}

/// Full perception field, `3C × H × W`, zero padded at the borders.
pub fn perceive(grid: &CellGrid, params: &NcaParams) -> Result<Vec<f32>> {
    check_channels(grid, params)?;
    let f = params.features();
    let n = grid.plane_len();
    let cells: Vec<u32> = (0..n as u32).collect();
    let mut rows = vec![0.0; n * f];
    perceive_cells(grid, params, &cells, &mut rows);
    let mut out = vec![0.0; f * n];
    for (i, row) in rows.chunks_exact(f.max(1)).enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j * n + i] = *v;
        }
    }
    Ok(out)
}

fn check_channels(grid: &CellGrid, params: &NcaParams) -> Result<()> {
    if grid.channels() != params.channels {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} channels, parameters expect {}",
            grid.channels(),
            params.channels
        )));
    }
    Ok(())
}

fn check_step_inputs(grid: &CellGrid, params: &NcaParams, pvec: &[f32]) -> Result<()> {
    check_channels(grid, params)?;
    if pvec.len() != grid.n_hidden() {
        return Err(Error::DimensionMismatch(format!(
            "perturbation has {} entries, grid has {} hidden channels",
            pvec.len(),
            grid.n_hidden()
        )));
    }
    Ok(())
}

/// One update given already-sampled goal and fire bits (one per cell).
pub(crate) fn step_with_bits(
    input: &CellGrid,
    params: &NcaParams,
    pvec: &[f32],
    goal_bits: Vec<bool>,
    fire_bits: Vec<bool>,
    record: bool,
) -> (CellGrid, Option<StepRecord>) {
    let c = input.channels();
    let n = input.plane_len();
    let features = params.features();

    let pre_alive = input.alive_mask();
    let mut state = input.clone();
    add_perturbation(&mut state, pvec, &goal_recipients(&goal_bits, &pre_alive));

    let active: Vec<u32> = (0..n)
        .filter(|&i| pre_alive.bits()[i] && fire_bits[i])
        .map(|i| i as u32)
        .collect();
    let m = active.len();

    let mut perception = vec![0.0; m * features];
    perceive_cells(&state, params, &active, &mut perception);
    let mut pre1 = Vec::new();
    params.layer1.forward_batch(m, &perception, &mut pre1);
    let act1: Vec<f32> = pre1.iter().map(|v| v.max(0.0)).collect();
    let mut pre2 = Vec::new();
    params.layer2.forward_batch(m, &act1, &mut pre2);
    let act2: Vec<f32> = pre2.iter().map(|v| v.max(0.0)).collect();
    let mut update = Vec::new();
    params.layer3.forward_batch(m, &act2, &mut update);

    {
        let data = state.data_mut();
        for (row, &i) in update.chunks_exact(c).zip(&active) {
            let i = i as usize;
            for (ch, u) in row.iter().enumerate() {
                data[ch * n + i] += u;
            }
        }
    }

    let post_alive = state.alive_mask();
    let live = pre_alive.and(&post_alive);
    let record = record.then(|| StepRecord {
        input: input.clone(),
        goal_bits,
        fire_bits,
        pre_alive: pre_alive.clone(),
        active: active.clone(),
        perception,
        pre1,
        pre2,
        update,
        pre_clip: state.clone(),
        live: live.clone(),
    });
    state
        .mask_and_clip_in_place(&live)
        .expect("masks are built from the grid itself");
    (state, record)
}

/// One stochastic NCA update. When a tape is supplied the step is recorded on it.
pub fn nca_step<R: Rng + ?Sized>(
    grid: &CellGrid,
    params: &NcaParams,
    pvec: &[f32],
    cfg: &StepConfig,
    rng: &mut R,
    tape: Option<&mut Tape>,
) -> Result<CellGrid> {
    check_step_inputs(grid, params, pvec)?;
    cfg.validate()?;
    let n = grid.plane_len();
    let goal_bits = sample_bits(rng, cfg.goal_rate, n);
    let fire_bits = sample_bits(rng, cfg.fire_rate, n);
    let (out, record) = step_with_bits(grid, params, pvec, goal_bits, fire_bits, tape.is_some());
    if let (Some(tape), Some(record)) = (tape, record) {
        tape.push(grid, pvec, params, record, &out)?;
    }
    Ok(out)
}

/// `n_steps` updates under one goal, encoded once for the whole segment.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    grid: &CellGrid,
    params: &NcaParams,
    encoder: &GoalEncoder,
    goal: usize,
    n_steps: usize,
    cfg: &StepConfig,
    rng: &mut R,
    mut tape: Option<&mut Tape>,
) -> Result<CellGrid> {
    let pvec = encoder.encode(goal)?;
    check_step_inputs(grid, params, &pvec)?;
    if let Some(t) = tape.as_deref_mut() {
        t.bind_goal(goal, grid)?;
    }
    let mut state = grid.clone();
    for _ in 0..n_steps {
        state = nca_step(&state, params, &pvec, cfg, rng, tape.as_deref_mut())?;
    }
    Ok(state)
}
