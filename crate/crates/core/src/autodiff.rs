//! Reverse-mode gradients through unrolled rollouts.
//!
//! The forward pass records, per step, the input state, the sampled goal and
//! fire bits, the live-cell masks, the per-cell activations and the pre-clip
//! state. `backward` walks the records in reverse. Stochastic masks and the
//! alive masks are constants of the recorded computation; the clamp passes
//! gradient strictly inside the clip interval and blocks it elsewhere.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{AliveMask, CellGrid, CLIP, RGBA};
use crate::linalg::{gemm, Layout};
use crate::model::{Padded, 
    add_perturbation, goal_recipients, step_with_bits, GoalEncoder, NcaParams, StepConfig, HIDDEN_WIDTH,
    KERNELS_PER_CHANNEL,
};
use crate::trainer::{mse_rgba, mse_rgba_grad};

/// Everything the reverse pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub(crate) input: CellGrid,
    pub(crate) goal_bits: Vec<bool>,
    pub(crate) fire_bits: Vec<bool>,
    pub(crate) pre_alive: AliveMask,
    /// Cells that were alive before the step and fired.
    pub(crate) active: Vec<u32>,
    pub(crate) perception: Vec<f32>,
    pub(crate) pre1: Vec<f32>,
    pub(crate) pre2: Vec<f32>,
    pub(crate) update: Vec<f32>,
    pub(crate) pre_clip: CellGrid,
    /// Alive before and after the update.
    pub(crate) live: AliveMask,
}

impl StepRecord {
    pub fn fire_bits(&self) -> &[bool] {
        &self.fire_bits
    }

    pub fn goal_bits(&self) -> &[bool] {
        &self.goal_bits
    }

    pub fn active_cells(&self) -> usize {
        self.active.len()
    }

    fn bytes(&self) -> usize {
        let f = std::mem::size_of::<f32>();
        (self.input.data().len() + self.pre_clip.data().len()) * f
            + (self.perception.len() + self.pre1.len() + self.pre2.len() + self.update.len()) * f
            + self.active.len() * 4
            + self.goal_bits.len() * 4
    }
}

/// Recorded forward pass of one rollout segment.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    goal: Option<usize>,
    pvec: Option<Vec<f32>>,
    fingerprint: Option<u64>,
    records: Vec<StepRecord>,
    final_state: Option<CellGrid>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn goal(&self) -> Option<usize> {
        self.goal
    }

    pub fn initial_state(&self) -> Option<&CellGrid> {
        self.records.first().map(|r| &r.input)
    }

    pub fn final_state(&self) -> Option<&CellGrid> {
        self.final_state.as_ref()
    }

    /// Approximate heap footprint of the recorded activations.
    pub fn memory_bytes(&self) -> usize {
        self.records.iter().map(StepRecord::bytes).sum()
    }

    pub(crate) fn bind_goal(&mut self, goal: usize, grid: &CellGrid) -> Result<()> {
        match self.goal {
            Some(g) if g != goal => Err(Error::TapeMismatch(format!(
                "tape records goal {g}, rollout uses goal {goal}"
            ))),
            _ => {
                if let Some(last) = &self.final_state {
                    if last != grid {
                        return Err(Error::TapeMismatch(
                            "rollout does not continue from the tape's final state".into(),
                        ));
                    }
                }
                self.goal = Some(goal);
                Ok(())
            }
        }
    }

    pub(crate) fn push(&mut self, input: &CellGrid, pvec: &[f32], params: &NcaParams, record: StepRecord, output: &CellGrid) -> Result<()> {
        match &self.pvec {
            Some(p) if p.as_slice() != pvec => {
                return Err(Error::TapeMismatch("perturbation changed within a tape".into()))
            }
            Some(_) => {}
            None => self.pvec = Some(pvec.to_vec()),
        }
        let fp = fingerprint(params);
        match self.fingerprint {
            Some(f) if f != fp => {
                return Err(Error::TapeMismatch("parameters changed within a tape".into()))
            }
            _ => self.fingerprint = Some(fp),
        }
        if let Some(last) = &self.final_state {
            if last != input {
                return Err(Error::TapeMismatch("step does not continue from the tape's final state".into()));
            }
        }
        self.records.push(record);
        self.final_state = Some(output.clone());
        Ok(())
    }

    /// Re-run the recorded steps with the recorded masks.
    pub fn replay(&self, params: &NcaParams) -> Result<CellGrid> {
        let Some(first) = self.records.first() else {
            return Err(Error::TapeMismatch("empty tape".into()));
        };
        self.check_params(params)?;
        let pvec = self.pvec.as_deref().unwrap_or(&[]);
        let mut state = first.input.clone();
        for r in &self.records {
            state = step_with_bits(&state, params, pvec, r.goal_bits.clone(), r.fire_bits.clone(), false).0;
        }
        Ok(state)
    }

    fn check_params(&self, params: &NcaParams) -> Result<()> {
        if let Some(f) = self.fingerprint {
            if f != fingerprint(params) {
                return Err(Error::TapeMismatch(
                    "parameters differ from those used in the forward pass".into(),
                ));
            }
        }
        Ok(())
    }
}

/// FNV-1a over the parameter bit patterns.
fn fingerprint(params: &NcaParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for a in params.arrays() {
        for v in a {
            h ^= v.to_bits() as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Gradients mirroring every parameter array, plus the gradient with
/// respect to the perturbation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub nca: NcaParams,
    pub encoder: GoalEncoder,
    pub pvec: Vec<f32>,
}

impl GradientSet {
    pub fn zeros_like(params: &NcaParams, encoder: &GoalEncoder) -> Self {
        Self {
            nca: NcaParams::zeros(params.channels),
            encoder: GoalEncoder::zeros(encoder.kind(), encoder.n_goals(), encoder.n_hidden()),
            pvec: vec![0.0; encoder.n_hidden()],
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.pvec.iter_mut().zip(&other.pvec).for_each(|(x, y)| *x += y);
    }

    /// NCA arrays followed by encoder arrays.
    pub fn arrays(&self) -> Vec<&[f32]> {
        let mut v = self.nca.arrays();
        v.extend(self.encoder.arrays());
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.nca.arrays_mut();
        v.extend(self.encoder.arrays_mut());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|&v| v == 0.0)) && self.pvec.iter().all(|&v| v == 0.0)
    }
}

/// Exact gradients of the recorded rollout given `dL/d(final state)`.
pub fn backward(
    tape: &Tape,
    params: &NcaParams,
    encoder: &GoalEncoder,
    loss_grad: &CellGrid,
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params, encoder);
    let Some(final_state) = tape.final_state() else {
        return Ok(grads);
    };
    if !final_state.same_shape(loss_grad) {
        return Err(Error::DimensionMismatch(
            "loss gradient does not match the rollout's final state".into(),
        ));
    }
    if final_state.channels() != params.channels {
        return Err(Error::TapeMismatch(format!(
            "tape has {} channels, parameters expect {}",
            final_state.channels(),
            params.channels
        )));
    }
    tape.check_params(params)?;
    let pvec = tape.pvec.clone().unwrap_or_default();
    if pvec.len() != encoder.n_hidden() {
        return Err(Error::TapeMismatch(format!(
            "tape perturbation has {} entries, encoder produces {}",
            pvec.len(),
            encoder.n_hidden()
        )));
    }
    if let Some(goal) = tape.goal {
        if encoder.encode(goal)? != pvec {
            return Err(Error::TapeMismatch(
                "encoder differs from the one used in the forward pass".into(),
            ));
        }
    }

    let mut g = loss_grad.data().to_vec();
    for record in tape.records.iter().rev() {
        g = step_backward(record, params, &pvec, &mut grads, g);
    }
    if let Some(goal) = tape.goal {
        let g_pvec = grads.pvec.clone();
        encoder_backward(encoder, goal, &g_pvec, &mut grads.encoder)?;
    }
    Ok(grads)
}

fn column_sums(rows: &[f32], width: usize, out: &mut [f32]) {
    for row in rows.chunks_exact(width) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

/// Reverse one step: accumulate parameter gradients and return `dL/d(input)`.
fn step_backward(
    r: &StepRecord,
    params: &NcaParams,
    pvec: &[f32],
    grads: &mut GradientSet,
    g_out: Vec<f32>,
) -> Vec<f32> {
    let c = params.channels;
    let n = r.input.plane_len();
    let (h, w) = (r.input.height(), r.input.width());
    let f = params.features();
    let m = r.active.len();
    let hw = HIDDEN_WIDTH;

    // Through mask and clamp.
    let mut g_s = g_out;
    let pre_clip = r.pre_clip.data();
    let live = r.live.bits();
    for (g_plane, p_plane) in g_s.chunks_exact_mut(n).zip(pre_clip.chunks_exact(n)) {
        for ((g, p), &alive) in g_plane.iter_mut().zip(p_plane).zip(live) {
            if !alive || p.abs() >= CLIP {
                *g = 0.0;
            }
        }
    }

    if m > 0 {
        let mut g_u = vec![0.0; m * c];
        for (row, &i) in g_u.chunks_exact_mut(c).zip(&r.active) {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = g_s[ch * n + i as usize];
            }
        }

        let act2: Vec<f32> = r.pre2.iter().map(|v| v.max(0.0)).collect();
        column_sums(&g_u, c, &mut grads.nca.layer3.bias);
        gemm(hw, m, c, &act2, Layout::transposed(hw), &g_u, Layout::row_major(c), 1.0, &mut grads.nca.layer3.weight);
        let mut g2 = vec![0.0; m * hw];
        gemm(m, c, hw, &g_u, Layout::row_major(c), &params.layer3.weight, Layout::transposed(c), 0.0, &mut g2);
        g2.iter_mut().zip(&r.pre2).for_each(|(g, p)| if *p <= 0.0 { *g = 0.0 });

        let act1: Vec<f32> = r.pre1.iter().map(|v| v.max(0.0)).collect();
        column_sums(&g2, hw, &mut grads.nca.layer2.bias);
        gemm(hw, m, hw, &act1, Layout::transposed(hw), &g2, Layout::row_major(hw), 1.0, &mut grads.nca.layer2.weight);
        let mut g1 = vec![0.0; m * hw];
        gemm(m, hw, hw, &g2, Layout::row_major(hw), &params.layer2.weight, Layout::transposed(hw), 0.0, &mut g1);
        g1.iter_mut().zip(&r.pre1).for_each(|(g, p)| if *p <= 0.0 { *g = 0.0 });

        column_sums(&g1, hw, &mut grads.nca.layer1.bias);
        gemm(f, m, hw, &r.perception, Layout::transposed(f), &g1, Layout::row_major(hw), 1.0, &mut grads.nca.layer1.weight);
        let mut g_p = vec![0.0; m * f];
        gemm(m, hw, f, &g1, Layout::row_major(hw), &params.layer1.weight, Layout::transposed(hw), 0.0, &mut g_p);

        // Perception reads the perturbed state.
        let recipients = goal_recipients(&r.goal_bits, &r.pre_alive);
        let mut x = r.input.clone();
        add_perturbation(&mut x, pvec, &recipients);
        let xp = Padded::new(&x);
        let mut g_pad = vec![0.0f32; xp.data.len()];

        let kernels = &params.perception_kernels;
        let g_kernels = &mut grads.nca.perception_kernels;
        let g_bias = &mut grads.nca.perception_bias;
        for (row, &cell) in g_p.chunks_exact(f).zip(&r.active) {
            let corner = xp.corner(cell as usize, w);
            for ch in 0..c {
                let patch = xp.patch(ch, corner);
                let mut g_patch = [0.0f32; 9];
                for k in 0..KERNELS_PER_CHANNEL {
                    let j = ch * KERNELS_PER_CHANNEL + k;
                    let gp = row[j];
                    g_bias[j] += gp;
                    let gk: &mut [f32; 9] = (&mut g_kernels[j * 9..j * 9 + 9]).try_into().expect("3x3 kernel");
                    let kk: &[f32; 9] = kernels[j * 9..j * 9 + 9].try_into().expect("3x3 kernel");
                    for t in 0..9 {
                        gk[t] += gp * patch[t];
                        g_patch[t] += gp * kk[t];
                    }
                }
                let b = ch * xp.plane + corner;
                for dy in 0..3 {
                    let at = b + dy * xp.pw;
                    g_pad[at] += g_patch[dy * 3];
                    g_pad[at + 1] += g_patch[dy * 3 + 1];
                    g_pad[at + 2] += g_patch[dy * 3 + 2];
                }
            }
        }
        for ch in 0..c {
            for y in 0..h {
                let src = &g_pad[ch * xp.plane + (y + 1) * xp.pw + 1..][..w];
                let dst = &mut g_s[ch * n + y * w..][..w];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
        }

        accumulate_pvec(&g_s, &recipients, n, &mut grads.pvec);
    } else {
        let recipients = goal_recipients(&r.goal_bits, &r.pre_alive);
        accumulate_pvec(&g_s, &recipients, n, &mut grads.pvec);
    }
    g_s
}

fn accumulate_pvec(g_x: &[f32], recipients: &[bool], n: usize, g_pvec: &mut [f32]) {
    for (hidx, gp) in g_pvec.iter_mut().enumerate() {
        let plane = &g_x[(RGBA + hidx) * n..(RGBA + hidx + 1) * n];
        for i in 0..n {
            if recipients[i] {
                *gp += plane[i];
            }
        }
    }
}

/// Backpropagate `dL/d(perturbation)` into the encoder parameters.
pub fn encoder_backward(encoder: &GoalEncoder, goal: usize, g_pvec: &[f32], out: &mut GoalEncoder) -> Result<()> {
    let trace = encoder.encode_traced(goal)?;
    match (encoder, out) {
        (GoalEncoder::Embedding { n_hidden, .. }, GoalEncoder::Embedding { table, .. }) => {
            table[goal * n_hidden..(goal + 1) * n_hidden]
                .iter_mut()
                .zip(g_pvec)
                .for_each(|(t, g)| *t += g);
        }
        (GoalEncoder::Mlp3 { layers, .. }, GoalEncoder::Mlp3 { layers: gl, .. }) => {
            let act1: Vec<f32> = trace.pre1.iter().map(|v| v.max(0.0)).collect();
            let act2: Vec<f32> = trace.pre2.iter().map(|v| v.max(0.0)).collect();
            let g3 = g_pvec;
            let g_act2 = dense_backward(&layers[2], &act2, g3, &mut gl[2]);
            let g2: Vec<f32> = g_act2.iter().zip(&trace.pre2).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
            let g_act1 = dense_backward(&layers[1], &act1, &g2, &mut gl[1]);
            let g1: Vec<f32> = g_act1.iter().zip(&trace.pre1).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
            let mut one_hot = vec![0.0; encoder.n_goals()];
            one_hot[goal] = 1.0;
            dense_backward(&layers[0], &one_hot, &g1, &mut gl[0]);
        }
        _ => {
            return Err(Error::TapeMismatch("gradient encoder has a different variant".into()));
        }
    }
    Ok(())
}

fn dense_backward(layer: &crate::model::Dense, x: &[f32], g_y: &[f32], g_layer: &mut crate::model::Dense) -> Vec<f32> {
    let o = layer.outputs;
    g_layer.bias.iter_mut().zip(g_y).for_each(|(b, g)| *b += g);
    let mut g_x = vec![0.0; layer.inputs];
    for (i, xi) in x.iter().enumerate() {
        let row = &layer.weight[i * o..(i + 1) * o];
        let grow = &mut g_layer.weight[i * o..(i + 1) * o];
        let mut acc = 0.0;
        for k in 0..o {
            grow[k] += xi * g_y[k];
            acc += row[k] * g_y[k];
        }
        g_x[i] = acc;
    }
    g_x
}

/// Options for [`check_gradients_with`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub n_steps: usize,
    pub h: f64,
    pub seed: u64,
    pub step: StepConfig,
    pub goal: usize,
    /// Minimum number of parameters compared.
    pub samples: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            n_steps: 1,
            h: 1e-3,
            seed: 0,
            step: StepConfig::default(),
            goal: 0,
            samples: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters passed over because a ±h step changed a rectifier, alive
    /// mask or clip decision.
    pub skipped: usize,
    /// Name and index of the worst parameter.
    pub worst: Option<(String, usize)>,
}

/// Relative error with an absolute floor so that two vanishing gradients agree.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Worst relative error between `backward` and central differences of a
/// 64-bit reference forward, over a sampled subset of at least 200 parameters
/// whose ±h neighborhood is free of kinks.
pub fn check_gradients(
    params: &NcaParams,
    encoder: &GoalEncoder,
    grid: &CellGrid,
    n_steps: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let opts = GradCheck {
        n_steps,
        h,
        seed,
        ..GradCheck::default()
    };
    Ok(check_gradients_with(params, encoder, grid, &opts, backward)?.max_rel_error)
}

/// Gradient check against an arbitrary reverse pass (used to validate the harness itself).
pub fn check_gradients_with<B>(
    params: &NcaParams,
    encoder: &GoalEncoder,
    grid: &CellGrid,
    opts: &GradCheck,
    backward_fn: B,
) -> Result<GradCheckReport>
where
    B: Fn(&Tape, &NcaParams, &GoalEncoder, &CellGrid) -> Result<GradientSet>,
{
    if opts.n_steps > 8 {
        return Err(Error::InvalidValue(format!(
            "gradient check supports at most 8 steps, got {}",
            opts.n_steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let target: Vec<f32> = (0..RGBA * grid.plane_len()).map(|_| rng.random::<f32>()).collect();
    let target = crate::tasks::RgbaImage::from_data(grid.height(), grid.width(), target)?;

    let mut tape = Tape::new();
    let final_state = crate::model::rollout(
        grid,
        params,
        encoder,
        opts.goal,
        opts.n_steps,
        &opts.step,
        &mut rng,
        Some(&mut tape),
    )?;
    let g_final = mse_rgba_grad(&final_state, &target)?;
    let analytic = backward_fn(&tape, params, encoder, &g_final)?;

    let bits: Vec<(Vec<bool>, Vec<bool>)> = tape
        .records()
        .iter()
        .map(|r| (r.goal_bits.clone(), r.fire_bits.clone()))
        .collect();
    let reference = reference::Reference {
        grid,
        bits: &bits,
        goal: opts.goal,
        target: &target,
    };
    let base = Parameters64::new(params, encoder);
    let (base_loss, base_pattern) = reference.loss_with_pattern(&base);
    debug_assert!((base_loss - mse_rgba(&final_state, &target)? as f64).abs() < 1e-4);

    let names: Vec<String> = NcaParams::array_names()
        .iter()
        .map(|s| s.to_string())
        .chain(encoder.array_names().iter().map(|s| s.to_string()))
        .collect();
    let analytic_arrays = analytic.arrays();
    let total: usize = analytic_arrays.iter().map(|a| a.len()).sum();

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    let mut skipped = 0;
    for (ai, arr) in analytic_arrays.iter().enumerate() {
        let len = arr.len();
        let want = ((opts.samples * len) as f64 / total as f64).ceil() as usize;
        let k = want.max(8).min(len);
        let mut taken = 0;
        // Visit indices in random order; a parameter whose ±h step crosses a
        // kink has no meaningful central difference and is replaced.
        for idx in sample_indices(&mut rng, len, len).into_iter() {
            if taken == k {
                break;
            }
            let mut plus = base.clone();
            plus.arrays[ai][idx] += opts.h;
            let mut minus = base.clone();
            minus.arrays[ai][idx] -= opts.h;
            let (lp, pp) = reference.loss_with_pattern(&plus);
            let (lm, pm) = reference.loss_with_pattern(&minus);
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.h);
            let err = relative_error(arr[idx] as f64, numeric);
            checked += 1;
            taken += 1;
            if err > worst || worst_at.is_none() {
                worst = worst.max(err);
                worst_at = Some((names[ai].clone(), idx));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
        skipped,
        worst: worst_at,
    })
}

/// All trainable arrays in 64-bit, in `GradientSet::arrays` order.
#[derive(Clone, Debug)]
struct Parameters64 {
    channels: usize,
    n_goals: usize,
    n_hidden: usize,
    mlp: bool,
    arrays: Vec<Vec<f64>>,
}

impl Parameters64 {
    fn new(params: &NcaParams, encoder: &GoalEncoder) -> Self {
        let arrays = params
            .arrays()
            .into_iter()
            .chain(encoder.arrays())
            .map(|a| a.iter().map(|&v| v as f64).collect())
            .collect();
        Self {
            channels: params.channels,
            n_goals: encoder.n_goals(),
            n_hidden: encoder.n_hidden(),
            mlp: matches!(encoder, GoalEncoder::Mlp3 { .. }),
            arrays,
        }
    }
}

/// Plain nested-loop forward pass in 64-bit, replaying recorded masks.
mod reference {
    use super::Parameters64;
    use crate::grid::{CellGrid, ALIVE_THRESHOLD, ALPHA, CLIP, RGBA};
    use crate::model::{ENCODER_WIDTH, HIDDEN_WIDTH};
    use crate::tasks::RgbaImage;

    pub(super) struct Reference<'a> {
        pub grid: &'a CellGrid,
        pub bits: &'a [(Vec<bool>, Vec<bool>)],
        pub goal: usize,
        pub target: &'a RgbaImage,
    }

    fn dense(x: &[f64], w: &[f64], b: &[f64], outputs: usize) -> Vec<f64> {
        let mut y = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for o in 0..outputs {
                y[o] += xi * w[i * outputs + o];
            }
        }
        y
    }

    /// Rectify, noting which units are on.
    fn relu(mut y: Vec<f64>, pattern: &mut Vec<bool>) -> Vec<f64> {
        for v in y.iter_mut() {
            pattern.push(*v > 0.0);
            *v = v.max(0.0);
        }
        y
    }

    fn alive(state: &[f64], h: usize, w: usize) -> Vec<bool> {
        let n = h * w;
        let mut out = vec![false; n];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut m = 0.0f64;
                let mut any = false;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                            let v = state[ALPHA * n + (yy * w as i64 + xx) as usize];
                            m = if any { m.max(v) } else { v };
                            any = true;
                        }
                    }
                }
                let at_border = y == 0 || x == 0 || y + 1 == h as i64 || x + 1 == w as i64;
                if at_border {
                    m = m.max(0.0);
                }
                out[(y * w as i64 + x) as usize] = m >= ALIVE_THRESHOLD as f64;
            }
        }
        out
    }

    impl Reference<'_> {
        fn encode(&self, p: &Parameters64, pattern: &mut Vec<bool>) -> Vec<f64> {
            let a = &p.arrays[8..];
            if p.mlp {
                let mut one_hot = vec![0.0; p.n_goals];
                one_hot[self.goal] = 1.0;
                let h1 = relu(dense(&one_hot, &a[0], &a[1], ENCODER_WIDTH), pattern);
                let h2 = relu(dense(&h1, &a[2], &a[3], ENCODER_WIDTH), pattern);
                dense(&h2, &a[4], &a[5], p.n_hidden)
            } else {
                a[0][self.goal * p.n_hidden..(self.goal + 1) * p.n_hidden].to_vec()
            }
        }

        /// Final state, plus every branch taken on the way (rectifier signs,
        /// alive masks, clip saturation). Equal patterns mean the loss is a
        /// single smooth piece between two parameter settings.
        pub fn forward(&self, p: &Parameters64, pattern: &mut Vec<bool>) -> Vec<f64> {
            let (h, w, c) = (self.grid.height(), self.grid.width(), p.channels);
            let n = h * w;
            let f = 3 * c;
            let pvec = self.encode(p, pattern);
            let mut state: Vec<f64> = self.grid.data().iter().map(|&v| v as f64).collect();
            for (goal_bits, fire_bits) in self.bits {
                let pre = alive(&state, h, w);
                pattern.extend_from_slice(&pre);
                for i in 0..n {
                    if pre[i] && goal_bits[i] {
                        for (k, pv) in pvec.iter().enumerate() {
                            state[(RGBA + k) * n + i] += pv;
                        }
                    }
                }
                let mut next = state.clone();
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        if !(pre[i] && fire_bits[i]) {
                            continue;
                        }
                        let mut feat = vec![0.0; f];
                        for (j, fv) in feat.iter_mut().enumerate() {
                            let ch = j / 3;
                            let mut acc = p.arrays[1][j];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let yy = y as i64 + ky as i64 - 1;
                                    let xx = x as i64 + kx as i64 - 1;
                                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                                        acc += p.arrays[0][j * 9 + ky * 3 + kx]
                                            * state[ch * n + yy as usize * w + xx as usize];
                                    }
                                }
                            }
                            *fv = acc;
                        }
                        let h1 = relu(dense(&feat, &p.arrays[2], &p.arrays[3], HIDDEN_WIDTH), pattern);
                        let h2 = relu(dense(&h1, &p.arrays[4], &p.arrays[5], HIDDEN_WIDTH), pattern);
                        let u = dense(&h2, &p.arrays[6], &p.arrays[7], c);
                        for ch in 0..c {
                            next[ch * n + i] += u[ch];
                        }
                    }
                }
                let post = alive(&next, h, w);
                pattern.extend_from_slice(&post);
                for i in 0..n {
                    let keep = pre[i] && post[i];
                    for ch in 0..c {
                        let v = &mut next[ch * n + i];
                        if keep {
                            pattern.push(v.abs() < CLIP as f64);
                        }
                        *v = if keep { v.clamp(-(CLIP as f64), CLIP as f64) } else { 0.0 };
                    }
                }
                state = next;
            }
            state
        }

        pub fn loss_with_pattern(&self, p: &Parameters64) -> (f64, Vec<bool>) {
            let mut pattern = Vec::new();
            let state = self.forward(p, &mut pattern);
            let n = self.grid.plane_len();
            let t = self.target.data();
            let mut acc = 0.0;
            for k in 0..RGBA * n {
                let d = state[k] - t[k] as f64;
                acc += d * d;
            }
            (acc / (RGBA * n) as f64, pattern)
        }
    }
}
