//! Sample-pool training.
//!
//! Each iteration draws a batch of states from the pool (two of them reset
//! to the seed), picks goals, and grows the batch through one or more
//! segments. After every segment the RGBA loss is backpropagated through the
//! recorded rollout, each gradient array is normalized to unit length, and
//! both the update network and the goal encoder take an Adam step. The final
//! states go back into the pool slots they came from.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, GradientSet, Tape};
use crate::error::{Error, Result};
use crate::grid::{CellGrid, RGBA};
use crate::model::{rollout, EncoderKind, GoalEncoder, NcaParams, StepConfig};
use crate::tasks::{direction_to_delta, Direction, RgbaImage, ShiftedTarget};

/// Mean squared error between channels 0..4 and the target, accumulated in 64-bit.
pub fn mse_rgba(grid: &CellGrid, target: &RgbaImage) -> Result<f32> {
    check_target(grid, target)?;
    let n = RGBA * grid.plane_len();
    let sum: f64 = grid.data()[..n]
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    Ok((sum / n as f64) as f32)
}

/// `d mse_rgba / d grid`: `2 (s - t) / (4 H W)` on RGBA, zero on hidden channels.
pub fn mse_rgba_grad(grid: &CellGrid, target: &RgbaImage) -> Result<CellGrid> {
    check_target(grid, target)?;
    let n = RGBA * grid.plane_len();
    let scale = 2.0 / n as f32;
    let mut g = CellGrid::zeros(grid.channels(), grid.height(), grid.width());
    for ((o, s), t) in g.data_mut()[..n].iter_mut().zip(grid.data()).zip(target.data()) {
        *o = scale * (s - t);
    }
    Ok(g)
}

fn check_target(grid: &CellGrid, target: &RgbaImage) -> Result<()> {
    if grid.height() != target.height() || grid.width() != target.width() || grid.channels() < RGBA {
        return Err(Error::DimensionMismatch(format!(
            "grid is {}x{}, target is {}x{}",
            grid.height(),
            grid.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Divide every parameter array's gradient by its L2 norm (plus 1e-8).
pub fn normalize_gradients(grads: &mut GradientSet) {
    for a in grads.arrays_mut() {
        normalize_array(a);
    }
}

pub fn normalize_array(a: &mut [f32]) {
    let norm = a.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32;
    let scale = 1.0 / (norm + 1e-8);
    a.iter_mut().for_each(|v| *v *= scale);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_arrays(config: AdamConfig, arrays: &[&[f32]]) -> Self {
        let shapes: Vec<usize> = arrays.iter().map(|a| a.len()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::DimensionMismatch(format!(
                    "array {i}: optimizer expects {} values, got {} parameters and {} gradients",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - (beta1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (beta2 as f64).powi(self.t as i32);
        let step = (lr as f64 / c1) as f32;
        let c2 = c2 as f32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                p[k] -= step * m[k] / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Morphing,
    Locomotion,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Morphing => "morphing",
            TaskKind::Locomotion => "locomotion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "morphing" => Ok(TaskKind::Morphing),
            "locomotion" => Ok(TaskKind::Locomotion),
            other => Err(Error::InvalidValue(format!("unknown task '{other}'"))),
        }
    }

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            TaskKind::Morphing => EncoderKind::Mlp3,
            TaskKind::Locomotion => EncoderKind::Embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub batch_size: usize,
    pub pool_size: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Segments per iteration (2 for morphing, 4 for locomotion).
    pub segments: usize,
    pub fire_rate: f32,
    pub goal_rate: f32,
    pub n_hidden: usize,
    pub n_seed_replacements: usize,
    pub total_iterations: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub learning_rate: f32,
    /// Locomotion targets keep this many pixels clear of the border.
    pub margin: usize,
    /// Worker threads for per-sample rollouts; results do not depend on it.
    pub threads: usize,
}

impl TrainConfig {
    pub fn channels(&self) -> usize {
        RGBA + self.n_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_steps > self.max_steps {
            return bad(format!("min_steps {} > max_steps {}", self.min_steps, self.max_steps));
        }
        if self.n_seed_replacements > self.batch_size {
            return bad(format!(
                "n_seed_replacements {} > batch_size {}",
                self.n_seed_replacements, self.batch_size
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.pool_size {
            return bad(format!(
                "batch_size {} must be in 1..=pool_size {}",
                self.batch_size, self.pool_size
            ));
        }
        if self.segments == 0 {
            return bad("segments must be at least 1".into());
        }
        if self.n_hidden == 0 {
            return bad("n_hidden must be at least 1".into());
        }
        if self.grid_size < 3 {
            return bad(format!("grid_size {} is below 3", self.grid_size));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        StepConfig::new(self.fire_rate, self.goal_rate).map(|_| ())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            fire_rate: self.fire_rate,
            goal_rate: self.goal_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub grid: CellGrid,
    pub offset: ShiftedTarget,
}

/// Replay buffer of grown states.
#[derive(Clone, Debug)]
pub struct SamplePool {
    entries: Vec<PoolEntry>,
    seed: CellGrid,
}

impl SamplePool {
    pub fn new(capacity: usize, seed: CellGrid) -> Self {
        let entry = PoolEntry {
            grid: seed.clone(),
            offset: ShiftedTarget::default(),
        };
        Self {
            entries: vec![entry; capacity],
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn seed(&self) -> &CellGrid {
        &self.seed
    }

    pub fn replace(&mut self, indices: &[usize], batch: Vec<PoolEntry>) -> Result<()> {
        if indices.len() != batch.len() {
            return Err(Error::DimensionMismatch("indices and batch differ in length".into()));
        }
        for (&i, e) in indices.iter().zip(batch) {
            if i >= self.entries.len() {
                return Err(Error::InvalidValue(format!("pool index {i} out of range")));
            }
            self.entries[i] = e;
        }
        Ok(())
    }
}

/// Distinct pool slots, with the first `n_seed_replacements` entries reset to the seed.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &SamplePool,
    cfg: &TrainConfig,
    rng: &mut R,
) -> (Vec<usize>, Vec<PoolEntry>) {
    let indices = sample_indices(rng, pool.len(), cfg.batch_size).into_vec();
    let batch = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if k < cfg.n_seed_replacements {
                PoolEntry {
                    grid: pool.seed.clone(),
                    offset: ShiftedTarget::default(),
                }
            } else {
                pool.entries[i].clone()
            }
        })
        .collect();
    (indices, batch)
}

/// Targets for either task.
#[derive(Clone, Debug)]
pub enum Targets {
    /// One image per goal.
    Morphing(Vec<RgbaImage>),
    /// The creature, centered; goals are the five directions.
    Locomotion(RgbaImage),
}

impl Targets {
    pub fn n_goals(&self) -> usize {
        match self {
            Targets::Morphing(v) => v.len(),
            Targets::Locomotion(_) => Direction::ALL.len(),
        }
    }

    fn size(&self) -> Option<(usize, usize)> {
        match self {
            Targets::Morphing(v) => v.first().map(|i| (i.height(), i.width())),
            Targets::Locomotion(i) => Some((i.height(), i.width())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub losses: Vec<f32>,
    pub wall_ms: f64,
}

/// Per-sample random stream for masks, independent of thread scheduling.
pub fn sample_rng(seed: u64, iteration: usize, segment: usize, sample: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    r.set_stream(((iteration as u64) << 24) | ((segment as u64) << 16) | sample as u64);
    r
}

struct SegmentResult {
    states: Vec<CellGrid>,
    loss: f32,
    grads: GradientSet,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: NcaParams,
    pub encoder: GoalEncoder,
    pub opt_nca: AdamState,
    pub opt_encoder: AdamState,
    pub pool: SamplePool,
    targets: Targets,
    rng: ChaCha8Rng,
    iteration: usize,
    workers: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(cfg: TrainConfig, targets: Targets) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = NcaParams::init(cfg.channels(), &mut init_rng);
        let encoder = GoalEncoder::init(cfg.task.encoder_kind(), targets.n_goals(), cfg.n_hidden, &mut init_rng);
        Self::with_params(cfg, targets, params, encoder)
    }

    pub fn with_params(cfg: TrainConfig, targets: Targets, params: NcaParams, encoder: GoalEncoder) -> Result<Self> {
        cfg.validate()?;
        let kind_ok = matches!(
            (&targets, cfg.task),
            (Targets::Morphing(_), TaskKind::Morphing) | (Targets::Locomotion(_), TaskKind::Locomotion)
        );
        if !kind_ok {
            return Err(Error::Config(format!("targets do not match task {}", cfg.task.name())));
        }
        if targets.size() != Some((cfg.grid_size, cfg.grid_size)) {
            return Err(Error::Config(format!(
                "targets must be {0}x{0} to match grid_size",
                cfg.grid_size
            )));
        }
        if params.channels != cfg.channels() {
            return Err(Error::ChannelMismatch {
                checkpoint: params.channels,
                requested: cfg.channels(),
            });
        }
        if encoder.n_goals() != targets.n_goals() || encoder.n_hidden() != cfg.n_hidden {
            return Err(Error::Config(format!(
                "encoder maps {} goals to {} values; run has {} goals and {} hidden channels",
                encoder.n_goals(),
                encoder.n_hidden(),
                targets.n_goals(),
                cfg.n_hidden
            )));
        }
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let opt_nca = AdamState::for_arrays(adam, &params.arrays());
        let opt_encoder = AdamState::for_arrays(adam, &encoder.arrays());
        let seed = CellGrid::new_seed(cfg.grid_size, cfg.grid_size, cfg.n_hidden)?;
        let pool = SamplePool::new(cfg.pool_size, seed);
        let workers = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            cfg,
            params,
            encoder,
            opt_nca,
            opt_encoder,
            pool,
            targets,
            iteration: 0,
            workers,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Continue from a saved iteration count and optimizer state.
    pub fn resume(&mut self, iteration: usize, opt_nca: AdamState, opt_encoder: AdamState) -> Result<()> {
        let ok = |s: &AdamState, arrays: Vec<&[f32]>| {
            s.m.len() == arrays.len() && s.m.iter().zip(&arrays).all(|(m, a)| m.len() == a.len())
        };
        if !ok(&opt_nca, self.params.arrays()) || !ok(&opt_encoder, self.encoder.arrays()) {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.iteration = iteration;
        self.opt_nca = opt_nca;
        self.opt_encoder = opt_encoder;
        // Keep the sampling stream distinct from a fresh run's.
        self.rng.set_stream(iteration as u64);
        Ok(())
    }

    pub fn step(&mut self) -> Result<IterationReport> {
        let start = Instant::now();
        let losses = match self.cfg.task {
            TaskKind::Morphing => self.train_iteration_morphing()?,
            TaskKind::Locomotion => self.train_iteration_locomotion()?,
        };
        self.iteration += 1;
        Ok(IterationReport {
            iteration: self.iteration,
            losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn draw_steps(&mut self) -> usize {
        self.rng.random_range(self.cfg.min_steps..=self.cfg.max_steps)
    }

    /// Two segments per iteration under one uniformly drawn goal per sample.
    pub fn train_iteration_morphing(&mut self) -> Result<Vec<f32>> {
        let Targets::Morphing(images) = &self.targets else {
            return Err(Error::Config("morphing iteration on a locomotion run".into()));
        };
        let n_goals = images.len();
        let (indices, batch) = sample_batch(&self.pool, &self.cfg, &mut self.rng);
        let goals: Vec<usize> = (0..batch.len()).map(|_| self.rng.random_range(0..n_goals)).collect();
        let targets: Vec<RgbaImage> = goals.iter().map(|&g| images[g].clone()).collect();
        let mut states: Vec<CellGrid> = batch.into_iter().map(|e| e.grid).collect();
        let mut losses = Vec::with_capacity(self.cfg.segments);
        for segment in 0..self.cfg.segments {
            let n_steps = self.draw_steps();
            let result = self.run_segment(&states, &goals, &targets, n_steps, segment)?;
            self.apply_gradients(result.grads)?;
            losses.push(result.loss);
            states = result.states;
        }
        let entries = states
            .into_iter()
            .map(|grid| PoolEntry {
                grid,
                offset: ShiftedTarget::default(),
            })
            .collect();
        self.pool.replace(&indices, entries)?;
        Ok(losses)
    }

    /// Segments with a freshly drawn direction per sample, moving the target
    /// `round(num_steps / 8)` pixels each time.
    pub fn train_iteration_locomotion(&mut self) -> Result<Vec<f32>> {
        let Targets::Locomotion(base) = &self.targets else {
            return Err(Error::Config("locomotion iteration on a morphing run".into()));
        };
        let base = base.clone();
        let (indices, batch) = sample_batch(&self.pool, &self.cfg, &mut self.rng);
        let mut offsets: Vec<ShiftedTarget> = batch.iter().map(|e| e.offset).collect();
        let mut states: Vec<CellGrid> = batch.into_iter().map(|e| e.grid).collect();
        let mut losses = Vec::with_capacity(self.cfg.segments);
        for segment in 0..self.cfg.segments {
            let n_steps = self.draw_steps();
            let mut goals = Vec::with_capacity(states.len());
            let mut targets = Vec::with_capacity(states.len());
            for off in offsets.iter_mut() {
                let (dir, next) = choose_direction(&mut self.rng, *off, n_steps, &base, self.cfg.margin);
                goals.push(dir.goal_id());
                targets.push(next.render(&base)?);
                *off = next;
            }
            let result = self.run_segment(&states, &goals, &targets, n_steps, segment)?;
            self.apply_gradients(result.grads)?;
            losses.push(result.loss);
            states = result.states;
        }
        let entries = states
            .into_iter()
            .zip(offsets)
            .map(|(grid, offset)| PoolEntry { grid, offset })
            .collect();
        self.pool.replace(&indices, entries)?;
        Ok(losses)
    }

    fn run_segment(
        &self,
        states: &[CellGrid],
        goals: &[usize],
        targets: &[RgbaImage],
        n_steps: usize,
        segment: usize,
    ) -> Result<SegmentResult> {
        let batch = states.len();
        let cfg = self.cfg.step_config();
        let scale = 1.0 / batch as f32;
        let one = |i: usize| -> Result<(CellGrid, f32, GradientSet)> {
            let mut rng = sample_rng(self.cfg.seed, self.iteration, segment, i);
            let mut tape = Tape::new();
            let out = rollout(
                &states[i],
                &self.params,
                &self.encoder,
                goals[i],
                n_steps,
                &cfg,
                &mut rng,
                Some(&mut tape),
            )?;
            let loss = mse_rgba(&out, &targets[i])?;
            let mut g = mse_rgba_grad(&out, &targets[i])?;
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            let grads = backward(&tape, &self.params, &self.encoder, &g)?;
            Ok((out, loss, grads))
        };
        let results: Vec<Result<(CellGrid, f32, GradientSet)>> = match &self.workers {
            Some(pool) => pool.install(|| (0..batch).into_par_iter().map(one).collect()),
            None => (0..batch).map(one).collect(),
        };
        let mut grads = GradientSet::zeros_like(&self.params, &self.encoder);
        let mut out_states = Vec::with_capacity(batch);
        let mut loss = 0.0f64;
        for r in results {
            let (s, l, g) = r?;
            grads.add_assign(&g);
            loss += l as f64;
            out_states.push(s);
        }
        Ok(SegmentResult {
            states: out_states,
            loss: (loss / batch as f64) as f32,
            grads,
        })
    }

    fn apply_gradients(&mut self, mut grads: GradientSet) -> Result<()> {
        normalize_gradients(&mut grads);
        let nca_grads = grads.nca.arrays();
        self.opt_nca.step(self.params.arrays_mut(), nca_grads)?;
        let enc_grads = grads.encoder.arrays();
        self.opt_encoder.step(self.encoder.arrays_mut(), enc_grads)?;
        Ok(())
    }
}

/// Draw directions until the moved target keeps its margin. Staying put is
/// always accepted once drawn.
pub fn choose_direction<R: Rng + ?Sized>(
    rng: &mut R,
    offset: ShiftedTarget,
    n_steps: usize,
    base: &RgbaImage,
    margin: usize,
) -> (Direction, ShiftedTarget) {
    for _ in 0..64 {
        let dir = Direction::ALL[rng.random_range(0..Direction::ALL.len())];
        let next = offset.moved(direction_to_delta(dir, n_steps));
        if dir == Direction::Stay || next.fits(base, margin) {
            return (dir, next);
        }
    }
    (Direction::Stay, offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(task: TaskKind) -> TrainConfig {
        TrainConfig {
            task,
            batch_size: 3,
            pool_size: 6,
            min_steps: 2,
            max_steps: 4,
            segments: if task == TaskKind::Morphing { 2 } else { 4 },
            fire_rate: 0.5,
            goal_rate: 1.0,
            n_hidden: 4,
            n_seed_replacements: 1,
            total_iterations: 3,
            seed: 7,
            grid_size: 12,
            learning_rate: 1e-3,
            margin: 1,
            threads: 1,
        }
    }

    fn disc(size: usize, r: f32, rgb: [f32; 3]) -> RgbaImage {
        let mut img = RgbaImage::zeros(size, size);
        let c = size as f32 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f32 + 0.5 - c).powi(2) + (x as f32 + 0.5 - c).powi(2)).sqrt();
                if d < r {
                    for (ch, v) in rgb.iter().enumerate() {
                        img.set(ch, y, x, *v);
                    }
                    img.set(3, y, x, 1.0);
                }
            }
        }
        img
    }

    fn morph_targets() -> Targets {
        Targets::Morphing(vec![disc(12, 3.0, [1.0, 0.0, 0.0]), disc(12, 4.5, [0.0, 0.0, 1.0])])
    }

    #[test]
    fn mse_identical_and_ones() {
        let mut g = CellGrid::zeros(6, 3, 4);
        let t = RgbaImage::from_data(3, 4, vec![1.0; 48]).unwrap();
        assert_eq!(mse_rgba(&g, &t).unwrap(), 1.0);
        for c in 0..4 {
            g.channel_mut(c).iter_mut().for_each(|v| *v = 1.0);
        }
        g.channel_mut(5).iter_mut().for_each(|v| *v = 7.0);
        assert_eq!(mse_rgba(&g, &t).unwrap(), 0.0);
    }

    #[test]
    fn mse_matches_nested_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let g = CellGrid::from_data(5, 7, 6, (0..210).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let t = RgbaImage::from_data(7, 6, (0..168).map(|_| r.random::<f32>()).collect()).unwrap();
        let mut acc = 0.0f64;
        for c in 0..4 {
            for y in 0..7 {
                for x in 0..6 {
                    let d = g.get(c, y, x) as f64 - t.get(c, y, x) as f64;
                    acc += d * d;
                }
            }
        }
        assert!((mse_rgba(&g, &t).unwrap() as f64 - acc / 168.0).abs() < 1e-6);
        assert!(mse_rgba(&g, &RgbaImage::zeros(6, 6)).is_err());
    }

    #[test]
    fn normalization_examples() {
        let mut a = [3.0f32, 4.0];
        normalize_array(&mut a);
        assert!((a[0] - 0.6).abs() < 1e-6 && (a[1] - 0.8).abs() < 1e-6);
        let mut z = [0.0f32; 5];
        normalize_array(&mut z);
        assert!(z.iter().all(|v| *v == 0.0));

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let p = NcaParams::zeros(5);
        let e = GoalEncoder::zeros(EncoderKind::Embedding, 2, 1);
        let mut grads = GradientSet::zeros_like(&p, &e);
        for (k, a) in grads.arrays_mut().into_iter().enumerate() {
            a.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0) * (k as f32 + 1.0) * 10.0);
        }
        let before = grads.clone();
        normalize_gradients(&mut grads);
        for (a, b) in grads.arrays().into_iter().zip(before.arrays()) {
            let norm: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let nb: f64 = b.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((dot / (norm * nb) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.5f32, -0.25];
        let mut s = AdamState::new(cfg, &[2]);
        s.step(vec![&mut p], vec![&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, -0.25]);
        assert_eq!(s.t, 1);

        let mut x = vec![0.0f32];
        let mut s = AdamState::new(cfg, &[1]);
        s.step(vec![&mut x], vec![&[1.0]]).unwrap();
        assert!((x[0] + 1e-3).abs() < 1e-7, "{}", x[0]);
        for _ in 0..9 {
            s.step(vec![&mut x], vec![&[1.0]]).unwrap();
        }
        // Constant gradients move by ≈ lr per step once bias-corrected.
        assert!((x[0] + 1e-2).abs() < 1e-6, "{}", x[0]);

        let mut s = AdamState::new(AdamConfig { lr: 0.0, ..cfg }, &[2]);
        let mut p = vec![1.0f32, 2.0];
        s.step(vec![&mut p], vec![&[5.0, -3.0]]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(s.step(vec![&mut p[..1]], vec![&[5.0]]).is_err());
    }

    #[test]
    fn batch_sampling_resets_seeds() {
        let cfg = tiny_config(TaskKind::Morphing);
        let seed = CellGrid::new_seed(12, 12, 4).unwrap();
        let mut pool = SamplePool::new(6, seed.clone());
        for (i, e) in pool.entries.iter_mut().enumerate() {
            e.grid.set(0, 0, 0, i as f32 + 1.0);
        }
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (idx, batch) = sample_batch(&pool, &cfg, &mut r);
        assert_eq!(idx.len(), 3);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        assert_eq!(batch[0].grid, seed);
        assert_eq!(batch[1].grid, pool.entries[idx[1]].grid);
    }

    #[test]
    fn goal_sampling_is_uniform() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            counts[r.random_range(0..10)] += 1;
        }
        let p = 0.1f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_but_rewrites_pool() {
        let mut cfg = tiny_config(TaskKind::Morphing);
        cfg.learning_rate = 0.0;
        let mut t = Trainer::new(cfg, morph_targets()).unwrap();
        let (p0, e0) = (t.params.clone(), t.encoder.clone());
        let pool0: Vec<PoolEntry> = t.pool.entries().to_vec();
        let losses = t.train_iteration_morphing().unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(t.params, p0);
        assert_eq!(t.encoder, e0);
        let changed = t.pool.entries().iter().zip(&pool0).filter(|(a, b)| a != b).count();
        assert!(changed > 0 && changed <= 3);
        assert_eq!(t.pool.len(), 6);
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let run = |threads: usize| {
            let mut cfg = tiny_config(TaskKind::Morphing);
            cfg.threads = threads;
            let mut t = Trainer::new(cfg, morph_targets()).unwrap();
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.extend(t.step().unwrap().losses);
            }
            (t.params, t.encoder, losses)
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(2));
        assert!(a.0.is_finite());
        assert!(a.2.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn locomotion_iteration_tracks_offsets() {
        let cfg = tiny_config(TaskKind::Locomotion);
        let mut t = Trainer::new(cfg, Targets::Locomotion(disc(12, 2.0, [0.2, 0.8, 0.2]))).unwrap();
        for _ in 0..3 {
            let r = t.step().unwrap();
            assert_eq!(r.losses.len(), 4);
        }
        let Targets::Locomotion(base) = t.targets().clone() else { unreachable!() };
        for e in t.pool.entries() {
            assert!(e.offset.fits(&base, 1) || e.offset == ShiftedTarget::default());
            assert!(e.grid.satisfies_invariants());
        }
    }

    #[test]
    fn directions_respect_margin() {
        let base = disc(16, 2.0, [1.0, 1.0, 1.0]);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut off = ShiftedTarget::default();
        for _ in 0..200 {
            let (dir, next) = choose_direction(&mut r, off, 16, &base, 4);
            assert!(next.fits(&base, 4), "{dir} -> {next:?}");
            off = next;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(TaskKind::Morphing);
        cfg.min_steps = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(TaskKind::Morphing);
        cfg.n_seed_replacements = 4;
        assert!(cfg.validate().is_err());
        let cfg = tiny_config(TaskKind::Morphing);
        assert!(Trainer::new(cfg, Targets::Locomotion(disc(12, 2.0, [1.0; 3]))).is_err());
    }
}
