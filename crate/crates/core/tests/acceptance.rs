//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts. The trained models are shared between tests; set
//! `GOALNCA_CKPT_DIR` to cache them across runs.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use goalnca::autodiff::{check_gradients_with, GradCheck};
use goalnca::eval::{eval_rng, goal_encodings};
use goalnca::grid::{ALIVE_THRESHOLD, ALPHA};
use goalnca::model::{perceive, Dense, HIDDEN_WIDTH};
use goalnca::store::{load_checkpoint, preset, save_checkpoint, trainer_checkpoint, RunConfig};
use goalnca::tasks::shift_image;
use goalnca::trainer::mse_rgba;
use goalnca::{
    backward, center_of_mass, fire_rate_sweep, goal_pca, rollout, AliveMask, CellGrid, Checkpoint, Direction,
    EncoderKind, GoalEncoder, NcaParams, RgbaImage, StepConfig, SweepConfig, Tape, Trainer,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/emoji")
}

// ---------------------------------------------------------------------------
// Gradient correctness

fn gradcheck_fixture(seed: u64) -> (NcaParams, GoalEncoder, CellGrid) {
    let c = 8;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NcaParams::init(c, &mut r);
    // A trained-looking output layer; the zero init would make most gradients vanish.
    p.layer3 = Dense::uniform(HIDDEN_WIDTH, c, &mut r);
    p.layer3.weight.iter_mut().for_each(|v| *v *= 0.3);
    let enc = GoalEncoder::init(EncoderKind::Embedding, 3, c - 4, &mut r);
    let mut g = CellGrid::zeros(c, 6, 6);
    for y in 1..5 {
        for x in 1..5 {
            for ch in 0..c {
                g.set(ch, y, x, r.random_range(0.0..1.0));
            }
        }
    }
    (p, enc, g)
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut min_checked = usize::MAX;
    for &fire in &[1.0f32, 0.5] {
        for &steps in &[1usize, 2, 4] {
            let (p, enc, g) = gradcheck_fixture(steps as u64 * 10 + (fire * 2.0) as u64);
            let opts = GradCheck {
                n_steps: steps,
                h: 1e-3,
                seed: 7,
                step: StepConfig::new(fire, 1.0).unwrap(),
                goal: 1,
                samples: 200,
            };
            let report = check_gradients_with(&p, &enc, &g, &opts, backward).unwrap();
            worst = worst.max(report.max_rel_error);
            min_checked = min_checked.min(report.checked);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "gradient correctness",
        worst < 1e-2 && min_checked >= 200 && secs < 120.0,
        format!("max rel error {worst:.2e}, ≥{min_checked} params per case, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// Oracle equivalence

fn alive_oracle(alpha: &[f32], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut m = f32::NEG_INFINITY;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        0.0
                    } else {
                        alpha[(yy * w as i64 + xx) as usize]
                    };
                    m = m.max(v);
                }
            }
            out[(y * w as i64 + x) as usize] = m >= ALIVE_THRESHOLD;
        }
    }
    out
}

fn conv_oracle(plane: &[f32], h: usize, w: usize, k: &[f32], bias: f32) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = bias as f64;
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let (yy, xx) = (y + ky - 1, x + kx - 1);
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        acc += k[(ky * 3 + kx) as usize] as f64 * plane[(yy * w as i64 + xx) as usize] as f64;
                    }
                }
            }
            out[(y * w as i64 + x) as usize] = acc;
        }
    }
    out
}

#[test]
fn oracle_equivalence() {
    // Every binary alpha pattern on a 3x3 grid.
    let mut mask_mismatches = 0;
    for pattern in 0u32..512 {
        let mut g = CellGrid::zeros(5, 3, 3);
        for i in 0..9 {
            if pattern & (1 << i) != 0 {
                g.set(ALPHA, i / 3, i % 3, 1.0);
            }
        }
        let got: AliveMask = g.alive_mask();
        if got.bits() != alive_oracle(g.channel(ALPHA), 3, 3).as_slice() {
            mask_mismatches += 1;
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut conv_err: f64 = 0.0;
    for _ in 0..20 {
        let (c, h, w) = (r.random_range(4..8), r.random_range(3..9), r.random_range(3..9));
        let data = (0..c * h * w).map(|_| r.random_range(-2.0..2.0)).collect();
        let g = CellGrid::from_data(c, h, w, data).unwrap();
        let mut p = NcaParams::init(c, &mut r);
        p.perception_bias.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
        let field = perceive(&g, &p).unwrap();
        for j in 0..3 * c {
            let want = conv_oracle(g.channel(j / 3), h, w, &p.perception_kernels[j * 9..j * 9 + 9], p.perception_bias[j]);
            for (i, v) in want.iter().enumerate() {
                conv_err = conv_err.max((field[j * h * w + i] as f64 - v).abs());
            }
        }
    }

    let mut shift_mismatches = 0;
    for _ in 0..20 {
        let (h, w) = (r.random_range(2..12), r.random_range(2..12));
        let data = (0..4 * h * w).map(|_| r.random::<f32>()).collect();
        let img = RgbaImage::from_data(h, w, data).unwrap();
        let (dx, dy) = (r.random_range(-(w as i32 - 1)..w as i32), r.random_range(-(h as i32 - 1)..h as i32));
        let got = shift_image(&img, dx, dy).unwrap();
        for c in 0..4 {
            for y in 0..h as i32 {
                for x in 0..w as i32 {
                    let (sy, sx) = (y - dy, x - dx);
                    let want = if sy < 0 || sx < 0 || sy >= h as i32 || sx >= w as i32 {
                        0.0
                    } else {
                        img.get(c, sy as usize, sx as usize)
                    };
                    if got.get(c, y as usize, x as usize) != want {
                        shift_mismatches += 1;
                    }
                }
            }
        }
    }

    verdict(
        "oracle equivalence",
        mask_mismatches == 0 && conv_err < 1e-6 && shift_mismatches == 0,
        format!("alive mask {mask_mismatches}/512 mismatches, perceive max err {conv_err:.1e}, shift {shift_mismatches} mismatches"),
    );
}

// ---------------------------------------------------------------------------
// Parameter accounting

#[test]
fn parameter_accounting() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let embedding = GoalEncoder::init(EncoderKind::Embedding, 5, 32, &mut r).param_count();
    let mut counts = Vec::new();
    let mut ok = embedding == 160;
    for c in [20usize, 36] {
        let got = NcaParams::init(c, &mut r).param_count();
        // Hand expansion: 27C kernels, 3C biases, 3C·64+64, 64·64+64, 64·C+C.
        let want = 27 * c + 3 * c + 3 * c * 64 + 64 + 64 * 64 + 64 + 64 * c + c;
        ok &= got == want && NcaParams::closed_form_count(c) == want;
        counts.push(format!("C={c}: {got}"));
    }
    verdict(
        "parameter accounting",
        ok,
        format!("embedding encoder {embedding} params, {}", counts.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// Desk-scale training runs, shared between criteria

const DESK_ITERS: usize = 3000;

struct DeskRun {
    ck: Checkpoint,
    /// Mean per-iteration loss over the first and last 50 iterations.
    first50: f32,
    last50: f32,
    all_finite: bool,
}

fn train_desk(run: &RunConfig) -> Checkpoint {
    let (targets, names) = run.load_targets().unwrap();
    let mut trainer = Trainer::new(run.train.clone(), targets).unwrap();
    let mut losses = Vec::with_capacity(run.train.total_iterations);
    for _ in 0..run.train.total_iterations {
        let report = trainer.step().unwrap();
        losses.push(report.losses.iter().sum::<f32>() / report.losses.len() as f32);
    }
    let mut ck = trainer_checkpoint(&trainer, run, &names);
    let curve = losses.iter().map(|l| format!("{l:e}")).collect::<Vec<_>>().join(",");
    ck.extra.insert("loss_curve".into(), curve);
    ck.extra.insert("run_config".into(), run_fingerprint(run));
    ck
}

fn run_fingerprint(run: &RunConfig) -> String {
    run.to_text().lines().filter(|l| !l.starts_with("data_dir")).collect::<Vec<_>>().join(";")
}

/// Train, or reuse a checkpoint from `GOALNCA_CKPT_DIR` made with the same configuration.
fn desk_run(name: &str, run: RunConfig) -> DeskRun {
    let cache = std::env::var_os("GOALNCA_CKPT_DIR").map(|d| PathBuf::from(d).join(format!("{name}.gnca")));
    let cached = cache
        .as_ref()
        .and_then(|p| load_checkpoint(p).ok())
        .filter(|ck| ck.extra.get("run_config") == Some(&run_fingerprint(&run)));
    let ck = match cached {
        Some(ck) => ck,
        None => {
            let ck = train_desk(&run);
            if let Some(path) = &cache {
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                save_checkpoint(path, &ck).unwrap();
            }
            ck
        }
    };
    let losses: Vec<f32> = ck.extra["loss_curve"].split(',').map(|v| v.parse().unwrap()).collect();
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    DeskRun {
        first50: mean(&losses[..50]),
        last50: mean(&losses[losses.len() - 50..]),
        all_finite: losses.iter().all(|l| l.is_finite()),
        ck,
    }
}

fn desk_morphing_config() -> RunConfig {
    let mut run = preset("morphing").unwrap();
    run.data_dir = data_dir();
    run.goals = vec!["smiley".into(), "lizard".into()];
    run.train.grid_size = 32;
    run.content_size = 24;
    run.train.n_hidden = 8;
    run.train.batch_size = 8;
    run.train.threads = 1;
    run.train.total_iterations = DESK_ITERS;
    run
}

fn desk_locomotion_config() -> RunConfig {
    let mut run = preset("locomotion").unwrap();
    run.data_dir = data_dir();
    run.target = "lizard".into();
    run.train.grid_size = 32;
    run.content_size = 12;
    run.train.n_hidden = 12;
    run.train.batch_size = 8;
    // Segments short enough that moves fit beside a small creature on a small grid.
    run.train.min_steps = 24;
    run.train.max_steps = 48;
    run.train.threads = 1;
    run.train.total_iterations = DESK_ITERS;
    run
}

fn morphing() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run("desk_morphing", desk_morphing_config()))
}

fn locomotion() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run("desk_locomotion", desk_locomotion_config()))
}

fn grow(ck: &Checkpoint, goal: usize, steps: usize, cfg: &StepConfig, rng: &mut ChaCha8Rng) -> CellGrid {
    let side = ck.extra_value("grid_size").unwrap();
    let seed = CellGrid::new_seed(side, side, ck.encoder.n_hidden()).unwrap();
    rollout(&seed, &ck.params, &ck.encoder, goal, steps, cfg, rng, None).unwrap()
}

fn step_config(ck: &Checkpoint) -> StepConfig {
    StepConfig::new(ck.extra_value("fire_rate").unwrap(), 1.0).unwrap()
}

#[test]
fn desk_morphing() {
    let run = morphing();
    let ck = &run.ck;
    let targets = ck.targets_on(&data_dir(), ck.extra_value("grid_size").unwrap()).unwrap();
    let cfg = step_config(ck);
    let ratio = run.last50 / run.first50;
    let mut switches = Vec::new();
    for (a, b) in [(0usize, 1usize), (1, 0)] {
        let mut rng = eval_rng(3, a, b);
        let grown = grow(ck, a, 96, &cfg, &mut rng);
        let switched = rollout(&grown, &ck.params, &ck.encoder, b, 96, &cfg, &mut rng, None).unwrap();
        let to_b = mse_rgba(&switched, &targets[b]).unwrap();
        let to_a = mse_rgba(&switched, &targets[a]).unwrap();
        switches.push((a, b, to_a, to_b));
    }
    let switch_ok = switches.iter().all(|&(_, _, to_a, to_b)| to_b < to_a);
    let detail = switches
        .iter()
        .map(|(a, b, to_a, to_b)| format!("{a}->{b} mse(B) {to_b:.4} vs mse(A) {to_a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "desk morphing",
        run.all_finite && ratio < 0.25 && switch_ok,
        format!(
            "loss first50 {:.4} last50 {:.4} ratio {ratio:.3}; {detail}",
            run.first50, run.last50
        ),
    );
}

#[test]
fn stability_over_1000_steps() {
    let ck = &morphing().ck;
    let targets = ck.targets_on(&data_dir(), ck.extra_value("grid_size").unwrap()).unwrap();
    let cfg = step_config(ck);
    let mut worst_ratio: f32 = 0.0;
    let mut at200 = Vec::new();
    let mut alive = Vec::new();
    for (goal, target) in targets.iter().enumerate() {
        let mut rng = eval_rng(5, goal, 0);
        let mut grid = grow(ck, goal, 200, &cfg, &mut rng);
        let reference = mse_rgba(&grid, target).unwrap();
        at200.push(reference);
        alive.push(grid.alive_mask().count());
        for _ in 0..1000 {
            grid = rollout(&grid, &ck.params, &ck.encoder, goal, 1, &cfg, &mut rng, None).unwrap();
            let m = mse_rgba(&grid, target).unwrap();
            worst_ratio = worst_ratio.max(m / reference);
        }
    }
    verdict(
        "stability over 1000 steps",
        worst_ratio <= 2.0 && alive.iter().all(|&n| n > 0),
        format!("mse at step 200 {at200:.4?}, live cells at step 200 {alive:?}, worst later mse / step-200 mse {worst_ratio:.3}"),
    );
}

fn displacement(ck: &Checkpoint, dir: Direction, fire: f32, seed: u64) -> Option<(f64, f64)> {
    let mut rng = eval_rng(seed, dir.goal_id(), 0);
    let side = 96;
    let seed_grid = CellGrid::new_seed(side, side, ck.encoder.n_hidden()).unwrap();
    let cfg = StepConfig::new(fire, 1.0).unwrap();
    let grown = rollout(&seed_grid, &ck.params, &ck.encoder, Direction::Stay.goal_id(), 96, &cfg, &mut rng, None).unwrap();
    let moved = rollout(&grown, &ck.params, &ck.encoder, dir.goal_id(), 96, &cfg, &mut rng, None).unwrap();
    let (x0, y0) = center_of_mass(&grown).ok()?;
    let (x1, y1) = center_of_mass(&moved).ok()?;
    Some((x1 - x0, y1 - y0))
}

#[test]
fn desk_locomotion() {
    let run = locomotion();
    let ck = &run.ck;
    let mut ok = run.all_finite;
    let mut parts = Vec::new();
    for dir in [Direction::Right, Direction::Left, Direction::Up, Direction::Down] {
        let (ux, uy) = dir.unit();
        let d = displacement(ck, dir, 1.0, 1);
        let pass = match d {
            // Project onto the commanded axis and its perpendicular.
            Some((dx, dy)) => {
                let along = dx * ux as f64 + dy * uy as f64;
                let across = dx * uy as f64 + dy * ux as f64;
                (6.0..=18.0).contains(&along) && across.abs() < 4.0
            }
            None => false,
        };
        ok &= pass;
        parts.push(match d {
            Some((dx, dy)) => format!("{} dx {dx:+.1} dy {dy:+.1}", dir.name()),
            None => format!("{} died", dir.name()),
        });
    }
    verdict(
        "desk locomotion",
        ok,
        format!("loss ratio {:.3}; {}", run.last50 / run.first50, parts.join(", ")),
    );
}

#[test]
fn robustness_ordering() {
    let ck = &locomotion().ck;
    let base = ck.targets_on(&data_dir(), 96).unwrap().remove(0);
    let cfg = SweepConfig {
        grid_size: 96,
        seed: 2,
        ..SweepConfig::default()
    };
    let rates = [1.0f32, 0.75, 0.25];
    let rows = fire_rate_sweep(&ck.params, &ck.encoder, &base, &rates, &[Direction::Right], &cfg).unwrap();
    let iou = |rate: f32| rows.iter().find(|r| r.fire_rate == rate).unwrap().iou;
    let at75 = rows.iter().find(|r| r.fire_rate == 0.75).unwrap();
    let (i1, i75, i25) = (iou(1.0), iou(0.75), iou(0.25));
    let sign_ok = at75.dx.is_finite() && at75.dx > 0.0;
    verdict(
        "robustness ordering",
        i1 >= i75 && i75 >= i25 - 0.05 && sign_ok,
        format!("IoU 1.0 {i1:.3}, 0.75 {i75:.3}, 0.25 {i25:.3}; dx at 0.75 {:+.1}", at75.dx),
    );
}

// ---------------------------------------------------------------------------
// Determinism and persistence

#[test]
fn determinism_and_persistence() {
    let run_once = || {
        let mut run = preset("locomotion").unwrap();
        run.data_dir = data_dir();
        run.train.grid_size = 24;
        run.content_size = 12;
        run.train.n_hidden = 4;
        run.train.batch_size = 4;
        run.train.pool_size = 16;
        run.train.min_steps = 4;
        run.train.max_steps = 8;
        run.train.threads = 1;
        run.train.seed = 42;
        run.train.total_iterations = 100;
        train_desk(&run).to_bytes().unwrap()
    };
    let a = run_once();
    let b = run_once();
    let restored = Checkpoint::from_bytes(&a).unwrap().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gnca");
    save_checkpoint(&path, &Checkpoint::from_bytes(&a).unwrap()).unwrap();
    let from_disk = std::fs::read(&path).unwrap();
    let ok = a == b && restored == a && from_disk == a;
    verdict(
        "determinism and persistence",
        ok,
        format!(
            "two 100-iteration runs identical: {}, round trip identical: {}, {} bytes",
            a == b,
            restored == a && from_disk == a,
            a.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// PCA

#[test]
fn pca_sanity() {
    let ck = &locomotion().ck;
    let emb = goal_pca(&ck.encoder).unwrap();
    let mut min_dist = f64::INFINITY;
    for i in 0..emb.points.len() {
        for j in i + 1..emb.points.len() {
            let (a, b) = (emb.points[i], emb.points[j]);
            min_dist = min_dist.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    let rows = goal_encodings(&ck.encoder).unwrap();
    let ours = emb.reconstruction_error(&rows);
    let oracle = svd_rank2_error(&rows);
    let diff = (ours - oracle).abs();
    verdict(
        "pca sanity",
        emb.points.len() == 5 && min_dist > 0.0 && diff < 1e-6,
        format!("{} points, min pairwise distance {min_dist:.3e}, reconstruction error {ours:.6e} vs svd {oracle:.6e}", emb.points.len()),
    );
}

/// Squared Frobenius error of the best rank-2 approximation of the centered rows.
fn svd_rank2_error(rows: &[Vec<f64>]) -> f64 {
    let (n, d) = (rows.len(), rows[0].len());
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s.iter().skip(2).map(|v| v * v).sum()
}

// ---------------------------------------------------------------------------
// Tape memory

#[test]
fn tape_memory_bound() {
    let (c, side, steps) = (20, 64, 192);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let params = NcaParams::init(c, &mut r);
    let encoder = GoalEncoder::init(EncoderKind::Embedding, 5, c - 4, &mut r);
    let mut grid = CellGrid::zeros(c, side, side);
    grid.channel_mut(ALPHA).iter_mut().for_each(|v| *v = 1.0);
    let cfg = StepConfig::new(0.5, 1.0).unwrap();
    let mut per_step = Vec::new();
    let mut tape = Tape::new();
    let mut state = grid;
    for n in 1..=steps {
        state = goalnca::nca_step(&state, &params, &encoder.encode(0).unwrap(), &cfg, &mut r, Some(&mut tape)).unwrap();
        if n == 1 || n == steps {
            per_step.push(tape.memory_bytes() as f64 / n as f64);
        }
    }
    let total = tape.memory_bytes();
    // Linear growth: per-step footprint stays constant within 5 %.
    let linear = (per_step[1] / per_step[0] - 1.0).abs() < 0.05;
    verdict(
        "tape memory bound",
        total < 2 << 30 && linear,
        format!("{steps} steps of {side}x{side}, C={c}: {:.1} MiB", total as f64 / (1 << 20) as f64),
    );
}
