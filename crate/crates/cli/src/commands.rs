use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use goalnca::eval::{center_of_mass, metrics_csv, save_frame};
use goalnca::store::{load_checkpoint, preset, save_checkpoint, trainer_checkpoint, Checkpoint};
use goalnca::trainer::mse_rgba;
use goalnca::{fire_rate_sweep, goal_pca, nca_step, CellGrid, Direction, RgbaImage, StepConfig, SweepConfig, TaskKind, Trainer};

use crate::{out_dir, CheckpointArgs, EvalArgs, PcaArgs, RenderArgs, SweepArgs, TrainArgs};

pub fn train(a: TrainArgs) -> Result<()> {
    let mut run = preset(&a.preset)?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        run.set(k.trim(), v)?;
    }
    if let Some(n) = a.iters {
        run.train.total_iterations = n;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(d) = a.data_dir {
        run.data_dir = d;
    }
    if let Some(t) = a.threads {
        run.train.threads = t;
    }
    if let Some(c) = a.checkpoint_every {
        run.checkpoint_every = c;
    }
    run.train.validate()?;
    let out = out_dir(a.out.or_else(|| run.out_dir.clone()));
    create_dir(&out)?;
    run.out_dir = Some(out.clone());
    write_file(&out.join("config.txt"), run.to_text().as_bytes())?;

    let (targets, names) = run.load_targets()?;
    let mut trainer = Trainer::new(run.train.clone(), targets)?;
    let log_path = out.join("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?);
    let total = run.train.total_iterations;
    for _ in 0..total {
        let report = trainer.step()?;
        if report.losses.iter().any(|l| !l.is_finite()) {
            bail!("non-finite loss at iteration {}", report.iteration);
        }
        let it = report.iteration;
        if it % run.log_every.max(1) == 0 || it == total {
            serde_json::to_writer(&mut log, &report)?;
            log.write_all(b"\n")?;
            log.flush()?;
            let mean = report.losses.iter().sum::<f32>() / report.losses.len() as f32;
            println!("iteration {it} loss {mean:.6}");
        }
        if run.checkpoint_every > 0 && it % run.checkpoint_every == 0 && it != total {
            let path = out.join(format!("ckpt_{it:06}.gnca"));
            save_checkpoint(&path, &trainer_checkpoint(&trainer, &run, &names))?;
        }
    }
    let path = out.join("final.gnca");
    save_checkpoint(&path, &trainer_checkpoint(&trainer, &run, &names))?;
    println!("{}", path.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn step_config(ck: &Checkpoint, fire_rate: Option<f32>) -> Result<StepConfig> {
    let fire = fire_rate.or_else(|| ck.extra_value("fire_rate")).unwrap_or(1.0);
    let goal = ck.extra_value("goal_rate").unwrap_or(1.0);
    Ok(StepConfig::new(fire, goal)?)
}

fn grid_side(ck: &Checkpoint, grid: Option<usize>) -> usize {
    grid.or_else(|| ck.extra_value("grid_size")).unwrap_or(64)
}

#[derive(Serialize)]
struct FrameMetrics {
    step: usize,
    goal: String,
    alive_cells: usize,
    center_of_mass: Option<(f64, f64)>,
    mse: Option<f32>,
}

/// Grows from the seed through `phases`, saving frames and per-frame metrics.
struct Recorder<'a> {
    ck: &'a Checkpoint,
    targets: Option<Vec<RgbaImage>>,
    frames_dir: PathBuf,
    frame_every: usize,
    metrics: Vec<FrameMetrics>,
}

impl Recorder<'_> {
    fn record(&mut self, step: usize, goal: usize, grid: &CellGrid) -> Result<()> {
        let names = self.ck.goal_names();
        let mse = match (&self.targets, self.ck.task) {
            (Some(t), TaskKind::Morphing) => Some(mse_rgba(grid, &t[goal])?),
            _ => None,
        };
        self.metrics.push(FrameMetrics {
            step,
            goal: names[goal].clone(),
            alive_cells: grid.alive_mask().count(),
            center_of_mass: center_of_mass(grid).ok(),
            mse,
        });
        save_frame(&self.frames_dir.join(format!("frame_{step:05}.png")), grid)?;
        Ok(())
    }

    fn run(&mut self, phases: &[(usize, usize)], side: usize, cfg: &StepConfig, seed: u64) -> Result<CellGrid> {
        let ck = self.ck;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = CellGrid::new_seed(side, side, ck.encoder.n_hidden())?;
        let mut step = 0;
        self.record(step, phases.first().map_or(0, |p| p.0), &grid)?;
        for &(goal, steps) in phases {
            let pvec = ck.encoder.encode(goal)?;
            for _ in 0..steps {
                grid = nca_step(&grid, &ck.params, &pvec, cfg, &mut rng, None)?;
                step += 1;
                if step % self.frame_every.max(1) == 0 {
                    self.record(step, goal, &grid)?;
                }
            }
        }
        if step % self.frame_every.max(1) != 0 {
            self.record(step, phases.last().map_or(0, |p| p.0), &grid)?;
        }
        Ok(grid)
    }
}

fn recorder<'a>(ck: &'a Checkpoint, common: &CheckpointArgs, side: usize, out: &Path, frame_every: usize) -> Result<Recorder<'a>> {
    let frames_dir = out.join("frames");
    create_dir(&frames_dir)?;
    let targets = match ck.targets_on(&common.data_dir, side) {
        Ok(t) => Some(t),
        Err(e) => {
            eprintln!("warning: no targets for error metrics ({e})");
            None
        }
    };
    Ok(Recorder {
        ck,
        targets,
        frames_dir,
        frame_every,
        metrics: Vec::new(),
    })
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = open_checkpoint(&a.common.ckpt)?;
    let goal = ck.goal_id(&a.goal)?;
    let cfg = step_config(&ck, a.fire_rate)?;
    let side = grid_side(&ck, a.grid);
    let out = out_dir(a.common.out.clone());
    let mut rec = recorder(&ck, &a.common, side, &out, a.frame_every)?;
    rec.run(&[(goal, a.steps)], side, &cfg, a.common.seed)?;
    let last = rec.metrics.last().expect("at least the seed frame is recorded");
    println!(
        "goal {} steps {} alive {} mse {}",
        last.goal,
        last.step,
        last.alive_cells,
        last.mse.map_or("n/a".to_string(), |m| format!("{m:.6}"))
    );
    write_file(&out.join("metrics.json"), serde_json::to_string_pretty(&rec.metrics)?.as_bytes())
}

/// `goal:steps,goal:steps,...`
pub fn parse_schedule(ck: &Checkpoint, schedule: &str) -> Result<Vec<(usize, usize)>> {
    schedule
        .split(',')
        .map(|phase| {
            let (goal, steps) = phase
                .trim()
                .split_once(':')
                .with_context(|| format!("schedule phase '{phase}' is not goal:steps"))?;
            let steps = steps
                .trim()
                .parse()
                .with_context(|| format!("bad step count in '{phase}'"))?;
            Ok((ck.goal_id(goal.trim())?, steps))
        })
        .collect()
}

pub fn render(a: RenderArgs) -> Result<()> {
    let ck = open_checkpoint(&a.common.ckpt)?;
    let phases = parse_schedule(&ck, &a.schedule)?;
    let cfg = step_config(&ck, a.fire_rate)?;
    let side = grid_side(&ck, a.grid);
    let out = out_dir(a.common.out.clone());
    let mut rec = recorder(&ck, &a.common, side, &out, a.frame_every)?;
    rec.run(&phases, side, &cfg, a.common.seed)?;
    println!("{} frames in {}", rec.metrics.len(), rec.frames_dir.display());
    write_file(&out.join("metrics.json"), serde_json::to_string_pretty(&rec.metrics)?.as_bytes())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let ck = open_checkpoint(&a.common.ckpt)?;
    if ck.task != TaskKind::Locomotion {
        bail!("sweep needs a locomotion checkpoint, {} is {}", a.common.ckpt.display(), ck.task.name());
    }
    let directions: Vec<Direction> = a
        .directions
        .iter()
        .map(|d| d.trim().parse::<Direction>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let base = ck
        .targets_on(&a.common.data_dir, a.grid)
        .with_context(|| format!("cannot rebuild the creature from {}", a.common.data_dir.display()))?
        .remove(0);
    let cfg = SweepConfig {
        grid_size: a.grid,
        grow_steps: a.grow_steps,
        move_steps: a.move_steps,
        settle_steps: a.settle_steps,
        goal_rate: ck.extra_value("goal_rate").unwrap_or(1.0),
        seed: a.common.seed,
    };
    let rows = fire_rate_sweep(&ck.params, &ck.encoder, &base, &a.rates, &directions, &cfg)?;
    let csv = metrics_csv(&rows);
    let out = out_dir(a.common.out.clone());
    create_dir(&out)?;
    write_file(&out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn pca(a: PcaArgs) -> Result<()> {
    let ck = open_checkpoint(&a.ckpt)?;
    let emb = goal_pca(&ck.encoder)?;
    let doc = serde_json::json!({
        "goals": ck.goal_names(),
        "points": emb.points,
        "explained_variance_ratio": emb.explained_variance_ratio,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    let out = out_dir(a.out);
    create_dir(&out)?;
    write_file(&out.join("pca.json"), text.as_bytes())?;
    println!("{text}");
    Ok(())
}
