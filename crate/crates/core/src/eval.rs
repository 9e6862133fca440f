//! Metrics, the fire-rate robustness sweep, goal-embedding PCA and frame rendering.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellGrid, ALIVE_THRESHOLD, ALPHA, RGBA};
use crate::model::{rollout, GoalEncoder, NcaParams, StepConfig};
use crate::tasks::{direction_to_delta, shift_image, Direction, RgbaImage};
use crate::trainer::mse_rgba;

/// Alpha-weighted mean `(x, y)` over cells with alpha above the living threshold.
pub fn center_of_mass(grid: &CellGrid) -> Result<(f64, f64)> {
    let w = grid.width();
    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &a) in grid.channel(ALPHA).iter().enumerate() {
        if a > ALIVE_THRESHOLD {
            let a = a as f64;
            sx += a * (i % w) as f64;
            sy += a * (i / w) as f64;
            sw += a;
        }
    }
    if sw == 0.0 {
        return Err(Error::NoLiveCells);
    }
    Ok((sx / sw, sy / sw))
}

/// Intersection over union of the two `alpha > threshold` masks; 1 when both are empty.
pub fn alpha_iou(grid: &CellGrid, target: &RgbaImage, threshold: f32) -> Result<f64> {
    if grid.height() != target.height() || grid.width() != target.width() {
        return Err(Error::DimensionMismatch(format!(
            "grid is {}x{}, target is {}x{}",
            grid.height(),
            grid.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(mask_iou(grid.channel(ALPHA), target.alpha(), threshold))
}

pub fn mask_iou(a: &[f32], b: &[f32], threshold: f32) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (*x > threshold, *y > threshold);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One cell of the robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub fire_rate: f32,
    pub goal_rate: f32,
    pub direction: Direction,
    pub steps: usize,
    /// RGBA error against the creature moved by the ideal displacement.
    pub mse: f64,
    /// Shape retention: IoU of the final alpha mask with the grown creature
    /// translated by the measured displacement.
    pub iou: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub grid_size: usize,
    pub grow_steps: usize,
    pub move_steps: usize,
    pub settle_steps: usize,
    pub goal_rate: f32,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid_size: 96,
            grow_steps: 96,
            move_steps: 128,
            settle_steps: 96,
            goal_rate: 1.0,
            seed: 0,
        }
    }
}

/// Grow under "stay" at each rate, then from the grown state run each
/// direction followed by "stay", recording displacement and shape metrics.
/// `base` is the creature centered on a `grid_size` canvas.
pub fn fire_rate_sweep(
    params: &NcaParams,
    encoder: &GoalEncoder,
    base: &RgbaImage,
    rates: &[f32],
    directions: &[Direction],
    cfg: &SweepConfig,
) -> Result<Vec<MetricsRow>> {
    if base.height() != cfg.grid_size || base.width() != cfg.grid_size {
        return Err(Error::DimensionMismatch(format!(
            "target is {}x{}, sweep grid is {}",
            base.height(),
            base.width(),
            cfg.grid_size
        )));
    }
    let seed = CellGrid::new_seed(cfg.grid_size, cfg.grid_size, params.channels - RGBA)?;
    let mut rows = Vec::with_capacity(rates.len() * directions.len());
    for (ri, &rate) in rates.iter().enumerate() {
        let step = StepConfig::new(rate, cfg.goal_rate)?;
        let mut rng = eval_rng(cfg.seed, ri, 0);
        let grown = rollout(&seed, params, encoder, Direction::Stay.goal_id(), cfg.grow_steps, &step, &mut rng, None)?;
        let start = center_of_mass(&grown).ok();
        for (di, &dir) in directions.iter().enumerate() {
            let mut rng = eval_rng(cfg.seed, ri, di + 1);
            let moved = rollout(&grown, params, encoder, dir.goal_id(), cfg.move_steps, &step, &mut rng, None)?;
            let last = rollout(
                &moved,
                params,
                encoder,
                Direction::Stay.goal_id(),
                cfg.settle_steps,
                &step,
                &mut rng,
                None,
            )?;
            let (dx, dy) = match (start, center_of_mass(&last).ok()) {
                (Some(a), Some(b)) => (b.0 - a.0, b.1 - a.1),
                _ => (f64::NAN, f64::NAN),
            };
            let iou = if dx.is_finite() {
                let reference = translate_clamped(&RgbaImage::from_grid(&grown), dx.round() as i32, dy.round() as i32);
                alpha_iou(&last, &reference, ALIVE_THRESHOLD)?
            } else {
                0.0
            };
            let (ex, ey) = direction_to_delta(dir, cfg.move_steps);
            let ideal = translate_clamped(base, ex, ey);
            rows.push(MetricsRow {
                fire_rate: rate,
                goal_rate: cfg.goal_rate,
                direction: dir,
                steps: cfg.move_steps + cfg.settle_steps,
                mse: mse_rgba(&last, &ideal)? as f64,
                iou,
                dx,
                dy,
            });
        }
    }
    Ok(rows)
}

fn translate_clamped(img: &RgbaImage, dx: i32, dy: i32) -> RgbaImage {
    let lim_x = img.width() as i32 - 1;
    let lim_y = img.height() as i32 - 1;
    shift_image(img, dx.clamp(-lim_x, lim_x), dy.clamp(-lim_y, lim_y)).expect("shift clamped to image size")
}

pub fn eval_rng(seed: u64, a: usize, b: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((a as u64) << 32) | b as u64);
    r
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("fire_rate,goal_rate,direction,steps,mse,iou,dx,dy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.4},{:.4}",
            r.fire_rate, r.goal_rate, r.direction, r.steps, r.mse, r.iou, r.dx, r.dy
        );
    }
    s
}

/// Goal encodings projected onto their top two principal axes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
    #[serde(skip)]
    pub mean: Vec<f64>,
    #[serde(skip)]
    pub components: [Vec<f64>; 2],
}

impl Embedding2D {
    /// Squared Frobenius error of reconstructing the centered encodings from two components.
    pub fn reconstruction_error(&self, encodings: &[Vec<f64>]) -> f64 {
        let mut err = 0.0;
        for (row, p) in encodings.iter().zip(&self.points) {
            for (j, v) in row.iter().enumerate() {
                let centered = v - self.mean[j];
                let approx = p[0] * self.components[0][j] + p[1] * self.components[1][j];
                err += (centered - approx).powi(2);
            }
        }
        err
    }
}

/// Encode every goal in 64-bit.
pub fn goal_encodings(encoder: &GoalEncoder) -> Result<Vec<Vec<f64>>> {
    (0..encoder.n_goals())
        .map(|g| Ok(encoder.encode(g)?.into_iter().map(f64::from).collect()))
        .collect()
}

pub fn goal_pca(encoder: &GoalEncoder) -> Result<Embedding2D> {
    pca_2d(&goal_encodings(encoder)?)
}

/// Two-component PCA via a Jacobi eigendecomposition of the covariance.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Embedding2D> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidValue(format!("PCA needs at least 2 goals, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch("encodings have inconsistent lengths".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let (values, vectors) = symmetric_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let component = |k: usize| -> Vec<f64> {
        let col = order.get(k).copied();
        let mut v: Vec<f64> = match col {
            Some(c) => (0..d).map(|i| vectors[i * d + c]).collect(),
            None => vec![0.0; d],
        };
        // Sign convention: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [component(0), component(1)];
    let ratio = |k: usize| -> f64 {
        match order.get(k) {
            Some(&c) if total > 0.0 => values[c].max(0.0) / total,
            _ => 0.0,
        }
    };
    let points = centered
        .iter()
        .map(|r| {
            [
                r.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
                r.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(Embedding2D {
        points,
        explained_variance_ratio: [ratio(0), ratio(1)],
        mean,
        components,
    })
}

/// Cyclic Jacobi rotations on a symmetric `d × d` row-major matrix.
/// Returns eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// RGBA channels clamped to [0, 1] and quantized with round-half-up, row-major.
pub fn render_frame(grid: &CellGrid) -> Vec<u8> {
    let n = grid.plane_len();
    let mut out = vec![0u8; RGBA * n];
    for c in 0..RGBA {
        for (i, v) in grid.channel(c).iter().enumerate() {
            out[i * RGBA + c] = quantize(*v);
        }
    }
    out
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_png(path: &Path, width: usize, height: usize, rgba: &[u8]) -> Result<()> {
    let img = image::RgbaImage::from_raw(width as u32, height as u32, rgba.to_vec())
        .ok_or_else(|| Error::DimensionMismatch(format!("{} bytes for a {width}x{height} frame", rgba.len())))?;
    img.save(path)?;
    Ok(())
}

pub fn save_frame(path: &Path, grid: &CellGrid) -> Result<()> {
    write_png(path, grid.width(), grid.height(), &render_frame(grid))
}
