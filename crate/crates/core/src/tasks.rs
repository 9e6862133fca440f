//! Target images for the morphing and locomotion tasks.
//!
//! Coordinates: `x` is the column (rightward positive), `y` is the row
//! (downward positive), so "up" moves toward smaller `y`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgba};

use crate::error::{Error, Result};
use crate::grid::{CellGrid, RGBA};

/// Side length images are padded or cropped to on load.
pub const DATASET_SIZE: usize = 64;
/// One pixel of target displacement per this many steps.
pub const STEPS_PER_PIXEL: f64 = 8.0;

/// Premultiplied RGBA in `[0, 1]`, channel-major like [`CellGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbaImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; RGBA * height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != RGBA * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a 4x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// The first four channels of a grid.
    pub fn from_grid(grid: &CellGrid) -> Self {
        let n = grid.plane_len();
        Self {
            height: grid.height(),
            width: grid.width(),
            data: grid.data()[..RGBA * n].to_vec(),
        }
    }

    /// Straight-alpha 8-bit pixels, premultiplied on the way in.
    pub fn from_rgba8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != RGBA * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {height}x{width} RGBA image",
                pixels.len()
            )));
        }
        let n = height * width;
        let mut data = vec![0.0; RGBA * n];
        for (i, px) in pixels.chunks_exact(4).enumerate() {
            let a = px[3] as f32 / 255.0;
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0 * a;
            }
            data[3 * n + i] = a;
        }
        Ok(Self { height, width, data })
    }

    /// Back to straight-alpha 8-bit pixels.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let n = self.plane_len();
        let mut out = vec![0u8; RGBA * n];
        for i in 0..n {
            let a = self.data[3 * n + i].clamp(0.0, 1.0);
            for c in 0..3 {
                let v = if a > 0.0 { self.data[c * n + i] / a } else { 0.0 };
                out[i * 4 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            out[i * 4 + 3] = (a * 255.0).round() as u8;
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn alpha(&self) -> &[f32] {
        let n = self.plane_len();
        &self.data[3 * n..]
    }

    /// Inclusive `(x_min, y_min, x_max, y_max)` of pixels with nonzero alpha.
    pub fn content_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(3, y, x) > 0.0 {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    /// Center-pad or center-crop to `height × width`.
    pub fn place_centered(&self, height: usize, width: usize) -> RgbaImage {
        let mut out = RgbaImage::zeros(height, width);
        let oy = height as i64 / 2 - self.height as i64 / 2;
        let ox = width as i64 / 2 - self.width as i64 / 2;
        for c in 0..RGBA {
            for y in 0..self.height {
                let ty = y as i64 + oy;
                if ty < 0 || ty >= height as i64 {
                    continue;
                }
                for x in 0..self.width {
                    let tx = x as i64 + ox;
                    if tx < 0 || tx >= width as i64 {
                        continue;
                    }
                    out.set(c, ty as usize, tx as usize, self.get(c, y, x));
                }
            }
        }
        out
    }

    /// Resample to `size × size` (premultiplied, so edges do not bleed color).
    pub fn resized(&self, size: usize) -> RgbaImage {
        if size == self.height && size == self.width {
            return self.clone();
        }
        let n = self.plane_len();
        let buf: ImageBuffer<Rgba<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let i = y as usize * self.width + x as usize;
                Rgba([self.data[i], self.data[n + i], self.data[2 * n + i], self.data[3 * n + i]])
            });
        let r = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        let m = size * size;
        let mut data = vec![0.0; RGBA * m];
        for (x, y, px) in r.enumerate_pixels() {
            let i = y as usize * size + x as usize;
            for c in 0..RGBA {
                data[c * m + i] = px.0[c].clamp(0.0, 1.0);
            }
        }
        RgbaImage {
            height: size,
            width: size,
            data,
        }
    }
}

/// Integer translation with zero fill. Positive `dx` moves content right,
/// positive `dy` moves it down.
pub fn shift_image(img: &RgbaImage, dx: i32, dy: i32) -> Result<RgbaImage> {
    if dx.unsigned_abs() as usize >= img.width || dy.unsigned_abs() as usize >= img.height {
        return Err(Error::ShiftTooLarge {
            dx,
            dy,
            width: img.width,
            height: img.height,
        });
    }
    let (h, w) = (img.height as i64, img.width as i64);
    let mut out = RgbaImage::zeros(img.height, img.width);
    for c in 0..RGBA {
        for y in 0..h {
            let sy = y - dy as i64;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx as i64;
                if sx < 0 || sx >= w {
                    continue;
                }
                out.set(c, y as usize, x as usize, img.get(c, sy as usize, sx as usize));
            }
        }
    }
    Ok(out)
}

/// Locomotion goals, in goal-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Stay,
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::Stay,
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    pub fn goal_id(self) -> usize {
        self as usize
    }

    pub fn from_goal_id(id: usize) -> Option<Direction> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Stay => "stay",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    /// Unit step `(dx, dy)`.
    pub fn unit(self) -> (i32, i32) {
        match self {
            Direction::Stay => (0, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown direction '{s}' (expected stay|up|down|left|right)")))
    }
}

/// Target displacement for `num_steps` steps: `round(num_steps / 8)` pixels
/// along the direction's axis, ties to even.
pub fn direction_to_delta(direction: Direction, num_steps: usize) -> (i32, i32) {
    let mag = (num_steps as f64 / STEPS_PER_PIXEL).round_ties_even() as i32;
    let (ux, uy) = direction.unit();
    (ux * mag, uy * mag)
}

/// A base image translated by an accumulated integer offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ShiftedTarget {
    pub dx: i32,
    pub dy: i32,
}

impl ShiftedTarget {
    pub fn moved(self, delta: (i32, i32)) -> Self {
        Self {
            dx: self.dx + delta.0,
            dy: self.dy + delta.1,
        }
    }

    /// Whether the shifted content stays at least `margin` pixels from every border.
    pub fn fits(self, base: &RgbaImage, margin: usize) -> bool {
        let Some((x0, y0, x1, y1)) = base.content_bounds() else {
            return true;
        };
        let m = margin as i64;
        let (w, h) = (base.width as i64, base.height as i64);
        x0 as i64 + self.dx as i64 >= m
            && y0 as i64 + self.dy as i64 >= m
            && x1 as i64 + self.dx as i64 <= w - 1 - m
            && y1 as i64 + self.dy as i64 <= h - 1 - m
    }

    pub fn render(self, base: &RgbaImage) -> Result<RgbaImage> {
        shift_image(base, self.dx, self.dy)
    }
}

/// Decode one RGBA raster, premultiply, and center pad/crop to `size`.
pub fn load_rgba_image(path: &Path, size: usize) -> Result<RgbaImage> {
    let dataset_err = |message: String| Error::Dataset {
        path: path.to_path_buf(),
        message,
    };
    let img = image::open(path).map_err(|e| dataset_err(format!("unreadable image: {e}")))?;
    if !img.color().has_alpha() {
        return Err(dataset_err("image has no alpha channel".into()));
    }
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    if w == 0 || h == 0 {
        return Err(dataset_err("image is empty".into()));
    }
    let decoded = RgbaImage::from_rgba8(h, w, rgba.as_raw())?;
    let placed = decoded.place_centered(size, size);
    if placed.height != size || placed.width != size {
        return Err(dataset_err(format!("expected {size}x{size} after padding")));
    }
    Ok(placed)
}

/// Goal images of the morphing task, one per file.
#[derive(Clone, Debug)]
pub struct EmojiDataset {
    pub names: Vec<String>,
    pub images: Vec<RgbaImage>,
}

impl EmojiDataset {
    pub fn n_goals(&self) -> usize {
        self.images.len()
    }

    /// Resize every image to `content` pixels and center it in a `grid`-sized canvas.
    pub fn rescaled(&self, content: usize, grid: usize) -> EmojiDataset {
        EmojiDataset {
            names: self.names.clone(),
            images: self
                .images
                .iter()
                .map(|im| im.resized(content).place_centered(grid, grid))
                .collect(),
        }
    }

    /// Keep only the named goals, in the given order. Names may be file
    /// stems ("03_lizard") or short names ("lizard").
    pub fn select(&self, names: &[String]) -> Result<EmojiDataset> {
        let mut out = EmojiDataset {
            names: Vec::new(),
            images: Vec::new(),
        };
        for want in names {
            let i = self
                .names
                .iter()
                .position(|n| n == want || short_name(n) == want)
                .ok_or_else(|| Error::InvalidValue(format!("no goal image named '{want}'")))?;
            out.names.push(self.names[i].clone());
            out.images.push(self.images[i].clone());
        }
        Ok(out)
    }
}

/// Every `.png` in `dir`, sorted by file name. Names are file stems.
pub fn load_emoji_dataset(dir: &Path) -> Result<EmojiDataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            message: "no .png images found".into(),
        });
    }
    let mut names = Vec::with_capacity(paths.len());
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        images.push(load_rgba_image(p, DATASET_SIZE)?);
        names.push(p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    }
    Ok(EmojiDataset { names, images })
}

/// Dataset name for a file stem like `03_lizard` → `lizard`.
pub fn short_name(stem: &str) -> &str {
    match stem.split_once('_') {
        Some((prefix, rest)) if prefix.chars().all(|c| c.is_ascii_digit()) => rest,
        _ => stem,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbaImage {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbaImage::from_data(h, w, (0..4 * h * w).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn blob(h: usize, w: usize, x0: usize, y0: usize, size: usize) -> RgbaImage {
        let mut img = RgbaImage::zeros(h, w);
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                for c in 0..4 {
                    img.set(c, y, x, 0.5 + 0.1 * c as f32);
                }
            }
        }
        img
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = random_image(8, 8, 1);
        assert_eq!(shift_image(&img, 0, 0).unwrap(), img);
    }

    #[test]
    fn shift_round_trip_within_margin() {
        let img = blob(40, 40, 14, 10, 10);
        let there = shift_image(&img, 12, 0).unwrap();
        assert_eq!(shift_image(&there, -12, 0).unwrap(), img);
    }

    #[test]
    fn shift_matches_index_oracle() {
        let img = random_image(9, 7, 2);
        let out = shift_image(&img, 3, -2).unwrap();
        for c in 0..4 {
            for y in 0..9i32 {
                for x in 0..7i32 {
                    let (sx, sy) = (x - 3, y + 2);
                    let want = if (0..7).contains(&sx) && (0..9).contains(&sy) {
                        img.get(c, sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(out.get(c, y as usize, x as usize), want);
                }
            }
        }
    }

    #[test]
    fn oversized_shift_is_rejected() {
        let img = RgbaImage::zeros(8, 8);
        assert!(matches!(shift_image(&img, 8, 0), Err(Error::ShiftTooLarge { .. })));
        assert!(matches!(shift_image(&img, 0, -9), Err(Error::ShiftTooLarge { .. })));
    }

    #[test]
    fn direction_deltas() {
        assert_eq!(direction_to_delta(Direction::Right, 96), (12, 0));
        assert_eq!(direction_to_delta(Direction::Stay, 200), (0, 0));
        // 12 / 8 = 1.5 rounds to 2; 20 / 8 = 2.5 rounds to 2.
        assert_eq!(direction_to_delta(Direction::Up, 12), (0, -2));
        assert_eq!(direction_to_delta(Direction::Left, 20), (-2, 0));
        assert_eq!(direction_to_delta(Direction::Down, 4), (0, 0));
    }

    #[test]
    fn directions_parse_and_order() {
        for (i, d) in Direction::ALL.iter().enumerate() {
            assert_eq!(d.goal_id(), i);
            assert_eq!(d.name().parse::<Direction>().unwrap(), *d);
        }
        assert!("north".parse::<Direction>().is_err());
    }

    #[test]
    fn four_right_segments_accumulate() {
        let base = blob(64, 64, 8, 28, 8);
        let mut t = ShiftedTarget::default();
        for _ in 0..4 {
            let next = t.moved(direction_to_delta(Direction::Right, 64));
            assert!(next.fits(&base, 4));
            t = next;
        }
        assert_eq!(t, ShiftedTarget { dx: 32, dy: 0 });
        // Content now spans x 40..=47; the margin allows x1 up to 59.
        assert!(t.moved((12, 0)).fits(&base, 4));
        assert!(!t.moved((13, 0)).fits(&base, 4));
    }

    #[test]
    fn premultiply_zeroes_transparent_pixels() {
        let px = [200u8, 100, 50, 0].repeat(4);
        let img = RgbaImage::from_rgba8(2, 2, &px).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bundled_emoji_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/emoji");
        let ds = load_emoji_dataset(&dir).unwrap();
        assert_eq!(ds.n_goals(), 10);
        for im in &ds.images {
            assert_eq!((im.height(), im.width()), (64, 64));
            assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let n = im.plane_len();
            for i in 0..n {
                for c in 0..3 {
                    assert!(im.data()[c * n + i] <= im.data()[3 * n + i] + 1e-6);
                }
            }
        }
        assert_eq!(short_name(&ds.names[3]), "lizard");
    }

    #[test]
    fn missing_alpha_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        image::RgbImage::new(4, 4).save(&path).unwrap();
        let err = load_emoji_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("rgb.png"), "{err}");
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn small_images_are_padded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dot.png");
        let mut im = image::RgbaImage::new(3, 3);
        im.put_pixel(1, 1, image::Rgba([255, 0, 0, 255]));
        im.save(&path).unwrap();
        let ds = load_emoji_dataset(dir.path()).unwrap();
        let img = &ds.images[0];
        assert_eq!(img.get(0, 32, 32), 1.0);
        assert_eq!(img.get(3, 32, 32), 1.0);
        assert_eq!(img.alpha().iter().sum::<f32>(), 1.0);
    }

    proptest! {
        #[test]
        fn shifts_compose_in_bounds(a in -5i32..=5, b in -5i32..=5, c in -5i32..=5, d in -5i32..=5) {
            let img = blob(40, 40, 15, 15, 10);
            let two = shift_image(&shift_image(&img, a, b).unwrap(), c, d).unwrap();
            prop_assert_eq!(two, shift_image(&img, a + c, b + d).unwrap());
        }

        #[test]
        fn rgba8_round_trip_within_one(pixels in prop::collection::vec(any::<u8>(), 4 * 6 * 5)) {
            let img = RgbaImage::from_rgba8(6, 5, &pixels).unwrap();
            let back = img.to_rgba8();
            for (px, qx) in pixels.chunks_exact(4).zip(back.chunks_exact(4)) {
                prop_assert_eq!(px[3], qx[3]);
                if px[3] > 0 {
                    for c in 0..3 {
                        prop_assert!((px[c] as i32 - qx[c] as i32).abs() <= 1);
                    }
                }
            }
        }
    }
}
