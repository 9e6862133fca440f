//! Checkpoint files and run configuration.
//!
//! A checkpoint is `GNCA`, a version byte, a little-endian `u32` metadata
//! length, `key = value` metadata lines in UTF-8, then every declared blob as
//! little-endian `f32` values in the order the `blobs` line lists them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::RGBA;
use crate::model::{EncoderKind, GoalEncoder, NcaParams};
use crate::tasks::{load_emoji_dataset, short_name, Direction, RgbaImage};
use crate::trainer::{AdamConfig, AdamState, TaskKind, Targets, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"GNCA";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub nca: AdamState,
    pub encoder: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task: TaskKind,
    pub iteration: u64,
    pub seed: u64,
    pub params: NcaParams,
    pub encoder: GoalEncoder,
    pub optimizer: Option<OptimizerState>,
    /// Free-form metadata carried through unchanged (target names, grid size, ...).
    pub extra: BTreeMap<String, String>,
}

const RESERVED: [&str; 10] = [
    "task", "channels", "n_hidden", "n_goals", "encoder", "iteration", "seed", "blobs", "adam", "adam_t",
];

impl Checkpoint {
    pub fn new(task: TaskKind, params: NcaParams, encoder: GoalEncoder) -> Self {
        Self {
            task,
            iteration: 0,
            seed: 0,
            params,
            encoder,
            optimizer: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.params.channels
    }

    /// Refuse to serve a run that asks for a different cell width.
    pub fn check_channels(&self, requested: usize) -> Result<()> {
        if self.params.channels != requested {
            return Err(Error::ChannelMismatch {
                checkpoint: self.params.channels,
                requested,
            });
        }
        Ok(())
    }

    fn blobs(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = NcaParams::array_names()
            .iter()
            .map(|s| s.to_string())
            .zip(self.params.arrays())
            .collect();
        out.extend(
            self.encoder
                .array_names()
                .into_iter()
                .map(String::from)
                .zip(self.encoder.arrays()),
        );
        if let Some(opt) = &self.optimizer {
            for (tag, state) in [("nca", &opt.nca), ("encoder", &opt.encoder)] {
                for (i, m) in state.m.iter().enumerate() {
                    out.push((format!("adam.{tag}.m{i}"), m));
                }
                for (i, v) in state.v.iter().enumerate() {
                    out.push((format!("adam.{tag}.v{i}"), v));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for key in self.extra.keys() {
            if RESERVED.contains(&key.as_str()) || !valid_key(key) {
                return Err(Error::Metadata(format!("metadata key '{key}' is reserved or malformed")));
            }
        }
        for (key, value) in &self.extra {
            if value.contains('\n') {
                return Err(Error::Metadata(format!("metadata value for '{key}' spans lines")));
            }
        }
        let blobs = self.blobs();
        let mut meta = String::new();
        let mut line = |k: &str, v: String| {
            meta.push_str(k);
            meta.push_str(" = ");
            meta.push_str(&v);
            meta.push('\n');
        };
        line("task", self.task.name().into());
        line("channels", self.params.channels.to_string());
        line("n_hidden", self.encoder.n_hidden().to_string());
        line("n_goals", self.encoder.n_goals().to_string());
        line("encoder", self.encoder.kind().name().into());
        line("iteration", self.iteration.to_string());
        line("seed", self.seed.to_string());
        if let Some(opt) = &self.optimizer {
            let c = opt.nca.config;
            line("adam", format!("{} {} {} {}", c.lr, c.beta1, c.beta2, c.eps));
            line("adam_t", format!("{} {}", opt.nca.t, opt.encoder.t));
        }
        for (k, v) in &self.extra {
            line(k, v.clone());
        }
        line(
            "blobs",
            blobs
                .iter()
                .map(|(n, b)| format!("{n}:{}", b.len()))
                .collect::<Vec<_>>()
                .join(","),
        );
        let total: usize = blobs.iter().map(|(_, b)| b.len()).sum();
        let mut out = Vec::with_capacity(9 + meta.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (_, b) in &blobs {
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = *bytes.get(4).ok_or_else(|| Error::Truncated("missing version byte".into()))?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..9)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::Truncated("missing metadata length".into()))?;
        let meta_len = u32::from_le_bytes(len_bytes) as usize;
        let meta = bytes
            .get(9..9 + meta_len)
            .ok_or_else(|| Error::Truncated(format!("metadata declares {meta_len} bytes")))?;
        let meta = std::str::from_utf8(meta).map_err(|e| Error::Metadata(format!("metadata is not UTF-8: {e}")))?;
        let mut fields = parse_key_values(meta).map_err(Error::Metadata)?;

        let mut take = |k: &str| fields.remove(k).ok_or_else(|| Error::Metadata(format!("missing key '{k}'")));
        let task = TaskKind::parse(&take("task")?)?;
        let channels: usize = parse_field("channels", &take("channels")?)?;
        let n_hidden: usize = parse_field("n_hidden", &take("n_hidden")?)?;
        let n_goals: usize = parse_field("n_goals", &take("n_goals")?)?;
        let kind = EncoderKind::parse(&take("encoder")?)?;
        let iteration: u64 = parse_field("iteration", &take("iteration")?)?;
        let seed: u64 = parse_field("seed", &take("seed")?)?;
        let blob_decl = take("blobs")?;
        let adam = fields.remove("adam");
        let adam_t = fields.remove("adam_t");
        if channels != RGBA + n_hidden {
            return Err(Error::ShapeMismatch(format!(
                "channels {channels} does not equal 4 + n_hidden {n_hidden}"
            )));
        }

        let mut ckpt = Checkpoint {
            task,
            iteration,
            seed,
            params: NcaParams::zeros(channels),
            encoder: GoalEncoder::zeros(kind, n_goals, n_hidden),
            optimizer: None,
            extra: fields,
        };
        if let Some(adam) = adam {
            let v: Vec<f32> = adam
                .split_whitespace()
                .map(|s| parse_field("adam", s))
                .collect::<Result<_>>()?;
            let t: Vec<u64> = adam_t
                .ok_or_else(|| Error::Metadata("missing key 'adam_t'".into()))?
                .split_whitespace()
                .map(|s| parse_field("adam_t", s))
                .collect::<Result<_>>()?;
            if v.len() != 4 || t.len() != 2 {
                return Err(Error::Metadata("malformed optimizer metadata".into()));
            }
            let config = AdamConfig {
                lr: v[0],
                beta1: v[1],
                beta2: v[2],
                eps: v[3],
            };
            let mut nca = AdamState::for_arrays(config, &ckpt.params.arrays());
            let mut encoder = AdamState::for_arrays(config, &ckpt.encoder.arrays());
            nca.t = t[0];
            encoder.t = t[1];
            ckpt.optimizer = Some(OptimizerState { nca, encoder });
        }

        let expected: Vec<(String, usize)> = ckpt.blobs().iter().map(|(n, b)| (n.clone(), b.len())).collect();
        let declared: Vec<(String, usize)> = blob_decl
            .split(',')
            .map(|entry| {
                let (name, len) = entry
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Metadata(format!("malformed blob entry '{entry}'")))?;
                Ok((name.to_string(), parse_field("blobs", len)?))
            })
            .collect::<Result<_>>()?;
        if declared != expected {
            let show = |v: &[(String, usize)]| v.iter().map(|(n, l)| format!("{n}:{l}")).collect::<Vec<_>>().join(",");
            return Err(Error::ShapeMismatch(format!(
                "declared blobs [{}] do not match the shapes implied by the metadata [{}]",
                show(&declared),
                show(&expected)
            )));
        }

        let mut body = &bytes[9 + meta_len..];
        let total: usize = expected.iter().map(|(_, l)| l).sum();
        if body.len() < 4 * total {
            return Err(Error::Truncated(format!(
                "expected {} bytes of parameters, found {}",
                4 * total,
                body.len()
            )));
        }
        if body.len() > 4 * total {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after the declared blobs",
                body.len() - 4 * total
            )));
        }
        let mut dests: Vec<&mut [f32]> = ckpt.params.arrays_mut();
        dests.extend(ckpt.encoder.arrays_mut());
        if let Some(opt) = &mut ckpt.optimizer {
            for state in [&mut opt.nca, &mut opt.encoder] {
                dests.extend(state.m.iter_mut().map(|v| v.as_mut_slice()));
                dests.extend(state.v.iter_mut().map(|v| v.as_mut_slice()));
            }
        }
        for dest in dests {
            for v in dest.iter_mut() {
                *v = f32::from_le_bytes(body[..4].try_into().expect("4-byte chunk"));
                body = &body[4..];
            }
        }
        Ok(ckpt)
    }
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Metadata(format!("bad value '{value}' for '{key}': {e}")))
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected 'key = value', got '{line}'", n + 1))?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(format!("line {}: malformed key '{k}'", n + 1));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key '{k}'", n + 1));
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("gnca.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Everything a training run needs beyond the core optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Morphing goal images by short name; empty means the whole dataset.
    pub goals: Vec<String>,
    /// Locomotion creature by short name.
    pub target: String,
    /// Side length of the emoji content before padding onto the grid.
    pub content_size: usize,
}

pub const PRESETS: [&str; 2] = ["morphing", "locomotion"];

/// A named preset or a path to a `key = value` config file.
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "morphing" => Ok(morphing_preset()),
        "locomotion" => Ok(locomotion_preset()),
        other => {
            let path = Path::new(other);
            if path.is_file() {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::from_text(&text)
            } else {
                Err(Error::UnknownPreset {
                    name: other.to_string(),
                    valid: PRESETS.join(", "),
                })
            }
        }
    }
}

fn morphing_preset() -> RunConfig {
    RunConfig {
        train: TrainConfig {
            task: TaskKind::Morphing,
            batch_size: 8,
            pool_size: 1024,
            min_steps: 48,
            max_steps: 96,
            segments: 2,
            fire_rate: 0.5,
            goal_rate: 1.0,
            n_hidden: 16,
            n_seed_replacements: 2,
            total_iterations: 100_000,
            seed: 0,
            grid_size: 64,
            learning_rate: 1e-3,
            margin: 4,
            threads: 1,
        },
        data_dir: PathBuf::from("assets/emoji"),
        out_dir: None,
        log_every: 10,
        checkpoint_every: 500,
        goals: Vec::new(),
        target: "lizard".into(),
        content_size: 40,
    }
}

fn locomotion_preset() -> RunConfig {
    let mut c = morphing_preset();
    c.train.task = TaskKind::Locomotion;
    c.train.batch_size = 24;
    c.train.pool_size = 256;
    c.train.segments = 4;
    c.train.fire_rate = 1.0;
    c.train.n_hidden = 32;
    c.content_size = 24;
    c
}

impl RunConfig {
    /// Start from the preset named by `preset` (default: the task's preset) and override keys.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = parse_key_values(text).map_err(Error::Config)?;
        let base = match (kv.remove("preset"), kv.get("task")) {
            (Some(p), _) => preset(&p)?,
            (None, Some(t)) => preset(TaskKind::parse(t)?.name())?,
            (None, None) => return Err(Error::Config("config needs 'preset' or 'task'".into())),
        };
        let mut cfg = base;
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Override one field by its exact name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad value '{value}' for '{key}': {e}")))
        }
        let t = &mut self.train;
        match key {
            "task" => t.task = TaskKind::parse(value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "pool_size" => t.pool_size = p(key, value)?,
            "min_steps" => t.min_steps = p(key, value)?,
            "max_steps" => t.max_steps = p(key, value)?,
            "segments" => t.segments = p(key, value)?,
            "fire_rate" => t.fire_rate = p(key, value)?,
            "goal_rate" => t.goal_rate = p(key, value)?,
            "n_hidden" => t.n_hidden = p(key, value)?,
            "n_seed_replacements" => t.n_seed_replacements = p(key, value)?,
            "total_iterations" => t.total_iterations = p(key, value)?,
            "seed" => t.seed = p(key, value)?,
            "grid_size" => t.grid_size = p(key, value)?,
            "learning_rate" => t.learning_rate = p(key, value)?,
            "margin" => t.margin = p(key, value)?,
            "threads" => t.threads = p(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "log_every" => self.log_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "goals" => {
                self.goals = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "target" => self.target = value.trim().to_string(),
            "content_size" => self.content_size = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut lines = vec![
            format!("task = {}", t.task.name()),
            format!("batch_size = {}", t.batch_size),
            format!("pool_size = {}", t.pool_size),
            format!("min_steps = {}", t.min_steps),
            format!("max_steps = {}", t.max_steps),
            format!("segments = {}", t.segments),
            format!("fire_rate = {}", t.fire_rate),
            format!("goal_rate = {}", t.goal_rate),
            format!("n_hidden = {}", t.n_hidden),
            format!("n_seed_replacements = {}", t.n_seed_replacements),
            format!("total_iterations = {}", t.total_iterations),
            format!("seed = {}", t.seed),
            format!("grid_size = {}", t.grid_size),
            format!("learning_rate = {}", t.learning_rate),
            format!("margin = {}", t.margin),
            format!("threads = {}", t.threads),
            format!("data_dir = {}", self.data_dir.display()),
        ];
        if let Some(o) = &self.out_dir {
            lines.push(format!("out_dir = {}", o.display()));
        }
        lines.push(format!("log_every = {}", self.log_every));
        lines.push(format!("checkpoint_every = {}", self.checkpoint_every));
        lines.push(format!("goals = {}", self.goals.join(",")));
        lines.push(format!("target = {}", self.target));
        lines.push(format!("content_size = {}", self.content_size));
        lines.join("\n") + "\n"
    }
}

impl RunConfig {
    /// Goal images sized for the grid, with their short names in goal-id order.
    pub fn load_targets(&self) -> Result<(Targets, Vec<String>)> {
        let data = load_emoji_dataset(&self.data_dir)?;
        let grid = self.train.grid_size;
        match self.train.task {
            TaskKind::Morphing => {
                let data = if self.goals.is_empty() { data } else { data.select(&self.goals)? };
                let data = data.rescaled(self.content_size, grid);
                let names = data.names.iter().map(|n| short_name(n).to_string()).collect();
                Ok((Targets::Morphing(data.images), names))
            }
            TaskKind::Locomotion => {
                let data = data.select(std::slice::from_ref(&self.target))?.rescaled(self.content_size, grid);
                let names = Direction::ALL.iter().map(|d| d.name().to_string()).collect();
                Ok((Targets::Locomotion(data.images[0].clone()), names))
            }
        }
    }
}

/// Snapshot of a trainer, with enough run metadata to rebuild its targets.
pub fn trainer_checkpoint(trainer: &Trainer, run: &RunConfig, goal_names: &[String]) -> Checkpoint {
    let cfg = &trainer.cfg;
    let mut ck = Checkpoint::new(cfg.task, trainer.params.clone(), trainer.encoder.clone());
    ck.iteration = trainer.iteration() as u64;
    ck.seed = cfg.seed;
    ck.optimizer = Some(OptimizerState {
        nca: trainer.opt_nca.clone(),
        encoder: trainer.opt_encoder.clone(),
    });
    let extra = [
        ("grid_size", cfg.grid_size.to_string()),
        ("content_size", run.content_size.to_string()),
        ("fire_rate", cfg.fire_rate.to_string()),
        ("goal_rate", cfg.goal_rate.to_string()),
        ("goals", goal_names.join(",")),
        ("target", run.target.clone()),
    ];
    for (k, v) in extra {
        ck.extra.insert(k.to_string(), v);
    }
    ck
}

impl Checkpoint {
    pub fn extra_value<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.extra.get(key).and_then(|v| v.parse().ok())
    }

    /// Goal names recorded at training time, or numbered placeholders.
    pub fn goal_names(&self) -> Vec<String> {
        let n = self.encoder.n_goals();
        match self.extra.get("goals") {
            Some(g) if g.split(',').count() == n => g.split(',').map(String::from).collect(),
            _ => (0..n).map(|i| format!("goal{i}")).collect(),
        }
    }

    /// Resolve a goal given by name or numeric id.
    pub fn goal_id(&self, goal: &str) -> Result<usize> {
        let names = self.goal_names();
        if let Some(i) = names.iter().position(|n| n == goal) {
            return Ok(i);
        }
        match goal.parse::<usize>() {
            Ok(i) if i < names.len() => Ok(i),
            _ => Err(Error::InvalidValue(format!(
                "unknown goal '{goal}'; this checkpoint knows {}",
                names.join(", ")
            ))),
        }
    }

    /// The training targets re-rendered on a `grid`-sized canvas.
    pub fn targets_on(&self, data_dir: &Path, grid: usize) -> Result<Vec<RgbaImage>> {
        let content = self
            .extra_value::<usize>("content_size")
            .ok_or_else(|| Error::Metadata("checkpoint does not record content_size".into()))?;
        let data = load_emoji_dataset(data_dir)?;
        let names = match self.task {
            TaskKind::Morphing => self.goal_names(),
            TaskKind::Locomotion => vec![self
                .extra
                .get("target")
                .cloned()
                .ok_or_else(|| Error::Metadata("checkpoint does not record its target".into()))?],
        };
        Ok(data.select(&names)?.rescaled(content, grid).images)
    }
}
