//! Session state and wire protocol for interactive steering.
//!
//! The simulation loop owns one [`SessionState`]; every client message goes
//! through [`handle_message`] between steps, so a goal change always lands on
//! a step boundary.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::render_frame;
use crate::grid::CellGrid;
use crate::model::{nca_step, GoalEncoder, NcaParams, StepConfig};
use crate::tasks::Direction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetGoal { goal: String },
    SetFireRate { value: f64 },
    SetGoalRate { value: f64 },
    Reset,
    Pause,
    Resume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        step: u64,
        width: usize,
        height: usize,
        rgba: String,
    },
    State {
        goal: Direction,
        fire_rate: f32,
        goal_rate: f32,
        running: bool,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error {
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// Parse one client frame; malformed JSON and unknown types become error replies.
pub fn parse_client_message(text: &str) -> std::result::Result<ClientMessage, ServerMessage> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ServerMessage::error(format!("malformed JSON: {e}")))?;
    let kind = value.get("type").and_then(|t| t.as_str()).map(str::to_owned);
    serde_json::from_value(value).map_err(|e| match kind {
        None => ServerMessage::error("message has no \"type\" field"),
        Some(k) if !KNOWN_TYPES.contains(&k.as_str()) => ServerMessage::error(format!("unknown message type \"{k}\"")),
        Some(k) => ServerMessage::error(format!("invalid \"{k}\" message: {e}")),
    })
}

const KNOWN_TYPES: [&str; 6] = ["set_goal", "set_fire_rate", "set_goal_rate", "reset", "pause", "resume"];

#[derive(Clone, Debug)]
pub struct SessionState {
    pub grid: CellGrid,
    pub goal: Direction,
    pub fire_rate: f32,
    pub goal_rate: f32,
    pub steps_per_second: f64,
    pub running: bool,
    pub step: u64,
}

impl SessionState {
    pub fn new(size: usize, n_hidden: usize, steps_per_second: f64) -> Result<Self> {
        Ok(Self {
            grid: CellGrid::new_seed(size, size, n_hidden)?,
            goal: Direction::Stay,
            fire_rate: 1.0,
            goal_rate: 1.0,
            steps_per_second,
            running: true,
            step: 0,
        })
    }

    pub fn encode_directions(encoder: &GoalEncoder) -> Result<Vec<Vec<f32>>> {
        Direction::ALL.iter().map(|d| encoder.encode(d.goal_id())).collect()
    }

    pub fn state_message(&self) -> ServerMessage {
        ServerMessage::State {
            goal: self.goal,
            fire_rate: self.fire_rate,
            goal_rate: self.goal_rate,
            running: self.running,
        }
    }

    pub fn frame_message(&self) -> ServerMessage {
        ServerMessage::Frame {
            step: self.step,
            width: self.grid.width(),
            height: self.grid.height(),
            rgba: STANDARD.encode(render_frame(&self.grid)),
        }
    }

    /// Advance one step under the active goal when running. `pvecs` holds
    /// the encoding of every direction, indexed by goal id.
    pub fn advance<R: Rng + ?Sized>(&mut self, params: &NcaParams, pvecs: &[Vec<f32>], rng: &mut R) -> Result<()> {
        if !self.running {
            return Ok(());
        }
        let cfg = StepConfig::new(self.fire_rate, self.goal_rate)?;
        self.grid = nca_step(&self.grid, params, &pvecs[self.goal.goal_id()], &cfg, rng, None)?;
        self.step += 1;
        Ok(())
    }
}

/// Apply one client message. Every message is answered with the resulting
/// state, or with an error and the state left untouched.
pub fn handle_message(state: &mut SessionState, msg: &ClientMessage) -> ServerMessage {
    match msg {
        ClientMessage::SetGoal { goal } => match goal.parse::<Direction>() {
            Ok(d) => state.goal = d,
            Err(_) => return ServerMessage::error(format!("unknown goal \"{goal}\"")),
        },
        ClientMessage::SetFireRate { value } => match unit_rate(*value) {
            Some(v) => state.fire_rate = v,
            None => return ServerMessage::error("value out of [0,1]"),
        },
        ClientMessage::SetGoalRate { value } => match unit_rate(*value) {
            Some(v) => state.goal_rate = v,
            None => return ServerMessage::error("value out of [0,1]"),
        },
        ClientMessage::Reset => {
            state.grid = CellGrid::new_seed(state.grid.height(), state.grid.width(), state.grid.n_hidden())
                .expect("existing grid dimensions are valid");
            state.step = 0;
        }
        ClientMessage::Pause => state.running = false,
        ClientMessage::Resume => state.running = true,
    }
    state.state_message()
}

fn unit_rate(v: f64) -> Option<f32> {
    (v.is_finite() && (0.0..=1.0).contains(&v)).then_some(v as f32)
}
