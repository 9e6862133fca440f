//! WebSocket steering service. One simulation thread owns the grid;
//! connections talk to it through a command channel and read the latest
//! frame from a watch channel.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode, Uri};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::{oneshot, watch};

use goalnca::steer::{handle_message, parse_client_message, ClientMessage, ServerMessage, SessionState};
use goalnca::store::{load_checkpoint, Checkpoint};
use goalnca::TaskKind;

use crate::ServeArgs;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub grid: usize,
    pub sim_rate: f64,
    pub frame_rate: f64,
    pub seed: u64,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            grid: 192,
            sim_rate: 60.0,
            frame_rate: 15.0,
            seed: 0,
            static_dir: None,
        }
    }
}

struct Command {
    msg: ClientMessage,
    reply: oneshot::Sender<ServerMessage>,
}

/// Latest published frame; `seq` increases with every publication.
#[derive(Clone, Debug, Default)]
struct Frame {
    seq: u64,
    json: Arc<str>,
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Command>,
    frames: watch::Receiver<Frame>,
    step: Arc<AtomicU64>,
    static_dir: Option<PathBuf>,
}

pub struct Server {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    http: tokio::task::JoinHandle<()>,
    sim: Option<thread::JoinHandle<()>>,
}

impl Server {
    /// Serve until the HTTP task ends.
    pub async fn wait(mut self) -> Result<()> {
        let http = std::mem::replace(&mut self.http, tokio::spawn(async {}));
        http.await.context("server task failed")
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.http.abort();
        if let Some(sim) = self.sim.take() {
            let _ = sim.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_now();
    }
}

pub fn run(a: ServeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt).with_context(|| format!("cannot load checkpoint {}", a.ckpt.display()))?;
    let cfg = ServeConfig {
        grid: a.grid,
        sim_rate: a.sim_rate,
        frame_rate: a.frame_rate,
        seed: a.seed,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let server = start(ck, &a.addr, cfg).await?;
        println!("listening on http://{}", server.addr);
        server.wait().await
    })
}

pub async fn start(ck: Checkpoint, addr: &str, cfg: ServeConfig) -> Result<Server> {
    if ck.task != TaskKind::Locomotion {
        bail!("serve needs a locomotion checkpoint, got a {} model", ck.task.name());
    }
    if !(cfg.sim_rate > 0.0 && cfg.frame_rate > 0.0) {
        bail!("sim_rate and frame_rate must be positive");
    }
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))?;
    let local = listener.local_addr()?;

    let session = SessionState::new(cfg.grid, ck.encoder.n_hidden(), cfg.sim_rate)?;
    let pvecs = SessionState::encode_directions(&ck.encoder)?;
    let (cmd_tx, cmd_rx) = mpsc::channel();
    let (frame_tx, frame_rx) = watch::channel(Frame::default());
    let stop = Arc::new(AtomicBool::new(false));
    let step = Arc::new(AtomicU64::new(0));

    let sim = {
        let stop = stop.clone();
        let step = step.clone();
        let frame_rate = cfg.frame_rate;
        let seed = cfg.seed;
        thread::Builder::new()
            .name("simulation".into())
            .spawn(move || simulate(session, ck, pvecs, cmd_rx, frame_tx, step, stop, frame_rate, seed))?
    };

    let state = AppState {
        commands: cmd_tx,
        frames: frame_rx,
        step,
        static_dir: cfg.static_dir,
    };
    let app = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/health", get(health))
        .route("/", get(index))
        .fallback(get(static_file))
        .with_state(state);
    let http = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            eprintln!("error: server stopped: {e}");
        }
    });
    Ok(Server {
        addr: local,
        stop,
        http,
        sim: Some(sim),
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    mut session: SessionState,
    ck: Checkpoint,
    pvecs: Vec<Vec<f32>>,
    commands: mpsc::Receiver<Command>,
    frames: watch::Sender<Frame>,
    step: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    frame_rate: f64,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step_dt = Duration::from_secs_f64(1.0 / session.steps_per_second);
    let frame_dt = Duration::from_secs_f64(1.0 / frame_rate);
    let mut next_step = Instant::now();
    let mut next_frame = Instant::now();
    let mut seq = 0u64;
    let mut published_step = None;
    let mut publish = |session: &SessionState, force: bool| {
        if !force && published_step == Some(session.step) {
            return;
        }
        seq += 1;
        published_step = Some(session.step);
        let json: Arc<str> = session.frame_message().to_json().into();
        frames.send_replace(Frame { seq, json });
    };
    publish(&session, true);

    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        if now >= next_step {
            if let Err(e) = session.advance(&ck.params, &pvecs, &mut rng) {
                eprintln!("error: simulation step failed: {e}");
                return;
            }
            step.store(session.step, Ordering::Relaxed);
            next_step += step_dt;
            if next_step + Duration::from_secs(1) < now {
                // Fell far behind; do not try to catch up.
                next_step = now;
            }
        }
        if now >= next_frame {
            publish(&session, false);
            next_frame += frame_dt;
            if next_frame < now {
                next_frame = now + frame_dt;
            }
        }
        let wait = next_step.min(next_frame).saturating_duration_since(Instant::now());
        match commands.recv_timeout(wait.min(Duration::from_millis(50))) {
            Ok(cmd) => {
                let reset = matches!(cmd.msg, ClientMessage::Reset);
                let reply = handle_message(&mut session, &cmd.msg);
                step.store(session.step, Ordering::Relaxed);
                if reset {
                    publish(&session, true);
                }
                let _ = cmd.reply.send(reply);
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        }
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok", "step": state.step.load(Ordering::Relaxed)}))
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(mut socket: WebSocket, state: AppState) {
    let mut frames = state.frames.clone();
    let mut last_seq = 0;
    loop {
        let latest = frames.borrow_and_update().clone();
        if latest.seq > last_seq {
            last_seq = latest.seq;
            if socket.send(Message::Text(latest.json.as_ref().into())).await.is_err() {
                return;
            }
        }
        tokio::select! {
            changed = frames.changed() => {
                if changed.is_err() {
                    return;
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let err = ServerMessage::error("binary messages are not supported").to_json();
                        if socket.send(Message::Text(err.into())).await.is_err() {
                            return;
                        }
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match parse_client_message(text.as_str()) {
                    Ok(msg) => {
                        let (tx, rx) = oneshot::channel();
                        if state.commands.send(Command { msg, reply: tx }).is_err() {
                            return;
                        }
                        match rx.await {
                            Ok(r) => r,
                            Err(_) => return,
                        }
                    }
                    Err(err) => err,
                };
                if socket.send(Message::Text(reply.to_json().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}

async fn index(State(state): State<AppState>) -> Response {
    if let Some(dir) = &state.static_dir {
        return serve_path(dir, Path::new("index.html")).await;
    }
    Html(INDEX_HTML).into_response()
}

async fn static_file(State(state): State<AppState>, uri: Uri) -> Response {
    let Some(dir) = &state.static_dir else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let rel = Path::new(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    serve_path(dir, rel).await
}

async fn serve_path(dir: &Path, rel: &Path) -> Response {
    match std::fs::read(dir.join(rel)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

const INDEX_HTML: &str = r#"<!doctype html>
<html>
<head><meta charset="utf-8"><title>goalnca</title>
<style>body{background:#111;color:#ddd;font-family:sans-serif}canvas{image-rendering:pixelated;width:576px;height:576px;background:#fff}</style>
</head>
<body>
<canvas id="c"></canvas>
<p>Arrow keys steer, space stays, r resets, p pauses. <span id="s"></span></p>
<script>
const c = document.getElementById("c"), ctx = c.getContext("2d"), s = document.getElementById("s");
const ws = new WebSocket(`ws://${location.host}/ws`);
const keys = {ArrowUp: "up", ArrowDown: "down", ArrowLeft: "left", ArrowRight: "right", " ": "stay"};
let running = true;
ws.onmessage = (ev) => {
  const m = JSON.parse(ev.data);
  if (m.type === "frame") {
    const bytes = Uint8ClampedArray.from(atob(m.rgba), (ch) => ch.charCodeAt(0));
    c.width = m.width; c.height = m.height;
    ctx.putImageData(new ImageData(bytes, m.width, m.height), 0, 0);
  } else if (m.type === "state") {
    running = m.running;
    s.textContent = `goal ${m.goal}, fire rate ${m.fire_rate}`;
  } else if (m.type === "error") {
    s.textContent = m.message;
  }
};
document.addEventListener("keydown", (e) => {
  if (keys[e.key]) ws.send(JSON.stringify({type: "set_goal", goal: keys[e.key]}));
  else if (e.key === "r") ws.send(JSON.stringify({type: "reset"}));
  else if (e.key === "p") ws.send(JSON.stringify({type: running ? "pause" : "resume"}));
});
</script>
</body>
</html>
"#;
