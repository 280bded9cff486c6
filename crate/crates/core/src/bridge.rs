//! Wire protocol for external policies.
//!
//! An external process (typically a learned model) connects over standard
//! streams or a unix socket and drives every robot in lockstep: the server
//! sends one observation message per robot, the client answers one action
//! per robot, the server advances the world and reports the step reward.
//! Messages are newline-delimited JSON; observation tensors travel as
//! base64-encoded little-endian 32-bit floats so any language can consume
//! them without a schema compiler.
//!
//! Message order per episode: `reset`, then for each step `observe` ×N
//! followed by `act` ×N (ascending robot id) and one `reward`, then `done`.
//! An out-of-mask action invalidates the episode (error + done, session
//! continues); an unparseable message or a silent client aborts the whole
//! session.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EnvConfig;
use crate::grid::Position;
use crate::observe::Observation;
use crate::runner::{derive_seed, Episode, StepRecord};
use crate::world::WorldError;

/// Protocol revision announced in every `reset`.
pub const PROTO_VERSION: u32 = 1;

/// Everything that crosses the wire, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BridgeMessage {
    Reset {
        proto: u32,
        episode: u32,
        seed: u64,
        n_robots: u16,
        l_max: u8,
        /// Side length of the square observation window.
        window: u16,
        horizon: u32,
    },
    Observe {
        episode: u32,
        t: u32,
        robot: u16,
        /// base64 of little-endian f32s: all channel planes, then the mask.
        payload: String,
    },
    Act {
        episode: u32,
        t: u32,
        robot: u16,
        /// Flat row-major index into the observation window.
        cell: u32,
    },
    Reward {
        episode: u32,
        t: u32,
        value: u32,
    },
    Done {
        episode: u32,
        reward: u64,
        valid: bool,
    },
    Error {
        episode: u32,
        code: ErrorCode,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    IllegalAction,
    Timeout,
    Malformed,
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("client unresponsive past the deadline")]
    Timeout,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("connection closed mid-session")]
    Closed,
    #[error("environment: {0}")]
    World(#[from] WorldError),
}

/// A line-oriented duplex channel with a receive deadline.
pub trait Transport {
    fn send_line(&mut self, line: &str) -> io::Result<()>;
    fn recv_line(&mut self) -> Result<String, BridgeError>;
}

/// [`Transport`] over any reader/writer pair. A background thread pumps
/// incoming lines into a channel so receives can time out; it exits when
/// the peer closes or the transport is dropped.
pub struct LineTransport<W: Write> {
    rx: mpsc::Receiver<io::Result<String>>,
    writer: W,
    timeout: Duration,
}

impl<W: Write> LineTransport<W> {
    pub fn new<R: Read + Send + 'static>(reader: R, writer: W, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let failed = line.is_err();
                if tx.send(line).is_err() || failed {
                    break;
                }
            }
        });
        LineTransport {
            rx,
            writer,
            timeout,
        }
    }
}

impl LineTransport<io::Stdout> {
    /// Transport over this process's standard streams.
    pub fn stdio(timeout: Duration) -> Self {
        LineTransport::new(io::stdin(), io::stdout(), timeout)
    }
}

impl<W: Write> Transport for LineTransport<W> {
    fn send_line(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }

    fn recv_line(&mut self) -> Result<String, BridgeError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(BridgeError::Io(e)),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(BridgeError::Timeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(BridgeError::Closed),
        }
    }
}

/// Serializes an observation for the wire: channels then mask, f32-LE,
/// base64.
pub fn encode_observation(obs: &Observation) -> String {
    let floats = obs.flatten_with_mask();
    let mut bytes = Vec::with_capacity(floats.len() * 4);
    for v in &floats {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(&bytes)
}

/// Inverse of [`encode_observation`] up to the flat float vector.
pub fn decode_payload(payload: &str) -> Result<Vec<f32>, BridgeError> {
    let bytes = BASE64
        .decode(payload)
        .map_err(|e| BridgeError::Malformed(format!("payload base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(BridgeError::Malformed(format!(
            "payload length {} is not a whole number of f32s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Outcome of one episode driven over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedEpisode {
    pub episode: u32,
    pub seed: u64,
    pub reward: u64,
    /// False when the client played an illegal action; such episodes end
    /// at the offending step.
    pub valid: bool,
    pub trace: Option<Vec<StepRecord>>,
}

fn send(transport: &mut impl Transport, msg: &BridgeMessage) -> Result<(), BridgeError> {
    let line = serde_json::to_string(msg).expect("bridge messages serialize");
    transport.send_line(&line)?;
    Ok(())
}

fn recv(transport: &mut impl Transport) -> Result<BridgeMessage, BridgeError> {
    let line = transport.recv_line()?;
    serde_json::from_str(&line).map_err(|e| BridgeError::Malformed(format!("{e} in {line:?}")))
}

/// Runs `episodes` episodes against the connected client. Episode `k` uses
/// seed `derive_seed(config.seed, k)`, matching in-process batch runs.
///
/// Per-episode results are returned in order; `Err` is reserved for
/// session-fatal conditions (timeout, malformed traffic, transport loss) —
/// in those cases a best-effort `error` message is sent first.
pub fn serve(
    transport: &mut impl Transport,
    config: &EnvConfig,
    episodes: u32,
    trace: bool,
) -> Result<Vec<ServedEpisode>, BridgeError> {
    let mut served = Vec::with_capacity(episodes as usize);
    for episode in 0..episodes {
        let seed = derive_seed(config.seed, episode as u64);
        match serve_episode(transport, config, episode, seed, trace) {
            Ok(outcome) => served.push(outcome),
            Err(err) => {
                let code = match &err {
                    BridgeError::Timeout => ErrorCode::Timeout,
                    BridgeError::Malformed(_) => ErrorCode::Malformed,
                    _ => return Err(err),
                };
                // Best effort: the transport may already be gone.
                let _ = send(
                    transport,
                    &BridgeMessage::Error {
                        episode,
                        code,
                        detail: err.to_string(),
                    },
                );
                return Err(err);
            }
        }
    }
    Ok(served)
}

fn serve_episode(
    transport: &mut impl Transport,
    config: &EnvConfig,
    episode: u32,
    seed: u64,
    trace: bool,
) -> Result<ServedEpisode, BridgeError> {
    let mut ep = Episode::new(config, seed)?;
    let n = config.n_robots;
    let side = config.window_side();
    let cells = side as u32 * side as u32;
    send(
        transport,
        &BridgeMessage::Reset {
            proto: PROTO_VERSION,
            episode,
            seed,
            n_robots: n,
            l_max: config.l_max,
            window: side,
            horizon: config.horizon,
        },
    )?;

    let mut records = if trace { Some(Vec::new()) } else { None };
    let mut targets = vec![Position::new(0, 0); n as usize];
    for t in 0..config.horizon {
        ep.render();
        for robot in 0..n {
            send(
                transport,
                &BridgeMessage::Observe {
                    episode,
                    t,
                    robot,
                    payload: encode_observation(&ep.obs[robot as usize]),
                },
            )?;
        }
        for robot in 0..n {
            let cell = expect_act(recv(transport)?, episode, t, robot)?;
            let legal = cell < cells && ep.obs[robot as usize].mask[cell as usize];
            if !legal {
                // Stay in lockstep: the client has already sent the rest
                // of this step's actions, so drain them before replying.
                for later in robot + 1..n {
                    expect_act(recv(transport)?, episode, t, later)?;
                }
                send(
                    transport,
                    &BridgeMessage::Error {
                        episode,
                        code: ErrorCode::IllegalAction,
                        detail: format!("robot {robot} chose cell {cell} at t {t}"),
                    },
                )?;
                let reward = ep.world.cumulative_reward();
                send(
                    transport,
                    &BridgeMessage::Done {
                        episode,
                        reward,
                        valid: false,
                    },
                )?;
                return Ok(ServedEpisode {
                    episode,
                    seed,
                    reward,
                    valid: false,
                    trace: records,
                });
            }
            let obs = &ep.obs[robot as usize];
            targets[robot as usize] = obs
                .window_to_world((cell % side as u32) as u16, (cell / side as u32) as u16)
                .expect("mask-legal cells are on-grid");
        }
        let (moves, outcome) = ep.advance(&targets)?;
        send(
            transport,
            &BridgeMessage::Reward {
                episode,
                t,
                value: outcome.reward,
            },
        )?;
        if let Some(records) = records.as_mut() {
            records.push(StepRecord {
                t,
                targets: targets.clone(),
                moves,
                reward: outcome.reward,
                completed: outcome.completions.iter().map(|task| task.id).collect(),
                spawned: outcome.spawned.iter().map(|task| task.id).collect(),
            });
        }
    }

    let reward = ep.world.cumulative_reward();
    send(
        transport,
        &BridgeMessage::Done {
            episode,
            reward,
            valid: true,
        },
    )?;
    Ok(ServedEpisode {
        episode,
        seed,
        reward,
        valid: true,
        trace: records,
    })
}

fn expect_act(msg: BridgeMessage, episode: u32, t: u32, robot: u16) -> Result<u32, BridgeError> {
    match msg {
        BridgeMessage::Act {
            episode: e,
            t: mt,
            robot: r,
            cell,
        } if e == episode && mt == t && r == robot => Ok(cell),
        other => Err(BridgeError::Malformed(format!(
            "expected act for episode {episode} t {t} robot {robot}, got {other:?}"
        ))),
    }
}

/// Binds a unix socket, waits for one client, and serves it `episodes`
/// episodes. One session per listener: parallelism comes from processes.
pub fn serve_unix(
    path: &std::path::Path,
    config: &EnvConfig,
    episodes: u32,
    trace: bool,
    timeout: Duration,
) -> Result<Vec<ServedEpisode>, BridgeError> {
    let listener = std::os::unix::net::UnixListener::bind(path)?;
    let (stream, _) = listener.accept()?;
    let reader = stream.try_clone()?;
    let mut transport = LineTransport::new(reader, stream, timeout);
    serve(&mut transport, config, episodes, trace)
}

/// What a scripted client saw during one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEpisode {
    pub episode: u32,
    pub step_rewards: Vec<u32>,
    pub final_reward: u64,
    pub valid: bool,
    pub errors: Vec<ErrorCode>,
}

/// A reference client: answers every observation with its first mask-legal
/// cell, mirroring the in-process first-legal policy. Returns after
/// `expected_episodes` episodes finish (or on server close). `sabotage`
/// marks one (episode, t, robot) slot that instead answers with an
/// out-of-window index, for exercising the illegal-action path.
pub fn run_first_legal_client(
    transport: &mut impl Transport,
    expected_episodes: u32,
    sabotage: Option<(u32, u32, u16)>,
) -> Result<Vec<ClientEpisode>, BridgeError> {
    let mut episodes: Vec<ClientEpisode> = Vec::new();
    let mut current: Option<ClientEpisode> = None;
    let mut n_robots = 0u16;
    let mut cells = 0usize;
    let mut pending: Vec<BridgeMessage> = Vec::new();

    loop {
        let msg = match recv(transport) {
            Ok(msg) => msg,
            // The server closes the connection after the last episode.
            Err(BridgeError::Closed) => return Ok(episodes),
            Err(err) => return Err(err),
        };
        match msg {
            BridgeMessage::Reset {
                proto,
                episode,
                n_robots: n,
                window,
                ..
            } => {
                if proto != PROTO_VERSION {
                    return Err(BridgeError::Malformed(format!(
                        "unsupported protocol version {proto}"
                    )));
                }
                n_robots = n;
                cells = window as usize * window as usize;
                current = Some(ClientEpisode {
                    episode,
                    step_rewards: Vec::new(),
                    final_reward: 0,
                    valid: true,
                    errors: Vec::new(),
                });
            }
            BridgeMessage::Observe {
                episode,
                t,
                robot,
                payload,
            } => {
                let floats = decode_payload(&payload)?;
                let mask = &floats[floats.len() - cells..];
                let cell = if sabotage == Some((episode, t, robot)) {
                    cells as u32
                } else {
                    mask.iter().position(|&m| m > 0.5).unwrap_or(0) as u32
                };
                pending.push(BridgeMessage::Act {
                    episode,
                    t,
                    robot,
                    cell,
                });
                if pending.len() == n_robots as usize {
                    for act in pending.drain(..) {
                        send(transport, &act)?;
                    }
                }
            }
            BridgeMessage::Reward { value, .. } => {
                if let Some(ep) = current.as_mut() {
                    ep.step_rewards.push(value);
                }
            }
            BridgeMessage::Error { code, .. } => {
                if let Some(ep) = current.as_mut() {
                    ep.errors.push(code);
                }
            }
            BridgeMessage::Done { reward, valid, .. } => {
                if let Some(mut ep) = current.take() {
                    ep.final_reward = reward;
                    ep.valid = valid;
                    episodes.push(ep);
                }
                pending.clear();
                if episodes.len() as u32 == expected_episodes {
                    return Ok(episodes);
                }
            }
            BridgeMessage::Act { .. } => {
                return Err(BridgeError::Malformed(
                    "server should never send act".to_string(),
                ));
            }
        }
    }
}
