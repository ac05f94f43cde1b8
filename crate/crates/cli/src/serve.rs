//! Live session over a JSON-lines TCP socket.
//!
//! Outbound messages are `hello`, `telemetry`, `event` and `error`; inbound
//! messages are `{"type": "command", <name>: <value>}` with exactly one
//! command field. Commands are applied between simulation steps.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use stint_core::controller::{PlanningContext, Variant};
use stint_core::harness::{Disturbance, DriverMode, Session, TelemetryRow, FCY_SPEED};

use crate::config::Resolved;
use crate::CliResult;

/// Wall-clock interval between telemetry frames.
pub const FRAME_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Drafting,
    Fcy,
    Degradation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriverOverride {
    /// External driver with the given throttle state.
    Throttle(bool),
    /// External driver lifting in response to the coast light.
    CoastAck,
    /// Hand control back to the automated driver.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    SetVariant(Variant),
    Trigger(Trigger),
    SetMap(usize),
    DriverOverride(DriverOverride),
    Pause(bool),
    Reset,
}

/// Parses one inbound line.
pub fn parse_command(line: &str) -> Result<Command, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let Value::Object(mut map) = value else {
        return Err("message must be a JSON object".into());
    };
    match map.remove("type") {
        Some(Value::String(t)) if t == "command" => {}
        Some(other) => return Err(format!("unsupported message type {other}")),
        None => return Err("missing `type` field".into()),
    }
    if map.len() != 1 {
        return Err(format!("expected exactly one command field, got {}", map.len()));
    }
    let (name, arg) = map.into_iter().next().unwrap();
    let bad = |what: &str| format!("{name}: {what}, got {arg}");
    match name.as_str() {
        "set_variant" => {
            let s = arg.as_str().ok_or_else(|| bad("expected a variant name"))?;
            s.parse().map(Command::SetVariant).map_err(|e| format!("set_variant: {e}"))
        }
        "trigger" => serde_json::from_value(arg.clone())
            .map(Command::Trigger)
            .map_err(|_| bad("expected drafting, fcy or degradation")),
        "set_map" => arg.as_u64().map(|id| Command::SetMap(id as usize)).ok_or_else(|| bad("expected a map id")),
        "driver_override" => parse_override(&arg).map(Command::DriverOverride).ok_or_else(|| {
            bad("expected {\"throttle\": 0|1}, \"coast_ack\" or \"auto\"")
        }),
        "pause" => arg.as_bool().map(Command::Pause).ok_or_else(|| bad("expected true or false")),
        "reset" => match arg {
            Value::Bool(true) | Value::Null => Ok(Command::Reset),
            _ => Err(bad("expected true")),
        },
        other => Err(format!("unknown command `{other}`")),
    }
}

fn parse_override(arg: &Value) -> Option<DriverOverride> {
    match arg {
        Value::String(s) if s == "coast_ack" => Some(DriverOverride::CoastAck),
        Value::String(s) if s == "auto" => Some(DriverOverride::Auto),
        Value::Object(m) if m.len() == 1 => match m.get("throttle")? {
            Value::Bool(b) => Some(DriverOverride::Throttle(*b)),
            Value::Number(n) => match n.as_u64()? {
                0 => Some(DriverOverride::Throttle(false)),
                1 => Some(DriverOverride::Throttle(true)),
                _ => None,
            },
            _ => None,
        },
        _ => None,
    }
}

pub fn telemetry_message(row: &TelemetryRow, session: &Session) -> Value {
    let s_lap = session.ctx().track.s_lap;
    let cfg = &session.controller.config;
    json!({
        "type": "telemetry",
        "s": row.s,
        "t": row.t,
        "lap": row.lap,
        "v": row.v,
        "e_kin": row.e_kin,
        "e_b": row.e_b,
        "theta_m": row.theta_m,
        "theta_b": row.theta_b,
        "u_th": row.u_th,
        "coast": row.coast_signal,
        "coast_applied": row.coast_applied,
        "driver_coast": row.driver_coast,
        "grip_limited": row.grip_limited,
        "lambda_kin": row.lambda_kin,
        "lambda_star_adj": row.lambda_star_adj,
        "v_cap": row.v_cap,
        "scenario": session.scenario.active_labels(row.s, s_lap),
        "variant": cfg.variant,
        "map": cfg.active_map,
        "driver_mode": session.driver.mode,
    })
}

fn error_message(message: &str) -> String {
    json!({ "type": "error", "message": message }).to_string()
}

/// State of one connected client's session.
struct Live {
    resolved: Arc<Resolved>,
    ctx: Arc<PlanningContext>,
    session: Session,
    paused: bool,
    timescale: f64,
    /// Wall instant matching simulated time `anchor_t`.
    anchor: Instant,
    anchor_t: f64,
    events_sent: usize,
    last_row: Option<TelemetryRow>,
    last_sent_s: f64,
    finished_sent: bool,
}

impl Live {
    fn new(resolved: Arc<Resolved>, ctx: Arc<PlanningContext>, timescale: f64) -> CliResult<Self> {
        let session = new_session(&resolved, ctx.clone())?;
        let anchor_t = session.state().t;
        Ok(Self {
            resolved,
            ctx,
            session,
            paused: false,
            timescale,
            anchor: Instant::now(),
            anchor_t,
            events_sent: 0,
            last_row: None,
            last_sent_s: f64::NEG_INFINITY,
            finished_sent: false,
        })
    }

    fn apply(&mut self, cmd: Command) -> Result<Vec<String>, String> {
        let st = *self.session.state();
        let mut notes = Vec::new();
        match cmd {
            Command::SetVariant(v) => self.session.set_variant(v),
            Command::SetMap(id) => self.session.set_map(id).map_err(|e| e.to_string())?,
            Command::Trigger(t) => {
                let b = self.ctx.boundary;
                let d = match t {
                    Trigger::Fcy => Disturbance::FullCourseYellow {
                        lap: self.ctx.track.lap_index(st.s) + 2,
                        v_cap: FCY_SPEED,
                    },
                    Trigger::Drafting => Disturbance::Drafting { aero_scale: 0.9, s_start: st.s, s_end: b.s_stint },
                    Trigger::Degradation => Disturbance::TireDegradation {
                        mu_start: 1.0,
                        mu_end: 0.9,
                        s_start: st.s,
                        s_end: b.s_stint,
                    },
                };
                self.session.add_disturbance(d).map_err(|e| e.to_string())?;
            }
            Command::DriverOverride(o) => {
                let driver = &mut self.session.driver;
                match o {
                    DriverOverride::Throttle(on) => {
                        driver.mode = DriverMode::External;
                        self.session.external_throttle = on;
                    }
                    DriverOverride::CoastAck => {
                        driver.mode = DriverMode::External;
                        self.session.external_throttle = false;
                    }
                    DriverOverride::Auto => driver.mode = DriverMode::Automated,
                }
                notes.push(event_line("driver", st.s, st.t, &format!("driver override {o:?}")));
            }
            Command::Pause(p) => {
                if p != self.paused {
                    self.paused = p;
                    self.reanchor();
                    let kind = if p { "paused" } else { "resumed" };
                    notes.push(event_line(kind, st.s, st.t, kind));
                }
            }
            Command::Reset => {
                self.session = new_session(&self.resolved, self.ctx.clone()).map_err(|e| e.to_string())?;
                self.events_sent = 0;
                self.last_row = None;
                self.last_sent_s = f64::NEG_INFINITY;
                self.finished_sent = false;
                self.reanchor();
                let st = *self.session.state();
                notes.push(event_line("reset", st.s, st.t, "session restarted"));
            }
        }
        Ok(notes)
    }

    fn reanchor(&mut self) {
        self.anchor = Instant::now();
        self.anchor_t = self.session.state().t;
    }

    /// Steps the simulation up to the wall-clock target.
    fn advance(&mut self) -> Result<(), String> {
        if self.paused || self.session.finished() {
            return Ok(());
        }
        let target = self.anchor_t + self.anchor.elapsed().as_secs_f64() * self.timescale;
        let started = Instant::now();
        while self.session.state().t < target && started.elapsed() < FRAME_INTERVAL {
            match self.session.step() {
                Ok(Some(row)) => self.last_row = Some(row),
                Ok(None) => break,
                Err(e) => return Err(e.to_string()),
            }
        }
        Ok(())
    }

    /// New events and, when the car moved, one telemetry frame.
    fn outbound(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.session.events()[self.events_sent..] {
            out.push(event_line(&e.kind, e.s, e.t, &e.message));
        }
        self.events_sent = self.session.events().len();
        if !self.paused {
            if let Some(row) = self.last_row {
                if row.s > self.last_sent_s {
                    self.last_sent_s = row.s;
                    out.push(telemetry_message(&row, &self.session).to_string());
                }
            }
        }
        if self.session.finished() && !self.finished_sent {
            self.finished_sent = true;
            let m = self.session.log().metrics;
            out.push(json!({ "type": "event", "kind": "summary", "metrics": m }).to_string());
        }
        out
    }
}

fn event_line(kind: &str, s: f64, t: f64, message: &str) -> String {
    json!({ "type": "event", "kind": kind, "s": s, "t": t, "message": message }).to_string()
}

fn new_session(r: &Resolved, ctx: Arc<PlanningContext>) -> CliResult<Session> {
    let mut session = Session::new(r.config.controller, r.scenario()?, ctx, r.config.driver, r.config.seed)?;
    session.background_planning = true;
    Ok(session)
}

enum Inbound {
    Command(Command),
    Malformed(String),
    Closed,
}

fn spawn_reader(stream: TcpStream, tx: Sender<Inbound>) {
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let msg = match parse_command(&line) {
                Ok(c) => Inbound::Command(c),
                Err(e) => Inbound::Malformed(e),
            };
            if tx.send(msg).is_err() {
                return;
            }
        }
        let _ = tx.send(Inbound::Closed);
    });
}

fn spawn_writer(mut stream: TcpStream, rx: Receiver<String>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        for line in rx {
            if stream.write_all(line.as_bytes()).and_then(|_| stream.write_all(b"\n")).and_then(|_| stream.flush()).is_err() {
                break;
            }
        }
    })
}

/// Serves one client until it disconnects.
fn serve_client(stream: TcpStream, resolved: Arc<Resolved>, ctx: Arc<PlanningContext>, timescale: f64) -> CliResult<()> {
    stream.set_nodelay(true)?;
    let (in_tx, in_rx) = mpsc::channel();
    let (out_tx, out_rx) = mpsc::channel::<String>();
    spawn_reader(stream.try_clone()?, in_tx);
    let writer = spawn_writer(stream, out_rx);
    let mut live = Live::new(resolved.clone(), ctx.clone(), timescale)?;
    let hello = json!({
        "type": "hello",
        "config_hash": resolved.hash,
        "seed": resolved.config.seed,
        "variant": resolved.config.controller.variant,
        "scenario": resolved.config.scenario,
        "s_stint": ctx.boundary.s_stint,
        "s_lap": ctx.track.s_lap,
        "timescale": timescale,
        "maps": ctx.plan.maps,
    });
    let send = |line: String| out_tx.send(line).is_ok();
    if !send(hello.to_string()) {
        return Ok(());
    }
    'session: loop {
        let frame_start = Instant::now();
        loop {
            match in_rx.try_recv() {
                Ok(Inbound::Command(cmd)) => match live.apply(cmd) {
                    Ok(notes) => {
                        for n in notes {
                            send(n);
                        }
                    }
                    Err(e) => {
                        send(error_message(&e));
                    }
                },
                Ok(Inbound::Malformed(e)) => {
                    send(error_message(&e));
                }
                Ok(Inbound::Closed) | Err(TryRecvError::Disconnected) => break 'session,
                Err(TryRecvError::Empty) => break,
            }
        }
        if let Err(e) = live.advance() {
            send(error_message(&format!("simulation failed: {e}")));
            live.paused = true;
        }
        for line in live.outbound() {
            if !send(line) {
                break 'session;
            }
        }
        if let Some(rest) = FRAME_INTERVAL.checked_sub(frame_start.elapsed()) {
            thread::sleep(rest);
        }
    }
    drop(out_tx);
    let _ = writer.join();
    Ok(())
}

/// Accepts clients one after another, each with a fresh session.
pub fn serve(listener: TcpListener, resolved: Resolved, ctx: PlanningContext, timescale: f64) -> CliResult<()> {
    let ctx = Arc::new(ctx);
    let resolved = Arc::new(resolved);
    for stream in listener.incoming() {
        let stream = stream?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        log::info!("client {peer} connected");
        if let Err(e) = serve_client(stream, resolved.clone(), ctx.clone(), timescale) {
            log::warn!("client {peer}: {e}");
        }
        log::info!("client {peer} disconnected");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        let cases = [
            (r#"{"type":"command","set_variant":"fixed_costate"}"#, Command::SetVariant(Variant::FixedCostate)),
            (r#"{"type":"command","trigger":"fcy"}"#, Command::Trigger(Trigger::Fcy)),
            (r#"{"type":"command","set_map":2}"#, Command::SetMap(2)),
            (
                r#"{"type":"command","driver_override":{"throttle":0}}"#,
                Command::DriverOverride(DriverOverride::Throttle(false)),
            ),
            (r#"{"type":"command","driver_override":"coast_ack"}"#, Command::DriverOverride(DriverOverride::CoastAck)),
            (r#"{"type":"command","pause":true}"#, Command::Pause(true)),
            (r#"{"type":"command","reset":true}"#, Command::Reset),
        ];
        for (line, want) in cases {
            assert_eq!(parse_command(line), Ok(want), "{line}");
        }
    }

    #[test]
    fn rejects_malformed_messages() {
        for line in [
            "not json",
            "[1,2]",
            r#"{"set_map":1}"#,
            r#"{"type":"telemetry","set_map":1}"#,
            r#"{"type":"command"}"#,
            r#"{"type":"command","set_map":1,"pause":true}"#,
            r#"{"type":"command","trigger":"rain"}"#,
            r#"{"type":"command","set_variant":"fastest"}"#,
            r#"{"type":"command","driver_override":{"throttle":5}}"#,
            r#"{"type":"command","warp":9}"#,
        ] {
            assert!(parse_command(line).is_err(), "{line}");
        }
    }
}
