//! Reference child for the external policy line protocol.
//!
//! Usage: `v2g-policy-child [threshold|idle|silent|garbage]`
//!
//! * `threshold`: charge 7 kW below 30% SoC, discharge 7 kW when the sell
//!   price is at least 0.35, otherwise idle.
//! * `idle`: always 0.
//! * `silent`: reads requests but never answers.
//! * `garbage`: answers with text that is not a number.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use serde::Deserialize;
use v2g_core::policy::external::{ProtocolRequest, PROTOCOL_VERSION};

#[derive(Clone, Copy)]
enum Mode {
    Threshold,
    Idle,
    Silent,
    Garbage,
}

#[derive(Deserialize)]
struct Handshake {
    protocol: String,
}

fn threshold(req: &ProtocolRequest) -> f64 {
    if req.soc < 0.3 {
        req.max_charge_kw.min(7.0)
    } else if req.discharge_price >= 0.35 {
        -req.max_discharge_kw.min(7.0)
    } else {
        0.0
    }
}

fn main() -> ExitCode {
    let mode = match std::env::args().nth(1).as_deref().unwrap_or("threshold") {
        "threshold" => Mode::Threshold,
        "idle" => Mode::Idle,
        "silent" => Mode::Silent,
        "garbage" => Mode::Garbage,
        other => {
            eprintln!("unknown mode `{other}`");
            return ExitCode::from(2);
        }
    };

    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut lines = stdin.lock().lines();
    let handshake = match lines.next() {
        Some(Ok(line)) => line,
        _ => return ExitCode::from(1),
    };
    match serde_json::from_str::<Handshake>(&handshake) {
        Ok(h) if h.protocol == PROTOCOL_VERSION => {}
        _ => {
            eprintln!("unsupported handshake: {handshake}");
            return ExitCode::from(1);
        }
    }

    for line in lines {
        let Ok(line) = line else { break };
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("bad request: {e}");
                continue;
            }
        };
        if value.get("end").is_some() {
            break;
        }
        let reply = match mode {
            Mode::Silent => continue,
            Mode::Garbage => "seven kilowatts".to_string(),
            Mode::Idle => "0".to_string(),
            Mode::Threshold => match serde_json::from_value::<ProtocolRequest>(value) {
                Ok(req) => threshold(&req).to_string(),
                Err(e) => {
                    eprintln!("bad request: {e}");
                    "0".to_string()
                }
            },
        };
        if writeln!(stdout, "{reply}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
