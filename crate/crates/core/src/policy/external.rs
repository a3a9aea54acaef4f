//! Policies running as child processes behind a JSON line protocol.
//!
//! Session layout, one JSON object per line on the child's stdin:
//!
//! ```text
//! > {"protocol":"v2g-policy/1"}
//! > {"charge_price":0.21,"discharge_price":0.21,"soc":0.5,"ttd":120.0,"load_kw":0.8,"pv_kw":0.0,"max_charge_kw":7.0,"max_discharge_kw":7.0,"forecast":[...]}
//! < 3.5
//! ...
//! > {"end":true}
//! ```
//!
//! Each request expects exactly one reply line holding a signed decimal kW.
//! A late, missing or unparseable reply is a fault for that step.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FaultKind, Policy, PolicyFault};
use crate::sim::Observation;

pub const PROTOCOL_VERSION: &str = "v2g-policy/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(1000);
const STDERR_TAIL_BYTES: usize = 4096;
const SHUTDOWN_GRACE: Duration = Duration::from_millis(200);

#[derive(Debug, Error)]
pub enum SpawnError {
    #[error("empty command")]
    EmptyCommand,
    #[error("failed to spawn `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Program plus arguments. `{policy}` in any argument is a placeholder for
/// the path of the program source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalCommand {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { program: program.into(), args: args.into_iter().map(Into::into).collect() }
    }

    /// Splits a whitespace-separated command line (no quoting).
    pub fn parse(line: &str) -> Result<Self, SpawnError> {
        let mut parts = line.split_whitespace();
        let program = parts.next().ok_or(SpawnError::EmptyCommand)?;
        Ok(Self::new(program, parts))
    }

    pub fn with_policy_path(&self, path: &Path) -> Self {
        let path = path.to_string_lossy();
        Self { program: self.program.clone(), args: self.args.iter().map(|a| a.replace("{policy}", &path)).collect() }
    }
}

/// One request line. Field order is part of the wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRequest {
    pub charge_price: f64,
    pub discharge_price: f64,
    pub soc: f64,
    pub ttd: f64,
    pub load_kw: f64,
    pub pv_kw: f64,
    pub max_charge_kw: f64,
    pub max_discharge_kw: f64,
    pub forecast: Vec<f64>,
}

impl From<&Observation> for ProtocolRequest {
    fn from(obs: &Observation) -> Self {
        Self {
            charge_price: obs.charge_price,
            discharge_price: obs.discharge_price,
            soc: obs.soc,
            ttd: obs.ttd_minutes,
            load_kw: obs.load_kw,
            pv_kw: obs.pv_kw,
            max_charge_kw: obs.max_charge_kw,
            max_discharge_kw: obs.max_discharge_kw,
            forecast: obs.forecast.values.clone(),
        }
    }
}

pub fn handshake_line() -> String {
    serde_json::json!({ "protocol": PROTOCOL_VERSION }).to_string()
}

pub fn end_line() -> String {
    serde_json::json!({ "end": true }).to_string()
}

/// Parses a reply line: a single finite decimal number, nothing else.
pub fn parse_reply(line: &str) -> Result<f64, PolicyFault> {
    let trimmed = line.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(PolicyFault::new(FaultKind::Malformed, format!("expected a decimal kW value, got `{trimmed}`"))),
    }
}

pub struct ExternalPolicy {
    name: String,
    child: Child,
    stdin: Option<ChildStdin>,
    replies: Receiver<String>,
    stderr_tail: Arc<Mutex<Vec<u8>>>,
    timeout: Duration,
    _source_file: Option<tempfile::TempPath>,
}

impl ExternalPolicy {
    pub fn spawn(name: &str, command: &ExternalCommand, timeout: Duration) -> Result<Self, SpawnError> {
        if command.program.is_empty() {
            return Err(SpawnError::EmptyCommand);
        }
        let mut child = Command::new(&command.program)
            .args(&command.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| SpawnError::Spawn { program: command.program.clone(), source })?;

        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, replies) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let stderr_tail = Arc::new(Mutex::new(Vec::new()));
        let mut stderr = child.stderr.take().expect("stderr piped");
        let sink = Arc::clone(&stderr_tail);
        thread::spawn(move || {
            let mut buf = [0u8; 1024];
            while let Ok(n) = stderr.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut tail = sink.lock().expect("stderr buffer poisoned");
                tail.extend_from_slice(&buf[..n]);
                let excess = tail.len().saturating_sub(STDERR_TAIL_BYTES);
                tail.drain(..excess);
            }
        });

        let mut stdin = child.stdin.take().expect("stdin piped");
        writeln!(stdin, "{}", handshake_line())?;
        stdin.flush()?;
        Ok(Self {
            name: name.to_string(),
            child,
            stdin: Some(stdin),
            replies,
            stderr_tail,
            timeout,
            _source_file: None,
        })
    }

    pub(crate) fn keep_alive(&mut self, path: tempfile::TempPath) {
        self._source_file = Some(path);
    }

    /// Last few KiB the child wrote to stderr.
    pub fn stderr_tail(&self) -> String {
        String::from_utf8_lossy(&self.stderr_tail.lock().expect("stderr buffer poisoned")).into_owned()
    }

    fn diagnostic(&self, message: String) -> String {
        let tail = self.stderr_tail();
        if tail.trim().is_empty() {
            message
        } else {
            format!("{message}; stderr: {}", tail.trim())
        }
    }
}

impl Policy for ExternalPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        // Replies that arrived after an earlier timeout belong to old requests.
        while self.replies.try_recv().is_ok() {}
        let line = serde_json::to_string(&ProtocolRequest::from(obs)).expect("request serialises");
        let stdin = self.stdin.as_mut().ok_or_else(|| PolicyFault::new(FaultKind::Io, "stdin already closed"))?;
        if let Err(e) = writeln!(stdin, "{line}").and_then(|_| stdin.flush()) {
            return Err(PolicyFault::new(FaultKind::ChildExited, self.diagnostic(format!("write failed: {e}"))));
        }
        match self.replies.recv_timeout(self.timeout) {
            Ok(reply) => parse_reply(&reply),
            Err(RecvTimeoutError::Timeout) => {
                Err(PolicyFault::new(FaultKind::Timeout, format!("no reply within {} ms", self.timeout.as_millis())))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(PolicyFault::new(FaultKind::ChildExited, self.diagnostic("child closed stdout".into())))
            }
        }
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = writeln!(stdin, "{}", end_line()).and_then(|_| stdin.flush());
        }
        let deadline = Instant::now() + SHUTDOWN_GRACE;
        while Instant::now() < deadline {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(_) => break,
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Spawns `command` and wraps it in a fault-absorbing handle.
pub fn spawn_external_policy(command: &ExternalCommand, timeout: Duration) -> Result<super::PolicyHandle, SpawnError> {
    let name = Path::new(&command.program).file_name().map_or_else(|| command.program.clone(), |n| n.to_string_lossy().into_owned());
    Ok(super::PolicyHandle::new(ExternalPolicy::spawn(&name, command, timeout)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::test_support::observation;

    #[test]
    fn request_keys_and_order() {
        let line = serde_json::to_string(&ProtocolRequest::from(&observation(0.5, 0.2))).unwrap();
        let keys: Vec<&str> = [
            "charge_price",
            "discharge_price",
            "soc",
            "ttd",
            "load_kw",
            "pv_kw",
            "max_charge_kw",
            "max_discharge_kw",
            "forecast",
        ]
        .to_vec();
        let value: serde_json::Value = serde_json::from_str(&line).unwrap();
        let got: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = keys.clone();
        expected.sort_unstable();
        assert_eq!(got, expected, "exactly the documented keys");
        let positions: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "documented key order");
        assert_eq!(handshake_line(), r#"{"protocol":"v2g-policy/1"}"#);
        assert_eq!(end_line(), r#"{"end":true}"#);
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_reply(" 7.0\n").unwrap(), 7.0);
        assert_eq!(parse_reply("-3.5").unwrap(), -3.5);
        assert_eq!(parse_reply("0").unwrap(), 0.0);
        assert_eq!(parse_reply("nan").unwrap_err().kind, FaultKind::Malformed);
        assert!(parse_reply("7 kW").is_err());
        assert!(parse_reply("").is_err());
    }

    #[test]
    fn command_placeholders() {
        let cmd = ExternalCommand::parse("python3 {policy} --fast").unwrap();
        let bound = cmd.with_policy_path(Path::new("/tmp/p.py"));
        assert_eq!(bound.args, vec!["/tmp/p.py".to_string(), "--fast".to_string()]);
        assert!(ExternalCommand::parse("   ").is_err());
    }

    #[test]
    fn spawn_failure_is_reported() {
        let cmd = ExternalCommand::new("/definitely/not/here", Vec::<String>::new());
        assert!(matches!(spawn_external_policy(&cmd, DEFAULT_TIMEOUT), Err(SpawnError::Spawn { .. })));
    }

    #[test]
    fn shell_child_round_trip() {
        // Reads the handshake, then answers every request with 0.
        let cmd = ExternalCommand::new("sh", ["-c", "read hs; while read line; do case \"$line\" in *end*) exit 0;; esac; echo 0; done"]);
        let mut handle = spawn_external_policy(&cmd, Duration::from_secs(5)).unwrap();
        for _ in 0..5 {
            assert_eq!(handle.try_decide(&observation(0.5, 0.2)).unwrap(), 0.0);
        }
        assert!(handle.fault_log().is_empty());
    }
}
