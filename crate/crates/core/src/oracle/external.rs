//! Client side of the external-recognizer protocol.
//!
//! One JSON object per line in each direction, one request in flight:
//!
//! ```text
//! -> {"id": 7, "width": 20, "height": 8, "pixels": "<base64 row-major bytes>", "gt_len": 5}
//! <- {"id": 7, "char_confs": [0.9, 0.8], "predicted_len": 2}
//! ```
//!
//! Endpoints are `stdio:CMD` (spawned through `sh -c`) or `tcp:HOST:PORT`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{OracleError, RecognitionResult, Result};
use crate::spatial::Raster;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RecognizeRequest {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: String,
    pub gt_len: u32,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RecognizeResponse {
    pub id: u64,
    pub char_confs: Vec<f64>,
    pub predicted_len: u32,
}

impl RecognizeRequest {
    pub fn new(id: u64, image: &Raster, gt_len: usize) -> Self {
        let bytes: Vec<u8> = image
            .data()
            .iter()
            .map(|&v| crate::spatial::pgm_quantize(v))
            .collect();
        Self {
            id,
            width: image.width() as u32,
            height: image.height() as u32,
            pixels: base64::engine::general_purpose::STANDARD.encode(bytes),
            gt_len: gt_len as u32,
        }
    }
}

/// Checks a response line against the request id it answers.
pub fn decode_response(line: &str, expected_id: u64) -> Result<RecognitionResult> {
    let resp: RecognizeResponse = serde_json::from_str(line)
        .map_err(|e| OracleError::ProtocolViolation(format!("bad response {line:?}: {e}")))?;
    if resp.id != expected_id {
        return Err(OracleError::ProtocolViolation(format!(
            "response id {} does not match request id {expected_id}",
            resp.id
        )));
    }
    RecognitionResult::new(resp.char_confs, resp.predicted_len as usize)
        .map_err(|e| OracleError::ProtocolViolation(e.to_string()))
}

enum Transport {
    Child(Child),
    Tcp,
}

/// Live connection to an external recognizer.
pub struct ExternalOracle {
    endpoint: String,
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    transport: Transport,
    next_id: u64,
    timeout: Duration,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("endpoint", &self.endpoint)
            .field("next_id", &self.next_id)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn spawn_reader(reader: impl Read + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl ExternalOracle {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            Ok(Self {
                endpoint: endpoint.to_string(),
                writer: Box::new(stdin),
                lines: spawn_reader(stdout),
                transport: Transport::Child(child),
                next_id: 0,
                timeout,
            })
        } else if let Some(addr) = endpoint.strip_prefix("tcp:") {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            Ok(Self {
                endpoint: endpoint.to_string(),
                writer: Box::new(stream),
                lines: spawn_reader(reader),
                transport: Transport::Tcp,
                next_id: 0,
                timeout,
            })
        } else {
            Err(OracleError::BadEndpoint(endpoint.to_string()))
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Sends one image and blocks for the matching response.
    pub fn recognize(&mut self, image: &Raster, gt_len: usize) -> Result<RecognitionResult> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&RecognizeRequest::new(id, image, gt_len))
            .expect("request serializes");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| OracleError::ProtocolViolation(format!("send failed: {e}")))?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => decode_response(&resp, id),
            Ok(Err(e)) => Err(OracleError::ProtocolViolation(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(OracleError::OracleTimeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(OracleError::ProtocolViolation(
                "connection closed by recognizer".into(),
            )),
        }
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Transport::Child(child) = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
