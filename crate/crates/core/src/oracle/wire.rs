//! Newline-delimited JSON protocol to out-of-process detectors.
//!
//! ```text
//! -> {"type":"hello","proto":1}
//! <- {"type":"hello","proto":1,"name":"yolov3","classes":["person"]}
//! -> {"type":"detect","id":7,"width":W,"height":H,"pixels":"<base64 W·H bytes>"}
//! <- {"type":"detections","id":7,"detections":[{"x1":..,"y1":..,"x2":..,"y2":..,"conf":..,"cls":"person"}]}
//! <- {"type":"error","id":7,"message":"..."}
//! ```
//!
//! Pixels are 8-bit grayscale, row-major, `round(intensity · 255)` with halves
//! rounding up. Floats are written in shortest round-trip form.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Detection, Detector};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello {
        proto: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Detect {
        id: u64,
        width: u32,
        height: u32,
        pixels: String,
    },
    Detections {
        id: u64,
        detections: Vec<Detection>,
    },
    Error {
        id: Option<u64>,
        message: String,
    },
}

impl Message {
    pub fn client_hello() -> Self {
        Message::Hello { proto: PROTOCOL_VERSION, name: None, classes: None, error: None }
    }

    pub fn detect_request(id: u64, image: &GrayImage) -> Self {
        Message::Detect { id, width: image.width(), height: image.height(), pixels: BASE64.encode(image.to_bytes()) }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("protocol messages always serialize");
        s.push('\n');
        s
    }
}

/// Decodes the pixel payload of a detect request.
pub fn decode_pixels(width: u32, height: u32, pixels: &str) -> Result<GrayImage> {
    let bytes = BASE64.decode(pixels.trim()).map_err(|e| Error::Protocol(format!("bad base64 pixels: {e}")))?;
    GrayImage::from_bytes(width, height, &bytes).map_err(|e| Error::Protocol(e.to_string()))
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
}

impl Connection {
    fn new(reader: impl Read + Send + 'static, writer: Box<dyn Write + Send>, child: Option<Child>) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => {
                        let _ = tx.send(Err(io::Error::new(io::ErrorKind::UnexpectedEof, "detector closed the stream")));
                        break;
                    }
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Self { writer, lines: rx, child }
    }

    fn send(&mut self, msg: &Message, id: Option<u64>) -> Result<()> {
        self.writer
            .write_all(msg.to_line().as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Transport { id, message: format!("write failed: {e}") })
    }

    /// Next parsed message, or a transport error when `deadline` passes.
    fn recv(&mut self, deadline: Instant, id: Option<u64>) -> Result<Message> {
        let left = deadline.saturating_duration_since(Instant::now());
        let line = match self.lines.recv_timeout(left) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Transport { id, message: e.to_string() }),
            Err(RecvTimeoutError::Timeout) => return Err(Error::Transport { id, message: "timed out waiting for detector".into() }),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport { id, message: "detector connection closed".into() })
            }
        };
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol(format!("malformed response {:?}: {e}", line.trim_end())))
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client side of the protocol, over a subprocess's stdio or a TCP socket.
/// Requests on one connection are serialized.
pub struct WireDetector {
    name: String,
    classes: Vec<String>,
    conn: Mutex<Connection>,
    next_id: AtomicU64,
    timeout: Duration,
}

impl WireDetector {
    /// Launches `command` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(format!("exec {command}"))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport { id: None, message: format!("cannot launch {command:?}: {e}") })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Connection::new(stdout, Box::new(stdin), Some(child)), timeout)
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Transport { id: None, message: format!("cannot connect to {addr}: {e}") })?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone()?;
        Self::handshake(Connection::new(reader, Box::new(stream), None), timeout)
    }

    /// Runs the handshake over an arbitrary byte stream pair.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        Self::handshake(Connection::new(reader, Box::new(writer), None), timeout)
    }

    fn handshake(mut conn: Connection, timeout: Duration) -> Result<Self> {
        conn.send(&Message::client_hello(), None)?;
        match conn.recv(Instant::now() + timeout, None)? {
            Message::Hello { proto, error: Some(e), .. } => {
                Err(Error::Protocol(format!("detector (proto {proto}) reported a startup error: {e}")))
            }
            Message::Hello { proto, name, classes, .. } if proto == PROTOCOL_VERSION => Ok(Self {
                name: name.unwrap_or_else(|| "wire".to_owned()),
                classes: classes.unwrap_or_default(),
                conn: Mutex::new(conn),
                next_id: AtomicU64::new(1),
                timeout,
            }),
            Message::Hello { proto, .. } => Err(Error::Protocol(format!("unsupported protocol version {proto}"))),
            other => Err(Error::Protocol(format!("expected hello, got {other:?}"))),
        }
    }
}

impl Detector for WireDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn classes(&self) -> Vec<String> {
        self.classes.clone()
    }

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        conn.send(&Message::detect_request(id, image), Some(id))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            match conn.recv(deadline, Some(id))? {
                Message::Detections { id: rid, detections } if rid == id => {
                    return Ok(detections.into_iter().map(|d| d.clamped(image.width(), image.height())).collect());
                }
                Message::Error { id: rid, message } if rid == Some(id) || rid.is_none() => {
                    return Err(Error::Protocol(format!("detector error for request {id}: {message}")));
                }
                // late replies to requests that already timed out
                Message::Detections { .. } | Message::Error { .. } => continue,
                other => return Err(Error::Protocol(format!("unexpected message {other:?}"))),
            }
        }
    }
}

fn error_reply(id: Option<u64>, message: impl Into<String>) -> Message {
    Message::Error { id, message: message.into() }
}

/// Handles one request line and returns the reply.
pub fn handle_line(line: &str, detector: &dyn Detector) -> Message {
    let msg: Message = match serde_json::from_str(line) {
        Ok(m) => m,
        Err(e) => {
            // salvage the id when the line is JSON but not a valid message
            let id = serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v.get("id")?.as_u64());
            return error_reply(id, format!("malformed request: {e}"));
        }
    };
    match msg {
        Message::Hello { proto, .. } if proto == PROTOCOL_VERSION => Message::Hello {
            proto: PROTOCOL_VERSION,
            name: Some(detector.name().to_owned()),
            classes: Some(detector.classes()),
            error: None,
        },
        Message::Hello { proto, .. } => error_reply(None, format!("unsupported protocol version {proto}")),
        Message::Detect { id, width, height, pixels } => {
            match decode_pixels(width, height, &pixels).and_then(|img| detector.detect(&img)) {
                Ok(detections) => Message::Detections { id, detections },
                Err(e) => error_reply(Some(id), e.to_string()),
            }
        }
        Message::Detections { id, .. } | Message::Error { id: Some(id), .. } => {
            error_reply(Some(id), "unexpected message type from client")
        }
        Message::Error { id: None, .. } => error_reply(None, "unexpected message type from client"),
    }
}

/// Serves requests until the reader hits end of stream. Blank lines are ignored.
pub fn serve_stream(reader: impl BufRead, mut writer: impl Write, detector: &dyn Detector) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(line.trim_end(), detector);
        writer.write_all(reply.to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(listener: TcpListener, detector: Arc<dyn Detector>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let detector = detector.clone();
        thread::spawn(move || {
            let _ = stream.set_nodelay(true);
            let reader = match stream.try_clone() {
                Ok(r) => BufReader::new(r),
                Err(e) => {
                    log::warn!("cannot clone stream: {e}");
                    return;
                }
            };
            if let Err(e) = serve_stream(reader, stream, detector.as_ref()) {
                log::debug!("connection ended: {e}");
            }
        });
    }
    Ok(())
}
