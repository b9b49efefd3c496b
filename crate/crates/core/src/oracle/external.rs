use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::protocol::{encode_request, write_message, Hello, Response};
use super::{Classifier, ContrastiveClassifier, OracleScores, ScoreKind};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

const HELLO_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleAddress {
    /// Shell command whose stdin/stdout speak the protocol.
    Command(String),
    /// `host:port`.
    Tcp(String),
}

/// Handle to a classifier living in another process.
///
/// Calls from several threads are serialized on one connection.
pub struct ExternalOracle {
    hello: Hello,
    conn: Mutex<Connection>,
}

struct Connection {
    writer: Option<Box<dyn Write + Send>>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved peer exit on its own
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            for _ in 0..20 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(25));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub fn external_oracle_connect(address: &OracleAddress, protocol_version: u32) -> Result<ExternalOracle> {
    match address {
        OracleAddress::Command(cmd) => {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| Error::Transport {
                    batch_index: 0,
                    message: format!("could not start {cmd:?}: {e}"),
                })?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            ExternalOracle::handshake(stdout, stdin, Some(child), protocol_version)
        }
        OracleAddress::Tcp(addr) => {
            let stream = TcpStream::connect(addr).map_err(|e| Error::Transport {
                batch_index: 0,
                message: format!("could not connect to {addr}: {e}"),
            })?;
            let _ = stream.set_nodelay(true);
            let read_half = stream.try_clone().map_err(|e| Error::io(addr, e))?;
            ExternalOracle::handshake(read_half, stream, None, protocol_version)
        }
    }
}

impl ExternalOracle {
    /// Speaks the protocol over an arbitrary byte stream pair.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        protocol_version: u32,
    ) -> Result<Self> {
        Self::handshake(reader, writer, None, protocol_version)
    }

    fn handshake(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        child: Option<Child>,
        protocol_version: u32,
    ) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("oracle-reader".into())
            .spawn(move || {
                for line in BufReader::new(reader).lines() {
                    let stop = line.is_err();
                    if tx.send(line).is_err() || stop {
                        break;
                    }
                }
            })
            .map_err(|e| Error::io("<oracle reader thread>", e))?;
        let conn = Connection {
            writer: Some(Box::new(BufWriter::new(writer))),
            lines: rx,
            next_id: 1,
            child,
        };
        let line = match conn.lines.recv_timeout(HELLO_TIMEOUT) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(transport(0, format!("reading hello: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(transport(0, "no hello from oracle peer".into())),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(transport(0, "oracle peer closed before hello".into()))
            }
        };
        let hello: Hello = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("bad hello {line:?}: {e}")))?;
        if hello.proto != protocol_version {
            return Err(Error::Version {
                expected: protocol_version,
                found: hello.proto,
            });
        }
        if hello.k == 0 {
            return Err(Error::Protocol("peer advertises zero categories".into()));
        }
        Ok(Self {
            hello,
            conn: Mutex::new(conn),
        })
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn is_contrastive(&self) -> bool {
        self.hello.contrastive
    }

    fn request(&self, images: &[ImageTensor]) -> Result<Vec<(Vec<f64>, Option<Vec<f64>>)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut conn = self.conn.lock().map_err(|_| transport(0, "connection poisoned".into()))?;
        let first = conn.next_id;
        conn.next_id += images.len() as u64;
        {
            let writer = conn
                .writer
                .as_mut()
                .ok_or_else(|| transport(0, "connection closed".into()))?;
            for (i, img) in images.iter().enumerate() {
                write_message(writer, &encode_request(first + i as u64, img))
                    .map_err(|e| transport(i, format!("write failed: {e}")))?;
            }
            writer.flush().map_err(|e| transport(0, format!("flush failed: {e}")))?;
        }
        let mut pending: HashMap<u64, usize> =
            (0..images.len()).map(|i| (first + i as u64, i)).collect();
        let mut out: Vec<Option<(Vec<f64>, Option<Vec<f64>>)>> = vec![None; images.len()];
        while !pending.is_empty() {
            let missing = pending.values().copied().min().unwrap_or(0);
            let line = match conn.lines.recv() {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(transport(missing, format!("read failed: {e}"))),
                Err(_) => return Err(transport(missing, "oracle peer exited".into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let response: Response = serde_json::from_str(&line)
                .map_err(|e| Error::Protocol(format!("bad response: {e}")))?;
            match response {
                Response::Scores {
                    id,
                    scores,
                    contrast_scores,
                } => {
                    let slot = pending
                        .remove(&id)
                        .ok_or_else(|| Error::Protocol(format!("response for unknown id {id}")))?;
                    if scores.len() != self.hello.k {
                        return Err(Error::Protocol(format!(
                            "{} scores, peer advertised k = {}",
                            scores.len(),
                            self.hello.k
                        )));
                    }
                    if let Some(c) = &contrast_scores {
                        if c.len() != self.hello.k {
                            return Err(Error::Protocol(format!("{} contrast scores", c.len())));
                        }
                    }
                    out[slot] = Some((scores, contrast_scores));
                }
                Response::Error { id, error } => {
                    return Err(Error::Remote {
                        id: id.unwrap_or(0),
                        message: error,
                    })
                }
            }
        }
        Ok(out.into_iter().map(|o| o.expect("all ids answered")).collect())
    }
}

fn transport(batch_index: usize, message: String) -> Error {
    Error::Transport {
        batch_index,
        message,
    }
}

impl Classifier for ExternalOracle {
    fn categories(&self) -> usize {
        self.hello.k
    }

    fn kind(&self) -> ScoreKind {
        self.hello.kind
    }

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<OracleScores>> {
        self.request(images)?
            .into_iter()
            .map(|(s, _)| OracleScores::new(self.hello.kind, s))
            .collect()
    }
}

impl ContrastiveClassifier for ExternalOracle {
    fn score_contrastive(&self, images: &[ImageTensor]) -> Result<Vec<(OracleScores, OracleScores)>> {
        if !self.hello.contrastive {
            return Err(Error::Contract("oracle peer does not offer contrastive scores".into()));
        }
        self.request(images)?
            .into_iter()
            .map(|(s, c)| {
                let c = c.ok_or_else(|| Error::Protocol("response lacks contrast_scores".into()))?;
                Ok((
                    OracleScores::new(self.hello.kind, s)?,
                    OracleScores::new(self.hello.kind, c)?,
                ))
            })
            .collect()
    }
}
