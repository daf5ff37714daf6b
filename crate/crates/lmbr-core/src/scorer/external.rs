//! Client for out-of-process scorers speaking the line protocol.
//!
//! One request line, one reply line, newline-delimited UTF-8, over the
//! peer's stdio or a TCP connection:
//!
//! ```text
//! -> INIT <id> ||| <source tokens>
//! <- OK <state>
//! -> DIST <state>
//! <- DIST <state> ||| tok lp tok lp ... ||| DEFAULT <lp>
//! -> ADV <state> ||| <token>
//! <- OK <newstate>
//! -> FREE <state>
//! <- OK
//! ```
//!
//! The peer may answer any request with `ERR <message>`. State ids are
//! the peer's own and pass through unchanged. Token strings travel on the
//! wire; the client interns them through a shared symbol table, so a peer
//! can introduce tokens the lattice never mentioned. The peer's
//! vocabulary is unknown to the client: out-of-vocabulary pricing happens
//! peer-side through the DEFAULT entry.
//!
//! Transport faults (dead peer, timeout, connection failure) and protocol
//! faults (malformed frames, wrong state echo, ERR replies) are kept
//! apart so callers can tell an infrastructure problem from a data one.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::symbols::{SymbolTable, TokenId};

use super::{Distribution, Scorer, ScorerStateId};

/// Default per-request timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub struct ExternalScorer {
    writer: Box<dyn Write + Send>,
    replies: mpsc::Receiver<std::io::Result<String>>,
    child: Option<Child>,
    tcp: Option<TcpStream>,
    symbols: Arc<RwLock<SymbolTable>>,
    timeout: Duration,
    /// Label of the sentence currently being scored, for error messages.
    sentence: String,
    counter: u64,
}

fn spawn_reader(read: impl Read + Send + 'static) -> mpsc::Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut lines = BufReader::new(read).lines();
        loop {
            match lines.next() {
                Some(Ok(line)) => {
                    if tx.send(Ok(line)).is_err() {
                        return;
                    }
                }
                Some(Err(e)) => {
                    let _ = tx.send(Err(e));
                    return;
                }
                None => {
                    let _ = tx.send(Err(std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "peer closed the stream",
                    )));
                    return;
                }
            }
        }
    });
    rx
}

impl ExternalScorer {
    /// Connects to a peer. `address` is either `tcp:HOST:PORT` or a
    /// command line to spawn (whitespace-split; the peer then speaks the
    /// protocol on its stdio).
    pub fn connect(
        address: &str,
        symbols: Arc<RwLock<SymbolTable>>,
        timeout: Duration,
    ) -> Result<Self> {
        let transport_err = |message: String| Error::Transport {
            sentence: "?".into(),
            message,
        };
        let (writer, replies, child, tcp): (
            Box<dyn Write + Send>,
            mpsc::Receiver<std::io::Result<String>>,
            Option<Child>,
            Option<TcpStream>,
        ) = if let Some(addr) = address.strip_prefix("tcp:") {
            let stream = TcpStream::connect(addr)
                .map_err(|e| transport_err(format!("cannot connect to {addr}: {e}")))?;
            let reader = stream
                .try_clone()
                .map_err(|e| transport_err(format!("cannot clone connection: {e}")))?;
            (
                Box::new(stream.try_clone().map_err(|e| {
                    transport_err(format!("cannot clone connection: {e}"))
                })?),
                spawn_reader(reader),
                None,
                Some(stream),
            )
        } else {
            let mut words = address.split_whitespace();
            let program = words
                .next()
                .ok_or_else(|| Error::Invalid("empty scorer command".into()))?;
            let mut child = Command::new(program)
                .args(words)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::null())
                .spawn()
                .map_err(|e| transport_err(format!("cannot spawn {program:?}: {e}")))?;
            let stdin = child.stdin.take().expect("stdin was piped");
            let stdout = child.stdout.take().expect("stdout was piped");
            (Box::new(stdin), spawn_reader(stdout), Some(child), None)
        };
        Ok(ExternalScorer {
            writer,
            replies,
            child,
            tcp,
            symbols,
            timeout,
            sentence: "?".into(),
            counter: 0,
        })
    }

    fn transport(&self, message: String) -> Error {
        Error::Transport {
            sentence: self.sentence.clone(),
            message,
        }
    }

    fn protocol(&self, message: String) -> Error {
        Error::Protocol {
            message: format!("(sentence {}) {message}", self.sentence),
        }
    }

    fn request(&mut self, line: &str) -> Result<String> {
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|e| self.transport(format!("cannot send request: {e}")))?;
        let reply = match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(self.transport(format!("{e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return Err(self.transport(format!(
                    "no reply within {:.1}s",
                    self.timeout.as_secs_f64()
                )))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(self.transport("peer closed the stream".into()))
            }
        };
        let reply = reply.trim().to_owned();
        if let Some(message) = reply.strip_prefix("ERR") {
            return Err(self.protocol(format!("peer reported: {}", message.trim())));
        }
        Ok(reply)
    }

    fn expect_ok_with_state(&mut self, line: &str) -> Result<ScorerStateId> {
        let reply = self.request(line)?;
        match reply.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["OK", state] => state
                .parse()
                .map_err(|_| self.protocol(format!("bad state id in reply {reply:?}"))),
            _ => Err(self.protocol(format!("expected `OK <state>`, got {reply:?}"))),
        }
    }
}

impl Scorer for ExternalScorer {
    fn vocab(&self) -> Option<&BTreeSet<TokenId>> {
        None
    }

    fn start(&mut self, source: &[TokenId]) -> Result<ScorerStateId> {
        self.sentence = self.counter.to_string();
        self.counter += 1;
        let rendered = self
            .symbols
            .read()
            .unwrap()
            .render(source)
            .map_err(|e| Error::Invalid(format!("cannot render source tokens: {e}")))?;
        let line = format!("INIT {} ||| {rendered}", self.sentence);
        self.expect_ok_with_state(&line)
    }

    fn distribution(&mut self, state: ScorerStateId) -> Result<Distribution> {
        let reply = self.request(&format!("DIST {state}"))?;
        let parts: Vec<&str> = reply.split(" ||| ").collect();
        let [head, pairs, default] = parts.as_slice() else {
            return Err(self.protocol(format!(
                "expected `DIST <state> ||| pairs ||| DEFAULT <lp>`, got {reply:?}"
            )));
        };
        if *head != format!("DIST {state}") {
            return Err(self.protocol(format!(
                "reply echoes {head:?}, expected `DIST {state}`"
            )));
        }
        let default_lp: f64 = match default.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["DEFAULT", lp] => lp
                .parse()
                .map_err(|_| self.protocol(format!("bad default logprob {lp:?}")))?,
            _ => {
                return Err(self.protocol(format!(
                    "expected `DEFAULT <lp>`, got {default:?}"
                )))
            }
        };
        let fields: Vec<&str> = pairs.split_whitespace().collect();
        if fields.len() % 2 != 0 {
            return Err(self.protocol(format!(
                "odd token/logprob pairing in {pairs:?}"
            )));
        }
        let mut entries = Vec::with_capacity(fields.len() / 2);
        {
            let mut symbols = self.symbols.write().unwrap();
            for pair in fields.chunks(2) {
                let token = symbols.intern(pair[0])?;
                let lp: f64 = pair[1]
                    .parse()
                    .map_err(|_| self.protocol(format!("bad logprob {:?}", pair[1])))?;
                entries.push((token, lp));
            }
        }
        Distribution::new(entries, default_lp)
            .map_err(|e| self.protocol(format!("bad distribution: {e}")))
    }

    fn advance(&mut self, state: ScorerStateId, token: TokenId) -> Result<ScorerStateId> {
        let rendered = self
            .symbols
            .read()
            .unwrap()
            .resolve(token)
            .ok_or_else(|| Error::Invalid(format!("token id {token} is not in the symbol table")))?
            .to_owned();
        self.expect_ok_with_state(&format!("ADV {state} ||| {rendered}"))
    }

    fn free(&mut self, state: ScorerStateId) -> Result<()> {
        let reply = self.request(&format!("FREE {state}"))?;
        if reply != "OK" {
            return Err(self.protocol(format!("expected `OK`, got {reply:?}")));
        }
        Ok(())
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
