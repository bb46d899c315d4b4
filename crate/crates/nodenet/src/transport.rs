//! Request/response framing and the transports that carry it.
//!
//! A frame is `kind u8 | len u32 LE | bytes`. A request is a control frame,
//! followed by an envelope frame when the control is an upload. A response is
//! a control frame, followed by a public key frame after a welcome.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commands::ControlMessage;
use crate::error::{Error, Result};
use crate::server::Server;

const KIND_CONTROL: u8 = 1;
const KIND_ENVELOPE: u8 = 2;
const KIND_PUBLIC_KEY: u8 = 3;
const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub control: ControlMessage,
    pub envelope: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub control: ControlMessage,
    pub public_key: Option<Vec<u8>>,
}

pub trait Transport {
    fn exchange(&mut self, req: &Request) -> Result<Response>;
}

fn write_frame<W: Write>(w: &mut W, kind: u8, bytes: &[u8]) -> Result<()> {
    w.write_all(&[kind])?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

/// Returns `None` on a clean end of stream before the first byte.
fn read_frame<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>> {
    let mut kind = [0u8; 1];
    match r.read_exact(&mut kind) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes is too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some((kind[0], buf)))
}

fn read_control<R: Read>(r: &mut R) -> Result<Option<ControlMessage>> {
    match read_frame(r)? {
        None => Ok(None),
        Some((KIND_CONTROL, b)) => {
            let line = std::str::from_utf8(&b).map_err(|_| Error::Protocol("control frame is not utf-8".into()))?;
            ControlMessage::from_line(line).map(Some)
        }
        Some((k, _)) => Err(Error::Protocol(format!("expected control frame, got kind {k}"))),
    }
}

fn expect_frame<R: Read>(r: &mut R, kind: u8) -> Result<Vec<u8>> {
    match read_frame(r)? {
        Some((k, b)) if k == kind => Ok(b),
        Some((k, _)) => Err(Error::Protocol(format!("expected frame kind {kind}, got {k}"))),
        None => Err(Error::Protocol("stream ended mid-message".into())),
    }
}

pub fn write_request<W: Write>(w: &mut W, req: &Request) -> Result<()> {
    write_frame(w, KIND_CONTROL, req.control.to_line().as_bytes())?;
    if let Some(env) = &req.envelope {
        write_frame(w, KIND_ENVELOPE, env)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_request<R: Read>(r: &mut R) -> Result<Option<Request>> {
    let Some(control) = read_control(r)? else {
        return Ok(None);
    };
    let envelope = match control {
        ControlMessage::Upload { .. } => Some(expect_frame(r, KIND_ENVELOPE)?),
        _ => None,
    };
    Ok(Some(Request { control, envelope }))
}

pub fn write_response<W: Write>(w: &mut W, resp: &Response) -> Result<()> {
    write_frame(w, KIND_CONTROL, resp.control.to_line().as_bytes())?;
    if let Some(k) = &resp.public_key {
        write_frame(w, KIND_PUBLIC_KEY, k)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_response<R: Read>(r: &mut R) -> Result<Response> {
    let control = read_control(r)?.ok_or_else(|| Error::Transport("connection closed".into()))?;
    let public_key = match control {
        ControlMessage::Welcome => Some(expect_frame(r, KIND_PUBLIC_KEY)?),
        _ => None,
    };
    Ok(Response { control, public_key })
}

/// In-process transport that hands requests straight to a server.
///
/// Each direction is dropped independently with `drop_probability`. A lost
/// response still leaves the server's state changed, which is what makes
/// retries and deduplication observable.
pub struct LoopbackTransport {
    server: Arc<Mutex<Server>>,
    drop_probability: f64,
    rng: ChaCha8Rng,
    dropped: u64,
    delivered: u64,
}

impl LoopbackTransport {
    pub fn new(server: Arc<Mutex<Server>>) -> Self {
        Self::lossy(server, 0.0, 0)
    }

    pub fn lossy(server: Arc<Mutex<Server>>, drop_probability: f64, seed: u64) -> Self {
        Self {
            server,
            drop_probability,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropped: 0,
            delivered: 0,
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    fn lose(&mut self) -> bool {
        let lost = self.drop_probability > 0.0 && self.rng.gen::<f64>() < self.drop_probability;
        if lost {
            self.dropped += 1;
        }
        lost
    }
}

impl Transport for LoopbackTransport {
    fn exchange(&mut self, req: &Request) -> Result<Response> {
        if self.lose() {
            return Err(Error::Transport("request lost".into()));
        }
        // Round trip through the wire format so framing is exercised too.
        let mut wire = Vec::new();
        write_request(&mut wire, req)?;
        let req = read_request(&mut wire.as_slice())?.expect("request was written");
        let resp = self.server.lock().expect("server lock").handle(&req);
        if self.lose() {
            return Err(Error::Transport("response lost".into()));
        }
        self.delivered += 1;
        let mut wire = Vec::new();
        write_response(&mut wire, &resp)?;
        read_response(&mut wire.as_slice())
    }
}

/// Blocking TCP client. Reconnects lazily after any failure.
pub struct TcpTransport {
    addr: String,
    timeout: Duration,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(10),
            conn: None,
        }
    }

    fn connect(&mut self) -> Result<&mut (BufReader<TcpStream>, BufWriter<TcpStream>)> {
        if self.conn.is_none() {
            let addr = self
                .addr
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| Error::Transport(format!("cannot resolve {}", self.addr)))?;
            let s = TcpStream::connect_timeout(&addr, self.timeout)?;
            s.set_read_timeout(Some(self.timeout))?;
            s.set_write_timeout(Some(self.timeout))?;
            s.set_nodelay(true)?;
            self.conn = Some((BufReader::new(s.try_clone()?), BufWriter::new(s)));
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, req: &Request) -> Result<Response> {
        let result = (|| {
            let (r, w) = self.connect()?;
            write_request(w, req)?;
            read_response(r)
        })();
        if result.is_err() {
            self.conn = None;
        }
        result.map_err(|e| match e {
            Error::Io(io) => Error::Transport(io.to_string()),
            other => other,
        })
    }
}

fn serve_connection(stream: TcpStream, server: Arc<Mutex<Server>>) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    while let Some(req) = read_request(&mut r)? {
        let resp = server.lock().expect("server lock").handle(&req);
        write_response(&mut w, &resp)?;
    }
    Ok(())
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve_tcp(listener: TcpListener, server: Arc<Mutex<Server>>, stop: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    let mut workers = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let server = Arc::clone(&server);
                workers.push(std::thread::spawn(move || {
                    let _ = serve_connection(stream, server);
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
        workers.retain(|h| !h.is_finished());
    }
    Ok(())
}
