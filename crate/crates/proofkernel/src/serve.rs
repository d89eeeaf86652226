//! `serve`: the JSON-lines protocol over stdio or TCP, plus an optional
//! websocket bridge that carries the same lines one per message and serves
//! static files over plain HTTP on the same port.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use crate::kernel::KernelConfig;
use crate::runtime::{Input, InputSender, Runtime, Sink, WorkerMode};

pub const INDEX_HTML: &str = include_str!("index.html");

#[derive(Clone, Debug)]
pub enum Transport {
    Stdio,
    Tcp(TcpListenerSpec),
}

#[derive(Clone, Debug)]
pub struct TcpListenerSpec {
    pub port: u16,
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub transport: Transport,
    pub ws_port: Option<u16>,
    pub assets: Option<PathBuf>,
    pub workers: usize,
    pub mode: WorkerMode,
    pub kernel: KernelConfig,
}

type Subscribers = Arc<Mutex<Vec<Sender<String>>>>;

/// Where client lines go: the primary connection plus websocket clients.
#[derive(Clone, Default)]
struct Outputs {
    primary: Arc<Mutex<Option<Box<dyn Write + Send>>>>,
    subscribers: Subscribers,
}

impl Outputs {
    fn sink(&self) -> Sink {
        let outputs = self.clone();
        Box::new(move |line| outputs.send(line))
    }

    fn send(&self, line: &str) {
        let mut primary = self.primary.lock().expect("output lock");
        if let Some(w) = primary.as_mut() {
            if writeln!(w, "{line}").and_then(|_| w.flush()).is_err() {
                *primary = None;
            }
        }
        self.subscribers.lock().expect("subscriber lock").retain(|s| s.send(line.to_string()).is_ok());
    }

    fn set_primary(&self, w: Option<Box<dyn Write + Send>>) {
        *self.primary.lock().expect("output lock") = w;
    }
}

pub fn serve(opts: ServeOptions) -> io::Result<()> {
    let outputs = Outputs::default();
    let mut rt = Runtime::new(opts.kernel.clone(), opts.workers, opts.mode.clone(), outputs.sink())?;
    let input = rt.input();
    match &opts.transport {
        Transport::Stdio => {
            outputs.set_primary(Some(Box::new(io::stdout())));
            let input = input.clone();
            thread::spawn(move || {
                feed_lines(io::stdin().lock(), &input);
                input.send(Input::Shutdown);
            });
        }
        Transport::Tcp(spec) => {
            let listener = TcpListener::bind(("127.0.0.1", spec.port))?;
            eprintln!("tcp listening on {}", listener.local_addr()?);
            let (input, outputs) = (input.clone(), outputs.clone());
            thread::spawn(move || accept_tcp(listener, input, outputs));
        }
    }
    if let Some(port) = opts.ws_port {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        eprintln!("ws listening on {}", listener.local_addr()?);
        let bridge = Bridge { input: input.clone(), subscribers: outputs.subscribers.clone(), assets: opts.assets };
        thread::spawn(move || bridge.accept(listener));
    }
    rt.serve();
    rt.shutdown();
    Ok(())
}

/// Forwards non-blank lines. Bytes that are not UTF-8 are replaced rather
/// than ending the stream, so such a line still gets an error response.
fn feed_lines(reader: impl BufRead, input: &InputSender) {
    for line in reader.split(b'\n') {
        let Ok(line) = line else { break };
        let line = String::from_utf8_lossy(&line);
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        if !input.send(Input::Line(line.to_string())) {
            break;
        }
    }
}

/// One TCP client at a time; the next is accepted when the previous leaves.
fn accept_tcp(listener: TcpListener, input: InputSender, outputs: Outputs) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let Ok(writer) = stream.try_clone() else { continue };
        input.send(Input::ConnectionReset);
        outputs.set_primary(Some(Box::new(writer)));
        feed_lines(BufReader::new(stream), &input);
        outputs.set_primary(None);
    }
}

#[derive(Clone)]
struct Bridge {
    input: InputSender,
    subscribers: Subscribers,
    assets: Option<PathBuf>,
}

impl Bridge {
    fn accept(self, listener: TcpListener) {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let bridge = self.clone();
            thread::spawn(move || {
                if let Err(e) = bridge.connection(stream) {
                    log::debug!("bridge connection ended: {e}");
                }
            });
        }
    }

    fn connection(&self, stream: TcpStream) -> io::Result<()> {
        let (head, len) = peek_head(&stream)?;
        let lower = head.to_ascii_lowercase();
        if lower.contains("upgrade: websocket") {
            let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
            self.websocket(ws)
        } else {
            serve_http(stream, &head, len, self.assets.as_deref())
        }
    }

    fn websocket(&self, mut ws: WebSocket<TcpStream>) -> io::Result<()> {
        let (tx, rx): (Sender<String>, Receiver<String>) = mpsc::channel();
        self.subscribers.lock().expect("subscriber lock").push(tx);
        self.input.send(Input::ConnectionReset);
        ws.get_ref().set_read_timeout(Some(Duration::from_millis(20)))?;
        loop {
            loop {
                match rx.try_recv() {
                    Ok(line) => ws.send(Message::text(line)).map_err(io::Error::other)?,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return Ok(()),
                }
            }
            match ws.read() {
                Ok(Message::Text(text)) => {
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        self.input.send(Input::Line(line.to_string()));
                    }
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(io::Error::other(e)),
            }
        }
    }
}

/// Peeks the request head without consuming it, so the websocket handshake
/// can still read it. Returns the head and its length in bytes.
fn peek_head(stream: &TcpStream) -> io::Result<(String, usize)> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut buf = vec![0u8; 8192];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let end = buf[..n].windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4);
        if let Some(len) = end.or((n == buf.len()).then_some(n)) {
            stream.set_read_timeout(None)?;
            return Ok((String::from_utf8_lossy(&buf[..len]).into_owned(), len));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

fn serve_http(mut stream: TcpStream, head: &str, head_len: usize, assets: Option<&Path>) -> io::Result<()> {
    // Drain the request head so the client sees a clean response.
    let mut sink = vec![0u8; head_len];
    stream.read_exact(&mut sink)?;
    let mut parts = head.lines().next().unwrap_or_default().split_whitespace();
    let (method, target) = (parts.next().unwrap_or_default(), parts.next().unwrap_or("/"));
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let (status, ctype, body) = if method != "GET" && method != "HEAD" {
        ("405 Method Not Allowed", "text/plain", b"method not allowed\n".to_vec())
    } else {
        match static_file(path, assets) {
            Some((ctype, body)) => ("200 OK", ctype, body),
            None => ("404 Not Found", "text/plain", b"not found\n".to_vec()),
        }
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    if method != "HEAD" {
        stream.write_all(&body)?;
    }
    stream.flush()
}

/// Looks `path` up under `assets`, falling back to the built-in page for `/`.
pub fn static_file(path: &str, assets: Option<&Path>) -> Option<(&'static str, Vec<u8>)> {
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    if let Some(dir) = assets {
        if let Ok(bytes) = std::fs::read(dir.join(rel_path)) {
            return Some((content_type(rel), bytes));
        }
    }
    (rel == "index.html").then(|| ("text/html; charset=utf-8", INDEX_HTML.as_bytes().to_vec()))
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or_default() {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_lookup() {
        let (ctype, body) = static_file("/", None).unwrap();
        assert!(ctype.starts_with("text/html"));
        assert_eq!(body, INDEX_HTML.as_bytes());
        assert!(static_file("/app.js", None).is_none());
        assert!(static_file("/../etc/passwd", None).is_none());
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("app.js"), "x").unwrap();
        assert_eq!(static_file("/app.js?v=1".split('?').next().unwrap(), Some(dir.path())).unwrap().0, "text/javascript");
    }
}
