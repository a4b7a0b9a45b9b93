use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use super::protocol::{ErrorCode, Response, Session, MAX_LINE_BYTES};
use crate::error::{Error, Result};

static SESSION_SEQ: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Where `<session>.json` controller snapshots are written when a
    /// session ends.
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    pub session: String,
    pub requests: usize,
    /// True if the peer said bye; false on EOF.
    pub clean_bye: bool,
    pub snapshot_path: Option<PathBuf>,
}

fn next_session_id() -> String {
    format!("session-{}", SESSION_SEQ.fetch_add(1, Ordering::Relaxed))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Serves one session over a line stream until `bye` or EOF.
pub fn run_session<R: BufRead, W: Write>(
    mut reader: R,
    mut writer: W,
    options: &ServeOptions,
) -> io::Result<SessionSummary> {
    let mut session = Session::new(next_session_id());
    let mut requests = 0;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        // Read at most one byte past the limit so oversized lines are detected
        // without buffering them whole.
        let n = io::Read::take(&mut reader, MAX_LINE_BYTES as u64 + 2).read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let complete = buf.last() == Some(&b'\n');
        let response = if !complete && n > MAX_LINE_BYTES {
            skip_line(&mut reader)?;
            Response::Error { code: ErrorCode::TooLong, message: format!("line exceeds {MAX_LINE_BYTES} bytes") }
        } else {
            let text = String::from_utf8_lossy(&buf);
            let line = text.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            session.respond(line)
        };
        requests += 1;
        writeln!(writer, "{}", response.to_line())?;
        writer.flush()?;
        if session.is_closed() {
            break;
        }
    }
    let clean_bye = session.is_closed();
    let snapshot_path = match (&options.snapshot_dir, session.controller()) {
        (Some(dir), Some(c)) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}.json", file_safe(session.id())));
            std::fs::write(&path, c.snapshot())?;
            Some(path)
        }
        _ => None,
    };
    Ok(SessionSummary { session: session.id().to_string(), requests, clean_bye, snapshot_path })
}

fn skip_line<R: BufRead>(reader: &mut R) -> io::Result<()> {
    loop {
        let available = reader.fill_buf()?;
        if available.is_empty() {
            return Ok(());
        }
        if let Some(p) = available.iter().position(|&b| b == b'\n') {
            reader.consume(p + 1);
            return Ok(());
        }
        let len = available.len();
        reader.consume(len);
    }
}

/// One session on stdin/stdout.
pub fn serve_stdio(options: &ServeOptions) -> io::Result<SessionSummary> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    run_session(stdin.lock(), stdout.lock(), options)
}

pub fn bind(port: u16) -> Result<TcpListener> {
    TcpListener::bind(("127.0.0.1", port)).map_err(|e| Error::io(format!("127.0.0.1:{port}"), e))
}

/// Accepts connections forever, one thread and one isolated session each.
pub fn serve_listener(listener: TcpListener, options: ServeOptions) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(_) => continue,
        };
        let options = options.clone();
        std::thread::spawn(move || {
            let _ = handle_connection(stream, &options);
        });
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, options: &ServeOptions) -> io::Result<SessionSummary> {
    // One small line per round trip; don't let Nagle hold responses back.
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    run_session(reader, stream, options)
}
