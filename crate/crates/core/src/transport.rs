//! Framed delivery of observations over TCP with bandwidth accounting.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, PoisonError};
use std::time::{Duration, Instant};

use crate::encoder::CompressedObservation;
use crate::error::{Error, Result};
use crate::wire::{self, FRAME_OVERHEAD};

/// Largest payload the receiver accepts before dropping the connection.
pub const MAX_PAYLOAD: usize = wire::message_len(1 << 20);

const RATE_WINDOW: Duration = Duration::from_secs(1);
const POLL: Duration = Duration::from_millis(20);

/// One row of the stats log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSample {
    /// Seconds since the stats were created.
    pub elapsed: f64,
    pub cumulative_bytes: u64,
    /// Bytes per second over the trailing window.
    pub rate: f64,
}

/// Counters for one side of a link.
#[derive(Debug, Clone)]
pub struct LinkStats {
    start: Instant,
    bytes: u64,
    frames: u64,
    decode_failures: u64,
    window: VecDeque<(Instant, usize)>,
    samples: Vec<RateSample>,
}

impl Default for LinkStats {
    fn default() -> Self {
        Self::new()
    }
}

impl LinkStats {
    pub fn new() -> Self {
        Self::starting_at(Instant::now())
    }

    pub fn starting_at(start: Instant) -> Self {
        Self {
            start,
            bytes: 0,
            frames: 0,
            decode_failures: 0,
            window: VecDeque::new(),
            samples: Vec::new(),
        }
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn decode_failures(&self) -> u64 {
        self.decode_failures
    }

    pub fn samples(&self) -> &[RateSample] {
        &self.samples
    }

    pub fn record_frame(&mut self, bytes: usize) {
        self.record_frame_at(Instant::now(), bytes);
    }

    pub fn record_frame_at(&mut self, now: Instant, bytes: usize) {
        self.bytes += bytes as u64;
        self.frames += 1;
        self.window.push_back((now, bytes));
        let rate = self.rate_at(now);
        self.samples.push(RateSample {
            elapsed: now.saturating_duration_since(self.start).as_secs_f64(),
            cumulative_bytes: self.bytes,
            rate,
        });
    }

    pub fn record_failure(&mut self) {
        self.decode_failures += 1;
    }

    /// Bytes per second over the window ending at `now`.
    pub fn rate_at(&mut self, now: Instant) -> f64 {
        while let Some(&(t, _)) = self.window.front() {
            if now.saturating_duration_since(t) >= RATE_WINDOW {
                self.window.pop_front();
            } else {
                break;
            }
        }
        let total: usize = self.window.iter().map(|&(_, b)| b).sum();
        total as f64 / RATE_WINDOW.as_secs_f64()
    }

    pub fn rate(&mut self) -> f64 {
        self.rate_at(Instant::now())
    }

    /// `timestamp,bytes,rate` rows, one per recorded frame.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "timestamp,bytes,rate")?;
        for s in &self.samples {
            writeln!(out, "{:.6},{},{:.3}", s.elapsed, s.cumulative_bytes, s.rate)?;
        }
        Ok(())
    }
}

/// Writes one framed observation. Stats are only touched once the frame is fully written.
pub fn send_observation<W: Write>(conn: &mut W, obs: &CompressedObservation, stats: &mut LinkStats) -> Result<usize> {
    let frame = wire::encode_frame(&wire::serialize(obs));
    let total = frame.len();
    let mut written = 0;
    while written < total {
        match conn.write(&frame[written..]) {
            Ok(0) => {
                return Err(Error::Transport {
                    written,
                    total,
                    source: std::io::Error::new(ErrorKind::WriteZero, "connection closed"),
                })
            }
            Ok(k) => written += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(Error::Transport {
                    written,
                    total,
                    source,
                })
            }
        }
    }
    conn.flush().map_err(|source| Error::Transport {
        written,
        total,
        source,
    })?;
    stats.record_frame(total);
    Ok(total)
}

/// Scan-side connection to a base.
pub struct Sender {
    stream: TcpStream,
    stats: LinkStats,
}

impl Sender {
    pub fn connect(endpoint: &str) -> Result<Self> {
        let stream = TcpStream::connect(endpoint)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            stats: LinkStats::new(),
        })
    }

    pub fn send(&mut self, obs: &CompressedObservation) -> Result<&LinkStats> {
        send_observation(&mut self.stream, obs, &mut self.stats)?;
        Ok(&self.stats)
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    /// Writes raw bytes, bypassing framing; for fault injection.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        self.stats.record_frame(bytes.len());
        Ok(())
    }
}

/// Base-side listener that serves one connection at a time.
pub struct BaseServer {
    listener: TcpListener,
    stats: Arc<Mutex<LinkStats>>,
}

impl BaseServer {
    pub fn bind(endpoint: &str) -> Result<Self> {
        let listener = TcpListener::bind(endpoint)?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            stats: Arc::new(Mutex::new(LinkStats::new())),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Shared handle for reading the counters while the server runs.
    pub fn stats(&self) -> Arc<Mutex<LinkStats>> {
        Arc::clone(&self.stats)
    }

    /// Accepts and drains connections until `shutdown` is set; returns the final stats.
    pub fn run<F: FnMut(CompressedObservation)>(&self, shutdown: &AtomicBool, mut sink: F) -> Result<LinkStats> {
        while !shutdown.load(Ordering::Relaxed) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("connection from {peer}");
                    if let Err(e) = self.serve_connection(stream, shutdown, &mut sink) {
                        log::warn!("connection from {peer} ended: {e}");
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(self.snapshot())
    }

    fn snapshot(&self) -> LinkStats {
        self.stats.lock().unwrap_or_else(PoisonError::into_inner).clone()
    }

    fn serve_connection<F: FnMut(CompressedObservation)>(
        &self,
        mut stream: TcpStream,
        shutdown: &AtomicBool,
        sink: &mut F,
    ) -> Result<()> {
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(POLL * 5))?;
        let mut buf: Vec<u8> = Vec::new();
        let mut chunk = vec![0u8; 64 * 1024];
        loop {
            if shutdown.load(Ordering::Relaxed) {
                return Ok(());
            }
            match stream.read(&mut chunk) {
                Ok(0) => {
                    if !buf.is_empty() {
                        self.lock().record_failure();
                        return Err(Error::Length {
                            expected: frame_len(&buf).unwrap_or(FRAME_OVERHEAD),
                            actual: buf.len(),
                        });
                    }
                    return Ok(());
                }
                Ok(k) => buf.extend_from_slice(&chunk[..k]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                    continue
                }
                Err(e) => return Err(e.into()),
            }
            let mut consumed = 0;
            while let Some(len) = frame_len(&buf[consumed..]) {
                if len > MAX_PAYLOAD + FRAME_OVERHEAD {
                    self.lock().record_failure();
                    return Err(Error::Format(format!("frame of {len} bytes exceeds limit")));
                }
                if buf.len() - consumed < len {
                    break;
                }
                let frame = &buf[consumed..consumed + len];
                consumed += len;
                let decoded = wire::decode_frame(frame).and_then(wire::deserialize);
                let mut stats = self.lock();
                stats.record_frame(len);
                match decoded {
                    Ok(obs) => {
                        drop(stats);
                        sink(obs);
                    }
                    Err(e) => {
                        log::warn!("dropping frame: {e}");
                        stats.record_failure();
                    }
                }
            }
            buf.drain(..consumed);
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LinkStats> {
        self.stats.lock().unwrap_or_else(PoisonError::into_inner)
    }
}

/// Total frame size announced by a buffer's length prefix.
fn frame_len(buf: &[u8]) -> Option<usize> {
    let prefix: [u8; 4] = buf.get(..4)?.try_into().ok()?;
    Some(u32::from_le_bytes(prefix) as usize + FRAME_OVERHEAD)
}

/// Binds `endpoint` and serves until `shutdown` is set.
pub fn serve_base<F: FnMut(CompressedObservation)>(endpoint: &str, shutdown: &AtomicBool, sink: F) -> Result<LinkStats> {
    BaseServer::bind(endpoint)?.run(shutdown, sink)
}
