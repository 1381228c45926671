//! Loopback TCP backend. Each frame is an 8-byte little-endian byte count
//! followed by that many bytes of little-endian `f64` values. The first frame
//! on every connection is the handshake `[proto_version, rank, size, seq]`.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use super::{Backend, CommError, CommWorld, Link};

pub const PROTO_VERSION: u32 = 1;
/// Largest frame accepted from a peer, in bytes.
const MAX_FRAME_BYTES: u64 = 1 << 34;
const POLL: Duration = Duration::from_millis(2);

fn io_err(e: std::io::Error) -> CommError {
    CommError::Io(e.to_string())
}

struct TcpLink {
    rank: usize,
    streams: Vec<Option<TcpStream>>,
    scratch: Vec<u8>,
}

fn write_frame(stream: &mut TcpStream, frame: &[f64], scratch: &mut Vec<u8>) -> std::io::Result<()> {
    scratch.clear();
    scratch.extend_from_slice(&((frame.len() * 8) as u64).to_le_bytes());
    for v in frame {
        scratch.extend_from_slice(&v.to_le_bytes());
    }
    stream.write_all(scratch)
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<f64>> {
    let mut head = [0u8; 8];
    stream.read_exact(&mut head)?;
    let bytes = u64::from_le_bytes(head);
    if bytes % 8 != 0 || bytes > MAX_FRAME_BYTES {
        return Err(std::io::Error::new(ErrorKind::InvalidData, format!("bad frame length {bytes}")));
    }
    let mut body = vec![0u8; bytes as usize];
    stream.read_exact(&mut body)?;
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

impl TcpLink {
    fn classify(&self, peer: usize, e: std::io::Error) -> CommError {
        match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => {
                CommError::Timeout { rank: self.rank, peer, op: String::new() }
            }
            ErrorKind::UnexpectedEof
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::BrokenPipe => CommError::PeerDisconnected { rank: self.rank, peer },
            ErrorKind::InvalidData => CommError::ProtocolViolation(e.to_string()),
            _ => io_err(e),
        }
    }
}

impl Link for TcpLink {
    fn send(&mut self, dst: usize, frame: &[f64]) -> Result<(), CommError> {
        let stream = self.streams[dst].as_mut().expect("no self connection");
        let res = write_frame(stream, frame, &mut self.scratch);
        res.map_err(|e| self.classify(dst, e))
    }

    fn recv(&mut self, src: usize, deadline: Instant) -> Result<Vec<f64>, CommError> {
        let wait = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        let stream = self.streams[src].as_mut().expect("no self connection");
        let res = stream.set_read_timeout(Some(wait)).and_then(|_| read_frame(stream));
        res.map_err(|e| self.classify(src, e))
    }
}

fn hello(rank: usize, size: usize) -> [f64; 4] {
    [PROTO_VERSION as f64, rank as f64, size as f64, 0.0]
}

fn check_hello(frame: &[f64], size: usize, expect_rank: Option<usize>) -> Result<usize, CommError> {
    if frame.len() != 4 || frame[0] != PROTO_VERSION as f64 {
        return Err(CommError::ProtocolViolation(format!("handshake version mismatch: {frame:?}")));
    }
    if frame[2] != size as f64 {
        return Err(CommError::ProtocolViolation(format!("peer reports world size {}, expected {size}", frame[2])));
    }
    if frame[3] != 0.0 {
        return Err(CommError::ProtocolViolation("peer handshake at nonzero collective sequence".into()));
    }
    let peer = frame[1] as usize;
    if frame[1] < 0.0 || frame[1].fract() != 0.0 || peer >= size || expect_rank.is_some_and(|r| r != peer) {
        return Err(CommError::ProtocolViolation(format!("unexpected peer rank {}", frame[1])));
    }
    Ok(peer)
}

/// Joins the world as `rank`. Rank `r` dials every lower rank at `addrs` and
/// accepts the higher ranks on `listener`.
pub fn connect_tcp(
    rank: usize,
    size: usize,
    listener: TcpListener,
    addrs: &[SocketAddr],
    timeout: Duration,
) -> Result<CommWorld, CommError> {
    assert_eq!(addrs.len(), size, "one address per rank");
    let deadline = Instant::now() + timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
    let mut scratch = Vec::new();
    let timed_out = |peer| CommError::Timeout { rank, peer, op: "connect".into() };

    for peer in 0..rank {
        let mut stream = loop {
            match TcpStream::connect_timeout(&addrs[peer], Duration::from_millis(200)) {
                Ok(s) => break s,
                Err(_) if Instant::now() < deadline => std::thread::sleep(POLL),
                Err(_) => return Err(timed_out(peer)),
            }
        };
        stream.set_nodelay(true).map_err(io_err)?;
        write_frame(&mut stream, &hello(rank, size), &mut scratch).map_err(io_err)?;
        stream
            .set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(POLL)))
            .map_err(io_err)?;
        let reply = read_frame(&mut stream).map_err(|_| timed_out(peer))?;
        check_hello(&reply, size, Some(peer))?;
        streams[peer] = Some(stream);
    }

    listener.set_nonblocking(true).map_err(io_err)?;
    let mut pending = size - rank - 1;
    while pending > 0 {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false).map_err(io_err)?;
                stream.set_nodelay(true).map_err(io_err)?;
                stream
                    .set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(POLL)))
                    .map_err(io_err)?;
                let frame = read_frame(&mut stream).map_err(io_err)?;
                let peer = check_hello(&frame, size, None)?;
                if peer <= rank || streams[peer].is_some() {
                    return Err(CommError::ProtocolViolation(format!("rank {rank}: unexpected dial from {peer}")));
                }
                write_frame(&mut stream, &hello(rank, size), &mut scratch).map_err(io_err)?;
                streams[peer] = Some(stream);
                pending -= 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing = (rank + 1..size).find(|&p| streams[p].is_none()).unwrap_or(rank);
                    return Err(timed_out(missing));
                }
                std::thread::sleep(POLL);
            }
            Err(e) => return Err(io_err(e)),
        }
    }

    let link = TcpLink { rank, streams, scratch };
    Ok(CommWorld::new(rank, size, Backend::Tcp, Box::new(link), timeout))
}

/// Binds `size` listeners on ephemeral loopback ports.
pub fn loopback_addrs(size: usize) -> Result<(Vec<TcpListener>, Vec<SocketAddr>), CommError> {
    let listeners = (0..size)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    let addrs = listeners.iter().map(|l| l.local_addr()).collect::<Result<Vec<_>, _>>().map_err(io_err)?;
    Ok((listeners, addrs))
}

/// TCP counterpart of [`super::run_inproc`]: one thread per rank, connected
/// over loopback sockets.
pub fn run_tcp_threads<T, F>(size: usize, timeout: Duration, f: F) -> Result<Vec<T>, CommError>
where
    T: Send,
    F: Fn(CommWorld) -> T + Sync,
{
    let (listeners, addrs) = loopback_addrs(size)?;
    std::thread::scope(|s| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, l)| {
                let addrs = &addrs;
                let f = &f;
                s.spawn(move || connect_tcp(rank, size, l, addrs, timeout).map(f))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
    })
}
