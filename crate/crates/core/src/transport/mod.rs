//! Rank-addressed collective communication.
//!
//! Every collective starts with a header exchange through rank 0 that checks
//! all ranks agree on the sequence number, the operation, the root and (where
//! it applies) the buffer length. Data then moves over point-to-point frames
//! of `f64` values. Reductions are applied in ascending rank order at the
//! root, so every backend yields bit-identical results.

mod inproc;
mod tcp;

pub use inproc::{inproc_worlds, run_inproc};
pub use tcp::{connect_tcp, loopback_addrs, run_tcp_threads, PROTO_VERSION};

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("rank {rank}: timed out waiting for rank {peer} during {op}")]
    Timeout { rank: usize, peer: usize, op: String },
    #[error("rank {rank}: peer {peer} disconnected")]
    PeerDisconnected { rank: usize, peer: usize },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("scatter expects {expected} equal-length chunks, root supplied {got}")]
    ChunkCountMismatch { expected: usize, got: usize },
    #[error("collective {op} called with unequal buffer lengths")]
    LengthMismatch { op: String },
    #[error("root {root} out of range for world of size {size}")]
    InvalidRoot { root: usize, size: usize },
    #[error("transport i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Inproc,
    Tcp,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Inproc => "inproc",
            Backend::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

impl ReduceOp {
    fn apply(self, acc: &mut [f64], other: &[f64]) {
        for (a, &b) in acc.iter_mut().zip(other) {
            *a = match self {
                ReduceOp::Sum => *a + b,
                ReduceOp::Max => a.max(b),
                ReduceOp::Min => a.min(b),
            };
        }
    }
}

/// Point-to-point frame delivery between ranks. Frames between one ordered
/// pair of ranks arrive in send order.
pub trait Link: Send {
    fn send(&mut self, dst: usize, frame: &[f64]) -> Result<(), CommError>;
    fn recv(&mut self, src: usize, deadline: Instant) -> Result<Vec<f64>, CommError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Broadcast = 1,
    Scatter = 2,
    Gather = 3,
    Reduce = 4,
    Barrier = 5,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Broadcast => "broadcast",
            Op::Scatter => "scatter",
            Op::Gather => "gather",
            Op::Reduce => "reduce",
            Op::Barrier => "barrier",
        }
    }
}

const VERDICT_OK: f64 = 0.0;
const VERDICT_PROTOCOL: f64 = 1.0;
const VERDICT_LENGTH: f64 = 2.0;
const VERDICT_CHUNKS: f64 = 3.0;
/// Header length field for ranks that do not know the payload size.
const LEN_UNKNOWN: f64 = -1.0;

/// One rank's handle on the communicator.
pub struct CommWorld {
    rank: usize,
    size: usize,
    backend: Backend,
    link: Box<dyn Link>,
    seq: u64,
    timeout: Duration,
}

impl fmt::Debug for CommWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommWorld")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("backend", &self.backend)
            .field("seq", &self.seq)
            .finish()
    }
}

impl CommWorld {
    pub fn new(rank: usize, size: usize, backend: Backend, link: Box<dyn Link>, timeout: Duration) -> Self {
        assert!(rank < size, "rank {rank} outside world of size {size}");
        Self { rank, size, backend, link, seq: 0, timeout }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Collectives completed so far.
    pub fn collective_seq(&self) -> u64 {
        self.seq
    }

    fn deadline(&self) -> Instant {
        Instant::now() + self.timeout
    }

    fn check_root(&self, root: usize) -> Result<(), CommError> {
        if root >= self.size {
            return Err(CommError::InvalidRoot { root, size: self.size });
        }
        Ok(())
    }

    fn recv_data(&mut self, src: usize, deadline: Instant, seq: u64) -> Result<Vec<f64>, CommError> {
        let mut frame = self.link.recv(src, deadline)?;
        if frame.first().copied() != Some(seq as f64) {
            return Err(CommError::ProtocolViolation(format!(
                "rank {}: frame from rank {src} is out of sequence (expected {seq}, got {:?})",
                self.rank,
                frame.first()
            )));
        }
        frame.remove(0);
        Ok(frame)
    }

    fn send_data(&mut self, dst: usize, seq: u64, payload: &[f64]) -> Result<(), CommError> {
        let mut frame = Vec::with_capacity(payload.len() + 1);
        frame.push(seq as f64);
        frame.extend_from_slice(payload);
        self.link.send(dst, &frame)
    }

    /// Agreement check through rank 0. `len` is compared across every rank
    /// that reports one; `flag_ok = false` flags a local precondition failure
    /// (wrong chunk count at the scatter root).
    fn handshake(&mut self, op: Op, root: usize, len: f64, flag_ok: bool) -> Result<u64, CommError> {
        let seq = self.seq;
        self.seq += 1;
        if self.size == 1 {
            if !flag_ok {
                return Err(self.verdict_error(VERDICT_CHUNKS, op));
            }
            return Ok(seq);
        }
        let deadline = self.deadline();
        let header = [seq as f64, op as u8 as f64, root as f64, len, if flag_ok { 1.0 } else { 0.0 }];
        if self.rank == 0 {
            let mut verdict = if flag_ok { VERDICT_OK } else { VERDICT_CHUNKS };
            let mut known_len = if len >= 0.0 { Some(len) } else { None };
            for src in 1..self.size {
                let h = self.link.recv(src, deadline).map_err(|e| self.annotate(e, op))?;
                if h.len() != header.len() || h[0] != header[0] || h[1] != header[1] || h[2] != header[2] {
                    verdict = VERDICT_PROTOCOL;
                    continue;
                }
                if h[4] == 0.0 && verdict == VERDICT_OK {
                    verdict = VERDICT_CHUNKS;
                }
                if h[3] >= 0.0 {
                    match known_len {
                        Some(l) if l != h[3] && verdict == VERDICT_OK => verdict = VERDICT_LENGTH,
                        None => known_len = Some(h[3]),
                        _ => {}
                    }
                }
            }
            for dst in 1..self.size {
                self.link.send(dst, &[seq as f64, verdict])?;
            }
            if verdict != VERDICT_OK {
                return Err(self.verdict_error(verdict, op));
            }
        } else {
            self.link.send(0, &header)?;
            let v = self.link.recv(0, deadline).map_err(|e| self.annotate(e, op))?;
            if v.len() != 2 || v[0] != seq as f64 {
                return Err(CommError::ProtocolViolation(format!(
                    "rank {}: malformed verdict for {} #{seq}",
                    self.rank,
                    op.name()
                )));
            }
            if v[1] != VERDICT_OK {
                return Err(self.verdict_error(v[1], op));
            }
        }
        Ok(seq)
    }

    fn annotate(&self, e: CommError, op: Op) -> CommError {
        match e {
            CommError::Timeout { rank, peer, .. } => CommError::Timeout { rank, peer, op: op.name().into() },
            other => other,
        }
    }

    fn verdict_error(&self, code: f64, op: Op) -> CommError {
        if code == VERDICT_LENGTH {
            CommError::LengthMismatch { op: op.name().into() }
        } else if code == VERDICT_CHUNKS {
            CommError::ChunkCountMismatch { expected: self.size, got: usize::MAX }
        } else {
            CommError::ProtocolViolation(format!(
                "ranks disagree on operation, root or sequence at {} #{}",
                op.name(),
                self.seq - 1
            ))
        }
    }

    /// Every rank returns the root's buffer. Non-root input is ignored.
    pub fn broadcast(&mut self, root: usize, buf: &[f64]) -> Result<Vec<f64>, CommError> {
        self.check_root(root)?;
        let len = if self.rank == root { buf.len() as f64 } else { LEN_UNKNOWN };
        let seq = self.handshake(Op::Broadcast, root, len, true)?;
        if self.rank == root {
            for dst in (0..self.size).filter(|&d| d != root) {
                self.send_data(dst, seq, buf)?;
            }
            Ok(buf.to_vec())
        } else {
            let deadline = self.deadline();
            self.recv_data(root, deadline, seq)
        }
    }

    /// Rank `r` receives `chunks[r]` from the root. Non-root input is ignored.
    pub fn scatter(&mut self, root: usize, chunks: &[Vec<f64>]) -> Result<Vec<f64>, CommError> {
        self.check_root(root)?;
        let (len, ok) = if self.rank == root {
            let ok = chunks.len() == self.size && chunks.iter().all(|c| c.len() == chunks[0].len());
            (chunks.first().map_or(0.0, |c| c.len() as f64), ok)
        } else {
            (LEN_UNKNOWN, true)
        };
        let seq = self.handshake(Op::Scatter, root, len, ok).map_err(|e| match e {
            CommError::ChunkCountMismatch { expected, .. } if self.rank == root => {
                CommError::ChunkCountMismatch { expected, got: chunks.len() }
            }
            other => other,
        })?;
        if self.rank == root {
            for dst in (0..self.size).filter(|&d| d != root) {
                self.send_data(dst, seq, &chunks[dst])?;
            }
            Ok(chunks[root].clone())
        } else {
            let deadline = self.deadline();
            self.recv_data(root, deadline, seq)
        }
    }

    fn gather_with(&mut self, op: Op, root: usize, buf: &[f64]) -> Result<Option<Vec<Vec<f64>>>, CommError> {
        self.check_root(root)?;
        let seq = self.handshake(op, root, buf.len() as f64, true)?;
        if self.rank == root {
            let deadline = self.deadline();
            let mut out = Vec::with_capacity(self.size);
            for src in 0..self.size {
                if src == root {
                    out.push(buf.to_vec());
                } else {
                    out.push(self.recv_data(src, deadline, seq)?);
                }
            }
            Ok(Some(out))
        } else {
            self.send_data(root, seq, buf)?;
            Ok(None)
        }
    }

    /// Buffers of all ranks in rank order, delivered at the root only.
    pub fn gather(&mut self, root: usize, buf: &[f64]) -> Result<Option<Vec<Vec<f64>>>, CommError> {
        self.gather_with(Op::Gather, root, buf)
    }

    /// Gather to rank 0 followed by a broadcast of the concatenation.
    pub fn allgather(&mut self, buf: &[f64]) -> Result<Vec<Vec<f64>>, CommError> {
        let len = buf.len();
        let gathered = self.gather(0, buf)?;
        let flat: Vec<f64> = gathered.map(|g| g.concat()).unwrap_or_default();
        let flat = self.broadcast(0, &flat)?;
        if len == 0 {
            return Ok(vec![Vec::new(); self.size]);
        }
        Ok(flat.chunks(len).map(<[f64]>::to_vec).collect())
    }

    /// Elementwise reduction in ascending rank order, delivered at the root.
    pub fn reduce(&mut self, root: usize, buf: &[f64], op: ReduceOp) -> Result<Option<Vec<f64>>, CommError> {
        let gathered = self.gather_with(Op::Reduce, root, buf)?;
        Ok(gathered.map(|parts| {
            let mut it = parts.into_iter();
            let mut acc = it.next().unwrap_or_default();
            for p in it {
                op.apply(&mut acc, &p);
            }
            acc
        }))
    }

    /// Reduce to rank 0 followed by a broadcast.
    pub fn allreduce(&mut self, buf: &[f64], op: ReduceOp) -> Result<Vec<f64>, CommError> {
        let reduced = self.reduce(0, buf, op)?.unwrap_or_default();
        self.broadcast(0, &reduced)
    }

    /// Returns once every rank has entered.
    pub fn barrier(&mut self) -> Result<(), CommError> {
        self.handshake(Op::Barrier, 0, LEN_UNKNOWN, true).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    const T: Duration = Duration::from_secs(10);

    #[test]
    fn broadcast_from_root() {
        let out = run_inproc(3, T, |mut w| {
            let buf = if w.rank() == 1 { vec![1.0, 2.0, 3.0] } else { vec![] };
            w.broadcast(1, &buf).unwrap()
        });
        assert!(out.iter().all(|v| v == &vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn single_rank_collectives_are_identity() {
        let out = run_inproc(1, T, |mut w| {
            let b = w.broadcast(0, &[4.0]).unwrap();
            let s = w.scatter(0, &[vec![5.0, 6.0]]).unwrap();
            let r = w.allreduce(&[7.0], ReduceOp::Sum).unwrap();
            let g = w.allgather(&[8.0]).unwrap();
            w.barrier().unwrap();
            (b, s, r, g)
        });
        assert_eq!(out[0], (vec![4.0], vec![5.0, 6.0], vec![7.0], vec![vec![8.0]]));
    }

    #[test]
    fn scatter_chunks_by_rank() {
        let out = run_inproc(2, T, |mut w| {
            let chunks = if w.rank() == 0 { vec![vec![1.0, 2.0], vec![3.0, 4.0]] } else { vec![] };
            w.scatter(0, &chunks).unwrap()
        });
        assert_eq!(out, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn scatter_with_wrong_chunk_count_fails_everywhere() {
        let out = run_inproc(2, T, |mut w| {
            let chunks = if w.rank() == 0 { vec![vec![1.0], vec![2.0], vec![3.0]] } else { vec![] };
            w.scatter(0, &chunks)
        });
        assert_eq!(out[0], Err(CommError::ChunkCountMismatch { expected: 2, got: 3 }));
        assert!(matches!(out[1], Err(CommError::ChunkCountMismatch { .. })));
    }

    #[test]
    fn gather_and_allgather_in_rank_order() {
        let out = run_inproc(3, T, |mut w| {
            let r = w.rank() as f64;
            let g = w.gather(0, &[r]).unwrap();
            let ag = w.allgather(&[r]).unwrap();
            (g, ag)
        });
        let expect = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(out[0].0.as_ref(), Some(&expect));
        assert!(out[1].0.is_none());
        assert!(out.iter().all(|(_, ag)| ag == &expect));
    }

    #[test]
    fn unequal_lengths_are_rejected() {
        let out = run_inproc(3, T, |mut w| {
            let buf = vec![0.0; 1 + (w.rank() == 2) as usize];
            w.allgather(&buf)
        });
        for r in out {
            assert!(matches!(r, Err(CommError::LengthMismatch { .. })));
        }
    }

    #[test]
    fn reductions() {
        let out = run_inproc(2, T, |mut w| {
            let buf = if w.rank() == 0 { [1.0, 2.0] } else { [3.0, 4.0] };
            let s = w.allreduce(&buf, ReduceOp::Sum).unwrap();
            let mbuf = if w.rank() == 0 { [1.0, 5.0] } else { [3.0, 2.0] };
            let mx = w.allreduce(&mbuf, ReduceOp::Max).unwrap();
            let mn = w.reduce(1, &mbuf, ReduceOp::Min).unwrap();
            (s, mx, mn)
        });
        assert_eq!(out[0].0, vec![4.0, 6.0]);
        assert_eq!(out[1].1, vec![3.0, 5.0]);
        assert_eq!(out[1].2, Some(vec![1.0, 2.0]));
        assert_eq!(out[0].2, None);
    }

    #[test]
    fn mismatched_roots_are_a_protocol_violation() {
        let out = run_inproc(2, T, |mut w| {
            let root = w.rank();
            w.broadcast(root, &[1.0])
        });
        for r in out {
            assert!(matches!(r, Err(CommError::ProtocolViolation(_))), "{r:?}");
        }
    }

    #[test]
    fn barrier_waits_for_last_rank() {
        let entered = AtomicUsize::new(0);
        let out = run_inproc(4, T, |mut w| {
            std::thread::sleep(Duration::from_millis(10 * w.rank() as u64));
            entered.fetch_add(1, Ordering::SeqCst);
            w.barrier().unwrap();
            entered.load(Ordering::SeqCst)
        });
        assert!(out.iter().all(|&seen| seen == 4));
    }

    #[test]
    fn barrier_times_out_on_absent_peer() {
        let out = run_inproc(2, Duration::from_millis(100), |mut w| {
            if w.rank() == 1 {
                std::thread::sleep(Duration::from_millis(400));
                return Ok(());
            }
            w.barrier()
        });
        assert!(matches!(out[0], Err(CommError::Timeout { peer: 1, .. })), "{:?}", out[0]);
    }

    #[test]
    fn invalid_root_is_rejected_locally() {
        let out = run_inproc(1, T, |mut w| w.broadcast(3, &[]));
        assert_eq!(out[0], Err(CommError::InvalidRoot { root: 3, size: 1 }));
    }
}
