use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use super::{Backend, CommError, CommWorld, Link};

struct ChannelLink {
    rank: usize,
    to: Vec<Option<Sender<Vec<f64>>>>,
    from: Vec<Option<Receiver<Vec<f64>>>>,
}

impl Link for ChannelLink {
    fn send(&mut self, dst: usize, frame: &[f64]) -> Result<(), CommError> {
        let tx = self.to[dst].as_ref().expect("no self channel");
        tx.send(frame.to_vec()).map_err(|_| CommError::PeerDisconnected { rank: self.rank, peer: dst })
    }

    fn recv(&mut self, src: usize, deadline: Instant) -> Result<Vec<f64>, CommError> {
        let rx = self.from[src].as_ref().expect("no self channel");
        let wait = deadline.saturating_duration_since(Instant::now());
        rx.recv_timeout(wait).map_err(|e| match e {
            RecvTimeoutError::Timeout => CommError::Timeout { rank: self.rank, peer: src, op: String::new() },
            RecvTimeoutError::Disconnected => CommError::PeerDisconnected { rank: self.rank, peer: src },
        })
    }
}

/// One connected handle per rank, wired with in-memory channels.
pub fn inproc_worlds(size: usize, timeout: Duration) -> Vec<CommWorld> {
    let mut to: Vec<Vec<Option<Sender<Vec<f64>>>>> = (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
    let mut from: Vec<Vec<Option<Receiver<Vec<f64>>>>> =
        (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
    for src in 0..size {
        for dst in (0..size).filter(|&d| d != src) {
            let (tx, rx) = channel();
            to[src][dst] = Some(tx);
            from[dst][src] = Some(rx);
        }
    }
    to.into_iter()
        .zip(from)
        .enumerate()
        .map(|(rank, (to, from))| {
            CommWorld::new(rank, size, Backend::Inproc, Box::new(ChannelLink { rank, to, from }), timeout)
        })
        .collect()
}

/// Runs `f` once per rank on its own thread and returns results in rank order.
pub fn run_inproc<T, F>(size: usize, timeout: Duration, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(CommWorld) -> T + Sync,
{
    let worlds = inproc_worlds(size, timeout);
    std::thread::scope(|s| {
        let handles: Vec<_> = worlds.into_iter().map(|w| s.spawn(|| f(w))).collect();
        handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
    })
}
