//! In-process collective fabric between simulated ranks.
//!
//! Every collective is a bulk-synchronous exchange: each rank posts one part
//! per destination, waits at a rendezvous, reads the parts addressed to it and
//! waits again before the board may be reused. Reductions always add
//! contributions in ascending rank order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::tensor::{self, round_bf16_slice, Precision, Tensor};

/// Collective operations the model code needs. Axis arguments refer to the
/// local tensor.
pub trait Collectives {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    /// Concatenates every rank's tensor along `axis`.
    fn all_gather(&self, t: &Tensor, axis: usize) -> Result<Tensor>;
    /// Sums full-size tensors over ranks and returns this rank's slice along
    /// `axis`.
    fn reduce_scatter(&self, t: &Tensor, axis: usize) -> Result<Tensor>;
    /// Reshards a tensor split along `from` into one split along `to`.
    fn all_to_all(&self, t: &Tensor, from: usize, to: usize) -> Result<Tensor>;
    fn all_reduce_sum(&self, data: &mut [f32]) -> Result<()>;
}

/// Single-device collectives: every operation is the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct Local;

impl Collectives for Local {
    fn rank(&self) -> usize {
        0
    }
    fn size(&self) -> usize {
        1
    }
    fn all_gather(&self, t: &Tensor, _axis: usize) -> Result<Tensor> {
        Ok(t.clone())
    }
    fn reduce_scatter(&self, t: &Tensor, _axis: usize) -> Result<Tensor> {
        Ok(t.clone())
    }
    fn all_to_all(&self, t: &Tensor, _from: usize, _to: usize) -> Result<Tensor> {
        Ok(t.clone())
    }
    fn all_reduce_sum(&self, _data: &mut [f32]) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllToAll,
    AllReduce,
}

impl CollectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::AllReduce => "all_reduce",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CollectiveStats {
    pub calls: u64,
    pub bytes: u64,
    pub wall_s: f64,
}

/// Per-rank counters, keyed by collective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommStats {
    pub by_kind: BTreeMap<CollectiveKind, CollectiveStats>,
}

impl CommStats {
    pub fn bytes_sent(&self) -> u64 {
        self.by_kind.values().map(|s| s.bytes).sum()
    }

    pub fn calls(&self) -> u64 {
        self.by_kind.values().map(|s| s.calls).sum()
    }

    pub fn get(&self, kind: CollectiveKind) -> CollectiveStats {
        self.by_kind.get(&kind).copied().unwrap_or_default()
    }

    fn record(&mut self, kind: CollectiveKind, bytes: u64, wall: Duration) {
        let e = self.by_kind.entry(kind).or_default();
        e.calls += 1;
        e.bytes += bytes;
        e.wall_s += wall.as_secs_f64();
    }

    pub fn merge(&mut self, other: &CommStats) {
        for (k, s) in &other.by_kind {
            let e = self.by_kind.entry(*k).or_default();
            e.calls += s.calls;
            e.bytes += s.bytes;
            e.wall_s += s.wall_s;
        }
    }
}

/// CSV table `collective,calls,bytes,wall_s`.
pub fn comm_report(stats: &CommStats) -> String {
    let mut out = String::from("collective,calls,bytes,wall_s\n");
    for (k, s) in &stats.by_kind {
        out.push_str(&format!("{},{},{},{:.9}\n", k.as_str(), s.calls, s.bytes, s.wall_s));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
struct Tag {
    kind: CollectiveKind,
    meta: Vec<usize>,
}

struct Post {
    tag: Tag,
    parts: Vec<Vec<f32>>,
}

struct BarrierState {
    waiting: usize,
    generation: u64,
}

struct Board {
    posts: Vec<Option<Post>>,
}

/// Shared rendezvous and message board for `n` ranks.
pub struct Fabric {
    n: usize,
    wire: Precision,
    timeout: Duration,
    barrier: Mutex<BarrierState>,
    cv: Condvar,
    board: Mutex<Board>,
    aborted: Mutex<Option<String>>,
}

impl Fabric {
    pub fn new(n: usize, wire: Precision, timeout: Duration) -> Result<Arc<Self>> {
        if n == 0 {
            return Err(Error::config("dap", "at least one rank required"));
        }
        Ok(Arc::new(Self {
            n,
            wire,
            timeout,
            barrier: Mutex::new(BarrierState {
                waiting: 0,
                generation: 0,
            }),
            cv: Condvar::new(),
            board: Mutex::new(Board {
                posts: (0..n).map(|_| None).collect(),
            }),
            aborted: Mutex::new(None),
        }))
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn wire(&self) -> Precision {
        self.wire
    }

    /// Wakes every waiting rank with an error.
    pub fn abort(&self, reason: impl Into<String>) {
        let mut a = self.aborted.lock().unwrap_or_else(|e| e.into_inner());
        if a.is_none() {
            *a = Some(reason.into());
        }
        drop(a);
        let _g = self.barrier.lock().unwrap_or_else(|e| e.into_inner());
        self.cv.notify_all();
    }

    fn check_aborted(&self) -> Result<()> {
        match &*self.aborted.lock().unwrap_or_else(|e| e.into_inner()) {
            Some(r) => Err(Error::Protocol(format!("peer aborted: {r}"))),
            None => Ok(()),
        }
    }

    fn wait(&self) -> Result<()> {
        self.check_aborted()?;
        let mut st = self.barrier.lock().unwrap_or_else(|e| e.into_inner());
        let gen = st.generation;
        st.waiting += 1;
        if st.waiting == self.n {
            st.waiting = 0;
            st.generation += 1;
            self.cv.notify_all();
            return Ok(());
        }
        let deadline = Instant::now() + self.timeout;
        while st.generation == gen {
            self.check_aborted()?;
            let now = Instant::now();
            if now >= deadline {
                drop(st);
                self.abort("rendezvous timeout");
                return Err(Error::Timeout(self.timeout));
            }
            st = self
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        Ok(())
    }

    /// Posts `parts` (one per destination) and returns the parts addressed to
    /// `rank`, in source-rank order.
    fn exchange(&self, rank: usize, tag: Tag, mut parts: Vec<Vec<f32>>) -> Result<Vec<Vec<f32>>> {
        debug_assert_eq!(parts.len(), self.n);
        if self.wire == Precision::Bf16E {
            for (dst, p) in parts.iter_mut().enumerate() {
                if dst != rank {
                    round_bf16_slice(p);
                }
            }
        }
        self.board.lock().unwrap_or_else(|e| e.into_inner()).posts[rank] = Some(Post {
            tag: tag.clone(),
            parts,
        });
        self.wait()?;
        let received = {
            let board = self.board.lock().unwrap_or_else(|e| e.into_inner());
            let mut out = Vec::with_capacity(self.n);
            for (src, post) in board.posts.iter().enumerate() {
                let post = post
                    .as_ref()
                    .ok_or_else(|| Error::Protocol(format!("rank {src} posted nothing")))?;
                if post.tag != tag {
                    return Err(Error::Protocol(format!(
                        "rank {rank} issued {:?} {:?} but rank {src} issued {:?} {:?}",
                        tag.kind, tag.meta, post.tag.kind, post.tag.meta
                    )));
                }
                out.push(post.parts[rank].clone());
            }
            out
        };
        self.wait()?;
        Ok(received)
    }
}

/// Bytes per element on the wire.
pub fn wire_bytes(wire: Precision) -> usize {
    match wire {
        Precision::F32 => 4,
        Precision::Bf16E => 2,
    }
}

/// One rank's endpoint on a [`Fabric`].
pub struct RankComm {
    rank: usize,
    fabric: Arc<Fabric>,
    stats: RefCell<CommStats>,
}

impl RankComm {
    pub fn new(rank: usize, fabric: Arc<Fabric>) -> Self {
        Self {
            rank,
            fabric,
            stats: RefCell::new(CommStats::default()),
        }
    }

    pub fn stats(&self) -> CommStats {
        self.stats.borrow().clone()
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    fn bytes_to_others(&self, parts: &[Vec<f32>]) -> u64 {
        let elem = wire_bytes(self.fabric.wire);
        parts
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != self.rank)
            .map(|(_, p)| (p.len() * elem) as u64)
            .sum()
    }

    fn run(&self, kind: CollectiveKind, meta: Vec<usize>, parts: Vec<Vec<f32>>) -> Result<Vec<Vec<f32>>> {
        let t0 = Instant::now();
        let bytes = self.bytes_to_others(&parts);
        let out = self.fabric.exchange(self.rank, Tag { kind, meta }, parts)?;
        self.stats.borrow_mut().record(kind, bytes, t0.elapsed());
        Ok(out)
    }
}

fn check_axis(t: &Tensor, axis: usize, op: &'static str) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape())));
    }
    Ok(())
}

fn split_even(t: &Tensor, axis: usize, n: usize, op: &'static str) -> Result<Vec<Tensor>> {
    let e = t.dim(axis);
    if e % n != 0 {
        return Err(Error::shape(op, format!("extent {e} of axis {axis} not divisible by {n}")));
    }
    let c = e / n;
    (0..n).map(|i| tensor::narrow(t, axis, i * c, c)).collect()
}

fn with_shape(shape: &[usize], data: Vec<f32>, p: Precision) -> Result<Tensor> {
    Ok(Tensor::new(shape, data)?.with_precision(p))
}

/// `[lo, hi)` bounds of chunk `i` when `len` elements are split into `n`.
fn chunk_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

impl Collectives for RankComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.fabric.n
    }

    fn all_gather(&self, t: &Tensor, axis: usize) -> Result<Tensor> {
        check_axis(t, axis, "all_gather")?;
        let n = self.size();
        let mut meta = t.shape().to_vec();
        meta.push(axis);
        let parts = vec![t.data().to_vec(); n];
        let recv = self.run(CollectiveKind::AllGather, meta, parts)?;
        let pieces: Vec<Tensor> = recv
            .into_iter()
            .map(|d| with_shape(t.shape(), d, t.precision()))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = pieces.iter().collect();
        tensor::concat(&refs, axis)
    }

    fn reduce_scatter(&self, t: &Tensor, axis: usize) -> Result<Tensor> {
        check_axis(t, axis, "reduce_scatter")?;
        let n = self.size();
        let chunks = split_even(t, axis, n, "reduce_scatter")?;
        let out_shape = chunks[0].shape().to_vec();
        let mut meta = t.shape().to_vec();
        meta.push(axis);
        let parts = chunks.into_iter().map(Tensor::into_data).collect();
        let recv = self.run(CollectiveKind::ReduceScatter, meta, parts)?;
        let mut acc = vec![0.0f32; recv[0].len()];
        for part in &recv {
            for (a, v) in acc.iter_mut().zip(part) {
                *a += v;
            }
        }
        with_shape(&out_shape, acc, t.precision())
    }

    fn all_to_all(&self, t: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        check_axis(t, from, "all_to_all")?;
        check_axis(t, to, "all_to_all")?;
        if from == to {
            return Ok(t.clone());
        }
        let n = self.size();
        let chunks = split_even(t, to, n, "all_to_all")?;
        let chunk_shape = chunks[0].shape().to_vec();
        let mut meta = t.shape().to_vec();
        meta.extend([from, to]);
        let parts = chunks.into_iter().map(Tensor::into_data).collect();
        let recv = self.run(CollectiveKind::AllToAll, meta, parts)?;
        let pieces: Vec<Tensor> = recv
            .into_iter()
            .map(|d| with_shape(&chunk_shape, d, t.precision()))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = pieces.iter().collect();
        tensor::concat(&refs, from)
    }

    fn all_reduce_sum(&self, data: &mut [f32]) -> Result<()> {
        let n = self.size();
        let len = data.len();
        let t0 = Instant::now();
        // reduce-scatter over flat chunks, then all-gather of the reduced chunks
        let parts: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let (lo, hi) = chunk_bounds(len, n, i);
                data[lo..hi].to_vec()
            })
            .collect();
        let mut bytes = self.bytes_to_others(&parts);
        let recv = self
            .fabric
            .exchange(self.rank, Tag { kind: CollectiveKind::AllReduce, meta: vec![len, 0] }, parts)?;
        let mut mine = vec![0.0f32; recv[0].len()];
        for part in &recv {
            for (a, v) in mine.iter_mut().zip(part) {
                *a += v;
            }
        }
        let parts = vec![mine; n];
        bytes += self.bytes_to_others(&parts);
        let recv = self
            .fabric
            .exchange(self.rank, Tag { kind: CollectiveKind::AllReduce, meta: vec![len, 1] }, parts)?;
        for (i, part) in recv.into_iter().enumerate() {
            let (lo, hi) = chunk_bounds(len, n, i);
            data[lo..hi].copy_from_slice(&part);
        }
        self.stats
            .borrow_mut()
            .record(CollectiveKind::AllReduce, bytes, t0.elapsed());
        Ok(())
    }
}

/// Default rendezvous timeout for [`run_ranks`].
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Runs `f` once per rank on its own thread. If any rank fails, the fabric is
/// aborted so the others return instead of waiting forever; the first error
/// (by rank) is returned.
pub fn run_ranks<T, F>(n: usize, wire: Precision, f: F) -> Result<Vec<(T, CommStats)>>
where
    T: Send,
    F: Fn(&RankComm) -> Result<T> + Sync,
{
    let fabric = Fabric::new(n, wire, DEFAULT_TIMEOUT)?;
    let results: Vec<Result<(T, CommStats)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                let fabric = fabric.clone();
                let f = &f;
                s.spawn(move || {
                    let comm = RankComm::new(rank, fabric.clone());
                    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&comm)));
                    match r {
                        Ok(Ok(v)) => Ok((v, comm.stats())),
                        Ok(Err(e)) => {
                            fabric.abort(format!("rank {rank}: {e}"));
                            Err(e)
                        }
                        Err(_) => {
                            fabric.abort(format!("rank {rank} panicked"));
                            Err(Error::Protocol(format!("rank {rank} panicked")))
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("rank thread lost".into()))))
            .collect()
    });
    // Prefer the root cause over "peer aborted" echoes.
    let mut first_err = None;
    let mut out = Vec::with_capacity(n);
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                let echo = matches!(&e, Error::Protocol(m) if m.starts_with("peer aborted"));
                match (&first_err, echo) {
                    (None, _) => first_err = Some(e),
                    (Some(Error::Protocol(m)), false) if m.starts_with("peer aborted") => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
