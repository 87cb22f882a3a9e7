//! In-memory observation buffer with a concurrent, non-blocking flusher.
//!
//! Rows live in fixed-capacity chunks so that an append never triggers a
//! large reallocation. A flush swaps the whole chunk list out under the lock
//! and does its I/O afterwards, so the recording path only ever waits for a
//! pointer swap.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::topology::NodeId;

/// Rows per chunk. 2 MiB of observations.
pub const CHUNK_ROWS: usize = 1 << 16;

/// One round-trip sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub round: u64,
    /// Wall-clock send time, microseconds since the Unix epoch.
    pub send_wall_ts_us: i64,
    /// Monotonic-clock round trip in microseconds.
    pub rtt_us: i64,
}

/// Upper bound on the in-memory footprint of one observation.
pub const OBSERVATION_BUDGET_BYTES: usize = 52;
const _: () = assert!(std::mem::size_of::<Observation>() <= OBSERVATION_BUDGET_BYTES);

/// A probe that went unanswered for longer than the expiry window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LossRecord {
    pub receiver: NodeId,
    pub round: u64,
    pub expired_at_wall_us: i64,
}

/// A fixed-layout CSV row.
pub trait CsvRow: Copy + Send + 'static {
    const HEADER: &'static str;
    fn write_row<W: Write>(&self, w: &mut W) -> io::Result<()>;
}

impl CsvRow for Observation {
    const HEADER: &'static str = "sender,receiver,round,send_wall_ts_us,rtt_us";

    fn write_row<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{}",
            self.sender, self.receiver, self.round, self.send_wall_ts_us, self.rtt_us
        )
    }
}

impl CsvRow for LossRecord {
    const HEADER: &'static str = "receiver,round,expired_at_wall_us";

    fn write_row<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{},{},{}", self.receiver, self.round, self.expired_at_wall_us)
    }
}

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("recorder is closed")]
    BufferClosed,
    #[error("sink failure: {0}")]
    SinkFailure(#[from] io::Error),
}

/// Append-only storage a buffer drains into.
pub trait Sink<T>: Send {
    fn append(&mut self, chunks: &[Vec<T>]) -> io::Result<()>;
}

/// Writes rows to a CSV file. The header is written when the file is created
/// so that a run without rows still leaves a valid file.
pub struct CsvFileSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvFileSink {
    pub fn create<T: CsvRow>(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", T::HEADER)?;
        out.flush()?;
        Ok(Self { path, out })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<T: CsvRow> Sink<T> for CsvFileSink {
    fn append(&mut self, chunks: &[Vec<T>]) -> io::Result<()> {
        for chunk in chunks {
            for row in chunk {
                row.write_row(&mut self.out)?;
            }
        }
        self.out.flush()
    }
}

/// Collects rows into memory; handy for tests.
#[derive(Debug)]
pub struct VecSink<T> {
    pub rows: Vec<T>,
}

impl<T> Default for VecSink<T> {
    fn default() -> Self {
        Self { rows: Vec::new() }
    }
}

impl<T: Copy + Send> Sink<T> for VecSink<T> {
    fn append(&mut self, chunks: &[Vec<T>]) -> io::Result<()> {
        for c in chunks {
            self.rows.extend_from_slice(c);
        }
        Ok(())
    }
}

#[derive(Default)]
struct Chunks<T> {
    full: Vec<Vec<T>>,
    current: Vec<T>,
}

impl<T> Chunks<T> {
    fn len(&self) -> usize {
        self.full.iter().map(Vec::len).sum::<usize>() + self.current.len()
    }
}

/// The node-side recording buffer.
pub struct RecorderBuffer<T> {
    chunks: Mutex<Chunks<T>>,
    recorded: AtomicU64,
    flushed: AtomicU64,
    closed: AtomicBool,
    max_record_ns: AtomicU64,
}

impl<T: Copy> Default for RecorderBuffer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Copy> RecorderBuffer<T> {
    pub fn new() -> Self {
        Self {
            chunks: Mutex::new(Chunks {
                full: Vec::new(),
                current: Vec::new(),
            }),
            recorded: AtomicU64::new(0),
            flushed: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            max_record_ns: AtomicU64::new(0),
        }
    }

    /// Appends one row. Never touches storage.
    pub fn record(&self, row: T) -> Result<(), RecorderError> {
        let started = Instant::now();
        if self.closed.load(Ordering::Acquire) {
            return Err(RecorderError::BufferClosed);
        }
        {
            let mut c = self.chunks.lock().unwrap();
            if c.current.len() == c.current.capacity() {
                let next = Vec::with_capacity(CHUNK_ROWS);
                let done = std::mem::replace(&mut c.current, next);
                if !done.is_empty() {
                    c.full.push(done);
                }
            }
            c.current.push(row);
        }
        self.recorded.fetch_add(1, Ordering::AcqRel);
        let ns = started.elapsed().as_nanos() as u64;
        self.max_record_ns.fetch_max(ns, Ordering::Relaxed);
        Ok(())
    }

    /// Takes everything buffered so far. Rows recorded afterwards stay put.
    fn take_prefix(&self) -> Vec<Vec<T>> {
        let mut c = self.chunks.lock().unwrap();
        let mut taken = std::mem::take(&mut c.full);
        if !c.current.is_empty() {
            taken.push(std::mem::take(&mut c.current));
        }
        taken
    }

    /// Puts a failed prefix back in front of rows recorded since.
    fn restore_prefix(&self, mut prefix: Vec<Vec<T>>) {
        let mut c = self.chunks.lock().unwrap();
        prefix.append(&mut c.full);
        c.full = prefix;
    }

    /// Drains the buffered prefix into `sink`. On failure the rows are kept
    /// for the next attempt.
    pub fn flush(&self, sink: &mut dyn Sink<T>) -> Result<u64, RecorderError> {
        let prefix = self.take_prefix();
        let n: usize = prefix.iter().map(Vec::len).sum();
        if n == 0 {
            return Ok(0);
        }
        match sink.append(&prefix) {
            Ok(()) => {
                self.flushed.fetch_add(n as u64, Ordering::AcqRel);
                Ok(n as u64)
            }
            Err(e) => {
                self.restore_prefix(prefix);
                Err(RecorderError::SinkFailure(e))
            }
        }
    }

    /// Rejects further records.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }

    pub fn recorded_count(&self) -> u64 {
        self.recorded.load(Ordering::Acquire)
    }

    pub fn flushed_count(&self) -> u64 {
        self.flushed.load(Ordering::Acquire)
    }

    pub fn in_buffer_count(&self) -> usize {
        self.chunks.lock().unwrap().len()
    }

    /// Longest single `record` call observed, in nanoseconds.
    pub fn max_record_ns(&self) -> u64 {
        self.max_record_ns.load(Ordering::Relaxed)
    }

    /// Heap bytes held by buffered rows, counted by capacity.
    pub fn memory_bytes(&self) -> usize {
        let c = self.chunks.lock().unwrap();
        let rows: usize = c.full.iter().map(Vec::capacity).sum::<usize>() + c.current.capacity();
        rows * std::mem::size_of::<T>() + c.full.capacity() * std::mem::size_of::<Vec<T>>()
    }

    /// Copies out the buffered rows in record order.
    pub fn snapshot(&self) -> Vec<T> {
        let c = self.chunks.lock().unwrap();
        let mut out = Vec::with_capacity(c.len());
        for chunk in &c.full {
            out.extend_from_slice(chunk);
        }
        out.extend_from_slice(&c.current);
        out
    }
}
