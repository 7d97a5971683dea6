//! Split deployment: the edge runs the backbone and quantizer and emits
//! token frames, the cloud decodes frames and runs the transformer.
//!
//! On a byte stream the edge writes bare frames back to back (each frame's
//! header gives its length) and the cloud answers every frame with one
//! prediction record: the connection-local frame number as `u64` LE, then
//! `N_q` class bytes. A class byte is the activity id, [`EMPTY_CLASS`] for ∅,
//! or [`REJECTED_CLASS`] on every query when the frame was refused.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{info, warn};

use crate::csi::ActivityId;
use crate::error::{Error, ProtocolError, Result};
use crate::metrics::{standardize, ActivityCounts};
use crate::model::{predicted_sets, AmarModel};
use crate::rvq::{
    deserialize_indices, log2_codebook, parse_frame_header, rvq_decode, rvq_encode,
    serialize_indices, FRAME_HEADER_LEN,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class byte for a query that predicts ∅.
pub const EMPTY_CLASS: u8 = 255;
/// Class byte on every query of a record answering a refused frame.
pub const REJECTED_CLASS: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandwidthReport {
    /// `ℓ V log₂K`.
    pub quantized_bits: u64,
    /// `ℓ d float_bits`.
    pub baseline_bits: u64,
    /// `1 − quantized / baseline`.
    pub reduction: f64,
}

impl fmt::Display for BandwidthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} bits per sample quantized vs {} unquantized, {:.1}% reduction",
            self.quantized_bits,
            self.baseline_bits,
            100.0 * self.reduction
        )
    }
}

pub fn bandwidth_report(
    len: usize,
    d: usize,
    layers: usize,
    k: usize,
    float_bits: usize,
) -> Result<BandwidthReport> {
    let log2k = log2_codebook(k)? as u64;
    let quantized_bits = len as u64 * layers as u64 * log2k;
    let baseline_bits = (len * d * float_bits) as u64;
    if baseline_bits == 0 {
        return Err(Error::Invalid("empty unquantized baseline".into()));
    }
    Ok(BandwidthReport {
        quantized_bits,
        baseline_bits,
        reduction: 1.0 - quantized_bits as f64 / baseline_bits as f64,
    })
}

/// Codebook geometry both roles must agree on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub len: usize,
    pub layers: usize,
    pub log2k: u8,
}

impl Geometry {
    fn of<S: Scalar>(model: &AmarModel<S>, time_len: usize) -> Result<Self> {
        let cfg = &model.config;
        let len = cfg.backbone.output_len(time_len);
        if len == 0 {
            return Err(Error::Config(format!(
                "T = {time_len} leaves no tokens after the backbone"
            )));
        }
        let codebooks = model.codebooks()?;
        let (k, d) = (cfg.rvq.codebook_size, cfg.backbone.d());
        if let Some(cb) = codebooks.iter().find(|c| c.shape() != [k, d]) {
            return Err(Error::Checkpoint(format!(
                "codebook {:?} does not match K = {k}, d = {d}",
                cb.shape()
            )));
        }
        Ok(Geometry {
            len,
            layers: cfg.rvq.layers,
            log2k: log2_codebook(k)?,
        })
    }

    fn check(&self, len: usize, layers: usize, log2k: u8) -> Result<()> {
        if (len, layers, log2k) != (self.len, self.layers, self.log2k) {
            return Err(ProtocolError::Geometry {
                len,
                layers,
                log2k,
                exp_len: self.len,
                exp_layers: self.layers,
                exp_log2k: self.log2k,
            }
            .into());
        }
        Ok(())
    }
}

/// Edge role: amplitudes in, frame bytes out.
pub struct Edge<S> {
    model: AmarModel<S>,
    codebooks: Vec<Tensor<S>>,
    time_len: usize,
    geometry: Geometry,
}

impl<S: Scalar> Edge<S> {
    /// Rejects models whose codebooks disagree with their configuration.
    pub fn new(model: AmarModel<S>, time_len: usize) -> Result<Self> {
        let geometry = Geometry::of(&model, time_len)?;
        let codebooks = model.codebooks()?;
        Ok(Edge {
            model,
            codebooks,
            time_len,
            geometry,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn frame_len(&self) -> usize {
        let g = self.geometry;
        crate::rvq::frame_len(g.len, g.layers, g.log2k)
    }

    /// Quantized indices `[V][ℓ]` of one `[T, C]` sample.
    pub fn indices(&self, amplitude: &Tensor<f32>) -> Result<Vec<Vec<u16>>> {
        let c = self.model.config.backbone.in_channels;
        if amplitude.shape() != [self.time_len, c] {
            return Err(Error::shape(
                "edge_process",
                format!(
                    "sample {:?}, deployment expects [{}, {c}]",
                    amplitude.shape(),
                    self.time_len
                ),
            ));
        }
        let x = AmarModel::<S>::batch_input(&[amplitude])?;
        let z = self.model.features(&x)?;
        let rows = z.reshape(&[z.shape()[1], z.shape()[2]])?;
        let enc = rvq_encode(&rows, &self.codebooks, |_, _| false)?;
        Ok(enc.dense_indices().expect("no position dropped"))
    }

    pub fn process(&self, amplitude: &Tensor<f32>) -> Result<Vec<u8>> {
        serialize_indices(&self.indices(amplitude)?, self.geometry.log2k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudPrediction {
    /// Final-layer argmax per query; `None` is ∅.
    pub queries: Vec<Option<ActivityId>>,
    pub counts: ActivityCounts,
}

impl CloudPrediction {
    /// Predicted activities with ∅ rows dropped.
    pub fn set(&self) -> Vec<ActivityId> {
        self.queries.iter().flatten().copied().collect()
    }

    pub fn occupancy(&self) -> usize {
        self.queries.iter().flatten().count()
    }
}

/// Cloud role: frame bytes in, predictions out.
pub struct Cloud<S> {
    model: AmarModel<S>,
    codebooks: Vec<Tensor<S>>,
    geometry: Geometry,
}

impl<S: Scalar> Cloud<S> {
    pub fn new(model: AmarModel<S>, time_len: usize) -> Result<Self> {
        let geometry = Geometry::of(&model, time_len)?;
        let codebooks = model.codebooks()?;
        Ok(Cloud {
            model,
            codebooks,
            geometry,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn queries(&self) -> usize {
        self.model.config.transformer.queries
    }

    /// Reconstructed tokens `B`, `[1, ℓ, d]`.
    pub fn decode(&self, frame: &[u8]) -> Result<Tensor<S>> {
        let h = parse_frame_header(frame)?;
        self.geometry.check(h.len, h.layers, h.log2k)?;
        let tf = deserialize_indices(frame)?;
        let b = rvq_decode(&tf.indices, &self.codebooks)?;
        let d = b.shape()[1];
        b.reshape(&[1, tf.len, d])
    }

    /// Final decoder layer logits, `[1, N_q, N_act + 1]`.
    pub fn logits(&self, frame: &[u8]) -> Result<Tensor<S>> {
        let b = self.decode(frame)?;
        let mut all = self.model.head_logits(&b)?;
        Ok(all.pop().expect("at least one decoder layer"))
    }

    pub fn process(&self, frame: &[u8]) -> Result<CloudPrediction> {
        let logits = self.logits(frame)?;
        let queries = predicted_sets(&logits).remove(0);
        let counts = standardize(&queries, self.model.config.transformer.n_act)?;
        Ok(CloudPrediction { queries, counts })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub seq: u64,
    /// One byte per query: activity id, [`EMPTY_CLASS`] or [`REJECTED_CLASS`].
    pub classes: Vec<u8>,
}

impl PredictionRecord {
    pub fn from_queries(seq: u64, queries: &[Option<ActivityId>]) -> Self {
        PredictionRecord {
            seq,
            classes: queries.iter().map(|q| q.unwrap_or(EMPTY_CLASS)).collect(),
        }
    }

    pub fn rejected(seq: u64, n_q: usize) -> Self {
        PredictionRecord {
            seq,
            classes: vec![REJECTED_CLASS; n_q],
        }
    }

    pub fn is_rejected(&self) -> bool {
        self.classes.iter().all(|&c| c == REJECTED_CLASS)
    }

    /// `None` for rejected records.
    pub fn queries(&self) -> Option<Vec<Option<ActivityId>>> {
        (!self.is_rejected()).then(|| {
            self.classes
                .iter()
                .map(|&c| (c != EMPTY_CLASS).then_some(c))
                .collect()
        })
    }

    pub fn encoded_len(n_q: usize) -> usize {
        8 + n_q
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.classes.len()));
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.classes);
        out
    }

    pub fn decode(bytes: &[u8], n_q: usize) -> Result<Self> {
        if bytes.len() != Self::encoded_len(n_q) {
            return Err(ProtocolError::BadRecord(format!(
                "{} bytes, expected {}",
                bytes.len(),
                Self::encoded_len(n_q)
            ))
            .into());
        }
        Ok(PredictionRecord {
            seq: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            classes: bytes[8..].to_vec(),
        })
    }
}

/// Byte and frame counts for one side of a link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub frames: u64,
    pub frame_bytes: u64,
    pub record_bytes: u64,
    pub rejected: u64,
}

impl LinkStats {
    fn merge(&mut self, other: &LinkStats) {
        self.frames += other.frames;
        self.frame_bytes += other.frame_bytes;
        self.record_bytes += other.record_bytes;
        self.rejected += other.rejected;
    }
}

/// Fills `buf`, returning how many bytes arrived before end of stream.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Reads one frame; `Ok(None)` on a clean end of stream at a frame boundary.
fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut frame = vec![0u8; FRAME_HEADER_LEN];
    let got = read_full(r, &mut frame)?;
    if got == 0 {
        return Ok(None);
    }
    if got < FRAME_HEADER_LEN {
        return Err(ProtocolError::PartialFrame {
            got,
            expected: FRAME_HEADER_LEN,
        }
        .into());
    }
    let total = parse_frame_header(&frame)?.frame_len();
    frame.resize(total, 0);
    let more = read_full(r, &mut frame[FRAME_HEADER_LEN..])?;
    if FRAME_HEADER_LEN + more < total {
        return Err(ProtocolError::PartialFrame {
            got: FRAME_HEADER_LEN + more,
            expected: total,
        }
        .into());
    }
    Ok(Some(frame))
}

/// Answers frames from `conn` until the stream ends. Refused frames get a
/// rejected record and the connection continues; an unreadable header or a
/// stream that closes mid-frame ends it with an error.
pub fn serve_connection<S: Scalar, C: Read + Write>(
    cloud: &Cloud<S>,
    mut conn: C,
) -> Result<LinkStats> {
    let mut stats = LinkStats::default();
    let n_q = cloud.queries();
    let outcome = loop {
        let frame = match read_frame(&mut conn) {
            Ok(Some(f)) => f,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        let seq = stats.frames;
        stats.frames += 1;
        stats.frame_bytes += frame.len() as u64;
        let record = match cloud.process(&frame) {
            Ok(p) => PredictionRecord::from_queries(seq, &p.queries),
            Err(e @ Error::Protocol(_)) => {
                warn!("frame {seq} rejected: {e}");
                stats.rejected += 1;
                PredictionRecord::rejected(seq, n_q)
            }
            Err(e) => break Err(e),
        };
        let bytes = record.encode();
        if let Err(e) = conn.write_all(&bytes).and_then(|_| conn.flush()) {
            break Err(Error::Transport(format!("reply to frame {seq}: {e}")));
        }
        stats.record_bytes += bytes.len() as u64;
    };
    info!(
        "cloud connection closed: {} frames, {} frame bytes in, {} record bytes out, {} rejected",
        stats.frames, stats.frame_bytes, stats.record_bytes, stats.rejected
    );
    outcome.map(|_| stats)
}

/// Accepts TCP edges, one thread per connection, until `connections`
/// connections have finished (forever when `None`). Connection failures are
/// logged and do not stop the server.
pub fn serve_tcp<S: Scalar>(
    listener: &TcpListener,
    cloud: Arc<Cloud<S>>,
    connections: Option<usize>,
) -> Result<LinkStats> {
    let mut handles = Vec::new();
    for stream in listener.incoming() {
        let stream = stream?;
        let peer = stream
            .peer_addr()
            .map_or_else(|_| "?".to_string(), |a| a.to_string());
        info!("edge connected from {peer}");
        let cloud = Arc::clone(&cloud);
        handles.push(thread::spawn(move || {
            serve_connection(&cloud, stream).inspect_err(|e| warn!("{peer}: {e}"))
        }));
        if connections.is_some_and(|n| handles.len() >= n) {
            break;
        }
    }
    let mut total = LinkStats::default();
    for h in handles {
        if let Ok(Ok(s)) = h.join() {
            total.merge(&s);
        }
    }
    Ok(total)
}

/// Sends frames in order over connections from `connect`, one record per
/// frame. When a connection fails the unanswered frame is resent on a fresh
/// one; at most `reconnects` fresh connections are made. Returned records
/// carry the index of their frame in `frames`.
pub fn stream_frames<C, F>(
    mut connect: F,
    frames: &[Vec<u8>],
    n_q: usize,
    reconnects: usize,
) -> Result<(Vec<PredictionRecord>, LinkStats)>
where
    C: Read + Write,
    F: FnMut() -> io::Result<C>,
{
    let mut records = Vec::with_capacity(frames.len());
    let mut stats = LinkStats::default();
    let mut attempts = 0;
    let mut next = 0;
    while next < frames.len() {
        let mut conn = connect().map_err(|e| Error::Transport(format!("connect: {e}")))?;
        let mut local = 0u64;
        let failure = loop {
            let Some(frame) = frames.get(next) else {
                break None;
            };
            if let Err(e) = conn.write_all(frame).and_then(|_| conn.flush()) {
                break Some(e.to_string());
            }
            let mut buf = vec![0u8; PredictionRecord::encoded_len(n_q)];
            match read_full(&mut conn, &mut buf) {
                Ok(n) if n == buf.len() => {}
                Ok(n) => break Some(format!("record cut after {n} bytes")),
                Err(e) => break Some(e.to_string()),
            }
            let mut rec = PredictionRecord::decode(&buf, n_q)?;
            if rec.seq != local {
                return Err(ProtocolError::BadRecord(format!(
                    "record for frame {} while waiting for {local}",
                    rec.seq
                ))
                .into());
            }
            stats.frames += 1;
            stats.frame_bytes += frame.len() as u64;
            stats.record_bytes += buf.len() as u64;
            stats.rejected += rec.is_rejected() as u64;
            rec.seq = next as u64;
            records.push(rec);
            local += 1;
            next += 1;
        };
        if let Some(reason) = failure {
            attempts += 1;
            if attempts > reconnects {
                return Err(Error::Transport(format!(
                    "link lost at frame {next}: {reason}"
                )));
            }
            warn!("link lost at frame {next} ({reason}), reconnecting");
        }
    }
    info!(
        "edge sent {} frames ({} bytes), received {} record bytes",
        stats.frames, stats.frame_bytes, stats.record_bytes
    );
    Ok((records, stats))
}

/// Retries `TcpStream::connect` for up to `wait` before giving up.
pub fn connect_tcp(addr: &str, wait: Duration) -> io::Result<TcpStream> {
    let start = std::time::Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if start.elapsed() >= wait => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// One end of an in-process byte stream.
pub struct PipeEnd {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    pending: VecDeque<u8>,
}

/// Two connected in-process ends; dropping one ends the other's stream.
pub fn pipe() -> (PipeEnd, PipeEnd) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        PipeEnd {
            tx: a_tx,
            rx: a_rx,
            pending: VecDeque::new(),
        },
        PipeEnd {
            tx: b_tx,
            rx: b_rx,
            pending: VecDeque::new(),
        },
    )
}

impl Read for PipeEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pending.is_empty() {
            match self.rx.recv() {
                Ok(chunk) => self.pending.extend(chunk),
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        for (b, v) in buf.iter_mut().zip(self.pending.drain(..n)) {
            *b = v;
        }
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Runs both roles in-process over a [`pipe`]: the cloud on a worker thread,
/// the edge on the caller's.
pub fn loopback<S: Scalar>(
    edge: &Edge<S>,
    cloud: Arc<Cloud<S>>,
    samples: &[&Tensor<f32>],
) -> Result<(Vec<PredictionRecord>, LinkStats)> {
    let frames: Vec<Vec<u8>> = samples
        .iter()
        .map(|s| edge.process(s))
        .collect::<Result<_>>()?;
    let n_q = cloud.queries();
    let (edge_end, cloud_end) = pipe();
    let server = thread::spawn(move || serve_connection(&cloud, cloud_end));
    let mut edge_end = Some(edge_end);
    let result = stream_frames(
        || {
            edge_end
                .take()
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "loopback is one-shot"))
        },
        &frames,
        n_q,
        0,
    );
    // the edge end is dropped by now, so the server sees end of stream
    server
        .join()
        .map_err(|_| Error::Transport("cloud thread panicked".into()))??;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_bandwidth() {
        let r = bandwidth_report(188, 64, 4, 16, 32).unwrap();
        assert_eq!((r.quantized_bits, r.baseline_bits), (3008, 385_024));
        assert_eq!(r.reduction, 0.9921875);
        assert!(r.to_string().contains("99.2%"));
        let one = bandwidth_report(188, 64, 1, 16, 32).unwrap();
        assert_eq!(one.quantized_bits, 752);
        assert!((one.reduction - (1.0 - 752.0 / 385_024.0)).abs() < 1e-15);
        assert_eq!(bandwidth_report(10, 1, 2, 16, 8).unwrap().reduction, 0.0);
        assert!(bandwidth_report(10, 4, 2, 12, 32).is_err());
    }

    #[test]
    fn record_round_trip() {
        let r = PredictionRecord::from_queries(7, &[Some(3), None, Some(1)]);
        assert_eq!(r.classes, vec![3, EMPTY_CLASS, 1]);
        let bytes = r.encode();
        assert_eq!(bytes.len(), PredictionRecord::encoded_len(3));
        let back = PredictionRecord::decode(&bytes, 3).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.queries().unwrap(), vec![Some(3), None, Some(1)]);
        assert!(PredictionRecord::rejected(1, 3).queries().is_none());
        assert!(PredictionRecord::decode(&bytes, 4).is_err());
    }

    #[test]
    fn pipe_carries_bytes_and_closes() {
        let (mut a, mut b) = pipe();
        a.write_all(b"hello").unwrap();
        drop(a);
        let mut got = Vec::new();
        b.read_to_end(&mut got).unwrap();
        assert_eq!(got, b"hello");
    }
}
