//! Residual vector quantization: V codebooks of K prototypes, each layer
//! quantizing the residual left by the previous ones.
//!
//! Indices are 0-based everywhere (in memory and on the wire).

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, ProtocolError, Result};
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"AMTK";
pub const FRAME_VERSION: u16 = 1;
/// magic + version + ℓ + V + log₂K
pub const FRAME_HEADER_LEN: usize = 12;
pub const FRAME_CRC_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RvqConfig {
    pub layers: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub p_drop: f64,
    /// Square the two norms of the codebook loss.
    pub squared: bool,
    /// Factor on the codebook loss in the training objective.
    pub weight: f64,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            layers: 4,
            codebook_size: 16,
            beta: 0.5,
            p_drop: 0.2,
            squared: false,
            weight: 1.0,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > 255 {
            return Err(Error::Config(format!(
                "RVQ layers must be in 1..=255, got {}",
                self.layers
            )));
        }
        self.log2k().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!(
                "layer dropout must be in [0, 1), got {}",
                self.p_drop
            )));
        }
        Ok(())
    }

    pub fn log2k(&self) -> Result<u8> {
        log2_codebook(self.codebook_size)
    }
}

/// `log₂ K` for a power-of-two codebook size in `2..=65536`.
pub fn log2_codebook(k: usize) -> Result<u8> {
    if k < 2 || !k.is_power_of_two() || k > 1 << 16 {
        return Err(ProtocolError::NotPowerOfTwo(k).into());
    }
    Ok(k.trailing_zeros() as u8)
}

/// Number of distinct index patterns per position, `K^V`.
pub fn capacity(k: u64, v: u32) -> Result<u64> {
    if k == 0 || v == 0 {
        return Err(Error::Invalid(format!(
            "capacity needs K, V >= 1, got ({k}, {v})"
        )));
    }
    k.checked_pow(v)
        .filter(|&c| c <= 1 << 63)
        .ok_or_else(|| Error::Invalid(format!("capacity {k}^{v} exceeds 2^63")))
}

pub fn codebook_name(v: usize) -> String {
    format!("rvq.codebook{v}")
}

/// Nearest prototype by squared Euclidean distance; ties go to the lowest index.
pub fn quantize_layer<S: Scalar>(x: &[S], codebook: &Tensor<S>) -> usize {
    let d = x.len();
    let mut best = (0, S::infinity());
    for (i, c) in codebook.data().chunks_exact(d).enumerate() {
        let dist: S = x.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqEncoding<S> {
    /// `indices[v][n]`, one sequence per layer; dropped positions hold `None`.
    pub indices: Vec<Vec<Option<u16>>>,
    /// Sum of active contributions, `[n, d]`.
    pub quantized: Tensor<S>,
    /// Residual after the last layer, `[n, d]`.
    pub residual: Tensor<S>,
}

impl<S: Scalar> RvqEncoding<S> {
    /// Dense indices when no position was dropped.
    pub fn dense_indices(&self) -> Option<Vec<Vec<u16>>> {
        self.indices
            .iter()
            .map(|l| l.iter().copied().collect::<Option<Vec<u16>>>())
            .collect()
    }
}

/// Encodes rows of `z` (`[n, d]`). `dropped(v, row)` removes layer `v`'s
/// contribution at that row; the residual then passes through unchanged.
pub fn rvq_encode<S: Scalar>(
    z: &Tensor<S>,
    codebooks: &[Tensor<S>],
    dropped: impl Fn(usize, usize) -> bool,
) -> Result<RvqEncoding<S>> {
    let (n, d) = rows_cols("rvq_encode", z)?;
    for cb in codebooks {
        if cb.rank() != 2 || cb.shape()[1] != d {
            return Err(Error::shape(
                "rvq_encode",
                format!("codebook {:?} for features of width {d}", cb.shape()),
            ));
        }
    }
    let mut residual = z.clone();
    let mut quantized = Tensor::zeros(&[n, d]);
    let mut indices = vec![vec![None; n]; codebooks.len()];
    for (v, (cb, slots)) in codebooks.iter().zip(&mut indices).enumerate() {
        for (row, slot) in slots.iter_mut().enumerate() {
            if dropped(v, row) {
                continue;
            }
            let r = &mut residual.data_mut()[row * d..(row + 1) * d];
            let i = quantize_layer(r, cb);
            let c = cb.row(i);
            for (x, &p) in r.iter_mut().zip(c) {
                *x = *x - p;
            }
            *slot = Some(i as u16);
        }
    }
    // summed separately, in the same order the decoder uses
    for (v, cb) in codebooks.iter().enumerate() {
        accumulate(&mut quantized, cb, |row| indices[v][row].map(usize::from));
    }
    Ok(RvqEncoding {
        indices,
        quantized,
        residual,
    })
}

fn accumulate<S: Scalar>(
    acc: &mut Tensor<S>,
    cb: &Tensor<S>,
    index: impl Fn(usize) -> Option<usize>,
) {
    let d = cb.shape()[1];
    for (row, out) in acc.data_mut().chunks_exact_mut(d).enumerate() {
        if let Some(i) = index(row) {
            for (o, &p) in out.iter_mut().zip(cb.row(i)) {
                *o = *o + p;
            }
        }
    }
}

fn rows_cols<S: Scalar>(op: &'static str, z: &Tensor<S>) -> Result<(usize, usize)> {
    match z.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::shape(op, format!("expected [rows, d], got {s:?}"))),
    }
}

/// Prototype sums for dense index sequences `indices[v][n]`.
pub fn rvq_decode<S: Scalar>(indices: &[Vec<u16>], codebooks: &[Tensor<S>]) -> Result<Tensor<S>> {
    if indices.len() != codebooks.len() {
        return Err(Error::shape(
            "rvq_decode",
            format!(
                "{} index layers for {} codebooks",
                indices.len(),
                codebooks.len()
            ),
        ));
    }
    let n = indices.first().map_or(0, Vec::len);
    let d = codebooks.first().map_or(0, |c| c.shape()[1]);
    for (v, (layer, cb)) in indices.iter().zip(codebooks).enumerate() {
        if layer.len() != n {
            return Err(Error::shape(
                "rvq_decode",
                format!("layer {v} has {} indices, layer 0 has {n}", layer.len()),
            ));
        }
        let k = cb.shape()[0];
        if let Some(pos) = layer.iter().position(|&i| i as usize >= k) {
            return Err(ProtocolError::IndexOutOfRange {
                layer: v,
                position: pos,
                index: layer[pos] as usize,
                size: k,
            }
            .into());
        }
    }
    let mut out = Tensor::zeros(&[n, d]);
    for (layer, cb) in indices.iter().zip(codebooks) {
        accumulate(&mut out, cb, |row| Some(layer[row] as usize));
    }
    Ok(out)
}

/// Quantizes `z` (`[batch, ℓ, d]`) inside the graph. `dropped[b][v]` drops
/// layer `v` for sample `b`. Per layer and position the loss is
/// `‖r − sg b‖ + β ‖sg r − b‖`, with `r^(v+1) = r^(v) − sg b^(v)`.
pub fn rvq_train<S: Scalar>(
    fw: &mut Forward<S>,
    cfg: &RvqConfig,
    z: Var,
    dropped: &[Vec<bool>],
) -> Result<(Var, Var, RvqEncoding<S>)> {
    let shape = fw.graph.shape(z).to_vec();
    let [batch, len, d] = shape[..] else {
        return Err(Error::shape(
            "rvq",
            format!("expected [batch, ℓ, d], got {shape:?}"),
        ));
    };
    if dropped.len() != batch || dropped.iter().any(|m| m.len() != cfg.layers) {
        return Err(Error::shape(
            "rvq",
            format!("dropout mask for {batch} samples x {} layers", cfg.layers),
        ));
    }
    let n = batch * len;
    let names: Vec<String> = (0..cfg.layers).map(codebook_name).collect();
    let codebooks: Vec<Tensor<S>> = names
        .iter()
        .map(|nm| {
            fw.params
                .get(nm)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("missing {nm}")))
        })
        .collect::<Result<_>>()?;
    let z_rows = fw.graph.value(z).reshape(&[n, d])?;
    let enc = rvq_encode(&z_rows, &codebooks, |v, row| dropped[row / len][v])?;

    let mut r = fw.graph.reshape(z, &[n, d])?;
    let mut terms = Vec::with_capacity(2 * cfg.layers);
    let beta = S::of(cfg.beta);
    for (v, name) in names.iter().enumerate() {
        let active: Vec<usize> = (0..n)
            .filter(|&row| enc.indices[v][row].is_some())
            .collect();
        if active.is_empty() {
            continue;
        }
        let idx: Vec<usize> = active
            .iter()
            .map(|&row| enc.indices[v][row].unwrap() as usize)
            .collect();
        let cb = fw.p(name)?;
        let b_act = fw.graph.index_select(cb, &idx)?;
        let r_act = fw.graph.index_select(r, &active)?;
        let b_sg = fw.graph.stop_gradient(b_act);
        let r_sg = fw.graph.stop_gradient(r_act);
        let commit = fw.graph.sub(r_act, b_sg)?;
        let code = fw.graph.sub(r_sg, b_act)?;
        let commit = norm_sum(fw, commit, cfg.squared)?;
        let code = norm_sum(fw, code, cfg.squared)?;
        let code = fw.graph.scale(code, beta);
        terms.push(commit);
        terms.push(code);
        // r^(v+1) = r^(v) − sg[b^(v)], dropped rows unchanged
        let mut contrib = Tensor::zeros(&[n, d]);
        accumulate(&mut contrib, &codebooks[v], |row| {
            enc.indices[v][row].map(usize::from)
        });
        let c = fw.graph.constant(contrib);
        r = fw.graph.sub(r, c)?;
    }
    let loss = if terms.is_empty() {
        fw.graph.constant(Tensor::scalar(S::zero()))
    } else {
        let parts: Vec<Var> = terms
            .iter()
            .map(|&t| fw.graph.reshape(t, &[1]))
            .collect::<Result<_>>()?;
        let all = fw.graph.concat(&parts, 0)?;
        let total = fw.graph.sum(all);
        fw.graph
            .scale(total, S::of(cfg.weight / batch.max(1) as f64))
    };
    let q = enc.quantized.reshape(&shape)?;
    let quantized = fw.graph.straight_through(z, q)?;
    Ok((quantized, loss, enc))
}

fn norm_sum<S: Scalar>(fw: &mut Forward<S>, diff: Var, squared: bool) -> Result<Var> {
    if squared {
        let sq = fw.graph.mul(diff, diff)?;
        Ok(fw.graph.sum(sq))
    } else {
        let norms = fw.graph.l2_norm_last(diff)?;
        Ok(fw.graph.sum(norms))
    }
}

/// Codebook loss evaluated directly on values (no graph): the sum over
/// layers and positions of `(1 + β) ‖r − b‖`, or its squared variant.
pub fn rvq_loss_value<S: Scalar>(
    z: &Tensor<S>,
    codebooks: &[Tensor<S>],
    cfg: &RvqConfig,
) -> Result<f64> {
    let (n, d) = rows_cols("rvq_loss", z)?;
    let mut r = z.clone();
    let mut total = 0.0;
    for cb in codebooks {
        for row in 0..n {
            let x = &mut r.data_mut()[row * d..(row + 1) * d];
            let i = quantize_layer(x, cb);
            let mut sq = 0.0;
            for (a, &p) in x.iter_mut().zip(cb.row(i)) {
                let diff = *a - p;
                sq += diff.as_f64() * diff.as_f64();
                *a = diff;
            }
            let term = if cfg.squared { sq } else { sq.sqrt() };
            total += (1.0 + cfg.beta) * term;
        }
    }
    Ok(total)
}

/// Data-dependent initialization: layer `v` takes K distinct rows of the
/// current residuals (with replacement only if there are fewer than K) plus
/// small jitter, then residualizes against itself for the next layer.
pub fn init_codebooks<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    cfg: &RvqConfig,
    z_rows: &Tensor<S>,
    rng: &mut R,
) -> Result<()> {
    let (n, d) = rows_cols("init_codebooks", z_rows)?;
    if n == 0 {
        return Err(Error::Invalid(
            "codebook initialization needs at least one feature row".into(),
        ));
    }
    let k = cfg.codebook_size;
    let mut residual = z_rows.clone();
    for v in 0..cfg.layers {
        let scale = (residual.sq_norm().as_f64() / (n * d) as f64)
            .sqrt()
            .max(1e-6);
        let picks: Vec<usize> = if n >= k {
            sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut cb = Tensor::zeros(&[k, d]);
        for (i, &row) in picks.iter().enumerate() {
            for (j, &x) in residual.row(row).iter().enumerate() {
                cb.data_mut()[i * d + j] = x + S::of(rng.gen_range(-1e-3..1e-3) * scale);
            }
        }
        let enc = rvq_encode(&residual, std::slice::from_ref(&cb), |_, _| false)?;
        residual = enc.residual;
        store.insert(codebook_name(v), cb);
    }
    Ok(())
}

/// Random codebooks (used before any data is seen).
pub fn init_codebooks_random<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    cfg: &RvqConfig,
    d: usize,
    rng: &mut R,
) {
    for v in 0..cfg.layers {
        let std = 0.5f64.powi(v as i32);
        store.insert(
            codebook_name(v),
            Tensor::randn(&[cfg.codebook_size, d], std, rng),
        );
    }
}

pub fn codebooks_from<S: Scalar>(store: &ParamStore<S>, layers: usize) -> Result<Vec<Tensor<S>>> {
    (0..layers)
        .map(|v| {
            let name = codebook_name(v);
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("missing {name}")))
        })
        .collect()
}

/// Prototype usage counts per layer.
pub fn code_usage(indices: &[Vec<Option<u16>>], k: usize) -> Vec<Vec<usize>> {
    indices
        .iter()
        .map(|layer| {
            let mut counts = vec![0; k];
            for i in layer.iter().flatten() {
                counts[*i as usize] += 1;
            }
            counts
        })
        .collect()
}

// ---- token frames ---------------------------------------------------------------

/// Packed index payload of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFrame {
    pub len: usize,
    pub log2k: u8,
    /// `indices[v][t]`, 0-based.
    pub indices: Vec<Vec<u16>>,
}

impl TokenFrame {
    pub fn layers(&self) -> usize {
        self.indices.len()
    }
}

/// Bytes per layer: `ceil(ℓ log₂K / 8)`.
pub fn layer_bytes(len: usize, log2k: u8) -> usize {
    (len * log2k as usize).div_ceil(8)
}

pub fn payload_len(len: usize, layers: usize, log2k: u8) -> usize {
    layers * layer_bytes(len, log2k)
}

pub fn frame_len(len: usize, layers: usize, log2k: u8) -> usize {
    FRAME_HEADER_LEN + payload_len(len, layers, log2k) + FRAME_CRC_LEN
}

/// `"AMTK"`, version `u16`, ℓ `u32`, V `u8`, log₂K `u8` (little-endian),
/// then each layer's indices as big-endian bit fields padded to a byte,
/// then CRC32 of the payload.
pub fn serialize_indices(indices: &[Vec<u16>], log2k: u8) -> Result<Vec<u8>> {
    if log2k == 0 || log2k > 16 {
        return Err(ProtocolError::NotPowerOfTwo(1usize << log2k.min(31)).into());
    }
    let layers = u8::try_from(indices.len())
        .map_err(|_| Error::Invalid(format!("{} layers do not fit a frame", indices.len())))?;
    let len = indices.first().map_or(0, Vec::len);
    let k = 1usize << log2k;
    for (v, layer) in indices.iter().enumerate() {
        if layer.len() != len {
            return Err(Error::shape(
                "serialize_indices",
                format!("layer {v} has {} indices, layer 0 has {len}", layer.len()),
            ));
        }
        if let Some(pos) = layer.iter().position(|&i| i as usize >= k) {
            return Err(ProtocolError::IndexOutOfRange {
                layer: v,
                position: pos,
                index: layer[pos] as usize,
                size: k,
            }
            .into());
        }
    }
    let len32 =
        u32::try_from(len).map_err(|_| Error::Invalid("sequence too long for a frame".into()))?;
    let mut out = Vec::with_capacity(frame_len(len, indices.len(), log2k));
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&len32.to_le_bytes());
    out.push(layers);
    out.push(log2k);
    for layer in indices {
        let start = out.len();
        out.resize(start + layer_bytes(len, log2k), 0);
        let mut bit = 0usize;
        for &i in layer {
            for b in (0..log2k).rev() {
                if (i >> b) & 1 == 1 {
                    out[start + bit / 8] |= 0x80 >> (bit % 8);
                }
                bit += 1;
            }
        }
    }
    let crc = crc32fast::hash(&out[FRAME_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parsed frame header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub len: usize,
    pub layers: usize,
    pub log2k: u8,
}

impl FrameHeader {
    pub fn frame_len(&self) -> usize {
        frame_len(self.len, self.layers, self.log2k)
    }
}

pub fn parse_frame_header(bytes: &[u8]) -> Result<FrameHeader> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(ProtocolError::PayloadLength {
            expected: FRAME_HEADER_LEN,
            got: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != FRAME_MAGIC {
        return Err(ProtocolError::BadMagic(magic).into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FRAME_VERSION {
        return Err(ProtocolError::BadVersion(version).into());
    }
    let log2k = bytes[11];
    if log2k == 0 || log2k > 16 {
        return Err(ProtocolError::NotPowerOfTwo(1usize << log2k.min(31)).into());
    }
    Ok(FrameHeader {
        len: u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize,
        layers: bytes[10] as usize,
        log2k,
    })
}

pub fn deserialize_indices(bytes: &[u8]) -> Result<TokenFrame> {
    let h = parse_frame_header(bytes)?;
    let expected = h.frame_len();
    if bytes.len() != expected {
        return Err(ProtocolError::PayloadLength {
            expected,
            got: bytes.len(),
        }
        .into());
    }
    let payload = &bytes[FRAME_HEADER_LEN..expected - FRAME_CRC_LEN];
    let carried = u32::from_le_bytes(bytes[expected - FRAME_CRC_LEN..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if carried != computed {
        return Err(ProtocolError::CrcMismatch { carried, computed }.into());
    }
    let per_layer = layer_bytes(h.len, h.log2k);
    let indices = payload
        .chunks_exact(per_layer.max(1))
        .take(h.layers)
        .map(|chunk| {
            let mut bit = 0usize;
            (0..h.len)
                .map(|_| {
                    let mut i = 0u16;
                    for _ in 0..h.log2k {
                        i = (i << 1) | ((chunk[bit / 8] >> (7 - bit % 8)) & 1) as u16;
                        bit += 1;
                    }
                    i
                })
                .collect()
        })
        .collect::<Vec<Vec<u16>>>();
    let indices = if per_layer == 0 {
        vec![Vec::new(); h.layers]
    } else {
        indices
    };
    Ok(TokenFrame {
        len: h.len,
        log2k: h.log2k,
        indices,
    })
}
