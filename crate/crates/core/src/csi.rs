//! CSI samples: a multipath superposition generator, the `.csit` container,
//! and dataset splitting.
//!
//! The generator builds, per antenna pair `(rx, tx)` and subcarrier `k`,
//!
//! ```text
//! H(t, k) = sum_p alpha_p(t) * exp(-j 2 pi f_k tau_p)
//! ```
//!
//! where a static background contributes constant attenuations and each
//! person contributes `P` paths whose attenuation is modulated by the
//! template of their activity. People superpose in the complex domain, and
//! only the modulus leaves the generator.

use std::f64::consts::PI;
use std::io::{self, Read, Write};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;

pub const CSIT_MAGIC: &[u8; 4] = b"CSIT";
pub const CSIT_VERSION: u16 = 1;

/// Activity ids are 1-based, `1..=n_act`.
pub type ActivityId = u8;

#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample {
    /// `[T, C]` amplitudes, time-major.
    pub amplitude: Tensor<f32>,
    /// Unordered activity multiset; its length is the occupancy.
    pub labels: Vec<ActivityId>,
}

impl CsiSample {
    pub fn occupancy(&self) -> usize {
        self.labels.len()
    }

    pub fn time_len(&self) -> usize {
        self.amplitude.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.amplitude.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub time_len: usize,
    pub subcarriers: usize,
    pub rx: usize,
    pub tx: usize,
    pub n_act: usize,
    pub max_occupancy: usize,
    pub paths_per_user: usize,
    pub noise_std: f64,
    /// Seeds the static environment (background paths).
    pub seed: u64,
    /// Modulation cycles per window for activity 1; activity `a` uses `a` times this.
    pub base_cycles: f64,
    pub modulation_depth: f64,
    pub user_gain: f64,
    /// Per-user template phases are uniform in `[0, phase_spread)` radians.
    pub phase_spread: f64,
    /// Excess delay of a person's paths over the line-of-sight path, uniform
    /// in `[0, excess_delay)` seconds.
    pub excess_delay: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            time_len: 300,
            subcarriers: 8,
            rx: 2,
            tx: 2,
            n_act: 9,
            max_occupancy: 5,
            paths_per_user: 3,
            noise_std: 0.05,
            seed: 0,
            base_cycles: 1.0,
            modulation_depth: 0.6,
            user_gain: 0.35,
            phase_spread: PI / 3.0,
            excess_delay: 5e-9,
        }
    }
}

impl SynthConfig {
    pub fn channels(&self) -> usize {
        self.rx * self.tx * self.subcarriers
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.time_len,
            self.subcarriers,
            self.rx,
            self.tx,
            self.n_act,
            self.paths_per_user,
        ];
        if extents.contains(&0) {
            return Err(Error::Config(format!(
                "synthetic extents must be >= 1: {self:?}"
            )));
        }
        if self.n_act > 254 || self.max_occupancy > 255 {
            return Err(Error::Config(
                "n_act and max occupancy must fit in a byte".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "noise std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=2.0 * PI).contains(&self.phase_spread) || !(self.excess_delay >= 0.0) {
            return Err(Error::Config(format!(
                "phase spread must lie in [0, 2 pi] and excess delay be >= 0, got {} and {}",
                self.phase_spread, self.excess_delay
            )));
        }
        Ok(())
    }
}

const BACKGROUND_PATHS: usize = 4;
const CARRIER_HZ: f64 = 5.18e9;
const SUBCARRIER_SPACING_HZ: f64 = 1.25e6;
const DELAY_WINDOW_S: (f64, f64) = (10e-9, 100e-9);

fn subcarrier_freq(k: usize) -> f64 {
    CARRIER_HZ + k as f64 * SUBCARRIER_SPACING_HZ
}

fn random_phasor<R: Rng>(rng: &mut R, gain: f64) -> Complex64 {
    Complex64::from_polar(gain, rng.gen_range(0.0..2.0 * PI))
}

/// Derives an independent stream seed from a parent seed and a stream tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = parent
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic CSI generator bound to one static environment.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    cfg: SynthConfig,
    /// Static field per channel.
    background: Vec<Complex64>,
    /// Line-of-sight `(phase, delay)` per antenna pair.
    los: Vec<(f64, f64)>,
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xB6));
        let mut background = Vec::with_capacity(cfg.channels());
        let mut los = Vec::with_capacity(cfg.rx * cfg.tx);
        for _pair in 0..cfg.rx * cfg.tx {
            // a dominant line-of-sight path plus weaker reflections
            let paths: Vec<(Complex64, f64)> = (0..BACKGROUND_PATHS)
                .map(|p| {
                    let gain = if p == 0 { 2.0 } else { rng.gen_range(0.1..0.4) };
                    (
                        random_phasor(&mut rng, gain),
                        rng.gen_range(DELAY_WINDOW_S.0..DELAY_WINDOW_S.1),
                    )
                })
                .collect();
            los.push((paths[0].0.arg(), paths[0].1));
            for k in 0..cfg.subcarriers {
                let f = subcarrier_freq(k);
                background.push(
                    paths
                        .iter()
                        .map(|&(a, tau)| a * Complex64::from_polar(1.0, -2.0 * PI * f * tau))
                        .sum(),
                );
            }
        }
        Ok(Synthesizer {
            cfg,
            background,
            los,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn background(&self) -> &[Complex64] {
        &self.background
    }

    /// Temporal template of an activity: a sinusoid at `a * base_cycles`
    /// cycles per window under a flat envelope.
    pub fn template(&self, activity: ActivityId, phase: f64, t: usize) -> f64 {
        let cycles = activity as f64 * self.cfg.base_cycles;
        (2.0 * PI * cycles * t as f64 / self.cfg.time_len as f64 + phase).sin()
    }

    /// Complex `[T * C]` contribution of one person with their own seed.
    ///
    /// Each of the person's paths arrives `excess_delay` or less after the
    /// line-of-sight path, with its attenuation phase aligned to line of sight
    /// at the band centre. Every person thus lifts the amplitude of every
    /// channel by a similar amount, and the template phase is the only
    /// per-person draw that shapes the modulation.
    pub fn user_field(&self, activity: ActivityId, user_seed: u64) -> Vec<Complex64> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
        let phase = rng.gen_range(0.0..1.0) * cfg.phase_spread;
        let path_gain = cfg.user_gain / cfg.paths_per_user as f64;
        let centre =
            subcarrier_freq(0) + (cfg.subcarriers - 1) as f64 * SUBCARRIER_SPACING_HZ / 2.0;
        // per-channel static coefficient W_c = sum_p g_p exp(-j 2 pi f_k tau_p)
        let mut coeff = Vec::with_capacity(cfg.channels());
        for &(los_phase, los_delay) in &self.los {
            let paths: Vec<(Complex64, f64)> = (0..cfg.paths_per_user)
                .map(|_| {
                    let excess = rng.gen_range(0.0..1.0) * cfg.excess_delay;
                    let tau = los_delay + excess;
                    let aligned = los_phase + 2.0 * PI * centre * excess;
                    (Complex64::from_polar(path_gain, aligned), tau)
                })
                .collect();
            for k in 0..cfg.subcarriers {
                let f = subcarrier_freq(k);
                coeff.push(
                    paths
                        .iter()
                        .map(|&(a, tau)| a * Complex64::from_polar(1.0, -2.0 * PI * f * tau))
                        .sum::<Complex64>(),
                );
            }
        }
        let c = cfg.channels();
        let mut field = Vec::with_capacity(cfg.time_len * c);
        for t in 0..cfg.time_len {
            let m = 1.0 + cfg.modulation_depth * self.template(activity, phase, t);
            field.extend(coeff.iter().map(|&w| w * m));
        }
        field
    }

    /// Noise-free complex field `[T * C]` for a label multiset.
    pub fn clean_field(&self, labels: &[ActivityId], sample_seed: u64) -> Result<Vec<Complex64>> {
        self.check_labels(labels)?;
        let c = self.cfg.channels();
        let mut field: Vec<Complex64> = (0..self.cfg.time_len)
            .flat_map(|_| self.background.iter().copied())
            .collect();
        debug_assert_eq!(field.len(), self.cfg.time_len * c);
        for (u, &a) in labels.iter().enumerate() {
            let uf = self.user_field(a, derive_seed(sample_seed, u as u64 + 1));
            for (f, x) in field.iter_mut().zip(uf) {
                *f += x;
            }
        }
        Ok(field)
    }

    fn check_labels(&self, labels: &[ActivityId]) -> Result<()> {
        if labels.len() > self.cfg.max_occupancy {
            return Err(Error::Invalid(format!(
                "{} people exceed maximum occupancy {}",
                labels.len(),
                self.cfg.max_occupancy
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&a| a == 0 || a as usize > self.cfg.n_act)
        {
            return Err(Error::Invalid(format!(
                "activity id {bad} outside 1..={}",
                self.cfg.n_act
            )));
        }
        Ok(())
    }

    /// Amplitude sample for `labels`, deterministic in `sample_seed`.
    pub fn sample(&self, labels: &[ActivityId], sample_seed: u64) -> Result<CsiSample> {
        let field = self.clean_field(labels, sample_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, 0x4E01));
        let s = self.cfg.noise_std / 2f64.sqrt();
        let amp: Vec<f32> = field
            .into_iter()
            .map(|h| {
                let h = if s > 0.0 {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    h + Complex64::new(re * s, im * s)
                } else {
                    h
                };
                h.norm() as f32
            })
            .collect();
        let amplitude = Tensor::new(vec![self.cfg.time_len, self.cfg.channels()], amp)?;
        Ok(CsiSample {
            amplitude,
            labels: labels.to_vec(),
        })
    }

    /// Occupancy uniform in `0..=max_occupancy`, activities uniform and independent.
    pub fn random_labels<R: Rng>(&self, rng: &mut R) -> Vec<ActivityId> {
        let n = rng.gen_range(0..=self.cfg.max_occupancy);
        (0..n)
            .map(|_| rng.gen_range(1..=self.cfg.n_act) as ActivityId)
            .collect()
    }

    /// `count` samples with random labels; sample `i` uses seed `derive_seed(seed, i)`.
    pub fn dataset(&self, count: usize, seed: u64) -> Result<Vec<CsiSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1AB));
        (0..count)
            .map(|i| {
                let labels = self.random_labels(&mut rng);
                self.sample(&labels, derive_seed(seed, 0x5A00_0000 + i as u64))
            })
            .collect()
    }
}

/// One sample using `cfg.seed` for both the environment and the people.
pub fn synth_sample(cfg: &SynthConfig, labels: &[ActivityId]) -> Result<CsiSample> {
    Synthesizer::new(cfg.clone())?.sample(labels, cfg.seed)
}

// ---- .csit container ---------------------------------------------------------

/// Header of a `.csit` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsitHeader {
    pub count: u32,
    pub n_act: u8,
    pub max_occupancy: u8,
}

/// Writes samples as: `"CSIT"`, version `u16`, count `u32`, `N_act u8`,
/// max occupancy `u8`, then per sample `T u32`, `C u32`, `N_p u8`, the
/// `N_p` activity ids, and `T*C` little-endian `f32` amplitudes (time-major).
pub fn write_csit<W: Write>(
    mut w: W,
    samples: &[CsiSample],
    n_act: u8,
    max_occupancy: u8,
) -> Result<()> {
    w.write_all(CSIT_MAGIC)?;
    w.write_all(&CSIT_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&[n_act, max_occupancy])?;
    for (i, s) in samples.iter().enumerate() {
        if s.labels.len() > max_occupancy as usize {
            return Err(DataError::OccupancyExceeded {
                sample: i,
                count: s.labels.len(),
                max: max_occupancy as usize,
            }
            .into());
        }
        w.write_all(&(s.time_len() as u32).to_le_bytes())?;
        w.write_all(&(s.channels() as u32).to_le_bytes())?;
        w.write_all(&[s.labels.len() as u8])?;
        w.write_all(&s.labels)?;
        for v in s.amplitude.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_tensor_file(
    path: &std::path::Path,
    samples: &[CsiSample],
    n_act: u8,
    max_occupancy: u8,
) -> Result<()> {
    let mut buf = Vec::new();
    write_csit(&mut buf, samples, n_act, max_occupancy)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Streaming `.csit` reader yielding samples in file order.
pub struct CsitReader<R> {
    inner: R,
    header: CsitHeader,
    offset: usize,
    next: u32,
    failed: bool,
}

impl<R: Read> CsitReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut offset = 0;
        let head = read_bytes(&mut inner, 12, &mut offset)?;
        let magic: [u8; 4] = head[..4].try_into().unwrap();
        if &magic != CSIT_MAGIC {
            return Err(DataError::BadMagic(magic).into());
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != CSIT_VERSION {
            return Err(DataError::BadVersion(version).into());
        }
        let header = CsitHeader {
            count: u32::from_le_bytes(head[6..10].try_into().unwrap()),
            n_act: head[10],
            max_occupancy: head[11],
        };
        Ok(CsitReader {
            inner,
            header,
            offset,
            next: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> CsitHeader {
        self.header
    }

    fn read_sample(&mut self) -> Result<CsiSample> {
        let idx = self.next as usize;
        let head = read_bytes(&mut self.inner, 9, &mut self.offset)?;
        let t = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let n_p = head[8] as usize;
        if t == 0 || c == 0 {
            return Err(DataError::ExtentMismatch {
                sample: idx,
                detail: format!("T={t}, C={c}"),
            }
            .into());
        }
        if n_p > self.header.max_occupancy as usize {
            return Err(DataError::OccupancyExceeded {
                sample: idx,
                count: n_p,
                max: self.header.max_occupancy as usize,
            }
            .into());
        }
        let labels = read_bytes(&mut self.inner, n_p, &mut self.offset)?;
        if let Some(&id) = labels.iter().find(|&&a| a == 0 || a > self.header.n_act) {
            return Err(DataError::InvalidActivity {
                sample: idx,
                id,
                n_act: self.header.n_act,
            }
            .into());
        }
        let raw = read_bytes(&mut self.inner, t * c * 4, &mut self.offset)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(bad) = data.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(DataError::ExtentMismatch {
                sample: idx,
                detail: format!(
                    "amplitude {} at element {bad} is not a finite non-negative value",
                    data[bad]
                ),
            }
            .into());
        }
        Ok(CsiSample {
            amplitude: Tensor::new(vec![t, c], data)?,
            labels,
        })
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize, offset: &mut usize) -> Result<Vec<u8>> {
    let mut buf = vec![0; n];
    let mut got = 0;
    while got < n {
        match r.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(DataError::Truncated {
                    offset: *offset + got,
                    needed: n - got,
                }
                .into())
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += n;
    Ok(buf)
}

impl<R: Read> Iterator for CsitReader<R> {
    type Item = Result<CsiSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next >= self.header.count {
            // exactly `count` samples, nothing after them
            let mut probe = [0u8; 64];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                Ok(k) => {
                    self.failed = true;
                    Some(Err(DataError::TrailingBytes(k).into()))
                }
                Err(e) => {
                    self.failed = true;
                    Some(Err(e.into()))
                }
            };
        }
        let r = self.read_sample();
        self.next += 1;
        if r.is_err() {
            self.failed = true;
        }
        Some(r)
    }
}

/// Opens a `.csit` file as a sample stream.
pub fn load_tensor_file(
    path: &std::path::Path,
) -> Result<CsitReader<io::BufReader<std::fs::File>>> {
    CsitReader::new(io::BufReader::new(std::fs::File::open(path)?))
}

// ---- splitting -------------------------------------------------------------------

/// Split sizes: the first two rounded to nearest, the remainder to the last.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Invalid(format!(
            "split fractions must be >= 0, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split fractions sum to {total}, not 1"
        )));
    }
    let train = ((n as f64) * fractions[0]).round() as usize;
    let val = (((n as f64) * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

/// Shuffles `samples` with `seed` and cuts them into train/validation/test.
pub fn split_dataset<T>(
    samples: Vec<T>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [n_train, n_val, _] = split_sizes(samples.len(), fractions)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5917)));
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| {
        idx.iter()
            .map(|&i| slots[i].take().unwrap())
            .collect::<Vec<T>>()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthConfig {
        SynthConfig {
            noise_std: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_room_without_noise_is_static() {
        let s = synth_sample(&quiet(), &[]).unwrap();
        let c = s.channels();
        for t in 1..s.time_len() {
            assert_eq!(s.amplitude.row(t), s.amplitude.row(0), "t={t}");
        }
        assert_eq!(c, 32);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(
            synth_sample(&cfg, &[3, 3, 7]).unwrap(),
            synth_sample(&cfg, &[3, 3, 7]).unwrap()
        );
    }

    #[test]
    fn occupancy_above_maximum_rejected() {
        let cfg = SynthConfig {
            max_occupancy: 2,
            ..Default::default()
        };
        assert!(synth_sample(&cfg, &[1, 2, 3]).is_err());
    }

    #[test]
    fn amplitudes_non_negative() {
        let syn = Synthesizer::new(SynthConfig::default()).unwrap();
        for s in syn.dataset(5, 9).unwrap() {
            assert!(s.amplitude.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn two_users_superpose_in_complex_domain() {
        let syn = Synthesizer::new(quiet()).unwrap();
        let seed = 77;
        let both = syn.clean_field(&[2, 6], seed).unwrap();
        let u0 = syn.user_field(2, derive_seed(seed, 1));
        let u1 = syn.user_field(6, derive_seed(seed, 2));
        let bg = syn.clean_field(&[], seed).unwrap();
        let first = syn.clean_field(&[2], seed).unwrap();
        for i in 0..both.len() {
            let expected = (bg[i] + u0[i]) + u1[i];
            assert!((both[i] - expected).norm() < 1e-12);
            // 1-user field (user 0) + 1-user field built from user 1 - background
            let alt = first[i] + (bg[i] + u1[i]) - bg[i];
            assert!((both[i] - alt).norm() < 1e-12);
        }
    }

    /// Index of the largest non-DC DFT magnitude of a real trace, by direct summation.
    fn dominant_bin(trace: &[f64]) -> usize {
        let n = trace.len();
        let mean = trace.iter().sum::<f64>() / n as f64;
        (1..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in trace.iter().enumerate() {
                    let w = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += (x - mean) * w.cos();
                    im += (x - mean) * w.sin();
                }
                (k, re * re + im * im)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn activities_have_distinct_dominant_frequencies() {
        let cfg = quiet();
        let syn = Synthesizer::new(cfg.clone()).unwrap();
        let mut peaks = Vec::new();
        for a in 1..=cfg.n_act as u8 {
            let s = syn.sample(&[a], 1000 + a as u64).unwrap();
            // channel with the most temporal variation
            let traces: Vec<Vec<f64>> = (0..s.channels())
                .map(|c| {
                    (0..s.time_len())
                        .map(|t| s.amplitude.row(t)[c] as f64)
                        .collect()
                })
                .collect();
            let spread = |v: &Vec<f64>| {
                v.iter().cloned().fold(f64::MIN, f64::max)
                    - v.iter().cloned().fold(f64::MAX, f64::min)
            };
            let best = traces
                .iter()
                .max_by(|x, y| spread(x).total_cmp(&spread(y)))
                .unwrap();
            peaks.push(dominant_bin(best));
        }
        let expected: Vec<usize> = (1..=cfg.n_act)
            .map(|a| (a as f64 * cfg.base_cycles).round() as usize)
            .collect();
        assert_eq!(peaks, expected);
    }

    #[test]
    fn split_ratios() {
        let (a, b, c) = split_dataset((0..10).collect::<Vec<_>>(), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<_> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (a2, b2, c2) = split_dataset((0..10).collect::<Vec<_>>(), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));
        let (t, v, s) = split_dataset((0..7).collect::<Vec<_>>(), [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((t.len(), v.len(), s.len()), (7, 0, 0));
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_dataset(vec![1, 2], [1.2, -0.2, 0.0], 0).is_err());
        assert!(split_dataset(vec![1, 2], [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn csit_round_trip_and_errors() {
        let syn = Synthesizer::new(SynthConfig {
            time_len: 12,
            ..Default::default()
        })
        .unwrap();
        let samples = syn.dataset(4, 3).unwrap();
        let mut buf = Vec::new();
        write_csit(&mut buf, &samples, 9, 5).unwrap();
        let back: Vec<CsiSample> = CsitReader::new(buf.as_slice())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back, samples);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            CsitReader::new(bad.as_slice()),
            Err(Error::Data(DataError::BadMagic(_)))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            CsitReader::new(bad.as_slice()),
            Err(Error::Data(DataError::BadVersion(9)))
        ));
        let cut = &buf[..buf.len() - 5];
        let res: Result<Vec<_>> = CsitReader::new(cut).unwrap().collect();
        assert!(matches!(res, Err(Error::Data(DataError::Truncated { .. }))));
        let mut extra = buf.clone();
        extra.push(0);
        let res: Result<Vec<_>> = CsitReader::new(extra.as_slice()).unwrap().collect();
        assert!(matches!(res, Err(Error::Data(DataError::TrailingBytes(1)))));
    }

    #[test]
    fn csit_label_count_above_header_maximum() {
        let s = CsiSample {
            amplitude: Tensor::zeros(&[2, 1]),
            labels: vec![1; 6],
        };
        let mut buf = Vec::new();
        write_csit(&mut buf, std::slice::from_ref(&s), 9, 6).unwrap();
        buf[11] = 5; // shrink header max occupancy
        let res: Result<Vec<_>> = CsitReader::new(buf.as_slice()).unwrap().collect();
        assert!(matches!(
            res,
            Err(Error::Data(DataError::OccupancyExceeded {
                count: 6,
                max: 5,
                ..
            }))
        ));
    }

    #[test]
    fn csit_empty_body() {
        let mut buf = Vec::new();
        write_csit(&mut buf, &[], 9, 5).unwrap();
        assert_eq!(CsitReader::new(buf.as_slice()).unwrap().count(), 0);
    }
}
