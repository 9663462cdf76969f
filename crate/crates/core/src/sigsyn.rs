//! Complex-baseband modulation synthesis, AWGN, and I/Q framing.
//!
//! Linear classes (PSK/QAM/PAM) are root-raised-cosine shaped random
//! symbols; GFSK/CPFSK are continuous-phase FSK of random bits; AM-DSB and
//! WBFM modulate a band-limited multi-tone message. Every generator trims its
//! filter transient so returned samples are steady state.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SignalFrame};
use crate::error::{Error, Result};

/// SNR tag meaning "no noise added".
pub const SNR_NOISELESS: i16 = i16::MAX;
pub const SNR_MIN_DB: i16 = -20;
pub const SNR_MAX_DB: i16 = 18;

const GFSK_BT: f64 = 0.35;
const GFSK_SPAN: usize = 4;
const FSK_MOD_INDEX: f64 = 0.5;
const WBFM_MOD_INDEX: f64 = 0.8;
const MESSAGE_TONES: usize = 8;
const MESSAGE_FREQ_RANGE: (f64, f64) = (0.002, 0.04);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationClass {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Qam64,
    Pam4,
    Gfsk,
    Cpfsk,
    AmDsb,
    Wbfm,
}

impl ModulationClass {
    pub const ALL: [ModulationClass; 10] = [
        ModulationClass::Bpsk,
        ModulationClass::Qpsk,
        ModulationClass::Psk8,
        ModulationClass::Qam16,
        ModulationClass::Qam64,
        ModulationClass::Pam4,
        ModulationClass::Gfsk,
        ModulationClass::Cpfsk,
        ModulationClass::AmDsb,
        ModulationClass::Wbfm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModulationClass::Bpsk => "BPSK",
            ModulationClass::Qpsk => "QPSK",
            ModulationClass::Psk8 => "PSK8",
            ModulationClass::Qam16 => "QAM16",
            ModulationClass::Qam64 => "QAM64",
            ModulationClass::Pam4 => "PAM4",
            ModulationClass::Gfsk => "GFSK",
            ModulationClass::Cpfsk => "CPFSK",
            ModulationClass::AmDsb => "AM_DSB",
            ModulationClass::Wbfm => "WBFM",
        }
    }

    pub fn is_digital(self) -> bool {
        !matches!(self, ModulationClass::AmDsb | ModulationClass::Wbfm)
    }

    /// PSK, QAM and PAM: memoryless symbol mapping followed by pulse shaping.
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            ModulationClass::Bpsk
                | ModulationClass::Qpsk
                | ModulationClass::Psk8
                | ModulationClass::Qam16
                | ModulationClass::Qam64
                | ModulationClass::Pam4
        )
    }
}

impl fmt::Display for ModulationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        let class = match key.as_str() {
            "BPSK" => ModulationClass::Bpsk,
            "QPSK" => ModulationClass::Qpsk,
            "PSK8" | "8PSK" => ModulationClass::Psk8,
            "QAM16" | "16QAM" => ModulationClass::Qam16,
            "QAM64" | "64QAM" => ModulationClass::Qam64,
            "PAM4" | "4PAM" => ModulationClass::Pam4,
            "GFSK" => ModulationClass::Gfsk,
            "CPFSK" => ModulationClass::Cpfsk,
            "AMDSB" => ModulationClass::AmDsb,
            "WBFM" => ModulationClass::Wbfm,
            _ => return Err(Error::Config(format!("unknown modulation class `{s}`"))),
        };
        Ok(class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frame_len: usize,
    pub samples_per_symbol: usize,
    pub rrc_rolloff: f64,
    pub rrc_span: usize,
    pub seed: u64,
    pub snr_grid: Vec<i16>,
    pub classes: Vec<ModulationClass>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_len: 128,
            samples_per_symbol: 8,
            rrc_rolloff: 0.35,
            rrc_span: 8,
            seed: 0,
            snr_grid: (SNR_MIN_DB..=SNR_MAX_DB).step_by(2).collect(),
            classes: ModulationClass::ALL.to_vec(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_symbol < 2 {
            return Err(Error::Config("samples_per_symbol must be at least 2".into()));
        }
        if self.frame_len < 2 * self.samples_per_symbol {
            return Err(Error::Config(format!(
                "frame length {} is shorter than two symbols",
                self.frame_len
            )));
        }
        if !(self.rrc_rolloff > 0.0 && self.rrc_rolloff <= 1.0) {
            return Err(Error::Config("rrc_rolloff must lie in (0, 1]".into()));
        }
        if self.rrc_span < 2 {
            return Err(Error::Config("rrc_span must be at least 2 symbols".into()));
        }
        if let Some(bad) = self
            .snr_grid
            .iter()
            .find(|&&s| s != SNR_NOISELESS && !(SNR_MIN_DB..=SNR_MAX_DB).contains(&s))
        {
            return Err(Error::Config(format!(
                "SNR {bad} dB outside [{SNR_MIN_DB}, {SNR_MAX_DB}]"
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no modulation classes selected".into()));
        }
        Ok(())
    }
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

/// Gray-coded unit-power PAM levels: entry `b` is the level for bit label `b`.
fn gray_pam(levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; levels];
    for pos in 0..levels {
        out[gray(pos)] = (2 * pos) as f64 - (levels - 1) as f64;
    }
    out
}

/// Symbol alphabet of a linear class, indexed by Gray bit label and scaled to
/// unit average power.
pub fn constellation(class: ModulationClass) -> Result<Vec<Complex64>> {
    let points: Vec<Complex64> = match class {
        ModulationClass::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        ModulationClass::Qpsk => (0..4)
            .map(|b| {
                let i = if b & 2 == 0 { 1.0 } else { -1.0 };
                let q = if b & 1 == 0 { 1.0 } else { -1.0 };
                Complex64::new(i, q) / SQRT_2
            })
            .collect(),
        ModulationClass::Psk8 => {
            let mut pts = vec![Complex64::default(); 8];
            for pos in 0..8 {
                pts[gray(pos)] = Complex64::from_polar(1.0, 2.0 * PI * pos as f64 / 8.0);
            }
            pts
        }
        ModulationClass::Pam4 => gray_pam(4).into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
        ModulationClass::Qam16 | ModulationClass::Qam64 => {
            let side = if class == ModulationClass::Qam16 { 4usize } else { 8 };
            let bits = side.trailing_zeros();
            let axis = gray_pam(side);
            (0..side * side)
                .map(|b| Complex64::new(axis[b >> bits], axis[b & (side - 1)]))
                .collect()
        }
        other => return Err(Error::UnsupportedConstellation(other.name().to_string())),
    };
    let power = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
    let scale = power.sqrt().recip();
    Ok(points.into_iter().map(|p| p * scale).collect())
}

/// Root-raised-cosine pulse sampled at `sps` samples per symbol over `span`
/// symbols, normalized to unit energy. Always odd length and symmetric.
pub fn rrc_taps(rolloff: f64, sps: usize, span: usize) -> Result<Vec<f64>> {
    if !(rolloff > 0.0 && rolloff <= 1.0) || sps < 2 || span < 2 {
        return Err(Error::Config(format!(
            "invalid RRC parameters: rolloff {rolloff}, sps {sps}, span {span}"
        )));
    }
    let half = span * sps / 2;
    let b = rolloff;
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let t = (i as f64 - half as f64) / sps as f64;
            if t == 0.0 {
                1.0 - b + 4.0 * b / PI
            } else if ((4.0 * b * t).abs() - 1.0).abs() < 1e-9 {
                // limit at t = +-1/(4b)
                let a = PI / (4.0 * b);
                b / SQRT_2 * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
                num / den
            }
        })
        .collect();
    let energy = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|v| *v /= energy);
    Ok(taps)
}

/// Upsamples `symbols`, filters with the RRC pulse, and keeps only the
/// region where the filter overlaps real symbols on both sides.
///
/// Scaled by `sqrt(sps)`, so unit-power symbols give unit average power.
/// With `half = span * sps / 2`, output sample `n` is the filter response at
/// upsampled time `n + half`, i.e. sample `q * sps - half` is the pulse peak
/// of symbol `q`.
pub fn pulse_shape(symbols: &[Complex64], cfg: &SynthConfig) -> Result<Vec<Complex64>> {
    let taps = rrc_taps(cfg.rrc_rolloff, cfg.samples_per_symbol, cfg.rrc_span)?;
    let sps = cfg.samples_per_symbol;
    let last = taps.len() - 1;
    let up_len = symbols.len().saturating_sub(1) * sps + 1;
    if up_len <= last {
        return Ok(Vec::new());
    }
    let gain = (sps as f64).sqrt();
    let out = (last..up_len)
        .map(|m| {
            let mut acc = Complex64::default();
            // only upsampled positions that hold a symbol contribute
            let lo = m - last;
            let first_sym = lo.div_ceil(sps);
            let mut q = first_sym;
            while q * sps <= m {
                acc += symbols[q] * taps[m - q * sps];
                q += 1;
            }
            acc * gain
        })
        .collect();
    Ok(out)
}

fn random_bits(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn gaussian_taps(bt: f64, sps: usize, span: usize) -> Vec<f64> {
    let half = span * sps / 2;
    let ln2 = std::f64::consts::LN_2;
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let t = (i as f64 - half as f64) / sps as f64;
            (-2.0 * PI * PI * bt * bt * t * t / ln2).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= s);
    taps
}

/// Continuous-phase FSK. `gaussian` selects the BT=0.35 frequency pulse;
/// otherwise the pulse is rectangular over one symbol.
fn cpfsk(n_out: usize, cfg: &SynthConfig, gaussian: bool, rng: &mut impl Rng) -> Vec<Complex64> {
    let sps = cfg.samples_per_symbol;
    let guard = if gaussian { GFSK_SPAN * sps } else { 0 };
    let nsym = (n_out + guard).div_ceil(sps) + 1;
    let bits = random_bits(nsym, rng);
    let mut freq: Vec<f64> = bits.iter().flat_map(|&b| (0..sps).map(move |_| b)).collect();
    if gaussian {
        let g = gaussian_taps(GFSK_BT, sps, GFSK_SPAN);
        freq = (0..freq.len())
            .map(|n| {
                g.iter()
                    .enumerate()
                    .filter(|(j, _)| *j <= n)
                    .map(|(j, &w)| w * freq[n - j])
                    .sum()
            })
            .collect();
    }
    let step = PI * FSK_MOD_INDEX / sps as f64;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n_out);
    for (n, f) in freq.iter().enumerate() {
        phase += step * f;
        if n >= guard {
            out.push(Complex64::from_polar(1.0, phase));
            if out.len() == n_out {
                break;
            }
        }
    }
    out
}

/// Sum of random-phase tones in the message band, scaled to unit RMS.
pub fn analog_message(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let tones: Vec<(f64, f64)> = (0..MESSAGE_TONES)
        .map(|_| {
            (
                rng.gen_range(MESSAGE_FREQ_RANGE.0..MESSAGE_FREQ_RANGE.1),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut m: Vec<f64> = (0..n)
        .map(|i| tones.iter().map(|&(f, p)| (2.0 * PI * f * i as f64 + p).sin()).sum())
        .collect();
    let rms = (m.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        m.iter_mut().for_each(|v| *v /= rms);
    }
    m
}

/// Generates `n_out` steady-state samples of `class`.
pub fn modulate_len(
    class: ModulationClass,
    cfg: &SynthConfig,
    n_out: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Complex64>> {
    let sps = cfg.samples_per_symbol;
    let out = match class {
        c if c.is_linear() => {
            let points = constellation(c)?;
            let nsym = n_out.div_ceil(sps) + cfg.rrc_span + 2;
            let symbols: Vec<Complex64> = (0..nsym).map(|_| points[rng.gen_range(0..points.len())]).collect();
            let mut s = pulse_shape(&symbols, cfg)?;
            s.truncate(n_out);
            s
        }
        ModulationClass::Gfsk => cpfsk(n_out, cfg, true, rng),
        ModulationClass::Cpfsk => cpfsk(n_out, cfg, false, rng),
        ModulationClass::AmDsb => analog_message(n_out, rng)
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect(),
        ModulationClass::Wbfm => {
            let deviation = WBFM_MOD_INDEX * MESSAGE_FREQ_RANGE.1;
            let mut phase = 0.0;
            analog_message(n_out, rng)
                .into_iter()
                .map(|v| {
                    phase += 2.0 * PI * deviation * v;
                    Complex64::from_polar(1.0, phase)
                })
                .collect()
        }
        _ => unreachable!("all classes covered"),
    };
    debug_assert_eq!(out.len(), n_out);
    Ok(out)
}

/// One frame's worth of steady-state signal plus one symbol of slack, so a
/// frame window can start at any sub-symbol offset.
pub fn modulate(class: ModulationClass, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<Complex64>> {
    modulate_len(class, cfg, cfg.frame_len + cfg.samples_per_symbol, rng)
}

pub fn mean_power(s: &[Complex64]) -> f64 {
    s.iter().map(|v| v.norm_sqr()).sum::<f64>() / s.len().max(1) as f64
}

/// Adds complex white Gaussian noise at `snr_db` relative to the measured
/// power of `s`. `f64::INFINITY` returns the input unchanged.
pub fn add_awgn(s: &[Complex64], snr_db: f64, rng: &mut impl Rng) -> Result<Vec<Complex64>> {
    if snr_db == f64::INFINITY {
        return Ok(s.to_vec());
    }
    let p = mean_power(s);
    if p <= 0.0 || !p.is_finite() {
        return Err(Error::UndefinedSnr);
    }
    let noise_power = p * 10f64.powf(-snr_db / 10.0);
    let normal = Normal::new(0.0, (noise_power / 2.0).sqrt()).expect("finite sigma");
    Ok(s.iter()
        .map(|&v| v + Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect())
}

/// Real 2 x L frame from the first `frame_len` samples of `s`: row 0 holds
/// the real parts, row 1 the imaginary parts.
pub fn to_iq_frame(s: &[Complex64], label: u8, snr_db: i16, frame_len: usize) -> Result<SignalFrame> {
    if s.len() < frame_len {
        return Err(Error::Length {
            needed: frame_len,
            got: s.len(),
        });
    }
    let mut iq = vec![0f32; 2 * frame_len];
    for (n, v) in s[..frame_len].iter().enumerate() {
        iq[n] = v.re as f32;
        iq[frame_len + n] = v.im as f32;
    }
    Ok(SignalFrame { iq, label, snr_db })
}

/// Snr tag to the value [`add_awgn`] expects.
pub fn snr_tag_to_db(tag: i16) -> f64 {
    if tag == SNR_NOISELESS {
        f64::INFINITY
    } else {
        tag as f64
    }
}

/// Per-frame RNG: the seed picks the ChaCha key, the frame index the stream,
/// so frames are independent of generation order.
pub fn frame_rng(seed: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng
}

/// Synthesizes one frame of `class` at `snr_db` from its own RNG stream.
pub fn synth_frame(
    class: ModulationClass,
    label: u8,
    snr_db: i16,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<SignalFrame> {
    let s = modulate(class, cfg, rng)?;
    let offset = rng.gen_range(0..cfg.samples_per_symbol);
    let window = &s[offset..offset + cfg.frame_len];
    let noisy = add_awgn(window, snr_tag_to_db(snr_db), rng)?;
    to_iq_frame(&noisy, label, snr_db, cfg.frame_len)
}

/// Balanced dataset: `frames_per_cell` frames for every (class, SNR) pair,
/// ordered by class, then SNR, then frame.
pub fn synth_dataset(cfg: &SynthConfig, frames_per_cell: usize) -> Result<Dataset> {
    cfg.validate()?;
    if frames_per_cell == 0 {
        return Err(Error::Config("frames per cell must be positive".into()));
    }
    if cfg.classes.len() > u8::MAX as usize + 1 {
        return Err(Error::Config("too many classes for u8 labels".into()));
    }
    let cells: Vec<(u8, ModulationClass, i16)> = cfg
        .classes
        .iter()
        .enumerate()
        .flat_map(|(ci, &c)| cfg.snr_grid.iter().map(move |&s| (ci as u8, c, s)))
        .collect();
    let total = cells.len() * frames_per_cell;
    let frames = (0..total)
        .into_par_iter()
        .map(|f| {
            let (label, class, snr) = cells[f / frames_per_cell];
            let mut rng = frame_rng(cfg.seed, f as u64);
            synth_frame(class, label, snr, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(
        cfg.classes.iter().map(|c| c.name().to_string()).collect(),
        cfg.frame_len,
        frames,
    )?;
    ds.seed = Some(cfg.seed);
    Ok(ds)
}
