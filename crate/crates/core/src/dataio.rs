//! The AMCD dataset container and the stratified train/test split.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "AMCD"            4 bytes magic
//! version           u16 (= 1)
//! class count       u32
//! class names       per class: u32 byte length + UTF-8 bytes
//! frame length L    u32
//! record count      u32
//! records           per record: u8 class id, i16 SNR dB, 2*L f32 (I row then Q row)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const AMCD_MAGIC: &[u8; 4] = b"AMCD";
pub const AMCD_VERSION: u16 = 1;

/// One 2 x L real I/Q frame. `iq[..L]` is the in-phase row, `iq[L..]` the
/// quadrature row; `label` indexes the owning dataset's class table.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFrame {
    pub iq: Vec<f32>,
    pub label: u8,
    pub snr_db: i16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub frame_len: usize,
    pub frames: Vec<SignalFrame>,
    /// Generation seed when known; not stored in the container.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, frame_len: usize, frames: Vec<SignalFrame>) -> Result<Self> {
        let ds = Self {
            classes,
            frame_len,
            frames,
            seed: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            if f.label as usize >= self.classes.len() {
                return Err(Error::OutOfRange(format!(
                    "frame {i} has label {} but only {} classes",
                    f.label,
                    self.classes.len()
                )));
            }
            if f.iq.len() != 2 * self.frame_len {
                return Err(Error::Length {
                    needed: 2 * self.frame_len,
                    got: f.iq.len(),
                });
            }
            if f.iq.iter().any(|v| !v.is_finite()) {
                return Err(Error::OutOfRange(format!("frame {i} has non-finite samples")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sorted distinct SNR tags present in the frames.
    pub fn snr_grid(&self) -> Vec<i16> {
        self.frames
            .iter()
            .map(|f| f.snr_db)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.label as usize).collect()
    }

    pub fn snrs(&self) -> Vec<i16> {
        self.frames.iter().map(|f| f.snr_db).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for f in &self.frames {
            counts[f.label as usize] += 1;
        }
        counts
    }

    fn with_frames(&self, frames: Vec<SignalFrame>) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            frame_len: self.frame_len,
            frames,
            seed: self.seed,
        }
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        header_len(&self.classes) + self.frames.len() * record_len(self.frame_len)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(AMCD_MAGIC);
        out.extend_from_slice(&AMCD_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.classes.len())?.to_le_bytes());
        for name in &self.classes {
            out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out.extend_from_slice(&u32_of(self.frame_len)?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.frames.len())?.to_le_bytes());
        for f in &self.frames {
            out.push(f.label);
            out.extend_from_slice(&f.snr_db.to_le_bytes());
            for v in &f.iq {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != AMCD_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u16("version")?;
        if version != AMCD_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let n_classes = r.u32("class count")? as usize;
        let mut classes = Vec::with_capacity(n_classes.min(256));
        for _ in 0..n_classes {
            let at = r.pos;
            let len = r.u32("class name length")? as usize;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw).map_err(|_| Error::Format {
                offset: at as u64,
                msg: "class name is not UTF-8".into(),
            })?;
            classes.push(name.to_string());
        }
        let frame_len = r.u32("frame length")? as usize;
        let count = r.u32("record count")? as usize;
        let mut frames = Vec::with_capacity(count.min(bytes.len() / record_len(frame_len).max(1)));
        for _ in 0..count {
            let at = r.pos;
            let label = r.take(1, "class id")?[0];
            if label as usize >= classes.len() {
                return Err(Error::Format {
                    offset: at as u64,
                    msg: format!("class id {label} outside table of {}", classes.len()),
                });
            }
            let snr_db = r.u16("snr")? as i16;
            let raw = r.take(8 * frame_len, "samples")?;
            let iq = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            frames.push(SignalFrame { iq, label, snr_db });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Dataset {
            classes,
            frame_len,
            frames,
            seed: None,
        })
    }
}

fn header_len(classes: &[String]) -> usize {
    4 + 2 + 4 + classes.iter().map(|c| 4 + c.len()).sum::<usize>() + 4 + 4
}

fn record_len(frame_len: usize) -> usize {
    1 + 2 + 2 * frame_len * 4
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::OutOfRange(format!("{v} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ds.to_bytes()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Stratified split: each (class, SNR) cell is shuffled with a seeded RNG and
/// its first `round(n * train_fraction)` frames go to the training set.
/// Both outputs keep the input order.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut cells: BTreeMap<(u8, i16), Vec<usize>> = BTreeMap::new();
    for (i, f) in ds.frames.iter().enumerate() {
        cells.entry((f.label, f.snr_db)).or_default().push(i);
    }
    for label in 0..ds.classes.len() {
        for snr in ds.snr_grid() {
            if !cells.contains_key(&(label as u8, snr)) {
                log::warn!("split: no frames for class {} at {snr} dB", ds.classes[label]);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.frames.len()];
    for idx in cells.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (f, t) in ds.frames.iter().zip(in_train) {
        if t {
            train.push(f.clone());
        } else {
            test.push(f.clone());
        }
    }
    Ok((ds.with_frames(train), ds.with_frames(test)))
}

/// Parses a CSV frame file name of the form `<CLASS>_<SNR>_<ID>.csv`.
/// The class may itself contain underscores.
pub fn parse_frame_file_name(stem: &str) -> Option<(String, i16)> {
    let mut parts = stem.rsplitn(3, '_');
    let _id = parts.next()?;
    let snr = parts.next()?.trim_end_matches("dB").parse().ok()?;
    let class = parts.next()?;
    (!class.is_empty()).then(|| (class.to_string(), snr))
}

/// Reads one CSV frame: two columns (I, Q), one sample per row, with an
/// optional header row.
pub fn read_csv_frame(path: &Path) -> Result<Vec<(f32, f32)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                line: line + 1,
                msg: format!("{}: expected 2 columns, found {}", path.display(), rec.len()),
            });
        }
        match (rec[0].parse::<f32>(), rec[1].parse::<f32>()) {
            (Ok(i), Ok(q)) => out.push((i, q)),
            _ if line == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    line: line + 1,
                    msg: format!("{}: non-numeric sample", path.display()),
                })
            }
        }
    }
    Ok(out)
}

/// Builds a dataset from a directory of CSV frames named
/// `<CLASS>_<SNR>_<ID>.csv`. The class table is `classes` when given,
/// otherwise the sorted distinct class names found.
pub fn dataset_from_csv_dir(dir: &Path, classes: Option<Vec<String>>) -> Result<Dataset> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty("no .csv frames in directory"));
    }
    let mut parsed = Vec::with_capacity(files.len());
    for p in &files {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (class, snr) = parse_frame_file_name(stem).ok_or_else(|| {
            Error::Config(format!(
                "{}: file name must look like <CLASS>_<SNR>_<ID>.csv",
                p.display()
            ))
        })?;
        parsed.push((class, snr, read_csv_frame(p)?));
    }
    let classes = classes.unwrap_or_else(|| {
        parsed
            .iter()
            .map(|(c, _, _)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    if classes.len() > 256 {
        return Err(Error::Config("more than 256 classes".into()));
    }
    let frame_len = parsed[0].2.len();
    let mut frames = Vec::with_capacity(parsed.len());
    for ((class, snr, samples), path) in parsed.into_iter().zip(&files) {
        let label = classes
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| Error::Config(format!("class `{class}` not in class table")))?;
        if samples.len() != frame_len {
            return Err(Error::Config(format!(
                "{}: {} samples, expected {frame_len}",
                path.display(),
                samples.len()
            )));
        }
        let mut iq = vec![0f32; 2 * frame_len];
        for (n, (i, q)) in samples.into_iter().enumerate() {
            iq[n] = i;
            iq[frame_len + n] = q;
        }
        frames.push(SignalFrame {
            iq,
            label: label as u8,
            snr_db: snr,
        });
    }
    Dataset::new(classes, frame_len, frames)
}
