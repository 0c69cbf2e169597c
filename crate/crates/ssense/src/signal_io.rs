//! Recording/transcript ingestion, sentence-window alignment, and splits.
//!
//! Signals arrive as a manifest (TOML) plus a raw little-endian f32 blob in
//! electrode-major layout. Sentences are aligned to fixed-length windows of
//! [`TARGET_LEN`] samples: 0.5 s of context before the onset, 1 s after the
//! offset, right-padded with zeros.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Fixed segment length in samples; shorter windows are zero-padded up to it.
pub const TARGET_LEN: usize = 8200;

/// Multi-electrode time series with sampling rate and electrode labels.
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub subject_id: String,
    pub electrodes: Vec<String>,
    pub sample_rate_hz: f64,
    /// E x L, electrode-major.
    pub samples: Array2<f32>,
}

impl RawRecording {
    pub fn n_electrodes(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }
}

/// One transcript sentence with its time span.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptSentence {
    pub index: usize,
    pub text: String,
    pub onset_s: f64,
    pub offset_s: f64,
}

impl TranscriptSentence {
    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// A sentence paired with its padded signal window.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub sentence: TranscriptSentence,
    /// E x TARGET_LEN.
    pub segment: Array2<f32>,
    /// Number of leading samples that carry signal; the rest are zero.
    pub valid_len: usize,
    pub pad_applied: bool,
}

/// Disjoint train/val/test index lists over a pair set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Deserialize)]
struct Manifest {
    subject_id: String,
    sample_rate_hz: f64,
    electrodes: Vec<String>,
    signal_file: String,
    dtype: String,
    layout: String,
}

/// Load a recording from a TOML manifest plus its raw f32le signal blob.
///
/// The blob length must equal `electrodes * samples * 4`; any non-finite
/// sample is rejected with its (electrode, sample) index.
pub fn load_recording(manifest_path: &Path) -> Result<RawRecording> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if m.dtype != "f32le" {
        return Err(bad(format!("dtype must be \"f32le\", got {:?}", m.dtype)));
    }
    if m.layout != "electrode_major" {
        return Err(bad(format!(
            "layout must be \"electrode_major\", got {:?}",
            m.layout
        )));
    }
    if m.electrodes.is_empty() {
        return Err(bad("electrodes list is empty".into()));
    }
    if !(m.sample_rate_hz > 0.0) {
        return Err(bad(format!(
            "sample_rate_hz must be positive, got {}",
            m.sample_rate_hz
        )));
    }
    for (i, a) in m.electrodes.iter().enumerate() {
        if m.electrodes[..i].contains(a) {
            return Err(bad(format!("duplicate electrode label {a:?}")));
        }
    }

    let blob_path = resolve_sibling(manifest_path, &m.signal_file);
    if !blob_path.exists() {
        return Err(Error::MissingFile(blob_path));
    }
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let e = m.electrodes.len();
    if bytes.len() % 4 != 0 || (bytes.len() / 4) % e != 0 || bytes.is_empty() {
        return Err(Error::BlobSizeMismatch {
            path: blob_path,
            expected: bytes.len() as u64 / 4 / e as u64 * 4 * e as u64,
            actual: bytes.len() as u64,
            electrodes: e,
            samples: bytes.len() / 4 / e,
        });
    }
    let l = bytes.len() / 4 / e;
    let mut samples = Array2::<f32>::zeros((e, l));
    for (idx, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFiniteSample {
                electrode: idx / l,
                sample: idx % l,
            });
        }
        samples[[idx / l, idx % l]] = v;
    }
    Ok(RawRecording {
        subject_id: m.subject_id,
        electrodes: m.electrodes,
        sample_rate_hz: m.sample_rate_hz,
        samples,
    })
}

/// Re-serialize the sample array to the blob wire format (f32le,
/// electrode-major). Inverse of the blob half of [`load_recording`].
pub fn recording_blob_bytes(rec: &RawRecording) -> Vec<u8> {
    let mut out = Vec::with_capacity(rec.samples.len() * 4);
    for row in rec.samples.rows() {
        for &v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn resolve_sibling(anchor: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        anchor.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Load a transcript CSV with header `index,text,onset_s,offset_s`.
pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptSentence>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Transcript {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Transcript {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let fail = |reason: String| Error::Transcript {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if rec.len() != 4 {
            return Err(fail(format!("expected 4 columns, got {}", rec.len())));
        }
        let index: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| fail(format!("bad index: {e}")))?;
        let text = rec[1].to_string();
        let onset_s: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|e| fail(format!("bad onset_s: {e}")))?;
        let offset_s: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|e| fail(format!("bad offset_s: {e}")))?;
        if text.is_empty() {
            return Err(fail("empty sentence text".into()));
        }
        if !(onset_s >= 0.0) {
            return Err(fail(format!("onset_s must be >= 0, got {onset_s}")));
        }
        if !(offset_s > onset_s) {
            return Err(fail(format!(
                "offset_s ({offset_s}) must exceed onset_s ({onset_s})"
            )));
        }
        out.push(TranscriptSentence {
            index,
            text,
            onset_s,
            offset_s,
        });
    }
    Ok(out)
}

/// Keep exactly the sentences strictly shorter than `max_dur_s`, in order.
pub fn filter_sentences(
    transcript: &[TranscriptSentence],
    max_dur_s: f64,
) -> Vec<TranscriptSentence> {
    transcript
        .iter()
        .filter(|s| s.duration_s() < max_dur_s)
        .cloned()
        .collect()
}

/// Round half away from zero, the rule used for all time-to-sample mapping.
fn round_samples(x: f64) -> usize {
    x.round() as usize
}

/// Cut the context-extended window for one sentence and zero-pad it to
/// `target_len` samples.
///
/// The window spans `[onset - pre_s, offset + post_s]`; windows that straddle
/// the recording edges are rejected, not clamped.
pub fn extract_window(
    rec: &RawRecording,
    s: &TranscriptSentence,
    pre_s: f64,
    post_s: f64,
    target_len: usize,
) -> Result<AlignedPair> {
    let start_s = s.onset_s - pre_s;
    let end_s = s.offset_s + post_s;
    if start_s < 0.0 || end_s > rec.duration_s() {
        return Err(Error::WindowOutOfBounds {
            index: s.index,
            start_s,
            end_s,
            duration_s: rec.duration_s(),
        });
    }
    let sr = rec.sample_rate_hz;
    let start = round_samples(start_s * sr);
    let valid_len = round_samples((pre_s + s.duration_s() + post_s) * sr);
    if valid_len > target_len {
        return Err(Error::WindowTooLong {
            index: s.index,
            valid_len,
            target_len,
        });
    }
    if start + valid_len > rec.n_samples() {
        return Err(Error::WindowOutOfBounds {
            index: s.index,
            start_s,
            end_s,
            duration_s: rec.duration_s(),
        });
    }
    let e = rec.n_electrodes();
    let mut segment = Array2::<f32>::zeros((e, target_len));
    segment
        .slice_mut(ndarray::s![.., ..valid_len])
        .assign(&rec.samples.slice(ndarray::s![.., start..start + valid_len]));
    Ok(AlignedPair {
        sentence: s.clone(),
        segment,
        valid_len,
        pad_applied: valid_len < target_len,
    })
}

/// Deterministic 60/20/20 split: floor sizes for train and val, remainder to
/// test, over a seeded shuffle of `0..n`.
pub fn make_split(n: usize, seed: u64) -> Result<SplitAssignment> {
    if n < 3 {
        return Err(Error::SplitTooSmall(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (0.6 * n as f64).floor() as usize;
    let n_val = (0.2 * n as f64).floor() as usize;
    let val_end = n_train + n_val;
    Ok(SplitAssignment {
        seed,
        train: idx[..n_train].to_vec(),
        val: idx[n_train..val_end].to_vec(),
        test: idx[val_end..].to_vec(),
    })
}

const PAIR_MAGIC: &[u8; 4] = b"SSPR";
const PAIR_VERSION: u32 = 1;

/// Write a pair archive: magic "SSPR", version, electrode count, target
/// length, then per-pair records.
pub fn write_pair_archive(path: &Path, pairs: &[AlignedPair]) -> Result<()> {
    let e = pairs.first().map(|p| p.segment.nrows()).unwrap_or(0);
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|er| Error::io(path, er))?,
    );
    let io = |er: std::io::Error| Error::io(path, er);
    w.write_all(PAIR_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(PAIR_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(pairs.len() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(e as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(TARGET_LEN as u32).map_err(io)?;
    for p in pairs {
        w.write_u32::<LittleEndian>(p.sentence.index as u32)
            .map_err(io)?;
        w.write_f64::<LittleEndian>(p.sentence.onset_s).map_err(io)?;
        w.write_f64::<LittleEndian>(p.sentence.offset_s).map_err(io)?;
        let text = p.sentence.text.as_bytes();
        w.write_u32::<LittleEndian>(text.len() as u32).map_err(io)?;
        w.write_all(text).map_err(io)?;
        w.write_u32::<LittleEndian>(p.valid_len as u32).map_err(io)?;
        w.write_u8(p.pad_applied as u8).map_err(io)?;
        for &v in p.segment.iter() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    Ok(())
}

/// Read back an archive produced by [`write_pair_archive`].
pub fn read_pair_archive(path: &Path) -> Result<Vec<AlignedPair>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|er| Error::io(path, er))?,
    );
    let io = |er: std::io::Error| Error::io(path, er);
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != PAIR_MAGIC {
        return Err(bad("bad magic, expected SSPR"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != PAIR_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let e = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let target_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if target_len != TARGET_LEN {
        return Err(bad(&format!("unexpected target_len {target_len}")));
    }
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let index = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let onset_s = r.read_f64::<LittleEndian>().map_err(io)?;
        let offset_s = r.read_f64::<LittleEndian>().map_err(io)?;
        let tlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut buf = vec![0u8; tlen];
        r.read_exact(&mut buf).map_err(io)?;
        let text = String::from_utf8(buf).map_err(|_| bad("invalid utf-8 in sentence"))?;
        let valid_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let pad_applied = r.read_u8().map_err(io)? != 0;
        let mut segment = Array2::<f32>::zeros((e, target_len));
        for v in segment.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(io)?;
        }
        pairs.push(AlignedPair {
            sentence: TranscriptSentence {
                index,
                text,
                onset_s,
                offset_s,
            },
            segment,
            valid_len,
            pad_applied,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sentence(index: usize, onset_s: f64, offset_s: f64) -> TranscriptSentence {
        TranscriptSentence {
            index,
            text: format!("sentence {index}"),
            onset_s,
            offset_s,
        }
    }

    fn write_manifest(dir: &Path, e: usize, l: usize, sr: f64, bytes: &[u8]) -> PathBuf {
        let electrodes: Vec<String> = (0..e).map(|i| format!("\"e{i}\"")).collect();
        let manifest = format!(
            "subject_id = \"s01\"\nsample_rate_hz = {sr}\nelectrodes = [{}]\nsignal_file = \"signal.f32\"\ndtype = \"f32le\"\nlayout = \"electrode_major\"\n",
            electrodes.join(", ")
        );
        let _ = l;
        std::fs::write(dir.join("manifest.toml"), manifest).unwrap();
        std::fs::write(dir.join("signal.f32"), bytes).unwrap();
        dir.join("manifest.toml")
    }

    #[test]
    fn load_recording_round_trip() {
        let dir = TempDir::new().unwrap();
        let vals: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mp = write_manifest(dir.path(), 2, 10, 2048.0, &bytes);
        let rec = load_recording(&mp).unwrap();
        assert_eq!(rec.n_electrodes(), 2);
        assert_eq!(rec.n_samples(), 10);
        assert_eq!(rec.samples[[1, 9]], vals[19]);
        assert_eq!(recording_blob_bytes(&rec), bytes);
    }

    #[test]
    fn load_recording_size_mismatch() {
        let dir = TempDir::new().unwrap();
        let bytes = vec![0u8; 79];
        let mp = write_manifest(dir.path(), 2, 10, 2048.0, &bytes);
        match load_recording(&mp) {
            Err(Error::BlobSizeMismatch { .. }) => {}
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_recording_rejects_nan_with_index() {
        let dir = TempDir::new().unwrap();
        let mut vals = vec![0.0f32; 20];
        vals[13] = f32::NAN; // electrode 1, sample 3
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mp = write_manifest(dir.path(), 2, 10, 2048.0, &bytes);
        match load_recording(&mp) {
            Err(Error::NonFiniteSample { electrode, sample }) => {
                assert_eq!((electrode, sample), (1, 3));
            }
            other => panic!("expected NonFiniteSample, got {other:?}"),
        }
    }

    #[test]
    fn load_recording_missing_manifest() {
        match load_recording(Path::new("/nonexistent/manifest.toml")) {
            Err(Error::MissingFile(_)) => {}
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn filter_strict_boundary() {
        let t = vec![
            sentence(0, 0.0, 3.9),
            sentence(1, 0.0, 4.0),
            sentence(2, 0.0, 4.1),
        ];
        let kept = filter_sentences(&t, 4.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].index, 0);
    }

    #[test]
    fn filter_empty_and_idempotent() {
        assert!(filter_sentences(&[], 4.0).is_empty());
        let t = vec![sentence(0, 0.0, 1.0), sentence(1, 2.0, 7.0), sentence(2, 8.0, 9.5)];
        let once = filter_sentences(&t, 4.0);
        let twice = filter_sentences(&once, 4.0);
        assert_eq!(once, twice);
        assert_eq!(once.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 2]);
    }

    fn ramp_recording(e: usize, l: usize, sr: f64) -> RawRecording {
        let samples = Array2::from_shape_fn((e, l), |(i, j)| (i * l + j) as f32);
        RawRecording {
            subject_id: "s".into(),
            electrodes: (0..e).map(|i| format!("e{i}")).collect(),
            sample_rate_hz: sr,
            samples,
        }
    }

    #[test]
    fn extract_window_pads_to_target() {
        let rec = ramp_recording(2, 20000, 2048.0);
        let s = sentence(0, 1.0, 3.5); // 2.5 s -> window 4.0 s -> 8192 samples
        let p = extract_window(&rec, &s, 0.5, 1.0, TARGET_LEN).unwrap();
        assert_eq!(p.valid_len, 8192);
        assert!(p.pad_applied);
        assert_eq!(p.segment.ncols(), TARGET_LEN);
        let start = (0.5f64 * 2048.0).round() as usize;
        assert_eq!(p.segment[[0, 0]], rec.samples[[0, start]]);
        assert_eq!(p.segment[[1, 8191]], rec.samples[[1, start + 8191]]);
        for t in 8192..TARGET_LEN {
            assert_eq!(p.segment[[0, t]], 0.0);
            assert_eq!(p.segment[[1, t]], 0.0);
        }
    }

    #[test]
    fn extract_window_out_of_bounds() {
        let rec = ramp_recording(1, 4096, 2048.0);
        let s = sentence(0, 0.2, 0.6); // needs 0.5 s of pre-context
        match extract_window(&rec, &s, 0.5, 1.0, TARGET_LEN) {
            Err(Error::WindowOutOfBounds { .. }) => {}
            other => panic!("expected out-of-bounds, got {other:?}"),
        }
    }

    #[test]
    fn extract_window_too_long() {
        let rec = ramp_recording(1, 40960, 4096.0);
        let s = sentence(0, 1.0, 4.0); // 4.5 s at 4096 Hz = 18432 samples
        match extract_window(&rec, &s, 0.5, 1.0, TARGET_LEN) {
            Err(Error::WindowTooLong { valid_len, .. }) => assert_eq!(valid_len, 18432),
            other => panic!("expected too-long, got {other:?}"),
        }
    }

    #[test]
    fn split_paper_sizes() {
        for seed in 0..10u64 {
            let s = make_split(1454, seed).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (872, 290, 292));
        }
    }

    #[test]
    fn split_deterministic_and_disjoint() {
        let a = make_split(10, 0).unwrap();
        let b = make_split(10, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_too_small() {
        assert!(matches!(make_split(2, 0), Err(Error::SplitTooSmall(2))));
    }

    #[test]
    fn pair_archive_round_trip() {
        let dir = TempDir::new().unwrap();
        let rec = ramp_recording(2, 20000, 2048.0);
        let pairs: Vec<AlignedPair> = [sentence(0, 1.0, 3.0), sentence(1, 5.0, 6.2)]
            .iter()
            .map(|s| extract_window(&rec, s, 0.5, 1.0, TARGET_LEN).unwrap())
            .collect();
        let path = dir.path().join("pairs.sspr");
        write_pair_archive(&path, &pairs).unwrap();
        let back = read_pair_archive(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.sentence, b.sentence);
            assert_eq!(a.valid_len, b.valid_len);
            assert_eq!(a.segment, b.segment);
        }
    }
}
