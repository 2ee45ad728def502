//! On-disk corpora: a directory holding `manifest.jsonl` and `features.bin`.
//!
//! The manifest's first line is a header carrying the format version and the
//! CRC-32 of `features.bin`; every following line describes one utterance and
//! where its row-major `f32` frames sit in the feature file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mtjr_core::data::{FeatureMatrix, Utterance};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const FEATURES: &str = "features.bin";
pub const FEATURES_MAGIC: &[u8; 4] = b"MTJR";
pub const FORMAT_VERSION: u16 = 1;
const PREAMBLE: usize = 6;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u16,
    features_crc32: u32,
    utterances: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    utt_id: String,
    accent_id: usize,
    tokens: Vec<usize>,
    offset: u64,
    rows: usize,
    cols: usize,
}

/// Writes `utterances` into `dir` (created if missing) and returns the CRC-32
/// of the feature file.
pub fn save(dir: &Path, utterances: &[Utterance]) -> Result<u32> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut blob = Vec::with_capacity(PREAMBLE + utterances.iter().map(|u| u.features.data.len() * 4).sum::<usize>());
    blob.extend_from_slice(FEATURES_MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut records = Vec::with_capacity(utterances.len());
    for u in utterances {
        records.push(Record {
            utt_id: u.utt_id.clone(),
            accent_id: u.accent_id,
            tokens: u.tokens.clone(),
            offset: blob.len() as u64,
            rows: u.features.rows,
            cols: u.features.cols,
        });
        for x in &u.features.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&blob);
    let path = dir.join(FEATURES);
    fs::write(&path, &blob).map_err(Error::io(&path))?;

    let path = dir.join(MANIFEST);
    let file = fs::File::create(&path).map_err(Error::io(&path))?;
    let mut out = BufWriter::new(file);
    let header = Header { version: FORMAT_VERSION, features_crc32: crc, utterances: utterances.len() };
    let mut write_line = |line: String| writeln!(out, "{line}").map_err(Error::io(&path));
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for r in &records {
        write_line(serde_json::to_string(r).expect("record serializes"))?;
    }
    out.flush().map_err(Error::io(&path))?;
    Ok(crc)
}

/// Reads a corpus written by [`save`], verifying magic, version and checksum.
pub fn load(dir: &Path) -> Result<Vec<Utterance>> {
    let path = dir.join(FEATURES);
    let blob = fs::read(&path).map_err(Error::io(&path))?;
    if blob.len() < PREAMBLE || &blob[..4] != FEATURES_MAGIC {
        return Err(Error::corrupt(&path, "missing MTJR magic"));
    }
    let version = u16::from_le_bytes([blob[4], blob[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path, found: version, expected: FORMAT_VERSION });
    }

    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::open(&manifest_path).map_err(Error::io(&manifest_path))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::corrupt(&manifest_path, "empty manifest"))?
        .map_err(Error::io(&manifest_path))?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| Error::corrupt(&manifest_path, format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path: manifest_path, found: header.version, expected: FORMAT_VERSION });
    }
    if crc32fast::hash(&blob) != header.features_crc32 {
        return Err(Error::corrupt(&path, "checksum mismatch"));
    }

    let mut utterances = Vec::with_capacity(header.utterances);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(Error::io(&manifest_path))?;
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt(&manifest_path, format!("record {}: {e}", i + 1)))?;
        let start = usize::try_from(r.offset).map_err(|_| Error::corrupt(&path, "offset overflow"))?;
        let len = r.rows.checked_mul(r.cols).and_then(|n| n.checked_mul(4));
        let bytes = len
            .and_then(|n| blob.get(start..start.checked_add(n)?))
            .filter(|_| start >= PREAMBLE)
            .ok_or_else(|| Error::corrupt(&path, format!("utterance {} lies outside the file", r.utt_id)))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        utterances.push(Utterance {
            utt_id: r.utt_id,
            features: FeatureMatrix::new(r.rows, r.cols, data)?,
            tokens: r.tokens,
            accent_id: r.accent_id,
        });
    }
    if utterances.len() != header.utterances {
        return Err(Error::corrupt(
            &manifest_path,
            format!("header announces {} utterances, found {}", header.utterances, utterances.len()),
        ));
    }
    Ok(utterances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtjr_core::data::{generate_corpus, Split, SyntheticCorpusSpec};

    fn small() -> Vec<Utterance> {
        let spec = SyntheticCorpusSpec { train_size: 12, feature_dim: 5, ..Default::default() };
        generate_corpus(&spec, Split::Train).unwrap()
    }

    #[test]
    fn round_trip_preserves_corpus_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let crc = save(&a, &corpus).unwrap();
        let loaded = load(&a).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(save(&b, &loaded).unwrap(), crc);
        for f in [MANIFEST, FEATURES] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn manifest_counts_match_the_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small();
        save(dir.path(), &corpus).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let records: Vec<Record> = text.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), corpus.len());
        let tokens: usize = records.iter().map(|r| r.tokens.len()).sum();
        assert_eq!(tokens, corpus.iter().map(|u| u.tokens.len()).sum::<usize>());
        for accent in 0..8 {
            let n = records.iter().filter(|r| r.accent_id == accent).count();
            assert_eq!(n, corpus.iter().filter(|u| u.accent_id == accent).count());
        }
    }

    #[test]
    fn truncated_features_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &small()).unwrap();
        let path = dir.path().join(FEATURES);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptFile { .. })));
        fs::write(&path, &blob[..3]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn flipped_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &small()).unwrap();
        let path = dir.path().join(FEATURES);
        let mut blob = fs::read(&path).unwrap();
        blob[40] ^= 1;
        fs::write(&path, &blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &small()).unwrap();
        let path = dir.path().join(FEATURES);
        let mut blob = fs::read(&path).unwrap();
        blob[4] = 9;
        fs::write(&path, &blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
