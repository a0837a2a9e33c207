//! On-disk dataset container.
//!
//! A dataset directory holds `manifest.json` plus one binary file per split.
//! Each record in a split file is, in manifest order: token ids as
//! little-endian u32, then the vision and audio matrices as little-endian f32
//! row-major. The manifest carries per-record byte offsets so corruption is
//! reported against the offending sample.

use crate::data::{Dataset, DatasetMeta, FeatMatrix, MultimodalSample, Split};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordEntry {
    sample_id: String,
    label: f64,
    l_t: usize,
    l_v: usize,
    l_a: usize,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplitManifest {
    file: String,
    records: Vec<RecordEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vocab_size: u32,
    d_v: usize,
    d_a: usize,
    y_min: f64,
    y_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator_seed: Option<u64>,
    train: SplitManifest,
    valid: SplitManifest,
    test: SplitManifest,
}

fn record_byte_len(e: &RecordEntry, d_v: usize, d_a: usize) -> u64 {
    (e.l_t * 4 + e.l_v * d_v * 4 + e.l_a * d_a * 4) as u64
}

fn encode_split(samples: &[MultimodalSample], name: &str) -> (SplitManifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let offset = bytes.len() as u64;
        for &t in &s.text_tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        for &v in s.vision_feats.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in s.audio_feats.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        records.push(RecordEntry {
            sample_id: s.sample_id.clone(),
            label: s.label,
            l_t: s.text_tokens.len(),
            l_v: s.vision_feats.rows(),
            l_a: s.audio_feats.rows(),
            offset,
        });
    }
    (
        SplitManifest {
            file: format!("{name}.bin"),
            records,
        },
        bytes,
    )
}

/// Write `dataset` into directory `path`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    let mut split_manifests = Vec::new();
    for split in Split::ALL {
        let (manifest, bytes) = encode_split(dataset.split(split), split.name());
        let file_path = path.join(&manifest.file);
        let mut f = std::fs::File::create(&file_path).map_err(|e| Error::io(&file_path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&file_path, e))?;
        split_manifests.push(manifest);
    }
    let mut it = split_manifests.into_iter();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        vocab_size: dataset.meta.vocab_size,
        d_v: dataset.meta.d_v,
        d_a: dataset.meta.d_a,
        y_min: dataset.meta.label_range.y_min,
        y_max: dataset.meta.label_range.y_max,
        generator_seed: dataset.meta.generator_seed,
        train: it.next().unwrap(),
        valid: it.next().unwrap(),
        test: it.next().unwrap(),
    };
    let manifest_path = path.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, json.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

fn decode_split(
    dir: &Path,
    manifest: &SplitManifest,
    meta: &DatasetMeta,
) -> Result<Vec<MultimodalSample>> {
    let file_path = dir.join(&manifest.file);
    let bytes = std::fs::read(&file_path).map_err(|e| Error::io(&file_path, e))?;

    let mut expected_len = 0u64;
    for e in &manifest.records {
        if e.offset != expected_len {
            return Err(Error::Format(format!(
                "record {:?}: offset {} does not match expected {}",
                e.sample_id, e.offset, expected_len
            )));
        }
        expected_len += record_byte_len(e, meta.d_v, meta.d_a);
    }
    if bytes.len() as u64 != expected_len {
        let culprit = manifest
            .records
            .iter()
            .find(|e| e.offset + record_byte_len(e, meta.d_v, meta.d_a) > bytes.len() as u64)
            .map(|e| e.sample_id.clone())
            .unwrap_or_else(|| manifest.file.clone());
        return Err(Error::Format(format!(
            "split file {:?} holds {} bytes but manifest declares {} (first bad record {:?})",
            manifest.file,
            bytes.len(),
            expected_len,
            culprit
        )));
    }

    let mut samples = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let mut cur = e.offset as usize;
        let mut take_u32 = |n: usize| -> Vec<u32> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(u32::from_le_bytes(bytes[cur..cur + 4].try_into().unwrap()));
                cur += 4;
            }
            out
        };
        let text_tokens = take_u32(e.l_t);
        let mut take_f32 = |n: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f32::from_le_bytes(bytes[cur..cur + 4].try_into().unwrap()));
                cur += 4;
            }
            out
        };
        let vision = take_f32(e.l_v * meta.d_v);
        let audio = take_f32(e.l_a * meta.d_a);
        samples.push(MultimodalSample {
            sample_id: e.sample_id.clone(),
            text_tokens,
            vision_feats: FeatMatrix::new(e.l_v, meta.d_v, vision)?,
            audio_feats: FeatMatrix::new(e.l_a, meta.d_a, audio)?,
            label: e.label,
        });
    }
    Ok(samples)
}

/// Read a dataset directory written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let meta = DatasetMeta {
        vocab_size: manifest.vocab_size,
        d_v: manifest.d_v,
        d_a: manifest.d_a,
        label_range: crate::data::LabelRange::new(manifest.y_min, manifest.y_max)?,
        generator_seed: manifest.generator_seed,
    };
    let dataset = Dataset {
        train: decode_split(path, &manifest.train, &meta)?,
        valid: decode_split(path, &manifest.valid, &meta)?,
        test: decode_split(path, &manifest.test, &meta)?,
        meta,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorConfig};

    fn small_dataset() -> Dataset {
        generate_synthetic_dataset(&GeneratorConfig {
            n_train: 3,
            n_valid: 2,
            n_test: 1,
            seed: 42,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(d, loaded);
    }

    #[test]
    fn empty_split_round_trips() {
        let mut d = small_dataset();
        d.valid.clear();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(d, loaded);
        assert!(loaded.valid.is_empty());
    }

    #[test]
    fn shape_mismatch_names_offender() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        // Manifest now promises wider vision rows than the tensor file holds.
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let json = std::fs::read_to_string(&manifest_path).unwrap();
        let json = json.replace("\"d_v\": 8", "\"d_v\": 9");
        std::fs::write(&manifest_path, json).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train-0000") || msg.contains("train.bin"), "{msg}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let json = std::fs::read_to_string(&manifest_path).unwrap();
        let json = json.replace("train-00001", "train-00000");
        std::fs::write(&manifest_path, json).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn manifest_label_out_of_range_rejected() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let json = std::fs::read_to_string(&manifest_path).unwrap();
        let json = json.replace("\"y_max\": 3.0", "\"y_max\": 0.5");
        std::fs::write(&manifest_path, json).unwrap();
        // Labels above 0.5 now violate the declared range.
        assert!(load_dataset(dir.path()).is_err());
    }
}
