//! Manifest files.
//!
//! A manifest is JSON Lines. The first line is a header:
//!
//! ```text
//! {"format":"grounder-manifest","version":1,"split":"train","vocab":"vocab.txt",
//!  "feature_dim":16,"features":"train.features.f64","samples":2000}
//! ```
//!
//! and every following line is one image:
//!
//! ```text
//! {"image_id":"train-000000","feature_offset":0,"boxes":[[x0,y0,x1,y1],...],
//!  "phrases":[{"tokens":[5,9],"sentence_id":0,"phrase_type":"animals",
//!              "gt_box":[x0,y0,x1,y1],"gt_attention":3}]}
//! ```
//!
//! `phrase_type`, `gt_box` and `gt_attention` are optional. Paths in the
//! header are relative to the manifest's directory. The feature file holds
//! every proposal's feature row as little-endian `f64`, row-major, with no
//! header; `feature_offset` is the image's first row and it owns one row per
//! box. Token ids outside the vocabulary are read as `<unk>`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, GroundingSample, Vocabulary};
use crate::attention::{BBox, Phrase, ProposalSet};
use crate::error::{Error, Result};
use crate::layers::UNK_ID;
use crate::numerics::Tensor;

pub const MANIFEST_FORMAT: &str = "grounder-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    split: String,
    vocab: String,
    feature_dim: usize,
    features: String,
    samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhraseRecord {
    tokens: Vec<usize>,
    sentence_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phrase_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_attention: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    image_id: String,
    feature_offset: usize,
    boxes: Vec<[f64; 4]>,
    phrases: Vec<PhraseRecord>,
}

fn to_box(a: [f64; 4]) -> Result<BBox> {
    BBox::new(a[0], a[1], a[2], a[3])
}

/// Sidecar feature file name for a manifest path: `x/train.jsonl` gives
/// `x/train.features.f64`.
pub fn features_path(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    manifest.with_file_name(format!("{stem}.features.f64"))
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

pub fn save_manifest(dataset: &DatasetManifest, path: &Path) -> Result<()> {
    dataset.validate()?;
    let feat_path = features_path(path);
    let header = Header {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        split: dataset.split.clone(),
        vocab: dataset.vocab_file.clone(),
        feature_dim: dataset.feature_dim,
        features: feat_path
            .file_name()
            .and_then(|s| s.to_str())
            .expect("utf-8 file name")
            .to_string(),
        samples: dataset.samples.len(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut feats = BufWriter::new(File::create(&feat_path).map_err(|e| Error::io(&feat_path, e))?);
    let write_err = |e: std::io::Error| Error::io(path, e);
    writeln!(out, "{}", json_line(&header)).map_err(write_err)?;
    let mut offset = 0;
    for s in &dataset.samples {
        let record = SampleRecord {
            image_id: s.image_id.clone(),
            feature_offset: offset,
            boxes: s.proposals.boxes.iter().map(BBox::to_array).collect(),
            phrases: s
                .phrases
                .iter()
                .map(|p| PhraseRecord {
                    tokens: p.tokens.clone(),
                    sentence_id: p.sentence_id,
                    phrase_type: p.phrase_type.clone(),
                    gt_box: p.gt_box.map(|b| b.to_array()),
                    gt_attention: p.gt_attention,
                })
                .collect(),
        };
        writeln!(out, "{}", json_line(&record)).map_err(write_err)?;
        for v in s.proposals.features.data() {
            feats.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&feat_path, e))?;
        }
        offset += s.proposals.len();
    }
    out.flush().map_err(write_err)?;
    feats.flush().map_err(|e| Error::io(&feat_path, e))?;
    Ok(())
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("manifest records serialize")
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty manifest".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if header.feature_dim == 0 {
        return Err(parse_err(1, "feature_dim must be positive".into()));
    }
    let vocab = Vocabulary::load(&parent(path).join(&header.vocab))?;
    let feat_path = parent(path).join(&header.features);
    let bytes = std::fs::read(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!("{} is not a whole number of f64 values", feat_path.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let d = header.feature_dim;
    let total_rows = values.len() / d;

    let mut samples = Vec::with_capacity(header.samples);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let n = rec.boxes.len();
        if n == 0 {
            return Err(parse_err(line_no, "image without proposals".into()));
        }
        if rec.feature_offset + n > total_rows {
            return Err(parse_err(
                line_no,
                format!("feature rows {}..{} beyond {total_rows} stored rows", rec.feature_offset, rec.feature_offset + n),
            ));
        }
        let boxes = rec
            .boxes
            .iter()
            .map(|&b| to_box(b))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        let feats = values[rec.feature_offset * d..(rec.feature_offset + n) * d].to_vec();
        let proposals = ProposalSet::new(boxes, Tensor::new(vec![n, d], feats)?)?;
        let mut phrases = Vec::with_capacity(rec.phrases.len());
        for p in rec.phrases {
            if p.tokens.is_empty() {
                return Err(parse_err(line_no, "empty phrase".into()));
            }
            if let Some(a) = p.gt_attention {
                if a >= n {
                    return Err(parse_err(line_no, format!("gt_attention {a} outside {n} proposals")));
                }
            }
            let gt_box = p.gt_box.map(to_box).transpose().map_err(|e| parse_err(line_no, e.to_string()))?;
            phrases.push(Phrase {
                tokens: p
                    .tokens
                    .into_iter()
                    .map(|t| if t < vocab.len() { t } else { UNK_ID })
                    .collect(),
                sentence_id: p.sentence_id,
                phrase_type: p.phrase_type,
                gt_box,
                gt_attention: p.gt_attention,
            });
        }
        samples.push(GroundingSample {
            image_id: rec.image_id,
            proposals,
            phrases,
        });
    }
    if samples.len() != header.samples {
        return Err(parse_err(
            1,
            format!("header declares {} samples, found {}", header.samples, samples.len()),
        ));
    }
    Ok(DatasetManifest {
        split: header.split,
        vocab_file: header.vocab,
        vocab_size: vocab.len(),
        feature_dim: d,
        samples,
    })
}
