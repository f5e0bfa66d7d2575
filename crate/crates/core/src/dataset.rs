//! JSON-lines scene files.
//!
//! One scene per line:
//! `{"regions": [{"feat": [...], "box": [x0, y0, x1, y1], "size": S}], "refs": [[...], ...]}`.
//! Generated scenes also carry `"label": [color, category]` per region and a
//! top-level `"relation": {"label", "subject", "object"}`; both are optional
//! on input.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::RegionSet;
use crate::scenes::{BBox, CaptionPair, Relation, SceneObject, SceneSpec, CATEGORIES, COLORS};
use crate::tensor::Tensor;

/// Boxes are normalized, so `size` must be the box area.
const AREA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid scene: {message}")]
    Invalid { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    feat: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<[String; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RelationRecord {
    label: String,
    subject: usize,
    object: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    regions: Vec<RegionRecord>,
    refs: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation: Option<RelationRecord>,
}

fn to_record(pair: &CaptionPair) -> SceneRecord {
    let a = pair.regions.appearance();
    let g = pair.regions.geometry();
    let regions = (0..pair.regions.len())
        .map(|i| {
            let geo = g.row_slice(i);
            RegionRecord {
                feat: a.row_slice(i).to_vec(),
                bbox: [geo[0], geo[1], geo[2], geo[3]],
                size: geo[4],
                label: pair.scene.as_ref().map(|s| {
                    let [c, k] = s.objects[i].mention();
                    [c.to_string(), k.to_string()]
                }),
            }
        })
        .collect();
    SceneRecord {
        regions,
        refs: pair.references.clone(),
        relation: pair.scene.as_ref().map(|s| RelationRecord {
            label: s.relation.label().to_string(),
            subject: s.subject,
            object: s.object,
        }),
    }
}

fn from_record(rec: SceneRecord, line: usize) -> Result<CaptionPair, DatasetError> {
    let invalid = |message: String| DatasetError::Invalid { line, message };
    if rec.regions.is_empty() {
        return Err(invalid("no regions".into()));
    }
    if rec.refs.is_empty() {
        return Err(invalid("no references".into()));
    }
    let d = rec.regions[0].feat.len();
    if d == 0 || rec.regions.iter().any(|r| r.feat.len() != d) {
        return Err(invalid("feature rows must share one nonzero width".into()));
    }
    for (i, r) in rec.regions.iter().enumerate() {
        let [x0, y0, x1, y1] = r.bbox;
        let area = (x1 - x0) * (y1 - y0);
        if (r.size - area).abs() > AREA_TOLERANCE {
            return Err(invalid(format!("region {i}: size {} is not the box area {area}", r.size)));
        }
    }
    let feats: Vec<f64> = rec.regions.iter().flat_map(|r| r.feat.iter().copied()).collect();
    let geo: Vec<f64> = rec
        .regions
        .iter()
        .flat_map(|r| r.bbox.iter().copied().chain([r.size]))
        .collect();
    let n = rec.regions.len();
    let appearance = Tensor::new(&[n, d], feats).map_err(|e| invalid(e.to_string()))?;
    let geometry = Tensor::new(&[n, 5], geo).map_err(|e| invalid(e.to_string()))?;
    let regions = RegionSet::new(appearance, geometry).map_err(|e| invalid(e.to_string()))?;

    let scene = match (&rec.relation, rec.regions.iter().all(|r| r.label.is_some())) {
        (Some(rel), true) => {
            let relation = Relation::from_label(&rel.label)
                .ok_or_else(|| invalid(format!("unknown relation {:?}", rel.label)))?;
            let mut objects = Vec::with_capacity(n);
            for r in &rec.regions {
                let [c, k] = r.label.as_ref().expect("checked above");
                let color = COLORS
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| invalid(format!("unknown color {c:?}")))?;
                let category = CATEGORIES
                    .iter()
                    .position(|x| x == k)
                    .ok_or_else(|| invalid(format!("unknown category {k:?}")))?;
                objects.push(SceneObject {
                    category,
                    color,
                    bbox: BBox::from_array(r.bbox),
                });
            }
            if rel.subject >= n || rel.object >= n {
                return Err(invalid("relation index out of range".into()));
            }
            Some(SceneSpec {
                objects,
                relation,
                subject: rel.subject,
                object: rel.object,
            })
        }
        _ => None,
    };
    Ok(CaptionPair {
        regions,
        references: rec.refs,
        scene,
    })
}

pub fn write_jsonl<W: Write>(pairs: &[CaptionPair], mut out: W) -> Result<(), DatasetError> {
    for pair in pairs {
        let line = serde_json::to_string(&to_record(pair)).map_err(|e| DatasetError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<CaptionPair>, DatasetError> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        pairs.push(from_record(rec, i + 1)?);
    }
    if pairs.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(pairs)
}

pub fn save(pairs: &[CaptionPair], path: &std::path::Path) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    write_jsonl(pairs, std::io::BufWriter::new(file))
}

pub fn load(path: &std::path::Path) -> Result<Vec<CaptionPair>, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate, GenerateParams};

    #[test]
    fn round_trip_is_lossless() {
        let pairs = generate(&GenerateParams {
            n_scenes: 40,
            ..GenerateParams::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(&pairs, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.references, b.references);
            assert_eq!(a.scene, b.scene);
            assert!(a.regions.appearance().max_abs_diff(b.regions.appearance()) <= 1e-12);
            assert!(a.regions.geometry().max_abs_diff(b.regions.geometry()) <= 1e-12);
        }
    }

    #[test]
    fn minimal_records_are_accepted() {
        let line = r#"{"regions":[{"feat":[1,2],"box":[0.1,0.1,0.5,0.5],"size":0.16}],"refs":[["a","cat"]]}"#;
        let pairs = read_jsonl(line.as_bytes()).unwrap();
        assert!(pairs[0].scene.is_none());
    }

    #[test]
    fn bad_size_is_rejected_with_line_number() {
        let text = "\n{\"regions\":[{\"feat\":[1],\"box\":[0.1,0.1,0.5,0.5],\"size\":0.5}],\"refs\":[[\"a\"]]}";
        match read_jsonl(text.as_bytes()) {
            Err(DatasetError::Invalid { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
