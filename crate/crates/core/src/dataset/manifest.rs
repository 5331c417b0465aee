//! Dataset manifests: JSON Lines with a header line.
//!
//! ```text
//! {"schema_version": 1}
//! {"image": "images/0001.png", "keywords": "drusen; myopia", "description": "..."}
//! ```
//!
//! `image` is resolved relative to the manifest's directory and must exist.
//! `keywords` is a `;`-separated label list and may be empty. An optional
//! `id` overrides the sample id (default: the image file stem). An optional
//! `split` (`train`, `val` or `test`) pins the record to a split.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub sample_id: String,
    /// Path as written in the manifest.
    pub image: String,
    /// Path resolved against the manifest directory.
    pub image_path: PathBuf,
    pub keywords: Vec<String>,
    pub description: String,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Deserialize)]
struct Header {
    schema_version: u32,
}

#[derive(Deserialize)]
struct RawRecord {
    image: Option<String>,
    keywords: Option<String>,
    description: Option<String>,
    id: Option<String>,
    split: Option<Split>,
}

/// Splits a `;`-separated keyword string into trimmed, non-empty labels.
pub fn split_keywords(s: &str) -> Vec<String> {
    s.split(';')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn load_manifest(path: &Path, schema_version: u32) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, base, schema_version)
}

pub fn parse_manifest(
    text: &str,
    path: &Path,
    base: &Path,
    schema_version: u32,
) -> Result<DatasetManifest> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty manifest".into()))?;
    let header: Header =
        serde_json::from_str(header).map_err(|e| parse_err(hline + 1, format!("header: {e}")))?;
    if header.schema_version != schema_version {
        return Err(parse_err(
            hline + 1,
            format!(
                "schema_version {} (expected {schema_version})",
                header.schema_version
            ),
        ));
    }

    let mut records = Vec::new();
    let mut seen_images = HashSet::new();
    let mut seen_ids = HashSet::new();
    for (index, (lineno, line)) in lines.enumerate() {
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| parse_err(lineno + 1, e.to_string()))?;
        let missing = |field: &str| Error::Record {
            index,
            msg: format!("missing field {field:?} (line {})", lineno + 1),
        };
        let image = raw.image.ok_or_else(|| missing("image"))?;
        let keywords = raw.keywords.ok_or_else(|| missing("keywords"))?;
        let description = raw.description.ok_or_else(|| missing("description"))?;
        let image_path = base.join(&image);
        if !image_path.exists() {
            return Err(Error::Record {
                index,
                msg: format!("image {} does not exist", image_path.display()),
            });
        }
        if !seen_images.insert(image.clone()) {
            return Err(Error::Record {
                index,
                msg: format!("duplicate image path {image}"),
            });
        }
        let sample_id = raw.id.unwrap_or_else(|| {
            Path::new(&image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| image.clone())
        });
        if !seen_ids.insert(sample_id.clone()) {
            return Err(Error::Record {
                index,
                msg: format!("duplicate sample id {sample_id}"),
            });
        }
        records.push(ManifestRecord {
            sample_id,
            image,
            image_path,
            keywords: split_keywords(&keywords),
            description,
            split: raw.split,
        });
    }
    Ok(DatasetManifest {
        path: path.to_path_buf(),
        records,
    })
}

/// Renders a manifest back to its file form.
pub fn write_manifest(records: &[ManifestRecord]) -> String {
    let mut out = format!("{{\"schema_version\": {SCHEMA_VERSION}}}\n");
    for r in records {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), r.sample_id.clone().into());
        obj.insert("image".into(), r.image.clone().into());
        obj.insert("keywords".into(), r.keywords.join("; ").into());
        obj.insert("description".into(), r.description.clone().into());
        if let Some(s) = r.split {
            obj.insert("split".into(), s.to_string().into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

/// Keyword overlay: one JSON object per line, `{"id": ..., "keywords": "a; b"}`.
/// Lets a run swap expert keywords for predicted ones without touching the
/// manifest.
pub fn write_overlay(entries: &BTreeMap<String, Vec<String>>) -> String {
    let mut out = String::new();
    for (id, kws) in entries {
        let v = serde_json::json!({ "id": id, "keywords": kws.join("; ") });
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_overlay(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    #[derive(Deserialize)]
    struct Entry {
        id: String,
        keywords: String,
    }
    let mut out = BTreeMap::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let e: Entry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(e.id, split_keywords(&e.keywords));
    }
    Ok(out)
}

impl DatasetManifest {
    /// Replaces keyword lists for every record named in the overlay.
    pub fn apply_overlay(&mut self, overlay: &BTreeMap<String, Vec<String>>) {
        for r in &mut self.records {
            if let Some(k) = overlay.get(&r.sample_id) {
                r.keywords = k.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(records: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("img")).unwrap();
        for i in 1..=3 {
            std::fs::write(dir.path().join(format!("img/{i}.png")), b"").unwrap();
        }
        let mut text = String::from("{\"schema_version\": 1}\n");
        for r in records {
            text.push_str(r);
            text.push('\n');
        }
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn keywords_split_and_trimmed() {
        let (_d, p) = setup(&[
            r#"{"image":"img/1.png","keywords":"retinal hemorrhage; DR","description":"x"}"#,
            r#"{"image":"img/2.png","keywords":"","description":"y"}"#,
        ]);
        let m = load_manifest(&p, 1).unwrap();
        assert_eq!(m.records[0].keywords, ["retinal hemorrhage", "DR"]);
        assert!(m.records[1].keywords.is_empty());
        assert_eq!(m.records[0].sample_id, "1");
    }

    #[test]
    fn missing_description_names_record() {
        let (_d, p) = setup(&[
            r#"{"image":"img/1.png","keywords":"a","description":"x"}"#,
            r#"{"image":"img/2.png","keywords":"a"}"#,
        ]);
        match load_manifest(&p, 1) {
            Err(Error::Record { index, msg }) => {
                assert_eq!(index, 1);
                assert!(msg.contains("description"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_and_duplicate_images_rejected() {
        let (_d, p) = setup(&[r#"{"image":"img/9.png","keywords":"","description":"x"}"#]);
        assert!(matches!(load_manifest(&p, 1), Err(Error::Record { .. })));
        let (_d, p) = setup(&[
            r#"{"image":"img/1.png","keywords":"","description":"x"}"#,
            r#"{"image":"img/1.png","keywords":"","description":"y","id":"other"}"#,
        ]);
        assert!(matches!(
            load_manifest(&p, 1),
            Err(Error::Record { index: 1, .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let (_d, p) = setup(&[
            r#"{"image":"img/1.png","keywords":"","description":"x"}"#,
            r#"{"image": oops"#,
        ]);
        assert!(matches!(
            load_manifest(&p, 1),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn schema_version_checked() {
        let (_d, p) = setup(&[]);
        assert!(load_manifest(&p, 2).is_err());
    }

    #[test]
    fn overlay_round_trip_and_apply() {
        let (_d, p) = setup(&[r#"{"image":"img/1.png","keywords":"a","description":"x"}"#]);
        let mut m = load_manifest(&p, 1).unwrap();
        let mut ov = BTreeMap::new();
        ov.insert("1".to_string(), vec!["b".to_string(), "c d".to_string()]);
        let parsed = parse_overlay(&write_overlay(&ov), Path::new("o")).unwrap();
        assert_eq!(parsed, ov);
        m.apply_overlay(&parsed);
        assert_eq!(m.records[0].keywords, ["b", "c d"]);
    }
}
