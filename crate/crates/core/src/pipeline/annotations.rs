//! ICDAR-style annotation files: one text instance per line,
//! `x1,y1,x2,y2,x3,y3,x4,y4,transcript`.
//!
//! A dataset is a directory of `gt_<image_id>.txt` files; a single file is
//! also accepted, its image id taken from the file name.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::spatial::QuadBox;

const GT_PREFIX: &str = "gt_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GroundTruth,
    PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub quad: QuadBox,
    /// May be empty for pseudo-labels.
    pub transcript: String,
    pub source: Source,
}

/// Parses one annotation line. The transcript is everything after the 8th
/// comma and may itself contain commas.
pub fn parse_line(line: &str, image_id: &str, line_no: usize) -> Result<AnnotationRecord> {
    let malformed = |msg: String| PipelineError::MalformedAnnotation {
        file: image_id.to_string(),
        line: line_no,
        msg,
    };
    let mut parts = line.splitn(9, ',');
    let mut c = [0i32; 8];
    for (i, slot) in c.iter_mut().enumerate() {
        let field = parts
            .next()
            .ok_or_else(|| malformed(format!("expected 8 coordinates, found {i}")))?;
        *slot = field
            .trim()
            .parse()
            .map_err(|_| malformed(format!("coordinate {} is not an integer: {field:?}", i + 1)))?;
    }
    let transcript = parts
        .next()
        .ok_or_else(|| malformed("missing transcript field after the 8th coordinate".into()))?;
    let quad = QuadBox::from_coords(c).map_err(|e| malformed(e.to_string()))?;
    Ok(AnnotationRecord {
        image_id: image_id.to_string(),
        quad,
        transcript: transcript.to_string(),
        source: Source::GroundTruth,
    })
}

pub fn format_line(r: &AnnotationRecord) -> String {
    let mut s = String::new();
    for v in r.quad.coords() {
        write!(s, "{v},").expect("writing to a String");
    }
    s.push_str(&r.transcript);
    s
}

/// Image id for an annotation file: the file stem without a `gt_` prefix.
pub fn image_id_of(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_prefix(GT_PREFIX).unwrap_or(&stem).to_string()
}

pub fn annotation_file_name(image_id: &str) -> String {
    format!("{GT_PREFIX}{image_id}.txt")
}

pub fn parse_annotations(text: &str, image_id: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l.strip_suffix('\r').unwrap_or(l), image_id, i + 1))
        .collect()
}

fn load_file(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let bytes = fs::read(path)?;
    let id = image_id_of(path);
    let text = String::from_utf8(bytes).map_err(|_| PipelineError::MalformedAnnotation {
        file: id.clone(),
        line: 0,
        msg: "file is not UTF-8".into(),
    })?;
    parse_annotations(&text, &id)
}

/// `*.txt` files of a directory in name order.
fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"));
    files.sort();
    Ok(files)
}

/// Loads a single annotation file, or every `*.txt` file of a directory in
/// name order.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut out = vec![];
        for f in annotation_files(path)? {
            out.extend(load_file(&f)?);
        }
        Ok(out)
    } else {
        load_file(path)
    }
}

fn render(records: &[&AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format_line(r));
        s.push('\n');
    }
    s
}

/// Writes records to `path`. A path ending in `.txt` receives every record;
/// any other path is treated as a directory with one `gt_<id>.txt` per image,
/// in first-appearance order of the ids.
pub fn save_annotations(records: &[AnnotationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "txt") && !path.is_dir() {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, render(&records.iter().collect::<Vec<_>>()))?;
        return Ok(());
    }
    fs::create_dir_all(path)?;
    let mut ids: Vec<&str> = vec![];
    for r in records {
        if !ids.contains(&r.image_id.as_str()) {
            ids.push(&r.image_id);
        }
    }
    for id in ids {
        let group: Vec<&AnnotationRecord> = records.iter().filter(|r| r.image_id == id).collect();
        fs::write(path.join(annotation_file_name(id)), render(&group))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_basic_line() {
        let r = parse_line("0,0,10,0,10,5,0,5,HELLO", "img", 1).unwrap();
        assert_eq!(r.quad.coords(), [0, 0, 10, 0, 10, 5, 0, 5]);
        assert_eq!(r.transcript, "HELLO");
        assert_eq!(r.source, Source::GroundTruth);
    }

    #[test]
    fn transcript_keeps_commas() {
        let line = "1,2,11,2,11,9,1,9,A,B";
        let r = parse_line(line, "img", 1).unwrap();
        assert_eq!(r.transcript, "A,B");
        assert_eq!(format_line(&r), line);
    }

    #[test]
    fn empty_transcript_is_allowed() {
        let r = parse_line("1,2,11,2,11,9,1,9,", "img", 1).unwrap();
        assert_eq!(r.transcript, "");
    }

    #[test]
    fn seven_coordinates_fail_at_their_line() {
        let text = "0,0,10,0,10,5,0,5,OK\n0,0,10,0,10,5,0\n";
        match parse_annotations(text, "img") {
            Err(PipelineError::MalformedAnnotation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_line("0,0,10,x,10,5,0,5,T", "img", 3).is_err());
    }

    #[test]
    fn file_and_directory_round_trips_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let text = "3,4,30,4,30,16,3,16,FOO,BAR\n5,6,20,6,20,12,5,12,\n";
        let f = dir.path().join("gt_scene_7.txt");
        fs::write(&f, text).unwrap();
        let recs = load_annotations(&f).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.image_id == "scene_7"));

        let out = dir.path().join("copy.txt");
        save_annotations(&recs, &out).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), text);

        let tree = dir.path().join("tree");
        save_annotations(&recs, &tree).unwrap();
        assert_eq!(fs::read_to_string(tree.join("gt_scene_7.txt")).unwrap(), text);
        assert_eq!(load_annotations(&tree).unwrap(), recs);
    }
}
