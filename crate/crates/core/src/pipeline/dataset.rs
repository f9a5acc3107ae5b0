//! Synthetic benchmark generation and the on-disk dataset layout:
//!
//! ```text
//! DIR/manifest.json           scene specs by id, plus the held-out ids
//! DIR/images/<id>.pgm         rendered scenes
//! DIR/annotations/gt_<id>.txt annotated boxes
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::annotations::{load_annotations, save_annotations, AnnotationRecord, Source};
use super::{PipelineError, Result};
use crate::env::SceneData;
use crate::hash;
use crate::spatial::{read_pgm, read_pgm_bytes, render_scene, write_pgm_bytes, QuadBox, SceneSpec};

pub const CANVAS_W: usize = 96;
pub const CANVAS_H: usize = 64;
/// Box widths and heights (inclusive ranges, pixels) of generated text.
const BOX_W: (i32, i32) = (28, 34);
const BOX_H: (i32, i32) = (11, 14);
/// Largest vertical skew between the left and right edges.
const MAX_SKEW: i32 = 2;
const ALPHABET: &[u8] = b"ABCDEFGHJKLMNPRSTUVWXYZ";
/// Share of scenes, taken from the end, held out for evaluation.
const TEST_DIVISOR: usize = 5;

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images";
const ANNOTATIONS: &str = "annotations";

/// Which scenes of a dataset to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

pub fn scene_id(i: usize) -> String {
    format!("img_{i:04}")
}

/// Uniform integer in `[lo, hi]` from a hash.
fn pick(h: u64, lo: i32, hi: i32) -> i32 {
    lo + (hash::unit(h) * (hi - lo + 1) as f64) as i32
}

fn make_scene(i: usize, seed: u64, perturbation: i32) -> SceneSpec {
    let draw = |k: u64| hash::mix(seed, &[i as u64, k]);
    let w = pick(draw(0), BOX_W.0, BOX_W.1);
    let h = pick(draw(1), BOX_H.0, BOX_H.1);
    let skew = pick(draw(2), -MAX_SKEW, MAX_SKEW);
    let len = pick(draw(3), 3, 7) as usize;
    let transcript: String = (0..len)
        .map(|k| ALPHABET[(hash::unit(draw(10 + k as u64)) * ALPHABET.len() as f64) as usize] as char)
        .collect();
    // keep the perturbed box and most of its context on the canvas
    let margin = perturbation + MAX_SKEW + 6;
    let x0 = pick(draw(4), margin, CANVAS_W as i32 - w - margin);
    let y0 = pick(draw(5), margin, CANVAS_H as i32 - h - margin);
    let (x1, y1) = (x0 + w - 1, y0 + h - 1);
    let annotated = QuadBox::from_coords([x0, y0, x1, y0 + skew, x1, y1 + skew, x0, y1])
        .expect("generated box is at least 2x2");
    let mut c = annotated.coords();
    for (k, v) in c.iter_mut().enumerate() {
        *v += pick(draw(20 + k as u64), -perturbation, perturbation);
    }
    let optimal = QuadBox::from_coords(c).expect("perturbation keeps the box wide");
    SceneSpec {
        canvas_w: CANVAS_W,
        canvas_h: CANVAS_H,
        transcript,
        optimal_quad: optimal,
        annotated_quad: annotated,
        seed: draw(99),
    }
}

/// `n` scenes whose hidden optimum is the annotated box with every vertex
/// displaced by an integer offset in `[-perturbation, perturbation]` per axis,
/// plus ground-truth records of the annotated boxes.
pub fn make_synthetic_dataset(
    n: usize,
    seed: u64,
    perturbation: u32,
) -> Result<(Vec<SceneSpec>, Vec<AnnotationRecord>)> {
    if n == 0 {
        return Err(PipelineError::InvalidArgument("scene count must be >= 1".into()));
    }
    let p = perturbation.min(8) as i32;
    if p as u32 != perturbation {
        return Err(PipelineError::InvalidArgument(format!(
            "perturbation {perturbation} exceeds the supported maximum of 8 px"
        )));
    }
    let scenes: Vec<SceneSpec> = (0..n).map(|i| make_scene(i, seed, p)).collect();
    let records = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| AnnotationRecord {
            image_id: scene_id(i),
            quad: s.annotated_quad,
            transcript: s.transcript.clone(),
            source: Source::GroundTruth,
        })
        .collect();
    Ok((scenes, records))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    scenes: BTreeMap<String, SceneSpec>,
    /// Held-out scene ids.
    test: Vec<String>,
}

/// Scenes with their rasters and annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Scene ids in manifest order.
    pub ids: Vec<String>,
    pub scenes: HashMap<String, SceneData>,
    pub annotations: Vec<AnnotationRecord>,
    pub test_ids: Vec<String>,
}

impl Dataset {
    /// Generates a dataset. Rasters go through 8-bit quantization so they
    /// match what [`Dataset::load`] reads back from disk.
    pub fn generate(n: usize, seed: u64, perturbation: u32) -> Result<Self> {
        let (specs, annotations) = make_synthetic_dataset(n, seed, perturbation)?;
        let ids: Vec<String> = (0..n).map(scene_id).collect();
        let mut scenes = HashMap::with_capacity(n);
        for (id, spec) in ids.iter().zip(specs) {
            let raster = read_pgm_bytes(&write_pgm_bytes(&render_scene(&spec)))?;
            scenes.insert(
                id.clone(),
                SceneData {
                    spec: Arc::new(spec),
                    raster: Arc::new(raster),
                },
            );
        }
        let test_ids = ids[n - n / TEST_DIVISOR..].to_vec();
        Ok(Self {
            ids,
            scenes,
            annotations,
            test_ids,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join(IMAGES))?;
        let manifest = Manifest {
            scenes: self
                .ids
                .iter()
                .map(|id| (id.clone(), (*self.scenes[id].spec).clone()))
                .collect(),
            test: self.test_ids.clone(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST), json)?;
        for id in &self.ids {
            fs::write(
                dir.join(IMAGES).join(format!("{id}.pgm")),
                write_pgm_bytes(&self.scenes[id].raster),
            )?;
        }
        save_annotations(&self.annotations, dir.join(ANNOTATIONS))
    }

    /// Reads a dataset directory. Scenes whose image file is absent are left
    /// out of `scenes`; records referring to them surface as missing images
    /// when adjusted.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::BadManifest(e.to_string()))?;
        let mut scenes = HashMap::new();
        for (id, spec) in &manifest.scenes {
            spec.validate()
                .map_err(|e| PipelineError::BadManifest(format!("{id}: {e}")))?;
            let path = dir.join(IMAGES).join(format!("{id}.pgm"));
            if !path.exists() {
                continue;
            }
            let raster = read_pgm(&path)?;
            if (raster.width(), raster.height()) != (spec.canvas_w, spec.canvas_h) {
                return Err(PipelineError::BadManifest(format!(
                    "{id}: image is {}x{}, manifest says {}x{}",
                    raster.width(),
                    raster.height(),
                    spec.canvas_w,
                    spec.canvas_h
                )));
            }
            scenes.insert(
                id.clone(),
                SceneData {
                    spec: Arc::new(spec.clone()),
                    raster: Arc::new(raster),
                },
            );
        }
        let ann_dir = dir.join(ANNOTATIONS);
        let annotations = if ann_dir.exists() {
            load_annotations(&ann_dir)?
        } else {
            vec![]
        };
        Ok(Self {
            ids: manifest.scenes.keys().cloned().collect(),
            scenes,
            annotations,
            test_ids: manifest.test,
        })
    }

    pub fn in_split(&self, id: &str, split: Split) -> bool {
        let test = self.test_ids.iter().any(|t| t == id);
        match split {
            Split::All => true,
            Split::Test => test,
            Split::Train => !test,
        }
    }

    /// Scenes of a split in manifest order, skipping those without an image.
    pub fn scene_list(&self, split: Split) -> Vec<SceneData> {
        self.ids
            .iter()
            .filter(|id| self.in_split(id, split))
            .filter_map(|id| self.scenes.get(id).cloned())
            .collect()
    }

    pub fn annotations_in(&self, split: Split) -> Vec<AnnotationRecord> {
        self.annotations
            .iter()
            .filter(|r| self.in_split(&r.image_id, split))
            .cloned()
            .collect()
    }
}
