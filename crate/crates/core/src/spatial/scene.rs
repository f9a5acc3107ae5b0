use serde::{Deserialize, Serialize};

use super::{QuadBox, Raster, RectRegion, Result, SpatialError};
use crate::hash;

const NOISE_MAX: f64 = 0.2;
const INK_MIN: f64 = 0.7;
const INK_SPAN: f64 = 0.3;
const INK_SALT: u64 = 0x1A2B_3C4D_5E6F_7081;

/// Synthetic scene: a noisy canvas with one text instance whose characters
/// are painted inside the hidden `optimal_quad`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub transcript: String,
    pub optimal_quad: QuadBox,
    pub annotated_quad: QuadBox,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_w == 0 || self.canvas_h == 0 {
            return Err(SpatialError::InvalidScene("empty canvas".into()));
        }
        if self.transcript.is_empty() {
            return Err(SpatialError::InvalidScene("empty transcript".into()));
        }
        let canvas = self.canvas();
        for (name, q) in [
            ("optimal_quad", &self.optimal_quad),
            ("annotated_quad", &self.annotated_quad),
        ] {
            if !q.inside(&canvas) {
                return Err(SpatialError::InvalidScene(format!(
                    "{name} leaves the {}x{} canvas",
                    self.canvas_w, self.canvas_h
                )));
            }
        }
        Ok(())
    }

    pub fn canvas(&self) -> RectRegion {
        RectRegion::canvas(self.canvas_w, self.canvas_h)
    }

    /// Number of characters in the transcript.
    pub fn text_len(&self) -> usize {
        self.transcript.chars().count()
    }
}

type P = (f64, f64);

fn lerp(a: P, b: P, t: f64) -> P {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn on_segment(p: P, a: P, b: P) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    if cross.abs() > 1e-9 {
        return false;
    }
    p.0 >= a.0.min(b.0) - 1e-9
        && p.0 <= a.0.max(b.0) + 1e-9
        && p.1 >= a.1.min(b.1) - 1e-9
        && p.1 <= a.1.max(b.1) + 1e-9
}

/// Point-in-polygon with the boundary counted as inside.
fn covers(poly: &[P; 4], p: P) -> bool {
    let mut inside = false;
    for i in 0..4 {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        if on_segment(p, a, b) {
            return true;
        }
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Character cells: the optimal quad split into `n` equal slices along its
/// width, each shrunk by about one pixel on both sides so neighbours never touch.
fn character_cells(q: &QuadBox, n: usize) -> Vec<[P; 4]> {
    let v = q.vertices();
    let f = |i: usize| (v[i].x as f64, v[i].y as f64);
    let (tl, tr, br, bl) = (f(0), f(1), f(2), f(3));
    let top = (tr.0 - tl.0).hypot(tr.1 - tl.1);
    let bottom = (br.0 - bl.0).hypot(br.1 - bl.1);
    let gap = 1.0 / top.min(bottom).max(1.0);
    (0..n)
        .filter_map(|k| {
            let u0 = k as f64 / n as f64 + if k == 0 { 0.0 } else { gap };
            let u1 = (k + 1) as f64 / n as f64 - if k + 1 == n { 0.0 } else { gap };
            (u1 > u0).then(|| [lerp(tl, tr, u0), lerp(tl, tr, u1), lerp(bl, br, u1), lerp(bl, br, u0)])
        })
        .collect()
}

/// Deterministic rendering of a scene.
///
/// Background pixels get hashed noise in `[0, 0.2]`; character cells get a
/// hashed ink pattern in `[0.7, 1.0]`. Every value comes from integer hashing
/// of `(seed, x, y)` so the output is identical across platforms.
pub fn render_scene(spec: &SceneSpec) -> Raster {
    let (w, h) = (spec.canvas_w, spec.canvas_h);
    let mut data = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let n = hash::unit(hash::mix(spec.seed, &[x as u64, y as u64]));
            data[y * w + x] = (n * NOISE_MAX) as f32;
        }
    }
    let cells = character_cells(&spec.optimal_quad, spec.text_len().max(1));
    let r = spec.optimal_quad.enclosing_rect();
    for y in r.y0.max(0)..r.y1.min(h as i32) {
        for x in r.x0.max(0)..r.x1.min(w as i32) {
            let p = (x as f64, y as f64);
            if cells.iter().any(|c| covers(c, p)) {
                let u = hash::unit(hash::mix(spec.seed ^ INK_SALT, &[x as u64, y as u64]));
                data[y as usize * w + x as usize] = (INK_MIN + INK_SPAN * u) as f32;
            }
        }
    }
    Raster::from_parts_unchecked(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::Point;

    fn spec(transcript: &str, q: [i32; 8]) -> SceneSpec {
        let quad = QuadBox::from_coords(q).unwrap();
        SceneSpec {
            canvas_w: 64,
            canvas_h: 48,
            transcript: transcript.into(),
            optimal_quad: quad,
            annotated_quad: quad.translate(1, 0),
            seed: 1234,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = spec("ABC", [10, 10, 40, 12, 41, 24, 9, 22]);
        assert_eq!(render_scene(&s), render_scene(&s.clone()));
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(render_scene(&s), render_scene(&other));
    }

    #[test]
    fn text_is_brighter_inside_quad() {
        let s = spec("HELLO", [8, 10, 50, 10, 50, 22, 8, 22]);
        let r = render_scene(&s);
        let rect = s.optimal_quad.enclosing_rect();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for y in 0..r.height() {
            for x in 0..r.width() {
                let v = r.get(x, y) as f64;
                if rect.contains(Point::new(x as i32, y as i32)) {
                    inside += v;
                    n_in += 1;
                } else {
                    outside += v;
                    n_out += 1;
                }
            }
        }
        assert!(inside / n_in as f64 > outside / n_out as f64 + 0.3);
    }

    fn components_on_midline(r: &Raster, q: &QuadBox) -> usize {
        let (w, h) = (r.width(), r.height());
        let mut label = vec![0usize; w * h];
        let mut next = 0;
        for start in 0..w * h {
            if label[start] != 0 || r.data()[start] <= 0.5 {
                continue;
            }
            next += 1;
            let mut stack = vec![start];
            label[start] = next;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if label[j] == 0 && r.data()[j] > 0.5 {
                        label[j] = next;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        let v = q.vertices();
        let a = ((v[0].x + v[3].x) as f64 / 2.0, (v[0].y + v[3].y) as f64 / 2.0);
        let b = ((v[1].x + v[2].x) as f64 / 2.0, (v[1].y + v[2].y) as f64 / 2.0);
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..=400 {
            let t = s as f64 / 400.0;
            let x = (a.0 + (b.0 - a.0) * t).round() as usize;
            let y = (a.1 + (b.1 - a.1) * t).round() as usize;
            let l = label[y * w + x];
            if l != 0 {
                seen.insert(l);
            }
        }
        seen.len()
    }

    #[test]
    fn one_component_per_character() {
        let s = spec("ABC", [10, 10, 40, 11, 40, 23, 10, 22]);
        let r = render_scene(&s);
        assert_eq!(components_on_midline(&r, &s.optimal_quad), 3);
        let s = spec("WORDS", [6, 8, 56, 8, 55, 30, 7, 30]);
        let r = render_scene(&s);
        assert_eq!(components_on_midline(&r, &s.optimal_quad), 5);
    }

    #[test]
    fn validate_catches_bad_specs() {
        let mut s = spec("A", [10, 10, 40, 11, 40, 23, 10, 22]);
        assert!(s.validate().is_ok());
        s.transcript.clear();
        assert!(s.validate().is_err());
        let mut s = spec("A", [10, 10, 40, 11, 40, 23, 10, 22]);
        s.canvas_w = 30;
        assert!(s.validate().is_err());
    }
}
