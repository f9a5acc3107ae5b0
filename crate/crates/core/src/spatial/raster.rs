use super::{RectRegion, Result, SpatialError};

/// Single-channel image with row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SpatialError::InvalidRaster(format!(
                "empty raster {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(SpatialError::InvalidRaster(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SpatialError::InvalidRaster(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        assert!((0.0..=1.0).contains(&value));
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn bounds(&self) -> RectRegion {
        RectRegion::canvas(self.width, self.height)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }
}

/// Sub-raster covering `rect`; pixels outside the source are 0.
pub fn crop(r: &Raster, rect: &RectRegion) -> Result<Raster> {
    if !r.bounds().intersects(rect) {
        return Err(SpatialError::EmptyCrop);
    }
    let (w, h) = (rect.width() as usize, rect.height() as usize);
    let mut out = vec![0.0f32; w * h];
    let sx0 = rect.x0.max(0);
    let sx1 = rect.x1.min(r.width as i32);
    for (oy, y) in (rect.y0..rect.y1).enumerate() {
        if y < 0 || y >= r.height as i32 {
            continue;
        }
        let src = &r.data[y as usize * r.width..(y as usize + 1) * r.width];
        let dst = &mut out[oy * w..(oy + 1) * w];
        let off = (sx0 - rect.x0) as usize;
        let n = (sx1 - sx0) as usize;
        dst[off..off + n].copy_from_slice(&src[sx0 as usize..sx1 as usize]);
    }
    Ok(Raster::from_parts_unchecked(w, h, out))
}

struct Tap {
    i0: usize,
    i1: usize,
    frac: f32,
}

/// Corner-aligned sample positions: output index 0 maps to input 0 and the
/// last output index to the last input index.
fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|o| {
            let s = if n_out > 1 {
                (o * (n_in - 1)) as f64 / (n_out - 1) as f64
            } else {
                (n_in - 1) as f64 / 2.0
            };
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                frac: (s - i0 as f64) as f32,
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resize with corner alignment.
///
/// # Panics
/// If either output dimension is zero.
pub fn resize_bilinear(r: &Raster, out_w: usize, out_h: usize) -> Raster {
    assert!(out_w >= 1 && out_h >= 1, "output size must be positive");
    if out_w == r.width && out_h == r.height {
        return r.clone();
    }
    let xt = taps(r.width, out_w);
    let yt = taps(r.height, out_h);
    // horizontal pass
    let mut tmp = vec![0.0f32; out_w * r.height];
    for y in 0..r.height {
        let row = &r.data[y * r.width..(y + 1) * r.width];
        for (x, t) in xt.iter().enumerate() {
            tmp[y * out_w + x] = lerp(row[t.i0], row[t.i1], t.frac);
        }
    }
    let mut out = vec![0.0f32; out_w * out_h];
    for (y, t) in yt.iter().enumerate() {
        let a = &tmp[t.i0 * out_w..(t.i0 + 1) * out_w];
        let b = &tmp[t.i1 * out_w..(t.i1 + 1) * out_w];
        for x in 0..out_w {
            out[y * out_w + x] = lerp(a[x], b[x], t.frac);
        }
    }
    Raster::from_parts_unchecked(out_w, out_h, out)
}
