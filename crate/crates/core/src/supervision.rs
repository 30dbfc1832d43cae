//! Edge images and edge distance maps used to supervise the edge branch.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Object {
    Liver,
    Tumor,
}

/// `1 − d/max(d)` inside the object, 0 outside, where `d` is the Euclidean
/// distance to the object's edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDistanceMap {
    pub values: Array2<f64>,
    pub object: Object,
}

/// Mask pixels with at least one 4-neighbour outside the mask. Pixels on
/// the image border count as having an outside neighbour.
pub fn mask_edge(mask: ArrayView2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[[y, x]] == 0 {
            return 0;
        }
        let (y, x) = (y as isize, x as isize);
        let interior = inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1);
        u8::from(!interior)
    })
}

/// Exact squared distance transform of a 1-D sampled function
/// (lower envelope of parabolas). Infinite samples never enter the envelope.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else { break };
            let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest edge pixel.
pub fn distance_transform(edge: ArrayView2<u8>) -> Result<Array2<f64>> {
    if edge.iter().all(|&e| e == 0) {
        return Err(Error::EmptyEdge);
    }
    let (h, w) = edge.dim();
    let mut sq = edge.mapv(|e| if e != 0 { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        col.iter_mut().zip(sq.column(x)).for_each(|(c, &s)| *c = s);
        dt_1d(&col, &mut out[..h], &mut v, &mut z);
        sq.column_mut(x).iter_mut().zip(&out[..h]).for_each(|(s, &o)| *s = o);
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.iter_mut().zip(sq.row(y)).for_each(|(r, &s)| *r = s);
        dt_1d(&row, &mut out[..w], &mut v, &mut z);
        sq.row_mut(y).iter_mut().zip(&out[..w]).for_each(|(s, &o)| *s = o);
    }
    Ok(sq.mapv_into(f64::sqrt))
}

pub fn edge_distance_map(mask: ArrayView2<u8>, object: Object) -> EdgeDistanceMap {
    let edge = mask_edge(mask);
    let values = match distance_transform(edge.view()) {
        Err(_) => Array2::zeros(mask.dim()),
        Ok(d) => {
            let mut m = d;
            Zip::from(&mut m).and(mask).for_each(|m, &k| {
                if k == 0 {
                    *m = 0.0
                }
            });
            let max = m.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                Zip::from(&mut m).and(mask).for_each(|m, &k| {
                    *m = if k != 0 { 1.0 - *m / max } else { 0.0 };
                });
                m
            } else {
                mask.mapv(|k| f64::from(u8::from(k != 0)))
            }
        }
    };
    EdgeDistanceMap { values, object }
}

/// Writes `round(65535·v)` as a 16-bit grayscale PNG.
pub fn save_png16(map: &EdgeDistanceMap, path: &Path) -> Result<()> {
    let (h, w) = map.values.dim();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> =
        map.values.iter().flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes()).collect();
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(&bytes))
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
