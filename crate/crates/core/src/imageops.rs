//! 2-D helpers shared by cropping, gating and rendering.

use ndarray::{Array2, ArrayView2};

use crate::engine::{kernels, Tensor};

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (ih, iw) = img.dim();
    if (ih, iw) == (h, w) {
        return img.to_owned();
    }
    let t = Tensor::from_vec([1, 1, ih, iw], img.iter().copied().collect());
    let r = kernels::resize_bilinear(&t, h, w);
    Array2::from_shape_vec((h, w), r.into_vec()).expect("resize output size")
}

fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
}

/// Nearest-neighbour resize for label masks.
pub fn resize_nearest<T: Copy>(img: ArrayView2<T>, h: usize, w: usize) -> Array2<T> {
    let (ih, iw) = img.dim();
    let ys: Vec<usize> = (0..h).map(|o| nearest_index(o, ih, h)).collect();
    let xs: Vec<usize> = (0..w).map(|o| nearest_index(o, iw, w)).collect();
    Array2::from_shape_fn((h, w), |(y, x)| img[[ys[y], xs[x]]])
}

/// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of the nonzero
/// pixels, or `None` for an empty mask.
pub fn bbox(mask: ArrayView2<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v != 0 {
            b = Some(match b {
                None => (y, x, y + 1, x + 1),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
            });
        }
    }
    b
}

/// Labels 8-connected components; returns the label image (0 background)
/// and the pixel count of each component (index `label − 1`).
pub fn connected_components(mask: ArrayView2<u8>) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != 0 {
                continue;
            }
            sizes.push(0);
            let id = sizes.len() as u32;
            labels[[y, x]] = id;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                sizes[id as usize - 1] += 1;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, sizes)
}

pub fn largest_component_size(mask: ArrayView2<u8>) -> usize {
    connected_components(mask).1.into_iter().max().unwrap_or(0)
}

/// Keeps only the largest 8-connected component.
pub fn keep_largest_component(mask: ArrayView2<u8>) -> Array2<u8> {
    let (labels, sizes) = connected_components(mask);
    let Some(best) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
        return mask.to_owned();
    };
    labels.mapv(|l| u8::from(l == best as u32 + 1))
}

pub fn threshold(p: ArrayView2<f32>, t: f32) -> Array2<u8> {
    p.mapv(|v| u8::from(v >= t))
}
