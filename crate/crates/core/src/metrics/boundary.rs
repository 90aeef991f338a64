use super::SegMask;
use crate::error::{Error, Result};

/// Pixels with at least one 4-neighbour of a different label, row-major as
/// `(row, col)`. The image border alone does not make a boundary.
pub fn boundary_of(m: &SegMask) -> Vec<(usize, usize)> {
    let (w, h) = (m.width, m.height);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = m.at(r, c);
            let differs = (r > 0 && m.at(r - 1, c) != v)
                || (r + 1 < h && m.at(r + 1, c) != v)
                || (c > 0 && m.at(r, c - 1) != v)
                || (c + 1 < w && m.at(r, c + 1) != v);
            if differs {
                out.push((r, c));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                v[k] = q;
                break;
            }
            let qf = q as f64;
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest seed on a `h × w` grid.
fn squared_distance_field(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn mean_nearest(from: &[(usize, usize)], field: &[f64], w: usize) -> f64 {
    from.iter().map(|&(r, c)| field[r * w + c].sqrt()).sum::<f64>() / from.len() as f64
}

/// Boundary displacement error: the average of the two directed mean
/// nearest-point Euclidean distances.
pub fn bde(b1: &[(usize, usize)], b2: &[(usize, usize)]) -> Result<f64> {
    if b1.is_empty() || b2.is_empty() {
        return Err(Error::Invalid("bde of an empty boundary set".into()));
    }
    let h = b1.iter().chain(b2).map(|p| p.0).max().expect("non-empty") + 1;
    let w = b1.iter().chain(b2).map(|p| p.1).max().expect("non-empty") + 1;
    let to_b2 = squared_distance_field(h, w, b2);
    let to_b1 = squared_distance_field(h, w, b1);
    Ok(0.5 * (mean_nearest(b1, &to_b2, w) + mean_nearest(b2, &to_b1, w)))
}

/// BDE between the boundaries of two masks. Two boundary-free masks score
/// 0; `None` when exactly one mask has a boundary.
pub fn bde_masks(a: &SegMask, b: &SegMask) -> Result<Option<f64>> {
    a.same_dims(b, "bde")?;
    let (ba, bb) = (boundary_of(a), boundary_of(b));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => Ok(Some(0.0)),
        (false, false) => bde(&ba, &bb).map(Some),
        _ => Ok(None),
    }
}
