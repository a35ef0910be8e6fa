//! Permutohedral lattice for fast high-dimensional Gaussian filtering.
//!
//! Points are embedded in a `d`-dimensional feature space (already divided by the kernel's
//! standard deviations), splatted onto the vertices of the enclosing lattice simplex, blurred
//! along each of the `d + 1` lattice axes with a [1 2 1] kernel, and sliced back.

use std::collections::HashMap;

pub const MAX_DIM: usize = 8;

type Key = [i32; MAX_DIM];

pub struct Lattice {
    d: usize,
    n: usize,
    /// Vertex index for each (point, simplex corner).
    offsets: Vec<usize>,
    weights: Vec<f64>,
    vertices: usize,
    /// Per axis and vertex, the two neighbours along that axis (+1 shifted, 0 = absent).
    neighbours: Vec<(usize, usize)>,
}

impl Lattice {
    /// `features` holds `n` points of dimension `d`, row-major.
    pub fn new(features: &[f64], d: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&d), "lattice dimension {d} unsupported");
        let n = features.len() / d;
        let d1 = d + 1;
        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        // canonical simplex
        let mut canonical = vec![0i32; d1 * d1];
        for i in 0..=d {
            for j in 0..=d - i {
                canonical[i * d1 + j] = i as i32;
            }
            for j in d - i + 1..=d {
                canonical[i * d1 + j] = i as i32 - d1 as i32;
            }
        }

        let mut table: HashMap<Key, usize> = HashMap::with_capacity(n * d1 / 2);
        let mut keys: Vec<Key> = Vec::new();
        let mut offsets = vec![0usize; n * d1];
        let mut weights = vec![0f64; n * d1];
        let mut elevated = vec![0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0f64; d + 2];
        let down = 1.0 / d1 as f64;

        for k in 0..n {
            let f = &features[k * d..(k + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i32;
            for i in 0..=d {
                let v = down * elevated[i];
                let up = v.ceil() * d1 as f64;
                let dn = v.floor() * d1 as f64;
                rem0[i] = if up - elevated[i] < elevated[i] - dn { up as i32 } else { dn as i32 };
                sum += rem0[i];
            }
            sum /= d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..=d {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..=d {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=d {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for remainder in 0..=d {
                let mut key = [0i32; MAX_DIM];
                for i in 0..d {
                    key[i] = rem0[i] + canonical[remainder * d1 + rank[i] as usize];
                }
                let next = keys.len();
                let idx = *table.entry(key).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                offsets[k * d1 + remainder] = idx;
                weights[k * d1 + remainder] = bary[remainder];
            }
        }

        let m = keys.len();
        let mut neighbours = vec![(0usize, 0usize); d1 * m];
        for j in 0..=d {
            for (i, key) in keys.iter().enumerate() {
                let mut n1 = [0i32; MAX_DIM];
                let mut n2 = [0i32; MAX_DIM];
                for k in 0..d {
                    n1[k] = key[k] - 1;
                    n2[k] = key[k] + 1;
                }
                if j < d {
                    n1[j] = key[j] + d as i32;
                    n2[j] = key[j] - d as i32;
                }
                let a = table.get(&n1).map_or(0, |&v| v + 1);
                let b = table.get(&n2).map_or(0, |&v| v + 1);
                neighbours[j * m + i] = (a, b);
            }
        }

        Self {
            d,
            n,
            offsets,
            weights,
            vertices: m,
            neighbours,
        }
    }

    pub fn points(&self) -> usize {
        self.n
    }

    /// Approximate Gaussian-weighted sum of `values` (`n` rows of `channels`), unnormalized.
    pub fn filter(&self, values: &[f64], channels: usize) -> Vec<f64> {
        let d1 = self.d + 1;
        let m = self.vertices;
        let vc = channels;
        let mut grid = vec![0f64; (m + 1) * vc];
        for k in 0..self.n {
            let src = &values[k * vc..(k + 1) * vc];
            for r in 0..d1 {
                let o = (self.offsets[k * d1 + r] + 1) * vc;
                let w = self.weights[k * d1 + r];
                for c in 0..vc {
                    grid[o + c] += w * src[c];
                }
            }
        }
        let mut next = vec![0f64; (m + 1) * vc];
        for j in 0..d1 {
            for i in 0..m {
                let (a, b) = self.neighbours[j * m + i];
                let o = (i + 1) * vc;
                for c in 0..vc {
                    next[o + c] = grid[o + c] + 0.5 * (grid[a * vc + c] + grid[b * vc + c]);
                }
            }
            std::mem::swap(&mut grid, &mut next);
        }
        let alpha = 1.0 / (1.0 + 2f64.powi(-(self.d as i32)));
        let mut out = vec![0f64; self.n * vc];
        for k in 0..self.n {
            let dst = &mut out[k * vc..(k + 1) * vc];
            for r in 0..d1 {
                let o = (self.offsets[k * d1 + r] + 1) * vc;
                let w = self.weights[k * d1 + r] * alpha;
                for c in 0..vc {
                    dst[c] += w * grid[o + c];
                }
            }
        }
        out
    }
}
