#![allow(dead_code)]

use rand::Rng;
use rayon::prelude::*;

use csau::connectivity::is_connected_patch;
use csau::map::Map2;
use csau::seed;

/// Per-pixel loop: window sum with explicit bounds checks, then the clamped
/// power law written out directly.
pub fn naive_map(z: &Map2, alpha: f64, beta: f64, gamma: f64, r: usize) -> Map2 {
    let (h, w) = z.dims();
    let half = (r / 2) as isize;
    let mut out = Map2::zeros(h, w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut s = 0.0;
            for a in i - half..=i + half {
                for b in j - half..=j + half {
                    if a >= 0 && b >= 0 && a < h as isize && b < w as isize {
                        s += z.get(a as usize, b as usize);
                    }
                }
            }
            let d = s / (r * r) as f64;
            let v = alpha * d.powf(beta) - gamma;
            out.set(i as usize, j as usize, v.max(0.0).min(1.0));
        }
    }
    out
}

/// Union-find labelling of the whole patch; the centre's component must
/// contain two border cells that are not 8-neighbours of each other.
pub fn oracle_connected(cells: &[bool], r: usize, any: bool) -> bool {
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let n = r * r;
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..r {
        for j in 0..r {
            if !cells[i * r + j] {
                continue;
            }
            for (di, dj) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a < r as isize && b >= 0 && b < r as isize && cells[a as usize * r + b as usize] {
                    let (x, y) = (find(&mut parent, i * r + j), find(&mut parent, a as usize * r + b as usize));
                    parent[x] = y;
                }
            }
        }
    }
    let c = (r / 2) * r + r / 2;
    if !cells[c] {
        return false;
    }
    let root = find(&mut parent, c);
    let border: Vec<(usize, usize)> = (0..n)
        .filter(|&k| cells[k] && find(&mut parent, k) == root)
        .map(|k| (k / r, k % r))
        .filter(|&(i, j)| i == 0 || j == 0 || i == r - 1 || j == r - 1)
        .collect();
    if any {
        return !border.is_empty();
    }
    border.iter().any(|&(a, b)| border.iter().any(|&(c, d)| a.abs_diff(c) > 1 || b.abs_diff(d) > 1))
}

pub fn random_patch(rng: &mut impl Rng, r: usize) -> Vec<bool> {
    let p = rng.gen_range(0.05..0.7);
    let mut cells: Vec<bool> = (0..r * r).map(|_| rng.gen_bool(p)).collect();
    cells[(r / 2) * r + r / 2] = rng.gen_bool(0.95);
    cells
}

/// The eight symmetries of the square as index maps.
pub fn dihedral(r: usize) -> Vec<Vec<usize>> {
    let t: [fn(usize, usize, usize) -> (usize, usize); 8] = [
        |i, j, _| (i, j),
        |i, j, r| (j, r - 1 - i),
        |i, j, r| (r - 1 - i, r - 1 - j),
        |i, j, r| (r - 1 - j, i),
        |i, j, r| (i, r - 1 - j),
        |i, j, r| (r - 1 - i, j),
        |i, j, _| (j, i),
        |i, j, r| (r - 1 - j, r - 1 - i),
    ];
    t.iter()
        .map(|f| {
            (0..r * r)
                .map(|k| {
                    let (a, b) = f(k / r, k % r, r);
                    a * r + b
                })
                .collect()
        })
        .collect()
}

/// Patches whose verdict changes under some symmetry, over `chunks * 10_000`
/// random 5x5 samples.
pub fn symmetry_violations(chunks: u64) -> usize {
    let r = 5;
    let maps = dihedral(r);
    (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = seed::rng(8, "dihedral", chunk);
            let mut bad = 0;
            for _ in 0..10_000 {
                let cells = random_patch(&mut rng, r);
                let base = is_connected_patch(&cells, r);
                for m in &maps[1..] {
                    let mut moved = vec![false; r * r];
                    for (k, &to) in m.iter().enumerate() {
                        moved[to] = cells[k];
                    }
                    bad += (is_connected_patch(&moved, r) != base) as usize;
                }
            }
            bad
        })
        .sum()
}
