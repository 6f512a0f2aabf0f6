//! Monte-Carlo patches and the eight-connectivity decision.

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

/// How many border contacts of the centre's component count as "connected".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConnectedRule {
    /// Two border pixels of the centre's 8-component that are not themselves
    /// 8-adjacent: a structure running through the centre, not a dead end.
    #[default]
    NonAdjacentContacts,
    /// Any border pixel reachable from the centre.
    AnyContact,
}

/// One random `r x r` patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub r: usize,
    /// Row-major cells, `true` = foreground.
    pub cells: Vec<bool>,
    pub density: f64,
    pub connected: bool,
}

/// Default-rule connectivity of a square patch given row-major cells.
pub fn is_connected_patch(cells: &[bool], r: usize) -> bool {
    is_connected_patch_with(cells, r, ConnectedRule::default())
}

pub fn is_connected_patch_with(cells: &[bool], r: usize, rule: ConnectedRule) -> bool {
    assert_eq!(cells.len(), r * r, "patch must be r x r");
    let c = r / 2;
    if !cells[c * r + c] {
        return false;
    }
    let mut seen = vec![false; r * r];
    let mut stack = vec![(c, c)];
    seen[c * r + c] = true;
    let mut border: Vec<(usize, usize)> = Vec::new();
    while let Some((i, j)) = stack.pop() {
        if i == 0 || j == 0 || i == r - 1 || j == r - 1 {
            if rule == ConnectedRule::AnyContact {
                return true;
            }
            if border.iter().any(|&(a, b)| a.abs_diff(i) > 1 || b.abs_diff(j) > 1) {
                return true;
            }
            border.push((i, j));
        }
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a < 0 || b < 0 || a >= r as isize || b >= r as isize {
                    continue;
                }
                let at = a as usize * r + b as usize;
                if cells[at] && !seen[at] {
                    seen[at] = true;
                    stack.push((a as usize, b as usize));
                }
            }
        }
    }
    false
}

fn check_args(r: usize, k: usize) -> Result<()> {
    if r < 3 || r % 2 == 0 {
        return Err(Error::invalid("sample_patches", format!("r={r} must be odd and >= 3")));
    }
    if k == 0 || k > r * r {
        return Err(Error::invalid("sample_patches", format!("k={k} outside 1..={}", r * r)));
    }
    Ok(())
}

fn draw(r: usize, k: usize, rng: &mut impl rand::Rng) -> Vec<bool> {
    let n = r * r;
    let centre = (r / 2) * r + r / 2;
    let mut cells = vec![false; n];
    cells[centre] = true;
    // k-1 distinct cells among the n-1 non-centre positions
    for idx in index::sample(rng, n - 1, k - 1).iter() {
        let at = if idx >= centre { idx + 1 } else { idx };
        cells[at] = true;
    }
    cells
}

/// Patches with the centre set plus `k - 1` uniformly placed foreground cells.
pub fn sample_patches(r: usize, k: usize, trials: usize, seed: u64) -> Result<Vec<PatchSample>> {
    check_args(r, k)?;
    let mut rng = seed::rng(seed, "patch-stratum", k as u64);
    let density = k as f64 / (r * r) as f64;
    Ok((0..trials)
        .map(|_| {
            let cells = draw(r, k, &mut rng);
            let connected = is_connected_patch(&cells, r);
            PatchSample { r, cells, density, connected }
        })
        .collect())
}

/// Empirical connectivity frequency for one density stratum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityStat {
    pub k: usize,
    pub density: f64,
    pub trials: usize,
    pub connected: usize,
}

impl DensityStat {
    pub fn probability(&self) -> f64 {
        self.connected as f64 / self.trials as f64
    }
}

/// Runs every stratum `k = 1..=r^2`; strata draw from independent streams and
/// run in parallel, so results do not depend on the worker count.
pub fn connectivity_curve(r: usize, trials: usize, seed: u64, rule: ConnectedRule) -> Result<Vec<DensityStat>> {
    check_args(r, 1)?;
    if trials == 0 {
        return Err(Error::invalid("connectivity_curve", "trials must be positive"));
    }
    Ok((1..=r * r)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed::rng(seed, "patch-stratum", k as u64);
            let connected = (0..trials).filter(|_| is_connected_patch_with(&draw(r, k, &mut rng), r, rule)).count();
            DensityStat { k, density: k as f64 / (r * r) as f64, trials, connected }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&str]) -> Vec<bool> {
        rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()
    }

    #[test]
    fn row_through_centre_is_connected() {
        let g = grid(&[".....", ".....", "#####", ".....", "....."]);
        assert!(is_connected_patch(&g, 5));
    }

    #[test]
    fn stub_is_not_connected() {
        let g = grid(&[".....", ".....", "..###", ".....", "....."]);
        assert!(!is_connected_patch(&g, 5));
        assert!(is_connected_patch_with(&g, 5, ConnectedRule::AnyContact));
    }

    #[test]
    fn corner_fan_counts_as_two_contacts() {
        // the ring cell touches two border pixels that are two apart
        let g = grid(&["..#..", ".#...", "#.#..", ".....", "....."]);
        assert!(is_connected_patch(&g, 5));
    }

    #[test]
    fn adjacent_contacts_are_one_arc() {
        let g = grid(&[".##..", ".#...", "..#..", ".....", "....."]);
        assert!(!is_connected_patch(&g, 5));
    }

    #[test]
    fn plus_is_connected() {
        let g = grid(&["..#..", "..#..", "#####", "..#..", "..#.."]);
        assert!(is_connected_patch(&g, 5));
    }

    #[test]
    fn empty_centre_is_never_connected() {
        let g = grid(&["#####", "#####", "##.##", "#####", "#####"]);
        assert!(!is_connected_patch(&g, 5));
    }

    #[test]
    fn extreme_strata() {
        let one = sample_patches(5, 1, 200, 3).unwrap();
        assert!(one.iter().all(|p| !p.connected && p.cells.iter().filter(|&&c| c).count() == 1));
        let full = sample_patches(5, 25, 50, 3).unwrap();
        assert!(full.iter().all(|p| p.connected));
    }

    #[test]
    fn centre_always_set_and_density_exact() {
        for p in sample_patches(5, 7, 300, 11).unwrap() {
            assert!(p.cells[12]);
            assert_eq!(p.cells.iter().filter(|&&c| c).count(), 7);
            assert_eq!(p.density, 7.0 / 25.0);
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(sample_patches(4, 1, 1, 0).is_err());
        assert!(sample_patches(5, 0, 1, 0).is_err());
        assert!(sample_patches(5, 26, 1, 0).is_err());
    }
}
