//! Explicit finite cone lattice with sampled bonds.
//!
//! Sites at level `i` (0 = base, `T` = apex) are the non-negative integer
//! vectors `a` of length `D - 1` with `sum(a) <= T - i`. A site links to
//! at most `D` sites one level down: itself (if it still fits) and `a - e_j`
//! for every `a_j > 0`. Boundary sites therefore have fewer bonds, and every
//! site above the apex keeps at least one.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DpError, LatticeCounts, LogCount};
use crate::seeds::trial_seed;

/// Upper bound on the number of lattice sites.
pub const MAX_LATTICE_SITES: u128 = 5_000_000;

#[derive(Debug, Clone)]
struct Level {
    /// successors of site k are targets[offsets[k]..offsets[k + 1]]
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Level {
    fn sites(&self) -> usize {
        self.offsets.len() - 1
    }

    fn successors(&self, k: usize) -> &[usize] {
        &self.targets[self.offsets[k]..self.offsets[k + 1]]
    }
}

#[derive(Debug, Clone)]
pub struct ConeLattice {
    dim: usize,
    depth: usize,
    levels: Vec<Level>,
}

/// All vectors of `len` non-negative integers summing to at most `max`, in
/// lexicographic order.
fn simplex_points(len: usize, max: usize) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, len: usize, left: usize, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for v in 0..=left {
            prefix.push(v as u32);
            rec(prefix, len, left - v, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(len), len, max, &mut out);
    out
}

/// C(n, k) without overflow for the sizes we accept.
fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

impl ConeLattice {
    pub fn new(dim: usize, depth: usize) -> Result<Self, DpError> {
        if dim < 2 || depth == 0 {
            return Err(DpError::Params(format!(
                "lattice needs D >= 2 and T >= 1, got D={dim}, T={depth}"
            )));
        }
        // Total sites: sum_s C(s + D - 1, D - 1) = C(T + D, D).
        let sites = binomial((depth + dim) as u128, dim as u128);
        if sites > MAX_LATTICE_SITES {
            return Err(DpError::LatticeTooLarge {
                sites,
                cap: MAX_LATTICE_SITES,
            });
        }
        let coords: Vec<Vec<Vec<u32>>> = (0..=depth)
            .map(|i| simplex_points(dim - 1, depth - i))
            .collect();
        let mut levels = Vec::with_capacity(depth + 1);
        for i in 0..=depth {
            let mut offsets = vec![0];
            let mut targets = Vec::new();
            if i < depth {
                let room = depth - i - 1;
                let index: HashMap<&[u32], usize> = coords[i + 1]
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (c.as_slice(), k))
                    .collect();
                let mut buf = vec![0u32; dim - 1];
                for site in &coords[i] {
                    let total: usize = site.iter().map(|&x| x as usize).sum();
                    if total <= room {
                        targets.push(index[site.as_slice()]);
                    }
                    for j in 0..dim - 1 {
                        if site[j] > 0 {
                            buf.copy_from_slice(site);
                            buf[j] -= 1;
                            targets.push(index[buf.as_slice()]);
                        }
                    }
                    offsets.push(targets.len());
                }
            } else {
                offsets.push(0);
            }
            levels.push(Level { offsets, targets });
        }
        Ok(ConeLattice { dim, depth, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn sites_at(&self, level: usize) -> usize {
        self.levels[level].sites()
    }

    /// Paths from the base to the apex with every bond present.
    pub fn full_path_count(&self) -> f64 {
        self.expected_counts(1.0).0
    }

    /// Exact expectations (permeable, absorbing) by the linear recursion:
    /// the expected count at a site is p times the sum over its
    /// predecessors, and a site absorbs its paths with probability
    /// (1 - p)^{out-degree}.
    pub fn expected_counts(&self, p: f64) -> (f64, f64) {
        let mut cur = vec![1.0; self.levels[0].sites()];
        let mut absorbing = 0.0;
        for i in 0..self.depth {
            let level = &self.levels[i];
            let mut next = vec![0.0; self.levels[i + 1].sites()];
            for (k, &c) in cur.iter().enumerate() {
                let succ = level.successors(k);
                absorbing += c * (1.0 - p).powi(succ.len() as i32);
                for &t in succ {
                    next[t] += p * c;
                }
            }
            cur = next;
        }
        (cur[0], absorbing)
    }

    /// One bond configuration: (permeable, absorbing) path counts.
    pub fn sample<R: Rng>(&self, p: f64, rng: &mut R) -> (f64, f64) {
        let mut cur = vec![1.0; self.levels[0].sites()];
        let mut absorbing = 0.0;
        for i in 0..self.depth {
            let level = &self.levels[i];
            let mut next = vec![0.0; self.levels[i + 1].sites()];
            for (k, &c) in cur.iter().enumerate() {
                let mut open = false;
                for &t in level.successors(k) {
                    if rng.gen::<f64>() < p {
                        open = true;
                        next[t] += c;
                    }
                }
                if !open {
                    absorbing += c;
                }
            }
            cur = next;
        }
        (cur[0], absorbing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSim {
    pub dim: usize,
    pub depth: usize,
    pub prob: f64,
    pub trials: u64,
    /// Sample means.
    pub sampled: LatticeCounts,
    pub permeable_stderr: f64,
    pub absorbing_stderr: f64,
    /// Exact expectations on the same finite lattice.
    pub exact: LatticeCounts,
}

impl LatticeSim {
    pub fn sampled_permeable(&self) -> f64 {
        self.sampled.permeable.to_f64()
    }

    pub fn sampled_absorbing(&self) -> f64 {
        self.sampled.absorbing.to_f64()
    }

    pub fn exact_permeable(&self) -> f64 {
        self.exact.permeable.to_f64()
    }

    pub fn exact_absorbing(&self) -> f64 {
        self.exact.absorbing.to_f64()
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo path counts on the cone lattice. Trial `t` draws its bonds
/// from its own seed, so the result does not depend on the thread count.
pub fn simulate_cone_lattice(
    dim: usize,
    depth: usize,
    p: f64,
    trials: u64,
    seed: u64,
) -> Result<LatticeSim, DpError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DpError::Params(format!("p must lie in [0, 1], got {p}")));
    }
    if trials == 0 {
        return Err(DpError::Params("need at least one trial".into()));
    }
    let lattice = ConeLattice::new(dim, depth)?;
    let samples: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, 0, t));
            lattice.sample(p, &mut rng)
        })
        .collect();
    let perm: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let abs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (mp, sp) = mean_and_stderr(&perm);
    let (ma, sa) = mean_and_stderr(&abs);
    let (ep, ea) = lattice.expected_counts(p);
    Ok(LatticeSim {
        dim,
        depth,
        prob: p,
        trials,
        sampled: LatticeCounts {
            permeable: LogCount::from_f64(mp),
            absorbing: LogCount::from_f64(ma),
        },
        permeable_stderr: sp,
        absorbing_stderr: sa,
        exact: LatticeCounts {
            permeable: LogCount::from_f64(ep),
            absorbing: LogCount::from_f64(ea),
        },
    })
}
