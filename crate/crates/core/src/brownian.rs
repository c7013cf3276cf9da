//! Brownian increments and iterated stochastic integrals over one step.
//!
//! For a step of length `h` and increments `ΔW`, the double integrals
//! `I_{pq} = ∫∫ dW_p(r) dW_q(s)` (inner `p`, outer `q`) split as
//!
//! ```text
//! I_pp = (ΔW_p² − h) / 2
//! I_pq = ΔW_p ΔW_q / 2 + A_pq,      A_pq = −A_qp   (Lévy area)
//! ```
//!
//! The Lévy areas are sampled with Wiktorsson's method: `K` terms of the
//! Fourier series
//!
//! ```text
//! A_pq ≈ h/(2π) Σ_{k≤K} (1/k) [ ζ_kp (η_kq + √(2/h) ΔW_q) − ζ_kq (η_kp + √(2/h) ΔW_p) ]
//! ```
//!
//! plus a Gaussian approximation of the remainder with covariance
//! `(h/2π)² a_K Σ∞`, `a_K = π²/6 − Σ_{k≤K} 1/k²`. The mean-square error per
//! area is `O(h²/K²)`. When cross-particle integrals are requested the
//! expansion runs over the stacked `N·m` dimensional increment so the whole
//! block is jointly consistent.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Default number of series terms.
pub const DEFAULT_K: usize = 20;

/// Noise driving one step of an `N`-particle system with `m` Brownian
/// components per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    h: f64,
    n: usize,
    m: usize,
    /// N×m.
    dw: Vec<f64>,
    /// N×m×m, `own[(i*m + j2)*m + j1] = ∫∫ dW^{i,j2} dW^{i,j1}`.
    own: Vec<f64>,
    /// (N·m)×(N·m) over the stacked index `p = i*m + j`.
    cross: Option<Vec<f64>>,
}

/// Packed position of the pair `p < q`, grouped by `q` so that all pairs
/// whose larger index belongs to one particle are contiguous.
#[inline]
fn pair_index(p: usize, q: usize) -> usize {
    debug_assert!(p < q);
    q * (q - 1) / 2 + p
}

fn tail_weight(k: usize) -> f64 {
    let head: f64 = (1..=k).map(|r| 1.0 / (r * r) as f64).sum();
    (PI * PI / 6.0 - head).max(0.0)
}

/// Random inputs of the area expansion for a stacked increment of dimension
/// `D`. The `ζ` and `η` draws are laid out `[k][p]`; tail normals are packed.
struct SeriesDraws {
    zeta: Vec<f64>,
    eta: Vec<f64>,
    tail: Vec<f64>,
}

/// Lévy areas of the stacked increment `w` written as the full antisymmetric
/// `D×D` matrix into `area`.
fn wiktorsson_area(w: &[f64], h: f64, k: usize, draws: &SeriesDraws, area: &mut [f64]) {
    let dim = w.len();
    area.fill(0.0);
    if dim < 2 {
        return;
    }
    let c = (2.0 / h).sqrt();
    let scale = h / (2.0 * PI);

    // truncated series, upper triangle
    for term in 0..k {
        let inv_k = 1.0 / (term + 1) as f64;
        let zeta = &draws.zeta[term * dim..(term + 1) * dim];
        let eta = &draws.eta[term * dim..(term + 1) * dim];
        for p in 0..dim {
            let up = eta[p] + c * w[p];
            let zp = zeta[p];
            let row = &mut area[p * dim..(p + 1) * dim];
            for q in p + 1..dim {
                let uq = eta[q] + c * w[q];
                row[q] += inv_k * (zp * uq - zeta[q] * up);
            }
        }
    }

    // remainder: (h/2π) √a_K Σ∞^{1/2} G
    let a_k = tail_weight(k);
    if a_k > 0.0 {
        let sqrt_cov_g = sqrt_cov_apply(w, h, &draws.tail);
        let t = a_k.sqrt();
        for q in 1..dim {
            for p in 0..q {
                area[p * dim + q] = scale * (area[p * dim + q] + t * sqrt_cov_g[pair_index(p, q)]);
            }
        }
    } else {
        for p in 0..dim {
            for q in p + 1..dim {
                area[p * dim + q] *= scale;
            }
        }
    }
    for p in 0..dim {
        for q in p + 1..dim {
            area[q * dim + p] = -area[p * dim + q];
        }
    }
}

/// `Σ∞^{1/2} g` for the packed pair vector `g`, where
/// `Σ∞ = 2I + (2/h) B Bᵀ` and `(B x)_{pq} = x_p w_q − x_q w_p`.
///
/// `Σ∞` has eigenvalues 2 and `2(1 + |w|²/h)`, so its square root is the
/// affine map `(Σ∞ + 2a I) / (√2 (1 + a))` with `a = √(1 + |w|²/h)`.
pub(crate) fn sqrt_cov_apply(w: &[f64], h: f64, g: &[f64]) -> Vec<f64> {
    let cov_g = cov_apply(w, h, g);
    let a = (1.0 + w.iter().map(|x| x * x).sum::<f64>() / h).sqrt();
    let denom = 2f64.sqrt() * (1.0 + a);
    cov_g
        .iter()
        .zip(g)
        .map(|(s, gi)| (s + 2.0 * a * gi) / denom)
        .collect()
}

/// `Σ∞ g` in `O(D²)` using the rank structure of `B Bᵀ`.
pub(crate) fn cov_apply(w: &[f64], h: f64, g: &[f64]) -> Vec<f64> {
    let dim = w.len();
    // x = Bᵀ g
    let mut x = vec![0.0; dim];
    for q in 1..dim {
        for p in 0..q {
            let gpq = g[pair_index(p, q)];
            x[p] += gpq * w[q];
            x[q] -= gpq * w[p];
        }
    }
    let c2 = 2.0 / h;
    let mut out = vec![0.0; g.len()];
    for q in 1..dim {
        for p in 0..q {
            let idx = pair_index(p, q);
            out[idx] = 2.0 * g[idx] + c2 * (x[p] * w[q] - x[q] * w[p]);
        }
    }
    out
}

fn normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
}

/// Fills `I` (row-major D×D) from increments and areas.
fn assemble_integrals(w: &[f64], h: f64, area: &[f64], out: &mut [f64]) {
    let dim = w.len();
    for p in 0..dim {
        for q in 0..dim {
            out[p * dim + q] = if p == q {
                0.5 * (w[p] * w[p] - h)
            } else {
                0.5 * w[p] * w[q] + area[p * dim + q]
            };
        }
    }
}

/// What one particle's stream contributes to a step.
struct ParticleDraws {
    dw: Vec<f64>,
    series: SeriesDraws,
}

impl NoiseBlock {
    /// Builds a block from explicit increments and (optionally) per-particle
    /// Lévy areas laid out N×m×m; missing areas are zero.
    pub fn from_parts(
        h: f64,
        n: usize,
        m: usize,
        dw: Vec<f64>,
        areas: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !(h > 0.0) || n == 0 || m == 0 {
            return Err(Error::ShapeMismatch(format!("h={h}, n={n}, m={m}")));
        }
        if dw.len() != n * m {
            return Err(Error::ShapeMismatch(format!(
                "dw has {} entries, expected {}",
                dw.len(),
                n * m
            )));
        }
        let zero = vec![0.0; n * m * m];
        let areas = areas.unwrap_or(zero);
        if areas.len() != n * m * m {
            return Err(Error::ShapeMismatch("areas must be N×m×m".into()));
        }
        let mut own = vec![0.0; n * m * m];
        for i in 0..n {
            assemble_integrals(
                &dw[i * m..(i + 1) * m],
                h,
                &areas[i * m * m..(i + 1) * m * m],
                &mut own[i * m * m..(i + 1) * m * m],
            );
        }
        Ok(Self {
            h,
            n,
            m,
            dw,
            own,
            cross: None,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    pub fn brownian_dim(&self) -> usize {
        self.m
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    pub fn dw(&self, i: usize, j: usize) -> f64 {
        self.dw[i * self.m + j]
    }

    pub fn particle_dw(&self, i: usize) -> &[f64] {
        &self.dw[i * self.m..(i + 1) * self.m]
    }

    /// `∫∫ dW^{i,j2} dW^{i,j1}` over the step.
    pub fn own(&self, i: usize, j2: usize, j1: usize) -> f64 {
        self.own[(i * self.m + j2) * self.m + j1]
    }

    /// Row-major m×m block of particle `i`, indexed `[j2][j1]`.
    pub fn particle_own(&self, i: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.own[i * mm..(i + 1) * mm]
    }

    /// `∫∫ dW^{k1,j2} dW^{i,j1}` over the stacked indices `p = k1*m + j2`,
    /// `q = i*m + j1`.
    pub fn cross(&self, p: usize, q: usize) -> Option<f64> {
        let dim = self.n * self.m;
        self.cross.as_ref().map(|c| c[p * dim + q])
    }

    pub fn cross_matrix(&self) -> Option<&[f64]> {
        self.cross.as_deref()
    }

    /// Block with particle `i` taken from particle `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::ShapeMismatch("permutation length".into()));
        }
        let m = self.m;
        let mm = m * m;
        let mut dw = Vec::with_capacity(self.dw.len());
        let mut own = Vec::with_capacity(self.own.len());
        for &src in perm {
            dw.extend_from_slice(self.particle_dw(src));
            own.extend_from_slice(&self.own[src * mm..(src + 1) * mm]);
        }
        let cross = self.cross.as_ref().map(|c| {
            let dim = self.n * m;
            let stacked = |i: usize, j: usize| perm[i] * m + j;
            let mut out = vec![0.0; dim * dim];
            for p in 0..dim {
                for q in 0..dim {
                    let sp = stacked(p / m, p % m);
                    let sq = stacked(q / m, q % m);
                    out[p * dim + q] = c[sp * dim + sq];
                }
            }
            out
        });
        Ok(Self {
            h: self.h,
            n: self.n,
            m,
            dw,
            own,
            cross,
        })
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n != other.n || self.m != other.m || self.has_cross() != other.has_cross() {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine (N={}, m={}, cross={}) with (N={}, m={}, cross={})",
                self.n,
                self.m,
                self.has_cross(),
                other.n,
                other.m,
                other.has_cross()
            )));
        }
        Ok(())
    }

    /// Extends `self` over `[s,u]` by `next` over `[u,t]` using Chen's
    /// relation `I[s,t] = I[s,u] + I[u,t] + ΔW_p[s,u] ΔW_q[u,t]`.
    pub fn chain(&mut self, next: &NoiseBlock) -> Result<()> {
        self.same_shape(next)?;
        let m = self.m;
        for i in 0..self.n {
            for j2 in 0..m {
                let left = self.dw[i * m + j2];
                for j1 in 0..m {
                    let idx = (i * m + j2) * m + j1;
                    self.own[idx] += next.own[idx] + left * next.dw[i * m + j1];
                }
            }
        }
        if let (Some(c), Some(nc)) = (self.cross.as_mut(), next.cross.as_ref()) {
            let dim = self.n * m;
            for p in 0..dim {
                let left = self.dw[p];
                for q in 0..dim {
                    c[p * dim + q] += nc[p * dim + q] + left * next.dw[q];
                }
            }
        }
        for (a, b) in self.dw.iter_mut().zip(&next.dw) {
            *a += b;
        }
        self.h += next.h;
        Ok(())
    }
}

/// Folds consecutive fine blocks into one coarse block, left to right.
pub fn chen_aggregate(fine_blocks: &[NoiseBlock]) -> Result<NoiseBlock> {
    let (first, rest) = fine_blocks
        .split_first()
        .ok_or_else(|| Error::ShapeMismatch("no blocks to aggregate".into()))?;
    let mut acc = first.clone();
    for b in rest {
        acc.chain(b)?;
    }
    Ok(acc)
}

/// Streaming form of [`chen_aggregate`]: emits a coarse block every
/// `ratio` fine blocks.
#[derive(Debug, Clone)]
pub struct ChenAccumulator {
    ratio: usize,
    count: usize,
    acc: Option<NoiseBlock>,
}

impl ChenAccumulator {
    pub fn new(ratio: usize) -> Self {
        assert!(ratio >= 1, "aggregation ratio must be positive");
        Self {
            ratio,
            count: 0,
            acc: None,
        }
    }

    pub fn push(&mut self, block: &NoiseBlock) -> Result<Option<NoiseBlock>> {
        match self.acc.as_mut() {
            Some(acc) => acc.chain(block)?,
            None => self.acc = Some(block.clone()),
        }
        self.count += 1;
        if self.count == self.ratio {
            self.count = 0;
            Ok(self.acc.take())
        } else {
            Ok(None)
        }
    }
}

/// Deterministic per-step noise source keyed by `(seed, step, particle)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseGenerator {
    pub seed: u64,
    pub k: usize,
}

impl NoiseGenerator {
    pub fn new(seed: u64, k: usize) -> Self {
        Self { seed, k }
    }

    /// Noise for step `step` of an `n`-particle system. Particle streams are
    /// generated in parallel; the result does not depend on the thread count.
    pub fn sample_step(&self, step: u64, n: usize, m: usize, h: f64, with_cross: bool) -> NoiseBlock {
        assert!(h > 0.0 && n > 0 && m > 0 && self.k >= 1);
        let k = self.k;
        let own_pairs = m * (m - 1) / 2;
        let draws: Vec<ParticleDraws> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(self.seed, Purpose::StepNoise, step, i as u64);
                draw_particle(&mut rng, i, m, h, k, with_cross, own_pairs, n)
            })
            .collect();

        if with_cross {
            return assemble_cross(draws, n, m, h, k);
        }

        let mm = m * m;
        let mut dw = Vec::with_capacity(n * m);
        for d in &draws {
            dw.extend_from_slice(&d.dw);
        }
        let mut own = vec![0.0; n * mm];
        own.par_chunks_mut(mm)
            .zip(draws.par_iter())
            .for_each(|(out, d)| {
                let mut area = vec![0.0; mm];
                wiktorsson_area(&d.dw, h, k, &d.series, &mut area);
                assemble_integrals(&d.dw, h, &area, out);
            });
        NoiseBlock {
            h,
            n,
            m,
            dw,
            own,
            cross: None,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_particle(
    rng: &mut ChaCha8Rng,
    i: usize,
    m: usize,
    h: f64,
    k: usize,
    with_cross: bool,
    own_pairs: usize,
    n: usize,
) -> ParticleDraws {
    let sqrt_h = h.sqrt();
    let mut dw = vec![0.0; m];
    normals(rng, &mut dw);
    for x in &mut dw {
        *x *= sqrt_h;
    }
    let needs_series = if with_cross { n * m >= 2 } else { m >= 2 };
    if !needs_series {
        return ParticleDraws {
            dw,
            series: SeriesDraws {
                zeta: Vec::new(),
                eta: Vec::new(),
                tail: Vec::new(),
            },
        };
    }
    let mut zeta = vec![0.0; k * m];
    let mut eta = vec![0.0; k * m];
    normals(rng, &mut zeta);
    normals(rng, &mut eta);
    let tail_len = if with_cross {
        // pairs (p, q), p < q, with q in this particle's block
        let before = |q: usize| q * q.saturating_sub(1) / 2;
        before((i + 1) * m) - before(i * m)
    } else {
        own_pairs
    };
    let mut tail = vec![0.0; tail_len];
    normals(rng, &mut tail);
    ParticleDraws {
        dw,
        series: SeriesDraws { zeta, eta, tail },
    }
}

fn assemble_cross(draws: Vec<ParticleDraws>, n: usize, m: usize, h: f64, k: usize) -> NoiseBlock {
    let dim = n * m;
    let mut w = Vec::with_capacity(dim);
    for d in &draws {
        w.extend_from_slice(&d.dw);
    }
    let mut series = SeriesDraws {
        zeta: vec![0.0; k * dim],
        eta: vec![0.0; k * dim],
        tail: Vec::with_capacity(dim * dim.saturating_sub(1) / 2),
    };
    if dim >= 2 {
        for (i, d) in draws.iter().enumerate() {
            for term in 0..k {
                let dst = term * dim + i * m;
                series.zeta[dst..dst + m].copy_from_slice(&d.series.zeta[term * m..(term + 1) * m]);
                series.eta[dst..dst + m].copy_from_slice(&d.series.eta[term * m..(term + 1) * m]);
            }
            series.tail.extend_from_slice(&d.series.tail);
        }
    }
    let mut area = vec![0.0; dim * dim];
    wiktorsson_area(&w, h, k, &series, &mut area);
    let mut cross = vec![0.0; dim * dim];
    assemble_integrals(&w, h, &area, &mut cross);

    let mm = m * m;
    let mut own = vec![0.0; n * mm];
    for i in 0..n {
        for j2 in 0..m {
            for j1 in 0..m {
                own[i * mm + j2 * m + j1] = cross[(i * m + j2) * dim + i * m + j1];
            }
        }
    }
    NoiseBlock {
        h,
        n,
        m,
        dw: w,
        own,
        cross: Some(cross),
    }
}

/// Samples one step of noise from a caller-supplied generator, drawing the
/// particles sequentially.
pub fn sample_step_noise<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
    h: f64,
    k: usize,
    with_cross: bool,
) -> NoiseBlock {
    let mut seed_bytes = [0u8; 8];
    rng.fill(&mut seed_bytes);
    let seed = u64::from_le_bytes(seed_bytes);
    let step: u64 = rng.random();
    NoiseGenerator::new(seed, k).sample_step(step, n, m, h, with_cross)
}
