//! Taming operators `Γ_l(·, Δt)` and a sampling validator for their bounds.
//!
//! Four kinds ship:
//!
//! ```text
//! identity : Γ(v) = v
//! tanh     : Γ(v)_i = Δt⁻¹ tanh(Δt v_i)
//! sine     : Γ(v)_i = Δt⁻¹ sin(Δt v_i)
//! tamed    : Γ(v)   = v / (1 + Δt |v|)
//! ```
//!
//! `tanh` and `sine` act per component; `tamed` uses the Euclidean norm of
//! the whole vector. All bounded kinds satisfy `|Γ(v)| ≤ |v|`,
//! `|Γ(v)| ≤ C Δt⁻¹` and `|Γ(v) − v| ≤ C Δt |v|²`, with `C = 1` for `tamed`
//! and `C = √len` for the componentwise kinds.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack applied to every sampled inequality (4 ulps).
pub const ULP_SLACK: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamingKind {
    Identity,
    Tanh,
    Sine,
    Tamed,
}

impl TamingKind {
    pub const ALL: [TamingKind; 4] = [
        TamingKind::Identity,
        TamingKind::Tanh,
        TamingKind::Sine,
        TamingKind::Tamed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TamingKind::Identity => "identity",
            TamingKind::Tanh => "tanh",
            TamingKind::Sine => "sine",
            TamingKind::Tamed => "tamed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// `false` only for `identity`, which has no `Δt⁻ᶻ` bound.
    pub fn is_bounded(self) -> bool {
        !matches!(self, TamingKind::Identity)
    }

    pub fn is_componentwise(self) -> bool {
        matches!(self, TamingKind::Tanh | TamingKind::Sine)
    }

    /// Dimension factor used in the assumption checks for a vector of `len`
    /// components.
    pub fn bound_constant(self, len: usize) -> f64 {
        if self.is_componentwise() {
            (len as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Applies the operator in place. No finiteness check; callers on the hot
    /// path detect blow-up on the resulting state instead.
    #[inline]
    pub fn apply_in_place(self, v: &mut [f64], dt: f64) {
        match self {
            TamingKind::Identity => {}
            TamingKind::Tanh => {
                let inv = dt.recip();
                for x in v.iter_mut() {
                    *x = (dt * *x).tanh() * inv;
                }
            }
            TamingKind::Sine => {
                let inv = dt.recip();
                for x in v.iter_mut() {
                    *x = (dt * *x).sin() * inv;
                }
            }
            TamingKind::Tamed => {
                let norm = euclidean_norm(v);
                let scale = (1.0 + dt * norm).recip();
                for x in v.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }

    /// Scalar specialisation of [`apply_in_place`](Self::apply_in_place).
    #[inline]
    pub fn apply_scalar(self, x: f64, dt: f64) -> f64 {
        match self {
            TamingKind::Identity => x,
            TamingKind::Tanh => (dt * x).tanh() / dt,
            TamingKind::Sine => (dt * x).sin() / dt,
            TamingKind::Tamed => x / (1.0 + dt * x.abs()),
        }
    }
}

impl fmt::Display for TamingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One operator slot together with its declared assumption exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamingSlot {
    pub kind: TamingKind,
    /// Exponent in `|Γ| ≤ C Δt^(−ζ)`.
    pub zeta: f64,
    /// Exponents in `|Γ(v) − v| ≤ C Δt^δ |v|^γ`.
    pub delta: f64,
    pub gamma: f64,
}

impl TamingSlot {
    /// Slot with the exponents shared by all shipped families: ζ = δ = 1, γ = 2.
    pub const fn new(kind: TamingKind) -> Self {
        Self {
            kind,
            zeta: 1.0,
            delta: 1.0,
            gamma: 2.0,
        }
    }
}

/// The four operator slots Γ₁..Γ₄ of a Milstein-type scheme.
///
/// Slot 1 tames the drift, slot 2 the diffusion columns, slot 3 the
/// state-derivative correction and slot 4 the measure-derivative correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamingSpec {
    pub slots: [TamingSlot; 4],
}

impl TamingSpec {
    pub const fn uniform(kind: TamingKind) -> Self {
        let s = TamingSlot::new(kind);
        Self { slots: [s; 4] }
    }

    pub const fn from_kinds(kinds: [TamingKind; 4]) -> Self {
        Self {
            slots: [
                TamingSlot::new(kinds[0]),
                TamingSlot::new(kinds[1]),
                TamingSlot::new(kinds[2]),
                TamingSlot::new(kinds[3]),
            ],
        }
    }

    pub const fn identity() -> Self {
        Self::uniform(TamingKind::Identity)
    }

    pub const fn tanh() -> Self {
        Self::uniform(TamingKind::Tanh)
    }

    pub const fn sine() -> Self {
        Self::uniform(TamingKind::Sine)
    }

    pub const fn tamed() -> Self {
        Self::uniform(TamingKind::Tamed)
    }

    /// tanh on the drift, sine on the diffusion, tamed on the state
    /// correction, tanh on the measure correction.
    pub const fn mixed() -> Self {
        Self::from_kinds([
            TamingKind::Tanh,
            TamingKind::Sine,
            TamingKind::Tamed,
            TamingKind::Tanh,
        ])
    }

    /// The four bounded families in their canonical order.
    pub fn families() -> [TamingSpec; 4] {
        [Self::tanh(), Self::sine(), Self::tamed(), Self::mixed()]
    }

    pub fn kinds(&self) -> [TamingKind; 4] {
        [
            self.slots[0].kind,
            self.slots[1].kind,
            self.slots[2].kind,
            self.slots[3].kind,
        ]
    }

    pub fn drift(&self) -> TamingKind {
        self.slots[0].kind
    }

    pub fn diffusion(&self) -> TamingKind {
        self.slots[1].kind
    }

    pub fn state_correction(&self) -> TamingKind {
        self.slots[2].kind
    }

    pub fn measure_correction(&self) -> TamingKind {
        self.slots[3].kind
    }

    pub fn has_identity_slot(&self) -> bool {
        self.slots.iter().any(|s| s.kind == TamingKind::Identity)
    }

    /// Short label: `TanhM`, `SineM`, `TameM`, `MixM`, `Identity`, or the slot
    /// kinds joined by `/` for any other combination.
    pub fn label(&self) -> String {
        let k = self.kinds();
        if k == Self::mixed().kinds() {
            return "MixM".to_string();
        }
        if k.iter().all(|x| *x == k[0]) {
            return match k[0] {
                TamingKind::Identity => "Identity",
                TamingKind::Tanh => "TanhM",
                TamingKind::Sine => "SineM",
                TamingKind::Tamed => "TameM",
            }
            .to_string();
        }
        k.iter().map(|x| x.name()).collect::<Vec<_>>().join("/")
    }

    /// Requires ζ > 0 and γ ≥ 1 on every slot, plus δ ≥ ½ (δ ≥ 1 on slots 1
    /// and 2).
    pub fn validate(&self) -> Result<()> {
        for (l, slot) in self.slots.iter().enumerate() {
            let name = |p: &str| format!("taming.slots[{l}].{p}");
            if !(slot.zeta > 0.0) {
                return Err(Error::param(name("zeta"), "must be positive"));
            }
            let min_delta = if l < 2 { 1.0 } else { 0.5 };
            if !(slot.delta >= min_delta) {
                return Err(Error::param(name("delta"), format!("must be >= {min_delta}")));
            }
            if !(slot.gamma >= 1.0) {
                return Err(Error::param(name("gamma"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// `Γ(value, dt)` for one slot. Rejects non-finite input and non-positive `dt`.
pub fn gamma_apply(kind: TamingKind, value: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param("dt", format!("must be positive and finite, got {dt}")));
    }
    if let Some((index, &value)) = value.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let mut out = value.to_vec();
    kind.apply_in_place(&mut out, dt);
    Ok(out)
}

pub(crate) fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of [`verify_taming_assumptions`] for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamingReport {
    pub kind: TamingKind,
    pub samples: usize,
    /// Number of (vector, dt) pairs evaluated.
    pub checks: usize,
    /// Violations of `|Γ| ≤ min(C Δt^(−ζ), |v|)`.
    pub bound_violations: usize,
    /// Violations of `|Γ − v| ≤ C Δt^δ |v|^γ`.
    pub difference_violations: usize,
    pub max_bound_ratio: f64,
    pub max_difference_ratio: f64,
    /// Components with `|Δt vᵢ| > 1`, outside the cubic-remainder regime.
    pub large_regime_components: usize,
    pub unbounded: bool,
    pub diagnostic: Option<String>,
}

impl TamingReport {
    pub fn passed(&self) -> bool {
        !self.unbounded && self.bound_violations == 0 && self.difference_violations == 0
    }
}

/// Samples random vectors and checks the boundedness and consistency
/// inequalities of `slot` on every step in `dt_grid`.
///
/// Vector lengths are drawn from 1..=4; component magnitudes are log-uniform
/// on `[1/magnitude_range, magnitude_range]` with random signs.
pub fn verify_taming_assumptions(
    slot: TamingSlot,
    sample_count: usize,
    dt_grid: &[f64],
    magnitude_range: f64,
    rng_seed: u64,
) -> Result<TamingReport> {
    if sample_count == 0 {
        return Err(Error::param("sample_count", "must be at least 1"));
    }
    if dt_grid.is_empty() {
        return Err(Error::param("dt_grid", "must not be empty"));
    }
    if let Some(dt) = dt_grid.iter().find(|dt| !(**dt > 0.0)) {
        return Err(Error::param("dt_grid", format!("steps must be positive, got {dt}")));
    }
    if !(magnitude_range > 1.0) || !magnitude_range.is_finite() {
        return Err(Error::param("magnitude_range", "must be finite and > 1"));
    }

    let kind = slot.kind;
    let mut report = TamingReport {
        kind,
        samples: sample_count,
        checks: 0,
        bound_violations: 0,
        difference_violations: 0,
        max_bound_ratio: 0.0,
        max_difference_ratio: 0.0,
        large_regime_components: 0,
        unbounded: !kind.is_bounded(),
        diagnostic: None,
    };
    if report.unbounded {
        report.diagnostic = Some(format!(
            "{kind} is unbounded: |Γ(v, dt)| <= C dt^-zeta cannot hold, bound (a) is unverifiable"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let log_max = magnitude_range.ln();
    let mut v = Vec::with_capacity(4);
    let mut out = Vec::with_capacity(4);
    for _ in 0..sample_count {
        let len = rng.random_range(1..=4usize);
        v.clear();
        for _ in 0..len {
            let mag = rng.random_range(-log_max..=log_max).exp();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            v.push(sign * mag);
        }
        let norm_v = euclidean_norm(&v);
        let c = kind.bound_constant(len);
        for &dt in dt_grid {
            report.checks += 1;
            out.clear();
            out.extend_from_slice(&v);
            kind.apply_in_place(&mut out, dt);
            let norm_out = euclidean_norm(&out);

            if kind.is_componentwise() {
                report.large_regime_components +=
                    v.iter().filter(|x| (dt * **x).abs() > 1.0).count();
            }

            if kind.is_bounded() {
                let cap = (c * dt.powf(-slot.zeta)).min(norm_v);
                let ratio = norm_out / cap;
                report.max_bound_ratio = report.max_bound_ratio.max(ratio);
                if ratio > 1.0 + ULP_SLACK {
                    report.bound_violations += 1;
                }
            }

            let diff = out
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // the subtraction Γ − v carries an absolute rounding error of a few ulps of |v|
            let rhs = c * dt.powf(slot.delta) * norm_v.powf(slot.gamma) + ULP_SLACK * norm_v;
            let ratio = if diff == 0.0 { 0.0 } else { diff / rhs };
            report.max_difference_ratio = report.max_difference_ratio.max(ratio);
            if ratio > 1.0 + ULP_SLACK {
                report.difference_violations += 1;
            }
        }
    }
    Ok(report)
}
