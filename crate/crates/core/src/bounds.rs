//! A-priori error bounds: the K₁ constant, the Bellman-norm recursion, the
//! Lipschitz recursion for the per-time value functions, and the two-stage
//! total.
//!
//! The certified error of the pipeline output against the true value splits
//! into the reference-quantization stage and the chain-quantization stage:
//!
//! ```text
//!   K₁·ε_N·Σ_{k<N₀} ‖𝔅^k H‖_𝕃  +  Σ_{t≤N₀} L_{V_t}·‖Ψ_t − Ψ̂_t‖₂ ,
//! ```
//!
//! valid under the precondition `ε_N ≤ (1/2L_r)(1 ∧ 1/δ)`. The constants are
//! faithful upper bounds, not estimates — for models with deep density tails
//! (the water tank's δ is ~10^244) they overflow f64. All bound arithmetic
//! therefore runs on [`XFloat`], a nonnegative float with an i64 binary
//! exponent: exact f64 semantics in range, no overflow out of range, and a
//! finite log10 either way. Reports carry both the f64 value (inf when out
//! of range) and the log10.

use serde::{Deserialize, Serialize};

// ── Extended-range nonnegative floats ────────────────────────────────────

/// Nonnegative float `m · 2^e` with `m ∈ [0.5, 1)` (or exactly 0). Mantissa
/// arithmetic is ordinary f64 arithmetic, so in-range results round exactly
/// like f64; the exponent lives in an i64, so products of ~10^300-sized
/// constants do not overflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XFloat {
    m: f64,
    e: i64,
}

fn frexp(x: f64) -> (f64, i64) {
    if x == 0.0 {
        return (0.0, 0);
    }
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    if exp_bits == 0 {
        // Subnormal: renormalize through a 2^64 scale.
        let (m, e) = frexp(x * 2f64.powi(64));
        return (m, e - 64);
    }
    let e = exp_bits - 1022;
    let m = f64::from_bits((bits & 0x800f_ffff_ffff_ffff) | (1022u64 << 52));
    (m, e)
}

fn ldexp(m: f64, e: i64) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    if e > 1100 {
        return f64::INFINITY;
    }
    if e < -1140 {
        return 0.0;
    }
    let h1 = (e / 2) as i32;
    let h2 = (e - (e / 2)) as i32;
    m * 2f64.powi(h1) * 2f64.powi(h2)
}

impl XFloat {
    pub const ZERO: XFloat = XFloat { m: 0.0, e: 0 };

    /// From a nonnegative finite f64 (exact).
    pub fn from_f64(x: f64) -> XFloat {
        assert!(x >= 0.0 && x.is_finite(), "XFloat::from_f64({x})");
        let (m, e) = frexp(x);
        XFloat { m, e }
    }

    pub fn is_zero(self) -> bool {
        self.m == 0.0
    }

    pub fn mul(self, rhs: XFloat) -> XFloat {
        if self.is_zero() || rhs.is_zero() {
            return XFloat::ZERO;
        }
        let (m, de) = frexp(self.m * rhs.m);
        XFloat { m, e: self.e + rhs.e + de }
    }

    pub fn add(self, rhs: XFloat) -> XFloat {
        if self.is_zero() {
            return rhs;
        }
        if rhs.is_zero() {
            return self;
        }
        let (hi, lo) = if self.e >= rhs.e { (self, rhs) } else { (rhs, self) };
        let shift = hi.e - lo.e;
        if shift > 1100 {
            return hi;
        }
        let (m, de) = frexp(hi.m + ldexp(lo.m, -shift));
        XFloat { m, e: hi.e + de }
    }

    pub fn max(self, rhs: XFloat) -> XFloat {
        if self.ge(rhs) {
            self
        } else {
            rhs
        }
    }

    pub fn ge(self, rhs: XFloat) -> bool {
        if rhs.is_zero() {
            return true;
        }
        if self.is_zero() {
            return false;
        }
        (self.e, self.m) >= (rhs.e, rhs.m)
    }

    /// Back to f64; +inf when the exponent is out of range.
    pub fn to_f64(self) -> f64 {
        ldexp(self.m, self.e)
    }

    /// log₁₀ of the value (−inf for zero); finite for any nonzero XFloat.
    pub fn log10(self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        self.m.log10() + self.e as f64 * std::f64::consts::LN_2 / std::f64::consts::LN_10
    }

    /// Deterministic scientific rendering, e.g. `2.0640e+499`; used where an
    /// out-of-range bound still has to be printed as a number.
    pub fn fmt_sci(self) -> String {
        if self.is_zero() {
            return "0.0".to_string();
        }
        let l = self.log10();
        let exp10 = l.floor();
        let mant = 10f64.powf(l - exp10);
        format!("{mant:.4}e{exp10:+}")
    }
}

// ── Bound formulas ───────────────────────────────────────────────────────

/// `K₁ = L_r(1 + 2 r̄ L_r) + δ r̄ [ r̄ + L_r(2 + 2 δ r̄) ]`.
pub fn k1_constant_x(r_sup: f64, r_lip: f64, delta: f64) -> XFloat {
    let r = XFloat::from_f64(r_sup);
    let l = XFloat::from_f64(r_lip);
    let d = XFloat::from_f64(delta);
    let one = XFloat::from_f64(1.0);
    let two = XFloat::from_f64(2.0);
    let term1 = l.mul(one.add(two.mul(r).mul(l)));
    let inner = r.add(l.mul(two.add(two.mul(d).mul(r))));
    term1.add(d.mul(r).mul(inner))
}

pub fn k1_constant(r_sup: f64, r_lip: f64, delta: f64) -> f64 {
    k1_constant_x(r_sup, r_lip, delta).to_f64()
}

/// Upper bounds on `‖𝔅^k H‖_𝕃` for k = 0..n0−1. The k = 0 term is
/// `h_sup + h_lip`; each iterate keeps the sup bound `max(h_sup, previous)`
/// and grows the Lipschitz bound by
/// `L_{𝔅f} = ‖H‖_𝕃 + ‖f‖_𝕃 (r̄+L_r)(1 + δ r̄ (1 + r̄ δ))`.
pub fn bellman_norm_recursion_x(
    h_sup: f64,
    h_lip: f64,
    r_sup: f64,
    r_lip: f64,
    delta: f64,
    n0: usize,
) -> Vec<XFloat> {
    let r = XFloat::from_f64(r_sup);
    let l = XFloat::from_f64(r_lip);
    let d = XFloat::from_f64(delta);
    let one = XFloat::from_f64(1.0);
    let hs = XFloat::from_f64(h_sup);
    let hl = XFloat::from_f64(h_lip);
    let h_norm = hs.add(hl);
    let factor = r.add(l).mul(one.add(d.mul(r).mul(one.add(r.mul(d)))));

    let mut out = Vec::with_capacity(n0);
    let mut sup = hs;
    let mut lip = hl;
    out.push(sup.add(lip));
    for _ in 1..n0 {
        let norm = sup.add(lip);
        lip = h_norm.add(norm.mul(factor));
        sup = XFloat::max(hs, sup);
        out.push(sup.add(lip));
    }
    out
}

pub fn bellman_norm_recursion(
    h_sup: f64,
    h_lip: f64,
    r_sup: f64,
    r_lip: f64,
    delta: f64,
    n0: usize,
) -> Vec<f64> {
    bellman_norm_recursion_x(h_sup, h_lip, r_sup, r_lip, delta, n0)
        .into_iter()
        .map(XFloat::to_f64)
        .collect()
}

/// Lipschitz constants `L_{V_t}` for t = 0..=n0, by the backward recursion
///
/// ```text
///   L_{N₀} = 2√N (h_sup + h_lip),
///   L_t    = 4√N [ (1+2r̄) h_sup + 2 r̄ δ (1+2 r̄ δ) L_{t+1} ] (r̄+L_r)
///            + 2√N (h_sup + h_lip).
/// ```
pub fn lipschitz_recursion_x(
    n_hidden: usize,
    r_sup: f64,
    r_lip: f64,
    delta: f64,
    h_sup: f64,
    h_lip: f64,
    n0: usize,
) -> Vec<XFloat> {
    let sqrt_n = (n_hidden as f64).sqrt();
    let terminal = XFloat::from_f64(2.0 * sqrt_n * (h_sup + h_lip));
    let r = XFloat::from_f64(r_sup);
    let l = XFloat::from_f64(r_lip);
    let d = XFloat::from_f64(delta);
    let one = XFloat::from_f64(1.0);
    let two = XFloat::from_f64(2.0);
    let four_sqrt_n = XFloat::from_f64(4.0 * sqrt_n);
    let hs = XFloat::from_f64(h_sup);

    let mut out = vec![XFloat::ZERO; n0 + 1];
    out[n0] = terminal;
    let base = one.add(two.mul(r)).mul(hs);
    let growth = two.mul(r).mul(d).mul(one.add(two.mul(r).mul(d)));
    for t in (0..n0).rev() {
        let bracket = base.add(growth.mul(out[t + 1]));
        out[t] = four_sqrt_n.mul(bracket).mul(r.add(l)).add(terminal);
    }
    out
}

pub fn lipschitz_recursion(
    n_hidden: usize,
    r_sup: f64,
    r_lip: f64,
    delta: f64,
    h_sup: f64,
    h_lip: f64,
    n0: usize,
) -> Vec<f64> {
    lipschitz_recursion_x(n_hidden, r_sup, r_lip, delta, h_sup, h_lip, n0)
        .into_iter()
        .map(XFloat::to_f64)
        .collect()
}

/// Stage totals and the precondition flag.
#[derive(Clone, Debug)]
pub struct StageBounds {
    pub stage1: XFloat,
    pub stage2: XFloat,
    pub total: XFloat,
    pub precondition_ok: bool,
}

/// Combines the pieces: stage1 = K₁ ε_N Σ‖𝔅^k H‖, stage2 = Σ L_{V_t}·err_t,
/// total = stage1 + stage2; the precondition is `ε_N ≤ (1/2L_r)(1 ∧ 1/δ)`.
/// Bounds are reported even when the precondition fails.
pub fn stage_bounds(
    k1: XFloat,
    epsilon_n: f64,
    bellman_norms: &[XFloat],
    lip_v: &[XFloat],
    chain_errors: &[f64],
    r_lip: f64,
    delta: f64,
) -> StageBounds {
    let eps = XFloat::from_f64(epsilon_n);
    let mut norm_sum = XFloat::ZERO;
    for &b in bellman_norms {
        norm_sum = norm_sum.add(b);
    }
    let stage1 = k1.mul(eps).mul(norm_sum);
    let mut stage2 = XFloat::ZERO;
    for (l, &e) in lip_v.iter().zip(chain_errors) {
        stage2 = stage2.add(l.mul(XFloat::from_f64(e)));
    }
    let total = stage1.add(stage2);
    let threshold = (1.0 / (2.0 * r_lip)) * 1.0f64.min(1.0 / delta);
    StageBounds { stage1, stage2, total, precondition_ok: epsilon_n <= threshold }
}

// ── Report ───────────────────────────────────────────────────────────────

/// Every bound constant of a run, with f64 values (inf when out of range)
/// and their log10 counterparts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub n_hidden: usize,
    pub horizon: usize,
    pub epsilon_n: f64,
    pub epsilon_n_se: f64,
    pub k1: f64,
    pub k1_log10: f64,
    pub bellman_norms: Vec<f64>,
    pub bellman_norms_log10: Vec<f64>,
    pub lip_v: Vec<f64>,
    pub lip_v_log10: Vec<f64>,
    pub chain_errors: Vec<f64>,
    pub chain_errors_se: Vec<f64>,
    pub stage1: f64,
    pub stage1_log10: f64,
    pub stage2: f64,
    pub stage2_log10: f64,
    pub total: f64,
    pub total_log10: f64,
    pub precondition_ok: bool,
}

/// Assembles the full report from model constants and measured errors.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    n_hidden: usize,
    horizon: usize,
    r_sup: f64,
    r_lip: f64,
    delta: f64,
    h_sup: f64,
    h_lip: f64,
    epsilon_n: f64,
    epsilon_n_se: f64,
    chain_errors: &[(f64, f64)],
) -> ErrorReport {
    let k1 = k1_constant_x(r_sup, r_lip, delta);
    let bellman = bellman_norm_recursion_x(h_sup, h_lip, r_sup, r_lip, delta, horizon);
    let lip = lipschitz_recursion_x(n_hidden, r_sup, r_lip, delta, h_sup, h_lip, horizon);
    let errs: Vec<f64> = chain_errors.iter().map(|&(e, _)| e).collect();
    let ses: Vec<f64> = chain_errors.iter().map(|&(_, se)| se).collect();
    let stages = stage_bounds(k1, epsilon_n, &bellman, &lip, &errs, r_lip, delta);
    ErrorReport {
        n_hidden,
        horizon,
        epsilon_n,
        epsilon_n_se,
        k1: k1.to_f64(),
        k1_log10: k1.log10(),
        bellman_norms: bellman.iter().map(|x| x.to_f64()).collect(),
        bellman_norms_log10: bellman.iter().map(|x| x.log10()).collect(),
        lip_v: lip.iter().map(|x| x.to_f64()).collect(),
        lip_v_log10: lip.iter().map(|x| x.log10()).collect(),
        chain_errors: errs,
        chain_errors_se: ses,
        stage1: stages.stage1.to_f64(),
        stage1_log10: stages.stage1.log10(),
        stage2: stages.stage2.to_f64(),
        stage2_log10: stages.stage2.log10(),
        total: stages.total.to_f64(),
        total_log10: stages.total.log10(),
        precondition_ok: stages.precondition_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn xfloat_roundtrip_and_arithmetic() {
        for x in [0.0, 1.0, 0.5, 3.25, 1e-300, 1e300, 2f64.powi(-1070)] {
            assert_eq!(XFloat::from_f64(x).to_f64(), x, "roundtrip {x}");
        }
        let a = XFloat::from_f64(3.0);
        let b = XFloat::from_f64(4.5);
        assert_eq!(a.mul(b).to_f64(), 13.5);
        assert_eq!(a.add(b).to_f64(), 7.5);
        assert_eq!(XFloat::max(a, b).to_f64(), 4.5);
        // Out-of-range product: finite log10, infinite f64.
        let big = XFloat::from_f64(1e300).mul(XFloat::from_f64(1e300));
        assert_eq!(big.to_f64(), f64::INFINITY);
        assert!((big.log10() - 600.0).abs() < 1e-9);
        assert!(big.fmt_sci().ends_with("e+600") || big.fmt_sci().ends_with("e+599"));
    }

    proptest! {
        #[test]
        fn xfloat_matches_f64_in_range(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
            let xa = XFloat::from_f64(a);
            let xb = XFloat::from_f64(b);
            prop_assert_eq!(xa.mul(xb).to_f64(), a * b);
            prop_assert_eq!(xa.add(xb).to_f64(), a + b);
            prop_assert_eq!(XFloat::max(xa, xb).to_f64(), a.max(b));
        }
    }

    #[test]
    fn k1_unit_constants() {
        // L_r(1+2r̄L_r) = 3 and δr̄[r̄+L_r(2+2δr̄)] = 5.
        assert_eq!(k1_constant(1.0, 1.0, 1.0), 8.0);
        // L_r → 0 collapses to δ·r̄².
        assert!((k1_constant(2.0, 1e-300, 3.0) - 12.0).abs() < 1e-9);
    }

    #[test]
    fn bellman_norms_unit_constants() {
        let terms = bellman_norm_recursion(1.0, 1.0, 1.0, 1.0, 1.0, 3);
        assert_eq!(terms[0], 2.0);
        // k = 1: sup 1, Lipschitz ‖H‖_𝕃 + ‖H‖_𝕃(r̄+L_r)(1+δr̄(1+r̄δ)) = 2 + 2·2·3 = 14.
        assert_eq!(terms[1], 15.0);
        // Zero reward kills every term.
        let zeros = bellman_norm_recursion(0.0, 0.0, 1.0, 1.0, 1.0, 4);
        assert!(zeros.iter().all(|&x| x == 0.0));
        // Single-epoch horizon: only h_sup + h_lip.
        let one = bellman_norm_recursion(0.75, 0.5, 3.0, 2.0, 1.0, 1);
        assert_eq!(one, vec![1.25]);
    }

    #[test]
    fn lipschitz_recursion_hand_cases() {
        // Terminal term is exactly 2√N(h_sup + h_lip).
        let l = lipschitz_recursion(4, 1.0, 1.0, 1.0, 1.0, 0.0, 2);
        assert_eq!(l[2], 4.0);
        // N=1, unit constants, h_lip = 0, one step back:
        // 4·[3 + 2·3·2]·2 + 2 = 122.
        let l = lipschitz_recursion(1, 1.0, 1.0, 1.0, 1.0, 0.0, 1);
        assert_eq!(l[1], 2.0);
        assert_eq!(l[0], 122.0);
        // Zero reward: all zeros.
        let l = lipschitz_recursion(3, 2.0, 2.0, 2.0, 0.0, 0.0, 3);
        assert!(l.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lipschitz_growth_envelope() {
        // L_t ≤ C^{N₀−t} (L_{N₀} + (N₀−t)·A) with C = max(1, 8√N r̄δ(1+2r̄δ)(r̄+L_r)).
        let (n, r, lr, d, hs, hl, n0) = (5usize, 2.0, 1.5, 0.7, 1.0, 0.5, 8usize);
        let l = lipschitz_recursion_x(n, r, lr, d, hs, hl, n0);
        let sqrt_n = (n as f64).sqrt();
        let c = (8.0 * sqrt_n * r * d * (1.0 + 2.0 * r * d) * (r + lr)).max(1.0);
        let a = 4.0 * sqrt_n * (1.0 + 2.0 * r) * hs * (r + lr) + 2.0 * sqrt_n * (hs + hl);
        let terminal = l[n0].to_f64();
        for t in 0..=n0 {
            let k = (n0 - t) as f64;
            let envelope = c.powf(k) * (terminal + k * a);
            assert!(
                l[t].to_f64() <= envelope * (1.0 + 1e-12),
                "t={t}: {} > {envelope}",
                l[t].to_f64()
            );
        }
    }

    #[test]
    fn stage_bounds_compose() {
        let k1 = k1_constant_x(1.0, 1.0, 1.0);
        let bell = bellman_norm_recursion_x(1.0, 1.0, 1.0, 1.0, 1.0, 2);
        let lip = lipschitz_recursion_x(2, 1.0, 1.0, 1.0, 1.0, 1.0, 2);
        let errs = [0.0, 0.01, 0.02];
        let s = stage_bounds(k1, 0.05, &bell, &lip, &errs, 1.0, 1.0);
        let expect1 = 8.0 * 0.05 * (bell[0].to_f64() + bell[1].to_f64());
        assert!((s.stage1.to_f64() - expect1).abs() < 1e-12);
        let expect2 =
            lip[1].to_f64() * 0.01 + lip[2].to_f64() * 0.02;
        assert!((s.stage2.to_f64() - expect2).abs() < 1e-12);
        assert!((s.total.to_f64() - (expect1 + expect2)).abs() < 1e-12);
        // ε = 0.05 ≤ 1/(2L_r)·min(1, 1/δ) = 0.5 → ok.
        assert!(s.precondition_ok);
        // Halving ε strictly decreases the total.
        let s2 = stage_bounds(k1, 0.025, &bell, &lip, &errs, 1.0, 1.0);
        assert!(s2.total.to_f64() < s.total.to_f64());
        // Zero everything → zero total.
        let s0 = stage_bounds(k1, 0.0, &bell, &lip, &[0.0, 0.0, 0.0], 1.0, 1.0);
        assert_eq!(s0.total.to_f64(), 0.0);
    }

    #[test]
    fn report_with_astronomical_delta_stays_finite_in_log10() {
        // Constants of the water-tank scale: δ ~ 1e244 overflows K₁ in f64
        // but the log10 record stays finite and positive.
        let rep = build_report(
            12,
            10,
            622.7,
            8170.0,
            5.7e244,
            1.0,
            1.0,
            0.02,
            1e-4,
            &[(0.0, 0.0); 11],
        );
        assert!(rep.k1.is_infinite());
        assert!(rep.k1_log10.is_finite() && rep.k1_log10 > 0.0);
        assert!(rep.stage1_log10.is_finite());
        assert!(!rep.precondition_ok);
        // Stage-2 here is zero (no chain error), so the total is stage 1.
        assert_eq!(rep.total_log10, rep.stage1_log10);
    }
}
