//! Closed-form speedup and management-overhead model.
//!
//! Overhead splits into a mapping-computation part (a log-depth global stage
//! plus `n/k` local decisions) and a messaging part (`c_b` per global node
//! plus `c_b` per PE of a cluster). Each mapping decision over `nu`
//! candidates costs `c_s * log2(nu)`. Everything is real-valued.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticParams {
    pub m: u32,
    pub n: u32,
    pub k: u32,
    /// Child task length in ticks.
    pub l: f64,
    pub c_s: f64,
    pub c_b: f64,
}

impl AnalyticParams {
    pub fn with_k(self, k: u32) -> Self {
        AnalyticParams { k, ..self }
    }

    pub fn is_valid(&self) -> bool {
        self.m >= 1 && self.n >= 1 && self.k >= 1 && self.k <= self.m && self.m.is_multiple_of(self.k)
    }

    fn pe_per_cluster(&self) -> f64 {
        self.m as f64 / self.k as f64
    }
}

/// Time for one selection among `nu` candidates.
pub fn omega_s(nu: f64, c_s: f64) -> f64 {
    assert!(nu >= 1.0);
    c_s * nu.log2()
}

/// Mapping computation overhead.
pub fn omega_cmp(p: &AnalyticParams) -> f64 {
    let global = (p.n as f64).log2() * omega_s(p.k as f64, p.c_s);
    let local = p.n as f64 / p.k as f64 * omega_s(p.pe_per_cluster(), p.c_s);
    global + local
}

/// Messaging overhead.
pub fn omega_msg(p: &AnalyticParams) -> f64 {
    p.c_b * p.k as f64 + p.c_b * p.pe_per_cluster()
}

pub fn omega(p: &AnalyticParams) -> f64 {
    omega_cmp(p) + omega_msg(p)
}

pub fn speedup(p: &AnalyticParams) -> f64 {
    assert!(p.is_valid(), "invalid analytic parameters {p:?}");
    let waves = p.n.div_ceil(p.m) as f64;
    p.n as f64 * p.l / (waves * p.l + omega(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelPoint {
    pub k: u32,
    pub c_s: f64,
    pub c_b: f64,
    pub omega_cmp: f64,
    pub omega_msg: f64,
    pub speedup_model: f64,
}

/// Evaluate the model at every `k` (all must divide `base.m`).
pub fn model_curve(base: &AnalyticParams, k_values: &[u32]) -> Vec<ModelPoint> {
    k_values
        .iter()
        .map(|&k| {
            let p = base.with_k(k);
            let cmp = omega_cmp(&p);
            let msg = omega_msg(&p);
            let s = speedup(&p);
            debug_assert!((omega(&p) - (cmp + msg)).abs() < 1e-9);
            ModelPoint {
                k,
                c_s: p.c_s,
                c_b: p.c_b,
                omega_cmp: cmp,
                omega_msg: msg,
                speedup_model: s,
            }
        })
        .collect()
}

/// Powers of two from 1 to `m` inclusive.
pub fn power_of_two_grid(m: u32) -> Vec<u32> {
    std::iter::successors(Some(1u32), |k| k.checked_mul(2))
        .take_while(|k| *k <= m)
        .collect()
}

pub fn argmax_k(curve: &[ModelPoint]) -> Option<u32> {
    curve
        .iter()
        .max_by(|a, b| a.speedup_model.total_cmp(&b.speedup_model))
        .map(|p| p.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig2(k: u32) -> AnalyticParams {
        AnalyticParams {
            m: 256,
            n: 256,
            k,
            l: 16000.0,
            c_s: 8.0,
            c_b: 8.0,
        }
    }

    #[test]
    fn selection_cost() {
        assert_eq!(omega_s(16.0, 8.0), 32.0);
        assert_eq!(omega_s(1.0, 8.0), 0.0);
        assert_eq!(omega_s(256.0, 8.0), 64.0);
    }

    #[test]
    fn computation_overhead() {
        assert_eq!(omega_cmp(&fig2(16)), 768.0);
        // fully distributed: local term vanishes
        let p = fig2(256);
        assert_eq!(omega_cmp(&p), 8.0 * omega_s(256.0, 8.0));
        // centralized: global term vanishes
        assert_eq!(omega_cmp(&fig2(1)), 256.0 * 8.0 * 8.0);
    }

    #[test]
    fn messaging_overhead() {
        assert_eq!(omega_msg(&fig2(16)), 256.0);
        assert_eq!(omega_msg(&fig2(1)), 2056.0);
        let grid = power_of_two_grid(256);
        let best = grid
            .iter()
            .min_by(|a, b| omega_msg(&fig2(**a)).total_cmp(&omega_msg(&fig2(**b))))
            .unwrap();
        assert_eq!(*best, 16);
    }

    #[test]
    fn speedup_examples() {
        let s = speedup(&fig2(16));
        assert!((s - 4_096_000.0 / 17_024.0).abs() < 1e-9);
        assert!((s - 240.6).abs() < 0.05);
        let serial = AnalyticParams {
            m: 1,
            n: 10,
            k: 1,
            ..fig2(1)
        };
        assert!(speedup(&serial) < 1.0);
    }

    #[test]
    fn optimum_between_32_and_64() {
        let curve = model_curve(&fig2(1), &power_of_two_grid(256));
        assert_eq!(curve.len(), 9);
        let k = argmax_k(&curve).unwrap();
        assert!(k == 32 || k == 64, "argmax {k}");
        // unimodal: one sign change of the discrete difference
        let d: Vec<bool> = curve
            .windows(2)
            .map(|w| w[1].speedup_model > w[0].speedup_model)
            .collect();
        let changes = d.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 1);
    }

    #[test]
    fn zero_overhead_is_flat() {
        let base = AnalyticParams {
            c_s: 0.0,
            c_b: 0.0,
            n: 100,
            ..fig2(1)
        };
        for p in model_curve(&base, &power_of_two_grid(256)) {
            assert!((p.speedup_model - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_selection_cost_lowers_speedup() {
        let base = fig2(1);
        let hi = AnalyticParams { c_s: 16.0, ..base };
        for k in power_of_two_grid(256).into_iter().skip(1) {
            assert!(speedup(&hi.with_k(k)) < speedup(&base.with_k(k)));
        }
    }

    proptest! {
        #[test]
        fn speedup_bounded_by_min_n_m(
            mexp in 0u32..10, kexp in 0u32..10, n in 1u32..2000,
            l in 1.0f64..1e5, c_s in 0.0f64..100.0, c_b in 0.0f64..100.0,
        ) {
            let m = 1 << mexp;
            let k = 1 << kexp.min(mexp);
            let p = AnalyticParams { m, n, k, l, c_s, c_b };
            let s = speedup(&p);
            prop_assert!(s <= n.min(m) as f64 + 1e-9);
            prop_assert!((omega(&p) - omega_cmp(&p) - omega_msg(&p)).abs() < 1e-9);
        }
    }
}
