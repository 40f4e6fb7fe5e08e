//! Rectified-flow noise levels, timestep skipping and multi-stage plans.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, CarveError, Result};
use crate::sfc::GridDims;

/// Base sampler steps.
pub const DEFAULT_BASE_STEPS: usize = 50;
/// Steps retained by the default skip schedule.
pub const DEFAULT_KEEP: usize = 23;
pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 7.0;
/// Shift increment applied at every stage switch.
pub const ALPHA_STEP: f64 = 2.0;

/// Timestep shift `σ(u) = αu / (1 + (α−1)u)`.
pub fn shift_sigma(u: f64, alpha: f64) -> f64 {
    alpha * u / (1.0 + (alpha - 1.0) * u)
}

/// Uniform time of base step `index`: step 0 is `u = 1`, step `T−1` is `u = 1/T`.
pub fn base_time(index: usize, base_steps: usize) -> f64 {
    (base_steps - index) as f64 / base_steps as f64
}

/// Noise levels of the retained steps, followed by a terminal zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaSchedule {
    pub sigmas: Vec<f64>,
}

impl SigmaSchedule {
    /// Number of denoising steps (transitions).
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// `(σ_t, σ_next)` pairs in sampling order.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.sigmas.windows(2).map(|w| (w[0], w[1]))
    }
}

pub fn shifted_sigmas(step_indices: &[usize], base_steps: usize, alpha: f64) -> Result<SigmaSchedule> {
    if alpha.is_nan() || alpha < 1.0 {
        return domain_err(format!("shift factor {alpha} must be >= 1"));
    }
    check_indices(step_indices, base_steps)?;
    let mut sigmas: Vec<f64> = step_indices
        .iter()
        .map(|&i| shift_sigma(base_time(i, base_steps), alpha))
        .collect();
    sigmas.push(0.0);
    Ok(SigmaSchedule { sigmas })
}

fn check_indices(indices: &[usize], base_steps: usize) -> Result<()> {
    if indices.is_empty() {
        return domain_err("a stage needs at least one step");
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return domain_err(format!("step indices {indices:?} are not strictly ascending"));
    }
    if *indices.last().unwrap() >= base_steps {
        return domain_err(format!("step index beyond the {base_steps}-step grid"));
    }
    Ok(())
}

/// Picks `keep` of `base_steps` indices, dense at both ends and sparse in
/// the middle.
///
/// Gaps follow a parabolic profile `1 + ⌊c·(1 − x²)⌋` over the gap position
/// `x ∈ (−1, 1)` with `c` the largest value whose gaps fit; the remainder is
/// spread one step each over the gaps nearest the centre, the later gap first
/// on a tie. Flooring preserves
/// the profile's monotone halves, so the gap sequence is unimodal.
pub fn skip_schedule(base_steps: usize, keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > base_steps {
        return domain_err(format!("cannot keep {keep} of {base_steps} steps"));
    }
    if keep == 1 {
        return Ok(vec![0]);
    }
    let gaps_n = keep - 1;
    let span = (base_steps - 1) as i64;
    let profile: Vec<f64> = (0..gaps_n)
        .map(|i| {
            let x = (2.0 * i as f64 + 1.0) / gaps_n as f64 - 1.0;
            1.0 - x * x
        })
        .collect();
    let gaps_for = |c: f64| -> Vec<i64> { profile.iter().map(|&f| 1 + (c * f).floor() as i64).collect() };

    let extra = span - gaps_n as i64;
    let (mut lo, mut hi) = (0.0f64, 4.0 * (extra as f64 + 1.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gaps_for(mid).iter().sum::<i64>() <= span {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut gaps = gaps_for(lo);
    let rest = (span - gaps.iter().sum::<i64>()) as usize;
    debug_assert!(rest < gaps_n.max(1));

    let mut centre: Vec<usize> = (0..gaps_n).collect();
    let mid = (gaps_n as f64 - 1.0) / 2.0;
    centre.sort_by(|&a, &b| {
        (a as f64 - mid)
            .abs()
            .total_cmp(&(b as f64 - mid).abs())
            .then(b.cmp(&a))
    });
    for &g in &centre[..rest] {
        gaps[g] += 1;
    }

    let mut out = Vec::with_capacity(keep);
    let mut at = 0usize;
    out.push(at);
    for g in gaps {
        at += g as usize;
        out.push(at);
    }
    debug_assert_eq!(*out.last().unwrap(), base_steps - 1);
    Ok(out)
}

/// Whether `gaps` rises (weakly) to a peak and then falls (weakly).
pub fn is_unimodal(gaps: &[usize]) -> bool {
    let mut falling = false;
    for w in gaps.windows(2) {
        if w[1] < w[0] {
            falling = true;
        } else if w[1] > w[0] && falling {
            return false;
        }
    }
    true
}

/// One resolution stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub dims: GridDims,
    /// Ascending indices into the base step grid.
    pub steps: Vec<usize>,
    pub alpha: f64,
    pub k: f64,
    #[serde(default)]
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_base_steps")]
    pub base_steps: usize,
}

fn default_base_steps() -> usize {
    DEFAULT_BASE_STEPS
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.stages.last() else {
            return domain_err("plan has no stages");
        };
        let target = last.dims;
        let mut prev_last_step: Option<usize> = None;
        for (s, st) in self.stages.iter().enumerate() {
            check_indices(&st.steps, self.base_steps)
                .map_err(|e| CarveError::Domain(format!("stage {s}: {e}")))?;
            if st.alpha.is_nan() || st.alpha < 1.0 {
                return domain_err(format!("stage {s}: shift factor {} must be >= 1", st.alpha));
            }
            if !(st.k > 0.0 && st.k <= 1.0) {
                return domain_err(format!("stage {s}: selection rate {} not in (0, 1]", st.k));
            }
            if st.rho < 0.0 || (s > 0 && st.rho != 0.0) {
                return domain_err(format!(
                    "stage {s}: amplifier factor must be 0 after the first stage and never negative"
                ));
            }
            if st.dims.t > target.t || st.dims.h > target.h || st.dims.w > target.w {
                return domain_err(format!("stage {s} grid {} exceeds target {target}", st.dims));
            }
            if s > 0 {
                let p = self.stages[s - 1].dims;
                if st.dims.t < p.t || st.dims.h < p.h || st.dims.w < p.w {
                    return domain_err(format!("stage {s} shrinks the grid"));
                }
            }
            if let Some(prev) = prev_last_step {
                if st.steps[0] <= prev {
                    return domain_err(format!("stage {s} starts before the previous stage ends"));
                }
            }
            prev_last_step = st.steps.last().copied();
        }
        Ok(())
    }

    pub fn target(&self) -> GridDims {
        self.stages.last().expect("validated plan").dims
    }

    /// Denoiser evaluations over all stages.
    pub fn nfe(&self) -> usize {
        self.stages.iter().map(|s| s.steps.len()).sum()
    }

    /// Builds a plan from per-stage spatial scales of `target`.
    ///
    /// `boundaries[s]` is the first base step of stage `s` (`boundaries[0] == 0`).
    /// Every later stage starts exactly on its boundary step, adding it back
    /// when the skip schedule dropped it. Shift grows by [`ALPHA_STEP`] per
    /// stage and only the first stage carries `rho`.
    pub fn progressive(
        target: GridDims,
        scales: &[f64],
        boundaries: &[usize],
        rates: &[f64],
        keep: usize,
        alpha: f64,
        rho: f64,
    ) -> Result<Self> {
        let n = scales.len();
        if n == 0 || boundaries.len() != n || rates.len() != n || boundaries[0] != 0 {
            return domain_err("scales, boundaries and rates must align and start at step 0");
        }
        let retained = skip_schedule(DEFAULT_BASE_STEPS, keep)?;
        let mut stages = Vec::with_capacity(n);
        for s in 0..n {
            let lo = boundaries[s];
            let hi = boundaries.get(s + 1).copied().unwrap_or(DEFAULT_BASE_STEPS);
            let mut steps: Vec<usize> = retained.iter().copied().filter(|&i| i >= lo && i < hi).collect();
            if s > 0 && steps.first() != Some(&lo) {
                steps.insert(0, lo);
            }
            let scale = |x: usize| ((x as f64 * scales[s]).round() as usize).clamp(1, x);
            stages.push(StageSpec {
                dims: GridDims::new(target.t, scale(target.h), scale(target.w))?,
                steps,
                alpha: alpha + ALPHA_STEP * s as f64,
                k: rates[s],
                rho: if s == 0 { rho } else { 0.0 },
            });
        }
        let plan = Self {
            stages,
            base_steps: DEFAULT_BASE_STEPS,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Named configurations: `base` (one stage), `turbo` (0.75 → 1.0) and
    /// `3stage` (0.5 → 0.75 → 1.0).
    pub fn preset(name: &str, target: GridDims, keep: usize) -> Result<Self> {
        match name {
            "base" => Self::progressive(target, &[1.0], &[0], &[0.3], keep, DEFAULT_ALPHA, DEFAULT_RHO),
            "turbo" => Self::progressive(
                target,
                &[0.75, 1.0],
                &[0, 25],
                &[0.3, 0.2],
                keep,
                DEFAULT_ALPHA,
                DEFAULT_RHO,
            ),
            "3stage" => Self::progressive(
                target,
                &[0.5, 0.75, 1.0],
                &[0, 15, 25],
                &[0.3, 0.2, 0.2],
                keep,
                DEFAULT_ALPHA,
                DEFAULT_RHO,
            ),
            other => domain_err(format!("unknown preset '{other}'")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaps(idx: &[usize]) -> Vec<usize> {
        idx.windows(2).map(|w| w[1] - w[0]).collect()
    }

    #[test]
    fn identity_shift() {
        let all: Vec<usize> = (0..50).collect();
        let s = shifted_sigmas(&all, 50, 1.0).unwrap();
        assert_eq!(s.sigmas.len(), 51);
        for (i, &sig) in s.sigmas[..50].iter().enumerate() {
            assert!((sig - (50 - i) as f64 / 50.0).abs() < 1e-15);
        }
        assert_eq!(*s.sigmas.last().unwrap(), 0.0);
    }

    #[test]
    fn shift_closed_form() {
        assert!((shift_sigma(0.5, 7.0) - 0.875).abs() < 1e-15);
        assert!((shift_sigma(0.1, 1e12) - 1.0).abs() < 1e-9);
        assert_eq!(shift_sigma(1.0, 9.0), 1.0);
    }

    #[test]
    fn shift_rejects_small_alpha() {
        assert!(shifted_sigmas(&[0, 1], 50, 0.5).is_err());
        assert!(shifted_sigmas(&[3, 1], 50, 2.0).is_err());
        assert!(shifted_sigmas(&[50], 50, 2.0).is_err());
    }

    #[test]
    fn shifted_sigmas_strictly_decrease() {
        let idx = skip_schedule(50, 23).unwrap();
        for alpha in [1.0, 3.0, 7.0, 9.0, 11.0] {
            let s = shifted_sigmas(&idx, 50, alpha).unwrap();
            assert!(s.sigmas.windows(2).all(|w| w[0] > w[1]), "alpha {alpha}");
            assert_eq!(s.sigmas[0], 1.0);
        }
    }

    #[test]
    fn skip_full_and_endpoints() {
        assert_eq!(skip_schedule(50, 50).unwrap(), (0..50).collect::<Vec<_>>());
        assert_eq!(skip_schedule(50, 2).unwrap(), vec![0, 49]);
        assert_eq!(skip_schedule(50, 1).unwrap(), vec![0]);
        assert!(skip_schedule(50, 0).is_err());
        assert!(skip_schedule(50, 51).is_err());
    }

    #[test]
    fn skip_23_of_50() {
        let idx = skip_schedule(50, 23).unwrap();
        assert_eq!(idx.len(), 23);
        assert_eq!((idx[0], idx[22]), (0, 49));
        let g = gaps(&idx);
        assert!(is_unimodal(&g), "{g:?}");
        assert!(g[0] < g[g.len() / 2] && g[g.len() - 1] < g[g.len() / 2]);
    }

    #[test]
    fn skip_is_unimodal_for_every_keep() {
        for base in [10usize, 25, 50, 100] {
            for keep in 1..=base {
                let idx = skip_schedule(base, keep).unwrap();
                assert_eq!(idx.len(), keep);
                assert!(is_unimodal(&gaps(&idx)), "{base}/{keep}");
                if keep >= 2 {
                    assert_eq!(idx[keep - 1], base - 1);
                }
            }
        }
    }

    #[test]
    fn turbo_preset_bookkeeping() {
        let target = GridDims::new(8, 12, 16).unwrap();
        let plan = StagePlan::preset("turbo", target, 23).unwrap();
        assert_eq!(plan.stages.len(), 2);
        assert_eq!(plan.stages[0].dims, GridDims::new(8, 9, 12).unwrap());
        assert_eq!(plan.stages[1].steps[0], 25);
        assert_eq!(plan.stages[0].alpha, 7.0);
        assert_eq!(plan.stages[1].alpha, 9.0);
        assert_eq!(plan.stages[1].rho, 0.0);
        assert!(plan.stages[0].steps.iter().all(|&i| i < 25));
        let cells: Vec<usize> = plan.stages.iter().map(|s| s.dims.cells()).collect();
        assert_eq!(cells[0] as f64 / cells[1] as f64, 0.5625);
    }

    #[test]
    fn preset_step_counts() {
        let target = GridDims::new(4, 16, 16).unwrap();
        let nfe = |name| StagePlan::preset(name, target, 23).unwrap().nfe();
        assert_eq!(nfe("base"), 23);
        // switch to the last stage re-adds step 25; step 15 is already retained
        assert_eq!(nfe("turbo"), 24);
        assert_eq!(nfe("3stage"), 24);
    }

    #[test]
    fn validation_catches_bad_plans() {
        let d = GridDims::new(1, 4, 4).unwrap();
        let stage = |dims, steps: Vec<usize>, rho| StageSpec {
            dims,
            steps,
            alpha: 7.0,
            k: 0.3,
            rho,
        };
        let small = GridDims::new(1, 2, 2).unwrap();
        let ok = StagePlan {
            stages: vec![stage(small, vec![0, 10], 0.5), stage(d, vec![25, 49], 0.0)],
            base_steps: 50,
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.stages[1].rho = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.stages.swap(0, 1);
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.stages[1].steps = vec![5, 49];
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.stages[0].alpha = 0.9;
        assert!(bad.validate().is_err());
    }
}
