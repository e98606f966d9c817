//! Mask plans: which units of one image are visible. A plan is sampled
//! uniformly without replacement, carries its provenance (total, ratio,
//! seed), and serializes to one canonical text line so runs can log and
//! replay their exact masking.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Rows;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask needs at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("mask ratio {0} must be in [0, 1]")]
    BadRatio(f64),
    #[error("bad mask plan line: {0}")]
    Parse(String),
}

/// One image's visible/masked split over its masking units.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Unit count `M` of the image.
    pub total: usize,
    /// Requested mask ratio (fraction hidden).
    pub ratio: f64,
    /// Seed the plan was drawn with.
    pub seed: u64,
    /// Visible unit indices, strictly increasing.
    pub visible: Vec<usize>,
    /// Masked unit indices, strictly increasing (complement of `visible`).
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Draw a plan: `round((1 - ratio) * total)` visible units, clamped so
    /// at least one unit is visible and at least one is masked.
    pub fn sample(total: usize, ratio: f64, seed: u64) -> Result<Self, MaskError> {
        if total < 2 {
            return Err(MaskError::TooFewUnits(total));
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(MaskError::BadRatio(ratio));
        }
        let keep = (((1.0 - ratio) * total as f64).round() as usize).clamp(1, total - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Partial Fisher-Yates: after `keep` swaps the prefix is a uniform
        // sample without replacement.
        let mut arr: Vec<usize> = (0..total).collect();
        for i in 0..keep {
            let j = i + rng.gen_range(0..total - i);
            arr.swap(i, j);
        }
        let mut visible = arr[..keep].to_vec();
        visible.sort_unstable();
        Ok(Self::from_visible(total, ratio, seed, visible))
    }

    fn from_visible(total: usize, ratio: f64, seed: u64, visible: Vec<usize>) -> Self {
        let mut is_visible = vec![false; total];
        for &u in &visible {
            is_visible[u] = true;
        }
        let masked = (0..total).filter(|&u| !is_visible[u]).collect();
        MaskPlan { total, ratio, seed, visible, masked }
    }

    /// Per-batch visible rows for the sparse encoder.
    pub fn visible_rows(plans: &[MaskPlan]) -> Rows {
        Rows::per_batch(plans.iter().map(|p| p.visible.clone()).collect())
    }

    /// Per-batch masked rows for the loss.
    pub fn masked_rows(plans: &[MaskPlan]) -> Rows {
        Rows::per_batch(plans.iter().map(|p| p.masked.clone()).collect())
    }
}

impl fmt::Display for MaskPlan {
    /// Canonical one-line form:
    /// `mask v1 total=16 ratio=0.75 seed=9 visible=1,4,5,12`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vis: Vec<String> = self.visible.iter().map(|u| u.to_string()).collect();
        write!(
            f,
            "mask v1 total={} ratio={} seed={} visible={}",
            self.total,
            self.ratio,
            self.seed,
            vis.join(",")
        )
    }
}

impl FromStr for MaskPlan {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, MaskError> {
        let bad = |msg: &str| MaskError::Parse(format!("{msg} in `{s}`"));
        let mut fields = s.split_whitespace();
        if fields.next() != Some("mask") || fields.next() != Some("v1") {
            return Err(bad("expected `mask v1` prefix"));
        }
        let mut total = None;
        let mut ratio = None;
        let mut seed = None;
        let mut visible: Option<Vec<usize>> = None;
        for field in fields {
            let (key, value) =
                field.split_once('=').ok_or_else(|| bad("expected key=value field"))?;
            match key {
                "total" => total = Some(value.parse().map_err(|_| bad("bad total"))?),
                "ratio" => ratio = Some(value.parse().map_err(|_| bad("bad ratio"))?),
                "seed" => seed = Some(value.parse().map_err(|_| bad("bad seed"))?),
                "visible" => {
                    let mut v = Vec::new();
                    for part in value.split(',') {
                        v.push(part.parse().map_err(|_| bad("bad visible index"))?);
                    }
                    visible = Some(v);
                }
                _ => return Err(bad("unknown field")),
            }
        }
        let total = total.ok_or_else(|| bad("missing total"))?;
        let ratio = ratio.ok_or_else(|| bad("missing ratio"))?;
        let seed = seed.ok_or_else(|| bad("missing seed"))?;
        let visible = visible.ok_or_else(|| bad("missing visible"))?;
        if total < 2 {
            return Err(MaskError::TooFewUnits(total));
        }
        if visible.is_empty() || visible.len() >= total {
            return Err(bad("visible count must be in [1, total-1]"));
        }
        if visible.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("visible indices must be strictly increasing"));
        }
        if *visible.last().unwrap() >= total {
            return Err(bad("visible index out of range"));
        }
        Ok(Self::from_visible(total, ratio, seed, visible))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn sample_counts_and_complement() {
        let plan = MaskPlan::sample(16, 0.75, 3).unwrap();
        assert_eq!(plan.visible.len(), 4);
        assert_eq!(plan.masked.len(), 12);
        assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
        let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn sample_is_deterministic_in_seed() {
        let a = MaskPlan::sample(16, 0.75, 7).unwrap();
        let b = MaskPlan::sample(16, 0.75, 7).unwrap();
        let c = MaskPlan::sample(16, 0.75, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.visible, c.visible);
    }

    #[test]
    fn extreme_ratios_clamp_to_valid_plans() {
        let all_masked = MaskPlan::sample(16, 1.0, 0).unwrap();
        assert_eq!(all_masked.visible.len(), 1);
        let none_masked = MaskPlan::sample(16, 0.0, 0).unwrap();
        assert_eq!(none_masked.masked.len(), 1);
        assert_eq!(MaskPlan::sample(1, 0.5, 0), Err(MaskError::TooFewUnits(1)));
        assert_eq!(MaskPlan::sample(16, 1.5, 0), Err(MaskError::BadRatio(1.5)));
    }

    /// Chi-squared-free uniformity smoke: every unit should be visible in
    /// roughly `keep/total` of draws.
    #[test]
    fn sampling_is_roughly_uniform() {
        let mut hits: HashMap<usize, usize> = HashMap::new();
        let draws = 4000;
        for seed in 0..draws {
            for &u in &MaskPlan::sample(16, 0.75, seed).unwrap().visible {
                *hits.entry(u).or_default() += 1;
            }
        }
        let expect = draws as f64 * 4.0 / 16.0;
        for u in 0..16 {
            let h = hits[&u] as f64;
            assert!(
                (h - expect).abs() < expect * 0.15,
                "unit {u} visible {h} times, expected ~{expect}"
            );
        }
    }

    #[test]
    fn text_line_round_trips() {
        let plan = MaskPlan::sample(16, 0.75, 42).unwrap();
        let line = plan.to_string();
        let parsed: MaskPlan = line.parse().unwrap();
        assert_eq!(plan, parsed);
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        for bad in [
            "mask v2 total=4 ratio=0.5 seed=0 visible=0",
            "mask v1 total=4 ratio=0.5 seed=0",
            "mask v1 total=4 ratio=0.5 seed=0 visible=0,0",
            "mask v1 total=4 ratio=0.5 seed=0 visible=2,1",
            "mask v1 total=4 ratio=0.5 seed=0 visible=0,1,2,3",
            "mask v1 total=4 ratio=0.5 seed=0 visible=4",
            "mask v1 total=4 ratio=0.5 seed=0 visible=0 extra=1",
        ] {
            assert!(bad.parse::<MaskPlan>().is_err(), "{bad}");
        }
    }
}
