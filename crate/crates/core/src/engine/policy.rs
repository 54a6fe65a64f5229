use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::{CurriculumShape, PriorityOrder};

#[derive(Debug, Error, PartialEq)]
#[error("invalid policy: {0}")]
pub struct PolicyError(pub String);

/// How observations are drawn each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Recency-then-win priority with the curriculum update rule.
    Adastar,
    /// Recency-then-win priority, every drawn observation updated.
    Adad,
    /// Recency-only priority with the curriculum update rule.
    WoWin,
    /// Win-then-recency priority with the curriculum update rule.
    Pf,
    /// Classic STaR: every observation sampled in random order each iteration.
    StarRandom,
}

impl Variant {
    pub fn order(self) -> Option<PriorityOrder> {
        match self {
            Variant::Adastar | Variant::Adad => Some(PriorityOrder::RecencyThenWin),
            Variant::WoWin => Some(PriorityOrder::RecencyOnly),
            Variant::Pf => Some(PriorityOrder::WinThenRecency),
            Variant::StarRandom => None,
        }
    }

    pub fn is_adaptive(self) -> bool {
        self.order().is_some()
    }
}

/// Where the curriculum's model-strength signal comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSource {
    /// Accepted samples over generation attempts in the sampling phase.
    #[default]
    Sampling,
    /// The accuracy reported by the learner's training step.
    Learner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationPolicy {
    pub variant: Variant,
    /// Continue from the previous iteration's model instead of the base model.
    pub accumulate: bool,
    /// Train on every accepted sample instead of the batch budget.
    pub full_batch: bool,
    pub k: u32,
    pub rationalize: bool,
    /// Per-observation cap on accepted samples.
    pub cutoff: Option<u32>,
    pub curriculum_shape: CurriculumShape,
    pub alpha_source: AlphaSource,
    /// Pins alpha for every iteration. Diagnostic only.
    pub alpha_override: Option<f64>,
}

impl Default for IterationPolicy {
    fn default() -> Self {
        Self {
            variant: Variant::Adastar,
            accumulate: true,
            full_batch: false,
            k: 2,
            rationalize: true,
            cutoff: None,
            curriculum_shape: CurriculumShape::Square,
            alpha_source: AlphaSource::Sampling,
            alpha_override: None,
        }
    }
}

/// Named baselines and ablations.
pub const PRESETS: &[&str] = &[
    "star",
    "star-full",
    "star-acc",
    "star-acc-full",
    "star-acc-full-k",
    "restem",
    "adastar",
    "adad",
    "adastar-wo-win",
    "adastar-pf",
];

impl IterationPolicy {
    pub fn preset(name: &str) -> Option<Self> {
        let star = Self {
            variant: Variant::StarRandom,
            accumulate: false,
            ..Self::default()
        };
        let adaptive = |variant| Self {
            variant,
            ..Self::default()
        };
        Some(match name {
            "star" => star,
            "star-full" => Self {
                full_batch: true,
                ..star
            },
            "star-acc" => Self {
                accumulate: true,
                ..star
            },
            "star-acc-full" => Self {
                accumulate: true,
                full_batch: true,
                ..star
            },
            "star-acc-full-k" => Self {
                accumulate: true,
                full_batch: true,
                k: 5,
                rationalize: false,
                ..star
            },
            "restem" => Self {
                k: 11,
                rationalize: false,
                cutoff: Some(3),
                ..star
            },
            "adastar" => adaptive(Variant::Adastar),
            "adad" => adaptive(Variant::Adad),
            "adastar-wo-win" => adaptive(Variant::WoWin),
            "adastar-pf" => adaptive(Variant::Pf),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let fail = |m: &str| Err(PolicyError(m.into()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.rationalize && self.k > 2 {
            return fail("rationalization is only defined for k <= 2");
        }
        if let Some(c) = self.cutoff {
            if c == 0 {
                return fail("cutoff must be at least 1");
            }
            if self.variant != Variant::StarRandom {
                return fail("cutoff requires the star-random variant");
            }
        }
        if self.variant.is_adaptive() && self.full_batch {
            return fail("adaptive variants stop at the batch budget and cannot use full_batch");
        }
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return fail("alpha_override must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Short label, e.g. `adastar` or `star-acc-full`.
    pub fn label(&self) -> String {
        if let Some(name) = PRESETS
            .iter()
            .find(|n| IterationPolicy::preset(n).as_ref() == Some(self))
        {
            return (*name).to_string();
        }
        let base = match self.variant {
            Variant::Adastar => "adastar",
            Variant::Adad => "adad",
            Variant::WoWin => "adastar-wo-win",
            Variant::Pf => "adastar-pf",
            Variant::StarRandom => "star",
        };
        format!(
            "{base}{}{}-k{}",
            if self.accumulate { "-acc" } else { "" },
            if self.full_batch { "-full" } else { "" },
            self.k
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_labelled() {
        for name in PRESETS {
            let p = IterationPolicy::preset(name).unwrap();
            p.validate().unwrap();
            assert_eq!(p.label(), *name);
        }
        assert!(IterationPolicy::preset("b-star").is_none());
    }

    #[test]
    fn restem_configuration() {
        let p = IterationPolicy::preset("restem").unwrap();
        assert_eq!((p.k, p.cutoff, p.accumulate), (11, Some(3), false));
        assert_eq!(p.variant, Variant::StarRandom);
    }

    #[test]
    fn invalid_combinations() {
        let bad = [
            IterationPolicy { k: 0, ..Default::default() },
            IterationPolicy { k: 5, rationalize: true, ..Default::default() },
            IterationPolicy { cutoff: Some(3), rationalize: false, ..Default::default() },
            IterationPolicy { full_batch: true, ..Default::default() },
            IterationPolicy { alpha_override: Some(1.5), ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn ablation_orders() {
        assert_eq!(Variant::Pf.order(), Some(PriorityOrder::WinThenRecency));
        assert_eq!(Variant::WoWin.order(), Some(PriorityOrder::RecencyOnly));
        assert_eq!(Variant::StarRandom.order(), None);
    }
}
