//! Per-response state machine deciding when to insert visual evidence.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_shift, visual_attention_mass, AttentionSnapshot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    /// Fire when visual attention mass jumps by more than the threshold.
    #[default]
    AttentionShift,
    /// Fire after every token containing a line break.
    Newline,
    Never,
}

impl TriggerMode {
    pub fn name(&self) -> &'static str {
        match self {
            TriggerMode::AttentionShift => "attention_shift",
            TriggerMode::Newline => "newline",
            TriggerMode::Never => "never",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub delta: f64,
    pub n_layers: usize,
    pub mode: TriggerMode,
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() {
            return Err(Error::Config("delta must not be NaN".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Fire,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub token_index: usize,
    pub mass: f64,
    /// Shift from the previous generated token; absent for the first one.
    pub delta: Option<f64>,
    pub fired: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    prev_visual_mass: Option<f64>,
    fire_count: usize,
    history: Vec<Observation>,
}

impl TriggerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fire_count(&self) -> usize {
        self.fire_count
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Records a generated token with visual mass `mass` and returns the decision.
    pub fn observe_mass(&mut self, cfg: &TriggerConfig, mass: f64, token_text: &str) -> Decision {
        let delta = self.prev_visual_mass.map(|prev| attention_shift(mass, prev));
        let fired = match cfg.mode {
            TriggerMode::AttentionShift => delta.is_some_and(|d| d > cfg.delta),
            TriggerMode::Newline => token_text.contains('\n'),
            TriggerMode::Never => false,
        };
        self.history.push(Observation { token_index: self.history.len(), mass, delta, fired });
        self.prev_visual_mass = Some(mass);
        if fired {
            self.fire_count += 1;
            Decision::Fire
        } else {
            Decision::Hold
        }
    }

    /// Observes one decoding step given its attention rows (the last `cfg.n_layers` are used).
    pub fn observe(
        &mut self,
        cfg: &TriggerConfig,
        snap: &AttentionSnapshot<f64>,
        token_text: &str,
    ) -> Result<Decision> {
        let mass = visual_attention_mass(&snap.last_layers(cfg.n_layers)?)?;
        Ok(self.observe_mass(cfg, mass, token_text))
    }

    /// The Δ series over every token that had a predecessor.
    pub fn deltas(&self) -> Vec<f64> {
        self.history.iter().filter_map(|o| o.delta).collect()
    }
}

/// Fire count for a fixed mass sequence.
pub fn count_fires(cfg: &TriggerConfig, masses: &[f64]) -> usize {
    let mut state = TriggerState::new();
    for &m in masses {
        state.observe_mass(cfg, m, "");
    }
    state.fire_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(delta: f64) -> TriggerConfig {
        TriggerConfig { delta, n_layers: 3, mode: TriggerMode::AttentionShift }
    }

    #[test]
    fn fires_on_strict_jump() {
        let mut s = TriggerState::new();
        assert_eq!(s.observe_mass(&cfg(0.2), 0.10, "a"), Decision::Hold);
        assert_eq!(s.observe_mass(&cfg(0.2), 0.35, "b"), Decision::Fire);
        assert_eq!(s.observe_mass(&cfg(0.2), 0.35, "c"), Decision::Hold);
        assert_eq!(s.fire_count(), 1);
        assert_eq!(s.history().len(), 3);
    }

    #[test]
    fn exact_threshold_holds() {
        let mut s = TriggerState::new();
        s.observe_mass(&cfg(0.25), 0.25, "");
        assert_eq!(s.observe_mass(&cfg(0.25), 0.5, ""), Decision::Hold);
    }

    #[test]
    fn first_token_never_fires() {
        let mut s = TriggerState::new();
        assert_eq!(s.observe_mass(&cfg(f64::NEG_INFINITY), 0.9, "\n"), Decision::Hold);
    }

    #[test]
    fn newline_and_never_modes() {
        let nl = TriggerConfig { delta: 0.0, n_layers: 1, mode: TriggerMode::Newline };
        let mut s = TriggerState::new();
        assert_eq!(s.observe_mass(&nl, 0.1, "x"), Decision::Hold);
        assert_eq!(s.observe_mass(&nl, 0.1, "\n"), Decision::Fire);
        let never = TriggerConfig { mode: TriggerMode::Never, ..nl };
        assert_eq!(count_fires(&never, &[0.0, 1.0, 0.0, 1.0]), 0);
    }

    #[test]
    fn reset_is_idempotent() {
        let mut s = TriggerState::new();
        s.observe_mass(&cfg(0.0), 0.1, "");
        s.observe_mass(&cfg(0.0), 0.9, "");
        s.reset();
        assert_eq!(s, TriggerState::new());
        s.reset();
        assert_eq!(s, TriggerState::new());
        assert_eq!(s.observe_mass(&cfg(-1.0), 0.5, ""), Decision::Hold);
    }

    #[test]
    fn infinite_thresholds() {
        let masses = [0.1, 0.5, 0.2, 0.9, 0.1];
        assert_eq!(count_fires(&cfg(f64::INFINITY), &masses), 0);
        assert_eq!(count_fires(&cfg(f64::NEG_INFINITY), &masses), masses.len() - 1);
    }

    #[test]
    fn observe_uses_last_layers() {
        let snap = AttentionSnapshot {
            per_layer: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            context_len: 2,
            visual_indices: vec![1],
        };
        let mut s = TriggerState::new();
        let one = TriggerConfig { delta: 0.0, n_layers: 1, mode: TriggerMode::AttentionShift };
        s.observe(&one, &snap, "").unwrap();
        assert_eq!(s.history()[0].mass, 0.0);
        let too_many = TriggerConfig { n_layers: 3, ..one };
        assert!(s.observe(&too_many, &snap, "").is_err());
    }

    proptest! {
        #[test]
        fn fire_count_non_increasing_in_delta(masses in prop::collection::vec(0.0f64..1.0, 1..60), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(count_fires(&cfg(hi), &masses) <= count_fires(&cfg(lo), &masses));
        }

        #[test]
        fn history_matches_fire_count(masses in prop::collection::vec(0.0f64..1.0, 0..40), delta in -0.5f64..0.5) {
            let mut s = TriggerState::new();
            for m in &masses {
                s.observe_mass(&cfg(delta), *m, "");
            }
            prop_assert_eq!(s.history().len(), masses.len());
            prop_assert_eq!(s.history().iter().filter(|o| o.fired).count(), s.fire_count());
            prop_assert_eq!(s.deltas().len(), masses.len().saturating_sub(1));
        }
    }
}
