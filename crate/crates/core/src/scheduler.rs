//! Per-epoch stochastic unfreezing of extractor units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{FreezeState, UnfreezeEvent};
use crate::rng::{RngState, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// One unit may unfreeze per epoch (`UF`).
    Progressive,
    /// The extractor never trains (`F`).
    Frozen,
    /// Every unit trains from the first epoch.
    Normal,
}

impl PolicyMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "progressive" | "uf" | "UF" => Some(Self::Progressive),
            "frozen" | "f" | "F" => Some(Self::Frozen),
            "normal" => Some(Self::Normal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Progressive => "progressive",
            Self::Frozen => "frozen",
            Self::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnfreezePolicy {
    pub mode: PolicyMode,
    pub phi: f64,
    rng: SeededRng,
}

impl UnfreezePolicy {
    pub fn new(mode: PolicyMode, phi: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&phi) {
            return Err(Error::config("phi", format!("must lie in [0, 1], got {phi}")));
        }
        Ok(Self {
            mode,
            phi,
            rng: SeededRng::new(seed),
        })
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    pub fn restore_rng(&mut self, state: RngState) {
        self.rng = SeededRng::from_state(state);
    }

    /// Advances the schedule by one epoch. Progressive mode consumes exactly
    /// one uniform draw per call, saturated or not, so the stream position
    /// depends only on the number of epochs.
    pub fn step_epoch(&mut self, state: &FreezeState, epoch: usize, units: usize) -> FreezeState {
        let p = match self.mode {
            PolicyMode::Progressive => self.rng.rng().random::<f64>(),
            _ => 0.0,
        };
        step_with_draw(self.mode, self.phi, state, epoch, units, p)
    }
}

/// The deterministic part of [`UnfreezePolicy::step_epoch`] given the draw `p`.
pub fn step_with_draw(
    mode: PolicyMode,
    phi: f64,
    state: &FreezeState,
    epoch: usize,
    units: usize,
    p: f64,
) -> FreezeState {
    let mut next = state.clone();
    match mode {
        PolicyMode::Frozen => {}
        PolicyMode::Normal => {
            for unit_index in next.unfrozen_count..units {
                next.epoch_log.push(UnfreezeEvent { epoch, unit_index });
            }
            next.unfrozen_count = next.unfrozen_count.max(units);
        }
        PolicyMode::Progressive => {
            if p > phi && next.unfrozen_count < units {
                next.epoch_log.push(UnfreezeEvent {
                    epoch,
                    unit_index: next.unfrozen_count,
                });
                next.unfrozen_count += 1;
            }
        }
    }
    next
}

/// Number of epochs a progressive schedule needs to unfreeze all `units`.
pub fn simulate_saturation_epochs(phi: f64, units: usize, seed: u64) -> usize {
    let mut policy = UnfreezePolicy::new(PolicyMode::Progressive, phi, seed).expect("phi validated by caller");
    let mut state = FreezeState::frozen();
    let mut epoch = 0;
    while state.unfrozen_count < units {
        state = policy.step_epoch(&state, epoch, units);
        epoch += 1;
    }
    epoch
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn draw_above_phi_unfreezes_one() {
        let s = FreezeState::with_unfrozen(3);
        let next = step_with_draw(PolicyMode::Progressive, 0.66, &s, 5, 13, 0.70);
        assert_eq!(next.unfrozen_count, 4);
        assert_eq!(
            next.epoch_log.last(),
            Some(&UnfreezeEvent {
                epoch: 5,
                unit_index: 3
            })
        );
    }

    #[test]
    fn draw_below_or_at_phi_is_a_no_op() {
        let s = FreezeState::with_unfrozen(3);
        assert_eq!(step_with_draw(PolicyMode::Progressive, 0.66, &s, 0, 13, 0.50), s);
        assert_eq!(step_with_draw(PolicyMode::Progressive, 0.66, &s, 0, 13, 0.66), s);
    }

    #[test]
    fn saturated_state_stays() {
        let s = FreezeState::with_unfrozen(13);
        assert_eq!(step_with_draw(PolicyMode::Progressive, 0.66, &s, 0, 13, 0.99), s);
    }

    #[test]
    fn frozen_and_normal_modes() {
        let mut f = UnfreezePolicy::new(PolicyMode::Frozen, 0.0, 1).unwrap();
        let mut s = FreezeState::frozen();
        for e in 0..50 {
            s = f.step_epoch(&s, e, 13);
        }
        assert_eq!(s.unfrozen_count, 0);
        let mut n = UnfreezePolicy::new(PolicyMode::Normal, 0.66, 1).unwrap();
        let s = n.step_epoch(&FreezeState::frozen(), 0, 13);
        assert_eq!(s.unfrozen_count, 13);
        assert_eq!(n.step_epoch(&s, 1, 13), s);
    }

    #[test]
    fn phi_out_of_range_is_rejected() {
        assert!(UnfreezePolicy::new(PolicyMode::Progressive, 1.2, 0).is_err());
    }

    #[test]
    fn unbounded_unfreeze_rate() {
        let mut p = UnfreezePolicy::new(PolicyMode::Progressive, 0.66, 42).unwrap();
        let mut s = FreezeState::frozen();
        for e in 0..10_000 {
            s = p.step_epoch(&s, e, usize::MAX);
        }
        let rate = s.unfrozen_count as f64 / 10_000.0;
        assert!((rate - 0.34).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn phi_zero_saturates_in_u_epochs() {
        assert_eq!(simulate_saturation_epochs(0.0, 13, 3), 13);
    }

    #[test]
    fn rng_state_resumes_schedule() {
        let mut a = UnfreezePolicy::new(PolicyMode::Progressive, 0.66, 9).unwrap();
        let mut sa = FreezeState::frozen();
        for e in 0..10 {
            sa = a.step_epoch(&sa, e, 13);
        }
        let mut b = UnfreezePolicy::new(PolicyMode::Progressive, 0.66, 0).unwrap();
        b.restore_rng(a.rng_state());
        let mut sb = sa.clone();
        for e in 10..40 {
            sa = a.step_epoch(&sa, e, 13);
            sb = b.step_epoch(&sb, e, 13);
        }
        assert_eq!(sa, sb);
    }

    proptest! {
        #[test]
        fn monotone_at_most_one_and_reproducible(seed in any::<u64>(), phi in 0.0f64..=1.0, units in 0usize..20) {
            let run = || {
                let mut p = UnfreezePolicy::new(PolicyMode::Progressive, phi, seed).unwrap();
                let mut s = FreezeState::frozen();
                let mut counts = vec![0];
                for e in 0..60 {
                    s = p.step_epoch(&s, e, units);
                    counts.push(s.unfrozen_count);
                }
                (s, counts)
            };
            let (s1, c1) = run();
            let (s2, _) = run();
            prop_assert_eq!(&s1, &s2);
            for w in c1.windows(2) {
                prop_assert!(w[1] >= w[0] && w[1] - w[0] <= 1);
            }
            prop_assert!(s1.unfrozen_count <= units);
        }
    }
}
