//! Latch closing: three joints (left flap, rear flap, tuck tab) must be driven
//! shut in order. Four milestones: left folded, rear folded, tab inserted,
//! tab locked.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corruption, Event};
use crate::domain::{Observation, ViewLayout};

pub const N_JOINTS: usize = 3;
pub const N_STAGES: usize = 4;
pub const MOVE_CAP: f64 = 0.1;
pub const COMPLETE_AT: f64 = 0.95;
pub const INSERT_AT: f64 = 0.5;
pub const TOLERANCE: f64 = 0.05;
/// Joints can be pushed past closed; over-travel leaves the tolerance band.
pub const Q_MAX: f64 = 1.2;
pub const STIFFNESS: (f64, f64) = (0.55, 1.0);
pub const MAX_STEPS: usize = 60;
pub const STAGE_SCORES: [f64; N_STAGES] = [2.5, 5.0, 7.5, 10.0];
pub const STAGE_NAMES: [&str; N_STAGES] = ["fold left flap", "fold rear flap", "insert tab", "lock tab"];
/// proprio: q; scene: stage flags then per-joint stiffness.
pub const OBS_DIM: usize = N_JOINTS + N_STAGES + N_JOINTS;

#[derive(Debug, Clone, PartialEq)]
pub struct LatchState {
    pub q: [f64; N_JOINTS],
    /// Fraction of each commanded delta that reaches the joint.
    pub stiffness: [f64; N_JOINTS],
    pub stages: [bool; N_STAGES],
    pub step: usize,
}

pub fn layout() -> Arc<ViewLayout> {
    static LAYOUT: std::sync::OnceLock<Arc<ViewLayout>> = std::sync::OnceLock::new();
    LAYOUT
        .get_or_init(|| Arc::new(ViewLayout::contiguous(&[("proprio", N_JOINTS), ("scene", N_STAGES + N_JOINTS)])))
        .clone()
}

pub fn reset(seed: u64) -> LatchState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stiffness = [0.0; N_JOINTS];
    for s in &mut stiffness {
        *s = rng.gen_range(STIFFNESS.0..=STIFFNESS.1);
    }
    LatchState {
        q: [0.0; N_JOINTS],
        stiffness,
        stages: [false; N_STAGES],
        step: 0,
    }
}

pub fn observe(s: &LatchState) -> Observation {
    let mut v = Vec::with_capacity(OBS_DIM);
    v.extend_from_slice(&s.q);
    v.extend(s.stages.iter().map(|&b| b as u8 as f64));
    v.extend_from_slice(&s.stiffness);
    Observation::new(v, layout()).expect("latch observation is finite")
}

pub fn is_done(s: &LatchState) -> bool {
    s.step >= MAX_STEPS || s.stages[N_STAGES - 1]
}

/// Stage that must be completed before joint `j` may leave its rest position.
fn prerequisite(j: usize) -> Option<usize> {
    match j {
        0 => None,
        1 => Some(0),
        _ => Some(1),
    }
}

fn closed(q: f64) -> bool {
    (q - 1.0).abs() <= TOLERANCE
}

pub fn step(s: &LatchState, action: &[f64], events: &mut Vec<Event>) -> LatchState {
    let mut n = s.clone();
    for j in 0..N_JOINTS {
        n.q[j] = (n.q[j] + n.stiffness[j] * action[j]).clamp(0.0, Q_MAX);
    }
    for j in 0..N_JOINTS {
        if let Some(pre) = prerequisite(j) {
            let earlier_closed = n.q[..j].iter().all(|&q| closed(q));
            if (!n.stages[pre] || !earlier_closed) && n.q[j] > TOLERANCE {
                n.q[j] = 0.0;
                events.push(Event::Deformation { joint: j });
            }
        }
    }
    let checks = [
        n.q[0] >= COMPLETE_AT,
        n.stages[0] && closed(n.q[0]) && n.q[1] >= COMPLETE_AT,
        n.stages[1] && closed(n.q[0]) && closed(n.q[1]) && n.q[2] >= INSERT_AT,
        n.stages[2] && closed(n.q[0]) && closed(n.q[1]) && n.q[2] >= COMPLETE_AT,
    ];
    for (k, ok) in checks.into_iter().enumerate() {
        // Milestones are latched and must be reached in order.
        if ok && !n.stages[k] && (k == 0 || n.stages[k - 1]) {
            n.stages[k] = true;
            events.push(Event::StageComplete { stage: k });
        }
    }
    n.step += 1;
    n
}

pub fn stages_complete(s: &LatchState) -> usize {
    s.stages.iter().take_while(|&&b| b).count()
}

/// Joint driven by the first incomplete stage.
fn active_joint(s: &LatchState) -> Option<usize> {
    match stages_complete(s) {
        0 => Some(0),
        1 => Some(1),
        2 | 3 => Some(2),
        _ => None,
    }
}

/// Sequential proportional drive, optionally corrupted.
pub fn expert_action(s: &LatchState, corruption: Option<&Corruption>) -> [f64; N_JOINTS] {
    let mut a = [0.0; N_JOINTS];
    let Some(active) = active_joint(s) else {
        return a;
    };
    let gain = match corruption {
        Some(Corruption::GainPerturbation { gain }) => *gain,
        _ => 1.0,
    };
    if let Some(Corruption::PrematureStop { after_stage }) = corruption {
        if stages_complete(s) > *after_stage {
            return a;
        }
    }
    let drive = |j: usize| ((1.0 - s.q[j]) / s.stiffness[j]).clamp(-MOVE_CAP, MOVE_CAP) * gain;
    for (j, slot) in a.iter_mut().enumerate().take(active + 1) {
        *slot = drive(j);
    }
    if let Some(Corruption::WrongOrder { joint, at_q }) = corruption {
        // Abandons the active joint once it passes `at_q` and moves on too early.
        let j = *joint;
        if j == active + 1 && j < N_JOINTS && s.q[active] >= *at_q {
            a[active] = 0.0;
            a[j] = drive(j);
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_starts_open() {
        let s = reset(4);
        assert_eq!(s.q, [0.0; 3]);
        assert_eq!(s.stages, [false; 4]);
        assert!(s.stiffness.iter().all(|k| (STIFFNESS.0..=STIFFNESS.1).contains(k)));
    }

    #[test]
    fn pushing_rear_flap_first_resets_it() {
        let s = reset(0);
        let mut ev = Vec::new();
        let n = step(&s, &[0.0, 0.1, 0.0], &mut ev);
        assert_eq!(n.q[1], 0.0);
        assert_eq!(ev, vec![Event::Deformation { joint: 1 }]);
    }

    #[test]
    fn stages_complete_in_order() {
        let mut s = reset(0);
        s.stiffness = [1.0; 3];
        let mut ev = Vec::new();
        for _ in 0..10 {
            s = step(&s, &[0.1, 0.0, 0.0], &mut ev);
        }
        assert_eq!(stages_complete(&s), 1);
        for _ in 0..10 {
            s = step(&s, &[0.0, 0.1, 0.0], &mut ev);
        }
        assert_eq!(stages_complete(&s), 2);
        for _ in 0..5 {
            s = step(&s, &[0.0, 0.0, 0.1], &mut ev);
        }
        assert_eq!(stages_complete(&s), 3);
        for _ in 0..5 {
            s = step(&s, &[0.0, 0.0, 0.1], &mut ev);
        }
        assert_eq!(stages_complete(&s), 4);
        assert!(is_done(&s));
    }

    #[test]
    fn finished_latch_holds_still() {
        let mut s = reset(0);
        s.q = [1.0; 3];
        s.stages = [true; 4];
        assert_eq!(expert_action(&s, None), [0.0; 3]);
    }
}
