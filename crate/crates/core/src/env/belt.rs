//! Belt sorting: coloured items ride a conveyor in +x; the gripper must
//! intercept each one and drop it into the bin of matching colour.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corruption, Event};
use crate::domain::{Observation, ViewLayout};

pub const N_ITEMS: usize = 2;
pub const BELT_SPEED: f64 = 0.02;
pub const GRAB_RADIUS: f64 = 0.03;
pub const MOVE_CAP: f64 = 0.05;
pub const BIN_RADIUS: f64 = 0.05;
pub const BAND: (f64, f64) = (0.1, 0.4);
pub const BINS: [[f64; 2]; 2] = [[0.25, 0.85], [0.75, 0.85]];
pub const GRIPPER_START: [f64; 2] = [0.5, 0.6];
pub const MAX_STEPS: usize = 60;
/// Per-item block: x, y, colour, active, delivered.
pub const ITEM_FEATURES: usize = 5;
/// Proprio block: gripper x, y, holding flag, colour of the held item (0 when empty).
pub const PROPRIO_DIM: usize = 4;
pub const OBS_DIM: usize = PROPRIO_DIM + N_ITEMS * ITEM_FEATURES;
const MIN_ITEM_GAP: f64 = 0.1;
/// Release once the gripper will be this close to the target bin.
const RELEASE_RADIUS: f64 = 0.02;
/// Inside this distance of the bin the carry slows down proportionally.
const SLOW_RADIUS: f64 = 0.1;
const SLOW_GAIN: f64 = 0.6;
/// The expert only closes the gripper this close to its target item.
const GRAB_INTENT_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    A,
    B,
}

impl Color {
    pub fn bin(self) -> [f64; 2] {
        BINS[self as usize]
    }

    pub fn other(self) -> Color {
        match self {
            Color::A => Color::B,
            Color::B => Color::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub pos: [f64; 2],
    pub color: Color,
    pub active: bool,
    pub delivered: bool,
    /// Colour of the bin the item was dropped into, if any.
    pub binned: Option<Color>,
    pub grasped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeltState {
    pub gripper: [f64; 2],
    pub held: Option<usize>,
    pub items: Vec<Item>,
    pub step: usize,
}

pub fn layout() -> Arc<ViewLayout> {
    static LAYOUT: std::sync::OnceLock<Arc<ViewLayout>> = std::sync::OnceLock::new();
    LAYOUT
        .get_or_init(|| Arc::new(ViewLayout::contiguous(&[("proprio", PROPRIO_DIM), ("scene", N_ITEMS * ITEM_FEATURES)])))
        .clone()
}

pub fn reset(seed: u64) -> BeltState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ys: Vec<f64> = Vec::with_capacity(N_ITEMS);
    while ys.len() < N_ITEMS {
        let y = rng.gen_range(BAND.0 + 0.02..BAND.1 - 0.02);
        if ys.iter().all(|o| (o - y).abs() >= MIN_ITEM_GAP) {
            ys.push(y);
        }
    }
    let items = ys
        .into_iter()
        .map(|y| Item {
            pos: [0.0, y],
            color: if rng.gen_bool(0.5) { Color::A } else { Color::B },
            active: true,
            delivered: false,
            binned: None,
            grasped: false,
        })
        .collect();
    BeltState {
        gripper: GRIPPER_START,
        held: None,
        items,
        step: 0,
    }
}

pub fn observe(s: &BeltState) -> Observation {
    let mut v = Vec::with_capacity(OBS_DIM);
    v.extend_from_slice(&s.gripper);
    v.push(if s.held.is_some() { 1.0 } else { 0.0 });
    v.push(match s.held.map(|h| s.items[h].color) {
        Some(Color::B) => 1.0,
        _ => 0.0,
    });
    for item in &s.items {
        v.extend_from_slice(&item.pos);
        v.push(match item.color {
            Color::A => 0.0,
            Color::B => 1.0,
        });
        v.push(item.active as u8 as f64);
        v.push(item.delivered as u8 as f64);
    }
    Observation::new(v, layout()).expect("belt observation is finite")
}

pub fn is_done(s: &BeltState) -> bool {
    s.step >= MAX_STEPS || s.items.iter().all(|i| !i.active)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advances one step. `action = [dx, dy, grab]`, already clamped to bounds.
pub fn step(s: &BeltState, action: &[f64], events: &mut Vec<Event>) -> BeltState {
    let mut n = s.clone();
    n.gripper[0] = (n.gripper[0] + action[0]).clamp(0.0, 1.0);
    n.gripper[1] = (n.gripper[1] + action[1]).clamp(0.0, 1.0);
    let grab = action[2];

    if let Some(h) = n.held {
        n.items[h].pos = n.gripper;
        if grab < 0.5 {
            n.held = None;
            let bin = [Color::A, Color::B]
                .into_iter()
                .find(|c| dist(n.gripper, c.bin()) < BIN_RADIUS);
            let item = &mut n.items[h];
            match bin {
                Some(c) => {
                    item.pos = c.bin();
                    item.active = false;
                    item.delivered = true;
                    item.binned = Some(c);
                    events.push(Event::Deposit {
                        item: h,
                        correct: c == item.color,
                    });
                }
                None if (BAND.0..=BAND.1).contains(&item.pos[1]) => {
                    events.push(Event::Drop { item: h });
                }
                None => {
                    item.active = false;
                    events.push(Event::Drop { item: h });
                    events.push(Event::Lost { item: h });
                }
            }
        }
    } else if grab > 0.5 {
        let candidate = n
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.active)
            .map(|(i, it)| (i, dist(n.gripper, it.pos)))
            .filter(|&(_, d)| d < GRAB_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = candidate {
            n.held = Some(i);
            n.items[i].grasped = true;
            n.items[i].pos = n.gripper;
            events.push(Event::Grasp { item: i });
        }
    }

    for (i, item) in n.items.iter_mut().enumerate() {
        if item.active && n.held != Some(i) {
            item.pos[0] += BELT_SPEED;
            if item.pos[0] > 1.0 {
                item.active = false;
                events.push(Event::Lost { item: i });
            }
        }
    }
    n.step += 1;
    n
}

/// Number of steps until the gripper can reach item `i`, if it can before it leaves the belt.
fn intercept(s: &BeltState, i: usize, cap: f64) -> Option<(usize, [f64; 2])> {
    let item = &s.items[i];
    (0..MAX_STEPS).find_map(|k| {
        let p = [item.pos[0] + BELT_SPEED * k as f64, item.pos[1]];
        if p[0] > 1.0 {
            return None;
        }
        let cheb = (p[0] - s.gripper[0]).abs().max((p[1] - s.gripper[1]).abs());
        (cheb <= cap * (k + 1) as f64).then_some((k, p))
    })
}

fn toward(from: [f64; 2], to: [f64; 2], cap: f64) -> [f64; 2] {
    [
        (to[0] - from[0]).clamp(-cap, cap),
        (to[1] - from[1]).clamp(-cap, cap),
    ]
}

fn approach(from: [f64; 2], to: [f64; 2], cap: f64) -> [f64; 2] {
    if dist(from, to) < SLOW_RADIUS {
        let d = [SLOW_GAIN * (to[0] - from[0]), SLOW_GAIN * (to[1] - from[1])];
        return [d[0].clamp(-cap, cap), d[1].clamp(-cap, cap)];
    }
    toward(from, to, cap)
}

/// Lead-pursuit expert action for the current state, optionally corrupted.
pub fn expert_action(s: &BeltState, corruption: Option<&Corruption>) -> [f64; 3] {
    let speed = match corruption {
        Some(Corruption::GainPerturbation { gain }) => MOVE_CAP * gain,
        _ => MOVE_CAP,
    };
    if let Some(h) = s.held {
        let color = match corruption {
            Some(Corruption::WrongBin { item }) if item.map_or(true, |i| i == h) => item_color(s, h).other(),
            _ => item_color(s, h),
        };
        let target = color.bin();
        let d = approach(s.gripper, target, speed);
        let next = [s.gripper[0] + d[0], s.gripper[1] + d[1]];
        if let Some(Corruption::PrematureRelease { item: r, at_distance }) = corruption {
            if *r == h && dist(next, target) <= *at_distance && dist(next, target) >= BIN_RADIUS {
                return [d[0], d[1], 0.0];
            }
        }
        let grab = if dist(next, target) < RELEASE_RADIUS { 0.0 } else { 1.0 };
        return [d[0], d[1], grab];
    }
    // Plan with the nominal cap; a perturbed gain then lags behind its own plan.
    let best = (0..s.items.len())
        .filter(|&i| s.items[i].active)
        .filter_map(|i| intercept(s, i, MOVE_CAP).map(|(k, p)| (k, i, p)))
        .min_by_key(|&(k, i, _)| (k, i));
    match best {
        Some((_, i, p)) => {
            let d = toward(s.gripper, p, speed);
            let next = [s.gripper[0] + d[0], s.gripper[1] + d[1]];
            let grab = if dist(next, s.items[i].pos) < GRAB_INTENT_RADIUS { 1.0 } else { 0.0 };
            [d[0], d[1], grab]
        }
        None => [0.0, 0.0, 0.0],
    }
}

fn item_color(s: &BeltState, i: usize) -> Color {
    s.items[i].color
}

pub fn grasp_count(s: &BeltState) -> usize {
    s.items.iter().filter(|i| i.grasped).count()
}

pub fn correct_count(s: &BeltState) -> usize {
    s.items.iter().filter(|i| i.binned == Some(i.color)).count()
}

pub fn all_correct(s: &BeltState) -> bool {
    correct_count(s) == s.items.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_item_state() -> BeltState {
        BeltState {
            gripper: [0.3, 0.25],
            held: None,
            items: vec![Item {
                pos: [0.3, 0.25],
                color: Color::A,
                active: true,
                delivered: false,
                binned: None,
                grasped: false,
            }],
            step: 0,
        }
    }

    #[test]
    fn zero_action_advances_items_only() {
        let s = reset(3);
        let mut ev = Vec::new();
        let n = step(&s, &[0.0, 0.0, 0.0], &mut ev);
        assert_eq!(n.gripper, s.gripper);
        for (a, b) in n.items.iter().zip(&s.items) {
            assert!((a.pos[0] - b.pos[0] - 0.02).abs() < 1e-15);
            assert_eq!(a.pos[1], b.pos[1]);
        }
        assert!(ev.is_empty());
    }

    #[test]
    fn grab_at_item_position_holds_it() {
        let s = single_item_state();
        let mut ev = Vec::new();
        let n = step(&s, &[0.0, 0.0, 1.0], &mut ev);
        assert_eq!(n.held, Some(0));
        assert_eq!(ev, vec![Event::Grasp { item: 0 }]);
        // A held item travels with the gripper, not the belt.
        let m = step(&n, &[0.05, 0.05, 1.0], &mut ev);
        assert_eq!(m.items[0].pos, m.gripper);
    }

    #[test]
    fn grab_signal_below_threshold_does_not_grasp() {
        let s = single_item_state();
        let n = step(&s, &[0.0, 0.0, 0.4], &mut Vec::new());
        assert_eq!(n.held, None);
    }

    #[test]
    fn release_in_bin_delivers_and_elsewhere_drops() {
        let mut s = single_item_state();
        s.held = Some(0);
        s.gripper = [0.25, 0.82];
        let mut ev = Vec::new();
        let n = step(&s, &[0.0, 0.0, 0.0], &mut ev);
        assert!(n.items[0].delivered && !n.items[0].active);
        assert_eq!(ev, vec![Event::Deposit { item: 0, correct: true }]);

        s.gripper = [0.5, 0.6];
        let mut ev = Vec::new();
        let n = step(&s, &[0.0, 0.0, 0.0], &mut ev);
        assert!(!n.items[0].active && !n.items[0].delivered);
        assert!(ev.contains(&Event::Lost { item: 0 }));
    }

    #[test]
    fn items_leaving_the_belt_become_inactive() {
        let mut s = single_item_state();
        s.items[0].pos = [0.99, 0.2];
        s.gripper = [0.5, 0.9];
        let mut ev = Vec::new();
        let n = step(&s, &[0.0, 0.0, 0.0], &mut ev);
        assert!(!n.items[0].active);
        assert_eq!(ev, vec![Event::Lost { item: 0 }]);
    }

    #[test]
    fn reset_is_seeded_and_inside_the_band() {
        for seed in 0..50 {
            let s = reset(seed);
            assert_eq!(s, reset(seed));
            for it in &s.items {
                assert_eq!(it.pos[0], 0.0);
                assert!((BAND.0..=BAND.1).contains(&it.pos[1]));
            }
        }
    }

    #[test]
    fn holding_near_correct_bin_releases() {
        let mut s = single_item_state();
        s.held = Some(0);
        s.gripper = [0.27, 0.80];
        s.items[0].pos = s.gripper;
        let mut ev = Vec::new();
        for _ in 0..super::super::HORIZON {
            let a = expert_action(&s, None);
            let next = [s.gripper[0] + a[0], s.gripper[1] + a[1]];
            if a[2] < 0.5 {
                assert!(dist(next, Color::A.bin()) < BIN_RADIUS);
                return;
            }
            s = step(&s, &a, &mut ev);
        }
        panic!("no release within one chunk");
    }
}
