use crate::domain::{Episode, Observation};
use crate::error::{Error, Result};

/// The `N_hist` most recent observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationHistory {
    frames: Vec<Observation>,
}

impl ObservationHistory {
    pub fn new(frames: Vec<Observation>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::RejectedInput("history window is empty".into()));
        };
        let dim = first.dim();
        if let Some(f) = frames.iter().find(|f| f.dim() != dim) {
            return Err(Error::shape("history frame", dim, f.dim()));
        }
        Ok(ObservationHistory { frames })
    }

    pub fn frames(&self) -> &[Observation] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The current (newest) frame.
    pub fn current(&self) -> &Observation {
        self.frames.last().expect("history is never empty")
    }

    /// Slides the window forward over `next`, dropping the oldest frames.
    pub fn advanced(&self, next: &[Observation]) -> ObservationHistory {
        let n = self.frames.len();
        let mut all: Vec<Observation> = self.frames.iter().chain(next).cloned().collect();
        let frames = all.split_off(all.len() - n);
        ObservationHistory { frames }
    }
}

/// Window of `n_hist` frames ending at `t` over an arbitrary frame sequence,
/// left-padded by repeating the first frame.
pub fn window_frames(frames: &[Observation], t: usize, n_hist: usize) -> Result<ObservationHistory> {
    if t >= frames.len() {
        return Err(Error::Index {
            index: t,
            len: frames.len(),
        });
    }
    if n_hist == 0 {
        return Err(Error::RejectedInput("history length must be >= 1".into()));
    }
    let window = (0..n_hist)
        .map(|k| {
            let idx = (t + k + 1).saturating_sub(n_hist);
            frames[idx].clone()
        })
        .collect();
    ObservationHistory::new(window)
}

/// History window at step `t` (`0 <= t < T`) of an episode, indexed by environment step.
pub fn window_history(episode: &Episode, t: usize, n_hist: usize) -> Result<ObservationHistory> {
    if t >= episode.horizon() {
        return Err(Error::Index {
            index: t,
            len: episode.horizon(),
        });
    }
    let frames: Vec<Observation> = episode.steps[t.saturating_sub(n_hist)..=t]
        .iter()
        .map(|s| s.obs.clone())
        .collect();
    let local_t = frames.len() - 1;
    window_frames(&frames, local_t, n_hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionChunk, Outcome, Source, Step, TaskId, ViewLayout};
    use std::sync::Arc;

    fn episode(t_len: usize) -> Episode {
        let layout = Arc::new(ViewLayout::contiguous(&[("proprio", 1)]));
        let obs = |i: usize| Observation::new(vec![i as f64], layout.clone()).unwrap();
        Episode {
            task: TaskId::LatchClose,
            steps: (0..t_len)
                .map(|i| Step {
                    obs: obs(i),
                    chunk: ActionChunk::new(1, 1, vec![0.0]).unwrap(),
                })
                .collect(),
            terminal: obs(t_len),
            source: Source::Expert,
            outcome: Outcome::Success,
            score: 10.0,
            seed: 0,
        }
    }

    fn ids(h: &ObservationHistory) -> Vec<usize> {
        h.frames().iter().map(|f| f.values()[0] as usize).collect()
    }

    #[test]
    fn reference_windows() {
        let e = episode(8);
        assert_eq!(ids(&window_history(&e, 5, 3).unwrap()), vec![3, 4, 5]);
        assert_eq!(ids(&window_history(&e, 0, 3).unwrap()), vec![0, 0, 0]);
        assert_eq!(ids(&window_history(&e, 1, 3).unwrap()), vec![0, 0, 1]);
        for t in 0..8 {
            assert_eq!(ids(&window_history(&e, t, 1).unwrap()), vec![t]);
        }
    }

    #[test]
    fn out_of_range_is_an_index_error() {
        let e = episode(4);
        assert!(matches!(
            window_history(&e, 4, 2),
            Err(Error::Index { index: 4, len: 4 })
        ));
    }

    #[test]
    fn length_is_always_n_hist() {
        let e = episode(6);
        for n in 1..=6 {
            for t in 0..6 {
                assert_eq!(window_history(&e, t, n).unwrap().len(), n);
            }
        }
    }

    #[test]
    fn advancing_keeps_the_newest_frames() {
        let e = episode(6);
        let h = window_history(&e, 2, 3).unwrap();
        let next: Vec<Observation> = (3..5).map(|i| e.steps[i].obs.clone()).collect();
        assert_eq!(ids(&h.advanced(&next)), vec![2, 3, 4]);
    }
}
