//! Loss-decay driven acquisition of validation batches from the labeled set.
//!
//! Each labeled example keeps a ring of its recent mean-token losses under
//! the student. An example whose loss sits well below its own recent average
//! (large "decay") is one the student is actively learning, so it gets more
//! sampling weight; a smoothness floor keeps every example reachable.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{mean_token_loss, TaggerParams, Target};
use crate::{Error, Result};

/// One example's view of the latest refresh, for diagnostics dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcqRow {
    pub example_id: usize,
    pub baseline: f64,
    pub current_loss: f64,
    pub decay: f64,
    pub weight: f64,
}

/// Sampling state over the labeled set. Fields are public so tests and
/// oracles can hand-construct exact loss histories.
#[derive(Debug, Clone)]
pub struct AcquisitionState {
    pub r_cap: usize,
    pub refresh_period: usize,
    pub history: Vec<VecDeque<f64>>,
    pub current_loss: Vec<f64>,
    pub weights: Vec<f64>,
    pub refreshed: bool,
    pub last_diagnostics: Vec<AcqRow>,
    pub warnings: Vec<String>,
}

impl AcquisitionState {
    pub fn new(n_examples: usize, r_cap: usize, refresh_period: usize) -> Result<Self> {
        if n_examples == 0 {
            return Err(Error::Config("acquisition needs a non-empty labeled set".into()));
        }
        if r_cap == 0 || refresh_period == 0 {
            return Err(Error::Config("R and refresh period must be at least 1".into()));
        }
        Ok(AcquisitionState {
            r_cap,
            refresh_period,
            history: vec![VecDeque::with_capacity(r_cap); n_examples],
            current_loss: vec![0.0; n_examples],
            weights: vec![0.0; n_examples],
            refreshed: false,
            last_diagnostics: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn n_examples(&self) -> usize {
        self.history.len()
    }

    /// Uniform weights without any loss bookkeeping (the "random
    /// acquisition" ablation).
    pub fn set_uniform(&mut self) {
        let n = self.history.len();
        self.weights = vec![1.0 / n as f64; n];
        self.refreshed = true;
        self.last_diagnostics.clear();
    }
}

/// Evaluates the student's mean token loss on every labeled example (no
/// dropout, no update) and pushes it into each ring buffer, evicting entries
/// older than R. Also records it as the example's current loss.
pub fn record_losses(
    state: &mut AcquisitionState,
    student: &TaggerParams,
    labeled: &Dataset,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Config("labeled set is empty".into()));
    }
    if labeled.len() != state.history.len() {
        return Err(Error::LengthMismatch {
            context: format!(
                "{} labeled examples tracked, dataset has {}",
                state.history.len(),
                labeled.len()
            ),
        });
    }
    use rayon::prelude::*;
    let losses: Vec<f64> = labeled
        .sentences
        .par_iter()
        .map(|s| {
            let ids = labeled.vocab.encode(&s.tokens);
            mean_token_loss(student, &ids, Target::Hard(&s.tags))
        })
        .collect::<Result<Vec<f64>>>()?;
    for (m, loss) in losses.into_iter().enumerate() {
        let buf = &mut state.history[m];
        buf.push_back(loss);
        while buf.len() > state.r_cap {
            buf.pop_front();
        }
        state.current_loss[m] = loss;
    }
    Ok(())
}

/// Recomputes sampling weights from loss decays: baseline = mean of the
/// example's ring, decay = max(baseline - current, 0), smoothness delta =
/// the largest decay (1 when every decay is zero, giving uniform weights),
/// weight = decay + delta, normalized to sum 1.
pub fn refresh_weights(state: &mut AcquisitionState) -> Result<()> {
    if state.history.iter().any(|b| b.is_empty()) {
        return Err(Error::State(
            "refresh before any losses were recorded".into(),
        ));
    }
    let n = state.history.len();
    let mut baselines = Vec::with_capacity(n);
    let mut decays = Vec::with_capacity(n);
    for m in 0..n {
        let buf = &state.history[m];
        let baseline = buf.iter().sum::<f64>() / buf.len() as f64;
        let decay = (baseline - state.current_loss[m]).max(0.0);
        baselines.push(baseline);
        decays.push(decay);
    }
    let mut delta = decays.iter().cloned().fold(0.0, f64::max);
    if delta <= 0.0 {
        delta = 1.0;
    }
    let raw: Vec<f64> = decays.iter().map(|d| d + delta).collect();
    let total: f64 = raw.iter().sum();
    state.weights = raw.iter().map(|w| w / total).collect();
    state.refreshed = true;
    state.last_diagnostics = (0..n)
        .map(|m| AcqRow {
            example_id: m,
            baseline: baselines[m],
            current_loss: state.current_loss[m],
            decay: decays[m],
            weight: state.weights[m],
        })
        .collect();
    Ok(())
}

/// Draws S validation mini-batches of example indices by weighted sampling:
/// without replacement inside a batch, independent across batches. Requires
/// a prior refresh. Oversized batch sizes clamp to the labeled set size with
/// a recorded warning.
pub fn sample_validation_batches<R: Rng>(
    state: &mut AcquisitionState,
    labeled: &Dataset,
    s: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !state.refreshed {
        return Err(Error::State("sampling before weights were refreshed".into()));
    }
    if labeled.len() != state.weights.len() {
        return Err(Error::LengthMismatch {
            context: format!(
                "{} weights for {} labeled examples",
                state.weights.len(),
                labeled.len()
            ),
        });
    }
    let mut size = batch_size;
    if size > labeled.len() {
        if state.warnings.is_empty() {
            state.warnings.push(format!(
                "validation batch size {batch_size} clamped to labeled set size {}",
                labeled.len()
            ));
        }
        size = labeled.len();
    }
    Ok((0..s)
        .map(|_| crate::rngutil::weighted_sample_indices(rng, &state.weights, size))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::model::{init_params, ModelShape};
    use crate::rngutil::stream_rng;
    use proptest::prelude::*;

    fn tiny_data(n_sentences: usize) -> Dataset {
        generate_synthetic(&SynthSpec {
            n_slot_types: 2,
            vocab_size: 20,
            n_sentences,
            length_range: (2, 5),
            span_rate: 0.4,
            slot_word_disjointness: 1.0,
            seed: 3,
        })
        .unwrap()
    }

    fn tiny_model(data: &Dataset, seed: u64) -> TaggerParams {
        let shape = ModelShape {
            vocab_size: data.vocab.size(),
            d_emb: 3,
            window: 1,
            d_hidden: 4,
            n_tags: data.scheme.n_tags(),
        };
        init_params(shape, &mut stream_rng(seed, "init", 0))
    }

    #[test]
    fn first_record_fills_one_entry_matching_independent_recompute() {
        let data = tiny_data(4);
        let model = tiny_model(&data, 1);
        let mut state = AcquisitionState::new(4, 3, 10).unwrap();
        record_losses(&mut state, &model, &data).unwrap();
        for (m, s) in data.sentences.iter().enumerate() {
            assert_eq!(state.history[m].len(), 1);
            let ids = data.vocab.encode(&s.tokens);
            let want = mean_token_loss(&model, &ids, Target::Hard(&s.tags)).unwrap();
            assert_eq!(state.history[m][0], want);
            assert_eq!(state.current_loss[m], want);
        }
    }

    #[test]
    fn ring_keeps_last_r_losses() {
        let data = tiny_data(3);
        let mut state = AcquisitionState::new(3, 3, 10).unwrap();
        let models: Vec<TaggerParams> = (0..5).map(|k| tiny_model(&data, k)).collect();
        for m in &models {
            record_losses(&mut state, m, &data).unwrap();
        }
        let ids = data.vocab.encode(&data.sentences[0].tokens);
        for m in 0..3 {
            assert_eq!(state.history[m].len(), 3);
        }
        // oldest surviving entry comes from the third recording
        let want =
            mean_token_loss(&models[2], &ids, Target::Hard(&data.sentences[0].tags)).unwrap();
        assert_eq!(state.history[0][0], want);
    }

    #[test]
    fn worked_example_two_decays() {
        let mut state = AcquisitionState::new(2, 5, 10).unwrap();
        // example 0: baseline 0.7, current 0.5 -> decay 0.2 (exact subtraction)
        // example 1: baseline 0.5, current 0.5 -> decay 0
        state.history[0].push_back(0.7);
        state.current_loss[0] = 0.5;
        state.history[1].push_back(0.5);
        state.current_loss[1] = 0.5;
        refresh_weights(&mut state).unwrap();
        // delta = 0.2, raw weights {0.4, 0.2}, normalized {2/3, 1/3}
        assert!((state.weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((state.weights[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(state.weights[0], 2.0 * state.weights[1]);
        assert!((state.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(state.last_diagnostics[0].decay, 0.7 - 0.5);
        assert_eq!(state.last_diagnostics[1].decay, 0.0);
    }

    #[test]
    fn all_zero_decays_give_uniform_weights() {
        let mut state = AcquisitionState::new(4, 5, 10).unwrap();
        for m in 0..4 {
            state.history[m].push_back(0.5);
            state.current_loss[m] = 0.5;
        }
        refresh_weights(&mut state).unwrap();
        for &w in &state.weights {
            assert_eq!(w, 0.25);
        }
    }

    #[test]
    fn weights_stay_strictly_positive() {
        let mut state = AcquisitionState::new(3, 5, 10).unwrap();
        for (m, (hist, cur)) in [(0.9, 0.1), (0.5, 0.5), (0.2, 0.9)].iter().enumerate() {
            state.history[m].push_back(*hist);
            state.current_loss[m] = *cur;
        }
        refresh_weights(&mut state).unwrap();
        assert!(state.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn refresh_without_history_is_an_error() {
        let mut state = AcquisitionState::new(2, 5, 10).unwrap();
        assert!(matches!(refresh_weights(&mut state), Err(Error::State(_))));
    }

    #[test]
    fn sampling_before_refresh_is_an_error() {
        let mut state = AcquisitionState::new(2, 5, 10).unwrap();
        let data = tiny_data(2);
        let mut rng = stream_rng(0, "student-val", 0);
        assert!(matches!(
            sample_validation_batches(&mut state, &data, 1, 1, &mut rng),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn s_zero_gives_no_batches_and_oversize_clamps() {
        let data = tiny_data(3);
        let mut state = AcquisitionState::new(3, 5, 10).unwrap();
        state.set_uniform();
        let mut rng = stream_rng(0, "student-val", 0);
        assert!(sample_validation_batches(&mut state, &data, 0, 2, &mut rng)
            .unwrap()
            .is_empty());
        let batches = sample_validation_batches(&mut state, &data, 2, 50, &mut rng).unwrap();
        assert!(batches.iter().all(|b| b.len() == 3));
        assert_eq!(state.warnings.len(), 1);
    }

    fn frequencies(batches: &[Vec<usize>], n: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n];
        for b in batches {
            for &i in b {
                counts[i] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    #[test]
    fn uniform_weights_draw_uniformly() {
        let data = tiny_data(3);
        let mut state = AcquisitionState::new(3, 5, 10).unwrap();
        state.set_uniform();
        let mut rng = stream_rng(1, "student-val", 0);
        let batches = sample_validation_batches(&mut state, &data, 10_000, 1, &mut rng).unwrap();
        let freq = frequencies(&batches, 3);
        let p = 1.0f64 / 3.0;
        let sigma = (p * (1.0 - p) / 10_000.0).sqrt();
        for f in freq {
            assert!((f - p).abs() < 3.0 * sigma, "frequency {f} vs {p}");
        }
    }

    #[test]
    fn dominant_decay_dominates_draws() {
        let mut state = AcquisitionState::new(3, 5, 10).unwrap();
        // decays {1, 0, 0} -> delta 1 -> weights {2, 1, 1}/4
        state.history[0].push_back(1.5);
        state.current_loss[0] = 0.5;
        for m in 1..3 {
            state.history[m].push_back(0.5);
            state.current_loss[m] = 0.5;
        }
        refresh_weights(&mut state).unwrap();
        let data = tiny_data(3);
        let mut rng = stream_rng(2, "student-val", 0);
        let batches = sample_validation_batches(&mut state, &data, 10_000, 1, &mut rng).unwrap();
        let freq = frequencies(&batches, 3);
        let sigma = (0.5f64 * 0.5 / 10_000.0).sqrt();
        assert!((freq[0] - 0.5).abs() < 3.0 * sigma, "frequency {}", freq[0]);
    }

    proptest! {
        #[test]
        fn prop_more_decay_never_means_less_weight(
            decays in proptest::collection::vec(0.0f64..1.0, 2..8),
            bump_idx in 0usize..8,
            bump in 0.01f64..1.0,
        ) {
            let n = decays.len();
            let i = bump_idx % n;
            let build = |ds: &[f64]| {
                let mut st = AcquisitionState::new(n, 5, 10).unwrap();
                for (m, &d) in ds.iter().enumerate() {
                    st.history[m].push_back(1.0 + d);
                    st.current_loss[m] = 1.0;
                }
                refresh_weights(&mut st).unwrap();
                st
            };
            let before = build(&decays);
            let mut bumped = decays.clone();
            bumped[i] += bump;
            let after = build(&bumped);
            prop_assert!(after.weights[i] >= before.weights[i] - 1e-12);
        }
    }
}
