//! Self-contained verification oracles for the numerical core.
//!
//! Each check re-derives expected values by a method independent of the code
//! under test: central finite differences for gradients, an explicit
//! perturbation of the virtual SGD step for meta scores, quadratic
//! position-predicate span enumeration for decoding, and hand arithmetic for
//! the acquisition weights.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::acquisition::{refresh_weights, AcquisitionState};
use crate::data::Dataset;
use crate::model::{
    backward, init_params, per_token_grads, token_losses, DropoutMask, ModelShape, TaggerParams,
    Target,
};
use crate::reweight::{meta_token_scores, ScoreInput};
use crate::rngutil::stream_rng;
use crate::seqlab::{phrase_f1, LabelScheme};
use crate::Result;

/// Outcome of one oracle check. For exact checks `tol` is 0 and `max_err`
/// counts mismatches.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub n_cases: usize,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, n_cases: usize, max_err: f64, tol: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            n_cases,
            max_err,
            tol,
            passed: max_err <= tol,
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} cases, max err {:.3e} (tol {:.1e}): {}",
            self.name,
            self.n_cases,
            self.max_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

enum OwnedTarget {
    Hard(Vec<usize>),
    Soft(Vec<Vec<f64>>),
}

impl OwnedTarget {
    fn view(&self) -> Target<'_> {
        match self {
            OwnedTarget::Hard(v) => Target::Hard(v),
            OwnedTarget::Soft(v) => Target::Soft(v),
        }
    }
}

fn random_shape<R: Rng>(rng: &mut R, small: bool) -> ModelShape {
    let shape = if small {
        ModelShape {
            vocab_size: rng.random_range(3..=6),
            d_emb: rng.random_range(2..=3),
            window: rng.random_range(0..=1),
            d_hidden: rng.random_range(2..=4),
            n_tags: 3,
        }
    } else {
        ModelShape {
            vocab_size: rng.random_range(3..=8),
            d_emb: rng.random_range(2..=4),
            window: rng.random_range(0..=1),
            d_hidden: rng.random_range(2..=5),
            n_tags: 1 + 2 * rng.random_range(1..=2),
        }
    };
    debug_assert!(shape.n_params() <= if small { 300 } else { 500 });
    shape
}

fn random_tokens<R: Rng>(rng: &mut R, shape: &ModelShape, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..shape.vocab_size)).collect()
}

fn random_target<R: Rng>(rng: &mut R, n: usize, n_tags: usize, soft: bool) -> OwnedTarget {
    if soft {
        let rows = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n_tags).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            })
            .collect();
        OwnedTarget::Soft(rows)
    } else {
        OwnedTarget::Hard((0..n).map(|_| rng.random_range(0..n_tags)).collect())
    }
}

/// Central-difference check of `backward` against the weighted mean token
/// loss it claims to differentiate. Mixes hard and soft targets, unit and
/// random weights, and fixed dropout masks.
pub fn gradcheck_backward(n_instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = stream_rng(seed, "gradcheck-backward", 0);
    let h = 1e-4;
    let mut max_err = 0.0f64;
    for case in 0..n_instances {
        let shape = random_shape(&mut rng, false);
        let params = init_params(shape, &mut rng);
        let tokens = random_tokens(&mut rng, &shape, 5);
        let n = tokens.len();
        let target = random_target(&mut rng, n, shape.n_tags, case % 3 == 2);
        let weights: Vec<f64> = if case % 2 == 0 {
            vec![1.0; n]
        } else {
            (0..n).map(|_| rng.random_range(0.0..2.0)).collect()
        };
        let mask = if case % 4 == 3 {
            Some(DropoutMask::sample(&mut rng, n, shape.d_hidden, 0.3))
        } else {
            None
        };
        let analytic = backward(&params, &tokens, target.view(), &weights, mask.as_ref())?
            .flatten()
            .0;
        let flat0 = params.flatten();
        let objective = |flat: &[f64]| -> Result<f64> {
            let p = TaggerParams::from_flat(shape, flat)?;
            let losses = token_losses(&p, &tokens, target.view(), mask.as_ref())?;
            Ok(losses.iter().zip(&weights).map(|(l, w)| w * l).sum::<f64>() / n as f64)
        };
        for i in 0..flat0.len() {
            let mut fp = flat0.clone();
            fp[i] += h;
            let mut fm = flat0.clone();
            fm[i] -= h;
            let fd = (objective(&fp)? - objective(&fm)?) / (2.0 * h);
            // below 1e-5 a component is inside central-difference noise on an
            // O(1) loss; a wrong formula still lands orders of magnitude above
            let denom = analytic[i].abs().max(fd.abs()).max(1e-5);
            max_err = max_err.max((analytic[i] - fd).abs() / denom);
        }
    }
    Ok(CheckReport::new("backward gradient check", n_instances, max_err, 1e-4))
}

/// Central-difference check of `per_token_grads`: each token's gradient
/// against the finite difference of that token's own loss.
pub fn gradcheck_per_token(n_instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = stream_rng(seed, "gradcheck-per-token", 0);
    let h = 1e-4;
    let mut max_err = 0.0f64;
    for case in 0..n_instances {
        let shape = random_shape(&mut rng, false);
        let params = init_params(shape, &mut rng);
        let tokens = random_tokens(&mut rng, &shape, 5);
        let target = random_target(&mut rng, tokens.len(), shape.n_tags, case % 2 == 1);
        let analytic = per_token_grads(&params, &tokens, target.view())?;
        let flat0 = params.flatten();
        for i in 0..flat0.len() {
            let mut fp = flat0.clone();
            fp[i] += h;
            let mut fm = flat0.clone();
            fm[i] -= h;
            let lp = token_losses(
                &TaggerParams::from_flat(shape, &fp)?,
                &tokens,
                target.view(),
                None,
            )?;
            let lm = token_losses(
                &TaggerParams::from_flat(shape, &fm)?,
                &tokens,
                target.view(),
                None,
            )?;
            for (tok, g) in analytic.iter().enumerate() {
                let fd = (lp[tok] - lm[tok]) / (2.0 * h);
                let denom = g.0[i].abs().max(fd.abs()).max(1e-5);
                max_err = max_err.max((g.0[i] - fd).abs() / denom);
            }
        }
    }
    Ok(CheckReport::new("per-token gradient check", n_instances, max_err, 1e-4))
}

/// Finite-difference oracle for the meta-gradient token scores.
///
/// For token (m, n) the exact influence is `lr / (M * N_m)` times the
/// reported score. The oracle perturbs that token's weight by ±h, takes the
/// corresponding virtual SGD step explicitly, and differences the summed
/// validation loss: u_fd = -(L(+h) - L(-h)) / 2h.
pub fn meta_fd_check(n_instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = stream_rng(seed, "meta-fd", 0);
    let h = 1e-3;
    let lr = 0.2;
    let mut max_err = 0.0f64;
    for case in 0..n_instances {
        let shape = random_shape(&mut rng, true);
        let params = init_params(shape, &mut rng);
        let m_count = rng.random_range(1..=3);
        let pseudo: Vec<(Vec<usize>, OwnedTarget)> = (0..m_count)
            .map(|m| {
                let toks = random_tokens(&mut rng, &shape, 4);
                let tgt = random_target(&mut rng, toks.len(), shape.n_tags, (case + m) % 3 == 1);
                (toks, tgt)
            })
            .collect();
        let s_count = rng.random_range(1..=3);
        let val: Vec<Vec<(Vec<usize>, OwnedTarget)>> = (0..s_count)
            .map(|_| {
                (0..rng.random_range(1..=2))
                    .map(|_| {
                        let toks = random_tokens(&mut rng, &shape, 4);
                        let tgt = random_target(&mut rng, toks.len(), shape.n_tags, false);
                        (toks, tgt)
                    })
                    .collect()
            })
            .collect();

        let pseudo_views: Vec<ScoreInput> = pseudo
            .iter()
            .map(|(t, g)| (t.as_slice(), g.view()))
            .collect();
        let val_views: Vec<Vec<ScoreInput>> = val
            .iter()
            .map(|b| b.iter().map(|(t, g)| (t.as_slice(), g.view())).collect())
            .collect();
        let scores = meta_token_scores(&params, &pseudo_views, &val_views, lr)?;

        let val_loss = |p: &TaggerParams| -> Result<f64> {
            let mut total = 0.0;
            for batch in &val {
                let mut batch_total = 0.0;
                for (toks, tgt) in batch {
                    batch_total += crate::model::mean_token_loss(p, toks, tgt.view())?;
                }
                total += batch_total / batch.len() as f64;
            }
            Ok(total)
        };

        let flat0 = params.flatten();
        for (m, (toks, tgt)) in pseudo.iter().enumerate() {
            let grads = per_token_grads(&params, toks, tgt.view())?;
            let c = lr / (m_count as f64 * toks.len() as f64);
            for (n, g) in grads.iter().enumerate() {
                let mut fp = flat0.clone();
                let mut fm = flat0.clone();
                for (i, &gi) in g.0.iter().enumerate() {
                    fp[i] -= c * h * gi;
                    fm[i] += c * h * gi;
                }
                let lp = val_loss(&TaggerParams::from_flat(shape, &fp)?)?;
                let lm = val_loss(&TaggerParams::from_flat(shape, &fm)?)?;
                let u_fd = -(lp - lm) / (2.0 * h);
                let u_exact = c * scores[m][n];
                let denom = u_fd.abs().max(u_exact.abs()).max(1e-7);
                max_err = max_err.max((u_fd - u_exact).abs() / denom);
            }
        }
    }
    Ok(CheckReport::new("meta score fd check", n_instances, max_err, 1e-3))
}

/// Quadratic span reconstruction from raw tag-id arithmetic, independent of
/// the stateful scanner: `(slot, start, end)` where a span starts at any
/// `B-x`, or `I-x` not preceded by a same-type tag, and extends over the
/// following run of `I-x`.
fn enumerate_spans(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let slot = |t: usize| -> Option<usize> { (t != 0).then(|| (t - 1) / 2) };
    let mut out = Vec::new();
    for i in 0..tags.len() {
        let Some(x) = slot(tags[i]) else { continue };
        let is_begin = tags[i] % 2 == 1;
        let starts = is_begin || i == 0 || slot(tags[i - 1]) != Some(x);
        if !starts {
            continue;
        }
        let inside = 2 + 2 * x;
        let mut j = i;
        while j + 1 < tags.len() && tags[j + 1] == inside {
            j += 1;
        }
        out.push((x, i, j));
    }
    out
}

/// Exact-equality check of `phrase_f1` against counting over the enumerated
/// spans, with the ratio arithmetic mirrored expression for expression.
pub fn f1_oracle_check(n_pairs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = stream_rng(seed, "f1-oracle", 0);
    let ratio = |num: usize, den: usize| -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut mismatches = 0usize;
    for pair in 0..n_pairs {
        let n_slots = rng.random_range(1..=3);
        let scheme =
            LabelScheme::new((0..n_slots).map(|i| format!("S{i}")).collect::<Vec<_>>())?;
        let n_tags = scheme.n_tags();
        let n_sent = rng.random_range(1..=4);
        let mut pred = Vec::with_capacity(n_sent);
        let mut gold = Vec::with_capacity(n_sent);
        for _ in 0..n_sent {
            let len = rng.random_range(0..=12);
            let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_tags)).collect();
            // odd pairs mutate the prediction so exact matches occur
            let g: Vec<usize> = if pair % 2 == 1 {
                p.iter()
                    .map(|&t| {
                        if rng.random::<f64>() < 0.3 {
                            rng.random_range(0..n_tags)
                        } else {
                            t
                        }
                    })
                    .collect()
            } else {
                (0..len).map(|_| rng.random_range(0..n_tags)).collect()
            };
            pred.push(p);
            gold.push(g);
        }
        let got = phrase_f1(&pred, &gold, &scheme)?;

        let mut n_pred = 0usize;
        let mut n_gold = 0usize;
        let mut n_correct = 0usize;
        for (p, g) in pred.iter().zip(&gold) {
            let ps = enumerate_spans(p);
            let gs: HashSet<(usize, usize, usize)> = enumerate_spans(g).into_iter().collect();
            n_pred += ps.len();
            n_gold += gs.len();
            n_correct += ps.iter().filter(|s| gs.contains(s)).count();
        }
        let precision = ratio(n_correct, n_pred);
        let recall = ratio(n_correct, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let exact = got.n_pred == n_pred
            && got.n_gold == n_gold
            && got.n_correct == n_correct
            && got.precision == precision
            && got.recall == recall
            && got.f1 == f1;
        if !exact {
            mismatches += 1;
        }
    }
    Ok(CheckReport::new("phrase f1 oracle", n_pairs, mismatches as f64, 0.0))
}

/// Hand-computed weight refresh cases. The two-example case has decays
/// {0.2, 0}, so weights (d + max d) / sum are {2/3, 1/3}; the degenerate
/// case falls back to exact halves; the dominant case {1, 0, 0} gives
/// exactly {1/2, 1/4, 1/4}.
pub fn acquisition_arithmetic_check() -> Result<CheckReport> {
    let mut max_err = 0.0f64;

    let mut st = AcquisitionState::new(2, 3, 10)?;
    st.history[0].push_back(0.7);
    st.history[1].push_back(0.5);
    st.current_loss = vec![0.5, 0.5];
    refresh_weights(&mut st)?;
    max_err = max_err.max((st.weights[0] - 2.0 / 3.0).abs());
    max_err = max_err.max((st.weights[1] - 1.0 / 3.0).abs());
    max_err = max_err.max((st.weights[0] + st.weights[1] - 1.0).abs());
    if st.weights[0] != 2.0 * st.weights[1] {
        max_err = max_err.max(1.0);
    }

    let mut st = AcquisitionState::new(2, 3, 10)?;
    st.history[0].push_back(0.4);
    st.history[1].push_back(0.4);
    st.current_loss = vec![0.4, 0.4];
    refresh_weights(&mut st)?;
    if st.weights != vec![0.5, 0.5] {
        max_err = max_err.max(1.0);
    }

    let mut st = AcquisitionState::new(3, 3, 10)?;
    st.history[0].push_back(1.5);
    st.history[1].push_back(0.5);
    st.history[2].push_back(0.5);
    st.current_loss = vec![0.5, 0.5, 0.5];
    refresh_weights(&mut st)?;
    if st.weights != vec![0.5, 0.25, 0.25] {
        max_err = max_err.max(1.0);
    }

    Ok(CheckReport::new("acquisition arithmetic", 3, max_err, 1e-12))
}

/// Majority-vote word-to-role table from the train split, evaluated on the
/// test split: each token votes for `O` or a slot type (not a B/I tag), and
/// every maximal same-role run is re-encoded as one span. A learnability
/// floor for synthetic data, not a model.
pub fn lookup_baseline_f1(train: &Dataset, test: &Dataset) -> Result<f64> {
    use std::collections::HashMap;
    // role 0 is O, role 1 + s is slot type s
    let n_roles = 1 + train.scheme.slot_types().len();
    let mut counts: HashMap<&str, Vec<usize>> = HashMap::new();
    for s in &train.sentences {
        for (tok, &tag) in s.tokens.iter().zip(&s.tags) {
            let role = train.scheme.slot_of(tag)?.map_or(0, |x| 1 + x);
            counts.entry(tok.as_str()).or_insert_with(|| vec![0; n_roles])[role] += 1;
        }
    }
    let vote = |tok: &str| -> usize {
        counts
            .get(tok)
            .map(|c| {
                let mut best = 0;
                for (r, &n) in c.iter().enumerate() {
                    if n > c[best] {
                        best = r;
                    }
                }
                best
            })
            .unwrap_or(0)
    };
    let pred: Vec<Vec<usize>> = test
        .sentences
        .iter()
        .map(|s| {
            let roles: Vec<usize> = s.tokens.iter().map(|t| vote(t)).collect();
            let mut tags = vec![0usize; roles.len()];
            for (i, &r) in roles.iter().enumerate() {
                if r == 0 {
                    continue;
                }
                tags[i] = if i > 0 && roles[i - 1] == r {
                    test.scheme.inside_id(r - 1)
                } else {
                    test.scheme.begin_id(r - 1)
                };
            }
            tags
        })
        .collect();
    let gold: Vec<Vec<usize>> = test.sentences.iter().map(|s| s.tags.clone()).collect();
    Ok(phrase_f1(&pred, &gold, &test.scheme)?.f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    #[test]
    fn backward_fd_small_run_passes() {
        let r = gradcheck_backward(12, 11).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn per_token_fd_small_run_passes() {
        let r = gradcheck_per_token(12, 12).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn meta_fd_small_run_passes() {
        let r = meta_fd_check(10, 13).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn f1_oracle_small_run_passes() {
        let r = f1_oracle_check(100, 14).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn acquisition_cases_pass() {
        let r = acquisition_arithmetic_check().unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn span_enumeration_handles_lenient_starts() {
        // I-S0 I-S0 B-S0 O I-S1
        assert_eq!(
            enumerate_spans(&[2, 2, 1, 0, 4]),
            vec![(0, 0, 1), (0, 2, 2), (1, 4, 4)]
        );
        assert_eq!(enumerate_spans(&[]), vec![]);
    }

    #[test]
    fn lookup_baseline_saturates_on_disjoint_vocab() {
        let spec = SynthSpec {
            n_slot_types: 2,
            vocab_size: 60,
            n_sentences: 150,
            length_range: (3, 8),
            span_rate: 0.3,
            slot_word_disjointness: 1.0,
            seed: 5,
        };
        let train = generate_synthetic(&spec).unwrap();
        let test = generate_synthetic(&SynthSpec { seed: 6, ..spec }).unwrap();
        let f1 = lookup_baseline_f1(&train, &test).unwrap();
        assert!(f1 > 0.95, "baseline f1 {f1}");
    }
}
