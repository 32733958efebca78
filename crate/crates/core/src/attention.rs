//! Multimodal dual attention.
//!
//! Two masks split every query's support by key modality:
//!
//! * the visual mask admits every visual key, in both directions;
//! * the text mask admits text keys at or before the query (`j <= i`).
//!
//! Each mask gets its own softmax over the shared scores `q·kᵀ/√d_k`, and the
//! two weight maps are summed before the value product. The sum is not
//! renormalized, so a query that sees both modalities carries row mass 2.
//! Masking is additive (`-∞` on excluded positions, realized by skipping
//! them); a row with no support produces an all-zero weight row.
//!
//! The canonical layout puts visual tokens first, but nothing here relies on
//! contiguity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityMasks {
    pub visual: Mask,
    pub text: Mask,
}

impl ModalityMasks {
    /// Per-row mass of `W_I + W_T`: one unit per modality with nonempty support.
    pub fn row_mass(&self) -> Vec<f64> {
        (0..self.visual.rows())
            .map(|i| f64::from(u8::from(self.visual.row_has_support(i)) + u8::from(self.text.row_has_support(i))))
            .collect()
    }
}

/// The visual (`W_I`) and text (`W_T`) attention maps of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct DualWeights {
    pub visual: Tensor,
    pub text: Tensor,
}

impl DualWeights {
    pub fn combined(&self) -> Tensor {
        let data = self.visual.data().iter().zip(self.text.data()).map(|(a, b)| a + b).collect();
        Tensor::new(self.visual.shape().to_vec(), data).expect("maps share a shape")
    }
}

pub fn build_modality_masks(tags: &[Modality]) -> Result<ModalityMasks> {
    let n = tags.len();
    if n == 0 {
        return Err(Error::contract("modality masks need at least one position"));
    }
    Ok(ModalityMasks {
        visual: Mask::from_fn(n, n, |_, j| tags[j] == Modality::Visual),
        text: Mask::from_fn(n, n, |i, j| tags[j] == Modality::Text && j <= i),
    })
}

/// `q·kᵀ / √d_k` on the tape.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d_k = tape.value(q).cols();
    if d_k == 0 {
        return Err(Error::contract("attention needs d_k > 0"));
    }
    let raw = tape.matmul_nt(q, k)?;
    Ok(tape.scale(raw, 1.0 / (d_k as f64).sqrt()))
}

/// Tape nodes produced by one MDA head.
#[derive(Clone, Copy, Debug)]
pub struct DualHead {
    pub output: Var,
    pub visual: Var,
    pub text: Var,
}

/// One MDA head on the tape. With `renormalize`, each row of `W_I + W_T`
/// is divided by its mass before the value product.
pub fn mda_head_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    masks: &ModalityMasks,
    renormalize: bool,
) -> Result<DualHead> {
    let scores = attention_scores(tape, q, k)?;
    let visual = tape.masked_softmax(scores, &masks.visual)?;
    let text = tape.masked_softmax(scores, &masks.text)?;
    let mut weights = tape.add(visual, text)?;
    if renormalize {
        let factors = masks.row_mass().into_iter().map(|m| if m > 0.0 { 1.0 / m } else { 1.0 }).collect();
        weights = tape.scale_rows(weights, factors)?;
    }
    let output = tape.matmul(weights, v)?;
    Ok(DualHead { output, visual, text })
}

/// Single-softmax head under `mask`; returns `(output, weights)`.
pub fn masked_head_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Mask) -> Result<(Var, Var)> {
    let scores = attention_scores(tape, q, k)?;
    let weights = tape.masked_softmax(scores, mask)?;
    let output = tape.matmul(weights, v)?;
    Ok((output, weights))
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, n: Option<usize>) -> Result<()> {
    let (nq, dq) = q.require_matrix("attention")?;
    let (nk, dk) = k.require_matrix("attention")?;
    let (nv, _) = v.require_matrix("attention")?;
    if dq != dk || nq != nk || nk != nv || n.is_some_and(|n| n != nq) {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    Ok(())
}

/// Visual and text attention maps for one head.
pub fn dual_attention_weights(q: &Tensor, k: &Tensor, masks: &ModalityMasks) -> Result<DualWeights> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "dual_attention_weights",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let scores = attention_scores(&mut tape, qv, kv)?;
    let visual = tape.masked_softmax(scores, &masks.visual)?;
    let text = tape.masked_softmax(scores, &masks.text)?;
    Ok(DualWeights {
        visual: tape.value(visual).clone(),
        text: tape.value(text).clone(),
    })
}

/// `(W_I + W_T)·V`, no renormalization.
pub fn mda_combine(w: &DualWeights, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wi = tape.constant(w.visual.clone());
    let wt = tape.constant(w.text.clone());
    let vv = tape.constant(v.clone());
    let sum = tape.add(wi, wt)?;
    let out = tape.matmul(sum, vv)?;
    Ok(tape.value(out).clone())
}

/// Full MDA head: masks from `tags`, dual weights, fused value product.
pub fn mda_attention_head(q: &Tensor, k: &Tensor, v: &Tensor, tags: &[Modality]) -> Result<(Tensor, DualWeights)> {
    check_qkv(q, k, v, Some(tags.len()))?;
    let masks = build_modality_masks(tags)?;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let head = mda_head_on_tape(&mut tape, qv, kv, vv, &masks, false)?;
    let weights = DualWeights {
        visual: tape.value(head.visual).clone(),
        text: tape.value(head.text).clone(),
    };
    Ok((tape.value(head.output).clone(), weights))
}

/// Standard causal softmax attention, the baseline head.
pub fn causal_attention_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v, None)?;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (out, _) = masked_head_on_tape(&mut tape, qv, kv, vv, &Mask::causal(q.rows()))?;
    Ok(tape.value(out).clone())
}

/// Full bidirectional softmax attention over all positions.
pub fn bidirectional_attention_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v, None)?;
    let n = q.rows();
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (out, _) = masked_head_on_tape(&mut tape, qv, kv, vv, &Mask::from_fn(n, n, |_, _| true))?;
    Ok(tape.value(out).clone())
}

/// Scalar-loop reference for [`mda_attention_head`].
///
/// Shares no code with the tape path: supports are enumerated explicitly
/// and each softmax is a direct `exp / Σexp`.
pub fn brute_force_oracle(q: &Tensor, k: &Tensor, v: &Tensor, tags: &[Modality]) -> Result<Tensor> {
    check_qkv(q, k, v, Some(tags.len()))?;
    let (n, d_k) = (q.rows(), q.cols());
    let d_v = v.cols();
    let scale = (d_k as f64).sqrt();
    let score = |i: usize, j: usize| -> f64 { (0..d_k).map(|p| q.at(i, p) * k.at(j, p)).sum::<f64>() / scale };

    let mut out = vec![0.0; n * d_v];
    for i in 0..n {
        let visual: Vec<usize> = (0..n).filter(|&j| tags[j] == Modality::Visual).collect();
        let text: Vec<usize> = (0..=i).filter(|&j| tags[j] == Modality::Text).collect();
        let mut weights = vec![0.0; n];
        for support in [&visual, &text] {
            if support.is_empty() {
                continue;
            }
            let m = support.iter().map(|&j| score(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = support.iter().map(|&j| (score(i, j) - m).exp()).sum();
            for &j in support.iter() {
                weights[j] += (score(i, j) - m).exp() / z;
            }
        }
        for (j, w) in weights.iter().enumerate() {
            for c in 0..d_v {
                out[i * d_v + c] += w * v.at(j, c);
            }
        }
    }
    Tensor::matrix(n, d_v, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Modality::{Text as T, Visual as I};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn random_tags(rng: &mut ChaCha8Rng, n: usize) -> Vec<Modality> {
        (0..n).map(|_| if rng.gen_bool(0.5) { I } else { T }).collect()
    }

    #[test]
    fn masks_for_two_visual_two_text() {
        let m = build_modality_masks(&[I, I, T, T]).unwrap();
        for i in 0..4 {
            assert_eq!(m.visual.to_rows()[i], vec![1, 1, 0, 0]);
        }
        assert_eq!(
            m.text.to_rows(),
            vec![vec![0, 0, 0, 0], vec![0, 0, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 1, 1]]
        );
    }

    #[test]
    fn text_only_masks_reduce_to_causal() {
        let m = build_modality_masks(&[T; 5]).unwrap();
        assert_eq!(m.visual.count_ones(), 0);
        assert_eq!(m.text, Mask::causal(5));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(build_modality_masks(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_width_keys_are_rejected() {
        let q = Tensor::zeros(&[2, 0]);
        let masks = build_modality_masks(&[I, T]).unwrap();
        assert!(matches!(dual_attention_weights(&q, &q, &masks), Err(Error::Contract(_))));
    }

    #[test]
    fn equal_scores_split_within_each_modality() {
        // One-dimensional q/k chosen so row 3 of the scores is [2, 2, 0, 0].
        let q = Tensor::matrix(4, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let k = Tensor::matrix(4, 1, vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        let masks = build_modality_masks(&[I, I, T, T]).unwrap();
        let w = dual_attention_weights(&q, &k, &masks).unwrap();
        assert_eq!(w.visual.row(3), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(w.text.row(3), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn combine_hand_example() {
        let zero = Tensor::zeros(&[4, 4]);
        let mut wi = zero.clone();
        let mut wt = zero.clone();
        wi.data_mut()[12..16].copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        wt.data_mut()[12..16].copy_from_slice(&[0.0, 0.0, 0.5, 0.5]);
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let out = mda_combine(&DualWeights { visual: wi, text: wt.clone() }, &v).unwrap();
        assert_eq!(out.row(3), &[2.0, 1.0]);

        let text_only = mda_combine(&DualWeights { visual: zero, text: wt.clone() }, &v).unwrap();
        assert_eq!(text_only, crate::tensor::matmul(&wt, &v).unwrap());
    }

    #[test]
    fn causal_head_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (random(&mut rng, 1, 3), random(&mut rng, 1, 3), random(&mut rng, 1, 2));
        assert_eq!(causal_attention_head(&q, &k, &v).unwrap(), v);

        let q = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        let k = Tensor::matrix(3, 1, vec![0.7; 3]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0], vec![6.0], vec![9.0]]).unwrap();
        let out = causal_attention_head(&q, &k, &v).unwrap();
        assert!((out.at(2, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn causal_head_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d) = (7, 4);
        let (q, k, v) = (random(&mut rng, n, d), random(&mut rng, n, d), random(&mut rng, n, 3));
        let got = causal_attention_head(&q, &k, &v).unwrap();
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|p| q.at(i, p) * k.at(j, p)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..3 {
                let want: f64 = (0..=i).map(|j| s[j].exp() / z * v.at(j, c)).sum();
                assert!((want - got.at(i, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn oracle_handles_visual_then_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(&mut rng, 2, 3), random(&mut rng, 2, 3), random(&mut rng, 2, 2));
        let masks = build_modality_masks(&[I, T]).unwrap();
        let w = dual_attention_weights(&q, &k, &masks).unwrap();
        assert_eq!(w.visual.row(0), &[1.0, 0.0]);
        assert_eq!(w.text.row(0), &[0.0, 0.0]);
        let oracle = brute_force_oracle(&q, &k, &v, &[I, T]).unwrap();
        assert_eq!(oracle.row(0), v.row(0));
    }

    #[test]
    fn oracle_agrees_over_many_seeds() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=12);
            let tags = random_tags(&mut rng, n);
            let (q, k, v) = (random(&mut rng, n, 4), random(&mut rng, n, 4), random(&mut rng, n, 3));
            let (got, _) = mda_attention_head(&q, &k, &v, &tags).unwrap();
            let want = brute_force_oracle(&q, &k, &v, &tags).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn visual_only_is_full_bidirectional_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, k, v) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 2));
        let (got, _) = mda_attention_head(&q, &k, &v, &[I; 6]).unwrap();
        let want = bidirectional_attention_head(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-15);
    }

    #[test]
    fn text_only_is_bitwise_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (q, k, v) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 2));
        let (got, w) = mda_attention_head(&q, &k, &v, &[T; 6]).unwrap();
        assert_eq!(got, causal_attention_head(&q, &k, &v).unwrap());
        assert!(w.visual.data().iter().all(|&x| x == 0.0));
    }

    fn instance() -> impl Strategy<Value = (Vec<Modality>, Tensor, Tensor, Tensor)> {
        (1usize..=32, any::<u64>()).prop_map(|(n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tags = random_tags(&mut rng, n);
            let q = random(&mut rng, n, 4);
            let k = random(&mut rng, n, 4);
            let v = random(&mut rng, n, 3);
            (tags, q, k, v)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masks_are_disjoint(tags in prop::collection::vec(prop_oneof![Just(I), Just(T)], 1..32)) {
            let m = build_modality_masks(&tags).unwrap();
            prop_assert_eq!(m.visual.and(&m.text).count_ones(), 0);
        }

        #[test]
        fn dual_row_mass((tags, q, k, _v) in instance()) {
            let masks = build_modality_masks(&tags).unwrap();
            let w = dual_attention_weights(&q, &k, &masks).unwrap();
            let n = tags.len();
            for i in 0..n {
                let sv: f64 = w.visual.row(i).iter().sum();
                let st: f64 = w.text.row(i).iter().sum();
                let want_v = if masks.visual.row_has_support(i) { 1.0 } else { 0.0 };
                let want_t = if masks.text.row_has_support(i) { 1.0 } else { 0.0 };
                prop_assert!((sv - want_v).abs() <= 1e-12);
                prop_assert!((st - want_t).abs() <= 1e-12);
                prop_assert!((sv + st - masks.row_mass()[i]).abs() <= 1e-12);
                for j in 0..n {
                    if !masks.visual.get(i, j) { prop_assert_eq!(w.visual.at(i, j), 0.0); }
                    if !masks.text.get(i, j) { prop_assert_eq!(w.text.at(i, j), 0.0); }
                }
            }
        }

        #[test]
        fn matches_oracle((tags, q, k, v) in instance()) {
            let (got, _) = mda_attention_head(&q, &k, &v, &tags).unwrap();
            let want = brute_force_oracle(&q, &k, &v, &tags).unwrap();
            prop_assert!(got.max_abs_diff(&want) <= 1e-10);
        }

        #[test]
        fn text_only_matches_causal((_tags, q, k, v) in instance()) {
            let tags = vec![T; q.rows()];
            let (got, _) = mda_attention_head(&q, &k, &v, &tags).unwrap();
            prop_assert!(got.max_abs_diff(&causal_attention_head(&q, &k, &v).unwrap()) <= 1e-12);
        }

        #[test]
        fn later_text_never_changes_earlier_rows((tags, q, k, v) in instance(), pick in any::<prop::sample::Index>()) {
            let n = tags.len();
            let (base, _) = mda_attention_head(&q, &k, &v, &tags).unwrap();
            let j = pick.index(n);
            prop_assume!(tags[j] == T);
            let bump = |t: &Tensor| {
                let mut t = t.clone();
                let c = t.cols();
                t.data_mut()[j * c..(j + 1) * c].iter_mut().for_each(|x| *x += 0.75);
                t
            };
            let (moved, _) = mda_attention_head(&bump(&q), &bump(&k), &bump(&v), &tags).unwrap();
            for i in 0..j {
                prop_assert_eq!(base.row(i), moved.row(i));
            }
        }

        #[test]
        fn visual_permutation_leaves_text_rows((tags, q, k, v) in instance(), shift in 1usize..7) {
            let visual: Vec<usize> = (0..tags.len()).filter(|&j| tags[j] == I).collect();
            prop_assume!(visual.len() >= 2);
            // Rotate the visual rows among the visual slots.
            let mut perm: Vec<usize> = (0..tags.len()).collect();
            for (slot, &pos) in visual.iter().enumerate() {
                perm[pos] = visual[(slot + shift) % visual.len()];
            }
            let permute = |t: &Tensor| {
                let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let (base, _) = mda_attention_head(&q, &k, &v, &tags).unwrap();
            let (moved, _) = mda_attention_head(&permute(&q), &permute(&k), &permute(&v), &tags).unwrap();
            for i in (0..tags.len()).filter(|&i| tags[i] == T) {
                for c in 0..v.cols() {
                    prop_assert!((base.at(i, c) - moved.at(i, c)).abs() <= 1e-12);
                }
            }
        }
    }
}
