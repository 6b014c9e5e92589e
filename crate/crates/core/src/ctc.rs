//! Connectionist temporal classification in log space.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, log_sum_exp, Tensor};

/// Blank symbol index in every CTC distribution.
pub const BLANK: usize = 0;

/// Frames needed to emit `target`: one per symbol plus a blank between each
/// pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `-log p(target | logp)` and its gradient with respect to `logp`, where
/// `logp` is `[T, A]` of per-step log-probabilities and the blank is
/// [`BLANK`]. The gradient is minus the posterior occupancy of each
/// (step, symbol) pair.
pub fn ctc_nll(logp: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (t_len, a) = (logp.rows(), logp.cols());
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= a) {
        return Err(Error::Vocab { token: bad, vocab: a });
    }
    let needed = min_frames(target);
    if t_len == 0 || needed > t_len {
        return Err(Error::InfeasibleAlignment { needed, available: t_len });
    }
    // Extended label sequence: blank, c1, blank, c2, ..., blank.
    let ext: Vec<usize> = std::iter::once(BLANK).chain(target.iter().flat_map(|&c| [c, BLANK])).collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| logp.data()[t * a + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut v = prev[s];
            if s >= 1 {
                v = lse2(v, prev[s - 1]);
            }
            if can_skip(s) {
                v = lse2(v, prev[s - 2]);
            }
            alpha[t * s_len + s] = if v == ninf { ninf } else { v + lp(t, s) };
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut v = next[s];
            if s + 1 < s_len {
                v = lse2(v, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                v = lse2(v, next[s + 2]);
            }
            beta[t * s_len + s] = if v == ninf { ninf } else { v + lp(t, s) };
        }
    }
    let tail = &alpha[last..];
    let log_p = if s_len > 1 { lse2(tail[s_len - 1], tail[s_len - 2]) } else { tail[0] };
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment { needed, available: t_len });
    }
    // alpha * beta double-counts the emission at (t, s).
    let mut grad = Tensor::zeros(&[t_len, a]);
    for t in 0..t_len {
        let mut acc: Vec<Vec<f64>> = vec![Vec::new(); a];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, s);
            if v > ninf {
                acc[ext[s]].push(v);
            }
        }
        for (k, vals) in acc.iter().enumerate() {
            if !vals.is_empty() {
                grad.data_mut()[t * a + k] = -(log_sum_exp(vals) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss over `[T, A]` logits on the graph.
pub fn ctc_loss(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    let logp = g.log_softmax_rows(logits);
    let (loss, grad) = ctc_nll(g.value(logp), target)?;
    Ok(g.precomputed_loss(logp, loss, grad))
}

/// Per-step argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(scores: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..scores.rows() {
        let k = argmax(scores.row_slice(t));
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if Some(k) != prev && k != BLANK {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sums the probability of every length-T path over A symbols that
    /// collapses to `target`.
    fn brute_force_log_p(logp: &Tensor, target: &[usize]) -> f64 {
        let (t_len, a) = (logp.rows(), logp.cols());
        let mut terms = Vec::new();
        let mut path = vec![0usize; t_len];
        loop {
            if collapse(&path) == target {
                terms.push(path.iter().enumerate().map(|(t, &k)| logp.data()[t * a + k]).sum::<f64>());
            }
            let mut i = 0;
            loop {
                if i == t_len {
                    return if terms.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(&terms) };
                }
                path[i] += 1;
                if path[i] < a {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_logp(rng: &mut ChaCha8Rng, t: usize, a: usize) -> Tensor {
        let mut data = Vec::with_capacity(t * a);
        for _ in 0..t {
            let row: Vec<f64> = (0..a).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = log_sum_exp(&row);
            data.extend(row.iter().map(|v| v - z));
        }
        Tensor::matrix(t, a, data)
    }

    #[test]
    fn single_frame_single_char() {
        let q: f64 = 0.3;
        let logp = Tensor::matrix(1, 3, vec![(0.5f64).ln(), q.ln(), (0.2f64).ln()]);
        let (l, _) = ctc_nll(&logp, &[1]).unwrap();
        assert!((l + q.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames_give_ln3() {
        let logp = Tensor::full(&[2, 3], -(3f64).ln());
        let (l, _) = ctc_nll(&logp, &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 200 {
            let t = rng.random_range(1..=6);
            let a = rng.random_range(2..=4);
            let len = rng.random_range(0..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..a)).collect();
            let logp = random_logp(&mut rng, t, a);
            let oracle = brute_force_log_p(&logp, &target);
            match ctc_nll(&logp, &target) {
                Ok((l, _)) => {
                    assert!((-l - oracle).abs() < 1e-9, "t={t} a={a} {target:?}: {} vs {oracle}", -l);
                    checked += 1;
                }
                Err(Error::InfeasibleAlignment { .. }) => assert_eq!(oracle, f64::NEG_INFINITY),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn infeasible_alignment_is_an_error() {
        let logp = Tensor::full(&[3, 3], -(3f64).ln());
        assert!(ctc_nll(&logp, &[1, 1]).is_ok());
        assert!(matches!(ctc_nll(&logp, &[1, 1, 2]), Err(Error::InfeasibleAlignment { needed: 4, available: 3 })));
        assert!(matches!(ctc_nll(&logp, &[0]), Err(Error::Vocab { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for target in [vec![1, 2, 2], vec![3], vec![]] {
            let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect());
            check_input_gradient(&x, 1e-3, |g, x| ctc_loss(g, x, &target).unwrap());
        }
    }

    #[test]
    fn greedy_collapse_rule() {
        let onehot = |ids: &[usize]| {
            let mut t = Tensor::zeros(&[ids.len(), 3]);
            for (i, &k) in ids.iter().enumerate() {
                t.row_slice_mut(i)[k] = 1.0;
            }
            t
        };
        assert_eq!(greedy_decode(&onehot(&[1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1])), vec![1, 1]);
    }
}
