//! Paired bootstrap resampling over per-sentence scores.

use rand::Rng;

use crate::rng::rng_from;

use super::EvalError;

const TAG_BOOTSTRAP: u64 = 0x626f_6f74;

pub const MIN_ITEMS: usize = 10;
pub const MIN_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    A,
    B,
    Tie,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::A => "A",
            Verdict::B => "B",
            Verdict::Tie => "tie",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapResult {
    pub verdict: Verdict,
    /// Fraction of resamples in which A's mean is strictly higher.
    pub a_wins: f64,
    /// Fraction of resamples in which B's mean is strictly higher.
    pub b_wins: f64,
}

/// Resamples sentence indices with replacement, scoring both systems on the
/// same draw. A system wins when its mean is strictly higher in at least a
/// `1 - alpha` fraction of the resamples.
pub fn pairwise_bootstrap(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Misaligned {
            hyps: a.len(),
            refs: b.len(),
        });
    }
    if a.len() < MIN_ITEMS {
        return Err(EvalError::Bootstrap(format!(
            "need at least {MIN_ITEMS} paired scores, got {}",
            a.len()
        )));
    }
    if resamples < MIN_RESAMPLES {
        return Err(EvalError::Bootstrap(format!(
            "need at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::Bootstrap(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let n = a.len();
    let mut rng = rng_from(seed, &[TAG_BOOTSTRAP, n as u64]);
    let (mut wa, mut wb) = (0usize, 0usize);
    for _ in 0..resamples {
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        if sa > sb {
            wa += 1;
        } else if sb > sa {
            wb += 1;
        }
    }
    let a_wins = wa as f64 / resamples as f64;
    let b_wins = wb as f64 / resamples as f64;
    let verdict = if a_wins >= 1.0 - alpha {
        Verdict::A
    } else if b_wins >= 1.0 - alpha {
        Verdict::B
    } else {
        Verdict::Tie
    };
    Ok(BootstrapResult {
        verdict,
        a_wins,
        b_wins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_scores_tie() {
        let s: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = pairwise_bootstrap(&s, &s, 1000, 0.05, 3).unwrap();
        assert_eq!(r.verdict, Verdict::Tie);
        assert_eq!(r.a_wins, 0.0);
    }

    #[test]
    fn dominant_system_wins() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 + 5.0).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(pairwise_bootstrap(&a, &b, 1000, 0.05, 1).unwrap().verdict, Verdict::A);
        assert_eq!(pairwise_bootstrap(&b, &a, 1000, 0.05, 1).unwrap().verdict, Verdict::B);
    }

    #[test]
    fn rejects_small_inputs() {
        let s = vec![1.0; 9];
        assert!(pairwise_bootstrap(&s, &s, 1000, 0.05, 1).is_err());
        let s = vec![1.0; 10];
        assert!(pairwise_bootstrap(&s, &s, 999, 0.05, 1).is_err());
        assert!(pairwise_bootstrap(&s, &s[..9], 1000, 0.05, 1).is_err());
    }
}
