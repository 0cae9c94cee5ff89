//! Statistical checks on the adaptation primitives: the gradient reservoir
//! must sample stream positions uniformly, and the quantile threshold must
//! agree with a full sort on arbitrary inputs.

use liveupdate_core::adapt::{update_tau, GradientReservoir};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn reservoir_samples_every_stream_position_uniformly() {
    let stream_len = 2048usize;
    let size = 256usize;
    let trials = 400usize;
    let p = size as f64 / stream_len as f64;

    let mut survivals = vec![0u32; stream_len];
    for t in 0..trials {
        let mut r = GradientReservoir::new(1, size, t as u64);
        for pos in 0..stream_len {
            r.offer(&[pos as f64]);
        }
        // The retained rows carry their stream position in component 0.
        for row in r.rows() {
            survivals[row[0] as usize] += 1;
        }
    }

    // Each position survives Binomial(trials, p); chi-square against the
    // uniform retention probability with the binomial variance.
    let e = trials as f64 * p;
    let chi2: f64 = survivals
        .iter()
        .map(|&o| {
            let d = o as f64 - e;
            d * d / (e * (1.0 - p))
        })
        .sum();
    let crit = ChiSquared::new((stream_len - 1) as f64).unwrap().inverse_cdf(0.9999);
    assert!(chi2 < crit, "chi-square {chi2:.1} exceeds critical value {crit:.1}");

    // A biased implementation that favors early or late arrivals fails this
    // even if the aggregate counts look right.
    let front: u32 = survivals[..stream_len / 2].iter().sum();
    let back: u32 = survivals[stream_len / 2..].iter().sum();
    let ratio = front as f64 / back as f64;
    assert!((0.9..1.1).contains(&ratio), "front/back survival ratio {ratio}");
}

proptest! {
    #[test]
    fn quantile_threshold_matches_full_sort(
        counts in proptest::collection::vec(0u32..50, 0..200),
        q in 0.01f64..1.0,
    ) {
        let got = update_tau(&counts, q);
        if counts.is_empty() {
            prop_assert_eq!(got, None);
        } else {
            let mut sorted = counts.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            let k = ((q * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
            prop_assert_eq!(got, Some(sorted[k - 1]));
        }
    }

    #[test]
    fn threshold_keeps_at_least_the_quantile_fraction(
        counts in proptest::collection::vec(0u32..50, 1..200),
        q in 0.01f64..1.0,
    ) {
        let tau = update_tau(&counts, q).unwrap();
        let kept = counts.iter().filter(|&&c| c >= tau).count();
        let k = ((q * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
        // Ties can only enlarge the kept set, never shrink it below k.
        prop_assert!(kept >= k, "kept {} < k {}", kept, k);
    }
}
