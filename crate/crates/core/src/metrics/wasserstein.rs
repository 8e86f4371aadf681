use crate::error::{Error, Result};
use crate::model::{AttributeDistribution, BiasDeviation, IdealDistribution, Transport};

/// Wasserstein-1 between two probability vectors on the same support.
///
/// Ordinal transport places category `i` at position `i`, where the 1-D
/// closed form is the L1 distance between CDFs. Nominal transport uses a
/// 0/1 ground cost and reduces to total variation.
pub fn w1_probs(p: &[f64], q: &[f64], transport: Transport) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    match transport {
        Transport::Ordinal => {
            let mut cdf_gap = 0.0;
            let mut total = 0.0;
            for i in 0..p.len().saturating_sub(1) {
                cdf_gap += p[i] - q[i];
                total += cdf_gap.abs();
            }
            total
        }
        Transport::Nominal => 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
    }
}

pub fn wasserstein1(d1: &AttributeDistribution, d2: &AttributeDistribution, transport: Transport) -> Result<f64> {
    if d1.axis_id != d2.axis_id || d1.probs.len() != d2.probs.len() {
        return Err(Error::Metrics(format!(
            "mismatched axes: `{}` ({} categories) vs `{}` ({} categories)",
            d1.axis_id,
            d1.probs.len(),
            d2.axis_id,
            d2.probs.len()
        )));
    }
    Ok(w1_probs(&d1.probs, &d2.probs, transport))
}

/// Largest achievable distance from `ideal`, attained at some point mass.
pub fn worst_case_distance(ideal: &[f64], transport: Transport) -> f64 {
    let k = ideal.len();
    let mut delta = vec![0.0; k];
    (0..k)
        .map(|c| {
            delta[c] = 1.0;
            let w = w1_probs(&delta, ideal, transport);
            delta[c] = 0.0;
            w
        })
        .fold(0.0, f64::max)
}

/// Raw and normalized deviation of `d` from `ideal`.
///
/// `w_bar = w / w_max`, with `w_max` the distance of the worst point mass,
/// so `w_bar` lies in `[0, 1]` and reaches 1 exactly at that point mass.
/// An ideal whose `w_max` is zero yields `w_bar = 0`.
pub fn bias_deviation(d: &AttributeDistribution, ideal: &IdealDistribution, transport: Transport) -> Result<BiasDeviation> {
    let w = wasserstein1(d, &ideal.as_distribution(), transport)?;
    let w_max = worst_case_distance(&ideal.probs, transport);
    let w_bar = if w_max > 0.0 { (w / w_max).clamp(0.0, 1.0) } else { 0.0 };
    Ok(BiasDeviation { w, w_bar })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> AttributeDistribution {
        AttributeDistribution::new("a", p.to_vec(), 0).unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let d = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(wasserstein1(&d, &d, Transport::Ordinal).unwrap(), 0.0);
        assert_eq!(wasserstein1(&d, &d, Transport::Nominal).unwrap(), 0.0);
    }

    #[test]
    fn two_category_values() {
        let d0 = dist(&[1.0, 0.0]);
        assert_eq!(wasserstein1(&d0, &dist(&[0.5, 0.5]), Transport::Ordinal).unwrap(), 0.5);
        assert_eq!(wasserstein1(&d0, &dist(&[0.0, 1.0]), Transport::Ordinal).unwrap(), 1.0);
    }

    #[test]
    fn three_category_uniform_to_point_mass() {
        let u = dist(&[1.0 / 3.0; 3]);
        let w = wasserstein1(&u, &dist(&[1.0, 0.0, 0.0]), Transport::Ordinal).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_axes_error() {
        let a = dist(&[0.5, 0.5]);
        let mut b = dist(&[0.5, 0.5]);
        b.axis_id = "b".into();
        assert!(wasserstein1(&a, &b, Transport::Ordinal).is_err());
        assert!(wasserstein1(&a, &dist(&[0.2, 0.3, 0.5]), Transport::Ordinal).is_err());
    }

    #[test]
    fn deviation_normalization() {
        let ideal2 = IdealDistribution::uniform("a", 2);
        let dev = bias_deviation(&dist(&[1.0, 0.0]), &ideal2, Transport::Ordinal).unwrap();
        assert_eq!((dev.w, dev.w_bar), (0.5, 1.0));

        let ideal3 = IdealDistribution::uniform("a", 3);
        let dev = bias_deviation(&dist(&[1.0, 0.0, 0.0]), &ideal3, Transport::Ordinal).unwrap();
        assert!((dev.w - 1.0).abs() < 1e-15);
        assert_eq!(dev.w_bar, 1.0);

        let same = bias_deviation(&dist(&[1.0 / 3.0; 3]), &ideal3, Transport::Ordinal).unwrap();
        assert_eq!(same.w_bar, 0.0);
    }

    #[test]
    fn point_mass_ideal_is_degenerate() {
        let ideal = IdealDistribution::new("a", vec![1.0]).unwrap();
        let dev = bias_deviation(&dist(&[1.0]), &ideal, Transport::Ordinal).unwrap();
        assert_eq!(dev.w_bar, 0.0);
    }

    #[test]
    fn middle_category_ideal_halves_the_worst_case() {
        // ideal is a point mass on the middle of three ordered categories:
        // both ends are one step away, so w_max = 1.
        let ideal = IdealDistribution::new("a", vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(worst_case_distance(&ideal.probs, Transport::Ordinal), 1.0);
        let dev = bias_deviation(&dist(&[0.5, 0.0, 0.5]), &ideal, Transport::Ordinal).unwrap();
        assert_eq!(dev.w_bar, 1.0);
    }
}
