//! Reconstruction quality: NMSE in dB and cosine similarity ρ, both on
//! de-normalized complex matrices.

use serde::{Deserialize, Serialize};

use crate::channel::{ComplexMatrix, Dataset};
use crate::error::{Error, Result};

/// Reported in place of −∞ dB for a perfect reconstruction.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    /// `10·log10` of the mean ratio, floored at [`NMSE_FLOOR_DB`].
    pub db: f64,
    /// Mean of `‖H̃ − H‖² / ‖H‖²` over included samples.
    pub linear: f64,
    pub samples: usize,
    /// Samples skipped because the original had zero norm.
    pub excluded: usize,
}

impl Nmse {
    pub fn display_db(&self) -> String {
        if self.db <= NMSE_FLOOR_DB {
            format!("< {NMSE_FLOOR_DB} dB")
        } else {
            format!("{:.3} dB", self.db)
        }
    }
}

/// Quality of one model on one test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub nmse_db: f64,
    pub rho: f64,
    pub samples: usize,
    pub excluded: usize,
}

fn check_pair(original: &[ComplexMatrix], reconstructed: &[ComplexMatrix]) -> Result<()> {
    if original.len() != reconstructed.len() {
        return Err(Error::shape(
            "quality metric",
            format!("{} originals, {} reconstructions", original.len(), reconstructed.len()),
        ));
    }
    if original.is_empty() {
        return Err(Error::Empty("quality metric batch"));
    }
    for (a, b) in original.iter().zip(reconstructed) {
        if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
            return Err(Error::shape(
                "quality metric",
                format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
            ));
        }
    }
    Ok(())
}

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
    }
}

/// `E{‖H̃ − H‖² / ‖H‖²}` in dB over complex matrices.
pub fn nmse_complex(original: &[ComplexMatrix], reconstructed: &[ComplexMatrix]) -> Result<Nmse> {
    check_pair(original, reconstructed)?;
    let mut sum = 0.0;
    let mut samples = 0;
    for (h, r) in original.iter().zip(reconstructed) {
        let power: f64 = h.data().iter().map(|z| z.norm_sqr()).sum();
        if power == 0.0 {
            continue;
        }
        let err: f64 = h.data().iter().zip(r.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        sum += err / power;
        samples += 1;
    }
    if samples == 0 {
        return Err(Error::Empty("samples with nonzero norm"));
    }
    let linear = sum / samples as f64;
    Ok(Nmse {
        db: to_db(linear),
        linear,
        samples,
        excluded: original.len() - samples,
    })
}

/// NMSE between two datasets after undoing each one's normalization.
pub fn nmse(original: &Dataset, reconstructed: &Dataset) -> Result<Nmse> {
    nmse_complex(&original.to_complex(), &reconstructed.to_complex())
}

/// Mean over samples of the mean over rows `n` of
/// `|h_nᴴ ĥ_n| / (‖h_n‖ ‖ĥ_n‖)`, where `h_n` is row `n` of the original.
///
/// Rows whose original is zero are skipped. A zero reconstructed row next to
/// a nonzero original counts as similarity 0.
pub fn cosine_similarity_complex(original: &[ComplexMatrix], reconstructed: &[ComplexMatrix]) -> Result<f64> {
    check_pair(original, reconstructed)?;
    let mut total = 0.0;
    let mut samples = 0;
    for (h, r) in original.iter().zip(reconstructed) {
        let mut row_sum = 0.0;
        let mut rows = 0;
        for n in 0..h.rows() {
            let (a, b) = (h.row(n), r.row(n));
            let na: f64 = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if na == 0.0 {
                continue;
            }
            let nb: f64 = b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            rows += 1;
            if nb == 0.0 {
                continue;
            }
            let inner: num_complex::Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
            row_sum += (inner.norm() / (na * nb)).min(1.0);
        }
        if rows > 0 {
            total += row_sum / rows as f64;
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(Error::Empty("rows with nonzero norm"));
    }
    Ok(total / samples as f64)
}

pub fn cosine_similarity(original: &Dataset, reconstructed: &Dataset) -> Result<f64> {
    cosine_similarity_complex(&original.to_complex(), &reconstructed.to_complex())
}

/// NMSE and ρ together.
pub fn quality(original: &Dataset, reconstructed: &Dataset) -> Result<QualityReport> {
    let (a, b) = (original.to_complex(), reconstructed.to_complex());
    let n = nmse_complex(&a, &b)?;
    Ok(QualityReport {
        nmse_db: n.db,
        rho: cosine_similarity_complex(&a, &b)?,
        samples: n.samples,
        excluded: n.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{from_angular_delay, generate, to_angular_delay, Environment, Profile, ScenarioConfig};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
        let data = (0..rows * cols)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        ComplexMatrix::new(rows, cols, data).unwrap()
    }

    fn map(h: &ComplexMatrix, mut f: impl FnMut(usize, Complex64) -> Complex64) -> ComplexMatrix {
        let data = h.data().iter().enumerate().map(|(i, &z)| f(i, z)).collect();
        ComplexMatrix::new(h.rows(), h.cols(), data).unwrap()
    }

    #[test]
    fn analytic_nmse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h: Vec<ComplexMatrix> = (0..4).map(|_| random(4, 4, &mut rng)).collect();
        let perfect = nmse_complex(&h, &h).unwrap();
        assert_eq!(perfect.db, NMSE_FLOOR_DB);
        assert_eq!(perfect.display_db(), "< -300 dB");

        let zeros: Vec<ComplexMatrix> = h.iter().map(|_| ComplexMatrix::zeros(4, 4)).collect();
        assert!(nmse_complex(&h, &zeros).unwrap().db.abs() < 1e-12);

        // error with exactly 1% of each sample's energy
        let noisy: Vec<ComplexMatrix> = h
            .iter()
            .map(|m| {
                let p: f64 = m.data().iter().map(|z| z.norm_sqr()).sum();
                let e = (0.01 * p / 16.0).sqrt();
                map(m, |_, z| z + Complex64::new(e, 0.0))
            })
            .collect();
        assert!((nmse_complex(&h, &noisy).unwrap().db + 20.0).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_samples_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = vec![random(2, 2, &mut rng), ComplexMatrix::zeros(2, 2)];
        let r = vec![ComplexMatrix::zeros(2, 2), random(2, 2, &mut rng)];
        let n = nmse_complex(&h, &r).unwrap();
        assert_eq!((n.samples, n.excluded), (1, 1));
        assert!(nmse_complex(&h[1..], &r[1..]).is_err());
    }

    #[test]
    fn nmse_is_domain_invariant() {
        let cfg = ScenarioConfig::new(Environment::OutdoorLike, Profile::Desk, 3);
        let spatial = generate(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let perturbed: Vec<ComplexMatrix> = spatial
            .iter()
            .map(|h| map(h, |_, z| z * Complex64::new(1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2))))
            .collect();
        let a = nmse_complex(&spatial, &perturbed).unwrap();
        let ad: Vec<_> = spatial.iter().map(to_angular_delay).collect();
        let pd: Vec<_> = perturbed.iter().map(to_angular_delay).collect();
        let b = nmse_complex(&ad, &pd).unwrap();
        assert!((a.linear - b.linear).abs() <= 1e-9 * a.linear.max(1.0));
        assert!((a.db - b.db).abs() < 1e-9);
        // sanity: the inverse brings us back
        let back = from_angular_delay(&ad[0]);
        assert!(nmse_complex(&spatial[..1], &[back]).unwrap().linear < 1e-20);
    }

    #[test]
    fn rho_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<ComplexMatrix> = (0..3).map(|_| random(5, 4, &mut rng)).collect();
        assert!((cosine_similarity_complex(&h, &h).unwrap() - 1.0).abs() < 1e-12);

        let c = Complex64::new(-0.3, 2.0);
        let scaled: Vec<_> = h.iter().map(|m| map(m, |_, z| z * c)).collect();
        assert!((cosine_similarity_complex(&h, &scaled).unwrap() - 1.0).abs() < 1e-12);

        // a different complex factor on every row
        let factors: Vec<Complex64> = (0..5).map(|_| Complex64::new(rng.gen_range(0.1..2.0), rng.gen_range(-2.0..2.0))).collect();
        let per_row: Vec<_> = h.iter().map(|m| map(m, |i, z| z * factors[i / 4])).collect();
        assert!((cosine_similarity_complex(&h, &per_row).unwrap() - 1.0).abs() < 1e-12);

        // each row orthogonal to the original: [a, b] -> [-conj(b), conj(a)]
        let two: Vec<ComplexMatrix> = (0..3).map(|_| random(4, 2, &mut rng)).collect();
        let orth: Vec<_> = two
            .iter()
            .map(|m| map(m, |i, _| if i % 2 == 0 { -m.data()[i + 1].conj() } else { m.data()[i - 1].conj() }))
            .collect();
        assert!(cosine_similarity_complex(&two, &orth).unwrap().abs() < 1e-12);

        let zero = vec![ComplexMatrix::zeros(2, 2)];
        assert!(cosine_similarity_complex(&zero, &zero).is_err());
    }

    #[test]
    fn rho_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let h = vec![random(3, 3, &mut rng)];
            let r = vec![random(3, 3, &mut rng)];
            let rho = cosine_similarity_complex(&h, &r).unwrap();
            assert!((-1e-9..=1.0 + 1e-9).contains(&rho));
        }
    }
}
