use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CompError, Result};

/// Observed/missing indicators over the (sample, modality) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    observed: Array2<bool>,
    mr: f64,
}

impl MissingMask {
    pub fn from_observed(observed: Array2<bool>, mr: f64) -> Result<Self> {
        if let Some(i) = observed
            .rows()
            .into_iter()
            .position(|r| r.iter().all(|&o| !o))
        {
            return Err(CompError::Validation(format!("mask row {i} has no observed modality")));
        }
        Ok(Self { observed, mr })
    }

    pub fn complete(n: usize, m: usize) -> Self {
        Self {
            observed: Array2::from_elem((n, m), true),
            mr: 0.0,
        }
    }

    pub fn observed(&self) -> &Array2<bool> {
        &self.observed
    }

    pub fn mr(&self) -> f64 {
        self.mr
    }

    pub fn n_samples(&self) -> usize {
        self.observed.nrows()
    }

    pub fn num_modalities(&self) -> usize {
        self.observed.ncols()
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    pub fn is_observed(&self, sample: usize, modality: usize) -> bool {
        self.observed[[sample, modality]]
    }

    pub fn column(&self, j: usize) -> Vec<bool> {
        self.observed.column(j).to_vec()
    }

    /// One line per sample of `0`/`1` characters.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.observed.len() + self.n_samples());
        for row in self.observed.rows() {
            s.extend(row.iter().map(|&o| if o { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, n: usize, m: usize) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != n {
            return Err(CompError::Validation(format!(
                "mask has {} rows, expected {n}",
                lines.len()
            )));
        }
        let mut observed = Array2::from_elem((n, m), false);
        for (i, line) in lines.iter().enumerate() {
            let line = line.trim();
            if line.chars().count() != m {
                return Err(CompError::Validation(format!("mask row {i} is not {m} characters")));
            }
            for (j, ch) in line.chars().enumerate() {
                observed[[i, j]] = match ch {
                    '1' => true,
                    '0' => false,
                    other => {
                        return Err(CompError::Validation(format!(
                            "mask row {i} contains `{other}`"
                        )))
                    }
                };
            }
        }
        let mr = (n * m - observed.iter().filter(|&&o| o).count()) as f64 / (n * m) as f64;
        Self::from_observed(observed, mr)
    }
}

/// Largest missing rate that still leaves one modality per sample.
pub fn max_missing_rate(num_modalities: usize) -> f64 {
    (num_modalities as f64 - 1.0) / num_modalities as f64
}

/// Remove exactly `round(mr·m·n)` cells uniformly at random while keeping
/// every sample observed in at least one modality.
///
/// Cells are drawn without replacement over the whole grid. Any row left
/// fully missing gets one random cell back; the global count is restored by
/// removing a random cell from a fully observed row (or, when none exists,
/// from any row with at least two observed cells).
pub fn make_missing_mask(n_samples: usize, num_modalities: usize, mr: f64, seed: u64) -> Result<MissingMask> {
    if n_samples == 0 || num_modalities == 0 {
        return Err(CompError::Validation(
            "mask needs at least one sample and one modality".into(),
        ));
    }
    let max = max_missing_rate(num_modalities);
    if !(mr >= 0.0 && mr <= max + 1e-12) {
        return Err(CompError::InfeasibleMissingRate {
            mr,
            max,
            modalities: num_modalities,
        });
    }
    let (n, m) = (n_samples, num_modalities);
    let missing = ((mr * (m * n) as f64).round() as usize).min((m - 1) * n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = Array2::from_elem((n, m), true);
    for cell in sample(&mut rng, n * m, missing).into_iter() {
        observed[[cell / m, cell % m]] = false;
    }

    let count = |obs: &Array2<bool>, i: usize| obs.row(i).iter().filter(|&&o| o).count();
    for row in 0..n {
        if count(&observed, row) > 0 {
            continue;
        }
        let restore = rng.random_range(0..m);
        observed[[row, restore]] = true;

        let full: Vec<usize> = (0..n).filter(|&i| count(&observed, i) == m).collect();
        let donors = if full.is_empty() {
            (0..n).filter(|&i| i != row && count(&observed, i) >= 2).collect()
        } else {
            full
        };
        let donor = donors[rng.random_range(0..donors.len())];
        let cols: Vec<usize> = (0..m).filter(|&j| observed[[donor, j]]).collect();
        let col = cols[rng.random_range(0..cols.len())];
        observed[[donor, col]] = false;
    }
    Ok(MissingMask { observed, mr })
}

/// Like [`make_missing_mask`], but a nominal rate above the feasible
/// maximum (and below 1) is lowered to that maximum, leaving every sample
/// with exactly one observed modality. The returned mask records the
/// realised rate.
pub fn make_missing_mask_capped(
    n_samples: usize,
    num_modalities: usize,
    mr: f64,
    seed: u64,
) -> Result<MissingMask> {
    let max = max_missing_rate(num_modalities);
    if mr > max && mr < 1.0 {
        log::warn!("missing rate {mr} exceeds the feasible maximum {max:.4}; capping");
        make_missing_mask(n_samples, num_modalities, max, seed)
    } else {
        make_missing_mask(n_samples, num_modalities, mr, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_ok(mask: &MissingMask) -> bool {
        mask.observed().rows().into_iter().all(|r| r.iter().any(|&o| o))
    }

    #[test]
    fn small_rate_exact_count() {
        let mask = make_missing_mask(10, 3, 0.1, 7).unwrap();
        assert_eq!(mask.missing_count(), 3);
        assert!(rows_ok(&mask));
    }

    #[test]
    fn zero_rate_is_complete() {
        let mask = make_missing_mask(10, 3, 0.0, 0).unwrap();
        assert_eq!(mask, MissingMask::complete(10, 3));
    }

    #[test]
    fn high_rate_brute_force_scan() {
        let mask = make_missing_mask(50, 3, 0.6, 3).unwrap();
        assert_eq!(mask.missing_count(), 90);
        for i in 0..50 {
            assert!((0..3).any(|j| mask.is_observed(i, j)), "row {i} all missing");
        }
    }

    #[test]
    fn nominal_rate_above_bound_is_capped() {
        // 105 missing cells cannot fit 50 rows of 3 with one kept per row.
        assert!(make_missing_mask(50, 3, 0.7, 3).is_err());
        let mask = make_missing_mask_capped(50, 3, 0.7, 3).unwrap();
        assert_eq!(mask.missing_count(), 100);
        for i in 0..50 {
            assert_eq!((0..3).filter(|&j| mask.is_observed(i, j)).count(), 1);
        }
        assert!(make_missing_mask_capped(50, 3, 1.0, 3).is_err());
    }

    #[test]
    fn maximal_rate_leaves_one_per_row() {
        let mask = make_missing_mask(7, 3, 2.0 / 3.0, 11).unwrap();
        assert_eq!(mask.missing_count(), 14);
        assert!(rows_ok(&mask));
    }

    #[test]
    fn infeasible_rates_rejected() {
        assert!(matches!(
            make_missing_mask(10, 3, 0.67, 0),
            Err(CompError::InfeasibleMissingRate { .. })
        ));
        assert!(matches!(
            make_missing_mask(10, 3, -0.1, 0),
            Err(CompError::InfeasibleMissingRate { .. })
        ));
        assert!(make_missing_mask(0, 3, 0.1, 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mask = make_missing_mask(20, 3, 0.4, 5).unwrap();
        let back = MissingMask::from_text(&mask.to_text(), 20, 3).unwrap();
        assert_eq!(back.observed(), mask.observed());
        assert!(MissingMask::from_text("000\n", 1, 3).is_err());
        assert!(MissingMask::from_text("1x1\n", 1, 3).is_err());
    }
}
