//! Rainfall hyetographs and the rainfall CSV table.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Samples per hyetograph: one every five minutes over one hour.
pub const RAINFALL_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct RainfallPattern {
    pub id: String,
    pub values: [f32; RAINFALL_LEN],
}

impl RainfallPattern {
    pub fn new(id: impl Into<String>, values: &[f32]) -> Result<Self> {
        let id = id.into();
        if values.len() != RAINFALL_LEN {
            return Err(Error::invalid(format!(
                "rainfall pattern {id} has {} values, expected {RAINFALL_LEN}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "rainfall pattern {id} has invalid intensity {v}"
            )));
        }
        Ok(RainfallPattern {
            id,
            values: values.try_into().unwrap(),
        })
    }

    pub fn total(&self) -> f32 {
        self.values.iter().sum()
    }
}

/// Reads a header-less CSV of `id, v1, …, v12` rows.
pub fn read_rainfall_csv(path: impl AsRef<Path>) -> Result<Vec<RainfallPattern>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if record.len() != RAINFALL_LEN + 1 {
            return Err(Error::format(format!(
                "{} line {}: expected id plus {RAINFALL_LEN} values, found {} fields",
                path.display(),
                line + 1,
                record.len()
            )));
        }
        let values = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f32>().map_err(|e| {
                    Error::format(format!("{} line {}: {e}", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pattern = RainfallPattern::new(&record[0], &values)
            .map_err(|e| Error::format(format!("{} line {}: {e}", path.display(), line + 1)))?;
        out.push(pattern);
    }
    Ok(out)
}

pub fn write_rainfall_csv(path: impl AsRef<Path>, patterns: &[RainfallPattern]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for p in patterns {
        let mut row = vec![p.id.clone()];
        row.extend(p.values.iter().map(|v| v.to_string()));
        writer
            .write_record(&row)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Random disjoint train/test split of pattern ids; `round(2n/3)` go to
/// training. Both lists keep the input order.
pub fn split_patterns(
    patterns: &[RainfallPattern],
    rng_seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if patterns.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 rainfall patterns to split, got {}",
            patterns.len()
        )));
    }
    let n = patterns.len();
    let n_train = ((2 * n) as f64 / 3.0).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = patterns.iter().zip(&is_train).partition(|(_, &t)| t);
    Ok((
        train.into_iter().map(|(p, _)| p.id.clone()).collect(),
        test.into_iter().map(|(p, _)| p.id.clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn patterns(n: usize) -> Vec<RainfallPattern> {
        (0..n)
            .map(|i| RainfallPattern::new(format!("p{i:02}"), &[i as f32; RAINFALL_LEN]).unwrap())
            .collect()
    }

    #[test]
    fn eighteen_patterns_split_twelve_six() {
        let (train, test) = split_patterns(&patterns(18), 3).unwrap();
        assert_eq!((train.len(), test.len()), (12, 6));
        let a: HashSet<_> = train.iter().collect();
        assert!(test.iter().all(|t| !a.contains(t)));
    }

    #[test]
    fn small_cases() {
        let (train, test) = split_patterns(&patterns(3), 0).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        assert!(matches!(
            split_patterns(&patterns(1), 0),
            Err(Error::InvalidInput(_))
        ));
    }

    proptest! {
        #[test]
        fn split_is_disjoint_exhaustive_and_seeded(n in 2usize..40, seed in any::<u64>()) {
            let ps = patterns(n);
            let (train, test) = split_patterns(&ps, seed).unwrap();
            let (train2, test2) = split_patterns(&ps, seed).unwrap();
            prop_assert_eq!(&train, &train2);
            prop_assert_eq!(&test, &test2);
            let all: HashSet<_> = train.iter().chain(&test).collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(train.len() + test.len(), n);
        }
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rain.csv");
        let ps = vec![
            RainfallPattern::new(
                "a",
                &[
                    0.5, 1.0, 2.25, 0.0, 0.0, 3.0, 4.0, 5.0, 0.125, 0.0, 1.0, 2.0,
                ],
            )
            .unwrap(),
            RainfallPattern::new("b", &[1.0; 12]).unwrap(),
        ];
        write_rainfall_csv(&path, &ps).unwrap();
        assert_eq!(read_rainfall_csv(&path).unwrap(), ps);
        std::fs::write(&path, "x,1,2,3\n").unwrap();
        assert!(matches!(read_rainfall_csv(&path), Err(Error::Format(_))));
        assert!(RainfallPattern::new("neg", &[-1.0; 12]).is_err());
        assert!(RainfallPattern::new("short", &[1.0; 11]).is_err());
    }
}
