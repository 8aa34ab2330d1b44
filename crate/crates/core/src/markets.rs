//! Market sequences: deterministic synthetic generators and CSV ingestion.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize_round, DomainError, MarketRound, ProblemDims};

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market parameter: {0}")]
    InvalidParam(String),
    #[error("csv kind has no generator; load the file with load_csv")]
    CsvNotGenerated,
    #[error("row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketKind {
    /// Cash against assets whose relatives alternate between 1/2 and 2.
    CoverAlternating,
    /// One asset pinned at `epsilon` until the flip, then the pin moves.
    Blowup,
    /// `ln r_i ~ Normal(0, sigma^2)` independently.
    IidLognormal,
    /// Every relative equal to 1.
    Constant,
    Csv,
}

impl MarketKind {
    pub fn name(&self) -> &'static str {
        match self {
            MarketKind::CoverAlternating => "cover_alternating",
            MarketKind::Blowup => "blowup",
            MarketKind::IidLognormal => "iid_lognormal",
            MarketKind::Constant => "constant",
            MarketKind::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub kind: MarketKind,
    pub dims: ProblemDims,
    pub seed: u64,
    /// Blowup floor; defaults to 1/32.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Number of rounds before the blowup flip; defaults to T/2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_at: Option<usize>,
    /// Lognormal volatility; defaults to 0.3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl MarketSpec {
    pub fn new(kind: MarketKind, dims: ProblemDims, seed: u64) -> Self {
        Self { kind, dims, seed, epsilon: None, flip_at: None, sigma: None }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(1.0 / 32.0)
    }

    pub fn flip_at(&self) -> usize {
        self.flip_at.unwrap_or(self.dims.horizon() / 2)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(0.3)
    }
}

/// Generate `T` normalized rounds. Deterministic in the spec, including the seed.
pub fn generate(spec: &MarketSpec) -> Result<Vec<MarketRound>, MarketError> {
    let n = spec.dims.assets();
    let t = spec.dims.horizon();
    let raw: Vec<Vec<f64>> = match spec.kind {
        MarketKind::Constant => vec![vec![1.0; n]; t],
        MarketKind::CoverAlternating => (0..t)
            .map(|s| {
                (0..n)
                    .map(|i| match i {
                        0 => 1.0,
                        // neighbours move in opposite phase
                        _ if (s + i) % 2 == 1 => 0.5,
                        _ => 2.0,
                    })
                    .collect()
            })
            .collect(),
        MarketKind::Blowup => {
            let eps = spec.epsilon();
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(MarketError::InvalidParam(format!("epsilon must lie in (0, 1], got {eps}")));
            }
            let flip = spec.flip_at();
            if flip > t {
                return Err(MarketError::InvalidParam(format!("flip_at {flip} exceeds horizon {t}")));
            }
            (0..t)
                .map(|s| {
                    let pinned = if s < flip { n - 1 } else { 0 };
                    (0..n).map(|i| if i == pinned { eps } else { 1.0 }).collect()
                })
                .collect()
        }
        MarketKind::IidLognormal => {
            let sigma = spec.sigma();
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| MarketError::InvalidParam(format!("sigma {sigma}: {e}")))?;
            if !(sigma > 0.0) {
                return Err(MarketError::InvalidParam(format!("sigma must be positive, got {sigma}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            (0..t).map(|_| (0..n).map(|_| normal.sample(&mut rng).exp()).collect()).collect()
        }
        MarketKind::Csv => return Err(MarketError::CsvNotGenerated),
    };
    raw.iter().map(|row| normalize_round(row).map_err(MarketError::from)).collect()
}

/// Read one round per row, one asset per column. A first row that does not
/// parse as numbers is taken as a header.
pub fn load_csv(path: &Path, assets: usize) -> Result<Vec<MarketRound>, MarketError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, assets)
}

pub fn read_csv<R: Read>(reader: R, assets: usize) -> Result<Vec<MarketRound>, MarketError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(reader);
    let mut rounds = Vec::new();
    let mut row = 0;
    for record in rdr.records() {
        let record = record?;
        row += 1;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, String>> =
            record.iter().map(|f| f.parse::<f64>().map_err(|e| format!("{f:?}: {e}"))).collect();
        if row == 1 && rounds.is_empty() && parsed.iter().all(|p| p.is_err()) {
            continue;
        }
        if record.len() != assets {
            return Err(MarketError::Parse {
                row,
                column: record.len().min(assets) + 1,
                message: format!("expected {assets} fields, found {}", record.len()),
            });
        }
        let mut values = Vec::with_capacity(assets);
        for (i, p) in parsed.into_iter().enumerate() {
            let column = i + 1;
            let v = p.map_err(|message| MarketError::Parse { row, column, message })?;
            if !v.is_finite() || v <= 0.0 {
                return Err(MarketError::Parse { row, column, message: format!("{v} is not a positive finite value") });
            }
            values.push(v);
        }
        rounds.push(normalize_round(&values)?);
    }
    // the row count is the horizon, which must exceed N
    ProblemDims::new(assets, rounds.len())?;
    Ok(rounds)
}

pub fn write_csv<W: Write>(writer: W, rounds: &[MarketRound]) -> Result<(), MarketError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for r in rounds {
        w.write_record(r.as_slice().iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n: usize, t: usize) -> ProblemDims {
        ProblemDims::new(n, t).unwrap()
    }

    fn rows(rounds: &[MarketRound]) -> Vec<Vec<f64>> {
        rounds.iter().map(|r| r.as_slice().to_vec()).collect()
    }

    #[test]
    fn cover_alternating_small() {
        let m = generate(&MarketSpec::new(MarketKind::CoverAlternating, dims(2, 4), 0)).unwrap();
        assert_eq!(rows(&m), vec![vec![1.0, 0.5], vec![0.5, 1.0], vec![1.0, 0.5], vec![0.5, 1.0]]);
    }

    #[test]
    fn constant_small() {
        let m = generate(&MarketSpec::new(MarketKind::Constant, dims(3, 4), 0)).unwrap();
        assert_eq!(rows(&m[..2]), vec![vec![1.0; 3], vec![1.0; 3]]);
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn blowup_flips_at_half() {
        let m = generate(&MarketSpec::new(MarketKind::Blowup, dims(2, 64), 0)).unwrap();
        assert!(m[..32].iter().all(|r| r.as_slice() == [1.0, 1.0 / 32.0]));
        assert!(m[32..].iter().all(|r| r.as_slice() == [1.0 / 32.0, 1.0]));

        let bad = MarketSpec { epsilon: Some(0.0), ..MarketSpec::new(MarketKind::Blowup, dims(2, 64), 0) };
        assert!(matches!(generate(&bad), Err(MarketError::InvalidParam(_))));
        let bad = MarketSpec { flip_at: Some(65), ..MarketSpec::new(MarketKind::Blowup, dims(2, 64), 0) };
        assert!(matches!(generate(&bad), Err(MarketError::InvalidParam(_))));
    }

    #[test]
    fn lognormal_is_seeded_and_normalized() {
        let spec = MarketSpec::new(MarketKind::IidLognormal, dims(4, 50), 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let bits = |m: &[MarketRound]| m.iter().flat_map(|r| r.as_slice().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate(&MarketSpec { seed: 8, ..spec.clone() }).unwrap();
        assert_ne!(bits(&a), bits(&c));
        for r in &a {
            assert_eq!(r.as_slice().iter().copied().fold(0.0, f64::max), 1.0);
            assert!(r.as_slice().iter().all(|&v| v > 0.0));
        }
        let bad = MarketSpec { sigma: Some(-1.0), ..spec };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn csv_examples() {
        let m = read_csv("1.0,0.5\n0.5,1.0\n1,1\n".as_bytes(), 2).unwrap();
        assert_eq!(rows(&m), vec![vec![1.0, 0.5], vec![0.5, 1.0], vec![1.0, 1.0]]);

        let m = read_csv("a,b\n2,1\n1,1\n1,2\n".as_bytes(), 2).unwrap();
        assert_eq!(m[0].as_slice(), &[1.0, 0.5]);

        match read_csv("1.0,abc\n".as_bytes(), 2) {
            Err(MarketError::Parse { row: 1, column: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match read_csv("1,1\n1,0\n1,1\n".as_bytes(), 2) {
            Err(MarketError::Parse { row: 2, column: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_csv("1,1\n1,2\n".as_bytes(), 2),
            Err(MarketError::Domain(DomainError::HorizonTooShort { .. }))
        ));
    }

    #[test]
    fn load_csv_from_disk() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(b"open,close\n2,1\n1,4\n1,1\n").unwrap();
        let m = load_csv(file.path(), 2).unwrap();
        assert_eq!(rows(&m), vec![vec![1.0, 0.5], vec![0.25, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(load_csv(Path::new("/nonexistent/market.csv"), 2), Err(MarketError::Io(_))));
    }

    #[test]
    fn csv_round_trip() {
        let m = generate(&MarketSpec::new(MarketKind::IidLognormal, dims(3, 20), 1)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &m).unwrap();
        let back = read_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(m, back);
    }
}
