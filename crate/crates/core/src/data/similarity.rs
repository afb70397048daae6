use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Asymmetry above this is reported when a matrix is symmetrized.
pub const ASYMMETRY_WARN: f64 = 1e-6;

/// Human pairwise dissimilarities between word pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSimilarityMatrix {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub experiment: Option<String>,
}

impl HumanSimilarityMatrix {
    /// Validates shape and diagonal, then replaces `M` by `(M + M^T) / 2`.
    pub fn new(labels: Vec<String>, mut matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Data(format!(
                "similarity matrix must be {n}x{n} to match its labels"
            )));
        }
        let mut worst = 0.0f64;
        for i in 0..n {
            if matrix[i][i].abs() > 1e-9 {
                return Err(Error::Data(format!("nonzero diagonal at {:?}", labels[i])));
            }
            for j in i + 1..n {
                let (a, b) = (matrix[i][j], matrix[j][i]);
                worst = worst.max((a - b).abs());
                let m = 0.5 * (a + b);
                matrix[i][j] = m;
                matrix[j][i] = m;
            }
        }
        if worst > ASYMMETRY_WARN {
            log::warn!("similarity matrix was asymmetric (max |M - M^T| = {worst:.3e}); symmetrized");
        }
        Ok(HumanSimilarityMatrix {
            labels,
            matrix,
            experiment: None,
        })
    }

    pub fn with_experiment(mut self, id: impl Into<String>) -> Self {
        self.experiment = Some(id.into());
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let labels: Vec<String> = rdr.headers()?.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut matrix = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row_label = rec.get(0).unwrap_or("").trim();
            if labels.get(i).map(String::as_str) != Some(row_label) {
                return Err(Error::Data(format!(
                    "row {i} label {row_label:?} does not match the header"
                )));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("non-numeric cell {cell:?} in row {row_label:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            matrix.push(row);
        }
        Self::new(labels, matrix)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        matrix_to_csv(&self.labels, &self.matrix)
    }
}

/// Writes a labelled square matrix in the ingestion format.
pub fn matrix_to_csv(labels: &[String], matrix: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(matrix) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn load_human_similarity_matrix(path: impl AsRef<Path>) -> Result<HumanSimilarityMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    HumanSimilarityMatrix::from_csv_reader(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<HumanSimilarityMatrix> {
        HumanSimilarityMatrix::from_csv_reader(s.as_bytes())
    }

    #[test]
    fn two_by_two() {
        let m = parse(",tall:short,black:white\ntall:short,0,1\nblack:white,1,0\n").unwrap();
        assert_eq!(m.matrix, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn asymmetric_is_averaged() {
        let m = parse(",p,q\np,0,1\nq,0.5,0\n").unwrap();
        assert_eq!(m.matrix[0][1], 0.75);
        assert_eq!(m.matrix[1][0], 0.75);
    }

    #[test]
    fn label_count_mismatch() {
        assert!(parse(",p,q,r\np,0,1,1\nq,1,0,1\n").is_err());
        assert!(parse(",p,q\np,0,x\nq,1,0\n").is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let m = parse(",p,q\np,0,0.25\nq,0.25,0\n").unwrap();
        let back = parse(&m.to_csv_string().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
