use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Column header of point cloud CSV files.
pub const CSV_HEADER: &str = "x,y,vr,rcs,dt";
/// Features produced by the CSV loader: `[x, y, vr, rcs, dt]`.
pub const SENSOR_FEATURES: usize = 5;

/// BEV points with per-point feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 2]>,
    features: Vec<f64>,
    feature_dim: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 2]>, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        if features.len() != positions.len() * feature_dim {
            return Err(Error::Shape(format!(
                "{} positions need {} feature values, got {}",
                positions.len(),
                positions.len() * feature_dim,
                features.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Contract(format!("point {i} has a non-finite position")));
        }
        Ok(Self {
            positions,
            features,
            feature_dim,
        })
    }

    /// Sensor cloud with features `[x, y, vr, rcs, dt]`.
    pub fn from_sensor(points: &[[f64; 5]]) -> Result<Self> {
        let positions = points.iter().map(|p| [p[0], p[1]]).collect();
        let features = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(positions, features, SENSOR_FEATURES)
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Vec::new(),
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn features_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.len(), self.feature_dim], |i| T::of(self.features[i]))
    }

    pub fn with_features(&self, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        Self::new(self.positions.clone(), features, feature_dim)
    }

    pub fn translated(&self, d: [f64; 2]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            p[0] += d[0];
            p[1] += d[1];
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty point cloud file".into()))?;
        let cols: Vec<&str> = header.1.split(',').map(str::trim).collect();
        if cols.join(",") != CSV_HEADER {
            return Err(Error::Parse(format!(
                "expected header `{CSV_HEADER}`, got `{}`",
                header.1
            )));
        }
        let mut points = Vec::new();
        for (lineno, line) in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != SENSOR_FEATURES {
                return Err(Error::Parse(format!(
                    "line {}: expected {SENSOR_FEATURES} columns, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            points.push([vals[0], vals[1], vals[2], vals[3], vals[4]]);
        }
        Self::from_sensor(&points)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    /// Serializes a sensor cloud; requires [`SENSOR_FEATURES`] feature columns.
    pub fn to_csv(&self) -> Result<String> {
        if self.feature_dim != SENSOR_FEATURES {
            return Err(Error::Contract(format!(
                "CSV export needs {SENSOR_FEATURES} sensor features, cloud has {}",
                self.feature_dim
            )));
        }
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for i in 0..self.len() {
            let f = self.feature_row(i);
            let _ = writeln!(s, "{},{},{},{},{}", f[0], f[1], f[2], f[3], f[4]);
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let pc = PointCloud::from_sensor(&[[1.5, -2.0, 0.25, 10.0, 0.05], [0.0, 0.0, -3.0, 1.0, 0.0]])
            .unwrap();
        let back = PointCloud::parse_csv(&pc.to_csv().unwrap()).unwrap();
        assert_eq!(pc, back);
        assert_eq!(back.feature_dim(), 5);
        assert_eq!(back.positions()[0], [1.5, -2.0]);
    }

    #[test]
    fn csv_rejects_wrong_header_and_rows() {
        assert!(PointCloud::parse_csv("x,y\n1,2\n").is_err());
        assert!(PointCloud::parse_csv("x,y,vr,rcs,dt\n1,2,3\n").is_err());
        assert!(PointCloud::parse_csv("x,y,vr,rcs,dt\n1,2,3,4,abc\n").is_err());
    }

    #[test]
    fn non_finite_positions_rejected() {
        assert!(PointCloud::new(vec![[f64::NAN, 0.0]], vec![0.0], 1).is_err());
        assert!(PointCloud::new(vec![[0.0, 0.0]], vec![], 1).is_err());
    }
}
