//! Grid files (JSON header plus binary or CSV payload) and JSON result files.

use crate::diagnostics::{sample_variance_bias, BiasMethod, ResidualReport};
use crate::error::{Error, Result};
use crate::estimator::{FitResult, TaperSpec};
use crate::grid::{DetrendMode, FieldSample, GridSpec, Window};
use crate::likelihood::{MaskSpec, Matrix3, Vector3};
use crate::matern::MaternParams;
use crate::uncertainty::{ConfidenceInterval, ScoreCovMethod};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

pub const RESULT_SCHEMA_VERSION: u32 = 1;

pub const RESULT_SCHEMA: &str = include_str!("../schema/result-v1.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub m: usize,
    pub n: usize,
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub units: String,
    pub value_type: String,
    pub byte_order: String,
    pub layout: String,
}

const REQUIRED_HEADER_FIELDS: [&str; 7] = ["m", "n", "dx", "dy", "value_type", "byte_order", "layout"];

impl GridHeader {
    pub fn for_spec(spec: &GridSpec, units: &str) -> Self {
        Self {
            m: spec.m,
            n: spec.n,
            dx: spec.dx,
            dy: spec.dy,
            units: units.to_string(),
            value_type: "f64".into(),
            byte_order: "little".into(),
            layout: "row-major".into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let obj = v.as_object().ok_or_else(|| Error::Format("grid header must be a JSON object".into()))?;
        if let Some(missing) = REQUIRED_HEADER_FIELDS.iter().find(|k| !obj.contains_key(**k)) {
            return Err(Error::MissingField((*missing).to_string()));
        }
        let h: Self = serde_json::from_value(v)?;
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, got, want) in [
            ("value_type", &self.value_type, "f64"),
            ("byte_order", &self.byte_order, "little"),
            ("layout", &self.layout, "row-major"),
        ] {
            if got != want {
                return Err(Error::Format(format!("unsupported {name} `{got}`, expected `{want}`")));
            }
        }
        self.spec().map(|_| ())
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.m, self.n, self.dx, self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonFinitePolicy {
    #[default]
    Error,
    /// Fill with the mean of the finite pixels and report them as invalid.
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridData {
    pub field: FieldSample,
    /// Pixel validity, present only when non-finite values were masked.
    pub valid: Option<Array2<bool>>,
}

impl GridData {
    pub fn masked_pixels(&self) -> usize {
        self.valid.as_ref().map_or(0, |v| v.iter().filter(|b| !**b).count())
    }

    /// `w` multiplied by the validity mask.
    pub fn window(&self, w: &Window) -> Result<Window> {
        match &self.valid {
            None => Ok(w.clone()),
            Some(valid) => {
                let values = Array2::from_shape_fn(valid.dim(), |ij| if valid[ij] { w.values()[ij] } else { 0.0 });
                Window::custom(w.spec(), values)
            }
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn decode_binary(bytes: &[u8], header: &GridHeader) -> Result<Array2<f64>> {
    let expected = 8 * header.m * header.n;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {expected} ({}x{} f64)",
            bytes.len(),
            header.m,
            header.n
        )));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Array2::from_shape_vec((header.n, header.m), vals).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_binary(values: &Array2<f64>) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_csv(text: &str, header: &GridHeader) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut vals = Vec::with_capacity(header.m * header.n);
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != header.m {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", header.m),
                got: format!("{} columns in row {}", rec.len(), r + 1),
            });
        }
        for s in rec.iter() {
            vals.push(s.parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number `{s}`", r + 1)))?);
        }
        rows += 1;
    }
    if rows != header.n {
        return Err(Error::ShapeMismatch { expected: format!("{} rows", header.n), got: format!("{rows} rows") });
    }
    Array2::from_shape_vec((header.n, header.m), vals).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_csv(values: &Array2<f64>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    for row in values.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn apply_policy(values: Array2<f64>, policy: NonFinitePolicy) -> Result<(Array2<f64>, Option<Array2<bool>>)> {
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad == 0 {
        return Ok((values, None));
    }
    match policy {
        NonFinitePolicy::Error => Err(Error::Format(format!(
            "{bad} non-finite values in the payload (enable masking to treat them as missing)"
        ))),
        NonFinitePolicy::Mask => {
            let valid = values.mapv(f64::is_finite);
            let good = values.len() - bad;
            if good == 0 {
                return Err(Error::Format("payload has no finite values".into()));
            }
            let mean = values.iter().filter(|v| v.is_finite()).sum::<f64>() / good as f64;
            Ok((values.mapv(|v| if v.is_finite() { v } else { mean }), Some(valid)))
        }
    }
}

/// Reads a header and its payload; the payload is CSV when its extension is `.csv`.
pub fn read_grid(meta: &Path, data: &Path, policy: NonFinitePolicy) -> Result<GridData> {
    let header = GridHeader::parse(&std::fs::read_to_string(meta)?)?;
    let values = if is_csv(data) {
        decode_csv(&std::fs::read_to_string(data)?, &header)?
    } else {
        decode_binary(&std::fs::read(data)?, &header)?
    };
    let (values, valid) = apply_policy(values, policy)?;
    let field = FieldSample::new(header.spec()?, values)?.with_units(header.units.clone());
    Ok(GridData { field, valid })
}

pub fn write_grid(field: &FieldSample, meta: &Path, data: &Path) -> Result<()> {
    let header = GridHeader::for_spec(&field.spec, &field.units);
    std::fs::write(meta, serde_json::to_string_pretty(&header)? + "\n")?;
    if is_csv(data) {
        std::fs::write(data, encode_csv(&field.values)?)?;
    } else {
        std::fs::write(data, encode_binary(&field.values))?;
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputProvenance {
    pub data_path: Option<String>,
    pub data_sha256: String,
    pub meta_path: Option<String>,
    pub meta_sha256: Option<String>,
    pub grid: GridSpec,
    pub units: String,
    pub masked_pixels: usize,
}

impl InputProvenance {
    /// Provenance of an in-memory field, hashing its little-endian payload.
    pub fn in_memory(field: &FieldSample) -> Self {
        Self {
            data_path: None,
            data_sha256: sha256_hex(&encode_binary(&field.values)),
            meta_path: None,
            meta_sha256: None,
            grid: field.spec,
            units: field.units.clone(),
            masked_pixels: 0,
        }
    }

    pub fn from_files(meta: &Path, data: &Path, grid: &GridData) -> Result<Self> {
        Ok(Self {
            data_path: Some(data.display().to_string()),
            data_sha256: sha256_file(data)?,
            meta_path: Some(meta.display().to_string()),
            meta_sha256: Some(sha256_file(meta)?),
            grid: grid.field.spec,
            units: grid.field.units.clone(),
            masked_pixels: grid.masked_pixels(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub detrend: DetrendMode,
    pub winsorize: Option<(f64, f64)>,
    pub taper: TaperSpec,
    pub mask: MaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub schema_version: u32,
    pub software_version: String,
    pub input: InputProvenance,
    pub preprocessing: Preprocessing,
    pub theta_hat: MaternParams,
    pub initial: MaternParams,
    pub std_errors: Vector3,
    /// `100 * std_error / estimate` per parameter.
    pub relative_uncertainty_pct: Vector3,
    pub covariance: Matrix3,
    pub correlation: Matrix3,
    pub level: f64,
    pub intervals: [ConfidenceInterval; 3],
    pub loglik: f64,
    pub score_norm: f64,
    pub converged: bool,
    pub residual_test: ResidualReport,
    pub uq_method: ScoreCovMethod,
    pub seed: u64,
    pub iterations: usize,
    pub starts: usize,
    pub wall_time_s: f64,
    /// Sample variance of the preprocessed field.
    pub sample_variance: f64,
    /// `s^2 / sigma2_hat`.
    pub variance_ratio: f64,
    /// `pi rho_hat` over the grid diagonal.
    pub pi_rho_over_diagonal: f64,
}

impl ResultFile {
    pub fn from_fit(
        fit: &FitResult,
        input: InputProvenance,
        taper: TaperSpec,
        sample_variance: f64,
        seed: u64,
        wall_time_s: f64,
    ) -> Self {
        let t = fit.theta_hat.to_array();
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            preprocessing: Preprocessing { detrend: fit.detrend, winsorize: fit.winsorize, taper, mask: fit.mask },
            theta_hat: fit.theta_hat,
            initial: fit.initial,
            std_errors: fit.std_errors,
            relative_uncertainty_pct: std::array::from_fn(|i| 100.0 * fit.std_errors[i] / t[i]),
            covariance: fit.cov_theta,
            correlation: fit.correlation,
            level: fit.level,
            intervals: fit.intervals,
            loglik: fit.loglik,
            score_norm: fit.score_norm,
            converged: true,
            residual_test: fit.residual_test.clone(),
            uq_method: fit.uq,
            seed,
            iterations: fit.iterations,
            starts: fit.starts,
            wall_time_s,
            sample_variance,
            variance_ratio: sample_variance / fit.theta_hat.sigma2,
            pi_rho_over_diagonal: PI * fit.theta_hat.rho / input.grid.diagonal(),
            input,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        validate_result_json(&v)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        validate_result_json(&serde_json::from_str(&text)?)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Checks a JSON document against the bundled result schema.
pub fn validate_result_json(doc: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(RESULT_SCHEMA)?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| Error::Format(format!("result schema: {e}")))?;
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{}: {e}", e.instance_path())).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("result file fails its schema: {}", errors.join("; "))))
    }
}

/// CSV of predicted `<s^2> / sigma2` per grid size, one column per method.
pub fn bias_table(theta: &MaternParams, sizes: &[(usize, usize)], dx: f64, dy: f64, methods: &[BiasMethod]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(vec![]);
    let mut head = vec!["m".to_string(), "n".to_string()];
    head.extend(methods.iter().map(|m| m.name().to_string()));
    w.write_record(&head).map_err(|e| Error::Format(e.to_string()))?;
    for &(m, n) in sizes {
        let spec = GridSpec::new(m, n, dx, dy)?;
        let mut row = vec![m.to_string(), n.to_string()];
        for method in methods {
            row.push((sample_variance_bias(theta, &spec, *method)? / theta.sigma2).to_string());
        }
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_json() -> String {
        r#"{"m": 3, "n": 2, "dx": 1.5, "dy": 2.0, "units": "m", "value_type": "f64", "byte_order": "little", "layout": "row-major"}"#.into()
    }

    #[test]
    fn missing_field_is_named() {
        let text = header_json().replace(r#""dy": 2.0, "#, "");
        match GridHeader::parse(&text) {
            Err(Error::MissingField(f)) => assert_eq!(f, "dy"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupported_byte_order_is_rejected() {
        let text = header_json().replace("little", "big");
        assert!(matches!(GridHeader::parse(&text), Err(Error::Format(_))));
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let h = GridHeader::parse(&header_json()).unwrap();
        let a = Array2::from_shape_vec((2, 3), vec![0.1, -2.5e-300, 3.0, f64::MAX, 1.0 / 3.0, -0.0]).unwrap();
        let b = decode_binary(&encode_binary(&a), &h).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(decode_binary(&[0u8; 40], &h).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let h = GridHeader::parse(&header_json()).unwrap();
        let a = Array2::from_shape_vec((2, 3), vec![0.1, -2.5e-300, 3.0, 1e22, 1.0 / 3.0, 7.0]).unwrap();
        let b = decode_csv(&encode_csv(&a).unwrap(), &h).unwrap();
        assert_eq!(a, b);
        assert!(decode_csv("1,2,3\n", &h).is_err());
        assert!(decode_csv("1,2\n3,4\n", &h).is_err());
    }

    #[test]
    fn non_finite_policy() {
        let a = Array2::from_shape_vec((1, 3), vec![1.0, f64::NAN, 3.0]).unwrap();
        assert!(apply_policy(a.clone(), NonFinitePolicy::Error).is_err());
        let (v, valid) = apply_policy(a, NonFinitePolicy::Mask).unwrap();
        assert_eq!(v[[0, 1]], 2.0);
        assert_eq!(valid.unwrap().iter().filter(|b| !**b).count(), 1);
    }

    #[test]
    fn bias_table_layout() {
        let t = MaternParams::new(1.0, 2.5, 20.0).unwrap();
        let empty = bias_table(&t, &[], 10.0, 10.0, &BiasMethod::ALL).unwrap();
        assert_eq!(empty.trim(), "m,n,full-covariance,blurred-likelihood,full-likelihood");
        let one = bias_table(&t, &[(64, 64)], 10.0, 10.0, &[BiasMethod::FullLikelihood]).unwrap();
        let row: Vec<&str> = one.lines().nth(1).unwrap().split(',').collect();
        assert!((row[2].parse::<f64>().unwrap() - 0.9697).abs() < 5e-5);
    }

    #[test]
    fn schema_is_valid_json_schema() {
        let schema: Value = serde_json::from_str(RESULT_SCHEMA).unwrap();
        assert!(jsonschema::validator_for(&schema).is_ok());
        assert!(validate_result_json(&serde_json::json!({"schema_version": 1})).is_err());
    }
}
