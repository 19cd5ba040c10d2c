//! RBF-kernel SVM with one-vs-rest reduction.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::smo::{self, KernelMatrix, SmoParams, SmoSolution};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub gamma: f64,
}

impl KernelParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self { gamma })
        } else {
            Err(Error::Config(format!("gamma must be positive, got {gamma}")))
        }
    }
}

/// `exp(-gamma * |x - y|^2)`.
pub fn rbf(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(rbf_unchecked(x, y, gamma))
}

#[inline]
fn rbf_unchecked(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub kernel: KernelParams,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * rbf_unchecked(sv, x, self.kernel.gamma))
            .sum::<f64>()
            + self.bias
    }

    fn negated(&self) -> Self {
        Self {
            support_vectors: self.support_vectors.clone(),
            dual_coefs: self.dual_coefs.iter().map(|c| -c).collect(),
            bias: -self.bias,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub labels: Vec<String>,
    pub machines: Vec<BinarySvm>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_passes: usize,
}

impl TrainParams {
    pub fn new(c: f64, gamma: f64) -> Self {
        Self {
            c,
            gamma,
            tol: 1e-3,
            max_passes: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        KernelParams::new(self.gamma)?;
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// One binary problem's solver output, kept for inspection.
#[derive(Debug, Clone)]
pub struct MachineReport {
    pub label: String,
    pub solution: SmoSolution,
}

pub fn train(x: &[Vec<f64>], y: &[String], params: &TrainParams) -> Result<SvmModel> {
    train_with_reports(x, y, params, false).map(|(m, _)| m)
}

/// Trains the one-vs-rest model and returns each solved binary problem.
///
/// With two classes a single machine is solved and the second label's machine
/// is its exact negation.
pub fn train_with_reports(
    x: &[Vec<f64>],
    y: &[String],
    params: &TrainParams,
    trace_objective: bool,
) -> Result<(SvmModel, Vec<MachineReport>)> {
    params.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidInput("no training points".into()));
    }
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    for row in x {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
    }
    let labels: Vec<String> = y.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if labels.len() < 2 {
        return Err(Error::SingleClass(labels[0].clone()));
    }

    let gamma = params.gamma;
    let kernel = KernelMatrix::from_fn(x.len(), |i, j| rbf_unchecked(&x[i], &x[j], gamma));
    let smo_params = SmoParams {
        c: params.c,
        tol: params.tol,
        max_passes: params.max_passes,
        max_iter: None,
        trace_objective,
    };

    let solve_for = |label: &String| {
        let signs: Vec<f64> = y.iter().map(|l| if l == label { 1.0 } else { -1.0 }).collect();
        let solution = smo::solve(&kernel, &signs, &smo_params);
        let mut support_vectors = Vec::new();
        let mut dual_coefs = Vec::new();
        for (t, &a) in solution.alpha.iter().enumerate() {
            if a > 0.0 {
                support_vectors.push(x[t].clone());
                dual_coefs.push(a * signs[t]);
            }
        }
        let machine = BinarySvm {
            support_vectors,
            dual_coefs,
            bias: -solution.rho,
            kernel: KernelParams { gamma },
        };
        (
            machine,
            MachineReport {
                label: label.clone(),
                solution,
            },
        )
    };

    let (machines, reports): (Vec<_>, Vec<_>) = if labels.len() == 2 {
        let (m, r) = solve_for(&labels[0]);
        let neg = m.negated();
        (vec![m, neg], vec![r])
    } else {
        labels.par_iter().map(solve_for).collect::<Vec<_>>().into_iter().unzip()
    };

    Ok((
        SvmModel {
            labels,
            machines,
            dim,
        },
        reports,
    ))
}

impl SvmModel {
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.machines.iter().map(|m| m.decision(x)).collect())
    }

    /// Label of the machine with the largest decision value; earlier labels win ties.
    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        let values = self.decision_values(x)?;
        let mut best = 0;
        for (k, v) in values.iter().enumerate().skip(1) {
            if *v > values[best] {
                best = k;
            }
        }
        Ok(&self.labels[best])
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<String>> {
        xs.par_iter()
            .map(|x| self.predict(x).map(str::to_string))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.version != MODEL_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported model version {}", file.version),
            ));
        }
        let m = file.model;
        let bad = |msg: String| Err(Error::format(path, msg));
        if m.labels.len() != m.machines.len() || m.labels.len() < 2 {
            return bad("labels and machines disagree".into());
        }
        if m.labels.iter().collect::<BTreeSet<_>>().len() != m.labels.len() {
            return bad("duplicate labels".into());
        }
        for machine in &m.machines {
            if machine.support_vectors.len() != machine.dual_coefs.len() {
                return bad("support vectors and dual coefficients disagree".into());
            }
            if machine.support_vectors.iter().any(|sv| sv.len() != m.dim) {
                return bad(format!("support vector length differs from dim {}", m.dim));
            }
            if !(machine.kernel.gamma > 0.0) {
                return bad("gamma must be positive".into());
            }
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(flatten)]
    model: SvmModel,
}

pub fn save_model(model: &SvmModel, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path, model.to_json().as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SvmModel> {
    let path = path.as_ref();
    SvmModel::from_json(&fsutil::read_to_string(path)?, path)
}
