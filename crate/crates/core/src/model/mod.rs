//! Autoregressive models: the general TV-VAR form, its attention
//! instantiation, a linear state space variant, and gradient training.

mod loss;
mod ssm;
mod train;
mod transformer;
mod tvvar;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Token;

pub use loss::{cross_entropy_loss, log_prob_gradient, Gradient, Target, TrainingExample};
pub use ssm::{ssm_generate, SsmModel, SsmParams, UnrolledSsm};
pub use train::{
    di_gradient, mean_kl, objective, reward_gradient, teacher_examples, train, ConstantReward, LossVariant,
    NoTokenReward, RewardFunction, TeacherLogLikelihood, TrainConfig, TrainOutcome,
};
pub(crate) use transformer::normalize_rows;
pub use transformer::{DecodeMode, Generation, InitConfig, TransformerParams, EMBEDDING_NORM_TOL};
pub use tvvar::{tvvar_logits, tvvar_next, AttentionProvider, CoefficientProvider};

/// On-disk model format, version "v1". Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub xi: f64,
    pub stop_token: Token,
    pub embedding: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{what} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<&TransformerParams> for ModelFile {
    fn from(p: &TransformerParams) -> Self {
        ModelFile {
            version: "v1".into(),
            n: p.alphabet_size(),
            d: p.dim(),
            xi: p.temperature(),
            stop_token: p.stop_token(),
            embedding: to_rows(p.embedding()),
            a: to_rows(p.value()),
            b: to_rows(p.bilinear()),
        }
    }
}

impl TryFrom<ModelFile> for TransformerParams {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.version != "v1" {
            return Err(Error::Format(format!("unsupported model version {:?}", f.version)));
        }
        let e = from_rows(&f.embedding, f.n, f.d, "embedding")?;
        let a = from_rows(&f.a, f.d, f.d, "A")?;
        let b = from_rows(&f.b, f.d, f.d, "B")?;
        TransformerParams::new(e, a, b, f.xi, f.stop_token)
    }
}

impl TransformerParams {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_is_exact() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let back = TransformerParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn loader_validates() {
        let p = TransformerParams::random(&InitConfig::new(3, 2), 0).unwrap();
        let mut f = ModelFile::from(&p);
        f.embedding[0] = vec![2.0, 0.0];
        assert!(TransformerParams::try_from(f.clone()).is_err());
        f.embedding[0] = vec![1.0, 0.0];
        f.xi = 0.0;
        assert!(TransformerParams::try_from(f).is_err());
        let text = p
            .to_json()
            .unwrap()
            .replacen("\"version\"", "\"extra\": 1, \"version\"", 1);
        assert!(TransformerParams::from_json(&text).is_err());
    }
}
