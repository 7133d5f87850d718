//! Model parameters and their JSON file format.
//!
//! A parameters file is one JSON object:
//!
//! ```json
//! {
//!   "format": "credence-params/1",
//!   "ground_truth": false,
//!   "polarity": "refutation",
//!   "horizon": 15.0,
//!   "n_topics": 1,
//!   "kernels": {
//!     "addition":   {"kind": "rbf", "centers": [0.0, 6.0, 12.0], "sigma": 2.0},
//!     "evaluation": {"kind": "rbf", "centers": [0.0, 6.0, 12.0], "sigma": 0.5},
//!     "trigger":    {"kind": "exponential", "omega": 0.5}
//!   },
//!   "eta": 0.0,
//!   "sources": [{"id": "s0", "alpha": [0.3], "gamma": [0.01]}],
//!   "items":   [{"id": "d0", "phi": [33.1, 0.0, 0.0], "beta": [2.0, 0.0, 0.0], "w": [1.0]}],
//!   "pi": [[1.0]],
//!   "provenance": {...},
//!   "metadata": {...}
//! }
//! ```
//!
//! `pi[l][s]` is the popularity of `sources[s]` in topic `l`. `provenance`
//! and `metadata` are free-form and optional.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::event::Polarity;
use crate::kernels::{BasisKernel, KernelError, TriggerKernel};

pub const PARAMS_FORMAT: &str = "credence-params/1";

#[derive(Debug, thiserror::Error)]
pub enum ParamsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid parameters file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported parameters format {0:?}")]
    Format(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

/// Kernel configuration shared by every item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    /// Basis of the item's intrinsic addition rate.
    pub addition: BasisKernel,
    /// Basis of the item's intrinsic evaluation hazard (clocked on item time).
    pub evaluation: BasisKernel,
    pub trigger: TriggerKernel,
}

impl KernelSet {
    pub fn validate(&self) -> Result<(), KernelError> {
        self.addition.validate()?;
        self.evaluation.validate()?;
        self.trigger.validate()
    }

    /// Single constant kernels for both processes and a step trigger.
    pub fn constant(horizon: f64) -> Result<Self, KernelError> {
        Ok(KernelSet {
            addition: BasisKernel::constant(horizon)?,
            evaluation: BasisKernel::constant(horizon)?,
            trigger: TriggerKernel::Step,
        })
    }
}

/// Per-source parameters: `alpha` drives how fast its statements get
/// evaluated, `gamma` how an evaluation of its statements shifts the item's
/// addition rate. Both have one entry per topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub id: String,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Per-item parameters: basis weights of the addition (`phi`) and
/// evaluation (`beta`) processes, and the item's topic weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub id: String,
    pub phi: Vec<f64>,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub polarity: Polarity,
    pub horizon: f64,
    pub n_topics: usize,
    pub kernels: KernelSet,
    #[serde(default)]
    pub eta: f64,
    pub sources: Vec<SourceParams>,
    pub items: Vec<ItemParams>,
    pub pi: Vec<Vec<f64>>,
    #[serde(skip)]
    item_lookup: HashMap<String, usize>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.polarity == other.polarity
            && self.horizon == other.horizon
            && self.n_topics == other.n_topics
            && self.kernels == other.kernels
            && self.eta == other.eta
            && self.sources == other.sources
            && self.items == other.items
            && self.pi == other.pi
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ModelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        polarity: Polarity,
        horizon: f64,
        n_topics: usize,
        kernels: KernelSet,
        eta: f64,
        sources: Vec<SourceParams>,
        items: Vec<ItemParams>,
        pi: Vec<Vec<f64>>,
    ) -> Result<Self, ParamsError> {
        let mut p = ModelParams {
            polarity,
            horizon,
            n_topics,
            kernels,
            eta,
            sources,
            items,
            pi,
            item_lookup: HashMap::new(),
        };
        p.validate()?;
        p.reindex();
        Ok(p)
    }

    fn reindex(&mut self) {
        self.item_lookup = self
            .items
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i))
            .collect();
    }

    /// Checks sign constraints, vector lengths and that every `pi` row is a
    /// probability vector.
    pub fn validate(&self) -> Result<(), ParamsError> {
        let bad = |m: String| Err(ParamsError::Invalid(m));
        self.kernels.validate()?;
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.n_topics == 0 {
            return bad("n_topics must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        let l = self.n_topics;
        for s in &self.sources {
            if s.alpha.len() != l || s.gamma.len() != l {
                return bad(format!(
                    "source {:?}: alpha/gamma must have {l} entries",
                    s.id
                ));
            }
            if s.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return bad(format!("source {:?}: alpha must be nonnegative", s.id));
            }
            let sign_ok = match self.polarity {
                Polarity::Refutation => s.gamma.iter().all(|g| g.is_finite() && *g >= 0.0),
                Polarity::Verification => s.gamma.iter().all(|g| g.is_finite() && *g <= 0.0),
            };
            if !sign_ok {
                return bad(format!(
                    "source {:?}: gamma violates the {} sign constraint",
                    s.id,
                    self.polarity.as_str()
                ));
            }
        }
        let ja = self.kernels.addition.len();
        let je = self.kernels.evaluation.len();
        for d in &self.items {
            if d.phi.len() != ja || d.beta.len() != je || d.w.len() != l {
                return bad(format!(
                    "item {:?}: parameter lengths do not match the kernels",
                    d.id
                ));
            }
            if d.phi
                .iter()
                .chain(&d.beta)
                .any(|x| !(x.is_finite() && *x >= 0.0))
            {
                return bad(format!("item {:?}: phi and beta must be nonnegative", d.id));
            }
            if d.w.iter().any(|x| *x < 0.0) || (d.w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad(format!(
                    "item {:?}: topic weights must be a probability vector",
                    d.id
                ));
            }
        }
        if self.pi.len() != l {
            return bad(format!("pi must have {l} rows"));
        }
        for (k, row) in self.pi.iter().enumerate() {
            if row.len() != self.sources.len() {
                return bad(format!("pi[{k}] must have one entry per source"));
            }
            if row.iter().any(|x| !(x.is_finite() && *x >= 0.0))
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6
            {
                return bad(format!("pi[{k}] is not a probability vector"));
            }
        }
        Ok(())
    }

    pub fn item(&self, id: &str) -> Option<&ItemParams> {
        match self.item_lookup.get(id) {
            Some(&i) => self.items.get(i),
            None if self.item_lookup.len() != self.items.len() => {
                self.items.iter().find(|d| d.id == id)
            }
            None => None,
        }
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.id.clone()).collect()
    }

    /// `w · alpha_s`; sources unknown to the model contribute 0.
    #[inline]
    pub fn trust(&self, source: usize, w: &[f64]) -> f64 {
        self.sources.get(source).map_or(0.0, |s| dot(w, &s.alpha))
    }

    /// `w · gamma_s`; sources unknown to the model contribute 0.
    #[inline]
    pub fn impact(&self, source: usize, w: &[f64]) -> f64 {
        self.sources.get(source).map_or(0.0, |s| dot(w, &s.gamma))
    }

    /// `Σ_l w_l pi_l(s)`.
    pub fn source_probability(&self, source: usize, w: &[f64]) -> f64 {
        self.pi
            .iter()
            .zip(w)
            .map(|(row, wl)| wl * row.get(source).copied().unwrap_or(0.0))
            .sum()
    }

    /// Copy with every item's `beta` set to zero.
    pub fn without_item_evaluation(&self) -> ModelParams {
        let mut p = self.clone();
        for d in &mut p.items {
            d.beta.iter_mut().for_each(|b| *b = 0.0);
        }
        p
    }

    /// Copy with every source's `alpha` set to zero.
    pub fn without_source_evaluation(&self) -> ModelParams {
        let mut p = self.clone();
        for s in &mut p.sources {
            s.alpha.iter_mut().for_each(|a| *a = 0.0);
        }
        p
    }

    pub fn to_file(&self, ground_truth: bool) -> ParamsFile {
        ParamsFile {
            format: PARAMS_FORMAT.to_string(),
            ground_truth,
            model: self.clone(),
            provenance: None,
            metadata: None,
        }
    }
}

/// On-disk envelope around [`ModelParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    #[serde(default)]
    pub ground_truth: bool,
    #[serde(flatten)]
    pub model: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Value>,
}

impl ParamsFile {
    pub fn from_json(text: &str) -> Result<Self, ParamsError> {
        let mut f: ParamsFile = serde_json::from_str(text)?;
        f.finish()?;
        Ok(f)
    }

    fn finish(&mut self) -> Result<(), ParamsError> {
        if self.format != PARAMS_FORMAT {
            return Err(ParamsError::Format(self.format.clone()));
        }
        self.model.validate()?;
        self.model.reindex();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ParamsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ParamsError> {
        let mut f: ParamsFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        f.finish()?;
        Ok(f)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ParamsError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams {
        ModelParams::new(
            Polarity::Refutation,
            15.0,
            1,
            KernelSet::constant(15.0).unwrap(),
            0.1,
            vec![SourceParams {
                id: "s".into(),
                alpha: vec![0.5],
                gamma: vec![0.2],
            }],
            vec![ItemParams {
                id: "d".into(),
                phi: vec![2.0],
                beta: vec![0.1],
                w: vec![1.0],
            }],
            vec![vec![1.0]],
        )
        .unwrap()
    }

    #[test]
    fn file_round_trip() {
        let p = sample();
        let text = p.to_file(true).to_json().unwrap();
        let back = ParamsFile::from_json(&text).unwrap();
        assert!(back.ground_truth);
        assert_eq!(back.model, p);
        assert_eq!(back.model.item("d").unwrap().phi, vec![2.0]);
    }

    #[test]
    fn sign_constraints_are_enforced() {
        let mut p = sample();
        p.polarity = Polarity::Verification;
        assert!(p.validate().is_err());
        p.sources[0].gamma = vec![-0.2];
        assert!(p.validate().is_ok());
        p.sources[0].alpha = vec![-0.1];
        assert!(p.validate().is_err());
    }

    #[test]
    fn pi_must_be_probability_vector() {
        let mut p = sample();
        p.pi = vec![vec![0.5]];
        assert!(p.validate().is_err());
    }

    #[test]
    fn unknown_format_is_rejected() {
        let text = sample()
            .to_file(false)
            .to_json()
            .unwrap()
            .replace(PARAMS_FORMAT, "other/9");
        assert!(matches!(
            ParamsFile::from_json(&text),
            Err(ParamsError::Format(_))
        ));
    }
}
