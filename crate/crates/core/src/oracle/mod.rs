//! Black-box classifiers consumed by the attack harness and by c-RISE.

mod external;
mod linear;
pub mod protocol;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use external::{external_oracle_connect, ExternalOracle, OracleAddress};
pub use linear::{LinearProbe, LinearProbeFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Logit,
    Probability,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Logit => "logit",
            ScoreKind::Probability => "probability",
        })
    }
}

/// One score per category, higher meaning more evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
}

impl OracleScores {
    pub fn new(kind: ScoreKind, scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Protocol("non-finite score".into()));
        }
        if kind == ScoreKind::Probability {
            let sum: f64 = scores.iter().sum();
            if scores.iter().any(|&s| s < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Protocol(format!(
                    "probability scores must be nonnegative and sum to 1 (sum {sum})"
                )));
            }
        }
        Ok(Self { kind, scores })
    }

    pub fn k(&self) -> usize {
        self.scores.len()
    }

    /// Categories by descending score; ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut r = self.ranking();
        r.truncate(k);
        r
    }

    pub fn argmax(&self) -> usize {
        self.top_k(1)[0]
    }

    /// Scores mapped to probabilities (softmax for logits, identity otherwise).
    pub fn probabilities(&self) -> Vec<f64> {
        match self.kind {
            ScoreKind::Probability => self.scores.clone(),
            ScoreKind::Logit => softmax(&self.scores),
        }
    }
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub trait Classifier: Send + Sync {
    fn categories(&self) -> usize;

    fn kind(&self) -> ScoreKind;

    /// One score vector per image, in input order.
    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<OracleScores>>;
}

/// A classifier paired with its flipped-head twin `f'`.
pub trait ContrastiveClassifier: Classifier {
    /// `(f(x), f'(x))` per image, in input order.
    fn score_contrastive(&self, images: &[ImageTensor]) -> Result<Vec<(OracleScores, OracleScores)>>;
}

pub fn score_batch<C: Classifier + ?Sized>(oracle: &C, images: &[ImageTensor]) -> Result<Vec<OracleScores>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let dims = images[0].dims();
    if let Some(bad) = images.iter().find(|im| im.dims() != dims) {
        return Err(Error::shape(format!("{dims:?}"), format!("{:?}", bad.dims())));
    }
    let out = oracle.score_batch(images)?;
    if out.len() != images.len() {
        return Err(Error::Protocol(format!(
            "{} score vectors for {} images",
            out.len(),
            images.len()
        )));
    }
    Ok(out)
}

/// `f(x)[category] - f'(x)[category]`.
pub fn contrastive_score<C: ContrastiveClassifier + ?Sized>(
    oracle: &C,
    x: &ImageTensor,
    category: usize,
) -> Result<f64> {
    if category >= oracle.categories() {
        return Err(Error::InvalidArgument(format!(
            "category {category} >= k = {}",
            oracle.categories()
        )));
    }
    let (f, fp) = oracle
        .score_contrastive(std::slice::from_ref(x))?
        .pop()
        .ok_or_else(|| Error::Protocol("empty contrastive response".into()))?;
    Ok(f.scores[category] - fp.scores[category])
}

/// Two independent classifiers acting as `f` and `f'`.
#[derive(Debug, Clone)]
pub struct Contrastive<F, G> {
    pub base: F,
    pub contrast: G,
}

impl<F: Classifier, G: Classifier> Contrastive<F, G> {
    pub fn new(base: F, contrast: G) -> Result<Self> {
        if base.categories() != contrast.categories() {
            return Err(Error::shape(
                format!("{} categories", base.categories()),
                contrast.categories(),
            ));
        }
        if base.kind() != contrast.kind() {
            return Err(Error::InvalidArgument("f and f' report different score kinds".into()));
        }
        Ok(Self { base, contrast })
    }
}

impl<F: Classifier, G: Classifier> Classifier for Contrastive<F, G> {
    fn categories(&self) -> usize {
        self.base.categories()
    }

    fn kind(&self) -> ScoreKind {
        self.base.kind()
    }

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<OracleScores>> {
        self.base.score_batch(images)
    }
}

impl<F: Classifier, G: Classifier> ContrastiveClassifier for Contrastive<F, G> {
    fn score_contrastive(&self, images: &[ImageTensor]) -> Result<Vec<(OracleScores, OracleScores)>> {
        let f = self.base.score_batch(images)?;
        let fp = self.contrast.score_batch(images)?;
        Ok(f.into_iter().zip(fp).collect())
    }
}

impl<C: Classifier + ?Sized> Classifier for Arc<C> {
    fn categories(&self) -> usize {
        (**self).categories()
    }

    fn kind(&self) -> ScoreKind {
        (**self).kind()
    }

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<OracleScores>> {
        (**self).score_batch(images)
    }
}

impl<C: ContrastiveClassifier + ?Sized> ContrastiveClassifier for Arc<C> {
    fn score_contrastive(&self, images: &[ImageTensor]) -> Result<Vec<(OracleScores, OracleScores)>> {
        (**self).score_contrastive(images)
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn categories(&self) -> usize {
        (**self).categories()
    }

    fn kind(&self) -> ScoreKind {
        (**self).kind()
    }

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<OracleScores>> {
        (**self).score_batch(images)
    }
}

impl<C: ContrastiveClassifier + ?Sized> ContrastiveClassifier for Box<C> {
    fn score_contrastive(&self, images: &[ImageTensor]) -> Result<Vec<(OracleScores, OracleScores)>> {
        (**self).score_contrastive(images)
    }
}

/// Parsed form of the `--oracle` flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleSpec {
    Command(String),
    Tcp(String),
    BuiltinLinear(std::path::PathBuf),
}

impl FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let cmd = cmd.trim();
            let cmd = cmd
                .strip_prefix('"')
                .and_then(|c| c.strip_suffix('"'))
                .unwrap_or(cmd);
            return Ok(OracleSpec::Command(cmd.to_string()));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            return Ok(OracleSpec::Tcp(addr.to_string()));
        }
        if let Some(path) = s.strip_prefix("builtin:linear:") {
            return Ok(OracleSpec::BuiltinLinear(path.into()));
        }
        Err(Error::InvalidArgument(format!(
            "oracle must be cmd:\"...\", tcp:host:port or builtin:linear:<weights-file>, got {s:?}"
        )))
    }
}

/// Opens the oracle named by `spec`; builtin probes get a negated-head twin.
pub fn open_oracle(spec: &OracleSpec) -> Result<Box<dyn ContrastiveClassifier>> {
    match spec {
        OracleSpec::BuiltinLinear(path) => {
            let file = LinearProbeFile::load(path)?;
            let keep_bias = file.keep_bias_in_contrast;
            let probe = file.into_probe()?;
            let flipped = probe.flipped(keep_bias);
            Ok(Box::new(Contrastive::new(probe, flipped)?))
        }
        OracleSpec::Command(cmd) => Ok(Box::new(external_oracle_connect(
            &OracleAddress::Command(cmd.clone()),
            protocol::PROTOCOL_VERSION,
        )?)),
        OracleSpec::Tcp(addr) => Ok(Box::new(external_oracle_connect(
            &OracleAddress::Tcp(addr.clone()),
            protocol::PROTOCOL_VERSION,
        )?)),
    }
}
