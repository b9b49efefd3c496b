use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Classifier, Contrastive, OracleScores, ScoreKind};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// `score_c(x) = sum over samples of w_c * x + b_c`.
///
/// Saliency of a linear model has a closed form, which makes this the
/// reference classifier for checking estimators and sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    height: usize,
    width: usize,
    channels: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    kind: ScoreKind,
}

impl LinearProbe {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width * channels;
        if weights.is_empty() {
            return Err(Error::InvalidArgument("linear probe needs at least one category".into()));
        }
        if let Some(w) = weights.iter().find(|w| w.len() != n) {
            return Err(Error::shape(format!("{n} weights per category"), w.len()));
        }
        if bias.len() != weights.len() {
            return Err(Error::shape(format!("{} biases", weights.len()), bias.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            weights,
            bias,
            kind: ScoreKind::Logit,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, k: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![vec![0.0; height * width * channels]; k],
            vec![0.0; k],
        )
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Same model with the head weights multiplied by -1, bias negated unless `keep_bias`.
    pub fn flipped(&self, keep_bias: bool) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().map(|v| -v).collect())
                .collect(),
            bias: if keep_bias {
                self.bias.clone()
            } else {
                self.bias.iter().map(|b| -b).collect()
            },
            ..self.clone()
        }
    }

    pub fn contrastive(self, keep_bias: bool) -> Contrastive<LinearProbe, LinearProbe> {
        let flipped = self.flipped(keep_bias);
        Contrastive {
            base: self,
            contrast: flipped,
        }
    }

    pub fn logits(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        if x.dims() != self.dims() {
            return Err(Error::shape(
                format!("{:?}", self.dims()),
                format!("{:?}", x.dims()),
            ));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect())
    }
}

impl Classifier for LinearProbe {
    fn categories(&self) -> usize {
        self.weights.len()
    }

    fn kind(&self) -> ScoreKind {
        self.kind
    }

    fn score_batch(&self, images: &[ImageTensor]) -> Result<Vec<OracleScores>> {
        images
            .par_iter()
            .map(|x| {
                Ok(OracleScores {
                    kind: self.kind,
                    scores: self.logits(x)?,
                })
            })
            .collect()
    }
}

/// On-disk JSON form of a probe, used by `builtin:linear:<file>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearProbeFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `k` rows of `height * width * channels` row-major weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    #[serde(default)]
    pub keep_bias_in_contrast: bool,
}

impl LinearProbeFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn into_probe(self) -> Result<LinearProbe> {
        LinearProbe::new(self.height, self.width, self.channels, self.weights, self.bias)
    }

    pub fn from_probe(probe: &LinearProbe, keep_bias_in_contrast: bool) -> Self {
        Self {
            height: probe.height,
            width: probe.width,
            channels: probe.channels,
            weights: probe.weights.clone(),
            bias: probe.bias.clone(),
            keep_bias_in_contrast,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{contrastive_score, score_batch};

    #[test]
    fn zero_probe_scores_zero() {
        let p = LinearProbe::zeros(4, 4, 3, 3).unwrap();
        let x = ImageTensor::filled(4, 4, 3, 0.7).unwrap();
        let s = score_batch(&p, &[x]).unwrap();
        assert_eq!(s[0].scores, vec![0.0; 3]);
        assert!(score_batch(&p, &[]).unwrap().is_empty());
    }

    #[test]
    fn constant_image_score() {
        let n = 224 * 224 * 3;
        let p = LinearProbe::new(224, 224, 3, vec![vec![1.0; n]], vec![0.0]).unwrap();
        let x = ImageTensor::filled(224, 224, 3, 0.5).unwrap();
        assert_eq!(p.logits(&x).unwrap(), vec![75264.0]);
    }

    #[test]
    fn negated_head_doubles_contrast() {
        let w: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let p = LinearProbe::new(2, 2, 3, vec![w.clone(), w.iter().map(|v| v * 0.5).collect()], vec![0.0, 0.0]).unwrap();
        let x = ImageTensor::from_fn(2, 2, 3, |y, xx, c| (y + xx + c) as f64 / 4.0).unwrap();
        let f = p.logits(&x).unwrap();
        let c = contrastive_score(&p.clone().contrastive(false), &x, 1).unwrap();
        assert_eq!(c, 2.0 * f[1]);

        let same = Contrastive::new(p.clone(), p.clone()).unwrap();
        assert_eq!(contrastive_score(&same, &x, 0).unwrap(), 0.0);
        assert!(contrastive_score(&same, &x, 2).is_err());
    }

    #[test]
    fn kept_bias_contrast() {
        let p = LinearProbe::new(1, 1, 1, vec![vec![2.0]], vec![3.0]).unwrap();
        let x = ImageTensor::filled(1, 1, 1, 0.5).unwrap();
        // f = 1 + 3, f' = -1 + 3
        assert_eq!(contrastive_score(&p.clone().contrastive(true), &x, 0).unwrap(), 2.0);
        // f' = -1 - 3
        assert_eq!(contrastive_score(&p.contrastive(false), &x, 0).unwrap(), 8.0);
    }

    #[test]
    fn shape_errors() {
        assert!(LinearProbe::new(2, 2, 1, vec![vec![0.0; 3]], vec![0.0]).is_err());
        assert!(LinearProbe::new(2, 2, 1, vec![vec![0.0; 4]], vec![]).is_err());
        let p = LinearProbe::zeros(2, 2, 1, 1).unwrap();
        assert!(p.logits(&ImageTensor::filled(2, 3, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let p = LinearProbe::new(1, 2, 1, vec![vec![0.25, -1.5]], vec![0.125]).unwrap();
        LinearProbeFile::from_probe(&p, true).save(&path).unwrap();
        let back = LinearProbeFile::load(&path).unwrap();
        assert!(back.keep_bias_in_contrast);
        assert_eq!(back.into_probe().unwrap(), p);
    }
}
