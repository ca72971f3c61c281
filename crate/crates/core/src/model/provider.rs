use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numeric::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("no image features for item {0}")]
    UnknownItem(String),
    #[error("feature file: {0}")]
    File(String),
}

/// Patch tokens (m×d_img) for one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub tokens: Tensor,
}

impl ImageFeatures {
    pub fn pooled(&self) -> Vec<f64> {
        let (m, d) = self.tokens.shape();
        let mut out = vec![0.0; d];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(self.tokens.row_slice(r)) {
                *o += v / m as f64;
            }
        }
        out
    }
}

pub trait ImageFeatureProvider {
    /// (token count, token width).
    fn dims(&self) -> (usize, usize);
    fn features(&self, item_id: &str) -> Result<ImageFeatures, ProviderError>;
}

fn item_rng(seed: u64, item_id: &str, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(item_id.as_bytes());
    let d: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(d)
}

/// Stand-in image encoder: a fixed random linear map of the protocol
/// encoding, blended with per-item noise, split into jittered tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProvider {
    pub mixing: Tensor,
    pub alignment: f64,
    pub noise_scale: f64,
    pub token_count: usize,
    pub seed: u64,
    items: BTreeMap<String, ImageFeatures>,
}

impl SyntheticProvider {
    /// `active` is the number of nonzero entries expected per encoding;
    /// it scales the mixing matrix so signal components have unit variance.
    pub fn new(
        d_img: usize,
        enc_dim: usize,
        active: usize,
        alignment: f64,
        noise_scale: f64,
        token_count: usize,
        seed: u64,
    ) -> Self {
        let mut rng = item_rng(seed, "", "mixing");
        let std = 1.0 / (active.max(1) as f64).sqrt();
        SyntheticProvider {
            mixing: Tensor::randn(d_img, enc_dim, std, &mut rng),
            alignment,
            noise_scale,
            token_count: token_count.max(1),
            seed,
            items: BTreeMap::new(),
        }
    }

    /// a·M·enc + (1−a)·noise + extra; tokens average exactly to it.
    pub fn generate(&self, item_id: &str, encoding: &[f64], extra: &[f64]) -> ImageFeatures {
        let (d, p) = self.mixing.shape();
        assert_eq!(encoding.len(), p, "encoding width");
        let mut rng = item_rng(self.seed, item_id, "noise");
        let a = self.alignment;
        let mut base = vec![0.0; d];
        for (i, b) in base.iter_mut().enumerate() {
            let signal: f64 = self.mixing.row_slice(i).iter().zip(encoding).map(|(m, e)| m * e).sum();
            let noise: f64 = StandardNormal.sample(&mut rng);
            *b = a * signal + (1.0 - a) * noise + extra.get(i).copied().unwrap_or(0.0);
        }
        let m = self.token_count;
        let mut jit: Vec<f64> = (0..m * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.noise_scale * z
            })
            .collect();
        for c in 0..d {
            let mean = (0..m).map(|r| jit[r * d + c]).sum::<f64>() / m as f64;
            for r in 0..m {
                jit[r * d + c] -= mean;
            }
        }
        let data = (0..m * d).map(|i| base[i % d] + jit[i]).collect();
        ImageFeatures {
            tokens: Tensor::new(m, d, data),
        }
    }

    pub fn register(&mut self, item_id: &str, f: ImageFeatures) {
        self.items.insert(item_id.to_string(), f);
    }

    pub fn items(&self) -> &BTreeMap<String, ImageFeatures> {
        &self.items
    }
}

impl ImageFeatureProvider for SyntheticProvider {
    fn dims(&self) -> (usize, usize) {
        (self.token_count, self.mixing.rows)
    }

    fn features(&self, item_id: &str) -> Result<ImageFeatures, ProviderError> {
        self.items
            .get(item_id)
            .cloned()
            .ok_or_else(|| ProviderError::UnknownItem(item_id.to_string()))
    }
}

/// Precomputed features from a JSON file: {"d_img": n, "items": {id: [[...], ...]}}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileProvider {
    pub d_img: usize,
    pub items: BTreeMap<String, Vec<Vec<f64>>>,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProviderError::File(e.to_string()))?;
        let p: FileProvider =
            serde_json::from_str(&text).map_err(|e| ProviderError::File(e.to_string()))?;
        for (id, toks) in &p.items {
            if toks.is_empty() || toks.iter().any(|t| t.len() != p.d_img) {
                return Err(ProviderError::File(format!("{id}: bad token shape")));
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        let text = serde_json::to_string(self).map_err(|e| ProviderError::File(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ProviderError::File(e.to_string()))
    }

    pub fn from_features<'a>(d_img: usize, items: impl IntoIterator<Item = (&'a str, &'a ImageFeatures)>) -> Self {
        FileProvider {
            d_img,
            items: items
                .into_iter()
                .map(|(id, f)| {
                    let rows = (0..f.tokens.rows).map(|r| f.tokens.row_slice(r).to_vec()).collect();
                    (id.to_string(), rows)
                })
                .collect(),
        }
    }
}

impl ImageFeatureProvider for FileProvider {
    fn dims(&self) -> (usize, usize) {
        let m = self.items.values().next().map_or(0, Vec::len);
        (m, self.d_img)
    }

    fn features(&self, item_id: &str) -> Result<ImageFeatures, ProviderError> {
        let rows = self
            .items
            .get(item_id)
            .ok_or_else(|| ProviderError::UnknownItem(item_id.to_string()))?;
        Ok(ImageFeatures {
            tokens: Tensor::from_rows(rows),
        })
    }
}
