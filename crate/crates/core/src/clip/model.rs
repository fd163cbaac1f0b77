use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Initial `ln` of the logit scale: logits start at `1/0.07 ≈ 14.3` times the cosine.
pub const INIT_LOG_SCALE: f32 = 2.659_260_1;
/// The logit scale is clamped to `[1, 100]`.
pub const MIN_LOG_SCALE: f32 = 0.0;
pub const MAX_LOG_SCALE: f32 = 4.605_170_2;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DFNM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Two linear towers with L2-normalized outputs and a learnable logit scale.
///
/// `log_scale` is the natural log of the multiplier applied to cosine
/// similarities before the softmax (the inverse softmax temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub image_weight: Array2<f32>,
    pub image_bias: Array1<f32>,
    pub text_weight: Array2<f32>,
    pub text_bias: Array1<f32>,
    pub log_scale: f32,
}

impl TwoTowerModel {
    /// Random initialization: weights `N(0, 1/d_in)`, zero biases.
    pub fn init(d_img: usize, d_txt: usize, d_emb: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        let mut gaussian = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f32).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let e: f32 = StandardNormal.sample(&mut rng);
                scale * e
            })
        };
        let image_weight = gaussian(d_emb, d_img);
        let text_weight = gaussian(d_emb, d_txt);
        Self {
            image_weight,
            image_bias: Array1::zeros(d_emb),
            text_weight,
            text_bias: Array1::zeros(d_emb),
            log_scale: INIT_LOG_SCALE,
        }
    }

    pub fn d_img(&self) -> usize {
        self.image_weight.ncols()
    }

    pub fn d_txt(&self) -> usize {
        self.text_weight.ncols()
    }

    pub fn d_emb(&self) -> usize {
        self.image_weight.nrows()
    }

    pub fn logit_scale(&self) -> f32 {
        self.log_scale.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Parameter blocks in checkpoint order.
    pub fn parameters(&self) -> [&[f32]; 5] {
        [
            self.image_weight.as_slice().expect("standard layout"),
            self.image_bias.as_slice().expect("standard layout"),
            self.text_weight.as_slice().expect("standard layout"),
            self.text_bias.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.log_scale),
        ]
    }

    pub(crate) fn parameters_mut(&mut self) -> [&mut [f32]; 5] {
        [
            self.image_weight.as_slice_mut().expect("standard layout"),
            self.image_bias.as_slice_mut().expect("standard layout"),
            self.text_weight.as_slice_mut().expect("standard layout"),
            self.text_bias.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.log_scale),
        ]
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.d_img(), self.d_txt(), self.d_emb())
    }

    pub fn encode_image(&self, features: &[f32]) -> Result<Vec<f32>> {
        encode_row(&self.image_weight, &self.image_bias, features, "image")
    }

    pub fn encode_text(&self, features: &[f32]) -> Result<Vec<f32>> {
        encode_row(&self.text_weight, &self.text_bias, features, "text")
    }

    /// Encodes every row; row results are bit-identical to [`Self::encode_image`].
    pub fn encode_images(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        encode_rows(&self.image_weight, &self.image_bias, features, "image")
    }

    pub fn encode_texts(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        encode_rows(&self.text_weight, &self.text_bias, features, "text")
    }

    /// Cosine similarity between the two tower embeddings of one pair.
    pub fn alignment(&self, image: &[f32], text: &[f32]) -> Result<f32> {
        let a = self.encode_image(image)?;
        let b = self.encode_text(text)?;
        Ok(dot(&a, &b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d_img, d_txt, d_emb) = self.shape();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, d_img as u32, d_txt as u32, d_emb as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for block in self.parameters() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Truncated {
                path: path.to_owned(),
                detail: "checkpoint header".into(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let version = word(4) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_owned(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (d_img, d_txt, d_emb) = (word(8), word(12), word(16));
        let mut model = Self {
            image_weight: Array2::zeros((d_emb, d_img)),
            image_bias: Array1::zeros(d_emb),
            text_weight: Array2::zeros((d_emb, d_txt)),
            text_bias: Array1::zeros(d_emb),
            log_scale: 0.0,
        };
        let n_params: usize = model.parameters().iter().map(|p| p.len()).sum();
        let body = &bytes[20..];
        if body.len() != 4 * n_params {
            return Err(Error::Truncated {
                path: path.to_owned(),
                detail: format!("expected {} parameter bytes, found {}", 4 * n_params, body.len()),
            });
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for block in model.parameters_mut() {
            for v in block.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("{}: checkpoint parameters", path.display())));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Row-wise reference kernel: sequential dot products so the result for a
/// row never depends on how many other rows are encoded alongside it.
fn encode_row(weight: &Array2<f32>, bias: &Array1<f32>, x: &[f32], tower: &str) -> Result<Vec<f32>> {
    if x.len() != weight.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{tower} tower expects {} features, got {}",
            weight.ncols(),
            x.len()
        )));
    }
    let mut out: Vec<f32> = weight
        .rows()
        .into_iter()
        .zip(bias)
        .map(|(w, b)| dot(w.as_slice().expect("standard layout"), x) + b)
        .collect();
    let norm = out.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "{tower} features map to a zero or non-finite vector before normalization"
        )));
    }
    let inv = (1.0 / norm) as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

fn encode_rows(weight: &Array2<f32>, bias: &Array1<f32>, x: ArrayView2<f32>, tower: &str) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((x.nrows(), weight.nrows()));
    for (i, row) in x.rows().into_iter().enumerate() {
        let e = match row.as_slice() {
            Some(s) => encode_row(weight, bias, s, tower),
            None => encode_row(weight, bias, &row.to_vec(), tower),
        }
        .map_err(|e| match e {
            Error::DegenerateInput(msg) => Error::DegenerateInput(format!("row {i}: {msg}")),
            other => other,
        })?;
        out.row_mut(i).assign(&Array1::from(e));
    }
    Ok(out)
}

/// Elementwise `(1 - alpha) * base + alpha * finetuned` over every parameter,
/// including the logit scale.
pub fn interpolate_weights(base: &TwoTowerModel, finetuned: &TwoTowerModel, alpha: f32) -> Result<TwoTowerModel> {
    if base.shape() != finetuned.shape() {
        return Err(Error::DimensionMismatch(format!(
            "cannot interpolate models of shape {:?} and {:?}",
            base.shape(),
            finetuned.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    let lerp = |a: f32, b: f32| (1.0 - alpha) * a + alpha * b;
    let mut out = base.clone();
    for (dst, src) in out.parameters_mut().into_iter().zip(finetuned.parameters()) {
        Zip::from(ndarray::ArrayViewMut1::from(dst))
            .and(ndarray::ArrayView1::from(src))
            .for_each(|a, &b| *a = lerp(*a, b));
    }
    Ok(out)
}

/// Encoded class prototypes, one unit row per concept.
#[derive(Debug, Clone)]
pub struct Prototypes(Array2<f32>);

impl Prototypes {
    /// Encodes clean prototype captions with the model's text tower.
    pub fn encode(model: &TwoTowerModel, captions: &[Vec<f32>]) -> Result<Self> {
        let mut m = Array2::zeros((captions.len(), model.d_emb()));
        for (i, c) in captions.iter().enumerate() {
            m.row_mut(i).assign(&Array1::from(model.encode_text(c)?));
        }
        Ok(Self(m))
    }

    /// Wraps already-embedded prototypes; rows must be unit norm to 1e-4.
    pub fn from_embeddings(m: Array2<f32>) -> Result<Self> {
        for (i, row) in m.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::config(format!("prototype {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    /// Index of the most similar prototype; ties go to the lowest index.
    pub fn nearest(&self, embedding: &[f32]) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::Empty("prototype set".into()));
        }
        let mut best = (0, f32::NEG_INFINITY);
        for (k, row) in self.0.rows().into_iter().enumerate() {
            let s = dot(row.as_slice().expect("standard layout"), embedding);
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok(best.0)
    }
}

/// Predicts the concept of `image` as the prototype with highest cosine
/// similarity to its embedding.
pub fn zero_shot_classify(model: &TwoTowerModel, prototypes: &Prototypes, image: &[f32]) -> Result<usize> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set".into()));
    }
    prototypes.nearest(&model.encode_image(image)?)
}
