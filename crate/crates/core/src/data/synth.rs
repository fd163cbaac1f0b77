//! Concept-based synthetic image-text pools.
//!
//! A *world* fixes `K` unit concept vectors in a latent space plus two linear
//! maps into image and text feature space. Pools drawn from the same world
//! share concepts and maps and differ only in sampling noise, alignment rate
//! and id range, so a model trained on one pool transfers to another.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pool::{Pool, RecordRef};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Records per independently seeded generation chunk.
pub const GEN_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Probability that a record's text comes from the image's concept.
    pub align_prob: f64,
    /// Per-coordinate standard deviation of additive feature noise.
    pub noise_sigma: f64,
    /// Seed for concepts and maps.
    pub world_seed: u64,
    /// Seed for per-record sampling.
    pub seed: u64,
    /// Id of the first generated record; ids are consecutive from here.
    pub id_offset: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 50,
            d_latent: 32,
            d_img: 64,
            d_txt: 64,
            align_prob: 0.98,
            noise_sigma: 0.1,
            world_seed: 0,
            seed: 0,
            id_offset: 0,
        }
    }
}

impl SyntheticSpec {
    /// High-quality preset: nearly always aligned, low noise.
    pub fn high_quality(world_seed: u64, seed: u64, id_offset: u64) -> Self {
        Self {
            world_seed,
            seed,
            id_offset,
            ..Self::default()
        }
    }

    /// Unfiltered-web preset: mostly misaligned, high noise.
    pub fn noisy(world_seed: u64, seed: u64, id_offset: u64) -> Self {
        Self {
            align_prob: 0.3,
            noise_sigma: 0.6,
            world_seed,
            seed,
            id_offset,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts < 2 {
            return Err(Error::config("num_concepts must be >= 2"));
        }
        if self.d_latent == 0 || self.d_img == 0 || self.d_txt == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.align_prob) {
            return Err(Error::config(format!("align_prob {} outside [0, 1]", self.align_prob)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// How a shifted evaluation pool departs from the base generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    None,
    /// Adds `magnitude` to the image noise sigma.
    Noise { magnitude: f64 },
    /// Adds `magnitude * R / sqrt(d_latent)` to the image map, with `R`
    /// a fixed Gaussian matrix drawn from `seed`.
    MapShift { magnitude: f64, seed: u64 },
    /// Zeroes each image coordinate independently with probability `magnitude`.
    Dropout { magnitude: f64 },
}

/// Concepts and modality maps shared by every pool of one world.
#[derive(Debug, Clone)]
pub struct World {
    num_concepts: usize,
    d_latent: usize,
    d_img: usize,
    d_txt: usize,
    /// `K x d_latent`, rows unit norm.
    concepts: Vec<f64>,
    /// `d_img x d_latent`.
    image_map: Vec<f64>,
    /// `d_txt x d_latent`.
    text_map: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut rng::Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect::<Vec<f64>>()
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl World {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (k, dl) = (spec.num_concepts, spec.d_latent);

        let mut rng_c = rng::stream(spec.world_seed, streams::CONCEPTS);
        let mut concepts = gaussian_matrix(k, dl, 1.0, &mut rng_c);
        for row in concepts.chunks_exact_mut(dl) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }

        let scale = 1.0 / (dl as f64).sqrt();
        let image_map = gaussian_matrix(spec.d_img, dl, scale, &mut rng::stream(spec.world_seed, streams::IMAGE_MAP));
        let text_map = gaussian_matrix(spec.d_txt, dl, scale, &mut rng::stream(spec.world_seed, streams::TEXT_MAP));

        Ok(Self {
            num_concepts: k,
            d_latent: dl,
            d_img: spec.d_img,
            d_txt: spec.d_txt,
            concepts,
            image_map,
            text_map,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn d_latent(&self) -> usize {
        self.d_latent
    }

    pub fn concept(&self, k: usize) -> &[f64] {
        &self.concepts[k * self.d_latent..(k + 1) * self.d_latent]
    }

    pub fn image_map(&self) -> &[f64] {
        &self.image_map
    }

    pub fn text_map(&self) -> &[f64] {
        &self.text_map
    }

    /// Noise-free image features of concept `k`.
    pub fn clean_image(&self, k: usize) -> Vec<f32> {
        to_f32(mat_vec(&self.image_map, self.d_img, self.d_latent, self.concept(k)))
    }

    /// Noise-free text features of concept `k` (the class prototype caption).
    pub fn clean_text(&self, k: usize) -> Vec<f32> {
        to_f32(mat_vec(&self.text_map, self.d_txt, self.d_latent, self.concept(k)))
    }

    pub fn clean_texts(&self) -> Vec<Vec<f32>> {
        (0..self.num_concepts).map(|k| self.clean_text(k)).collect()
    }

    /// A copy of this world with a perturbed image map.
    fn with_image_map_shift(&self, magnitude: f64, seed: u64) -> Self {
        let scale = magnitude / (self.d_latent as f64).sqrt();
        let delta = gaussian_matrix(self.d_img, self.d_latent, 1.0, &mut rng::stream(seed, streams::SHIFT));
        let mut out = self.clone();
        out.image_map.iter_mut().zip(delta).for_each(|(a, d)| *a += scale * d);
        out
    }

    fn check_spec(&self, spec: &SyntheticSpec) -> Result<()> {
        if spec.num_concepts != self.num_concepts
            || spec.d_latent != self.d_latent
            || spec.d_img != self.d_img
            || spec.d_txt != self.d_txt
        {
            return Err(Error::DimensionMismatch(
                "synthetic spec shape differs from the world it samples".into(),
            ));
        }
        spec.validate()
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Draws `n` records from the world described by `spec`.
pub fn generate_pool(spec: &SyntheticSpec, n: usize) -> Result<Pool> {
    let world = World::new(spec)?;
    generate_from_world(&world, spec, n, Perturbation::None)
}

/// Draws `n` records from an existing world, optionally perturbed.
///
/// Record `i` belongs to chunk `i / GEN_CHUNK`; each chunk has its own
/// random stream so chunks can be generated in parallel without changing
/// the output.
pub fn generate_from_world(world: &World, spec: &SyntheticSpec, n: usize, perturbation: Perturbation) -> Result<Pool> {
    world.check_spec(spec)?;
    if n == 0 {
        return Err(Error::config("pool size must be >= 1"));
    }
    let mut noise_image = spec.noise_sigma;
    let mut dropout = 0.0;
    let shifted;
    let world = match perturbation {
        Perturbation::None => world,
        Perturbation::Noise { magnitude } => {
            noise_image += magnitude;
            world
        }
        Perturbation::MapShift { magnitude, seed } => {
            shifted = world.with_image_map_shift(magnitude, seed);
            &shifted
        }
        Perturbation::Dropout { magnitude } => {
            dropout = magnitude;
            world
        }
    };
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::config(format!("dropout magnitude {dropout} outside [0, 1]")));
    }

    let clean_images: Vec<Vec<f32>> = (0..world.num_concepts).map(|k| world.clean_image(k)).collect();
    let clean_texts = world.clean_texts();

    let chunks: Vec<Pool> = (0..n.div_ceil(GEN_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(spec.seed, streams::GEN_BASE + c as u64);
            let lo = c * GEN_CHUNK;
            let hi = ((c + 1) * GEN_CHUNK).min(n);
            let mut pool = Pool::with_capacity(spec.d_img, spec.d_txt, hi - lo);
            let mut image = vec![0f32; spec.d_img];
            let mut text = vec![0f32; spec.d_txt];
            let k_total = world.num_concepts;
            for i in lo..hi {
                let k = rng.random_range(0..k_total);
                let aligned = rng.random::<f64>() < spec.align_prob;
                let k_text = if aligned {
                    k
                } else {
                    (k + 1 + rng.random_range(0..k_total - 1)) % k_total
                };
                for (dst, &c) in image.iter_mut().zip(&clean_images[k]) {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *dst = c + (noise_image * e) as f32;
                }
                if dropout > 0.0 {
                    for v in image.iter_mut() {
                        if rng.random::<f64>() < dropout {
                            *v = 0.0;
                        }
                    }
                }
                for (dst, &c) in text.iter_mut().zip(&clean_texts[k_text]) {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *dst = c + (spec.noise_sigma * e) as f32;
                }
                pool.push_unchecked(RecordRef {
                    id: spec.id_offset + i as u64,
                    image: &image,
                    text: &text,
                    concept: Some(k as u32),
                    aligned: Some(aligned),
                });
            }
            pool
        })
        .collect();
    Pool::concat(spec.d_img, spec.d_txt, &chunks)
}
