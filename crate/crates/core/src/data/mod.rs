//! Synthetic compositional retrieval benchmark.
//!
//! Each instance hides a conjunction of attribute clauses (some negated).
//! Exactly one of the `L` candidates satisfies every clause; every other
//! candidate is the gold attribute vector with at least one clause-relevant
//! bit flipped. Frozen "encoders" map clauses, candidates and their fusion
//! into embedding space.

mod format;

pub use format::{
    read_dataset, read_dataset_bytes, read_header_bytes, write_dataset, write_dataset_bytes,
    DatasetHeader, MAGIC,
};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Empirical proposition-count totals for counts 1..=5.
pub const DEFAULT_COUNT_WEIGHTS: [f64; 5] = [61.0, 863.0, 1239.0, 126.0, 16.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Embedding width.
    pub d: usize,
    /// Candidates per instance.
    pub candidates: usize,
    /// Number of binary attributes.
    pub attributes: usize,
    /// Relative weights of proposition counts 1..=5.
    pub count_weights: Vec<f64>,
    /// Probability that a clause is negated.
    pub negation_prob: f64,
    /// Standard deviation of additive embedding noise.
    pub noise: f64,
    /// Probability that a distractor violates a second clause.
    pub extra_violation_prob: f64,
    /// Seed of the frozen encoding matrices.
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            d: 64,
            candidates: 10,
            attributes: 12,
            count_weights: DEFAULT_COUNT_WEIGHTS.to_vec(),
            negation_prob: 0.3,
            noise: 0.05,
            extra_violation_prob: 0.25,
            seed: 10,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.candidates < 2 {
            return Err(Error::Config(format!(
                "need at least 2 candidates, got {}",
                self.candidates
            )));
        }
        if self.count_weights.len() != 5 {
            return Err(Error::Config(format!(
                "count_weights must list counts 1..=5 (5 entries), got {}",
                self.count_weights.len()
            )));
        }
        if self
            .count_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config(
                "count weights must be finite and nonnegative".into(),
            ));
        }
        if self.count_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("count weights are all zero".into()));
        }
        if self.max_count() > self.attributes {
            return Err(Error::Config(format!(
                "max clause count {} exceeds attribute count {}",
                self.max_count(),
                self.attributes
            )));
        }
        if !(0.0..=1.0).contains(&self.negation_prob)
            || !(0.0..=1.0).contains(&self.extra_violation_prob)
        {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Largest count with nonzero weight.
    pub fn max_count(&self) -> usize {
        self.count_weights
            .iter()
            .rposition(|&w| w > 0.0)
            .map_or(0, |i| i + 1)
    }

    /// Stable 64-bit digest of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        config_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn config_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One attribute constraint: `attrs[attribute]` must be 1 (positive) or 0
/// (negated).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clause {
    pub attribute: usize,
    pub positive: bool,
}

impl Clause {
    pub fn polarity(self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn satisfies(attrs: &[bool], clause: Clause) -> bool {
    attrs[clause.attribute] == clause.positive
}

/// Logical structure of one instance before encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInstance {
    pub attrs: Vec<Vec<bool>>,
    pub clauses: Vec<Clause>,
    pub gold: usize,
    pub seed: u64,
}

impl RawInstance {
    /// `masks[j][l]`: candidate `l` satisfies clause `j`.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.clauses
            .iter()
            .map(|&c| self.attrs.iter().map(|a| satisfies(a, c)).collect())
            .collect()
    }

    /// Deterministic byte encoding, used to compare draws.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.seed.to_le_bytes().to_vec();
        out.extend_from_slice(&(self.gold as u32).to_le_bytes());
        for c in &self.clauses {
            out.extend_from_slice(&(c.attribute as u32).to_le_bytes());
            out.push(c.positive as u8);
        }
        for row in &self.attrs {
            out.extend(row.iter().map(|&b| b as u8));
        }
        out
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw the logical content of one instance.
pub fn generate_raw(seed: u64, cfg: &GenConfig) -> Result<RawInstance> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0);
    let counts = WeightedIndex::new(&cfg.count_weights)
        .map_err(|e| Error::Config(format!("count weights: {e}")))?;
    let m = counts.sample(&mut rng) + 1;
    let a = cfg.attributes;
    let l = cfg.candidates;

    let chosen = sample(&mut rng, a, m).into_vec();
    let clauses: Vec<Clause> = chosen
        .iter()
        .map(|&attribute| Clause {
            attribute,
            positive: !rng.random_bool(cfg.negation_prob),
        })
        .collect();
    let relevant: Vec<bool> = (0..a).map(|i| chosen.contains(&i)).collect();

    let gold = rng.random_range(0..l);
    let mut gold_attrs: Vec<bool> = (0..a).map(|_| rng.random_bool(0.5)).collect();
    for c in &clauses {
        gold_attrs[c.attribute] = c.positive;
    }

    let mut attrs: Vec<Vec<bool>> = Vec::with_capacity(l);
    for slot in 0..l {
        if slot == gold {
            attrs.push(gold_attrs.clone());
            continue;
        }
        let mut tries = 0;
        let candidate = loop {
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Config(format!(
                    "cannot build {l} distinct candidates from {a} attributes with {m} clauses"
                )));
            }
            let mut v: Vec<bool> = (0..a)
                .map(|i| {
                    if relevant[i] {
                        gold_attrs[i]
                    } else {
                        rng.random_bool(0.5)
                    }
                })
                .collect();
            let first = rng.random_range(0..m);
            v[clauses[first].attribute] ^= true;
            if m > 1 && rng.random_bool(cfg.extra_violation_prob) {
                let mut second = rng.random_range(0..m - 1);
                if second >= first {
                    second += 1;
                }
                v[clauses[second].attribute] ^= true;
            }
            if !attrs.contains(&v) && v != gold_attrs {
                break v;
            }
        };
        attrs.push(candidate);
    }
    Ok(RawInstance {
        attrs,
        clauses,
        gold,
        seed,
    })
}

/// Fixed random projections standing in for frozen text, image and
/// cross-modal encoders.
///
/// Attribute rows are orthonormal and live in the first `d - d/4`
/// coordinates. Images use the same rows as the text side. The count codes
/// are orthogonal rows of norm 3 in the last `d/4` coordinates, so the global
/// token keeps the clause count apart from the clause content.
#[derive(Clone, Debug)]
pub struct Encoder {
    /// One row per attribute, `[A, d]`.
    pub clause_dictionary: Tensor<f32>,
    /// Added for positive clauses, subtracted for negated ones.
    pub negation: Vec<f32>,
    /// Image-side attribute embeddings, `[A, d]`. Equal to the dictionary.
    pub image_projector: Tensor<f32>,
    /// Mixes the text-image fusion, `[d, d]`.
    pub cross_mixer: Tensor<f32>,
    /// Global-token signature of the clause count, `[5, d]`.
    pub count_codes: Tensor<f32>,
}

impl Encoder {
    pub fn new(cfg: &GenConfig) -> Self {
        let d = cfg.d;
        let a = cfg.attributes;
        let mut rng = rng_for(cfg.seed, 1);
        let unit = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid");
        let mut draw =
            |n: usize| -> Vec<f32> { (0..n).map(|_| unit.sample(&mut rng) as f32).collect() };
        // The last quarter of the coordinates carries only the count signature.
        let q = d / 4;
        let mut dictionary = draw(a * d);
        let mut negation = draw(d);
        for row in dictionary.chunks_mut(d) {
            row[d - q..].fill(0.0);
        }
        negation[d - q..].fill(0.0);
        orthonormalize(&mut dictionary, d);
        let projector = dictionary.clone();
        let mixer: Vec<f32> = draw(d * d);
        let mut count_codes = draw(5 * d);
        if q > 0 {
            for row in count_codes.chunks_mut(d) {
                row[..d - q].fill(0.0);
            }
        }
        orthonormalize(&mut count_codes, d);
        let code_norm = 3.0;
        for x in &mut count_codes {
            *x *= code_norm;
        }
        Encoder {
            clause_dictionary: Tensor::matrix(a, d, dictionary).expect("shape"),
            negation,
            image_projector: Tensor::matrix(a, d, projector).expect("shape"),
            cross_mixer: Tensor::matrix(d, d, mixer).expect("shape"),
            count_codes: Tensor::matrix(5, d, count_codes).expect("shape"),
        }
    }

    /// Noise-free embedding of one clause.
    pub fn clause_embedding(&self, clause: Clause) -> Vec<f32> {
        let p = clause.polarity() as f32;
        self.clause_dictionary
            .row(clause.attribute)
            .iter()
            .zip(&self.negation)
            .map(|(&e, &n)| e + p * n)
            .collect()
    }
}

/// One encoded retrieval problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `[N + 1, d]`; row 0 is the global token.
    pub text: Tensor<f32>,
    /// `[L, d]` candidate image embeddings.
    pub images: Tensor<f32>,
    /// `[L, d]` compound-text / image fusion embeddings.
    pub cross: Tensor<f32>,
    pub gold: usize,
    /// True number of propositions.
    pub count: usize,
    /// `count x L` clause satisfaction, diagnostic only.
    pub masks: Vec<Vec<bool>>,
    /// Attribute vectors when known (empty for ingested embeddings).
    pub attrs: Vec<Vec<bool>>,
    /// Clauses when known (empty for ingested embeddings).
    pub clauses: Vec<Clause>,
    pub seed: u64,
    pub config_hash: u64,
}

impl Instance {
    pub fn d(&self) -> usize {
        self.images.cols()
    }

    pub fn candidates(&self) -> usize {
        self.images.rows()
    }

    /// Candidates satisfying every mask row.
    pub fn conjunction(&self) -> Vec<usize> {
        (0..self.candidates())
            .filter(|&l| self.masks.iter().all(|row| row[l]))
            .collect()
    }
}

/// Embed a raw instance with the frozen encoders.
pub fn encode(raw: &RawInstance, cfg: &GenConfig, enc: &Encoder) -> Result<Instance> {
    let d = cfg.d;
    let l = raw.attrs.len();
    let m = raw.clauses.len();
    let mut rng = rng_for(raw.seed, 2);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid");
    let mut jitter = |v: &mut [f32]| {
        if cfg.noise > 0.0 {
            for x in v.iter_mut() {
                *x += noise.sample(&mut rng) as f32;
            }
        }
    };

    let clause_rows: Vec<Vec<f32>> = raw
        .clauses
        .iter()
        .map(|&c| enc.clause_embedding(c))
        .collect();
    let mut global = vec![0.0f32; d];
    for row in &clause_rows {
        for (g, &v) in global.iter_mut().zip(row) {
            *g += v / m as f32;
        }
    }
    for (g, &c) in global.iter_mut().zip(enc.count_codes.row(m - 1)) {
        *g += c;
    }
    jitter(&mut global);
    let mut text = global.clone();
    for row in &clause_rows {
        let mut r = row.clone();
        jitter(&mut r);
        text.extend_from_slice(&r);
    }

    let mut images = Vec::with_capacity(l * d);
    for attrs in &raw.attrs {
        let mut row = vec![0.0f32; d];
        for (a, _) in attrs.iter().enumerate().filter(|(_, &on)| on) {
            for (x, &p) in row.iter_mut().zip(enc.image_projector.row(a)) {
                *x += p;
            }
        }
        jitter(&mut row);
        images.extend_from_slice(&row);
    }
    let images = Tensor::matrix(l, d, images)?;

    let mut fused = Vec::with_capacity(l * d);
    for li in 0..l {
        fused.extend(images.row(li).iter().zip(&global).map(|(&x, &t)| x * t));
    }
    let cross = Tensor::matrix(l, d, fused)?.matmul(&enc.cross_mixer)?;

    let inst = Instance {
        text: Tensor::matrix(m + 1, d, text)?,
        images,
        cross,
        gold: raw.gold,
        count: m,
        masks: raw.masks(),
        attrs: raw.attrs.clone(),
        clauses: raw.clauses.clone(),
        seed: raw.seed,
        config_hash: cfg.hash(),
    };
    if !(inst.text.is_finite() && inst.images.is_finite() && inst.cross.is_finite()) {
        return Err(Error::NonFinite { op: "encode" });
    }
    Ok(inst)
}

/// Per-instance seed `index` of a master seed.
pub fn instance_seed(master: u64, index: u64) -> u64 {
    rng_for(master, index.wrapping_add(1 << 32)).next_u64()
}

/// Generate `count` encoded instances. Output order and content depend only
/// on `(master_seed, cfg)`.
pub fn generate_dataset(master_seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let enc = Encoder::new(cfg);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let raw = generate_raw(instance_seed(master_seed, i as u64), cfg)?;
            encode(&raw, cfg, &enc)
        })
        .collect()
}

/// Gram-Schmidt over the rows of a row-major matrix with `d` columns. Rows
/// that fall into the span of earlier ones are only rescaled to unit length.
fn orthonormalize(rows: &mut [f32], d: usize) {
    let n = rows.len() / d;
    for i in 0..n {
        let (done, rest) = rows.split_at_mut(i * d);
        let row = &mut rest[..d];
        let before: f32 = row.iter().map(|x| x * x).sum();
        let mut projected = row.to_vec();
        for prev in done.chunks(d) {
            let p: f32 = projected.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, y) in projected.iter_mut().zip(prev) {
                *x -= p * y;
            }
        }
        let after: f32 = projected.iter().map(|x| x * x).sum();
        if after > 1e-6 * before {
            row.copy_from_slice(&projected);
        }
        let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}
