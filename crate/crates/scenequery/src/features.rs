//! Feature extraction for distilled-model UDFs.
//!
//! Attribute units embed the object crop plus the class name. Relationship
//! units embed the pair patch (red subject, blue target), the patch masked to
//! the subject, the patch masked to the target, and both class names.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenequery_core::dsl::Arity;
use scenequery_core::scene::{ObjectId, ObjectView, VideoId};
use scenequery_core::{BBox, TupleView};

use crate::storage::{ImageSource, Mask};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FeatureError {
    #[error("extractor {extractor} needs frame pixels: {message}")]
    Pixels { extractor: String, message: String },
    #[error("no feature extractor registered as {0:?}")]
    Unknown(String),
}

/// One patch of a unit's frame to embed.
pub struct Patch<'a> {
    pub tuple: &'a TupleView<'a>,
    pub mask: Mask,
    pub images: Option<&'a dyn ImageSource>,
}

impl Patch<'_> {
    /// Boxes in drawing order: subject first.
    pub fn boxes(&self) -> Vec<BBox> {
        let mut b = vec![self.tuple.o0.bbox];
        if let Some(o1) = &self.tuple.o1 {
            b.push(o1.bbox);
        }
        b
    }

    /// Whether the pair overlays are drawn (unmasked relationship patches).
    pub fn overlay(&self) -> bool {
        self.tuple.o1.is_some() && self.mask == Mask::None
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn image_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    fn embed_image(&self, patch: &Patch<'_>) -> Result<Vec<f64>, FeatureError>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

pub fn feature_dim(extractor: &dyn FeatureExtractor, arity: Arity) -> usize {
    match arity {
        Arity::Unary => extractor.image_dim() + extractor.text_dim(),
        Arity::Binary => 3 * extractor.image_dim() + 2 * extractor.text_dim(),
    }
}

pub fn build_features(
    tuple: &TupleView<'_>,
    extractor: &dyn FeatureExtractor,
    images: Option<&dyn ImageSource>,
) -> Result<Vec<f64>, FeatureError> {
    let patch = |mask| Patch { tuple, mask, images };
    let mut out = extractor.embed_image(&patch(Mask::None))?;
    match &tuple.o1 {
        None => out.extend(extractor.embed_text(tuple.o0.oname)),
        Some(o1) => {
            out.extend(extractor.embed_image(&patch(Mask::KeepFirst))?);
            out.extend(extractor.embed_image(&patch(Mask::KeepSecond))?);
            out.extend(extractor.embed_text(tuple.o0.oname));
            out.extend(extractor.embed_text(o1.oname));
        }
    }
    Ok(out)
}

/// Extractors by id.
#[derive(Clone, Default)]
pub struct ExtractorSet(BTreeMap<String, Arc<dyn FeatureExtractor>>);

impl ExtractorSet {
    pub fn with(mut self, e: Arc<dyn FeatureExtractor>) -> Self {
        self.0.insert(e.id().to_string(), e);
        self
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn FeatureExtractor>, FeatureError> {
        self.0.get(id).ok_or_else(|| FeatureError::Unknown(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// 64-bit FNV-1a, used to derive stable per-token seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn direction(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key.as_bytes()));
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub const SYNTHETIC_ID: &str = "synthetic-v1";

/// Deterministic stand-in for a pretrained vision encoder.
///
/// A patch embedding is the normalized sum of seeded token directions: the
/// class name and latent concept tokens of every visible object, and its
/// centroid and size quantized to 1/32 of the frame. Objects inside the
/// red/blue overlays use role-specific tokens; masked patches show a single
/// object with neutral tokens. No pixels are read.
#[derive(Clone, Debug)]
pub struct SyntheticExtractor {
    seed: u64,
    image_dim: usize,
    text_dim: usize,
    latents: BTreeMap<(VideoId, ObjectId), Vec<String>>,
}

impl SyntheticExtractor {
    pub fn new(seed: u64, latents: BTreeMap<(VideoId, ObjectId), Vec<String>>) -> Self {
        Self { seed, image_dim: 16, text_dim: 8, latents }
    }

    fn add_object(&self, acc: &mut [f64], role: &str, o: &ObjectView<'_>, vid: VideoId, w: u32, h: u32) {
        let d = self.image_dim;
        let mut add = |key: String, scale: f64| {
            for (a, x) in acc.iter_mut().zip(direction(self.seed, &key, d)) {
                *a += scale * x;
            }
        };
        add(format!("{role}:oname:{}", o.oname), 1.0);
        if let Some(tokens) = self.latents.get(&(vid, o.oid)) {
            for t in tokens {
                add(format!("{role}:latent:{t}"), 1.0);
            }
        }
        let q = |v: f64| (v * 32.0).round() / 32.0;
        let (cx, cy) = o.bbox.centroid();
        add(format!("{role}:cx"), q(cx / w as f64) * 0.5);
        add(format!("{role}:cy"), q(cy / h as f64) * 0.5);
        add(format!("{role}:size"), q((o.bbox.width() * o.bbox.height()) as f64 / (w * h) as f64) * 0.5);
    }
}

impl FeatureExtractor for SyntheticExtractor {
    fn id(&self) -> &str {
        SYNTHETIC_ID
    }

    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn embed_image(&self, patch: &Patch<'_>) -> Result<Vec<f64>, FeatureError> {
        let t = patch.tuple;
        let vid = t.unit.vid;
        let mut acc = vec![0.0; self.image_dim];
        match (patch.mask, &t.o1) {
            (Mask::None, None) => self.add_object(&mut acc, "object", &t.o0, vid, t.width, t.height),
            (Mask::None, Some(o1)) => {
                self.add_object(&mut acc, "red", &t.o0, vid, t.width, t.height);
                self.add_object(&mut acc, "blue", o1, vid, t.width, t.height);
            }
            (Mask::KeepFirst, _) => self.add_object(&mut acc, "object", &t.o0, vid, t.width, t.height),
            (Mask::KeepSecond, Some(o1)) => self.add_object(&mut acc, "object", o1, vid, t.width, t.height),
            (Mask::KeepSecond, None) => {}
        }
        Ok(normalize(acc))
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        normalize(direction(self.seed, &format!("text:{text}"), self.text_dim))
    }
}

pub const MEAN_COLOR_ID: &str = "mean-color-v1";

/// Pixel-reading extractor: mean and spread of each colour channel over the
/// patch, after masking and overlays.
#[derive(Clone, Debug, Default)]
pub struct MeanColorExtractor;

impl FeatureExtractor for MeanColorExtractor {
    fn id(&self) -> &str {
        MEAN_COLOR_ID
    }

    fn image_dim(&self) -> usize {
        6
    }

    fn text_dim(&self) -> usize {
        4
    }

    fn embed_image(&self, patch: &Patch<'_>) -> Result<Vec<f64>, FeatureError> {
        let err = |message: String| FeatureError::Pixels { extractor: MEAN_COLOR_ID.into(), message };
        let images = patch.images.ok_or_else(|| err("no image source".into()))?;
        let frame = images.frame_image(patch.tuple.unit.vid, patch.tuple.unit.fid).map_err(|e| err(e.to_string()))?;
        let img = crate::storage::frame_patch(&frame, &patch.boxes(), patch.overlay(), patch.mask)
            .map_err(|e| err(e.to_string()))?;
        let n = (img.width() * img.height()) as f64;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for p in img.pixels() {
            for c in 0..3 {
                let v = p.0[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let mut out = Vec::with_capacity(6);
        for c in 0..3 {
            let mean = sum[c] / n;
            out.push(mean);
            out.push((sq[c] / n - mean * mean).max(0.0).sqrt());
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        normalize(direction(0, &format!("text:{text}"), 4))
    }
}
