//! Class-level retrieval metrics.
//!
//! A retrieval counts as a hit when the top-ranked item has the query's
//! class. Samples of one class share a template, so instance-level recall
//! would measure pixel noise rather than alignment.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modelzoo::{embed, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamSet;

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Every caption retrieves among all images.
    pub r1_t2i: f64,
    /// Every image retrieves among all captions.
    pub r1_i2t: f64,
    /// Images classified by the nearest mean caption embedding.
    pub prototype_top1: f64,
}

impl RetrievalMetrics {
    /// Mean of both directions; the number compared by the lossless check.
    pub fn r1(&self) -> f64 {
        (self.r1_t2i + self.r1_i2t) / 2.0
    }
}

fn normalize_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    t.data()
        .chunks(t.last_dim())
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the best-scoring candidate; ties go to the lowest index.
fn argmax(query: &[f32], candidates: &[Vec<f32>]) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = dot(query, c);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Metrics from unit-normalizable features.
///
/// `text` holds `captions` consecutive rows per image.
pub fn retrieval_from_features(
    image: &Tensor<f32>,
    text: &Tensor<f32>,
    classes: &[u32],
    n_classes: usize,
) -> Result<RetrievalMetrics> {
    let n = classes.len();
    if n == 0 {
        return Err(Error::Contract("retrieval on an empty split".into()));
    }
    let (img, txt) = (normalize_rows(image), normalize_rows(text));
    if img.len() != n || txt.is_empty() || txt.len() % n != 0 {
        return Err(Error::dim(
            "eval_retrieval",
            format!("{} images and {} captions for {n} samples", img.len(), txt.len()),
        ));
    }
    let m = txt.len() / n;
    let caption_class = |j: usize| classes[j / m];
    let pct = |hits: usize, total: usize| 100.0 * hits as f64 / total as f64;

    let t2i = (0..txt.len()).filter(|&j| classes[argmax(&txt[j], &img)] == caption_class(j)).count();
    let i2t = (0..n).filter(|&i| caption_class(argmax(&img[i], &txt)) == classes[i]).count();

    let d = txt[0].len();
    let mut protos = vec![vec![0.0f32; d]; n_classes];
    for (j, row) in txt.iter().enumerate() {
        let p = &mut protos[caption_class(j) as usize];
        p.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    // Classes absent from the split get a zero prototype that never wins.
    let proto = (0..n).filter(|&i| argmax(&img[i], &protos) as u32 == classes[i]).count();

    Ok(RetrievalMetrics {
        r1_t2i: pct(t2i, txt.len()),
        r1_i2t: pct(i2t, n),
        prototype_top1: pct(proto, n),
    })
}

/// Embeds a split in chunks of `chunk` samples with every caption.
pub fn embed_split(
    params: &ParamSet,
    cfg: &ModelConfig,
    ds: &Dataset,
    chunk: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (mut img, mut txt) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let images = ds.image_tensor(part)?;
        let tokens: Vec<u32> = part
            .iter()
            .flat_map(|&i| (0..ds.spec.captions).flat_map(move |j| ds.caption(i, j).iter().copied()))
            .collect();
        let (v, t) = embed(params, cfg, &images, &tokens)?;
        img.extend_from_slice(v.data());
        txt.extend_from_slice(t.data());
    }
    let e = cfg.embed_dim;
    Ok((
        Tensor::new(vec![ds.len(), e], img)?,
        Tensor::new(vec![ds.len() * ds.spec.captions, e], txt)?,
    ))
}

/// Retrieval metrics of `params` on `ds`.
pub fn eval_retrieval(params: &ParamSet, cfg: &ModelConfig, ds: &Dataset) -> Result<RetrievalMetrics> {
    if ds.is_empty() {
        return Err(Error::Contract("retrieval on an empty split".into()));
    }
    let (img, txt) = embed_split(params, cfg, ds, 128)?;
    retrieval_from_features(&img, &txt, &ds.classes, ds.spec.n_classes)
}
