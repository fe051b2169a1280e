//! Embedding-space quality: image-text alignment, silhouette and class
//! separation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMetrics {
    pub alignment: f64,
    pub silhouette: f64,
    /// Infinite when classes are distinct points with no spread.
    #[serde(with = "finite_or_null")]
    pub separation: f64,
    /// Samples left out of the silhouette because their class is a singleton.
    pub excluded: usize,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean silhouette coefficient with Euclidean distance. Samples of singleton
/// classes are skipped; the count of skipped samples is returned alongside.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, usize)> {
    if points.len() != labels.len() {
        return Err(LabError::Shape(format!("{} points with {} labels", points.len(), labels.len())));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(LabError::invalid("silhouette needs at least two classes"));
    }
    let mut total = 0.0;
    let mut counted = 0;
    let mut excluded = 0;
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[&own] < 2 {
            excluded += 1;
            continue;
        }
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                *sums.entry(labels[j]).or_default() += dist(p, q);
            }
        }
        let a = sums[&own] / (sizes[&own] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(&l, _)| l != own)
            .map(|(l, s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
        counted += 1;
    }
    if excluded > 0 {
        log::warn!("silhouette: {excluded} samples of singleton classes excluded");
    }
    if counted == 0 {
        return Err(LabError::invalid("every class is a singleton"));
    }
    Ok((total / counted as f64, excluded))
}

/// Alignment with the matching class embedding, silhouette of the image
/// embeddings, and centroid separation relative to within-class spread.
pub fn representation_metrics(
    image_embs: &[Vec<f64>],
    labels: &[usize],
    class_embs: &[Vec<f64>],
) -> Result<RepresentationMetrics> {
    if image_embs.len() != labels.len() {
        return Err(LabError::Shape(format!(
            "{} embeddings with {} labels",
            image_embs.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= class_embs.len()) {
        return Err(LabError::LabelOutOfRange {
            label,
            classes: class_embs.len(),
        });
    }
    let alignment =
        image_embs.iter().zip(labels).map(|(x, &l)| cosine(x, &class_embs[l])).sum::<f64>() / image_embs.len() as f64;
    let (silhouette, excluded) = silhouette(image_embs, labels)?;

    let dim = image_embs[0].len();
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, &l) in image_embs.iter().zip(labels) {
        let entry = centroids.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        for (c, v) in entry.0.iter_mut().zip(x) {
            *c += v;
        }
        entry.1 += 1;
    }
    for (c, n) in centroids.values_mut() {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    let within = image_embs.iter().zip(labels).map(|(x, l)| dist(x, &centroids[l].0)).sum::<f64>()
        / image_embs.len() as f64;
    let cents: Vec<&Vec<f64>> = centroids.values().map(|(c, _)| c).collect();
    let mut between = 0.0;
    let mut pairs = 0;
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            between += dist(cents[i], cents[j]);
            pairs += 1;
        }
    }
    let between = between / pairs as f64;
    let separation = if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        between / within
    };
    Ok(RepresentationMetrics {
        alignment,
        silhouette,
        separation,
        excluded,
    })
}
