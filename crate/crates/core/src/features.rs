//! Image-feature preprocessing and the region coding used for abstract scenes.
//!
//! Two region codings are provided and chosen per question type:
//! averaged detector softmax over the top regions (better for yes/no and
//! counting questions) and one-cluster VLAD over PCA-reduced region
//! descriptors with appended box coordinates (better for everything else).

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on a probability vector's total mass.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite { op: "l2_normalize" });
    }
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Mean plus the top-`k` principal directions (rows of `components`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub k: usize,
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, descending.
    pub explained_variance: Vec<f64>,
}

/// Fits PCA by eigendecomposition of the sample covariance of `rows`.
///
/// Components are sorted by descending eigenvalue and each is signed so that
/// its largest-magnitude entry is positive.
pub fn pca_fit(rows: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Invalid(format!("pca needs at least 2 rows, got {n}")));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("pca_fit", &[dim], &[bad.len()]));
    }
    if k == 0 || k > (n - 1).min(dim) {
        return Err(Error::Invalid(format!(
            "pca target dimension {k} must be in 1..={}",
            (n - 1).min(dim)
        )));
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if cov.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("all rows are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() { (i, x) } else { best });
        if pivot.1 < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaModel {
        k,
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `P·(v − μ)`.
    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::shape("pca_transform", &[self.mean.len()], &[v.len()]));
        }
        Ok(self
            .components
            .iter()
            .map(|row| row.iter().zip(v).zip(&self.mean).map(|((p, x), m)| p * (x - m)).sum())
            .collect())
    }

    /// `Pᵀ·y + μ`.
    pub fn inverse_transform(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.k {
            return Err(Error::shape("pca_inverse_transform", &[self.k], &[y.len()]));
        }
        let mut out = self.mean.clone();
        for (row, &yi) in self.components.iter().zip(y) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += yi * p;
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.components.len() != self.k || self.explained_variance.len() != self.k {
            return Err(Error::Invalid("pca model component count does not match k".into()));
        }
        if self.components.iter().any(|c| c.len() != self.mean.len()) {
            return Err(Error::Invalid("pca component length does not match mean".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: PcaModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        model.validate()?;
        Ok(model)
    }
}

/// A detected region: its descriptor, box and the size of its image, all in
/// pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub feature: Vec<f64>,
    /// `(x_min, y_min, x_max, y_max)`.
    pub bbox: [f64; 4],
    /// `(width, height)`.
    pub image_size: [f64; 2],
}

/// `(x_min, y_min, x_max, y_max, x_center, y_center, width, height)`, each
/// divided by the image width or height so every entry lies in `[0, 1]`.
pub fn coordinate_vector(r: &RegionDescriptor) -> Result<[f64; 8]> {
    let [x0, y0, x1, y1] = r.bbox;
    let [w, h] = r.image_size;
    let valid = x0 >= 0.0 && y0 >= 0.0 && x0 < x1 && y0 < y1 && x1 <= w && y1 <= h;
    if !valid {
        return Err(Error::Invalid(format!(
            "bounding box {:?} is not inside a {w}x{h} image",
            r.bbox
        )));
    }
    Ok([
        x0 / w,
        y0 / h,
        x1 / w,
        y1 / h,
        (x0 + x1) / 2.0 / w,
        (y0 + y1) / 2.0 / h,
        (x1 - x0) / w,
        (y1 - y0) / h,
    ])
}

/// PCA-reduced descriptor with its coordinate vector appended.
pub fn region_code(r: &RegionDescriptor, pca: &PcaModel) -> Result<Vec<f64>> {
    let mut code = pca.transform(&r.feature)?;
    code.extend(coordinate_vector(r)?);
    Ok(code)
}

/// The one-cluster k-means center: the mean of all training region codes.
pub fn vlad_center(regions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = regions.first().ok_or(Error::Empty("vlad training regions"))?;
    let mut center = vec![0.0; first.len()];
    for r in regions {
        if r.len() != center.len() {
            return Err(Error::shape("vlad_center", &[center.len()], &[r.len()]));
        }
        for (c, x) in center.iter_mut().zip(r) {
            *c += x;
        }
    }
    center.iter_mut().for_each(|c| *c /= regions.len() as f64);
    Ok(center)
}

/// VLAD with a single cluster: L2-normalized sum of residuals to `center`.
/// Residuals that cancel exactly give the zero vector.
pub fn vlad_one_cluster(regions: &[Vec<f64>], center: &[f64]) -> Result<Vec<f64>> {
    if regions.is_empty() {
        return Err(Error::Empty("vlad regions"));
    }
    let mut raw = vec![0.0; center.len()];
    for r in regions {
        if r.len() != center.len() {
            return Err(Error::shape("vlad_one_cluster", &[center.len()], &[r.len()]));
        }
        for ((acc, x), c) in raw.iter_mut().zip(r).zip(center) {
            *acc += x - c;
        }
    }
    let n = norm(&raw);
    if n > 0.0 {
        raw.iter_mut().for_each(|x| *x /= n);
    }
    Ok(raw)
}

/// Averages per-region detector softmax outputs into one distribution.
/// `expected_count` is the number of regions each image should contribute.
pub fn avg_region_softmax(probs: &[Vec<f64>], expected_count: usize) -> Result<Vec<f64>> {
    let first = probs.first().ok_or(Error::Empty("region softmax list"))?;
    if probs.len() != expected_count {
        return Err(Error::Invalid(format!(
            "expected {expected_count} region distributions, got {}",
            probs.len()
        )));
    }
    let mut mean = vec![0.0; first.len()];
    for (i, p) in probs.iter().enumerate() {
        if p.len() != mean.len() {
            return Err(Error::shape("avg_region_softmax", &[mean.len()], &[p.len()]));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE || p.iter().any(|&x| x < 0.0) {
            return Err(Error::Invalid(format!(
                "region {i} is not a probability distribution (sums to {total})"
            )));
        }
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= probs.len() as f64);
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    YesNo,
    Number,
    Other,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::YesNo => "yes/no",
            QuestionType::Number => "number",
            QuestionType::Other => "other",
        })
    }
}

const NUMBER_PHRASES: [&str; 2] = ["how many", "what number"];
const YES_NO_OPENERS: [&str; 15] = [
    "is", "are", "was", "were", "does", "do", "did", "can", "could", "has", "have", "had", "will", "would",
    "should",
];

/// Key-phrase rules: counting phrases anywhere mean `Number`, an auxiliary
/// verb as the first word means `YesNo`, anything else is `Other`.
pub fn classify_question(text: &str) -> Result<QuestionType> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .collect();
    if text.trim().is_empty() {
        return Err(Error::Empty("question text"));
    }
    let joined = words.join(" ");
    if NUMBER_PHRASES.iter().any(|p| contains_phrase(&joined, p)) {
        return Ok(QuestionType::Number);
    }
    match words.first() {
        Some(w) if YES_NO_OPENERS.contains(w) => Ok(QuestionType::YesNo),
        _ => Ok(QuestionType::Other),
    }
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    haystack == phrase
        || haystack.starts_with(&format!("{phrase} "))
        || haystack.ends_with(&format!(" {phrase}"))
        || haystack.contains(&format!(" {phrase} "))
}

/// Picks the averaged-softmax coding for yes/no and number questions and the
/// VLAD coding otherwise.
pub fn route_features<'a>(qtype: QuestionType, feat_softmax: &'a [f64], feat_vlad: &'a [f64]) -> &'a [f64] {
    match qtype {
        QuestionType::YesNo | QuestionType::Number => feat_softmax,
        QuestionType::Other => feat_vlad,
    }
}
