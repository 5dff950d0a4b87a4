//! Inference, image/pixel AUROC and the cross-family transfer harness.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::mask::AnomalyMask;
use crate::model::AnomalyModel;
use crate::phantom::{FamilyId, Manifest};
use crate::prompt::TextFeatures;

/// Anomaly map `S_a` and image score `max S_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    pub map: Grid,
    pub score: f64,
}

impl AnomalyResult {
    fn from_map(map: Grid) -> Self {
        let score = map.max();
        Self { map, score }
    }
}

fn check_query(query: &Image, model: &AnomalyModel) -> Result<()> {
    let s = model.image_size();
    if query.height() != s || query.width() != s {
        return Err(Error::Shape(format!(
            "query is {}x{}, model expects {s}x{s}",
            query.height(),
            query.width()
        )));
    }
    Ok(())
}

pub fn infer(query: &Image, model: &AnomalyModel) -> Result<AnomalyResult> {
    check_query(query, model)?;
    Ok(AnomalyResult::from_map(model.anomaly_maps(query)?.anomaly))
}

/// [`infer`] over many queries, sharing one text-encoder pass.
pub fn infer_many(queries: &[Image], model: &AnomalyModel) -> Result<Vec<AnomalyResult>> {
    let text: TextFeatures = model.text_features()?;
    queries
        .par_iter()
        .map(|q| {
            check_query(q, model)?;
            let features = model.encoders().encode_image_multiscale(q)?;
            Ok(AnomalyResult::from_map(
                model.maps_from_features(&features, &text)?.anomaly,
            ))
        })
        .collect()
}

/// Mann–Whitney AUROC: `(#(pos > neg) + ½·#ties) / (n₊·n₋)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut greater, mut ties) = (0u128, 0u128);
    let (mut neg_below, mut n_pos) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        greater += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        n_pos += pos;
        i = j;
    }
    let n_neg = neg_below;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    Ok((2 * greater + ties) as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUROC over the pooled pixels of all images; mask pixels are positives.
pub fn pixel_auroc(maps: &[Grid], masks: &[AnomalyMask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, y) in maps.iter().zip(masks) {
        if m.height() != y.height() || m.width() != y.width() {
            return Err(Error::Shape("map and mask differ in shape".into()));
        }
        scores.extend_from_slice(m.as_slice());
        labels.extend(y.values().iter().map(|&v| v == 1));
    }
    auroc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub image: PathBuf,
    pub anomalous: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train_family: Option<FamilyId>,
    pub test_family: FamilyId,
    pub train_seed: Option<u64>,
    pub test_seed: u64,
    pub encoder_seed: u64,
    pub encoder_digest: String,
    pub trained_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_auroc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_auroc: Option<f64>,
    pub transfer: bool,
    pub provenance: Provenance,
    pub scores: Vec<ScoreEntry>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// What is known about how the evaluated model was trained.
#[derive(Clone, Debug, Default)]
pub struct ModelOrigin {
    pub family: Option<FamilyId>,
    pub seed: Option<u64>,
    pub steps: usize,
    pub config_digest: Option<String>,
}

/// Evaluation output: the report plus the per-image maps.
pub struct Evaluation {
    pub report: EvalReport,
    pub results: Vec<AnomalyResult>,
}

/// Scores the test split of `manifest`. Test images are resized to the
/// encoder input size (bilinear, masks nearest) when their size differs.
/// Pixel AUROC is reported when the split holds at least one mask pixel.
pub fn evaluate(
    model: &AnomalyModel,
    manifest: &Manifest,
    origin: &ModelOrigin,
) -> Result<Evaluation> {
    let size = model.image_size();
    let test = manifest.load_test()?;
    let mut images = Vec::with_capacity(test.len());
    let mut masks = Vec::with_capacity(test.len());
    for (_, img, _, mask) in &test {
        images.push(img.resize_bilinear(size, size)?);
        masks.push(mask.resize_nearest(size, size));
    }
    let results = infer_many(&images, model)?;
    let labels: Vec<bool> = test.iter().map(|t| t.2).collect();
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let pixel = if masks.iter().any(|m| !m.is_empty()) {
        let maps: Vec<Grid> = results.iter().map(|r| r.map.clone()).collect();
        Some(pixel_auroc(&maps, &masks)?)
    } else {
        None
    };
    let transfer = origin.family.is_some_and(|f| f != manifest.family);
    let enc = model.encoders();
    let report = EvalReport {
        image_auroc,
        pixel_auroc: pixel,
        transfer,
        provenance: Provenance {
            train_family: origin.family,
            test_family: manifest.family,
            train_seed: origin.seed,
            test_seed: manifest.seed,
            encoder_seed: enc.seed(),
            encoder_digest: enc.digest().to_string(),
            trained_steps: origin.steps,
            config_digest: origin.config_digest.clone(),
        },
        scores: test
            .iter()
            .zip(&scores)
            .map(|(t, &score)| ScoreEntry {
                image: t.0.clone(),
                anomalous: t.2,
                score,
            })
            .collect(),
    };
    Ok(Evaluation { report, results })
}

/// Transfer evaluation: a model trained on one family scored on another
/// family's test split. Same-family input is evaluated too, with a warning.
pub fn transfer_eval(
    model: &AnomalyModel,
    manifest: &Manifest,
    origin: &ModelOrigin,
) -> Result<Evaluation> {
    if origin.family == Some(manifest.family) {
        log::warn!(
            "transfer evaluation on the training family {}; reporting the diagonal entry",
            manifest.family
        );
    }
    let mut eval = evaluate(model, manifest, origin)?;
    eval.report.transfer = true;
    Ok(eval)
}

/// `S_a` scaled linearly to 8-bit grayscale.
pub fn heatmap(map: &Grid) -> Result<Image> {
    Image::from_grid_clamped(map.clone())
}

/// Writes one heatmap PNG per result, named after the test image.
pub fn write_heatmaps(eval: &Evaluation, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    eval.report
        .scores
        .iter()
        .zip(&eval.results)
        .map(|(entry, r)| {
            let stem = entry
                .image
                .with_extension("")
                .to_string_lossy()
                .replace(['/', '\\'], "_");
            let path = dir.join(format!("{stem}.png"));
            crate::phantom::save_image(&heatmap(&r.map)?, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(
            auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pixel_auroc_examples() {
        let y = AnomalyMask::from_binary(2, 2, vec![1, 0, 0, 1]).unwrap();
        let perfect = y.to_grid();
        assert_eq!(pixel_auroc(&[perfect], &[y.clone()]).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[Grid::filled(2, 2, 0.4)], &[y]).unwrap(), 0.5);
        let empty = AnomalyMask::empty(2, 2);
        assert!(matches!(
            pixel_auroc(&[Grid::zeros(2, 2)], &[empty]),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
