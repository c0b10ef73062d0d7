//! Keypoint similarity and average precision over grouping results.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ohgc::GroupingResult;
use crate::scene::{GroundTruthPerson, ResultRecord, Scene};

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 100;

/// Object keypoint similarity of a prediction against one person.
///
/// Averages `exp(−d² / (2·area·(2σ)²))` over the labeled keypoints; a
/// missing predicted keypoint contributes 0.
pub fn oks(pred: &[Option<[f64; 2]>], gt: &GroundTruthPerson, sigmas: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut labeled = 0;
    for (t, kp) in gt.keypoints.iter().enumerate() {
        let Some(kp) = kp.filter(|k| k.visibility > 0) else {
            continue;
        };
        labeled += 1;
        if let Some(Some([x, y])) = pred.get(t) {
            let d2 = (x - kp.x).powi(2) + (y - kp.y).powi(2);
            let k = 2.0 * sigmas[t];
            total += (-d2 / (2.0 * gt.area * k * k)).exp();
        }
    }
    if labeled == 0 {
        return Err(Error::contract(format!(
            "person {} has no labeled keypoints",
            gt.person_id
        )));
    }
    Ok(total / labeled as f64)
}

/// One scored prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub keypoints: Vec<Option<[f64; 2]>>,
    pub score: f64,
}

/// Precision/recall at one OKS threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub threshold: f64,
    pub ap: f64,
    pub max_recall: f64,
    /// Cumulative values in descending score order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub ar50: f64,
    pub ar75: f64,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
    pub curves: Vec<ThresholdCurve>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table of the summary metrics.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AR", self.ar),
            ("AR50", self.ar50),
            ("AR75", self.ar75),
        ];
        let _ = writeln!(out, "{:<6} {:>7}", "metric", "value");
        for (name, v) in rows {
            let _ = writeln!(out, "{name:<6} {v:>7.4}");
        }
        let _ = writeln!(
            out,
            "{} predictions, {} ground-truth persons",
            self.num_predictions, self.num_ground_truth
        );
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates grouping results against the ground truth of `scenes`.
pub fn evaluate(results: &[GroupingResult], scenes: &[Scene], sigmas: &[f64]) -> Result<EvalReport> {
    let preds: Vec<Prediction> = results
        .iter()
        .flat_map(|r| {
            r.persons.iter().map(|p| Prediction {
                image_id: r.image_id,
                keypoints: p.keypoints.clone(),
                score: p.score,
            })
        })
        .collect();
    evaluate_predictions(&preds, scenes, sigmas)
}

/// Evaluates records read back from a results file.
pub fn evaluate_records(records: &[ResultRecord], scenes: &[Scene], sigmas: &[f64]) -> Result<EvalReport> {
    let preds: Vec<Prediction> = records
        .iter()
        .map(|r| Prediction {
            image_id: r.image_id,
            keypoints: r.positions(),
            score: r.score,
        })
        .collect();
    evaluate_predictions(&preds, scenes, sigmas)
}

pub fn evaluate_predictions(preds: &[Prediction], scenes: &[Scene], sigmas: &[f64]) -> Result<EvalReport> {
    let gts: HashMap<u64, Vec<&GroundTruthPerson>> = scenes
        .iter()
        .map(|s| {
            let persons = s
                .gt_persons
                .iter()
                .flatten()
                .filter(|p| p.labeled_count() > 0)
                .collect();
            (s.image_id, persons)
        })
        .collect();
    let total_gt: usize = gts.values().map(Vec::len).sum();

    // per image, predictions by descending score (stable) with their OKS rows
    let mut by_image: Vec<(u64, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for (i, p) in preds.iter().enumerate() {
        if !gts.contains_key(&p.image_id) {
            return Err(Error::contract(format!("unknown image_id {}", p.image_id)));
        }
        let k = *slot.entry(p.image_id).or_insert_with(|| {
            by_image.push((p.image_id, Vec::new()));
            by_image.len() - 1
        });
        by_image[k].1.push(i);
    }

    let thresholds = oks_thresholds();
    // matched[t][i]: prediction i is a true positive at threshold t
    let mut matched = vec![vec![false; preds.len()]; thresholds.len()];
    for (image_id, mut idx) in by_image {
        idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
        let persons = &gts[&image_id];
        let mut table = Vec::with_capacity(idx.len());
        for &i in &idx {
            let row = persons
                .iter()
                .map(|g| oks(&preds[i].keypoints, g, sigmas))
                .collect::<Result<Vec<f64>>>()?;
            table.push(row);
        }
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut taken = vec![false; persons.len()];
            for (r, &i) in idx.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (g, &s) in table[r].iter().enumerate() {
                    if !taken[g] && s >= thr && best.is_none_or(|(_, b)| s > b) {
                        best = Some((g, s));
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                    matched[t][i] = true;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let curves: Vec<ThresholdCurve> = thresholds
        .iter()
        .zip(&matched)
        .map(|(&threshold, hits)| curve(threshold, &order, hits, total_gt))
        .collect();

    let pick = |t: f64, f: fn(&ThresholdCurve) -> f64| {
        curves
            .iter()
            .find(|c| (c.threshold - t).abs() < 1e-9)
            .map_or(0.0, f)
    };
    let mean = |f: fn(&ThresholdCurve) -> f64| curves.iter().map(f).sum::<f64>() / curves.len() as f64;
    Ok(EvalReport {
        ap: mean(|c| c.ap),
        ap50: pick(0.5, |c| c.ap),
        ap75: pick(0.75, |c| c.ap),
        ar: mean(|c| c.max_recall),
        ar50: pick(0.5, |c| c.max_recall),
        ar75: pick(0.75, |c| c.max_recall),
        num_predictions: preds.len(),
        num_ground_truth: total_gt,
        curves,
    })
}

/// Cumulative precision/recall and interpolated AP at one threshold.
///
/// AP averages the precision envelope at recall levels 0.01, 0.02, ..., 1.
fn curve(threshold: f64, order: &[usize], hits: &[bool], total_gt: usize) -> ThresholdCurve {
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if hits[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 });
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    for j in 1..=RECALL_POINTS {
        let level = j as f64 / RECALL_POINTS as f64;
        // first rank reaching the level (guard against float drift)
        let k = recall.partition_point(|&r| r < level - 1e-12);
        if k < envelope.len() {
            ap += envelope[k];
        }
    }
    ThresholdCurve {
        threshold,
        ap: ap / RECALL_POINTS as f64,
        max_recall: recall.last().copied().unwrap_or(0.0),
        precision,
        recall,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GtKeypoint;

    fn person(id: u64, pts: &[(usize, f64, f64)], area: f64) -> GroundTruthPerson {
        let mut keypoints = vec![None; 17];
        for &(t, x, y) in pts {
            keypoints[t] = Some(GtKeypoint { x, y, visibility: 2 });
        }
        GroundTruthPerson {
            person_id: id,
            keypoints,
            area,
        }
    }

    fn as_pred(g: &GroundTruthPerson) -> Vec<Option<[f64; 2]>> {
        g.keypoints.iter().map(|k| k.map(|k| [k.x, k.y])).collect()
    }

    fn scene(gts: Vec<GroundTruthPerson>) -> Scene {
        let mut s = Scene::empty(1, 100, 100, 4);
        s.gt_persons = Some(gts);
        s
    }

    fn sigmas() -> Vec<f64> {
        crate::scene::Skeleton::coco().sigmas()
    }

    #[test]
    fn oks_identity_and_missing() {
        let g = person(1, &[(0, 10.0, 10.0), (5, 20.0, 30.0)], 400.0);
        assert_eq!(oks(&as_pred(&g), &g, &sigmas()).unwrap(), 1.0);
        assert_eq!(oks(&[None; 17], &g, &sigmas()).unwrap(), 0.0);
    }

    #[test]
    fn oks_at_unit_exponent_is_inverse_e() {
        let s = sigmas();
        let area = 900.0;
        let d = (2.0 * area * (2.0 * s[3]).powi(2)).sqrt();
        let g = person(1, &[(3, 50.0, 50.0)], area);
        let mut p = vec![None; 17];
        p[3] = Some([50.0 + d, 50.0]);
        assert!((oks(&p, &g, &s).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn oks_needs_labels() {
        let g = person(1, &[], 10.0);
        assert!(matches!(oks(&[None; 17], &g, &sigmas()), Err(Error::Contract(_))));
    }

    #[test]
    fn perfect_single_prediction() {
        let g = person(1, &[(0, 10.0, 10.0), (1, 12.0, 9.0)], 100.0);
        let pred = Prediction {
            image_id: 1,
            keypoints: as_pred(&g),
            score: 0.9,
        };
        let r = evaluate_predictions(&[pred], &[scene(vec![g])], &sigmas()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75, r.ar), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions() {
        let g = person(1, &[(0, 10.0, 10.0)], 100.0);
        let r = evaluate_predictions(&[], &[scene(vec![g])], &sigmas()).unwrap();
        assert_eq!((r.ap, r.ar), (0.0, 0.0));
    }

    #[test]
    fn half_recall() {
        let a = person(1, &[(0, 10.0, 10.0)], 100.0);
        let b = person(2, &[(0, 80.0, 80.0)], 100.0);
        let pred = Prediction {
            image_id: 1,
            keypoints: as_pred(&a),
            score: 1.0,
        };
        let r = evaluate_predictions(&[pred], &[scene(vec![a, b])], &sigmas()).unwrap();
        for c in &r.curves {
            assert_eq!(c.ap, 0.5);
            assert_eq!(c.max_recall, 0.5);
        }
        assert_eq!(r.ap, 0.5);
    }

    #[test]
    fn unknown_image_is_rejected() {
        let pred = Prediction {
            image_id: 7,
            keypoints: vec![None; 17],
            score: 1.0,
        };
        assert!(evaluate_predictions(&[pred], &[scene(vec![])], &sigmas()).is_err());
    }

    #[test]
    fn table_lists_metrics() {
        let r = evaluate_predictions(&[], &[scene(vec![])], &sigmas()).unwrap();
        let t = r.table();
        assert!(t.contains("AP50") && t.contains("AR75"));
    }
}
