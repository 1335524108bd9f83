//! Classification metrics, run comparisons and token-feature analyses.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{patch_batch, Backbone};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::skelmap::TokenSkeletonMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub samples: usize,
    pub top1: f64,
    /// Mean recall over classes present in the split.
    pub mca: f64,
    /// `confusion[true][pred]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes with no samples.
    pub per_class_recall: Vec<Option<f64>>,
    pub absent_classes: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Contract("labels and predictions differ in length".into()));
        }
        if labels.is_empty() {
            return Err(Error::Contract("no samples to evaluate".into()));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            if l >= num_classes || p >= num_classes {
                return Err(Error::Contract(format!("class index outside 0..{num_classes}")));
            }
            confusion[l][p] += 1;
        }
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
        Ok(Self {
            num_classes,
            samples: labels.len(),
            top1: correct as f64 / labels.len() as f64,
            mca: present.iter().sum::<f64>() / present.len() as f64,
            absent_classes: (0..num_classes).filter(|&c| per_class_recall[c].is_none()).collect(),
            confusion,
            per_class_recall,
        })
    }

    pub fn from_logits(labels: &[usize], logits: &[Vec<f32>], num_classes: usize) -> Result<Self> {
        let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        Self::from_predictions(labels, &preds, num_classes)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = format!("top-1 {:.4}   mCA {:.4}   samples {}\n", self.top1, self.mca, self.samples);
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        out.push_str(&format!("{:>6} {:>7} |", "class", "recall"));
        for c in 0..self.num_classes {
            out.push_str(&format!(" {c:>width$}"));
        }
        out.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            let recall = self.per_class_recall[c].map_or("-".to_string(), |r| format!("{r:.4}"));
            out.push_str(&format!("{c:>6} {recall:>7} |"));
            for v in row {
                out.push_str(&format!(" {v:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: usize,
    pub logits: Vec<f32>,
}

/// Logits of `backbone` for each sample, in order.
pub fn predict(backbone: &Backbone, samples: &[&LabeledSample], dtype: DType, batch: usize) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let clips: Vec<_> = chunk.iter().map(|s| &s.clip).collect();
        let logits = backbone.logits(&patch_batch(&clips, backbone.config(), dtype)?)?;
        let rows = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (s, l) in chunk.iter().zip(rows) {
            out.push(PredictionRecord {
                id: s.clip.id.clone(),
                label: s.clip.label,
                logits: l,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(backbone: &Backbone, samples: &[&LabeledSample], dtype: DType) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let records = predict(backbone, samples, dtype, 32)?;
    let report = report_for(&records, backbone.config().num_classes)?;
    Ok((report, records))
}

pub fn report_for(records: &[PredictionRecord], num_classes: usize) -> Result<EvalReport> {
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let logits: Vec<Vec<f32>> = records.iter().map(|r| r.logits.clone()).collect();
    EvalReport::from_logits(&labels, &logits, num_classes)
}

/// One JSON line per record.
pub fn write_predictions(out: &mut dyn Write, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        writeln!(out).map_err(|e| Error::io(Path::new("<predictions>"), e))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairImprovement {
    pub actual: usize,
    pub predicted: usize,
    /// Drop in `actual -> predicted` confusions from run A to run B.
    pub improvement: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    /// Recall of B minus recall of A, largest first.
    pub class_deltas: Vec<ClassDelta>,
    /// Off-diagonal pairs, largest improvement first.
    pub pair_improvements: Vec<PairImprovement>,
}

impl RunComparison {
    pub fn top_pairs(&self, k: usize) -> &[PairImprovement] {
        &self.pair_improvements[..k.min(self.pair_improvements.len())]
    }
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<RunComparison> {
    if a.num_classes != b.num_classes {
        return Err(Error::Contract("reports cover different class sets".into()));
    }
    let c_n = a.num_classes;
    let mut class_deltas: Vec<ClassDelta> = (0..c_n)
        .filter_map(|c| match (a.per_class_recall[c], b.per_class_recall[c]) {
            (Some(x), Some(y)) => Some(ClassDelta { class: c, delta: y - x }),
            _ => None,
        })
        .collect();
    class_deltas.sort_by(|x, y| y.delta.total_cmp(&x.delta).then(x.class.cmp(&y.class)));
    let mut pair_improvements: Vec<PairImprovement> = (0..c_n)
        .flat_map(|i| (0..c_n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| PairImprovement {
            actual: i,
            predicted: j,
            improvement: a.confusion[i][j] as i64 - b.confusion[i][j] as i64,
        })
        .collect();
    pair_improvements.sort_by(|x, y| {
        y.improvement
            .cmp(&x.improvement)
            .then((x.actual, x.predicted).cmp(&(y.actual, y.predicted)))
    });
    Ok(RunComparison {
        class_deltas,
        pair_improvements,
    })
}

/// Mean Euclidean distance over all pairs of `rows` of a `(n, d)` tensor.
pub fn mean_pairwise_distance(features: &Tensor) -> Result<f64> {
    let n = features.dim(0)?;
    if n < 2 {
        return Ok(0.0);
    }
    let rows = features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// For each layer `1..=L`, the mean distance between joint-bearing patch
/// tokens of a clip, averaged over clips with at least two such tokens.
pub fn joint_token_distance_profile(
    backbone: &Backbone,
    samples: &[&LabeledSample],
    maps: &[&TokenSkeletonMap],
    dtype: DType,
) -> Result<Vec<f64>> {
    if samples.len() != maps.len() {
        return Err(Error::Contract("one map per sample is required".into()));
    }
    let depth = backbone.config().depth;
    let layers: Vec<usize> = (1..=depth).collect();
    let mut sums = vec![0.0; depth];
    let mut counted = 0usize;
    for (s, map) in samples.iter().zip(maps) {
        let occupied: Vec<u32> = map.occupied_tokens().into_iter().map(|t| t as u32).collect();
        if occupied.len() < 2 {
            continue;
        }
        let patches = patch_batch(&[&s.clip], backbone.config(), dtype)?;
        let out = backbone.forward_with_taps(&patches, &layers, &[])?;
        let idx = Tensor::new(occupied.as_slice(), patches.device())?;
        for (l, sum) in layers.iter().zip(sums.iter_mut()) {
            let rows = out.taps[l].patch_tokens()?.squeeze(0)?.index_select(&idx, 0)?;
            *sum += mean_pairwise_distance(&rows)?;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data {
            sample: "<all>".into(),
            msg: "no clip has two joint-bearing tokens".into(),
        });
    }
    Ok(sums.into_iter().map(|v| v / counted as f64).collect())
}

/// Area under the ROC curve of `scores` for binary `labels`, ties averaged.
pub fn presence_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]]).count() as f64 * mid_rank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn mca_of_unequal_recalls() {
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0, 0, 1, 0], 2).unwrap();
        assert_eq!((r.mca, r.top1), (0.75, 0.75));
        let perfect = EvalReport::from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((perfect.top1, perfect.mca), (1.0, 1.0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let r = EvalReport::from_predictions(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.absent_classes, vec![1]);
        assert_eq!(r.per_class_recall[1], None);
        assert!((r.mca - 0.75).abs() < 1e-15);
        assert!(r.to_table().contains("mCA 0.7500"));
    }

    #[test]
    fn pair_improvement_counts() {
        let a = EvalReport::from_predictions(&[0, 0, 0, 1], &[1, 1, 1, 1], 2).unwrap();
        let b = EvalReport::from_predictions(&[0, 0, 0, 1], &[0, 0, 0, 1], 2).unwrap();
        let cmp = compare_runs(&a, &b).unwrap();
        assert_eq!(cmp.top_pairs(1)[0], PairImprovement { actual: 0, predicted: 1, improvement: 3 });
        assert_eq!(cmp.class_deltas[0], ClassDelta { class: 0, delta: 1.0 });
        let same = compare_runs(&a, &a).unwrap();
        assert!(same.class_deltas.iter().all(|d| d.delta == 0.0));
    }

    #[test]
    fn auc_edges() {
        assert_eq!(presence_auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(presence_auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(presence_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        let x = Tensor::ones((4, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(mean_pairwise_distance(&x).unwrap(), 0.0);
        let y = Tensor::new(&[[0f64, 0.], [3., 4.]], &Device::Cpu).unwrap();
        assert!((mean_pairwise_distance(&y).unwrap() - 5.0).abs() < 1e-12);
    }
}
