use super::{cell_targets, AdaptationError, DetectorModel};
use crate::dataset::TargetSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` for a class with no positive cell.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes that have positives.
    pub map: f64,
}

/// All-points interpolated average precision of `scores` against binary
/// `labels`. Tied scores enter the ranking as one group. `None` when there
/// are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // (recall, precision) after each tie group
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }

    // precision envelope: best precision at any equal or higher recall
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Cell-level AP per class on the target set, scoring each cell by its
/// predicted class probability.
pub fn evaluate(model: &DetectorModel, target: &TargetSet) -> Result<EvalReport, AdaptationError> {
    if target.is_empty() {
        return Err(AdaptationError::EmptyEvaluation);
    }
    let annotations = target.annotations.reveal();
    let k = model.num_classes();
    let mut scores = vec![Vec::new(); k];
    let mut labels = vec![Vec::new(); k];
    for (image, anno) in target.images.iter().zip(annotations) {
        let probs = model.predict(image)?;
        let truth = cell_targets(model.grid_size(), k, anno)?;
        for (row, &t) in probs.data().chunks(k + 1).zip(&truth) {
            for c in 0..k {
                scores[c].push(row[c]);
                labels[c].push(t == c);
            }
        }
    }
    let per_class: Vec<Option<f64>> = scores
        .iter()
        .zip(&labels)
        .map(|(s, l)| average_precision(s, l))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(AdaptationError::NoPositives);
    }
    Ok(EvalReport {
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}
