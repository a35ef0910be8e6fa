use crate::data::{LabelVector, Mask, ScoreMap, ScoreSpace};
use crate::error::{Result, WssError};

/// Per-pixel argmax restricted to classes present in `y`. Ties go to the lowest index.
/// Scores must be probabilities: restricting the argmax is only equivalent to weighting
/// scores by `y` when they are nonnegative.
pub fn constrained_argmax(probs: &ScoreMap, y: &LabelVector) -> Result<Mask> {
    if probs.space != ScoreSpace::Probabilities {
        return Err(WssError::invalid(
            "label-constrained argmax needs probabilities, not logits",
        ));
    }
    if y.len() != probs.classes {
        return Err(WssError::shape(format!(
            "label vector has {} classes, scores have {}",
            y.len(),
            probs.classes
        )));
    }
    if probs.classes > 255 {
        return Err(WssError::invalid("at most 255 classes fit in a mask"));
    }
    let allowed = y.indices();
    let labels = probs
        .data
        .chunks_exact(probs.classes)
        .map(|px| {
            let mut best = allowed[0];
            for &j in &allowed[1..] {
                if px[j] > px[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(probs.height, probs.width, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(data: Vec<f64>, c: usize) -> ScoreMap {
        let n = data.len() / c;
        ScoreMap::from_vec(1, n, c, data, ScoreSpace::Probabilities).unwrap()
    }

    #[test]
    fn all_true_is_plain_argmax() {
        let p = probs(vec![0.1, 0.7, 0.2, 0.5, 0.25, 0.25], 3);
        let m = constrained_argmax(&p, &LabelVector::all(3)).unwrap();
        assert_eq!(m.labels, vec![1, 0]);
    }

    #[test]
    fn excluded_class_never_wins() {
        // bg 0.2, cat 0.5, dog 0.3 with only {bg, dog} allowed
        let p = probs(vec![0.2, 0.5, 0.3], 3);
        let y = LabelVector::from_indices(3, &[2]).unwrap();
        assert_eq!(constrained_argmax(&p, &y).unwrap().labels, vec![2]);
    }

    #[test]
    fn background_only_constraint() {
        let p = probs(vec![0.0, 0.9, 0.1, 0.05, 0.05, 0.9], 3);
        let m = constrained_argmax(&p, &LabelVector::background_only(3)).unwrap();
        assert_eq!(m.labels, vec![0, 0]);
    }

    #[test]
    fn logits_are_rejected() {
        let mut p = probs(vec![0.2, 0.8], 2);
        p.space = ScoreSpace::Logits;
        assert!(constrained_argmax(&p, &LabelVector::all(2)).is_err());
        let p = probs(vec![0.2, 0.8], 2);
        assert!(constrained_argmax(&p, &LabelVector::all(3)).is_err());
    }
}
