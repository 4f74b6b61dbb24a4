use serde::Serialize;

/// Confusion counts and F1 for binary match prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
    #[serde(skip)]
    pub per_example_correct: Vec<bool>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Metrics for 0/1 predictions against 0/1 labels, in input order.
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Self {
        assert_eq!(predicted.len(), labels.len(), "one prediction per label");
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        let mut per_example_correct = Vec::with_capacity(labels.len());
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p == 1, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
            per_example_correct.push((p == 1) == (y == 1));
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            n: labels.len(),
            per_example_correct,
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.n)
    }
}

/// Predicted label for `p(match)`: a match only when strictly above 0.5.
pub fn decide(p_match: f64) -> u8 {
    u8::from(p_match > 0.5)
}
