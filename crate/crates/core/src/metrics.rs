//! Binary classification scores.

/// Confusion counts for a binary predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (predicted, actual) in pairs {
            c.add(predicted, actual);
        }
        c
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// F1 score; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// F1 between a predicted and a reference set.
pub fn set_f1<T: Ord>(predicted: &alloc::collections::BTreeSet<T>, truth: &alloc::collections::BTreeSet<T>) -> f64 {
    if predicted.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let tp = predicted.intersection(truth).count();
    f1_from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn hand_counted_f1() {
        assert!((f1_from_counts(3, 1, 2) - 6.0 / 9.0).abs() < 1e-12);
        assert_eq!(f1_from_counts(0, 5, 5), 0.0);
        assert_eq!(f1_from_counts(4, 0, 0), 1.0);
    }

    #[test]
    fn set_scores() {
        let a: BTreeSet<u32> = [1, 2, 3].into_iter().collect();
        let b: BTreeSet<u32> = [2, 3, 4, 5].into_iter().collect();
        assert!((set_f1(&a, &b) - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(set_f1(&BTreeSet::<u32>::new(), &BTreeSet::new()), 1.0);
    }
}
