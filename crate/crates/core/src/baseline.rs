//! TF-IDF unigram features with a Pegasos-trained linear SVM.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, confusion};

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const DEFAULT_EPOCHS: usize = 20;

/// Sparse vector as `(feature index, value)` pairs in increasing index order.
pub type SparseVec = Vec<(usize, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    /// Terms in first-occurrence order; a term's position is its feature index.
    pub terms: Vec<String>,
    pub idf: Vec<f64>,
    pub n_docs_fitted: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TfIdfModel {
    pub fn num_features(&self) -> usize {
        self.terms.len()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        if self.index.len() == self.terms.len() {
            self.index.get(term).copied()
        } else {
            self.terms.iter().position(|t| t == term)
        }
    }

    fn rebuild_index(&mut self) {
        self.index = self.terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

/// `idf(t) = ln((1+N)/(1+df(t))) + 1` over whitespace-separated terms.
pub fn fit_tfidf<S: AsRef<str>>(docs: &[S]) -> Result<TfIdfModel> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut terms = Vec::new();
    let mut df: Vec<usize> = Vec::new();
    let mut last_doc: Vec<usize> = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for tok in doc.as_ref().split_whitespace() {
            let i = *index.entry(tok.to_string()).or_insert_with(|| {
                terms.push(tok.to_string());
                df.push(0);
                last_doc.push(usize::MAX);
                terms.len() - 1
            });
            if last_doc[i] != d {
                last_doc[i] = d;
                df[i] += 1;
            }
        }
    }
    let n = docs.len() as f64;
    let idf = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
    Ok(TfIdfModel { terms, idf, n_docs_fitted: docs.len(), index })
}

/// Raw term counts times idf, L2-normalized when nonzero.
pub fn transform(model: &TfIdfModel, doc: &str) -> SparseVec {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for tok in doc.split_whitespace() {
        if let Some(i) = model.index_of(tok) {
            *counts.entry(i).or_insert(0.0) += 1.0;
        }
    }
    let mut v: SparseVec = counts.into_iter().map(|(i, tf)| (i, tf * model.idf[i])).collect();
    v.sort_unstable_by_key(|&(i, _)| i);
    let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, x) in &mut v {
            *x /= norm;
        }
    }
    v
}

pub fn transform_all<S: AsRef<str>>(model: &TfIdfModel, docs: &[S]) -> Vec<SparseVec> {
    docs.iter().map(|d| transform(model, d.as_ref())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub epochs_trained: usize,
}

impl LsvmModel {
    pub fn decision(&self, x: &[(usize, f64)]) -> f64 {
        x.iter()
            .map(|&(i, v)| self.weights.get(i).copied().unwrap_or(0.0) * v)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[(usize, f64)]) -> u8 {
        u8::from(self.decision(x) >= 0.0)
    }

    /// Hard predictions as 0/1 scores, for use with the 0.5-threshold metrics.
    pub fn scores(&self, xs: &[SparseVec]) -> Vec<f64> {
        xs.iter().map(|x| f64::from(self.predict(x))).collect()
    }
}

fn validate_labels(xs: &[SparseVec], ys: &[u8]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("{} examples for {} labels", xs.len(), ys.len())));
    }
    if let Some(bad) = ys.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label must be 0 or 1, got {bad}")));
    }
    if !(ys.contains(&0) && ys.contains(&1)) {
        return Err(Error::Data("linear SVM needs at least one example of each class".into()));
    }
    Ok(())
}

/// Pegasos on `hinge + (λ/2)‖w‖²` with step `1/(λt)`.
///
/// The bias is an unregularized intercept: it takes the same subgradient
/// steps but is never shrunk. `t` counts updates across epochs starting at 1.
/// Each epoch visits the examples in an order shuffled by `(seed, epoch)`.
pub fn train_lsvm(
    xs: &[SparseVec],
    ys: &[u8],
    num_features: usize,
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<LsvmModel> {
    validate_labels(xs, ys)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
    }
    if let Some(&(i, _)) = xs.iter().flatten().find(|&&(i, _)| i >= num_features) {
        return Err(Error::TokenOutOfRange { id: i, size: num_features });
    }
    let mut model = LsvmModel { weights: vec![0.0; num_features], bias: 0.0, lambda, epochs_trained: 0 };
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut t: u64 = 0;
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for &k in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let y = if ys[k] == 1 { 1.0 } else { -1.0 };
            let margin = y * model.decision(&xs[k]);
            let shrink = 1.0 - eta * lambda;
            for w in &mut model.weights {
                *w *= shrink;
            }
            if margin < 1.0 {
                for &(i, v) in &xs[k] {
                    model.weights[i] += eta * y * v;
                }
                model.bias += eta * y;
            }
        }
        model.epochs_trained += 1;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub model: LsvmModel,
    pub lambda: f64,
    pub val_f1: f64,
    /// `(lambda, validation F1)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the lambda with the highest validation F1; ties go to the larger lambda.
#[allow(clippy::too_many_arguments)]
pub fn tune_lsvm(
    train: (&[SparseVec], &[u8]),
    val: (&[SparseVec], &[u8]),
    num_features: usize,
    grid: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let mut best: Option<TuneResult> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for (gi, &lambda) in grid.iter().enumerate() {
        let model = train_lsvm(train.0, train.1, num_features, lambda, epochs, seed ^ (gi as u64) << 32)?;
        let c = confusion(&model.scores(val.0), val.1, 0.5)?;
        let f1 = classification_metrics(&c).f1;
        scores.push((lambda, f1));
        let better = match &best {
            None => true,
            Some(b) => f1 > b.val_f1 || (f1 == b.val_f1 && lambda > b.lambda),
        };
        if better {
            best = Some(TuneResult { model, lambda, val_f1: f1, scores: Vec::new() });
        }
    }
    let mut best = best.expect("grid is non-empty");
    best.scores = scores;
    Ok(best)
}

/// A fitted vectorizer and classifier, serialized together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub tfidf: TfIdfModel,
    pub svm: LsvmModel,
}

impl BaselineModel {
    pub fn predict_scores<S: AsRef<str>>(&self, docs: &[S]) -> Vec<f64> {
        self.svm.scores(&transform_all(&self.tfidf, docs))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: Self = serde_json::from_str(text)?;
        if m.tfidf.idf.len() != m.tfidf.terms.len() || m.svm.weights.len() != m.tfidf.terms.len() {
            return Err(Error::Data("baseline model lengths disagree".into()));
        }
        m.tfidf.rebuild_index();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_document_idf_is_one() {
        let m = fit_tfidf(&["x y x"]).unwrap();
        assert_eq!(m.terms, vec!["x", "y"]);
        assert_eq!(m.idf, vec![1.0, 1.0]);
        assert!(fit_tfidf::<&str>(&[]).is_err());
    }

    #[test]
    fn two_document_hand_values() {
        let m = fit_tfidf(&["a b", "a"]).unwrap();
        assert_eq!(m.idf[0], 1.0);
        assert_eq!(m.idf[1], (1.5f64).ln() + 1.0);
        // "a b b c": tf(a)=1, tf(b)=2, c unknown.
        let v = transform(&m, "a b b c");
        let (wa, wb) = (1.0, 2.0 * ((1.5f64).ln() + 1.0));
        let norm = (wa * wa + wb * wb).sqrt();
        assert_eq!(v.len(), 2);
        assert!((v[0].1 - wa / norm).abs() < 1e-15);
        assert!((v[1].1 - wb / norm).abs() < 1e-15);
        assert!(transform(&m, "zzz").is_empty());
    }

    #[test]
    fn single_class_is_rejected() {
        let xs = vec![vec![(0, 0.6), (1, 0.8)], vec![(1, 1.0)]];
        assert!(train_lsvm(&xs, &[1, 1], 2, 0.5, 1, 0).is_err());
        assert!(train_lsvm(&xs, &[1, 0], 1, 0.5, 1, 0).is_err());
        assert!(train_lsvm(&xs, &[1, 0], 2, 0.0, 1, 0).is_err());
    }

    #[test]
    fn first_step_from_zero() {
        let xs = vec![vec![(0, 1.0)], vec![(0, -1.0)]];
        let m = train_lsvm(&xs, &[1, 0], 1, 0.25, 1, 11).unwrap();
        // Whichever example comes first, step 1 sets w = y·x/λ = 4 and b = y/λ.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(0);
        let mut order = vec![0usize, 1];
        order.shuffle(&mut rng);
        let first = order[0];
        let y = if first == 0 { 1.0 } else { -1.0 };
        let (w1, b1) = (y * xs[first][0].1 / 0.25, y / 0.25);
        assert_eq!(w1, 4.0);
        // Step 2 at η = 1/(λ·2): shrink w by ½, then the other example, margin y₂(w1·x₂+b1).
        let second = order[1];
        let y2 = -y;
        let margin = y2 * (w1 * xs[second][0].1 + b1);
        let (mut w2, mut b2) = (w1 * 0.5, b1);
        if margin < 1.0 {
            w2 += 2.0 * y2 * xs[second][0].1;
            b2 += 2.0 * y2;
        }
        assert_eq!(m.weights, vec![w2]);
        assert_eq!(m.bias, b2);
    }

    #[test]
    fn separable_sign_case() {
        let xs = vec![vec![(0, -1.0)], vec![(0, 1.0)]];
        let m = train_lsvm(&xs, &[0, 1], 1, 0.1, 50, 1).unwrap();
        assert!(m.weights[0] > 0.0);
        assert_eq!(m.predict(&xs[0]), 0);
        assert_eq!(m.predict(&xs[1]), 1);
        assert_eq!(train_lsvm(&xs, &[0, 1], 1, 0.1, 50, 1).unwrap(), m);
    }

    #[test]
    fn tuning_rules() {
        let xs = vec![vec![(0, -1.0)], vec![(0, 1.0)]];
        let ys = [0, 1];
        let one = tune_lsvm((&xs, &ys), (&xs, &ys), 1, &[0.3], 10, 0).unwrap();
        assert_eq!(one.lambda, 0.3);
        let two = tune_lsvm((&xs, &ys), (&xs, &ys), 1, &[0.01, 0.1], 10, 0).unwrap();
        assert_eq!(two.scores.len(), 2);
        assert_eq!(two.scores[0].1, two.scores[1].1);
        assert_eq!(two.lambda, 0.1);
        assert_eq!(two.val_f1, 1.0);
        assert!(tune_lsvm((&xs, &ys), (&xs, &ys), 1, &[], 10, 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let docs = ["good news today", "fake claim spreads"];
        let tfidf = fit_tfidf(&docs).unwrap();
        let xs = transform_all(&tfidf, &docs);
        let svm = train_lsvm(&xs, &[0, 1], tfidf.num_features(), 0.1, 5, 2).unwrap();
        let m = BaselineModel { tfidf, svm };
        let back = BaselineModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.predict_scores(&docs), m.predict_scores(&docs));
        assert_eq!(back.tfidf.index_of("claim"), Some(4));
    }
}
