//! Brute-force metric references shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;

/// Recall@1 in each direction from the definition. Ties go to the lowest index.
pub fn brute_recall(sim: &[f32], nc: usize, ni: usize, truth: &[Vec<usize>]) -> (f64, f64) {
    let mut img_hits = 0;
    for c in 0..nc {
        let mut best = 0;
        for i in 0..ni {
            if sim[c * ni + i] > sim[c * ni + best] {
                best = i;
            }
        }
        if truth[c].contains(&best) {
            img_hits += 1;
        }
    }
    let mut txt_hits = 0;
    for i in 0..ni {
        let mut best = 0;
        for c in 0..nc {
            if sim[c * ni + i] > sim[best * ni + i] {
                best = c;
            }
        }
        if truth[best].contains(&i) {
            txt_hits += 1;
        }
    }
    (img_hits as f64 / nc as f64, txt_hits as f64 / ni as f64)
}

pub fn brute_worst_group(pred: &[usize], labels: &[usize], groups: &[usize], n: usize) -> f64 {
    (0..n)
        .map(|g| {
            let idx: Vec<usize> = (0..pred.len()).filter(|&i| groups[i] == g).collect();
            idx.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / idx.len() as f64
        })
        .fold(1.0, f64::min)
}

/// 10×10 similarity with coarse integer values so ties are common; caption
/// `c` matches every image sharing its label.
pub struct RetrievalCase {
    pub sim: Vec<f32>,
    pub truth: Vec<Vec<usize>>,
}

pub fn retrieval_case<R: Rng>(rng: &mut R) -> RetrievalCase {
    let sim = (0..100).map(|_| rng.random_range(-3i32..4) as f32).collect();
    let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..4)).collect();
    let truth = (0..10).map(|c| (0..10).filter(|&i| labels[i] == labels[c]).collect()).collect();
    RetrievalCase { sim, truth }
}

pub struct GroupCase {
    pub pred: Vec<usize>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

/// 24 samples over 3 classes and 3 groups; the first three pin every group.
pub fn group_case<R: Rng>(rng: &mut R) -> GroupCase {
    let n = 24;
    GroupCase {
        pred: (0..n).map(|_| rng.random_range(0..3)).collect(),
        labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
        groups: (0..n).map(|i| if i < 3 { i } else { rng.random_range(0..3) }).collect(),
    }
}
