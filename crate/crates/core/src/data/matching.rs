use crate::tensor::Tensor;

/// Optimal cluster-to-class assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `permutation[cluster] = class`
    pub permutation: Vec<usize>,
    pub matched: f64,
    pub accuracy: f64,
}

/// `confusion[cluster][class]` counts; rows are predictions.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], k: usize) -> Tensor {
    let mut c = Tensor::zeros(&[k, k]);
    for (&p, &t) in predicted.iter().zip(truth) {
        c.set(p, t, c.get(p, t) + 1.0);
    }
    c
}

/// One-to-one assignment maximizing matched counts (Hungarian algorithm).
pub fn match_clusters_to_classes(confusion: &Tensor) -> Matching {
    let n = confusion.rows();
    assert_eq!(n, confusion.cols(), "confusion matrix must be square");
    let total = confusion.sum();
    if n == 0 {
        return Matching {
            permutation: vec![],
            matched: 0.0,
            accuracy: 0.0,
        };
    }
    let top = confusion.max_abs();
    let cost = |i: usize, j: usize| top - confusion.get(i - 1, j - 1);

    // shortest augmenting paths with potentials, 1-based with a sentinel column 0
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[p[j] - 1] = j - 1;
    }
    let matched: f64 = permutation.iter().enumerate().map(|(i, &j)| confusion.get(i, j)).sum();
    Matching {
        permutation,
        matched,
        accuracy: if total > 0.0 { matched / total } else { 0.0 },
    }
}
