//! Small dense-vector helpers shared by the embedding-space modules.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Returns `None` for the zero vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    (n > 0.0).then(|| a.iter().map(|x| x / n).collect())
}
