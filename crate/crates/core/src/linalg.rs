//! Small dense vector helpers. Iterates are short `Vec<f64>`s, so nothing
//! heavier is needed outside the Newton solve.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

/// Componentwise mean of equally sized vectors.
pub fn mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for v in vectors {
        axpy(1.0, v, &mut out);
    }
    scale(1.0 / vectors.len() as f64, &mut out);
    out
}

/// Euclidean norm of the stacked vector `(v_1, ..., v_P)`.
pub fn stacked_norm(vectors: &[Vec<f64>]) -> f64 {
    vectors.iter().map(|v| dot(v, v)).sum::<f64>().sqrt()
}
