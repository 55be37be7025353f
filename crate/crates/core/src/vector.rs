//! Small dense-vector helpers shared by the gradient and attack code.

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(v: &[f64], k: f64) -> Vec<f64> {
    v.iter().map(|x| x * k).collect()
}

/// `y += k * x`
pub fn axpy(y: &mut [f64], k: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// `‖a − b‖₂ / max(‖reference‖₂, floor)`.
pub fn relative_l2(a: &[f64], b: &[f64], reference: &[f64], floor: f64) -> f64 {
    l2_norm(&sub(a, b)) / l2_norm(reference).max(floor)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shortest round-trip text for a real (`NaN`, `inf`, `-inf` for the
/// non-finite values); used by every CSV writer.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}
