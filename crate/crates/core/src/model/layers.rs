//! Elementwise building blocks shared by the cached and full-sequence passes.

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Layer norm of one row. Returns `(normalized, rstd)` where `normalized` is
/// the pre-affine `x̂`, and writes the affine output into `out`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    for i in 0..x.len() {
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    (xhat, rstd)
}

pub fn layer_norm_rows(x: &[f64], rows: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() / rows.max(1);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        layer_norm_row(&x[r * d..(r + 1) * d], gain, bias, &mut out[r * d..(r + 1) * d]);
    }
    out
}

pub fn gelu(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * u * (1.0 + t)
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &u in &[-3.0, -0.5, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn layer_norm_centres_and_scales() {
        let x = [1.0, 2.0, 3.0, 6.0];
        let mut out = [0.0; 4];
        let (xhat, _) = layer_norm_row(&x, &[1.0; 4], &[0.0; 4], &mut out);
        assert!(xhat.iter().sum::<f64>().abs() < 1e-12);
        let var = xhat.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-4);
    }
}
