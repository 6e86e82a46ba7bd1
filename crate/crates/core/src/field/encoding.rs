use std::f64::consts::PI;

/// Width of the encoding of a 3-vector with `levels` frequency bands.
pub const fn encoded_dim(levels: usize) -> usize {
    3 + 6 * levels
}

/// Frequency encoding `[x, sin(2^0 πx), cos(2^0 πx), ..., sin(2^(L-1) πx), cos(2^(L-1) πx)]`
/// written into `out`, which must hold `encoded_dim(levels)` values.
pub fn encode_into(x: &[f64; 3], levels: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_dim(levels));
    out[..3].copy_from_slice(x);
    let mut freq = PI;
    for l in 0..levels {
        let base = 3 + 6 * l;
        for a in 0..3 {
            let (s, c) = (freq * x[a]).sin_cos();
            out[base + a] = s;
            out[base + 3 + a] = c;
        }
        freq *= 2.0;
    }
}

pub fn positional_encode(x: &[f64; 3], levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_dim(levels)];
    encode_into(x, levels, &mut out);
    out
}
