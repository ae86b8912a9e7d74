//! Row-wise f32 kernels. Every output row depends only on its own input row (plus the
//! key/value rows for attention), so computing a subset of rows yields bit-identical values
//! to computing all of them.

/// `out[r] = x[r] · w` for a row-major `w` of shape `[in_dim, out_dim]`.
pub(crate) fn matmul(x: &[f32], w: &[f32], in_dim: usize, out_dim: usize, out: &mut [f32]) {
    assert_eq!(w.len(), in_dim * out_dim);
    let rows = x.len() / in_dim;
    assert_eq!(x.len(), rows * in_dim);
    assert_eq!(out.len(), rows * out_dim);
    if rows == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            in_dim,
            out_dim,
            1.0,
            x.as_ptr(),
            in_dim as isize,
            1,
            w.as_ptr(),
            out_dim as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
}

pub(crate) fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

pub(crate) fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], out: &mut [f32]) {
    let d = gamma.len();
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
}

pub(crate) fn gelu(x: &mut [f32]) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    for v in x.iter_mut() {
        let u = *v;
        let y = C * (u + 0.044_715 * u * u * u);
        // tanh(y) = sign(y) * (1 - e^{-2|y|}) / (1 + e^{-2|y|})
        let e = exp_nonpos(-2.0 * y.abs());
        let t = ((1.0 - e) / (1.0 + e)).copysign(y);
        *v = 0.5 * u * (1.0 + t);
    }
}

/// `e^x` for `x <= 0`, written without branches or libm calls so the softmax loop
/// vectorizes. Relative error stays below 1e-6; inputs under -87 (including `-inf`) give 0.
#[inline(always)]
fn exp_nonpos(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let xc = x.max(-87.0);
    let shifted = xc * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    // The low mantissa bits of `shifted` hold n as an integer.
    let scale = f32::from_bits(shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23);
    if x < -87.0 {
        0.0
    } else {
        p * scale
    }
}

/// Max-subtracted softmax in place. Entries equal to `-inf` get probability zero.
pub(crate) fn softmax(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for v in row.iter_mut() {
        *v = exp_nonpos(*v - max);
    }
    let inv = 1.0 / row.iter().sum::<f32>();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Key or value rows for one layer, stitched from up to three contiguous pieces:
/// cached rows before the window, freshly computed window rows, cached rows after it.
#[derive(Clone, Copy)]
pub(crate) struct RowView<'a> {
    pub pieces: [&'a [f32]; 3],
    pub width: usize,
}

impl<'a> RowView<'a> {
    pub fn single(rows: &'a [f32], width: usize) -> Self {
        Self {
            pieces: [rows, &[], &[]],
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.iter().map(|p| p.len()).sum::<usize>() / self.width
    }

    /// The rows as one slice, copying into `buf` only when the view is split.
    pub fn contiguous<'b>(&self, buf: &'b mut Vec<f32>) -> &'b [f32]
    where
        'a: 'b,
    {
        match self.pieces {
            [a, [], []] => a,
            [a, b, c] => {
                buf.clear();
                buf.extend_from_slice(a);
                buf.extend_from_slice(b);
                buf.extend_from_slice(c);
                buf
            }
        }
    }

    #[cfg(test)]
    pub fn rows(&self) -> impl Iterator<Item = &'a [f32]> + 'a {
        let w = self.width;
        let [a, b, c] = self.pieces;
        a.chunks_exact(w).chain(b.chunks_exact(w)).chain(c.chunks_exact(w))
    }
}

/// Multi-head scaled dot-product attention with no causal mask: every query attends to every
/// key. Returns the number of query-key multiply-accumulates performed.
///
/// Stitched key/value views are first copied into one contiguous buffer so the products run
/// in the same order whether or not the keys arrive in pieces.
pub(crate) fn attention(
    q: &[f32],
    keys: RowView<'_>,
    values: RowView<'_>,
    heads: usize,
    out: &mut [f32],
    scratch: &mut AttnScratch,
) -> u64 {
    let d = keys.width;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let n_keys = keys.len();
    let rows = q.len() / d;
    assert_eq!(values.len(), n_keys);
    assert_eq!(out.len(), rows * d);
    if rows == 0 || n_keys == 0 {
        out.fill(0.0);
        return 0;
    }
    let k = keys.contiguous(&mut scratch.keys);
    let v = values.contiguous(&mut scratch.values);
    scratch.scores.clear();
    scratch.scores.resize(rows * n_keys, 0.0);
    let scores = &mut scratch.scores;
    for h in 0..heads {
        let off = h * hd;
        // SAFETY: q and out hold `rows` rows of width d, k and v hold `n_keys` rows of width
        // d, scores holds rows x n_keys; the head slice [off, off + hd) lies inside each row.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                hd,
                n_keys,
                scale,
                q.as_ptr().add(off),
                d as isize,
                1,
                k.as_ptr().add(off),
                1,
                d as isize,
                0.0,
                scores.as_mut_ptr(),
                n_keys as isize,
                1,
            );
        }
        for row in scores.chunks_exact_mut(n_keys) {
            softmax(row);
        }
        unsafe {
            matrixmultiply::sgemm(
                rows,
                n_keys,
                hd,
                1.0,
                scores.as_ptr(),
                n_keys as isize,
                1,
                v.as_ptr().add(off),
                d as isize,
                1,
                0.0,
                out.as_mut_ptr().add(off),
                d as isize,
                1,
            );
        }
    }
    (rows * n_keys * d) as u64
}

/// Reusable buffers for [`attention`].
#[derive(Default)]
pub(crate) struct AttnScratch {
    keys: Vec<f32>,
    values: Vec<f32>,
    scores: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2] x [[1 0 1],[0 1 1]] = [1 2 3]
        let mut out = [0.0; 3];
        matmul(&[1.0, 2.0], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0], 2, 3, &mut out);
        assert_eq!(out, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn exp_matches_libm() {
        for i in 0..=20_000 {
            let x = -(i as f32) * 0.0043;
            let (got, want) = (exp_nonpos(x), (x as f64).exp());
            assert!(((got as f64 - want) / want).abs() < 1e-6, "x = {x}");
        }
        assert_eq!(exp_nonpos(f32::NEG_INFINITY), 0.0);
        assert_eq!(exp_nonpos(-100.0), 0.0);
        assert_eq!(exp_nonpos(0.0), 1.0);
    }

    #[test]
    fn gelu_matches_tanh_form() {
        let xs: Vec<f32> = (-400..=400).map(|i| i as f32 * 0.02).collect();
        let mut got = xs.clone();
        gelu(&mut got);
        for (&x, &g) in xs.iter().zip(&got) {
            let x = x as f64;
            let want = 0.5 * x * (1.0 + (0.797_884_560_8 * (x + 0.044_715 * x * x * x)).tanh());
            assert!((g as f64 - want).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn softmax_normalizes_and_zeroes_neg_inf() {
        let mut row = [1.0, 2.0, f32::NEG_INFINITY, 0.5];
        softmax(&mut row);
        assert_eq!(row[2], 0.0);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stitched_view_equals_contiguous() {
        let d = 4;
        let rows: Vec<f32> = (0..6 * d).map(|i| (i as f32 * 0.37).sin()).collect();
        let q: Vec<f32> = (0..2 * d).map(|i| (i as f32 * 0.11).cos()).collect();
        let full = RowView::single(&rows, d);
        let split = RowView {
            pieces: [&rows[..d], &rows[d..3 * d], &rows[3 * d..]],
            width: d,
        };
        let (mut a, mut b) = (vec![0.0; 2 * d], vec![0.0; 2 * d]);
        let mut scratch = AttnScratch::default();
        let macs = attention(&q, full, full, 2, &mut a, &mut scratch);
        attention(&q, split, split, 2, &mut b, &mut scratch);
        assert_eq!(a, b);
        assert_eq!(macs, (2 * 6 * d) as u64);
    }

    #[test]
    fn attention_matches_naive_reference() {
        let (d, heads, n) = (8, 2, 5);
        let hd = d / heads;
        let kv: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.73).sin()).collect();
        let q: Vec<f32> = (0..3 * d).map(|i| (i as f32 * 0.29).cos()).collect();
        let view = RowView::single(&kv, d);
        let mut out = vec![0.0; 3 * d];
        attention(&q, view, view, heads, &mut out, &mut AttnScratch::default());
        for (r, qr) in q.chunks_exact(d).enumerate() {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let s: Vec<f64> = view
                    .rows()
                    .map(|k| {
                        qr[cols.clone()].iter().zip(&k[cols.clone()]).map(|(a, b)| (a * b) as f64).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for c in cols.clone() {
                    let want: f64 = s.iter().zip(view.rows()).map(|(x, v)| (x - m).exp() / z * v[c] as f64).sum();
                    assert!((out[r * d + c] as f64 - want).abs() < 1e-5);
                }
            }
        }
    }
}
