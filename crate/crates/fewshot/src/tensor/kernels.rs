//! Raw numeric routines shared by the tape's forward and backward passes.

use super::{Result, TensorError};

pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// NumPy-style broadcast shape of two operands (right-aligned).
pub(crate) fn broadcast_shapes(
    op: &'static str,
    left: &[usize],
    right: &[usize],
) -> Result<Vec<usize>> {
    let rank = left.len().max(right.len());
    let mut out = vec![0usize; rank];
    for (i, slot) in out.iter_mut().enumerate() {
        let l = dim_from_right(left, rank, i);
        let r = dim_from_right(right, rank, i);
        *slot = if l == r || r == 1 {
            l
        } else if l == 1 {
            r
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                left: left.to_vec(),
                right: right.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Strides of `shape` padded to `rank`, with stride 0 on broadcast dims.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let strides = strides_for(shape);
    let pad = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                strides[i - pad]
            }
        })
        .collect()
}

/// Elementwise binary op with broadcasting. Returns data in `out_shape` order.
pub(crate) fn broadcast_binary(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for slot in out.iter_mut() {
        *slot = f(a[ia], b[ib]);
        // advance coords odometer-style, keeping ia/ib in sync
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `from`) down to `to`, undoing broadcasting.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let st = broadcast_strides(to, rank);
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * from[d];
        }
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let he = h + 2 * pad;
    let we = w + 2 * pad;
    if stride == 0 || kh == 0 || kw == 0 || he < kh || we < kw {
        return Err(TensorError::BadParameter {
            op: "conv2d",
            detail: format!(
                "kernel {kh}x{kw} stride {stride} pad {pad} on input {h}x{w}"
            ),
        });
    }
    Ok(((he - kh) / stride + 1, (we - kw) / stride + 1))
}

/// Copy one (H,W) input plane into an (H+2p, W+2p) zero-padded buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, pad: usize, dst: &mut [f64]) {
    let wp = w + 2 * pad;
    dst.fill(0.0);
    for y in 0..h {
        let drow = (y + pad) * wp + pad;
        dst[drow..drow + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// Direct convolution over a zero-padded buffer. Contributions to each
/// output element accumulate in (ci, kh, kw) order — the 7-loop reference in
/// the tests must match bit for bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wdim: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, wdim + 2 * pad);
    let mut out = vec![0.0; n * co * ho * wo];
    let mut padded = vec![0.0; ci * hp * wp];
    for b in 0..n {
        for ic in 0..ci {
            pad_plane(
                &x[(b * ci + ic) * h * wdim..(b * ci + ic + 1) * h * wdim],
                h,
                wdim,
                pad,
                &mut padded[ic * hp * wp..(ic + 1) * hp * wp],
            );
        }
        for oc in 0..co {
            let out_plane = &mut out[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            for ic in 0..ci {
                let plane = &padded[ic * hp * wp..(ic + 1) * hp * wp];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((oc * ci + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let in_row = &plane[(oy * stride + ky) * wp + kx..];
                            let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                for (o, i) in out_row.iter_mut().zip(in_row.iter()) {
                                    *o += wv * i;
                                }
                            } else {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wdim: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hp, wp) = (h + 2 * pad, wdim + 2 * pad);
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut padded = vec![0.0; ci * hp * wp];
    let mut dpadded = vec![0.0; ci * hp * wp];
    for b in 0..n {
        if want_dw {
            for ic in 0..ci {
                pad_plane(
                    &x[(b * ci + ic) * h * wdim..(b * ci + ic + 1) * h * wdim],
                    h,
                    wdim,
                    pad,
                    &mut padded[ic * hp * wp..(ic + 1) * hp * wp],
                );
            }
        }
        if want_dx {
            dpadded.fill(0.0);
        }
        for oc in 0..co {
            let g_plane = &grad_out[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = w[wi];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let base = (oy * stride + ky) * wp + kx;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            if want_dx {
                                let drow = &mut dpadded
                                    [ic * hp * wp + base..ic * hp * wp + base + (wo - 1) * stride + 1];
                                if stride == 1 {
                                    for (d, g) in drow.iter_mut().zip(g_row.iter()) {
                                        *d += wv * g;
                                    }
                                } else {
                                    for (ox, g) in g_row.iter().enumerate() {
                                        drow[ox * stride] += wv * g;
                                    }
                                }
                            }
                            if want_dw {
                                let in_row = &padded[ic * hp * wp + base..];
                                if stride == 1 {
                                    for (g, i) in g_row.iter().zip(in_row.iter()) {
                                        acc += g * i;
                                    }
                                } else {
                                    for (ox, g) in g_row.iter().enumerate() {
                                        acc += g * in_row[ox * stride];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            for ic in 0..ci {
                let plane = &dpadded[ic * hp * wp..(ic + 1) * hp * wp];
                let out_plane = &mut dx[(b * ci + ic) * h * wdim..(b * ci + ic + 1) * h * wdim];
                for y in 0..h {
                    let srow = (y + pad) * wp + pad;
                    for (o, v) in out_plane[y * wdim..(y + 1) * wdim]
                        .iter_mut()
                        .zip(&plane[srow..srow + wdim])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling; ties break toward the first scanned position (row-major).
/// Returns the pooled values and the flat argmax index of each output cell.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool2d_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            if iy >= h || ix >= w {
                                continue;
                            }
                            let xi = ((b * c + ch) * h + iy) * w + ix;
                            if x[xi] > best {
                                best = x[xi];
                                best_idx = xi;
                            }
                        }
                    }
                    let oi = ((b * c + ch) * ho + oy) * wo + ox;
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

/// Iterate a reduction over `axes` (keepdims): calls `visit(out_flat, in_flat)`
/// for every input element.
pub(crate) fn for_each_reduced(
    shape: &[usize],
    axes: &[usize],
    mut visit: impl FnMut(usize, usize),
) {
    let rank = shape.len();
    let out_shape: Vec<usize> = (0..rank)
        .map(|d| if axes.contains(&d) { 1 } else { shape[d] })
        .collect();
    let out_strides = strides_for(&out_shape);
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; rank];
    let mut out_flat = 0usize;
    for in_flat in 0..numel {
        visit(out_flat, in_flat);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if !axes.contains(&d) {
                out_flat += out_strides[d];
            }
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            if !axes.contains(&d) {
                out_flat -= out_strides[d] * shape[d];
            }
        }
    }
}

/// Iterate all lanes along `axis`: calls `lane(base_flat, stride, len)` once
/// per lane, where lane elements live at `base_flat + i * stride`.
pub(crate) fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut lane: impl FnMut(usize, usize, usize),
) {
    let strides = strides_for(shape);
    let len = shape[axis];
    let stride = strides[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            lane(o * stride * len + i, stride, len);
        }
    }
}

pub(crate) fn permute_forward(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_for(shape);
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    // in_strides reordered to out-coordinate order
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += mapped[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= mapped[d] * out_shape[d];
        }
    }
    (out_shape, out)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(
            broadcast_shapes("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(broadcast_shapes("t", &[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shapes("t", &[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn broadcast_binary_matches_manual() {
        // (2,1) + (3,) -> (2,3)
        let a = [10.0, 20.0];
        let b = [1.0, 2.0, 3.0];
        let out = broadcast_binary(&[2, 1], &a, &[3], &b, &[2, 3], |x, y| x + y);
        assert_eq!(out, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let grad = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // shape (2,3)
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[]), vec![21.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(matmul(&eye, &a, 3, 3, 3), a.to_vec());
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let perm = [2, 0, 1];
        let (pshape, pdata) = permute_forward(&shape, &data, &perm);
        assert_eq!(pshape, vec![4, 2, 3]);
        let (bshape, bdata) = permute_forward(&pshape, &pdata, &invert_perm(&perm));
        assert_eq!(bshape, shape.to_vec());
        assert_eq!(bdata, data);
    }

    #[test]
    fn lane_iteration_covers_axis() {
        let mut seen = Vec::new();
        for_each_lane(&[2, 3], 1, |base, stride, len| {
            let lane: Vec<usize> = (0..len).map(|i| base + i * stride).collect();
            seen.push(lane);
        });
        assert_eq!(seen, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }
}
