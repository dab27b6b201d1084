//! Forward and backward numerical kernels behind the graph operations.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::tensor::Tensor;

/// Sparse linear map along one image axis: output sample `o` is
/// `sum(weight * input[index])` over `taps[o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn new(in_len: usize, taps: Vec<Vec<(usize, f64)>>) -> Self {
        assert!(
            taps.iter().flatten().all(|&(i, _)| i < in_len),
            "axis map index out of range"
        );
        Self { in_len, taps }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            in_len: n,
            taps: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Selects `len` samples starting at `start`.
    pub fn crop(in_len: usize, start: usize, len: usize) -> Self {
        Self::new(
            in_len,
            (start..start + len).map(|i| vec![(i, 1.0)]).collect(),
        )
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[Vec<(usize, f64)>] {
        &self.taps
    }

    /// Applies the map to a single line of samples.
    pub fn apply_line(&self, line: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * line[i]).sum())
            .collect()
    }
}

pub(super) fn resample(x: &Tensor, rows: &AxisMap, cols: &AxisMap) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(rows.in_len, h, "row map expects height {}", rows.in_len);
    assert_eq!(cols.in_len, w, "column map expects width {}", cols.in_len);
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let src = x.data();
    let mut tmp = vec![0.0; c * h * ow];
    for line in 0..c * h {
        let input = &src[line * w..(line + 1) * w];
        let out = &mut tmp[line * ow..(line + 1) * ow];
        for (o, taps) in cols.taps.iter().enumerate() {
            out[o] = taps.iter().map(|&(i, wt)| wt * input[i]).sum();
        }
    }
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for (oy, taps) in rows.taps.iter().enumerate() {
            let dst = ch * oh * ow + oy * ow;
            for &(iy, wt) in taps {
                let s = ch * h * ow + iy * ow;
                for k in 0..ow {
                    out[dst + k] += wt * tmp[s + k];
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub(super) fn resample_transpose(
    g: &Tensor,
    rows: &AxisMap,
    cols: &AxisMap,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let gd = g.data();
    let mut tmp = vec![0.0; c * h * ow];
    for ch in 0..c {
        for (oy, taps) in rows.taps.iter().enumerate() {
            let s = ch * oh * ow + oy * ow;
            for &(iy, wt) in taps {
                let dst = ch * h * ow + iy * ow;
                for k in 0..ow {
                    tmp[dst + k] += wt * gd[s + k];
                }
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for line in 0..c * h {
        let gline = &tmp[line * ow..(line + 1) * ow];
        let dst = &mut out[line * w..(line + 1) * w];
        for (o, taps) in cols.taps.iter().enumerate() {
            for &(i, wt) in taps {
                dst[i] += wt * gline[o];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub(super) fn channel_mix(x: &Tensor, weights: &[f64], out_channels: usize) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(
        weights.len(),
        out_channels * c,
        "channel mix weights must be [out, in]"
    );
    let n = h * w;
    let mut out = vec![0.0; out_channels * n];
    for o in 0..out_channels {
        for i in 0..c {
            let wt = weights[o * c + i];
            if wt == 0.0 {
                continue;
            }
            let src = &x.data()[i * n..(i + 1) * n];
            for (d, s) in out[o * n..(o + 1) * n].iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    Tensor::new(&[out_channels, h, w], out)
}

pub(super) fn channel_mix_backward(g: &Tensor, weights: &[f64], out_channels: usize) -> Tensor {
    let (_, h, w) = g.chw();
    let c = weights.len() / out_channels;
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for o in 0..out_channels {
        for i in 0..c {
            let wt = weights[o * c + i];
            if wt == 0.0 {
                continue;
            }
            let src = &g.data()[o * n..(o + 1) * n];
            for (d, s) in out[i * n..(i + 1) * n].iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub(super) fn channel_scale(x: &Tensor, s: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(s.len(), c, "channel scale needs one factor per channel");
    let n = h * w;
    let mut out = x.data().to_vec();
    for (ch, k) in s.data().iter().enumerate() {
        out[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= k);
    }
    Tensor::new(&[c, h, w], out)
}

pub(super) fn channel_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(b.len(), c, "channel bias needs one value per channel");
    let n = h * w;
    let mut out = x.data().to_vec();
    for (ch, k) in b.data().iter().enumerate() {
        out[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v += k);
    }
    Tensor::new(&[c, h, w], out)
}

/// Per-channel inner product of two `[C, H, W]` tensors.
pub(super) fn channel_dot(a: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = a.chw();
    let n = h * w;
    let data = (0..c)
        .map(|ch| {
            let r = ch * n..(ch + 1) * n;
            a.data()[r.clone()]
                .iter()
                .zip(&b.data()[r])
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect();
    Tensor::new(&[c], data)
}

pub(super) fn channel_sum(g: &Tensor) -> Tensor {
    let (c, h, w) = g.chw();
    let n = h * w;
    Tensor::new(&[c], g.data().chunks(n).map(|p| p.iter().sum()).collect())
}

fn conv_geometry(w: &Tensor) -> (usize, usize, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 4, "convolution weight must be [out, in, kh, kw]");
    (s[0], s[1], s[2], s[3])
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + k - pad`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len + pad - k).div_ceil(stride)).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(super) fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

pub(super) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cin, h, w) = x.chw();
    let (cout, wcin, kh, kw) = conv_geometry(weight);
    assert_eq!(
        cin, wcin,
        "convolution expects {wcin} input channels, got {cin}"
    );
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        for ci in 0..cin {
            let src = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let s0 = (ox0 as isize + off) as usize;
                            let n = ox1 - ox0;
                            for (d, s) in dst[ox0..ox1].iter_mut().zip(&row[s0..s0 + n]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out)
}

pub(super) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (cin, h, w) = x.chw();
    let (cout, _, kh, kw) = conv_geometry(weight);
    let (_, oh, ow) = g.chw();
    let xd = x.data();
    let wd = weight.data();
    let gd = g.data();
    let mut gx = want_x.then(|| vec![0.0; cin * h * w]);
    let mut gw = want_w.then(|| vec![0.0; wd.len()]);
    for co in 0..cout {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let src = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let wv = wd[widx];
                    let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                            for ox in ox0..ox1 {
                                dst[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                        if gw.is_some() {
                            let row = &src[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * stride + kx - pad];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    let gb = want_b.then(|| {
        Tensor::new(
            &[cout],
            gd.chunks(oh * ow).map(|p| p.iter().sum()).collect(),
        )
    });
    (
        gx.map(|d| Tensor::new(&[cin, h, w], d)),
        gw.map(|d| Tensor::new(weight.shape(), d)),
        gb,
    )
}

pub(super) fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if best == usize::MAX || xd[idx] > best_v {
                            best = idx;
                            best_v = xd[idx];
                        }
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(&[c, oh, ow], out), argmax)
}

pub(super) fn linear(weight: &Tensor, x: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let s = weight.shape();
    assert_eq!(s.len(), 2, "dense weight must be [out, in]");
    let (out, inp) = (s[0], s[1]);
    assert_eq!(
        x.len(),
        inp,
        "dense layer expects {inp} inputs, got {}",
        x.len()
    );
    let xd = x.data();
    let data = (0..out)
        .map(|o| {
            let row = &weight.data()[o * inp..(o + 1) * inp];
            let v: f64 = row.iter().zip(xd).map(|(a, b)| a * b).sum();
            v + bias.map_or(0.0, |b| b.data()[o])
        })
        .collect();
    Tensor::new(&[out], data)
}

pub(super) fn mean_squared_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse operands differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

pub(super) fn mean_absolute_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mae operands differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Mean-centred channel covariance of a `[C, ...]` tensor with the spatial
/// axes flattened: `cov[a][b] = mean_n (x_a - m_a)(x_b - m_b)`.
pub fn channel_covariance(x: &Tensor) -> (usize, Vec<f64>) {
    let c = x.shape()[0];
    let n = x.len() / c;
    let centred = centre_channels(x.data(), c, n);
    let mut cov = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let v: f64 = centred[a * n..(a + 1) * n]
                .iter()
                .zip(&centred[b * n..(b + 1) * n])
                .map(|(p, q)| p * q)
                .sum();
            cov[a * c + b] = v / n as f64;
            cov[b * c + a] = v / n as f64;
        }
    }
    (c, cov)
}

fn centre_channels(data: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for ch in 0..c {
        let plane = &mut out[ch * n..(ch + 1) * n];
        let m = plane.iter().sum::<f64>() / n as f64;
        plane.iter_mut().for_each(|v| *v -= m);
    }
    out
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

pub(super) fn covariance_huber(x: &Tensor, target: &[f64], delta: f64) -> f64 {
    let (c, cov) = channel_covariance(x);
    assert_eq!(target.len(), c * c, "covariance target must be {c}x{c}");
    cov.iter()
        .zip(target)
        .map(|(p, q)| huber(p - q, delta))
        .sum()
}

pub(super) fn covariance_huber_backward(x: &Tensor, target: &[f64], delta: f64) -> Tensor {
    let (c, cov) = channel_covariance(x);
    let n = x.len() / c;
    let gcov: Vec<f64> = cov
        .iter()
        .zip(target)
        .map(|(p, q)| huber_grad(p - q, delta))
        .collect();
    let centred = centre_channels(x.data(), c, n);
    // d cov_ab / d xc_a,n = xc_b,n / N; centred rows sum to zero so the mean
    // subtraction contributes nothing further.
    let mut out = vec![0.0; c * n];
    for a in 0..c {
        for b in 0..c {
            let k = (gcov[a * c + b] + gcov[b * c + a]) / n as f64;
            if k == 0.0 {
                continue;
            }
            let src = &centred[b * n..(b + 1) * n];
            for (d, s) in out[a * n..(a + 1) * n].iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

const CX_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Feature vectors of a `[C, ...]` map as rows, centred by `mean` and
/// scaled to unit length. Returns the rows and their pre-normalisation norms.
fn unit_rows(x: &Tensor, mean: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
    let c = x.shape()[0];
    let n = x.len() / c;
    let mut rows = vec![0.0; n * c];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for ch in 0..c {
            let v = x.data()[ch * n + i] - mean[ch];
            rows[i * c + ch] = v;
            s += v * v;
        }
        let norm = s.sqrt().max(NORM_EPS);
        norms[i] = norm;
        rows[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= norm);
    }
    (rows, norms, n)
}

struct ContextualRow {
    dist: Vec<f64>,
    weights: Vec<f64>,
    sum: f64,
    argmin: usize,
    argmax: usize,
    denom: f64,
}

fn contextual_row(src_row: &[f64], tgt_rows: &[f64], m: usize, bandwidth: f64) -> ContextualRow {
    let c = src_row.len();
    let mut dist = Vec::with_capacity(m);
    let mut argmin = 0;
    for j in 0..m {
        let t = &tgt_rows[j * c..(j + 1) * c];
        let cos: f64 = src_row.iter().zip(t).map(|(a, b)| a * b).sum();
        let d = 1.0 - cos;
        if d < dist.get(argmin).copied().unwrap_or(f64::INFINITY) {
            argmin = j;
        }
        dist.push(d);
    }
    let denom = dist[argmin] + CX_EPS;
    let mut weights = Vec::with_capacity(m);
    let mut sum = 0.0;
    let mut argmax = 0;
    for (j, d) in dist.iter().enumerate() {
        let wv = ((1.0 - d / denom) / bandwidth).exp();
        if j == 0 || wv > weights[argmax] {
            argmax = j;
        }
        sum += wv;
        weights.push(wv);
    }
    ContextualRow {
        dist,
        weights,
        sum,
        argmin,
        argmax,
        denom,
    }
}

fn channel_means(x: &Tensor) -> Vec<f64> {
    let c = x.shape()[0];
    let n = x.len() / c;
    x.data()
        .chunks(n)
        .map(|p| p.iter().sum::<f64>() / n as f64)
        .collect()
}

/// `-ln(mean_i max_j cx_ij)` where `cx` are the row-normalised affinities
/// between source features `i` and target features `j`.
pub fn contextual_forward(source: &Tensor, target: &Tensor, bandwidth: f64) -> f64 {
    assert_eq!(
        source.shape()[0],
        target.shape()[0],
        "contextual loss needs matching channel counts"
    );
    let mean = channel_means(target);
    let (src, _, n) = unit_rows(source, &mean);
    let (tgt, _, m) = unit_rows(target, &mean);
    let c = source.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let row = contextual_row(&src[i * c..(i + 1) * c], &tgt, m, bandwidth);
        total += row.weights[row.argmax] / row.sum;
    }
    -(total / n as f64).ln()
}

pub(super) fn contextual_backward(source: &Tensor, target: &Tensor, bandwidth: f64) -> Tensor {
    let mean = channel_means(target);
    let (src, norms, n) = unit_rows(source, &mean);
    let (tgt, _, m) = unit_rows(target, &mean);
    let c = source.shape()[0];
    let rows: Vec<ContextualRow> = (0..n)
        .map(|i| contextual_row(&src[i * c..(i + 1) * c], &tgt, m, bandwidth))
        .collect();
    let cx: f64 = rows
        .iter()
        .map(|r| r.weights[r.argmax] / r.sum)
        .sum::<f64>()
        / n as f64;
    let g_m = -1.0 / (cx * n as f64);
    let mut out = vec![0.0; c * n];
    let mut gd = vec![0.0; m];
    for (i, r) in rows.iter().enumerate() {
        let wstar = r.weights[r.argmax];
        // d m_i / d w_k, then through w_k = exp((1 - d_k / D) / h).
        let mut g_min = 0.0;
        for k in 0..m {
            let gw =
                g_m * (if k == r.argmax { 1.0 / r.sum } else { 0.0 } - wstar / (r.sum * r.sum));
            let g_rel = gw * (-r.weights[k] / bandwidth);
            gd[k] = g_rel / r.denom;
            g_min -= g_rel * r.dist[k] / (r.denom * r.denom);
        }
        gd[r.argmin] += g_min;
        let mut g_unit = vec![0.0; c];
        for k in 0..m {
            if gd[k] == 0.0 {
                continue;
            }
            let t = &tgt[k * c..(k + 1) * c];
            for ch in 0..c {
                g_unit[ch] -= gd[k] * t[ch];
            }
        }
        let u = &src[i * c..(i + 1) * c];
        let proj: f64 = u.iter().zip(&g_unit).map(|(a, b)| a * b).sum();
        for ch in 0..c {
            out[ch * n + i] = (g_unit[ch] - u[ch] * proj) / norms[i];
        }
    }
    Tensor::new(source.shape(), out)
}
