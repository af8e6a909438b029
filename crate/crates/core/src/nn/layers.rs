//! Layer definitions and their forward/backward kernels (NHWC).

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(input / stride)`, extra padding at the bottom/right.
    Same,
    Valid,
    /// Symmetric zero padding of the given width on every side.
    Explicit(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Op {
    Input,
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    BatchNorm {
        epsilon: f32,
        momentum: f32,
        scale: bool,
    },
    Relu,
    MaxPool {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    /// Average pooling; padded positions are excluded from the mean.
    AvgPool {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        units: usize,
        bias: bool,
    },
    Dropout {
        rate: f32,
    },
    Add,
    Concat,
}

impl Op {
    pub fn is_spatial_feature_map(&self) -> bool {
        matches!(
            self,
            Op::Conv2d { .. }
                | Op::BatchNorm { .. }
                | Op::Relu
                | Op::MaxPool { .. }
                | Op::AvgPool { .. }
                | Op::Add
                | Op::Concat
        )
    }
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn axis(input: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    if input == 0 || k == 0 || s == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= k).then(|| ((input - k) / s + 1, 0)),
        Padding::Explicit(p) => (input + 2 * p >= k).then(|| ((input + 2 * p - k) / s + 1, p)),
    }
}

impl Window {
    pub(crate) fn new(
        in_h: usize,
        in_w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Option<Window> {
        let (out_h, pad_top) = axis(in_h, kernel.0, stride.0, padding)?;
        let (out_w, pad_left) = axis(in_w, kernel.1, stride.1, padding)?;
        Some(Window {
            in_h,
            in_w,
            out_h,
            out_w,
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }

    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
        (ix >= 0 && (ix as usize) < self.in_w).then_some(ix as usize)
    }
}

// ---------------------------------------------------------------------------
// convolution

fn im2col(x: &[f32], c: usize, win: &Window, cols: &mut [f32]) {
    let k = win.kh * win.kw * c;
    let kwc = win.kw * c;
    let mut row = 0;
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let dst = &mut cols[row * k..(row + 1) * k];
            row += 1;
            let x0 = (ox * win.sw) as isize - win.pad_left as isize;
            let row_inside = x0 >= 0 && x0 as usize + win.kw <= win.in_w;
            for ky in 0..win.kh {
                let seg = &mut dst[ky * kwc..(ky + 1) * kwc];
                let Some(iy) = win.in_row(oy, ky) else {
                    seg.fill(0.0);
                    continue;
                };
                if row_inside {
                    let src = (iy * win.in_w + x0 as usize) * c;
                    seg.copy_from_slice(&x[src..src + kwc]);
                    continue;
                }
                for kx in 0..win.kw {
                    let d = &mut seg[kx * c..(kx + 1) * c];
                    match win.in_col(ox, kx) {
                        Some(ix) => {
                            let src = (iy * win.in_w + ix) * c;
                            d.copy_from_slice(&x[src..src + c]);
                        }
                        None => d.fill(0.0),
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, win: &Window, dx: &mut [f32]) {
    let k = win.kh * win.kw * c;
    let mut row = 0;
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let src = &cols[row * k..(row + 1) * k];
            row += 1;
            for ky in 0..win.kh {
                let Some(iy) = win.in_row(oy, ky) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.in_col(ox, kx) else { continue };
                    let s = &src[(ky * win.kw + kx) * c..(ky * win.kw + kx + 1) * c];
                    let d = &mut dx[(iy * win.in_w + ix) * c..(iy * win.in_w + ix + 1) * c];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvOut {
    pub y: Tensor,
    /// Patch matrix, kept for the weight gradient (absent for pointwise convs).
    pub cols: Option<Vec<f32>>,
}

pub(crate) fn conv_forward(
    x: &Tensor,
    kernel: &[f32],
    bias: Option<&[f32]>,
    win: &Window,
    filters: usize,
    keep_cols: bool,
) -> ConvOut {
    let n = x.batch();
    let c = x.channels();
    let k = win.kh * win.kw * c;
    let p = win.out_h * win.out_w;
    let mut out = vec![0.0f32; n * p * filters];
    let span = par::span_len(n);
    let add_bias = |o: &mut [f32]| {
        if let Some(b) = bias {
            for row in o.chunks_mut(filters) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
    };
    let cols = if win.pointwise() {
        par::for_each_chunk_mut(&mut out, span * p * filters, |ci, o| {
            let rows = o.len() / filters;
            let start = ci * span * p * c;
            gemm(
                Mat::new(&x.data()[start..start + rows * c], rows, c),
                Mat::new(kernel, k, filters),
                o,
                false,
            );
            add_bias(o);
        });
        None
    } else {
        let mut cols = vec![0.0f32; n * p * k];
        par::for_each_chunk_pair_mut(&mut out, span * p * filters, &mut cols, span * p * k, |ci, o, cl| {
            let samples = o.len() / (p * filters);
            for s in 0..samples {
                im2col(x.sample(ci * span + s), c, win, &mut cl[s * p * k..(s + 1) * p * k]);
            }
            gemm(Mat::new(cl, samples * p, k), Mat::new(kernel, k, filters), o, false);
            add_bias(o);
        });
        keep_cols.then_some(cols)
    };
    ConvOut {
        y: Tensor::from_vec([n, win.out_h, win.out_w, filters], out).expect("conv output shape"),
        cols,
    }
}

pub(crate) struct ConvGrads {
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
    pub input: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &Tensor,
    cols: Option<&[f32]>,
    kernel: &[f32],
    has_bias: bool,
    win: &Window,
    filters: usize,
    dy: &Tensor,
    want_params: bool,
    want_input: bool,
) -> ConvGrads {
    let n = x.batch();
    let c = x.channels();
    let k = win.kh * win.kw * c;
    let p = win.out_h * win.out_w;
    let span = par::span_len(n);
    let spans = n.div_ceil(span);
    let patches: &[f32] = if win.pointwise() {
        x.data()
    } else {
        cols.expect("conv backward needs the forward patch matrix")
    };

    let (dk, db) = if want_params {
        let partials = par::map(spans, |si| {
            let s0 = si * span;
            let rows = (span.min(n - s0)) * p;
            let mut d = vec![0.0f32; k * filters];
            gemm(
                Mat::new(&patches[s0 * p * k..s0 * p * k + rows * k], rows, k).t(),
                Mat::new(
                    &dy.data()[s0 * p * filters..s0 * p * filters + rows * filters],
                    rows,
                    filters,
                ),
                &mut d,
                false,
            );
            d
        });
        let mut dk = vec![0.0f32; k * filters];
        for part in &partials {
            for (a, b) in dk.iter_mut().zip(part) {
                *a += b;
            }
        }
        let db = has_bias.then(|| {
            let mut db = vec![0.0f32; filters];
            for row in dy.data().chunks(filters) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
            db
        });
        (Some(dk), db)
    } else {
        (None, None)
    };

    let dx = want_input.then(|| {
        let mut dx = vec![0.0f32; x.data().len()];
        let sample = win.in_h * win.in_w * c;
        par::for_each_chunk_mut(&mut dx, span * sample, |ci, d| {
            let s0 = ci * span;
            let samples = d.len() / sample;
            let rows = samples * p;
            let dys = &dy.data()[s0 * p * filters..(s0 * p + rows) * filters];
            if win.pointwise() {
                gemm(Mat::new(dys, rows, filters), Mat::new(kernel, k, filters).t(), d, false);
            } else {
                let mut dcols = vec![0.0f32; rows * k];
                gemm(
                    Mat::new(dys, rows, filters),
                    Mat::new(kernel, k, filters).t(),
                    &mut dcols,
                    false,
                );
                for s in 0..samples {
                    col2im(
                        &dcols[s * p * k..(s + 1) * p * k],
                        c,
                        win,
                        &mut d[s * sample..(s + 1) * sample],
                    );
                }
            }
        });
        Tensor::from_vec(x.shape(), dx).expect("conv input grad shape")
    });

    ConvGrads {
        kernel: dk,
        bias: db,
        input: dx,
    }
}

// ---------------------------------------------------------------------------
// batch normalization

pub(crate) struct BnCache {
    /// Normalized input; only kept when batch statistics were used.
    pub xhat: Option<Vec<f32>>,
    pub inv_std: Vec<f32>,
}

pub(crate) struct BnOut {
    pub y: Tensor,
    pub cache: BnCache,
    /// Batch mean and biased variance, present in training mode.
    pub batch_stats: Option<(Vec<f32>, Vec<f32>)>,
}

/// Per-channel f64 reduction: `f(acc, row)` folds one row of `c` values.
fn channel_sums(data: &[f32], c: usize, f: impl Fn(&mut [f64], &[f32]) + Sync + Send) -> Vec<f64> {
    let rows = data.len() / c;
    let span = par::span_len(rows);
    let partials = par::map(rows.div_ceil(span), |si| {
        let mut acc = vec![0.0f64; c];
        let end = ((si + 1) * span).min(rows);
        for row in data[si * span * c..end * c].chunks_exact(c) {
            f(&mut acc, row);
        }
        acc
    });
    let mut total = vec![0.0f64; c];
    for part in partials {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    total
}

fn add_row(acc: &mut [f64], row: &[f32]) {
    for (a, v) in acc.iter_mut().zip(row) {
        *a += *v as f64;
    }
}

fn affine_rows(data: &mut [f32], c: usize, scale: &[f32], shift: &[f32]) {
    let span = par::span_len(data.len() / c.max(1));
    par::for_each_chunk_mut(data, span * c, |_, chunk| {
        for row in chunk.chunks_mut(c) {
            for ((v, s), t) in row.iter_mut().zip(scale).zip(shift) {
                *v = *v * s + t;
            }
        }
    });
}

pub(crate) fn bn_forward(
    x: &Tensor,
    gamma: Option<&[f32]>,
    beta: &[f32],
    running: (&[f32], &[f32]),
    epsilon: f32,
    batch_stats: bool,
) -> BnOut {
    let c = x.channels();
    let ones = vec![1.0f32; c];
    let gamma = gamma.unwrap_or(&ones);
    if !batch_stats {
        let (mean, var) = running;
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let scale: Vec<f32> = gamma.iter().zip(&inv_std).map(|(g, s)| g * s).collect();
        let shift: Vec<f32> = (0..c).map(|i| beta[i] - mean[i] * scale[i]).collect();
        let mut y = x.clone();
        affine_rows(y.data_mut(), c, &scale, &shift);
        return BnOut {
            y,
            cache: BnCache { xhat: None, inv_std },
            batch_stats: None,
        };
    }
    let rows = (x.data().len() / c) as f64;
    let mean: Vec<f64> = channel_sums(x.data(), c, add_row)
        .into_iter()
        .map(|s| s / rows)
        .collect();
    let var: Vec<f64> = channel_sums(x.data(), c, |acc, row| {
        for ((a, v), m) in acc.iter_mut().zip(row).zip(&mean) {
            let d = *v as f64 - m;
            *a += d * d;
        }
    })
    .into_iter()
    .map(|s| s / rows)
    .collect();
    let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + epsilon as f64).sqrt()) as f32).collect();
    let neg_mean_scaled: Vec<f32> = (0..c).map(|i| -(mean[i] as f32) * inv_std[i]).collect();
    let mut xhat = x.data().to_vec();
    affine_rows(&mut xhat, c, &inv_std, &neg_mean_scaled);
    let mut y = Tensor::from_vec(x.shape(), xhat.clone()).expect("bn shape");
    affine_rows(y.data_mut(), c, gamma, beta);
    BnOut {
        y,
        cache: BnCache {
            xhat: Some(xhat),
            inv_std,
        },
        batch_stats: Some((
            mean.iter().map(|&m| m as f32).collect(),
            var.iter().map(|&v| v as f32).collect(),
        )),
    }
}

pub(crate) struct BnGrads {
    pub gamma: Option<Vec<f32>>,
    pub beta: Option<Vec<f32>>,
    pub input: Option<Tensor>,
}

pub(crate) fn bn_backward(
    dy: &Tensor,
    cache: &BnCache,
    gamma: Option<&[f32]>,
    want_params: bool,
    want_input: bool,
) -> BnGrads {
    let c = dy.channels();
    let ones = vec![1.0f32; c];
    let g = gamma.unwrap_or(&ones);
    let Some(xhat) = cache.xhat.as_deref() else {
        // Running statistics: the layer is a fixed per-channel affine map.
        let input = want_input.then(|| {
            let scale: Vec<f32> = g.iter().zip(&cache.inv_std).map(|(a, b)| a * b).collect();
            let mut dx = dy.clone();
            affine_rows(dx.data_mut(), c, &scale, &vec![0.0; c]);
            dx
        });
        return BnGrads {
            gamma: None,
            beta: None,
            input,
        };
    };
    let rows = dy.data().len() / c;
    let dbeta = channel_sums(dy.data(), c, add_row);
    // sum(dy * xhat) per channel
    let dgamma = {
        let span = par::span_len(rows);
        let partials = par::map(rows.div_ceil(span), |si| {
            let mut acc = vec![0.0f64; c];
            let end = ((si + 1) * span).min(rows);
            let dys = &dy.data()[si * span * c..end * c];
            let xs = &xhat[si * span * c..end * c];
            for (dr, xr) in dys.chunks_exact(c).zip(xs.chunks_exact(c)) {
                for ((a, d), x) in acc.iter_mut().zip(dr).zip(xr) {
                    *a += (d * x) as f64;
                }
            }
            acc
        });
        let mut total = vec![0.0f64; c];
        for part in partials {
            for (a, b) in total.iter_mut().zip(part) {
                *a += b;
            }
        }
        total
    };
    let input = want_input.then(|| {
        // dx = k_dy * dy + k_x * xhat + k_0 per channel
        let inv_n = 1.0 / rows as f64;
        let k_dy: Vec<f32> = (0..c).map(|ch| g[ch] * cache.inv_std[ch]).collect();
        let k_0: Vec<f32> = (0..c).map(|ch| (-inv_n * dbeta[ch] * k_dy[ch] as f64) as f32).collect();
        let k_x: Vec<f32> = (0..c)
            .map(|ch| (-inv_n * dgamma[ch] * k_dy[ch] as f64) as f32)
            .collect();
        let mut dx = vec![0.0f32; dy.data().len()];
        let span = par::span_len(rows);
        par::for_each_chunk_mut(&mut dx, span * c, |ci, d| {
            let base = ci * span * c;
            let dys = &dy.data()[base..base + d.len()];
            let xs = &xhat[base..base + d.len()];
            for ((row, dr), xr) in d.chunks_exact_mut(c).zip(dys.chunks_exact(c)).zip(xs.chunks_exact(c)) {
                for (ch, v) in row.iter_mut().enumerate() {
                    *v = k_dy[ch] * dr[ch] + k_x[ch] * xr[ch] + k_0[ch];
                }
            }
        });
        Tensor::from_vec(dy.shape(), dx).expect("bn grad shape")
    });
    let (gamma_grad, beta_grad) = if want_params {
        (
            gamma.map(|_| dgamma.iter().map(|&v| v as f32).collect()),
            Some(dbeta.iter().map(|&v| v as f32).collect()),
        )
    } else {
        (None, None)
    };
    BnGrads {
        gamma: gamma_grad,
        beta: beta_grad,
        input,
    }
}

// ---------------------------------------------------------------------------
// pooling

pub(crate) fn max_pool_forward(x: &Tensor, win: &Window) -> (Tensor, Vec<u32>) {
    let (n, c) = (x.batch(), x.channels());
    let per = win.out_h * win.out_w * c;
    let mut out = vec![0.0f32; n * per];
    let mut arg = vec![0u32; n * per];
    par::for_each_chunk_pair_mut(&mut out, per, &mut arg, per, |s, o, a| {
        let xs = x.sample(s);
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let base = (oy * win.out_w + ox) * c;
                let (o, a) = (&mut o[base..base + c], &mut a[base..base + c]);
                let mut first = true;
                for ky in 0..win.kh {
                    let Some(iy) = win.in_row(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.in_col(ox, kx) else { continue };
                        let i0 = (iy * win.in_w + ix) * c;
                        let src = &xs[i0..i0 + c];
                        if first {
                            o.copy_from_slice(src);
                            for (ch, ai) in a.iter_mut().enumerate() {
                                *ai = (i0 + ch) as u32;
                            }
                            first = false;
                            continue;
                        }
                        for (ch, ((ov, ai), v)) in o.iter_mut().zip(a.iter_mut()).zip(src).enumerate() {
                            if *v > *ov {
                                *ov = *v;
                                *ai = (i0 + ch) as u32;
                            }
                        }
                    }
                }
                assert!(!first, "pooling window covers at least one input");
            }
        }
    });
    (
        Tensor::from_vec([n, win.out_h, win.out_w, c], out).expect("pool shape"),
        arg,
    )
}

pub(crate) fn max_pool_backward(dy: &Tensor, argmax: &[u32], input_shape: [usize; 4]) -> Tensor {
    let per_in = input_shape[1] * input_shape[2] * input_shape[3];
    let per_out = dy.sample_len();
    let mut dx = vec![0.0f32; input_shape[0] * per_in];
    par::for_each_chunk_mut(&mut dx, per_in, |s, d| {
        let g = dy.sample(s);
        let a = &argmax[s * per_out..(s + 1) * per_out];
        for (v, &i) in g.iter().zip(a) {
            d[i as usize] += v;
        }
    });
    Tensor::from_vec(input_shape, dx).expect("pool grad shape")
}

fn valid_count(win: &Window, oy: usize, ox: usize) -> usize {
    let rows = (0..win.kh).filter(|&ky| win.in_row(oy, ky).is_some()).count();
    let cols = (0..win.kw).filter(|&kx| win.in_col(ox, kx).is_some()).count();
    rows * cols
}

pub(crate) fn avg_pool_forward(x: &Tensor, win: &Window) -> Tensor {
    let (n, c) = (x.batch(), x.channels());
    let per = win.out_h * win.out_w * c;
    let mut out = vec![0.0f32; n * per];
    par::for_each_chunk_mut(&mut out, per, |s, o| {
        let xs = x.sample(s);
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let base = (oy * win.out_w + ox) * c;
                let dst = &mut o[base..base + c];
                for ky in 0..win.kh {
                    let Some(iy) = win.in_row(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.in_col(ox, kx) else { continue };
                        let src = &xs[(iy * win.in_w + ix) * c..(iy * win.in_w + ix + 1) * c];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                let inv = 1.0 / valid_count(win, oy, ox).max(1) as f32;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
    });
    Tensor::from_vec([n, win.out_h, win.out_w, c], out).expect("pool shape")
}

pub(crate) fn avg_pool_backward(dy: &Tensor, win: &Window, input_shape: [usize; 4]) -> Tensor {
    let c = input_shape[3];
    let per_in = input_shape[1] * input_shape[2] * c;
    let mut dx = vec![0.0f32; input_shape[0] * per_in];
    par::for_each_chunk_mut(&mut dx, per_in, |s, d| {
        let g = dy.sample(s);
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let base = (oy * win.out_w + ox) * c;
                let inv = 1.0 / valid_count(win, oy, ox).max(1) as f32;
                for ky in 0..win.kh {
                    let Some(iy) = win.in_row(oy, ky) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.in_col(ox, kx) else { continue };
                        let dst = &mut d[(iy * win.in_w + ix) * c..(iy * win.in_w + ix + 1) * c];
                        for (a, b) in dst.iter_mut().zip(&g[base..base + c]) {
                            *a += b * inv;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(input_shape, dx).expect("pool grad shape")
}

pub(crate) fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let (n, c) = (x.batch(), x.channels());
    let hw = x.height() * x.width();
    let mut out = vec![0.0f32; n * c];
    for s in 0..n {
        let o = &mut out[s * c..(s + 1) * c];
        for px in x.sample(s).chunks(c) {
            for (a, b) in o.iter_mut().zip(px) {
                *a += b;
            }
        }
        o.iter_mut().for_each(|v| *v /= hw as f32);
    }
    Tensor::from_rows(n, c, out).expect("gap shape")
}

pub(crate) fn global_avg_pool_backward(dy: &Tensor, input_shape: [usize; 4]) -> Tensor {
    let c = input_shape[3];
    let hw = input_shape[1] * input_shape[2];
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for s in 0..input_shape[0] {
        let g: Vec<f32> = dy.sample(s).iter().map(|v| v / hw as f32).collect();
        for _ in 0..hw {
            dx.extend_from_slice(&g[..c]);
        }
    }
    Tensor::from_vec(input_shape, dx).expect("gap grad shape")
}

// ---------------------------------------------------------------------------
// dense

pub(crate) fn dense_forward(x: &Tensor, kernel: &[f32], bias: Option<&[f32]>, units: usize) -> Tensor {
    let n = x.batch();
    let d = x.sample_len();
    let mut out = vec![0.0f32; n * units];
    gemm(Mat::new(x.data(), n, d), Mat::new(kernel, d, units), &mut out, false);
    if let Some(b) = bias {
        for row in out.chunks_mut(units) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    Tensor::from_rows(n, units, out).expect("dense shape")
}

pub(crate) fn dense_backward(
    x: &Tensor,
    kernel: &[f32],
    has_bias: bool,
    dy: &Tensor,
    want_params: bool,
    want_input: bool,
) -> ConvGrads {
    let n = x.batch();
    let d = x.sample_len();
    let units = dy.sample_len();
    let (dk, db) = if want_params {
        let mut dk = vec![0.0f32; d * units];
        gemm(
            Mat::new(x.data(), n, d).t(),
            Mat::new(dy.data(), n, units),
            &mut dk,
            false,
        );
        let db = has_bias.then(|| {
            let mut db = vec![0.0f32; units];
            for row in dy.data().chunks(units) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
            db
        });
        (Some(dk), db)
    } else {
        (None, None)
    };
    let input = want_input.then(|| {
        let mut dx = vec![0.0f32; n * d];
        gemm(
            Mat::new(dy.data(), n, units),
            Mat::new(kernel, d, units).t(),
            &mut dx,
            false,
        );
        Tensor::from_vec(x.shape(), dx).expect("dense grad shape")
    });
    ConvGrads {
        kernel: dk,
        bias: db,
        input,
    }
}

// ---------------------------------------------------------------------------
// concat

pub(crate) fn concat_forward(parts: &[&Tensor]) -> Tensor {
    let [n, h, w, _] = parts[0].shape();
    let total: usize = parts.iter().map(|t| t.channels()).sum();
    let mut out = Vec::with_capacity(n * h * w * total);
    for px in 0..n * h * w {
        for t in parts {
            let c = t.channels();
            out.extend_from_slice(&t.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::from_vec([n, h, w, total], out).expect("concat shape")
}

pub(crate) fn concat_backward(dy: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let [n, h, w, total] = dy.shape();
    let mut outs: Vec<Vec<f32>> = channels.iter().map(|c| Vec::with_capacity(n * h * w * c)).collect();
    for px in 0..n * h * w {
        let row = &dy.data()[px * total..(px + 1) * total];
        let mut off = 0;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([n, h, w, c], d).expect("concat grad shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor, kernel: &[f32], win: &Window, filters: usize) -> Vec<f32> {
        let c = x.channels();
        let mut out = vec![0.0; x.batch() * win.out_h * win.out_w * filters];
        for s in 0..x.batch() {
            for oy in 0..win.out_h {
                for ox in 0..win.out_w {
                    for f in 0..filters {
                        let mut acc = 0.0;
                        for ky in 0..win.kh {
                            for kx in 0..win.kw {
                                let (Some(iy), Some(ix)) = (win.in_row(oy, ky), win.in_col(ox, kx)) else {
                                    continue;
                                };
                                for ch in 0..c {
                                    acc += x.sample(s)[(iy * win.in_w + ix) * c + ch]
                                        * kernel[((ky * win.kw + kx) * c + ch) * filters + f];
                                }
                            }
                        }
                        out[((s * win.out_h + oy) * win.out_w + ox) * filters + f] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 7919 % 97) as f32 / 97.0 - 0.5) * scale).collect()
    }

    #[test]
    fn window_sizes_follow_padding_rules() {
        let w = Window::new(224, 224, (7, 7), (2, 2), Padding::Explicit(3)).unwrap();
        assert_eq!((w.out_h, w.out_w), (112, 112));
        let w = Window::new(5, 5, (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((w.out_h, w.pad_top), (3, 1));
        let w = Window::new(299, 299, (3, 3), (2, 2), Padding::Valid).unwrap();
        assert_eq!(w.out_h, 149);
        assert!(Window::new(2, 2, (3, 3), (1, 1), Padding::Valid).is_none());
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (kernel, stride, padding) in [
            ((3, 3), (1, 1), Padding::Same),
            ((5, 3), (2, 1), Padding::Valid),
            ((1, 1), (1, 1), Padding::Valid),
            ((3, 3), (2, 2), Padding::Explicit(1)),
        ] {
            let x = Tensor::from_vec([3, 7, 6, 4], ramp(3 * 7 * 6 * 4, 2.0)).unwrap();
            let win = Window::new(7, 6, kernel, stride, padding).unwrap();
            let filters = 5;
            let k = ramp(kernel.0 * kernel.1 * 4 * filters, 1.0);
            let out = conv_forward(&x, &k, None, &win, filters, true);
            let expected = direct_conv(&x, &k, &win, filters);
            for (a, b) in out.y.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-4, "{kernel:?} {padding:?}: {a} vs {b}");
            }
        }
    }

    /// Finite-difference check of the conv input and kernel gradients.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = Tensor::from_vec([2, 5, 5, 2], ramp(100, 2.0)).unwrap();
        let win = Window::new(5, 5, (3, 3), (2, 2), Padding::Same).unwrap();
        let filters = 3;
        let k = ramp(3 * 3 * 2 * filters, 1.0);
        let probe = ramp(2 * win.out_h * win.out_w * filters, 3.0);
        let loss = |x: &Tensor, k: &[f32]| -> f64 {
            let y = conv_forward(x, k, None, &win, filters, false).y;
            y.data().iter().zip(&probe).map(|(a, b)| (a * b) as f64).sum()
        };
        let out = conv_forward(&x, &k, None, &win, filters, true);
        let dy = Tensor::from_vec(out.y.shape(), probe.clone()).unwrap();
        let g = conv_backward(&x, out.cols.as_deref(), &k, false, &win, filters, &dy, true, true);
        let dx = g.input.unwrap();
        let dk = g.kernel.unwrap();
        let eps = 1e-2f32;
        for i in [0, 13, 57, 99] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * eps as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 1e-2, "dx[{i}]");
        }
        for i in [0, 7, 30, 53] {
            let mut kp = k.clone();
            kp[i] += eps;
            let mut km = k.clone();
            km[i] -= eps;
            let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * eps as f64);
            assert!((fd - dk[i] as f64).abs() < 1e-2, "dk[{i}]");
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let x = Tensor::from_vec([4, 2, 2, 3], ramp(48, 3.0)).unwrap();
        let gamma = vec![1.5, 0.5, -0.7];
        let beta = vec![0.1, 0.2, 0.3];
        let zeros = vec![0.0; 3];
        let ones = vec![1.0; 3];
        let probe = ramp(48, 1.7);
        let loss = |x: &Tensor| -> f64 {
            let y = bn_forward(x, Some(&gamma), &beta, (&zeros, &ones), 1e-3, true).y;
            y.data().iter().zip(&probe).map(|(a, b)| (a * b) as f64).sum()
        };
        let out = bn_forward(&x, Some(&gamma), &beta, (&zeros, &ones), 1e-3, true);
        let dy = Tensor::from_vec(x.shape(), probe.clone()).unwrap();
        let g = bn_backward(&dy, &out.cache, Some(&gamma), true, true);
        let dx = g.input.unwrap();
        let eps = 1e-2f32;
        for i in [0, 5, 17, 40] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data()[i] as f64).abs() < 2e-2,
                "dx[{i}] {fd} vs {}",
                dx.data()[i]
            );
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let win = Window::new(2, 2, (2, 2), (2, 2), Padding::Valid).unwrap();
        let (y, arg) = max_pool_forward(&x, &win);
        assert_eq!(y.data(), &[4.0]);
        let dx = max_pool_backward(&Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap(), &arg, x.shape());
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_same_excludes_padding() {
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let win = Window::new(2, 2, (3, 3), (1, 1), Padding::Same).unwrap();
        let y = avg_pool_forward(&x, &win);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn concat_round_trips_channels() {
        let a = Tensor::from_vec([1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_forward(&[&a, &b]);
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_backward(&y, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
