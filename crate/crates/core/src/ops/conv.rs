//! 2-D convolution (stride 1, zero "same" padding) with hand-written
//! forward and backward kernels.
//!
//! The 3x3 and 1x1 cases carry the entire training cost, so both get
//! register-tiled kernels (4 output channels x up to 16 pixels per tile);
//! other odd kernel sizes fall back to plain loops. The backward pass for
//! the input gradient is expressed as a forward convolution against the
//! flipped, channel-transposed kernel so it reuses the same fast path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

fn check_kernel(kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) {
        return Err(Error::shape(
            "conv2d kernel",
            "[c_out, c_in, k, k]",
            format!("{:?}", kernel.shape()),
        ));
    }
    let (co, ci, k) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel size must be odd, got {k}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::shape("conv2d bias", format!("[{co}]"), format!("{:?}", bias.shape())));
    }
    Ok((co, ci, k))
}

/// Cross-correlation with bias, spatial size preserved.
///
/// `input` is `[c_in, h, w]` or batched `[n, c_in, h, w]` (the batch
/// dimension is handled by looping).
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (co, ci, k) = check_kernel(kernel, bias)?;
    match input.rank() {
        3 => {
            if input.dim(0) != ci {
                return Err(Error::shape(
                    "conv2d input channels",
                    ci,
                    input.dim(0),
                ));
            }
            let (h, w) = (input.dim(1), input.dim(2));
            let mut out = Tensor::zeros(&[co, h, w]);
            conv_same(
                input.data(),
                kernel.data(),
                Some(bias.data()),
                out.data_mut(),
                ci,
                co,
                h,
                w,
                k,
            );
            Ok(out)
        }
        4 => {
            if input.dim(1) != ci {
                return Err(Error::shape("conv2d input channels", ci, input.dim(1)));
            }
            let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
            let mut out = Tensor::zeros(&[n, co, h, w]);
            let in_stride = ci * h * w;
            let out_stride = co * h * w;
            for b in 0..n {
                conv_same(
                    &input.data()[b * in_stride..(b + 1) * in_stride],
                    kernel.data(),
                    Some(bias.data()),
                    &mut out.data_mut()[b * out_stride..(b + 1) * out_stride],
                    ci,
                    co,
                    h,
                    w,
                    k,
                );
            }
            Ok(out)
        }
        r => Err(Error::shape("conv2d input", "rank 3 or 4", format!("rank {r}"))),
    }
}

/// Gradients of a same-padded conv w.r.t. input, kernel and bias.
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (co, ci, k) = {
        if kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0 {
            return Err(Error::shape(
                "conv2d_backward kernel",
                "[c_out, c_in, k, k] with odd k",
                format!("{:?}", kernel.shape()),
            ));
        }
        (kernel.dim(0), kernel.dim(1), kernel.dim(2))
    };
    if grad_out.rank() != input.rank() {
        return Err(Error::shape(
            "conv2d_backward grad_out rank",
            input.rank(),
            grad_out.rank(),
        ));
    }

    // Flipped, channel-transposed kernel: grad_input = conv_same(grad_out, ker_t).
    let mut ker_t = vec![0.0; ci * co * k * k];
    {
        let kd = kernel.data();
        for o in 0..co {
            for i in 0..ci {
                for a in 0..k {
                    for b in 0..k {
                        ker_t[((i * co + o) * k + a) * k + b] =
                            kd[((o * ci + i) * k + (k - 1 - a)) * k + (k - 1 - b)];
                    }
                }
            }
        }
    }

    let batched = input.rank() == 4;
    let n = if batched { input.dim(0) } else { 1 };
    let (h, w) = if batched {
        (input.dim(2), input.dim(3))
    } else {
        (input.dim(1), input.dim(2))
    };
    let expect_go: &[usize] = if batched {
        &[n, co, h, w]
    } else {
        &[co, h, w]
    };
    if grad_out.shape() != expect_go {
        return Err(Error::shape(
            "conv2d_backward grad_out",
            format!("{expect_go:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = Tensor::zeros(&[co]);

    let in_stride = ci * h * w;
    let out_stride = co * h * w;
    for b in 0..n {
        let ind = &input.data()[b * in_stride..(b + 1) * in_stride];
        let god = &grad_out.data()[b * out_stride..(b + 1) * out_stride];

        for o in 0..co {
            grad_bias.data_mut()[o] += god[o * h * w..(o + 1) * h * w].iter().sum::<f64>();
        }
        conv_same(
            god,
            &ker_t,
            None,
            &mut grad_input.data_mut()[b * in_stride..(b + 1) * in_stride],
            co,
            ci,
            h,
            w,
            k,
        );
        conv_grad_kernel(ind, god, grad_kernel.data_mut(), ci, co, h, w, k);
    }

    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

/// Zero-pad one image `[c, h, w]` by `p` on each spatial side.
fn pad_image(src: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let dst = ch * hp * wp + (y + p) * wp + p;
            let s = ch * h * w + y * w;
            out[dst..dst + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Dispatch: same-padded correlation of one image, any odd k.
#[allow(clippy::too_many_arguments)]
fn conv_same(
    input: &[f64],
    ker: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    match k {
        1 => conv1x1(input, ker, bias, out, ci_n, co_n, h * w),
        3 => {
            let inpad = pad_image(input, ci_n, h, w, 1);
            conv3x3(&inpad, ker, bias, out, ci_n, co_n, h, w);
        }
        _ => {
            let p = k / 2;
            let inpad = pad_image(input, ci_n, h, w, p);
            conv_naive(&inpad, ker, bias, out, ci_n, co_n, h, w, k);
        }
    }
}

/// Reference-style loops for arbitrary odd k on a padded input.
#[allow(clippy::too_many_arguments)]
fn conv_naive(
    inpad: &[f64],
    ker: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for o in 0..co_n {
        let b = bias.map_or(0.0, |bs| bs[o]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for i in 0..ci_n {
                    for a in 0..k {
                        let irow = i * hp * wp + (y + a) * wp + x;
                        let krow = ((o * ci_n + i) * k + a) * k;
                        for bx in 0..k {
                            acc += ker[krow + bx] * inpad[irow + bx];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
}

/// One output tile: 4 output channels x `NW` horizontally adjacent pixels.
#[inline]
fn conv3x3_tile<const NW: usize>(
    inpad: &[f64],
    ker: &[f64],
    init: [f64; 4],
    out: &mut [f64],
    ci_n: usize,
    co: usize,
    hw: usize,
    wp: usize,
    hpwp: usize,
    y: usize,
    x: usize,
    w: usize,
) {
    let mut acc = [[0.0f64; NW]; 4];
    for r in 0..4 {
        acc[r] = [init[r]; NW];
    }
    let kstep = ci_n * 9;
    for ci in 0..ci_n {
        let ibase = ci * hpwp + y * wp + x;
        let kbase = (co * ci_n + ci) * 9;
        for dy in 0..3 {
            let irow = &inpad[ibase + dy * wp..ibase + dy * wp + NW + 2];
            for dx in 0..3 {
                let iseg: &[f64; NW] = irow[dx..dx + NW].try_into().unwrap();
                let kt = kbase + dy * 3 + dx;
                let kw = [ker[kt], ker[kt + kstep], ker[kt + 2 * kstep], ker[kt + 3 * kstep]];
                for r in 0..4 {
                    for l in 0..NW {
                        acc[r][l] += kw[r] * iseg[l];
                    }
                }
            }
        }
    }
    for r in 0..4 {
        let base = (co + r) * hw + y * w + x;
        out[base..base + NW].copy_from_slice(&acc[r]);
    }
}

/// Tiled 3x3 same-padded correlation of one image.
fn conv3x3(
    inpad: &[f64],
    ker: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
) {
    let wp = w + 2;
    let hpwp = (h + 2) * wp;
    let hw = h * w;
    let mut co = 0;
    while co + 4 <= co_n {
        let init = match bias {
            Some(bs) => [bs[co], bs[co + 1], bs[co + 2], bs[co + 3]],
            None => [0.0; 4],
        };
        for y in 0..h {
            let mut x = 0;
            while x + 16 <= w {
                conv3x3_tile::<16>(inpad, ker, init, out, ci_n, co, hw, wp, hpwp, y, x, w);
                x += 16;
            }
            while x + 8 <= w {
                conv3x3_tile::<8>(inpad, ker, init, out, ci_n, co, hw, wp, hpwp, y, x, w);
                x += 8;
            }
            if x < w {
                conv3x3_scalar(inpad, ker, init, out, ci_n, co, 4, hw, wp, hpwp, y, x, w);
            }
        }
        co += 4;
    }
    if co < co_n {
        let rem = co_n - co;
        let mut init = [0.0; 4];
        if let Some(bs) = bias {
            init[..rem].copy_from_slice(&bs[co..co_n]);
        }
        for y in 0..h {
            conv3x3_scalar(inpad, ker, init, out, ci_n, co, rem, hw, wp, hpwp, y, 0, w);
        }
    }
}

/// Scalar remainder: `n_co` channels (<= 4), columns `x..w` of row `y`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv3x3_scalar(
    inpad: &[f64],
    ker: &[f64],
    init: [f64; 4],
    out: &mut [f64],
    ci_n: usize,
    co: usize,
    n_co: usize,
    hw: usize,
    wp: usize,
    hpwp: usize,
    y: usize,
    x0: usize,
    w: usize,
) {
    for r in 0..n_co {
        for x in x0..w {
            let mut acc = init[r];
            for ci in 0..ci_n {
                let ibase = ci * hpwp + y * wp + x;
                let kbase = ((co + r) * ci_n + ci) * 9;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += ker[kbase + dy * 3 + dx] * inpad[ibase + dy * wp + dx];
                    }
                }
            }
            out[(co + r) * hw + y * w + x] = acc;
        }
    }
}

/// 1x1 convolution: a per-pixel channel mix.
fn conv1x1(
    input: &[f64],
    ker: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    ci_n: usize,
    co_n: usize,
    hw: usize,
) {
    for o in 0..co_n {
        let orow = &mut out[o * hw..(o + 1) * hw];
        orow.fill(bias.map_or(0.0, |bs| bs[o]));
        for i in 0..ci_n {
            let wv = ker[o * ci_n + i];
            let irow = &input[i * hw..(i + 1) * hw];
            for (ov, iv) in orow.iter_mut().zip(irow) {
                *ov += wv * *iv;
            }
        }
    }
}

/// Kernel gradient of the 3x3 case, tiled: for each (ci, dy) the twelve
/// (4 channels x 3 taps) vector accumulators run over all pixels.
fn conv_grad_kernel(
    input: &[f64],
    grad_out: &[f64],
    gk: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    if k != 3 {
        conv_grad_kernel_naive(input, grad_out, gk, ci_n, co_n, h, w, k);
        return;
    }
    let inpad = pad_image(input, ci_n, h, w, 1);
    let wp = w + 2;
    let hpwp = (h + 2) * wp;
    let hw = h * w;
    let mut co = 0;
    while co + 4 <= co_n {
        for ci in 0..ci_n {
            for dy in 0..3 {
                let mut acc = [[[0.0f64; 8]; 3]; 4];
                let mut tail = [[0.0f64; 3]; 4];
                for y in 0..h {
                    let gbase = y * w;
                    let ibase = ci * hpwp + (y + dy) * wp;
                    let mut x = 0;
                    while x + 8 <= w {
                        let irow = &inpad[ibase + x..ibase + x + 10];
                        let gseg: [&[f64; 8]; 4] = [
                            grad_out[co * hw + gbase + x..co * hw + gbase + x + 8].try_into().unwrap(),
                            grad_out[(co + 1) * hw + gbase + x..(co + 1) * hw + gbase + x + 8].try_into().unwrap(),
                            grad_out[(co + 2) * hw + gbase + x..(co + 2) * hw + gbase + x + 8].try_into().unwrap(),
                            grad_out[(co + 3) * hw + gbase + x..(co + 3) * hw + gbase + x + 8].try_into().unwrap(),
                        ];
                        for dx in 0..3 {
                            let iseg: &[f64; 8] = irow[dx..dx + 8].try_into().unwrap();
                            for r in 0..4 {
                                for l in 0..8 {
                                    acc[r][dx][l] += gseg[r][l] * iseg[l];
                                }
                            }
                        }
                        x += 8;
                    }
                    while x < w {
                        for dx in 0..3 {
                            let iv = inpad[ibase + x + dx];
                            for r in 0..4 {
                                tail[r][dx] += grad_out[(co + r) * hw + gbase + x] * iv;
                            }
                        }
                        x += 1;
                    }
                }
                for r in 0..4 {
                    for dx in 0..3 {
                        gk[(((co + r) * ci_n + ci) * 3 + dy) * 3 + dx] +=
                            acc[r][dx].iter().sum::<f64>() + tail[r][dx];
                    }
                }
            }
        }
        co += 4;
    }
    while co < co_n {
        for ci in 0..ci_n {
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut s = 0.0;
                    for y in 0..h {
                        let ibase = ci * hpwp + (y + dy) * wp + dx;
                        let gbase = co * hw + y * w;
                        for x in 0..w {
                            s += grad_out[gbase + x] * inpad[ibase + x];
                        }
                    }
                    gk[((co * ci_n + ci) * 3 + dy) * 3 + dx] += s;
                }
            }
        }
        co += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_kernel_naive(
    input: &[f64],
    grad_out: &[f64],
    gk: &mut [f64],
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    let inpad = pad_image(input, ci_n, h, w, p);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let hw = h * w;
    for o in 0..co_n {
        for i in 0..ci_n {
            for a in 0..k {
                for b in 0..k {
                    let mut s = 0.0;
                    for y in 0..h {
                        let ibase = i * hp * wp + (y + a) * wp + b;
                        let gbase = o * hw + y * w;
                        for x in 0..w {
                            s += grad_out[gbase + x] * inpad[ibase + x];
                        }
                    }
                    gk[((o * ci_n + i) * k + a) * k + b] += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: direct quadruple-loop correlation, no padding buffer.
    fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (ci, h, w) = (input.dim(0), input.dim(1), input.dim(2));
        let (co, k) = (kernel.dim(0), kernel.dim(2));
        let p = k / 2;
        let mut out = Tensor::zeros(&[co, h, w]);
        for o in 0..co {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[o];
                    for i in 0..ci {
                        for a in 0..k {
                            for b in 0..k {
                                let iy = y as isize + a as isize - p as isize;
                                let ix = x as isize + b as isize - p as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += kernel.data()[((o * ci + i) * k + a) * k + b]
                                        * input.data()[(i * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let input = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn ones_kernel_border_counts() {
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let kernel = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        // corners see 4 cells, edge-centers 6, center 9
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_oracle_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (ci, co, h, w, k) in [
            (1usize, 4usize, 5usize, 5usize, 3usize),
            (3, 7, 8, 8, 3),
            (2, 5, 4, 19, 3),
            (4, 4, 6, 9, 5),
            (5, 3, 7, 7, 1),
            (16, 8, 8, 32, 3),
        ] {
            let input = rand_tensor(&mut rng, &[ci, h, w]);
            let kernel = rand_tensor(&mut rng, &[co, ci, k, k]);
            let bias = rand_tensor(&mut rng, &[co]);
            let fast = conv2d(&input, &kernel, &bias).unwrap();
            let slow = conv_oracle(&input, &kernel, &bias);
            assert!(
                fast.max_abs_diff(&slow) < 1e-11,
                "mismatch at ci={ci} co={co} {h}x{w} k={k}"
            );
        }
    }

    #[test]
    fn batched_input_loops_over_leading_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let kernel = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let bias = rand_tensor(&mut rng, &[4]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        assert_eq!(out.shape(), &[2, 4, 6, 6]);
        for b in 0..2 {
            let single = Tensor::from_vec(
                &[3, 6, 6],
                input.data()[b * 108..(b + 1) * 108].to_vec(),
            )
            .unwrap();
            let o = conv2d(&single, &kernel, &bias).unwrap();
            assert_eq!(&out.data()[b * 144..(b + 1) * 144], o.data());
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let kernel = Tensor::zeros(&[1, 3, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d(&input, &kernel, &bias),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_even_kernel() {
        let input = Tensor::zeros(&[1, 4, 4]);
        let kernel = Tensor::zeros(&[1, 1, 2, 2]);
        let bias = Tensor::zeros(&[1]);
        assert!(conv2d(&input, &kernel, &bias).is_err());
    }

    #[test]
    fn backward_matches_sum_rules() {
        // With grad_out = all ones, grad_bias[o] = h*w and grad_kernel sums
        // shifted input windows; check against the naive path by comparing
        // k=3 fast path to the generic naive one on identical data.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = rand_tensor(&mut rng, &[3, 9, 11]);
        let kernel = rand_tensor(&mut rng, &[8, 3, 3, 3]);
        let grad_out = rand_tensor(&mut rng, &[8, 9, 11]);
        let fast = conv2d_backward(&input, &kernel, &grad_out).unwrap();

        let mut gk_naive = vec![0.0; kernel.len()];
        conv_grad_kernel_naive(
            input.data(),
            grad_out.data(),
            &mut gk_naive,
            3,
            8,
            9,
            11,
            3,
        );
        let gk_naive = Tensor::from_vec(kernel.shape(), gk_naive).unwrap();
        assert!(fast.kernel.max_abs_diff(&gk_naive) < 1e-11);

        for o in 0..8 {
            let s: f64 = grad_out.data()[o * 99..(o + 1) * 99].iter().sum();
            assert!((fast.bias.data()[o] - s).abs() < 1e-12);
        }
    }
}
