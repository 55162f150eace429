//! 3D convolution kernels: forward, input-gradient, kernel-gradient, bias
//! reduction.
//!
//! One geometry serves both directions: a transpose convolution's forward
//! pass IS `backward_input` of the matching convolution, its input gradient
//! IS `forward`, and its kernel gradient reuses `backward_kernel` with the
//! roles of activation and gradient swapped. Inner loops run along the
//! contiguous W axis so they autovectorize.
//!
//! Layouts: activations `[N, C, D, H, W]`, conv kernels `[F, C, kd, kh, kw]`
//! (a transpose convolution mapping Cin -> Cout stores `[Cin, Cout, k...]`).
//! Each output slab is written by exactly one task, so parallel runs are
//! bitwise identical to serial ones.

use super::Scalar;
use rayon::prelude::*;

/// Uniform stride / zero-padding / dilation over the three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec { stride: 1, padding: 0, dilation: 1 }
    }

    /// `floor((in + 2p - dil*(k-1) - 1) / stride) + 1`, `None` if empty.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Transpose-direction extent: `(in-1)*stride - 2p + dil*(k-1) + 1`.
    pub fn transpose_out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let grown = (input - 1) * self.stride + self.dilation * (kernel - 1) + 1;
        grown.checked_sub(2 * self.padding).filter(|&v| v >= 1)
    }
}

/// Resolved convolution geometry shared by all four kernels. `in_*` always
/// refers to the convolution view (the large side for transpose use).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvGeometry {
    pub fn in_spatial_len(&self) -> usize {
        self.in_sp.iter().product()
    }

    pub fn out_spatial_len(&self) -> usize {
        self.out_sp.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Total multiply-accumulate count; small problems skip the thread pool.
    fn flops(&self) -> usize {
        self.batch * self.out_ch * self.in_ch * self.out_spatial_len() * self.kernel_len()
    }
}

/// Below this many MACs the rayon dispatch costs more than the math.
const PAR_THRESHOLD: usize = 1 << 16;

/// Runs `body` over enumerated chunks, in parallel only when above the
/// threshold. Both paths visit identical (index, chunk) pairs, and every
/// chunk is written by exactly one call, so results match bitwise.
fn for_each_chunk<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    chunk: usize,
    parallel: bool,
    body: F,
) {
    if parallel {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| body(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| body(i, c));
    }
}

/// Half-open output range where `o*stride + offset` lands inside
/// `[0, in_extent)`; empty ranges come back as `(1, 0)`.
#[inline]
fn valid_out_range(offset: isize, in_extent: usize, stride: usize, out_extent: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0usize
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_incl = in_extent as isize - 1 - offset;
    if hi_incl < 0 {
        return (1, 0);
    }
    let hi_open = (hi_incl as usize / stride + 1).min(out_extent);
    let lo = lo.min(out_extent);
    if lo >= hi_open {
        (1, 0)
    } else {
        (lo, hi_open)
    }
}

struct TapIter {
    kernel: [usize; 3],
    dil: usize,
    pad: isize,
}

impl TapIter {
    fn offsets(&self) -> impl Iterator<Item = (usize, [isize; 3])> + '_ {
        let [kd, kh, kw] = self.kernel;
        (0..kd).flat_map(move |zd| {
            (0..kh).flat_map(move |zh| {
                (0..kw).map(move |zw| {
                    let tap = (zd * kh + zh) * kw + zw;
                    let off = [
                        (zd * self.dil) as isize - self.pad,
                        (zh * self.dil) as isize - self.pad,
                        (zw * self.dil) as isize - self.pad,
                    ];
                    (tap, off)
                })
            })
        })
    }
}

/// y[n,f,o] = bias[f] + sum_c sum_k x[n,c,o*s - p + k*dil] * w[f,c,k]
pub fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let in_len = g.in_spatial_len();
    let out_len = g.out_spatial_len();
    debug_assert_eq!(x.len(), g.batch * g.in_ch * in_len);
    debug_assert_eq!(w.len(), g.out_ch * g.in_ch * g.kernel_len());
    debug_assert_eq!(y.len(), g.batch * g.out_ch * out_len);
    let k_len = g.kernel_len();
    let s = g.spec.stride;
    let taps = TapIter {
        kernel: g.kernel,
        dil: g.spec.dilation,
        pad: g.spec.padding as isize,
    };
    let [_, hh, ww] = g.in_sp;
    let [od_n, oh_n, ow_n] = g.out_sp;

    for_each_chunk(y, out_len, g.flops() >= PAR_THRESHOLD, |nf, slab| {
        let n = nf / g.out_ch;
        let f = nf % g.out_ch;
        slab.fill(bias.map(|b| b[f]).unwrap_or(T::ZERO));
        for c in 0..g.in_ch {
            let x_slab = &x[(n * g.in_ch + c) * in_len..][..in_len];
            let w_taps = &w[(f * g.in_ch + c) * k_len..][..k_len];
            for (tap, [offd, offh, offw]) in taps.offsets() {
                let wv = w_taps[tap];
                let (lo_d, hi_d) = valid_out_range(offd, g.in_sp[0], s, od_n);
                let (lo_h, hi_h) = valid_out_range(offh, g.in_sp[1], s, oh_n);
                let (lo_w, hi_w) = valid_out_range(offw, g.in_sp[2], s, ow_n);
                if lo_w >= hi_w {
                    continue;
                }
                for od in lo_d..hi_d {
                    let id = ((od * s) as isize + offd) as usize;
                    for oh in lo_h..hi_h {
                        let ih = ((oh * s) as isize + offh) as usize;
                        let x_base = (id * hh + ih) * ww;
                        let out_row = &mut slab[(od * oh_n + oh) * ow_n..][lo_w..hi_w];
                        if s == 1 {
                            let iw0 = (lo_w as isize + offw) as usize;
                            let x_row = &x_slab[x_base + iw0..][..hi_w - lo_w];
                            for (yo, xv) in out_row.iter_mut().zip(x_row) {
                                *yo += wv * *xv;
                            }
                        } else {
                            for (ow, yo) in (lo_w..hi_w).zip(out_row.iter_mut()) {
                                let iw = ((ow * s) as isize + offw) as usize;
                                *yo += wv * x_slab[x_base + iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// gx[n,c,i] += sum_f sum_k w[f,c,k] * gy[n,f,o] where i = o*s - p + k*dil.
/// Also the forward pass of the transpose convolution.
pub fn backward_input<T: Scalar>(g: &ConvGeometry, gy: &[T], w: &[T], gx: &mut [T]) {
    let in_len = g.in_spatial_len();
    let out_len = g.out_spatial_len();
    debug_assert_eq!(gy.len(), g.batch * g.out_ch * out_len);
    debug_assert_eq!(gx.len(), g.batch * g.in_ch * in_len);
    let k_len = g.kernel_len();
    let s = g.spec.stride;
    let taps = TapIter {
        kernel: g.kernel,
        dil: g.spec.dilation,
        pad: g.spec.padding as isize,
    };
    let [_, hh, ww] = g.in_sp;
    let [od_n, oh_n, ow_n] = g.out_sp;

    for_each_chunk(gx, in_len, g.flops() >= PAR_THRESHOLD, |nc, slab| {
        let n = nc / g.in_ch;
        let c = nc % g.in_ch;
        slab.fill(T::ZERO);
        for f in 0..g.out_ch {
            let gy_slab = &gy[(n * g.out_ch + f) * out_len..][..out_len];
            let w_taps = &w[(f * g.in_ch + c) * k_len..][..k_len];
            for (tap, [offd, offh, offw]) in taps.offsets() {
                let wv = w_taps[tap];
                let (lo_d, hi_d) = valid_out_range(offd, g.in_sp[0], s, od_n);
                let (lo_h, hi_h) = valid_out_range(offh, g.in_sp[1], s, oh_n);
                let (lo_w, hi_w) = valid_out_range(offw, g.in_sp[2], s, ow_n);
                if lo_w >= hi_w {
                    continue;
                }
                for od in lo_d..hi_d {
                    let id = ((od * s) as isize + offd) as usize;
                    for oh in lo_h..hi_h {
                        let ih = ((oh * s) as isize + offh) as usize;
                        let gx_base = (id * hh + ih) * ww;
                        let gy_row = &gy_slab[(od * oh_n + oh) * ow_n..][lo_w..hi_w];
                        if s == 1 {
                            let iw0 = (lo_w as isize + offw) as usize;
                            let gx_row = &mut slab[gx_base + iw0..][..hi_w - lo_w];
                            for (xo, gv) in gx_row.iter_mut().zip(gy_row) {
                                *xo += wv * *gv;
                            }
                        } else {
                            for (ow, gv) in (lo_w..hi_w).zip(gy_row) {
                                let iw = ((ow * s) as isize + offw) as usize;
                                slab[gx_base + iw] += wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// gw[f,c,k] = sum_n sum_o x[n,c,o*s - p + k*dil] * gy[n,f,o]
pub fn backward_kernel<T: Scalar>(g: &ConvGeometry, x: &[T], gy: &[T], gw: &mut [T]) {
    let in_len = g.in_spatial_len();
    let out_len = g.out_spatial_len();
    let k_len = g.kernel_len();
    debug_assert_eq!(gw.len(), g.out_ch * g.in_ch * k_len);
    let s = g.spec.stride;
    let taps = TapIter {
        kernel: g.kernel,
        dil: g.spec.dilation,
        pad: g.spec.padding as isize,
    };
    let [_, hh, ww] = g.in_sp;
    let [od_n, oh_n, ow_n] = g.out_sp;

    for_each_chunk(gw, k_len, g.flops() >= PAR_THRESHOLD, |fc, out_taps| {
        let f = fc / g.in_ch;
        let c = fc % g.in_ch;
        for (tap, [offd, offh, offw]) in taps.offsets() {
            let (lo_d, hi_d) = valid_out_range(offd, g.in_sp[0], s, od_n);
            let (lo_h, hi_h) = valid_out_range(offh, g.in_sp[1], s, oh_n);
            let (lo_w, hi_w) = valid_out_range(offw, g.in_sp[2], s, ow_n);
            let mut acc = T::ZERO;
            if lo_w < hi_w {
                for n in 0..g.batch {
                    let x_slab = &x[(n * g.in_ch + c) * in_len..][..in_len];
                    let gy_slab = &gy[(n * g.out_ch + f) * out_len..][..out_len];
                    for od in lo_d..hi_d {
                        let id = ((od * s) as isize + offd) as usize;
                        for oh in lo_h..hi_h {
                            let ih = ((oh * s) as isize + offh) as usize;
                            let x_base = (id * hh + ih) * ww;
                            let gy_row = &gy_slab[(od * oh_n + oh) * ow_n..][lo_w..hi_w];
                            if s == 1 {
                                let iw0 = (lo_w as isize + offw) as usize;
                                let x_row = &x_slab[x_base + iw0..][..hi_w - lo_w];
                                for (xv, gv) in x_row.iter().zip(gy_row) {
                                    acc += *xv * *gv;
                                }
                            } else {
                                for (ow, gv) in (lo_w..hi_w).zip(gy_row) {
                                    let iw = ((ow * s) as isize + offw) as usize;
                                    acc += x_slab[x_base + iw] * *gv;
                                }
                            }
                        }
                    }
                }
            }
            out_taps[tap] = acc;
        }
    });
}

/// gb[f] = sum over batch and spatial positions of gy.
pub fn backward_bias<T: Scalar>(batch: usize, channels: usize, spatial: usize, gy: &[T]) -> Vec<T> {
    let mut gb = vec![T::ZERO; channels];
    for n in 0..batch {
        for (f, out) in gb.iter_mut().enumerate() {
            let slab = &gy[(n * channels + f) * spatial..][..spatial];
            let mut acc = T::ZERO;
            for v in slab {
                acc += *v;
            }
            *out += acc;
        }
    }
    gb
}

/// Adds `bias[c]` to every spatial position of channel `c` in place.
pub fn add_channel_bias<T: Scalar>(batch: usize, channels: usize, spatial: usize, bias: &[T], y: &mut [T]) {
    for n in 0..batch {
        for (c, &b) in bias.iter().enumerate() {
            for v in &mut y[(n * channels + c) * spatial..][..spatial] {
                *v += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        in_sp: [usize; 3],
        kernel: [usize; 3],
        spec: ConvSpec,
    ) -> ConvGeometry {
        let out_sp = [
            spec.out_extent(in_sp[0], kernel[0]).unwrap(),
            spec.out_extent(in_sp[1], kernel[1]).unwrap(),
            spec.out_extent(in_sp[2], kernel[2]).unwrap(),
        ];
        ConvGeometry { batch, in_ch, out_ch, in_sp, out_sp, kernel, spec }
    }

    #[test]
    fn all_ones_3x3x3_sums_to_27() {
        let g = geometry(1, 1, 1, [3, 3, 3], [3, 3, 3], ConvSpec::unit());
        assert_eq!(g.out_sp, [1, 1, 1]);
        let x = vec![1.0f64; 27];
        let w = vec![1.0f64; 27];
        let mut y = vec![0.0f64; 1];
        forward(&g, &x, &w, None, &mut y);
        assert_eq!(y[0], 27.0);
    }

    #[test]
    fn identity_kernel_with_padding() {
        let spec = ConvSpec { stride: 1, padding: 1, dilation: 1 };
        let g = geometry(1, 1, 1, [4, 3, 5], [3, 3, 3], spec);
        assert_eq!(g.out_sp, [4, 3, 5]);
        let x: Vec<f64> = (0..60).map(|i| i as f64 * 0.5 - 7.0).collect();
        let mut w = vec![0.0f64; 27];
        w[13] = 1.0; // center tap
        let mut y = vec![0.0f64; 60];
        forward(&g, &x, &w, None, &mut y);
        assert_eq!(x, y);
    }

    #[test]
    fn shape_formula_matches_brute_scan() {
        // Exhaustive over small extents, strides, pads, dilations.
        for input in 1..=8usize {
            for kernel in 1..=3usize {
                for stride in 1..=3usize {
                    for padding in 0..=2usize {
                        for dilation in 1..=2usize {
                            let spec = ConvSpec { stride, padding, dilation };
                            let span = dilation * (kernel - 1) + 1;
                            let padded = input + 2 * padding;
                            let expected = if padded >= span {
                                Some((padded - span) / stride + 1)
                            } else {
                                None
                            };
                            assert_eq!(spec.out_extent(input, kernel), expected);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_extent_doubles_with_stride2_k4_p1() {
        let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
        for d in 1..=16 {
            assert_eq!(spec.transpose_out_extent(d, 4), Some(2 * d));
        }
    }
}
