//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Convolutions loop directly over output rows with the innermost loop on the
//! contiguous W axis. Work is split over independent output planes, so every
//! output element is accumulated in the same order regardless of thread count.

use rayon::prelude::*;

use super::tensor::Real;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeom {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input_shape.len() != 5 || kernel_shape.len() != 5 {
            return Err(dim_err!(
                "conv3d expects 5-d input and kernel, got {input_shape:?} and {kernel_shape:?}"
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv3d stride must be >= 1"));
        }
        if input_shape[1] != kernel_shape[1] {
            return Err(dim_err!(
                "conv3d channel mismatch: input has {} channels, kernel expects {}",
                input_shape[1],
                kernel_shape[1]
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input_shape[2 + a] + 2 * padding;
            let k = kernel_shape[2 + a];
            if k > padded {
                return Err(dim_err!(
                    "conv3d kernel extent {k} exceeds padded input extent {padded} on axis {a}"
                ));
            }
            output[a] = (padded - k) / stride + 1;
        }
        Ok(Self {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: kernel_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            kernel: [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
            output,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output indices `lo..hi` along `axis` for which tap `k` reads inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let last = self.input[axis] - 1 + p;
        if last < k {
            return (0, 0);
        }
        let hi = ((last - k) / s + 1).min(self.output[axis]);
        (lo, hi.max(lo))
    }

    #[inline]
    fn src(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.padding
    }

    /// Visits every (tap, output row, input row, valid x range) quadruple.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [kd, kh, kw] = self.kernel;
        let [_, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        for z in 0..kd {
            let (z0, z1) = self.valid(0, z);
            for y in 0..kh {
                let (y0, y1) = self.valid(1, y);
                for x in 0..kw {
                    let (x0, x1) = self.valid(2, x);
                    if x0 >= x1 {
                        continue;
                    }
                    let tap = (z * kh + y) * kw + x;
                    for oz in z0..z1 {
                        let iz = self.src(oz, z);
                        for oy in y0..y1 {
                            let iy = self.src(oy, y);
                            let out_row = (oz * oh + oy) * ow;
                            let in_row = (iz * ih + iy) * iw;
                            f(tap, out_row, in_row, x, x0, x1);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Real>(g: &Conv3dGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let mut out = vec![T::zero(); g.batch * g.out_channels * op];
    out.par_chunks_mut(op).enumerate().for_each(|(plane, dst)| {
        let (n, co) = (plane / g.out_channels, plane % g.out_channels);
        dst.fill(bias[co]);
        for ci in 0..g.in_channels {
            let src = &input[(n * g.in_channels + ci) * ip..][..ip];
            let w = &kernel[(co * g.in_channels + ci) * taps..][..taps];
            g.for_each_row(|tap, out_row, in_row, kx, x0, x1| {
                let wt = w[tap];
                if g.stride == 1 {
                    let off = in_row + x0 + kx - g.padding;
                    let d = &mut dst[out_row + x0..out_row + x1];
                    let s = &src[off..off + d.len()];
                    for (o, &i) in d.iter_mut().zip(s) {
                        *o += wt * i;
                    }
                } else {
                    for ox in x0..x1 {
                        dst[out_row + ox] += wt * src[in_row + g.src(ox, kx)];
                    }
                }
            });
        }
    });
    out
}

pub fn conv3d_backward_input<T: Real>(g: &Conv3dGeom, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let mut grad_in = vec![T::zero(); g.batch * g.in_channels * ip];
    grad_in.par_chunks_mut(ip).enumerate().for_each(|(plane, dst)| {
        let (n, ci) = (plane / g.in_channels, plane % g.in_channels);
        for co in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + co) * op..][..op];
            let w = &kernel[(co * g.in_channels + ci) * taps..][..taps];
            g.for_each_row(|tap, out_row, in_row, kx, x0, x1| {
                let wt = w[tap];
                if g.stride == 1 {
                    let off = in_row + x0 + kx - g.padding;
                    let s = &go[out_row + x0..out_row + x1];
                    let d = &mut dst[off..off + s.len()];
                    for (i, &o) in d.iter_mut().zip(s) {
                        *i += wt * o;
                    }
                } else {
                    for ox in x0..x1 {
                        dst[in_row + g.src(ox, kx)] += wt * go[out_row + ox];
                    }
                }
            });
        }
    });
    grad_in
}

/// Returns (kernel gradient, bias gradient).
pub fn conv3d_backward_params<T: Real>(g: &Conv3dGeom, input: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let per_co = g.in_channels * taps;
    let mut grad_k = vec![T::zero(); g.out_channels * per_co];
    grad_k.par_chunks_mut(per_co).enumerate().for_each(|(co, dst)| {
        for n in 0..g.batch {
            let go = &grad_out[(n * g.out_channels + co) * op..][..op];
            for ci in 0..g.in_channels {
                let src = &input[(n * g.in_channels + ci) * ip..][..ip];
                let acc = &mut dst[ci * taps..][..taps];
                g.for_each_row(|tap, out_row, in_row, kx, x0, x1| {
                    let mut s = T::zero();
                    for ox in x0..x1 {
                        s += src[in_row + g.src(ox, kx)] * go[out_row + ox];
                    }
                    acc[tap] += s;
                });
            }
        }
    });
    let mut grad_b = vec![T::zero(); g.out_channels];
    for (co, gb) in grad_b.iter_mut().enumerate() {
        for n in 0..g.batch {
            *gb += grad_out[(n * g.out_channels + co) * op..][..op].iter().copied().sum::<T>();
        }
    }
    (grad_k, grad_b)
}

/// Returns pooled values and, per output voxel, the flat input index of the
/// first (row-major) maximum in its window.
pub fn maxpool3d_forward<T: Real>(shape: &[usize], input: &[T], window: usize) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    if shape.len() != 5 {
        return Err(dim_err!("maxpool3d expects a 5-d tensor, got {shape:?}"));
    }
    if window == 0 || shape[2..].iter().any(|&e| e % window != 0) {
        return Err(dim_err!("spatial extents {:?} not divisible by window {window}", &shape[2..]));
    }
    let (d, h, w) = (shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (d / window, h / window, w / window);
    let planes = shape[0] * shape[1];
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dz in 0..window {
                        for dy in 0..window {
                            let row = base + ((z * window + dz) * h + y * window + dy) * w + x * window;
                            for dx in 0..window {
                                let v = input[row + dx];
                                if v > best || best_i == usize::MAX {
                                    best = v;
                                    best_i = row + dx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((vec![shape[0], shape[1], od, oh, ow], out, arg))
}

pub fn upsample3d_forward<T: Real>(shape: &[usize], input: &[T], factor: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if shape.len() != 5 {
        return Err(dim_err!("upsample3d expects a 5-d tensor, got {shape:?}"));
    }
    if factor == 0 {
        return Err(dim_err!("upsample factor must be >= 1"));
    }
    let (d, h, w) = (shape[2], shape[3], shape[4]);
    let (ud, uh, uw) = (d * factor, h * factor, w * factor);
    let planes = shape[0] * shape[1];
    let mut out = Vec::with_capacity(planes * ud * uh * uw);
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..ud {
            for y in 0..uh {
                let row = base + ((z / factor) * h + y / factor) * w;
                for x in 0..uw {
                    out.push(input[row + x / factor]);
                }
            }
        }
    }
    Ok((vec![shape[0], shape[1], ud, uh, uw], out))
}

pub fn upsample3d_backward<T: Real>(in_shape: &[usize], grad_out: &[T], factor: usize) -> Vec<T> {
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let (ud, uh, uw) = (d * factor, h * factor, w * factor);
    let planes = in_shape[0] * in_shape[1];
    let mut grad = vec![T::zero(); planes * d * h * w];
    for p in 0..planes {
        let base = p * d * h * w;
        let obase = p * ud * uh * uw;
        for z in 0..ud {
            for y in 0..uh {
                let row = base + ((z / factor) * h + y / factor) * w;
                let orow = obase + (z * uh + y) * uw;
                for x in 0..uw {
                    grad[row + x / factor] += grad_out[orow + x];
                }
            }
        }
    }
    grad
}

/// `out[n, g] = sum_f a[n, f] * b[f, g]`
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, f: usize, g: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * g];
    for i in 0..n {
        let row = &mut out[i * g..(i + 1) * g];
        for k in 0..f {
            let av = a[i * f + k];
            for (o, &bv) in row.iter_mut().zip(&b[k * g..(k + 1) * g]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Softmax along axis 1 of an `[N, C, ...]` buffer, max-subtracted.
pub fn softmax_channels<T: Real>(shape: &[usize], input: &[T]) -> Vec<T> {
    let (n, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        let base = b * c * v;
        for j in 0..v {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(input[base + k * v + j]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (input[base + k * v + j] - m).exp();
                out[base + k * v + j] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * v + j] = out[base + k * v + j] / z;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(shape: &[usize], output: &[T], grad_out: &[T]) -> Vec<T> {
    let (n, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let mut grad = vec![T::zero(); output.len()];
    for b in 0..n {
        let base = b * c * v;
        for j in 0..v {
            let mut dot = T::zero();
            for k in 0..c {
                dot += output[base + k * v + j] * grad_out[base + k * v + j];
            }
            for k in 0..c {
                let i = base + k * v + j;
                grad[i] = output[i] * (grad_out[i] - dot);
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges_cover_padding() {
        let g = Conv3dGeom::new(&[1, 1, 4, 4, 4], &[1, 1, 3, 3, 3], 1, 1).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        assert_eq!(g.valid(2, 0), (1, 4));
        assert_eq!(g.valid(2, 1), (0, 4));
        assert_eq!(g.valid(2, 2), (0, 3));
        let s = Conv3dGeom::new(&[1, 1, 5, 5, 5], &[1, 1, 3, 3, 3], 2, 0).unwrap();
        assert_eq!(s.output, [2, 2, 2]);
        assert_eq!(s.valid(0, 2), (0, 2));
    }

    #[test]
    fn oversize_kernel_is_rejected() {
        assert!(Conv3dGeom::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(Conv3dGeom::new(&[1, 2, 2, 2, 2], &[1, 1, 1, 1, 1], 1, 0).is_err());
    }

    #[test]
    fn maxpool_rejects_indivisible() {
        assert!(maxpool3d_forward(&[1, 1, 3, 4, 4], &[0.0f32; 48], 2).is_err());
    }
}
