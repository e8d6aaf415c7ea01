//! Strided, zero-padded cross-correlation in 2D and 3D.
//!
//! Tensors are `[N, C, D, H, W]` (3D) or `[N, C, H, W]` (2D); a 2D op is
//! a 3D op with unit depth. Three bilinear maps share one geometry:
//!
//!  * `conv`              x, w -> y   (forward correlation)
//!  * `conv_input_grad`   g, w -> x   (transposed convolution)
//!  * `conv_weight_grad`  x, g -> w
//!
//! and each one's partial adjoints are the other two.

use crate::graph::GradFn;
use crate::{Element, Tensor, Var};

/// Geometry of a correlation from an "input side" grid to an "output side" grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub in_size: [usize; 3],
    pub out_size: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward correlation; the output size is derived.
    pub fn forward(in_size: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Option<Self> {
        let mut out_size = [0; 3];
        for a in 0..3 {
            let span = in_size[a] + 2 * pad[a];
            if span < kernel[a] || stride[a] == 0 {
                return None;
            }
            out_size[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Some(ConvGeom { kernel, stride, pad, in_size, out_size })
    }

    /// Geometry of a transposed convolution taking `small` to the larger grid
    /// `(small - 1) * stride - 2 * pad + kernel`.
    pub fn transposed(small: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Option<Self> {
        let mut in_size = [0; 3];
        for a in 0..3 {
            let big = (small[a].checked_sub(1)? * stride[a] + kernel[a]).checked_sub(2 * pad[a])?;
            if big == 0 {
                return None;
            }
            in_size[a] = big;
        }
        let g = ConvGeom { kernel, stride, pad, in_size, out_size: small };
        // the forward map of the larger grid must land exactly on `small`
        (Self::forward(in_size, kernel, stride, pad)? == g).then_some(g)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_sites(&self) -> usize {
        self.in_size.iter().product()
    }

    fn out_sites(&self) -> usize {
        self.out_size.iter().product()
    }
}

fn spatial_shape(rank: usize, size: [usize; 3]) -> Vec<usize> {
    match rank {
        4 => vec![size[1], size[2]],
        5 => size.to_vec(),
        _ => panic!("convolution expects rank 4 or 5 tensors, got rank {rank}"),
    }
}

fn check_spatial(shape: &[usize], size: [usize; 3], what: &str) {
    let sp = spatial_shape(shape.len(), size);
    assert_eq!(&shape[2..], &sp[..], "{what} spatial shape {shape:?} does not match geometry {size:?}");
    if shape.len() == 4 {
        assert_eq!(size[0], 1, "2D tensors need a unit-depth geometry");
    }
}

/// `cols[K × P]` from one sample `x[Ci × in_sites]`.
/// Output columns `lo..hi` whose input column `xo·s + e - p` lies in `0..iw`.
fn x_range(e: usize, s: usize, p: usize, iw: usize, ow: usize) -> (usize, usize) {
    let lo = if e >= p { 0 } else { (p - e).div_ceil(s) };
    let hi = if iw + p <= e { 0 } else { (iw + p - e).div_ceil(s).min(ow) };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], ci: usize, g: &ConvGeom, cols: &mut [T], ld: usize) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [id, ih, iw] = g.in_size;
    let [od, oh, ow] = g.out_size;
    let p = g.out_sites();
    let mut row = 0;
    for c in 0..ci {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ld..row * ld + p];
                    let (lo, hi) = x_range(e, sw, pw, iw, ow);
                    let mut q = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            dst[q..q + oh * ow].fill(T::zero());
                            q += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                dst[q..q + ow].fill(T::zero());
                                q += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            let d = &mut dst[q..q + ow];
                            d[..lo].fill(T::zero());
                            d[hi..].fill(T::zero());
                            let x0 = (lo * sw + e - pw) + base;
                            if sw == 1 {
                                d[lo..hi].copy_from_slice(&xc[x0..x0 + hi - lo]);
                            } else {
                                for (j, v) in d[lo..hi].iter_mut().enumerate() {
                                    *v = xc[x0 + j * sw];
                                }
                            }
                            q += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols[K × P]` back into one sample `x[Ci × in_sites]`.
fn col2im<T: Element>(cols: &[T], ci: usize, g: &ConvGeom, x: &mut [T], ld: usize) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [id, ih, iw] = g.in_size;
    let [od, oh, ow] = g.out_size;
    let p = g.out_sites();
    let mut row = 0;
    for c in 0..ci {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ld..row * ld + p];
                    let (lo, hi) = x_range(e, sw, pw, iw, ow);
                    let mut q = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            q += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                q += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            if lo < hi {
                                let x0 = (lo * sw + e - pw) + base;
                                for (j, &v) in src[q + lo..q + hi].iter().enumerate() {
                                    xc[x0 + j * sw] += v;
                                }
                            }
                            q += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Samples per GEMM so that the column buffer stays near `COL_BUDGET` elements.
const COL_BUDGET: usize = 1 << 24;

fn chunk(n: usize, k: usize, p: usize) -> usize {
    (COL_BUDGET / (k * p).max(1)).clamp(1, n.max(1))
}

/// Columns of samples `b0..b0 + nb` side by side: `cols[K × (nb·P)]`.
fn im2col_batch<T: Element>(x: &[T], xs: usize, ci: usize, g: &ConvGeom, b0: usize, nb: usize, cols: &mut [T]) {
    let (p, ld) = (g.out_sites(), nb * g.out_sites());
    for s in 0..nb {
        im2col(&x[(b0 + s) * xs..(b0 + s + 1) * xs], ci, g, &mut cols[s * p..], ld);
    }
}

fn forward_raw<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (n, ci) = (x.shape()[0], x.shape()[1]);
    let co = w.shape()[0];
    assert_eq!(w.shape()[1], ci, "weight input channels");
    check_spatial(x.shape(), g.in_size, "conv input");
    let k = ci * g.kernel_volume();
    let p = g.out_sites();
    let mut out_shape = vec![n, co];
    out_shape.extend(spatial_shape(x.ndim(), g.out_size));
    let mut y = vec![T::zero(); n * co * p];
    let xs = g.in_sites() * ci;
    let step = chunk(n, k, p);
    let mut cols = vec![T::zero(); k * p * step];
    let mut out = vec![T::zero(); co * p * step];
    for b0 in (0..n).step_by(step) {
        let nb = step.min(n - b0);
        let ld = nb * p;
        im2col_batch(x.data(), xs, ci, g, b0, nb, &mut cols);
        unsafe {
            T::gemm(
                co, k, ld, T::one(),
                w.data().as_ptr(), k as isize, 1,
                cols.as_ptr(), ld as isize, 1,
                T::zero(), out.as_mut_ptr(), ld as isize, 1,
            );
        }
        for s in 0..nb {
            for c in 0..co {
                y[((b0 + s) * co + c) * p..((b0 + s) * co + c + 1) * p].copy_from_slice(&out[c * ld + s * p..c * ld + (s + 1) * p]);
            }
        }
    }
    Tensor::from_vec(&out_shape, y)
}

/// `gy` samples `b0..b0 + nb` gathered into `[Co × (nb·P)]`.
fn gather_out<T: Element>(gy: &[T], co: usize, p: usize, b0: usize, nb: usize, out: &mut [T]) {
    let ld = nb * p;
    for s in 0..nb {
        for c in 0..co {
            out[c * ld + s * p..c * ld + (s + 1) * p].copy_from_slice(&gy[((b0 + s) * co + c) * p..((b0 + s) * co + c + 1) * p]);
        }
    }
}

fn input_grad_raw<T: Element>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (n, co) = (gy.shape()[0], gy.shape()[1]);
    assert_eq!(w.shape()[0], co, "weight output channels");
    check_spatial(gy.shape(), g.out_size, "conv output");
    let ci = w.shape()[1];
    let k = ci * g.kernel_volume();
    let p = g.out_sites();
    let xs = g.in_sites() * ci;
    let mut out_shape = vec![n, ci];
    out_shape.extend(spatial_shape(gy.ndim(), g.in_size));
    let mut x = vec![T::zero(); n * xs];
    let step = chunk(n, k, p);
    let mut cols = vec![T::zero(); k * p * step];
    let mut gb = vec![T::zero(); co * p * step];
    for b0 in (0..n).step_by(step) {
        let nb = step.min(n - b0);
        let ld = nb * p;
        gather_out(gy.data(), co, p, b0, nb, &mut gb);
        unsafe {
            T::gemm(
                k, co, ld, T::one(),
                w.data().as_ptr(), 1, k as isize,
                gb.as_ptr(), ld as isize, 1,
                T::zero(), cols.as_mut_ptr(), ld as isize, 1,
            );
        }
        for s in 0..nb {
            col2im(&cols[s * p..], ci, g, &mut x[(b0 + s) * xs..(b0 + s + 1) * xs], ld);
        }
    }
    Tensor::from_vec(&out_shape, x)
}

fn weight_grad_raw<T: Element>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (n, ci) = (x.shape()[0], x.shape()[1]);
    let co = gy.shape()[1];
    assert_eq!(gy.shape()[0], n, "batch mismatch");
    check_spatial(x.shape(), g.in_size, "conv input");
    check_spatial(gy.shape(), g.out_size, "conv output");
    let k = ci * g.kernel_volume();
    let p = g.out_sites();
    let xs = g.in_sites() * ci;
    let mut w_shape = vec![co, ci];
    w_shape.extend(spatial_shape(x.ndim(), g.kernel));
    let mut w = vec![T::zero(); co * k];
    let step = chunk(n, k, p);
    let mut cols = vec![T::zero(); k * p * step];
    let mut gb = vec![T::zero(); co * p * step];
    for b0 in (0..n).step_by(step) {
        let nb = step.min(n - b0);
        let ld = nb * p;
        im2col_batch(x.data(), xs, ci, g, b0, nb, &mut cols);
        gather_out(gy.data(), co, p, b0, nb, &mut gb);
        unsafe {
            T::gemm(
                co, ld, k, T::one(),
                gb.as_ptr(), ld as isize, 1,
                cols.as_ptr(), 1, ld as isize,
                T::one(), w.as_mut_ptr(), k as isize, 1,
            );
        }
    }
    Tensor::from_vec(&w_shape, w)
}

struct Forward<T: Element> {
    x: Var<T>,
    w: Var<T>,
    geom: ConvGeom,
}
impl<T: Element> GradFn<T> for Forward<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.x, &self.w]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| conv_input_grad(g, &self.w, &self.geom)),
            needs[1].then(|| conv_weight_grad(&self.x, g, &self.geom)),
        ]
    }
}

struct InputGrad<T: Element> {
    gy: Var<T>,
    w: Var<T>,
    geom: ConvGeom,
}
impl<T: Element> GradFn<T> for InputGrad<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.gy, &self.w]
    }
    fn backward(&self, _: &Var<T>, gx: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| conv(gx, &self.w, &self.geom)),
            needs[1].then(|| conv_weight_grad(gx, &self.gy, &self.geom)),
        ]
    }
}

struct WeightGrad<T: Element> {
    x: Var<T>,
    gy: Var<T>,
    geom: ConvGeom,
}
impl<T: Element> GradFn<T> for WeightGrad<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.x, &self.gy]
    }
    fn backward(&self, _: &Var<T>, gw: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| conv_input_grad(&self.gy, gw, &self.geom)),
            needs[1].then(|| conv(&self.x, gw, &self.geom)),
        ]
    }
}

/// Forward correlation `y = x ⋆ w`.
pub fn conv<T: Element>(x: &Var<T>, w: &Var<T>, geom: &ConvGeom) -> Var<T> {
    let v = forward_raw(x.value(), w.value(), geom);
    Var::from_op(v, Forward { x: x.clone(), w: w.clone(), geom: *geom })
}

/// Adjoint of `conv` in its input: the transposed convolution of `gy`.
pub fn conv_input_grad<T: Element>(gy: &Var<T>, w: &Var<T>, geom: &ConvGeom) -> Var<T> {
    let v = input_grad_raw(gy.value(), w.value(), geom);
    Var::from_op(v, InputGrad { gy: gy.clone(), w: w.clone(), geom: *geom })
}

/// Adjoint of `conv` in its weight.
pub fn conv_weight_grad<T: Element>(x: &Var<T>, gy: &Var<T>, geom: &ConvGeom) -> Var<T> {
    let v = weight_grad_raw(x.value(), gy.value(), geom);
    Var::from_op(v, WeightGrad { x: x.clone(), gy: gy.clone(), geom: *geom })
}

/// Transposed convolution taking `x` (the small grid) to the geometry's
/// input-side grid; `w` is `[C_small, C_big, k...]`.
pub fn conv_transpose<T: Element>(x: &Var<T>, w: &Var<T>, geom: &ConvGeom) -> Var<T> {
    conv_input_grad(x, w, geom)
}

/// Adds a per-channel bias `b[C]` to `x[N, C, ...]`.
pub fn add_channel_bias<T: Element>(x: &Var<T>, b: &Var<T>) -> Var<T> {
    let mut bshape = vec![1; x.shape().len()];
    bshape[1] = b.shape()[0];
    x.add(&b.reshape(&bshape).broadcast_to(x.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Vec<f64> {
        let (n, ci, co) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let [id, ih, iw] = g.in_size;
        let [od, oh, ow] = g.out_size;
        let [kd, kh, kw] = g.kernel;
        let mut y = vec![0.0; n * co * od * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut s = 0.0;
                            for c in 0..ci {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for e in 0..kw {
                                            let zi = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let yi = (yy * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                            let xi = (xx * g.stride[2] + e) as isize - g.pad[2] as isize;
                                            if zi < 0 || yi < 0 || xi < 0 {
                                                continue;
                                            }
                                            let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                            if zi >= id || yi >= ih || xi >= iw {
                                                continue;
                                            }
                                            s += x.data()[(((b * ci + c) * id + zi) * ih + yi) * iw + xi]
                                                * w.data()[(((o * ci + c) * kd + a) * kh + bb) * kw + e];
                                        }
                                    }
                                }
                            }
                            y[(((b * co + o) * od + z) * oh + yy) * ow + xx] = s;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_loops() {
        let g = ConvGeom::forward([4, 5, 6], [2, 3, 3], [1, 2, 2], [1, 1, 0]).unwrap();
        let x = Tensor::from_vec(&[2, 3, 4, 5, 6], (0..720).map(|i| ((i * 37 % 17) as f64) - 8.0).collect());
        let w = Tensor::from_vec(&[2, 3, 2, 3, 3], (0..108).map(|i| ((i * 11 % 7) as f64) * 0.25 - 0.5).collect());
        let y = forward_raw(&x, &w, &g);
        assert_eq!(y.data(), &naive(&x, &w, &g)[..]);
    }

    #[test]
    fn transposed_geometry_doubles() {
        let g = ConvGeom::transposed([16, 16, 16], [4, 4, 4], [2, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(g.in_size, [32, 32, 32]);
        assert!(ConvGeom::transposed([1, 1, 1], [1, 1, 1], [1, 1, 1], [1, 1, 1]).is_none());
    }
}
