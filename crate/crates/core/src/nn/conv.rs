use serde::{Deserialize, Serialize};

use super::{Builder, Ctx};
use crate::autodiff::Var;
use crate::params::ParamId;
use crate::tensor::{gemm, Scalar, Tensor};

/// Geometry of a 3D convolution over `(depth, height, width)`, where depth is
/// the spectral axis and height/width are spatial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(k_d, k_h, k_w)`; all odd.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Depthwise-then-pointwise factorization.
    pub separable: bool,
}

impl Conv3dSpec {
    /// Stride 1 with `(k-1)/2` padding on every axis, which preserves extents.
    pub fn same(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        let spec = Conv3dSpec {
            in_channels,
            out_channels,
            kernel,
            stride: [1, 1, 1],
            padding: kernel.map(|k| (k.saturating_sub(1)) / 2),
            separable: false,
        };
        spec.validate();
        spec
    }

    pub fn separable(mut self) -> Self {
        self.separable = true;
        self
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) {
        assert!(self.in_channels > 0 && self.out_channels > 0, "conv channels must be positive");
        assert!(
            self.kernel.iter().all(|&k| k % 2 == 1),
            "conv kernel extents must be odd, got {:?}",
            self.kernel
        );
        assert!(self.stride.iter().all(|&s| s > 0), "conv strides must be positive");
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents for an input of `[d, h, w]`.
    pub fn output_extent(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.padding[i];
            assert!(
                padded >= self.kernel[i],
                "conv output extent would be non-positive on axis {i}: input {:?}, kernel {:?}, padding {:?}",
                input,
                self.kernel,
                self.padding
            );
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        out
    }

    /// Scalar parameter count (no biases).
    pub fn param_count(&self) -> usize {
        if self.separable {
            self.in_channels * self.kernel_volume() + self.in_channels * self.out_channels
        } else {
            self.in_channels * self.out_channels * self.kernel_volume()
        }
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    inp: [usize; 3],
    out: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn k_rows(&self) -> usize {
        self.cin_g() * self.kernel.iter().product::<usize>()
    }
    /// A 1×1×1 stride-1 unpadded kernel reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Input channels `[c0, c0+cin_g)` of one batch element → `[k_rows, out_vol]`.
fn im2col<T: Scalar>(geo: &Geometry, x: &[T], col: &mut [T]) {
    let [id, ih, iw] = geo.inp;
    let [od, oh, ow] = geo.out;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let p = geo.out_vol();
    let mut row = 0;
    for ci in 0..geo.cin_g() {
        let xc = &x[ci * geo.in_vol()..(ci + 1) * geo.in_vol()];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let zi = (z * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            dst[o..o + oh * ow].fill(T::zero());
                            o += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                dst[o..o + ow].fill(T::zero());
                                o += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            for xo in 0..ow {
                                let xi = (xo * sw + c) as isize - pw as isize;
                                dst[o] = if xi < 0 || xi >= iw as isize {
                                    T::zero()
                                } else {
                                    xc[base + xi as usize]
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds a column matrix back into `dx`.
fn col2im<T: Scalar>(geo: &Geometry, col: &[T], dx: &mut [T]) {
    let [id, ih, iw] = geo.inp;
    let [od, oh, ow] = geo.out;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let p = geo.out_vol();
    let mut row = 0;
    for ci in 0..geo.cin_g() {
        let dxc = &mut dx[ci * geo.in_vol()..(ci + 1) * geo.in_vol()];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let zi = (z * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            o += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                o += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            for xo in 0..ow {
                                let xi = (xo * sw + c) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    dxc[base + xi as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Cross-correlation of `[B, C, D, H, W]` with `[C', C/groups, k_d, k_h, k_w]`
    /// weights. No bias.
    pub fn conv3d_grouped(
        self,
        weight: Var<'g, T>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 5, "conv3d input must be [B, C, D, H, W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D, got {ws:?}");
        assert!(groups > 0 && xs[1] % groups == 0 && ws[0] % groups == 0, "conv3d: bad group count");
        assert_eq!(
            xs[1] / groups,
            ws[1],
            "conv3d: input has {} channels, weight expects {}",
            xs[1],
            ws[1] * groups
        );
        let kernel = [ws[2], ws[3], ws[4]];
        let probe = Conv3dSpec {
            in_channels: xs[1],
            out_channels: ws[0],
            kernel,
            stride,
            padding,
            separable: false,
        };
        let out_ext = probe.output_extent([xs[2], xs[3], xs[4]]);
        let geo = Geometry {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            groups,
            inp: [xs[2], xs[3], xs[4]],
            out: out_ext,
            kernel,
            stride,
            padding,
        };
        let (m, k, p) = (geo.cout_g(), geo.k_rows(), geo.out_vol());
        let in_chunk = geo.cin_g() * geo.in_vol();
        let mut out = vec![T::zero(); geo.batch * geo.cout * p];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..geo.batch {
            for g in 0..groups {
                let xin = &x.data()[(b * geo.cin + g * geo.cin_g()) * geo.in_vol()..][..in_chunk];
                let colref: &[T] = if geo.is_pointwise() {
                    xin
                } else {
                    im2col(&geo, xin, &mut col);
                    &col
                };
                let wg = &w.data()[g * m * k..(g + 1) * m * k];
                let dst = &mut out[(b * geo.cout + g * m) * p..][..m * p];
                gemm(m, k, p, wg, false, colref, false, dst, false);
            }
        }
        let out_shape = [geo.batch, geo.cout, out_ext[0], out_ext[1], out_ext[2]];
        let (ix, iw) = (self.id, weight.id);
        self.graph
            .op(Tensor::new(&out_shape, out), &[self, weight], move |gout, sink| {
                let gd = gout.data();
                let want_x = sink.wants(ix);
                let want_w = sink.wants(iw);
                let mut dw = if want_w { vec![T::zero(); w.len()] } else { Vec::new() };
                let mut dx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
                let mut col = vec![T::zero(); if geo.is_pointwise() { 0 } else { k * p }];
                let mut dcol = vec![T::zero(); if want_x { k * p } else { 0 }];
                for b in 0..geo.batch {
                    for g in 0..groups {
                        let x_off = (b * geo.cin + g * geo.cin_g()) * geo.in_vol();
                        let dy = &gd[(b * geo.cout + g * m) * p..][..m * p];
                        if want_w {
                            let xin = &x.data()[x_off..][..in_chunk];
                            let colref: &[T] = if geo.is_pointwise() {
                                xin
                            } else {
                                im2col(&geo, xin, &mut col);
                                &col
                            };
                            gemm(m, p, k, dy, false, colref, true, &mut dw[g * m * k..(g + 1) * m * k], true);
                        }
                        if want_x {
                            let wg = &w.data()[g * m * k..(g + 1) * m * k];
                            if geo.is_pointwise() {
                                gemm(k, m, p, wg, true, dy, false, &mut dx[x_off..x_off + in_chunk], true);
                            } else {
                                gemm(k, m, p, wg, true, dy, false, &mut dcol, false);
                                col2im(&geo, &dcol, &mut dx[x_off..x_off + in_chunk]);
                            }
                        }
                    }
                }
                if want_w {
                    sink.add(iw, Tensor::new(w.shape(), dw));
                }
                if want_x {
                    sink.add(ix, Tensor::new(x.shape(), dx));
                }
            })
    }

    /// Dense convolution per `spec` (which must not be separable).
    pub fn conv3d(self, weight: Var<'g, T>, spec: &Conv3dSpec) -> Var<'g, T> {
        assert!(!spec.separable, "conv3d called with a separable spec; use sep_conv3d");
        spec.validate();
        self.conv3d_grouped(weight, spec.stride, spec.padding, 1)
    }

    /// Depthwise convolution with `spec.kernel`, then a 1×1×1 pointwise
    /// convolution mapping `C → C'`.
    pub fn sep_conv3d(self, depthwise: Var<'g, T>, pointwise: Var<'g, T>, spec: &Conv3dSpec) -> Var<'g, T> {
        spec.validate();
        let c = spec.in_channels;
        self.conv3d_grouped(depthwise, spec.stride, spec.padding, c)
            .conv3d_grouped(pointwise, [1, 1, 1], [0, 0, 0], 1)
    }
}

/// Direct nested-loop convolution used as an independent oracle in tests.
pub fn conv3d_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: [usize; 3],
    padding: [usize; 3],
    groups: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (b, cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, cin_g, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let cout_g = cout / groups;
    let od = (d + 2 * padding[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * padding[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * padding[2] - kw) / stride[2] + 1;
    let mut out = Tensor::zeros(&[b, cout, od, oh, ow]);
    for n in 0..b {
        for co in 0..cout {
            let g = co / cout_g;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = T::zero();
                        for ci in 0..cin_g {
                            let cin_abs = g * cin_g + ci;
                            debug_assert!(cin_abs < cin);
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let zi = (z * stride[0] + a) as isize - padding[0] as isize;
                                        let yi = (y * stride[1] + bb) as isize - padding[1] as isize;
                                        let xi = (xo * stride[2] + c) as isize - padding[2] as isize;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= d as isize
                                            || yi >= h as isize
                                            || xi >= wd as isize
                                        {
                                            continue;
                                        }
                                        acc += x.at(&[n, cin_abs, zi as usize, yi as usize, xi as usize])
                                            * w.at(&[co, ci, a, bb, c]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[n, co, z, y, xo]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Dense convolution layer.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub spec: Conv3dSpec,
    pub weight: ParamId,
}

impl Conv3d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: Conv3dSpec) -> Self {
        spec.validate();
        assert!(!spec.separable, "Conv3d with separable spec; use SepConv3d");
        let [kd, kh, kw] = spec.kernel;
        let weight = b.kaiming_uniform(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels, kd, kh, kw],
            spec.in_channels * spec.kernel_volume(),
        );
        Conv3d { spec, weight }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = cx.param(self.weight);
        x.conv3d(w, &self.spec)
    }
}

/// Depthwise + pointwise convolution layer.
#[derive(Clone, Debug)]
pub struct SepConv3d {
    pub spec: Conv3dSpec,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
}

impl SepConv3d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, spec: Conv3dSpec) -> Self {
        let spec = spec.separable();
        spec.validate();
        let [kd, kh, kw] = spec.kernel;
        let c = spec.in_channels;
        let depthwise = b.kaiming_uniform(&format!("{name}.depthwise"), &[c, 1, kd, kh, kw], spec.kernel_volume());
        let pointwise = b.kaiming_uniform(&format!("{name}.pointwise"), &[spec.out_channels, c, 1, 1, 1], c);
        SepConv3d {
            spec,
            depthwise,
            pointwise,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let dw = cx.param(self.depthwise);
        let pw = cx.param(self.pointwise);
        x.sep_conv3d(dw, pw, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn pointwise_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 3, 4]);
        let mut w = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            let o = w.offset(&[c, c, 0, 0, 0]);
            w.data_mut()[o] = 1.0;
        }
        let g = Graph::new();
        let spec = Conv3dSpec::same(3, 3, [1, 1, 1]);
        let y = g.constant(x.clone()).conv3d(g.constant(w), &spec);
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let g = Graph::<f64>::new();
        let spec = Conv3dSpec::same(1, 1, [1, 3, 3]);
        let y = g
            .constant(Tensor::ones(&[1, 1, 1, 3, 3]))
            .conv3d(g.constant(Tensor::ones(&[1, 1, 1, 3, 3])), &spec)
            .value();
        assert_eq!(y.at(&[0, 0, 0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn strided_and_grouped_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(kernel, stride, groups) in &[
            ([3, 1, 1], [2, 1, 1], 1),
            ([1, 5, 5], [1, 1, 1], 1),
            ([3, 3, 3], [1, 2, 1], 2),
            ([1, 1, 1], [2, 1, 1], 1),
            ([5, 1, 1], [1, 1, 1], 4),
        ] {
            let x = rand_tensor(&mut rng, &[2, 4, 5, 6, 5]);
            let w = rand_tensor(&mut rng, &[4, 4 / groups, kernel[0], kernel[1], kernel[2]]);
            let padding = kernel.map(|k: usize| (k - 1) / 2);
            let g = Graph::new();
            let y = g
                .constant(x.clone())
                .conv3d_grouped(g.constant(w.clone()), stride, padding, groups)
                .value();
            let want = conv3d_reference(&x, &w, stride, padding, groups);
            assert!(y.max_abs_diff(&want) < 1e-12, "kernel {kernel:?} groups {groups}");
        }
    }

    #[test]
    fn separable_parameter_count() {
        let spec = Conv3dSpec::same(8, 8, [1, 3, 3]);
        assert_eq!(spec.param_count(), 576);
        assert_eq!(spec.separable().param_count(), 136);
    }

    #[test]
    #[should_panic(expected = "non-positive")]
    fn too_small_input_is_rejected() {
        let g = Graph::<f64>::new();
        let _ = g
            .constant(Tensor::zeros(&[1, 1, 1, 2, 2]))
            .conv3d_grouped(g.constant(Tensor::zeros(&[1, 1, 1, 5, 5])), [1, 1, 1], [0, 0, 0], 1);
    }
}
