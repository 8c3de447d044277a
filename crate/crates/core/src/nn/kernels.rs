//! Forward/backward kernels for the spatial layers. All activations are
//! `(N, C, D, H, W)`; weights follow the usual `(out, in, kd, kh, kw)` order
//! (`(in, out, ...)` for transposed convolution).

use super::Tensor;

/// `c = a · b + beta · c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub const UNIT: ConvSpec = ConvSpec {
        stride: [1, 1, 1],
        pad: [0, 0, 0],
    };

    /// Stride 1 with "same" zero padding for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvSpec {
            stride: [1, 1, 1],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < kernel[a] {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

struct ConvGeom {
    cin: usize,
    k: [usize; 3],
    inp: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }
    fn cols(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }
}

/// Output positions `lo..hi` along one axis whose input tap
/// `o · stride + k − pad` falls inside `0..len`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(out), hi.max(lo.min(out)))
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let [kd, kh, kw] = g.k;
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let iz = (z * sd + kz) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            let seg = &mut dst[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                seg.fill(0.0);
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let (lo, hi) = valid_range(ow, iw, kx, sw, pw);
                            seg[..lo].fill(0.0);
                            seg[hi..].fill(0.0);
                            if lo < hi {
                                let start = base + lo * sw + kx - pw;
                                if sw == 1 {
                                    seg[lo..hi].copy_from_slice(&xc[start..start + hi - lo]);
                                } else {
                                    for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                                        *v = xc[start + i * sw];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let [kd, kh, kw] = g.k;
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let iz = (z * sd + kz) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            let seg = &src[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let (lo, hi) = valid_range(ow, iw, kx, sw, pw);
                            if lo < hi {
                                let start = base + lo * sw + kx - pw;
                                for (i, v) in seg[lo..hi].iter().enumerate() {
                                    dxc[start + i * sw] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, spec: ConvSpec) -> (ConvGeom, usize, usize) {
    let [n, cin, d, h, wd] = x.dims5();
    let [cout, wcin, kd, kh, kw] = w.dims5();
    assert_eq!(cin, wcin, "conv input channels {cin} != weight channels {wcin}");
    let k = [kd, kh, kw];
    let out = spec
        .output_dims([d, h, wd], k)
        .unwrap_or_else(|| panic!("conv kernel {k:?} larger than padded input {:?}", [d, h, wd]));
    (
        ConvGeom {
            cin,
            k,
            inp: [d, h, wd],
            out,
            spec,
        },
        n,
        cout,
    )
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (g, n, cout) = conv_geom(x, w, spec);
    let (kr, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.inp.iter().product::<usize>();
    let mut out = Tensor::zeros(&[n, cout, g.out[0], g.out[1], g.out[2]]);
    let pointwise = spec.is_pointwise(g.k);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kr * p] };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let src: &[f32] = if pointwise {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let os = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
        gemm(cout, kr, p, w.data(), (kr, 1), src, (p, 1), 0.0, os, p);
        if let Some(b) = bias {
            for (c, chunk) in os.chunks_mut(p).enumerate() {
                let bv = b.data()[c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (g, n, cout) = conv_geom(x, w, spec);
    let (kr, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.inp.iter().product::<usize>();
    let pointwise = spec.is_pointwise(g.k);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kr * p] };
    let mut dcols = if need_dx && !pointwise { vec![0.0; kr * p] } else { Vec::new() };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let dys = &dy.data()[s * cout * p..(s + 1) * cout * p];
        for (c, chunk) in dys.chunks(p).enumerate() {
            db.data_mut()[c] += chunk.iter().sum::<f32>();
        }
        let src: &[f32] = if pointwise {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // dW (cout × kr) += dY (cout × p) · colsᵀ (p × kr)
        gemm(cout, p, kr, dys, (p, 1), src, (1, p), 1.0, dw.data_mut(), kr);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
            if pointwise {
                // dX (cin × p) = Wᵀ (cin × cout) · dY
                gemm(kr, cout, p, w.data(), (1, kr), dys, (p, 1), 1.0, dxs, p);
            } else {
                gemm(kr, cout, p, w.data(), (1, kr), dys, (p, 1), 0.0, &mut dcols, p);
                col2im(&dcols, &g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with stride equal to the kernel (non-overlapping
/// upsampling). Weight shape `(cin, cout, kd, kh, kw)`.
pub fn conv_transpose_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let [n, cin, d, h, wd] = x.dims5();
    let [wcin, cout, kd, kh, kw] = w.dims5();
    assert_eq!(cin, wcin);
    let kk = kd * kh * kw;
    let p = d * h * wd;
    let (od, oh, ow) = (d * kd, h * kh, wd * kw);
    let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
    let mut y = vec![0.0; cout * kk * p];
    for s in 0..n {
        let xs = &x.data()[s * cin * p..(s + 1) * cin * p];
        // Y (cout·kk × p) = Wᵀ · X
        gemm(cout * kk, cin, p, w.data(), (1, cout * kk), xs, (p, 1), 0.0, &mut y, p);
        let os = &mut out.data_mut()[s * cout * od * oh * ow..(s + 1) * cout * od * oh * ow];
        for co in 0..cout {
            let bv = bias.map_or(0.0, |b| b.data()[co]);
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = &y[(co * kk + (kz * kh + ky) * kw + kx) * p..][..p];
                        for z in 0..d {
                            for yy in 0..h {
                                let ob = ((co * od + z * kd + kz) * oh + yy * kh + ky) * ow + kx;
                                let rb = (z * h + yy) * wd;
                                for xx in 0..wd {
                                    os[ob + xx * kw] = row[rb + xx] + bv;
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

pub fn conv_transpose_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, cin, d, h, wd] = x.dims5();
    let [_, cout, kd, kh, kw] = w.dims5();
    let kk = kd * kh * kw;
    let p = d * h * wd;
    let (od, oh, ow) = (d * kd, h * kh, wd * kw);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut gy = vec![0.0; cout * kk * p];
    for s in 0..n {
        let dys = &dy.data()[s * cout * od * oh * ow..(s + 1) * cout * od * oh * ow];
        for co in 0..cout {
            db.data_mut()[co] += dys[co * od * oh * ow..(co + 1) * od * oh * ow].iter().sum::<f32>();
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = &mut gy[(co * kk + (kz * kh + ky) * kw + kx) * p..][..p];
                        for z in 0..d {
                            for yy in 0..h {
                                let ob = ((co * od + z * kd + kz) * oh + yy * kh + ky) * ow + kx;
                                let rb = (z * h + yy) * wd;
                                for xx in 0..wd {
                                    row[rb + xx] = dys[ob + xx * kw];
                                }
                            }
                        }
                    }
                }
            }
        }
        let xs = &x.data()[s * cin * p..(s + 1) * cin * p];
        let dxs = &mut dx.data_mut()[s * cin * p..(s + 1) * cin * p];
        // dX (cin × p) = W (cin × cout·kk) · gY
        gemm(cin, cout * kk, p, w.data(), (cout * kk, 1), &gy, (p, 1), 0.0, dxs, p);
        // dW (cin × cout·kk) += X (cin × p) · gYᵀ
        gemm(cin, p, cout * kk, xs, (p, 1), &gy, (1, p), 1.0, dw.data_mut(), cout * kk);
    }
    (dx, dw, db)
}

/// Max pooling with stride equal to the kernel. Returns the output and, per
/// output element, the flat input index of the selected maximum.
pub fn max_pool_forward(x: &Tensor, k: [usize; 3]) -> (Tensor, Vec<u32>) {
    let [n, c, d, h, w] = x.dims5();
    assert!(
        d % k[0] == 0 && h % k[1] == 0 && w % k[2] == 0,
        "pool kernel {k:?} does not divide {:?}",
        [d, h, w]
    );
    let (od, oh, ow) = (d / k[0], h / k[1], w / k[2]);
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let mut arg = vec![0u32; out.numel()];
    let xd = x.data();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = base;
                    for kz in 0..k[0] {
                        for ky in 0..k[1] {
                            let row = base + ((z * k[0] + kz) * h + y * k[1] + ky) * w + xx * k[2];
                            for kx in 0..k[2] {
                                let v = xd[row + kx];
                                if v > best {
                                    best = v;
                                    bi = row + kx;
                                }
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = bi as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn upsample_nearest_forward(x: &Tensor, f: [usize; 3]) -> Tensor {
    let [n, c, d, h, w] = x.dims5();
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let xd = x.data();
    let od_ = out.data_mut();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                let row = base + ((z / f[0]) * h + y / f[1]) * w;
                for xx in 0..ow {
                    od_[o] = xd[row + xx / f[2]];
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Tensor, input_shape: &[usize], f: [usize; 3]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let [n, c, d, h, w] = dx.dims5();
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let g = dy.data();
    let dxd = dx.data_mut();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                let row = base + ((z / f[0]) * h + y / f[1]) * w;
                for xx in 0..ow {
                    dxd[row + xx / f[2]] += g[o];
                    o += 1;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
        let [n, cin, d, h, wd] = x.dims5();
        let [cout, _, kd, kh, kw] = w.dims5();
        let o = spec.output_dims([d, h, wd], [kd, kh, kw]).unwrap();
        let mut out = Tensor::zeros(&[n, cout, o[0], o[1], o[2]]);
        let mut idx = 0;
        for s in 0..n {
            for co in 0..cout {
                for z in 0..o[0] {
                    for y in 0..o[1] {
                        for xx in 0..o[2] {
                            let mut acc = b.data()[co] as f64;
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * spec.stride[0] + a) as isize - spec.pad[0] as isize;
                                            let iy = (y * spec.stride[1] + bb) as isize - spec.pad[1] as isize;
                                            let ix = (xx * spec.stride[2] + c) as isize - spec.pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((s * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                            acc += (x.data()[xi] * w.data()[wi]) as f64;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[idx] = acc as f32;
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, spec) in [
            ([3, 3, 3], ConvSpec::same([3, 3, 3])),
            ([1, 3, 3], ConvSpec::same([1, 3, 3])),
            ([1, 1, 1], ConvSpec::UNIT),
            ([1, 4, 4], ConvSpec { stride: [1, 2, 2], pad: [0, 1, 1] }),
            ([1, 3, 3], ConvSpec { stride: [1, 2, 2], pad: [0, 1, 1] }),
        ] {
            let x = random(&[2, 3, 4, 6, 5], &mut rng);
            let w = random(&[4, 3, k[0], k[1], k[2]], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv3d_forward(&x, &w, Some(&b), spec);
            let slow = naive_conv(&x, &w, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-4, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> is bilinear: its derivatives must match the kernels.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [ConvSpec::same([3, 3, 3]), ConvSpec { stride: [1, 2, 2], pad: [0, 1, 1] }, ConvSpec::UNIT] {
            let k = if spec == ConvSpec::UNIT { [1, 1, 1] } else { [3, 3, 3] };
            let x = random(&[2, 2, 3, 6, 4], &mut rng);
            let w = random(&[3, 2, k[0], k[1], k[2]], &mut rng);
            let y = conv3d_forward(&x, &w, None, spec);
            let dy = random(y.shape(), &mut rng);
            let (dx, dw, _) = conv3d_backward(&x, &w, spec, &dy, true);
            let dx = dx.unwrap();
            let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>();
            // <dy, conv(x, w)> == <dx, x> == <dw, w> for a linear, bias-free conv
            let lhs = dot(&dy, &y);
            assert!((lhs - dot(&dx, &x)).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - dot(&dw, &w)).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_transpose_adjoint_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 2, 3, 4], &mut rng);
        let w = random(&[3, 2, 1, 2, 2], &mut rng);
        let y = conv_transpose_forward(&x, &w, None);
        assert_eq!(y.shape(), &[2, 2, 2, 6, 8]);
        let dy = random(y.shape(), &mut rng);
        let (dx, dw, db) = conv_transpose_backward(&x, &w, &dy);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>();
        let lhs = dot(&dy, &y);
        assert!((lhs - dot(&dx, &x)).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - dot(&dw, &w)).abs() < 1e-3 * lhs.abs().max(1.0));
        let ch0: f32 = dy.data()[..96].iter().chain(&dy.data()[192..288]).sum();
        assert!((db.data()[0] - ch0).abs() < 1e-4);
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::from_vec(&[1, 1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., -1.]);
        let (y, arg) = max_pool_forward(&x, [1, 2, 2]);
        assert_eq!(y.data(), &[5., 9.]);
        assert_eq!(arg, vec![1, 6]);
        let u = upsample_nearest_forward(&y, [1, 2, 2]);
        assert_eq!(u.data(), &[5., 5., 9., 9., 5., 5., 9., 9.]);
        let g = upsample_nearest_backward(&Tensor::full(&[1, 1, 1, 2, 4], 1.0), y.shape(), [1, 2, 2]);
        assert_eq!(g.data(), &[4., 4.]);
    }
}
