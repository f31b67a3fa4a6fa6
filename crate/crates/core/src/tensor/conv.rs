use serde::{Deserialize, Serialize};

use super::graph::{ComplexVar, Graph, Var};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution over `[B, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    /// `[top, bottom, left, right]`.
    pub pad: [usize; 4],
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), pad: [usize; 4]) -> Self {
        Self { stride, pad }
    }

    pub fn unit() -> Self {
        Self::new((1, 1), [0; 4])
    }
}

/// Output height and width, or `None` if the kernel does not fit.
pub fn conv2d_output_size(h: usize, w: usize, kh: usize, kw: usize, spec: &Conv2dSpec) -> Option<(usize, usize)> {
    let hp = h + spec.pad[0] + spec.pad[1];
    let wp = w + spec.pad[2] + spec.pad[3];
    if hp < kh || wp < kw || spec.stride.0 == 0 || spec.stride.1 == 0 {
        return None;
    }
    Some(((hp - kh) / spec.stride.0 + 1, (wp - kw) / spec.stride.1 + 1))
}

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    pl: usize,
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + i) as isize - g.pt as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + j) as isize - g.pl as isize;
                        *d = if ix >= 0 && (ix as usize) < g.w {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[cin, h, w]`.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + i) as isize - g.pt as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + j) as isize - g.pl as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`
    /// plus optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err());
        }
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = conv2d_output_size(h, wd, kh, kw, &spec).ok_or_else(shape_err)?;
        let g = Geom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            sh: spec.stride.0,
            sw: spec.stride.1,
            pt: spec.pad[0],
            pl: spec.pad[2],
        };
        let kk = cin * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); bn * kk * hw];
        let mut out = Tensor::zeros(&[bn, cout, ho, wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bn {
                let col = &mut cols[bi * kk * hw..(bi + 1) * kk * hw];
                im2col(&xv[bi * cin * h * wd..(bi + 1) * cin * h * wd], &g, col);
                gemm(
                    false,
                    false,
                    cout,
                    hw,
                    kk,
                    wv,
                    col,
                    T::zero(),
                    &mut out.data_mut()[bi * cout * hw..(bi + 1) * cout * hw],
                );
            }
        }
        let y = self.push(
            out,
            &[x, w],
            Box::new(move |gout, p, _, needs| {
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[cout, cin, kh, kw]);
                    for bi in 0..bn {
                        gemm(
                            false,
                            true,
                            cout,
                            kk,
                            hw,
                            &gout.data()[bi * cout * hw..(bi + 1) * cout * hw],
                            &cols[bi * kk * hw..(bi + 1) * kk * hw],
                            T::one(),
                            dw.data_mut(),
                        );
                    }
                    dw
                });
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(&[bn, cin, h, wd]);
                    let mut dcols = vec![T::zero(); kk * hw];
                    for bi in 0..bn {
                        gemm(
                            true,
                            false,
                            kk,
                            hw,
                            cout,
                            p[1].data(),
                            &gout.data()[bi * cout * hw..(bi + 1) * cout * hw],
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            &g,
                            &mut dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        );
                    }
                    dx
                });
                vec![dx, dw]
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b, 1),
            None => Ok(y),
        }
    }

    /// Complex convolution from four real ones:
    /// `re = Wr*Xr - Wi*Xi`, `im = Wr*Xi + Wi*Xr`, plus complex bias.
    pub fn complex_conv2d(
        &mut self,
        x: ComplexVar,
        w_re: Var,
        w_im: Var,
        bias: Option<(Var, Var)>,
        spec: Conv2dSpec,
    ) -> Result<ComplexVar> {
        if self.shape(x.re) != self.shape(x.im) {
            return Err(Error::Shape {
                op: "complex_conv2d",
                lhs: self.shape(x.re).to_vec(),
                rhs: self.shape(x.im).to_vec(),
            });
        }
        let rr = self.conv2d(x.re, w_re, None, spec)?;
        let ii = self.conv2d(x.im, w_im, None, spec)?;
        let ri = self.conv2d(x.im, w_re, None, spec)?;
        let ir = self.conv2d(x.re, w_im, None, spec)?;
        let mut re = self.sub(rr, ii)?;
        let mut im = self.add(ri, ir)?;
        if let Some((br, bi)) = bias {
            re = self.add_bias(re, br, 1)?;
            im = self.add_bias(im, bi, 1)?;
        }
        Ok(ComplexVar { re, im })
    }

    /// Causal dilated depthwise convolution over time for `x: [B, T, C]`
    /// with `w: [C, K]`: `y[t, c] = sum_k w[c, k] x[t - (K-1-k) dil, c]`,
    /// zero before the start.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || dilation == 0 {
            return Err(Error::Shape {
                op: "conv1d_depthwise",
                lhs: xs,
                rhs: ws,
            });
        }
        let (bn, t, c) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        let mut out = Tensor::zeros(&xs);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let o = out.data_mut();
            for b in 0..bn {
                for ti in 0..t {
                    let dst = &mut o[(b * t + ti) * c..(b * t + ti + 1) * c];
                    for kk in 0..k {
                        let shift = (k - 1 - kk) * dilation;
                        if shift > ti {
                            continue;
                        }
                        let src = &xv[(b * t + ti - shift) * c..(b * t + ti - shift + 1) * c];
                        for ch in 0..c {
                            dst[ch] += wv[ch * k + kk] * src[ch];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |g, p, _, needs| {
                let (xv, wv, gv) = (p[0].data(), p[1].data(), g.data());
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(&[bn, t, c]);
                    let d = dx.data_mut();
                    for b in 0..bn {
                        for ti in 0..t {
                            let gr = &gv[(b * t + ti) * c..(b * t + ti + 1) * c];
                            for kk in 0..k {
                                let shift = (k - 1 - kk) * dilation;
                                if shift > ti {
                                    continue;
                                }
                                let dst = &mut d[(b * t + ti - shift) * c..(b * t + ti - shift + 1) * c];
                                for ch in 0..c {
                                    dst[ch] += wv[ch * k + kk] * gr[ch];
                                }
                            }
                        }
                    }
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[c, k]);
                    let d = dw.data_mut();
                    for b in 0..bn {
                        for ti in 0..t {
                            let gr = &gv[(b * t + ti) * c..(b * t + ti + 1) * c];
                            for kk in 0..k {
                                let shift = (k - 1 - kk) * dilation;
                                if shift > ti {
                                    continue;
                                }
                                let src = &xv[(b * t + ti - shift) * c..(b * t + ti - shift + 1) * c];
                                for ch in 0..c {
                                    d[ch * k + kk] += src[ch] * gr[ch];
                                }
                            }
                        }
                    }
                    dw
                });
                vec![dx, dw]
            }),
        ))
    }
}
