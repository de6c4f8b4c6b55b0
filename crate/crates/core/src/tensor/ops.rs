use super::{round_half_even, Tape, Tensor, Var};
use crate::error::{QfaError, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(QfaError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn scalar_of(t: &Tensor, op: &str) -> Result<f64> {
    if t.numel() != 1 {
        return Err(QfaError::Dimension(format!(
            "{op}: expected a single-element tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Shape bookkeeping for an NHWC convolution with "same" padding.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, k: usize, stride: usize) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(QfaError::Dimension(format!(
                "convolution input must be NHWC, got {:?}",
                x.shape()
            )));
        }
        if k.is_multiple_of(2) || stride == 0 {
            return Err(QfaError::Parameter(format!(
                "kernel must be odd and stride positive (k={k}, stride={stride})"
            )));
        }
        let (batch, in_h, in_w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pad = k / 2;
        Ok(Self {
            batch,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        })
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every valid (output, kernel tap) pair.
    /// Pixels are flat indices over (batch, h, w); `tap` is `ky * k + kx`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let out_px = (b * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let in_px = (b * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(out_px, in_px, ky * self.k + kx);
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|g| -g).collect()),
                ]
            }),
        ))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(|ctx| {
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(g, y)| g * y).collect());
                let gb = ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// Multiplies by a fixed real.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        );
        self.custom(
            out,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x + c).collect(),
        );
        self.custom(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// `t * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        let k = scalar_of(self.value(s), "mul_scalar")?;
        let vt = self.value(t);
        let out = Tensor::from_parts(
            vt.shape().to_vec(),
            vt.data().iter().map(|x| x * k).collect(),
        );
        Ok(self.custom(
            out,
            &[t, s],
            Box::new(|ctx| {
                let k = ctx.inputs[1].item();
                let gt = ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * k).collect());
                let gs = ctx.needs[1].then(|| {
                    let dot: f64 = ctx
                        .grad
                        .iter()
                        .zip(ctx.inputs[0].data())
                        .map(|(g, x)| g * x)
                        .sum();
                    vec![dot]
                });
                vec![gt, gs]
            }),
        ))
    }

    /// `t / s` where `s` holds a single nonzero element.
    pub fn div_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        let k = scalar_of(self.value(s), "div_scalar")?;
        if k == 0.0 {
            return Err(QfaError::Parameter("division by zero scalar".into()));
        }
        let vt = self.value(t);
        let out = Tensor::from_parts(
            vt.shape().to_vec(),
            vt.data().iter().map(|x| x / k).collect(),
        );
        Ok(self.custom(
            out,
            &[t, s],
            Box::new(|ctx| {
                let k = ctx.inputs[1].item();
                let gt = ctx.needs[0].then(|| ctx.grad.iter().map(|g| g / k).collect());
                let gs = ctx.needs[1].then(|| {
                    let dot: f64 = ctx
                        .grad
                        .iter()
                        .zip(ctx.inputs[0].data())
                        .map(|(g, x)| g * x)
                        .sum();
                    vec![-dot / (k * k)]
                });
                vec![gt, gs]
            }),
        ))
    }

    /// `t + s` where `s` holds a single element.
    pub fn add_scalar(&mut self, t: Var, s: Var) -> Result<Var> {
        let k = scalar_of(self.value(s), "add_scalar")?;
        let vt = self.value(t);
        let out = Tensor::from_parts(
            vt.shape().to_vec(),
            vt.data().iter().map(|x| x + k).collect(),
        );
        Ok(self.custom(
            out,
            &[t, s],
            Box::new(|ctx| {
                let gs = ctx.needs[1].then(|| vec![ctx.grad.iter().sum()]);
                vec![Some(ctx.grad.to_vec()), gs]
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(0.0)).collect(),
        );
        self.custom(
            out,
            &[a],
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(QfaError::Dimension(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::from_parts(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n));
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let ga = ctx.needs[0].then(|| {
                    // dA = dC · Bᵀ
                    let wt = transpose(w, k, n);
                    matmul_raw(g, &wt, m, n, k)
                });
                let gb = ctx.needs[1].then(|| {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a = x[i * k + kk];
                            if a == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[kk * n..(kk + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, g)| *d += a * g);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Element-wise round half to even with a straight-through backward.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&x| round_half_even(x)).collect(),
        );
        self.custom(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Element-wise clamp into `[lo, hi]`; gradient flows only where
    /// `lo <= x <= hi`.
    pub fn clamp_with_grad(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(QfaError::Parameter(format!(
                "clamp bounds inverted: lo={lo} > hi={hi}"
            )));
        }
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { 0.0 })
                    .collect();
                vec![Some(g)]
            }),
        ))
    }

    /// Identity forward; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().to_vec());
        self.custom(
            out,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        Ok(self.custom(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// Extracts the sub-block starting at `offsets` with extent `lens`.
    pub fn crop(&mut self, a: Var, offsets: &[usize], lens: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if offsets.len() != shape.len()
            || lens.len() != shape.len()
            || shape
                .iter()
                .zip(offsets.iter().zip(lens))
                .any(|(&d, (&o, &l))| l == 0 || o + l > d)
        {
            return Err(QfaError::Dimension(format!(
                "crop offsets {offsets:?} lens {lens:?} out of bounds for {shape:?}"
            )));
        }
        let src_index = crop_index(&shape, offsets, lens);
        let data = src_index.iter().map(|&i| va.data()[i]).collect();
        let out = Tensor::from_parts(lens.to_vec(), data);
        let total = va.numel();
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut g = vec![0.0; total];
                for (&src, &d) in src_index.iter().zip(ctx.grad) {
                    g[src] += d;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Depthwise convolution, `x: [B, H, W, C]`, `w: [k, k, C]`, "same" padding.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(vx, vw.shape()[0], stride)?;
        let c = vx.shape()[3];
        if vw.shape() != [geom.k, geom.k, c] {
            return Err(QfaError::Dimension(format!(
                "depthwise weight {:?} does not match input channels {c}",
                vw.shape()
            )));
        }
        let mut out = vec![0.0; geom.batch * geom.out_h * geom.out_w * c];
        let (xd, wd) = (vx.data(), vw.data());
        geom.for_each_tap(|o, i, t| {
            let dst = &mut out[o * c..(o + 1) * c];
            let src = &xd[i * c..(i + 1) * c];
            let wt = &wd[t * c..(t + 1) * c];
            for ((d, s), w) in dst.iter_mut().zip(src).zip(wt) {
                *d += s * w;
            }
        });
        let out = Tensor::from_parts(vec![geom.batch, geom.out_h, geom.out_w, c], out);
        Ok(self.custom(
            out,
            &[x, w],
            Box::new(move |ctx| {
                let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![0.0; xd.len()]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; wd.len()]);
                geom.for_each_tap(|o, i, t| {
                    let go = &g[o * c..(o + 1) * c];
                    if let Some(gx) = gx.as_mut() {
                        let wt = &wd[t * c..(t + 1) * c];
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for ((d, g), w) in dst.iter_mut().zip(go).zip(wt) {
                            *d += g * w;
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let src = &xd[i * c..(i + 1) * c];
                        let dst = &mut gw[t * c..(t + 1) * c];
                        for ((d, g), s) in dst.iter_mut().zip(go).zip(src) {
                            *d += g * s;
                        }
                    }
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Dense convolution, `x: [B, H, W, Cin]`, `w: [k, k, Cin, Cout]`, "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(vx, vw.shape()[0], stride)?;
        let cin = vx.shape()[3];
        if vw.shape().len() != 4 || vw.shape()[..3] != [geom.k, geom.k, cin] {
            return Err(QfaError::Dimension(format!(
                "conv weight {:?} does not match input channels {cin}",
                vw.shape()
            )));
        }
        let cout = vw.shape()[3];
        let mut out = vec![0.0; geom.batch * geom.out_h * geom.out_w * cout];
        let (xd, wd) = (vx.data(), vw.data());
        geom.for_each_tap(|o, i, t| {
            let dst = &mut out[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let s = xd[i * cin + ci];
                let wrow = &wd[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                dst.iter_mut().zip(wrow).for_each(|(d, w)| *d += s * w);
            }
        });
        let out = Tensor::from_parts(vec![geom.batch, geom.out_h, geom.out_w, cout], out);
        Ok(self.custom(
            out,
            &[x, w],
            Box::new(move |ctx| {
                let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![0.0; xd.len()]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; wd.len()]);
                geom.for_each_tap(|o, i, t| {
                    let go = &g[o * cout..(o + 1) * cout];
                    for ci in 0..cin {
                        let base = (t * cin + ci) * cout;
                        if let Some(gx) = gx.as_mut() {
                            let wrow = &wd[base..base + cout];
                            gx[i * cin + ci] +=
                                go.iter().zip(wrow).map(|(g, w)| g * w).sum::<f64>();
                        }
                        if let Some(gw) = gw.as_mut() {
                            let s = xd[i * cin + ci];
                            gw[base..base + cout]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(d, g)| *d += s * g);
                        }
                    }
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Mean over the spatial dimensions: `[B, H, W, C] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(QfaError::Dimension(format!(
                "pooling needs NHWC, got {s:?}"
            )));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let dst = &mut out[bi * c..(bi + 1) * c];
            for p in 0..hw {
                let src = &vx.data()[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= hw as f64);
        }
        let out = Tensor::from_parts(vec![b, c], out);
        Ok(self.custom(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; b * hw * c];
                for bi in 0..b {
                    let src = &ctx.grad[bi * c..(bi + 1) * c];
                    for p in 0..hw {
                        let dst = &mut g[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                        dst.iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d = s / hw as f64);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Adds `bias: [n]` to every row of `x: [m, n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let s = vx.shape();
        if s.len() != 2 || vb.numel() != s[1] {
            return Err(QfaError::Dimension(format!(
                "bias of {} elements does not fit rows of {s:?}",
                vb.numel()
            )));
        }
        let n = s[1];
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data()[i % n])
            .collect();
        let out = Tensor::from_parts(s.to_vec(), data);
        Ok(self.custom(
            out,
            &[x, bias],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; n];
                    ctx.grad.chunks(n).for_each(|row| {
                        gb.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    });
                    gb
                });
                vec![Some(ctx.grad.to_vec()), gb]
            }),
        ))
    }

    /// Per-channel normalization over every axis but the last:
    /// `y = γ·(x − μ)/sqrt(σ² + eps) + β`.
    ///
    /// With `stats = None`, `μ` and the population variance `σ²` come from
    /// `x` itself and are differentiated through; otherwise the given
    /// statistics are constants. Channels whose batch variance is exactly
    /// zero pass no gradient to `x`. Returns the output and the `(μ, σ²)` used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *vx.shape().last().unwrap_or(&0);
        if c == 0 || vg.numel() != c || vb.numel() != c {
            return Err(QfaError::Dimension(format!(
                "batch_norm: {c} channels but γ has {} and β {} elements",
                vg.numel(),
                vb.numel()
            )));
        }
        let rows = vx.numel() / c;
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(QfaError::Dimension(
                        "batch_norm: statistics length mismatch".into(),
                    ));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                for row in vx.data().chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in vx.data().chunks(c) {
                    var.iter_mut()
                        .zip(row)
                        .zip(&mean)
                        .for_each(|((s, v), m)| *s += (v - m) * (v - m));
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (vg.data(), vb.data());
        let mul: Vec<f64> = gd.iter().zip(&inv_std).map(|(g, s)| g * s).collect();
        let add: Vec<f64> = bd
            .iter()
            .zip(&mean)
            .zip(&mul)
            .map(|((b, m), k)| b - m * k)
            .collect();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for ((v, k), a) in row.iter_mut().zip(&mul).zip(&add) {
                *v = *v * k + a;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let (m2, is2, v2) = (mean.clone(), inv_std, var.clone());
        let v = self.custom(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (xd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (xr, gr) in xd.chunks(c).zip(g.chunks(c)) {
                    for ((((x, g), m), s), (sg, sgx)) in xr
                        .iter()
                        .zip(gr)
                        .zip(&m2)
                        .zip(&is2)
                        .zip(sum_g.iter_mut().zip(sum_gx.iter_mut()))
                    {
                        *sg += g;
                        *sgx += g * (x - m) * s;
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let n = rows as f64;
                    // a constant channel normalizes to zero for any input shift
                    let k: Vec<f64> = gd
                        .iter()
                        .zip(&is2)
                        .zip(&v2)
                        .map(|((g, s), v)| if batch_stats && *v == 0.0 { 0.0 } else { g * s })
                        .collect();
                    let mut gx = g.to_vec();
                    if batch_stats {
                        let mg: Vec<f64> = sum_g.iter().map(|v| v / n).collect();
                        let mgx: Vec<f64> = sum_gx.iter().map(|v| v / n).collect();
                        for (out, xr) in gx.chunks_mut(c).zip(xd.chunks(c)) {
                            for (ch, (o, x)) in out.iter_mut().zip(xr).enumerate() {
                                let xh = (x - m2[ch]) * is2[ch];
                                *o = k[ch] * (*o - mg[ch] - xh * mgx[ch]);
                            }
                        }
                    } else {
                        for out in gx.chunks_mut(c) {
                            out.iter_mut().zip(&k).for_each(|(o, k)| *o *= k);
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    ctx.needs[1].then_some(sum_gx),
                    ctx.needs[2].then_some(sum_g),
                ]
            }),
        );
        Ok((v, mean, var))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(QfaError::Dimension(format!(
                "cross entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &vl.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[label];
        }
        let out = Tensor::scalar(loss / b as f64);
        let labels = labels.to_vec();
        Ok(self.custom(
            out,
            &[logits],
            Box::new(move |ctx| {
                let scale = ctx.grad[0] / b as f64;
                let mut g = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    g[i * k + label] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![Some(g)]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.data().iter().sum());
        let n = va.numel();
        self.custom(
            out,
            &[a],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let vp = self.value(pred);
        if vp.numel() != target.len() {
            return Err(QfaError::Dimension(format!(
                "mse: {} predictions vs {} targets",
                vp.numel(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let diff: Vec<f64> = vp.data().iter().zip(target).map(|(p, t)| p - t).collect();
        let out = Tensor::scalar(diff.iter().map(|d| d * d).sum::<f64>() / n);
        Ok(self.custom(
            out,
            &[pred],
            Box::new(move |ctx| {
                vec![Some(
                    diff.iter().map(|d| 2.0 * d * ctx.grad[0] / n).collect(),
                )]
            }),
        ))
    }
}

/// Plain `[m, k] x [k, n]` product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            dst.iter_mut().zip(brow).for_each(|(d, b)| *d += av * b);
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Flat source indices of the crop, in row-major order of the output.
fn crop_index(shape: &[usize], offsets: &[usize], lens: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let total: usize = lens.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        out.push(
            idx.iter()
                .zip(offsets)
                .zip(&strides)
                .map(|((i, o), s)| (i + o) * s)
                .sum(),
        );
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < lens[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
