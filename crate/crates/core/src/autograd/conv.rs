//! Convolution and pooling over channels-last (`[N, H, W, C]`) activations.
//!
//! Convolution is one tape node whose two adjoints are also nodes; the three
//! differentiate into each other, so derivatives of every order stay on the
//! tape without storing unrolled patches. Pooling gathers the winning positions.

use std::borrow::Cow;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::graph::{gemm, gemm_into, Graph, Mat, Var, PAD};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of a square-kernel 2-D convolution on an `[N, H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2d {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Length of one unrolled patch (`kernel * kernel * in_channels`).
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Number of output positions, `N * OH * OW`.
    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    pub fn output_shape(&self, out_channels: usize) -> [usize; 4] {
        [self.batch, self.out_height(), self.out_width(), out_channels]
    }

    /// Below this channel count the kernels unroll patches; above it they run
    /// one strided product per kernel offset straight on the input.
    const UNROLL_BELOW: usize = 8;

    fn unrolled(&self) -> bool {
        self.in_channels < Self::UNROLL_BELOW
    }

    /// `conv(x, w)` as `[N * OH * OW, C_out]`.
    pub(crate) fn apply(&self, x: &[f64], w: &[f64], cout: usize) -> Vec<f64> {
        if self.unrolled() {
            let cols = self.unfold(x);
            return gemm(
                &cols,
                (self.rows(), self.patch_len()),
                false,
                w,
                (self.patch_len(), cout),
                false,
            );
        }
        let xp = self.pad(x);
        let (t, oh, ow) = (self.grid_rows(), self.out_height(), self.out_width());
        let (wp, depth) = (self.width + 2 * self.padding, self.kernel * self.in_channels);
        let mut grid = vec![0.0; t * cout];
        let mut y = Vec::with_capacity(self.rows() * cout);
        for n in 0..self.batch {
            for (ky, (a_off, w_row)) in self.kernel_rows(n).enumerate() {
                let a = Mat::new(&xp, a_off, self.stride * self.in_channels, 1);
                let b = Mat::new(w, w_row * cout, cout, 1);
                gemm_into(
                    t,
                    depth,
                    cout,
                    a,
                    b,
                    if ky == 0 { 0.0 } else { 1.0 },
                    &mut grid,
                    0,
                    cout,
                );
            }
            for oy in 0..oh {
                let r = oy * wp * cout;
                y.extend_from_slice(&grid[r..r + ow * cout]);
            }
        }
        y
    }

    /// Gradient of `<g, conv(x, w)>` in `x`, as `[N, H, W, C]`.
    pub(crate) fn input_grad(&self, g: &[f64], w: &[f64], cout: usize) -> Vec<f64> {
        if self.unrolled() {
            let cols = gemm(g, (self.rows(), cout), false, w, (self.patch_len(), cout), true);
            return self.fold(&cols);
        }
        let (hp, wp, c) = (
            self.height + 2 * self.padding,
            self.width + 2 * self.padding,
            self.in_channels,
        );
        let (t, depth, step) = (self.grid_rows(), self.kernel * c, self.stride * c);
        let mut dxp = vec![0.0; self.batch * hp * wp * c];
        let mut grid = vec![0.0; t * cout];
        let mut rows = vec![0.0; t * depth];
        for n in 0..self.batch {
            self.fill_grid(g, n, cout, &mut grid);
            for (a_off, w_row) in self.kernel_rows(n) {
                let a = Mat::new(&grid, 0, cout, 1);
                let b = Mat::new(w, w_row * cout, 1, cout);
                gemm_into(t, cout, depth, a, b, 0.0, &mut rows, 0, depth);
                // neighbouring windows overlap, so accumulate row by row
                for (r, src) in rows.chunks_exact(depth).enumerate() {
                    let dst = &mut dxp[a_off + r * step..a_off + r * step + depth];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
        }
        self.crop(dxp)
    }

    /// Gradient of `<g, conv(x, w)>` in `w`, as `[K * K * C, C_out]`.
    pub(crate) fn weight_grad(&self, x: &[f64], g: &[f64], cout: usize) -> Vec<f64> {
        if self.unrolled() {
            let cols = self.unfold(x);
            return gemm(
                &cols,
                (self.rows(), self.patch_len()),
                true,
                g,
                (self.rows(), cout),
                false,
            );
        }
        let xp = self.pad(x);
        let depth = self.kernel * self.in_channels;
        let mut dw = vec![0.0; self.patch_len() * cout];
        let mut grid = vec![0.0; self.grid_rows() * cout];
        for n in 0..self.batch {
            self.fill_grid(g, n, cout, &mut grid);
            for (a_off, w_row) in self.kernel_rows(n) {
                let a = Mat::new(&xp, a_off, 1, self.stride * self.in_channels);
                let b = Mat::new(&grid, 0, cout, 1);
                gemm_into(depth, self.grid_rows(), cout, a, b, 1.0, &mut dw, w_row * cout, cout);
            }
        }
        dw
    }

    /// Output positions of one sample laid on the padded input's row pitch:
    /// row `oy * W_pad + ox` reads the patch at flat offset `stride * row`.
    /// Rows with `ox >= OW` are discarded (or held at zero in gradients).
    fn grid_rows(&self) -> usize {
        (self.out_height() - 1) * (self.width + 2 * self.padding) + self.out_width()
    }

    /// `(input offset, weight row)` of every kernel row for sample `n`. One
    /// kernel row spans `kernel * C` contiguous values in both operands.
    fn kernel_rows(&self, n: usize) -> impl Iterator<Item = (usize, usize)> {
        let (k, c) = (self.kernel, self.in_channels);
        let (hp, wp) = (self.height + 2 * self.padding, self.width + 2 * self.padding);
        let base = n * hp * wp * c;
        (0..k).map(move |ky| (base + ky * wp * c, ky * k * c))
    }

    fn fill_grid(&self, g: &[f64], n: usize, cout: usize, grid: &mut [f64]) {
        let (oh, ow, wp) = (self.out_height(), self.out_width(), self.width + 2 * self.padding);
        for oy in 0..oh {
            let src = ((n * oh + oy) * ow) * cout;
            let dst = oy * wp * cout;
            grid[dst..dst + ow * cout].copy_from_slice(&g[src..src + ow * cout]);
        }
    }

    fn pad<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        let p = self.padding;
        if p == 0 {
            return Cow::Borrowed(x);
        }
        let (h, w, c) = (self.height, self.width, self.in_channels);
        let wp = w + 2 * p;
        let mut out = vec![0.0; self.batch * (h + 2 * p) * wp * c];
        for n in 0..self.batch {
            for y in 0..h {
                let src = ((n * h + y) * w) * c;
                let dst = ((n * (h + 2 * p) + y + p) * wp + p) * c;
                out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
            }
        }
        Cow::Owned(out)
    }

    fn crop(&self, xp: Vec<f64>) -> Vec<f64> {
        let p = self.padding;
        if p == 0 {
            return xp;
        }
        let (h, w, c) = (self.height, self.width, self.in_channels);
        let wp = w + 2 * p;
        let mut out = Vec::with_capacity(self.batch * h * w * c);
        for n in 0..self.batch {
            for y in 0..h {
                let src = ((n * (h + 2 * p) + y + p) * wp + p) * c;
                out.extend_from_slice(&xp[src..src + w * c]);
            }
        }
        out
    }

    /// Patches `[rows, patch_len]` of `x`; padding reads as zero.
    fn unfold(&self, x: &[f64]) -> Vec<f64> {
        self.patch_index()
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { x[i as usize] })
            .collect()
    }

    /// Adjoint of [`unfold`](Self::unfold): sums patch entries back onto the input grid.
    fn fold(&self, cols: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.height * self.width * self.in_channels];
        for (&i, &v) in self.patch_index().iter().zip(cols) {
            if i != PAD {
                out[i as usize] += v;
            }
        }
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::shape("conv2d", "kernel and stride must be positive"));
        }
        if self.height + 2 * self.padding < self.kernel || self.width + 2 * self.padding < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {} larger than padded input {}x{}",
                    self.kernel, self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    fn patch_index(&self) -> Rc<[u32]> {
        thread_local! {
            static CACHE: RefCell<HashMap<Conv2d, Rc<[u32]>>> = RefCell::new(HashMap::new());
        }
        CACHE.with(|cache| {
            cache
                .borrow_mut()
                .entry(*self)
                .or_insert_with(|| self.build_patch_index())
                .clone()
        })
    }

    fn build_patch_index(&self) -> Rc<[u32]> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w, c, k) = (self.height, self.width, self.in_channels, self.kernel);
        let mut idx = Vec::with_capacity(self.batch * oh * ow * self.patch_len());
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            for ch in 0..c {
                                idx.push(if inside {
                                    (((n * h + iy as usize) * w + ix as usize) * c + ch) as u32
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
        idx.into()
    }
}

impl Graph {
    /// Unrolls `x: [N, H, W, C]` into patches `[N * OH * OW, K * K * C]`.
    pub fn im2col(&mut self, x: Var, geom: &Conv2d) -> Result<Var> {
        geom.validate()?;
        let expect = [geom.batch, geom.height, geom.width, geom.in_channels];
        if self.shape(x) != expect {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} does not match geometry {expect:?}", self.shape(x)),
            ));
        }
        let rows = geom.batch * geom.out_height() * geom.out_width();
        self.gather(x, geom.patch_index(), &[rows, geom.patch_len()])
    }

    /// Convolution of `x: [N, H, W, C]` with `weight: [K*K*C, C_out]` and
    /// `bias: [C_out]`, giving `[N, OH, OW, C_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: &Conv2d) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() == 2 && self.shape(bias) != [ws[1]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", self.shape(bias), ws[1]),
            ));
        }
        let y = self.conv(x, weight, geom)?;
        self.bias_add(y, bias)
    }

    /// Non-overlapping `size x size` max pooling of `x: [N, H, W, C]`.
    /// Ties select the first position in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let [n, h, w, c] = match *self.shape(x) {
            [n, h, w, c] => [n, h, w, c],
            ref s => return Err(Error::shape("max-pool", format!("expected [N,H,W,C], got {s:?}"))),
        };
        if size == 0 || h < size || w < size {
            return Err(Error::shape("max-pool", format!("window {size} on {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let d = self.value(x).data();
        let mut idx: Vec<u32> = Vec::with_capacity(n * oh * ow * c);
        let mut best = vec![0.0; c];
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let start = idx.len();
                    for dy in 0..size {
                        for dx in 0..size {
                            let p = ((b * h + oy * size + dy) * w + ox * size + dx) * c;
                            let vals = &d[p..p + c];
                            if dy == 0 && dx == 0 {
                                best.copy_from_slice(vals);
                                idx.extend((p..p + c).map(|i| i as u32));
                                continue;
                            }
                            let slots = &mut idx[start..start + c];
                            for (ch, (&v, bv)) in vals.iter().zip(best.iter_mut()).enumerate() {
                                if v > *bv {
                                    *bv = v;
                                    slots[ch] = (p + ch) as u32;
                                }
                            }
                        }
                    }
                    out.extend_from_slice(&best);
                }
            }
        }
        Ok(self.push_gather(x, idx.into(), Tensor::from_parts(vec![n, oh, ow, c], out)))
    }
}
