use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a 2-D convolution from `[b, h, w, cin]` to `[b, ho, wo, cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(op, "input rank", 4, input.len()));
        }
        if weight.len() != 4 {
            return Err(Error::shape(op, "weight rank", 4, weight.len()));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be at least 1"));
        }
        let (b, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, wcin, cout) = (weight[0], weight[1], weight[2], weight[3]);
        if wcin != cin {
            return Err(Error::shape(op, "input channels", wcin, cin));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid(
                        op,
                        format!("same padding needs odd kernel extents, got {kh}x{kw}"),
                    ));
                }
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h {
                    return Err(Error::shape(op, "input height (valid padding)", kh, h));
                }
                if kw > w {
                    return Err(Error::shape(op, "input width (valid padding)", kw, w));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            b,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        })
    }

    /// Rows of the im2col matrix.
    pub fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Columns of the im2col matrix.
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.ho, self.wo, self.cout]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.b, self.h, self.w, self.cin]
    }

    #[inline]
    fn source(&self, o: usize, k: usize, vertical: bool) -> Option<usize> {
        let (pad, limit) = if vertical {
            (self.pad_top, self.h)
        } else {
            (self.pad_left, self.w)
        };
        (o * self.stride + k).checked_sub(pad).filter(|&p| p < limit)
    }
}

/// Unfold `input` into a `[rows, patch]` matrix.
pub(crate) fn im2col<S: Scalar>(g: &ConvGeom, input: &[S]) -> Vec<S> {
    let mut cols = Vec::with_capacity(g.rows() * g.patch());
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for i in 0..g.kh {
                    let iy = g.source(oy, i, true);
                    for j in 0..g.kw {
                        match (iy, g.source(ox, j, false)) {
                            (Some(iy), Some(ix)) => {
                                let src = ((b * g.h + iy) * g.w + ix) * g.cin;
                                cols.extend_from_slice(&input[src..src + g.cin]);
                            }
                            _ => cols.resize(cols.len() + g.cin, S::zero()),
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[rows, patch]` matrix back onto an input-shaped buffer, summing overlaps.
pub(crate) fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], out: &mut [S]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * patch..(row + 1) * patch];
                for i in 0..g.kh {
                    let Some(iy) = g.source(oy, i, true) else { continue };
                    for j in 0..g.kw {
                        let Some(ix) = g.source(ox, j, false) else { continue };
                        let dst = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let off = (i * g.kw + j) * g.cin;
                        for (o, &v) in out[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *o = *o + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `[rows, patch] x [patch, cout] + bias`.
pub(crate) fn conv_forward<S: Scalar>(g: &ConvGeom, input: &[S], weight: &[S], bias: &[S]) -> Vec<S> {
    let cols = im2col(g, input);
    let (m, k, n) = (g.rows(), g.patch(), g.cout);
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    S::gemm(
        m, k, n, &cols, k as isize, 1, weight, n as isize, 1, S::one(), &mut out, n as isize, 1,
    );
    out
}

/// Gradients of a convolution. Any of the three outputs may be skipped.
pub(crate) fn conv_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    grad_input: Option<&mut [S]>,
    grad_weight: Option<&mut [S]>,
    grad_bias: Option<&mut [S]>,
) {
    let (m, k, n) = (g.rows(), g.patch(), g.cout);
    if let Some(gb) = grad_bias {
        for row in grad_out.chunks_exact(n) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    if let Some(gw) = grad_weight {
        let cols = im2col(g, input);
        // gw[k, n] += cols^T[k, m] * grad_out[m, n]
        S::gemm(
            k, m, n, &cols, 1, k as isize, grad_out, n as isize, 1, S::one(), gw, n as isize, 1,
        );
    }
    if let Some(gi) = grad_input {
        // dcols[m, k] = grad_out[m, n] * weight^T[n, k]
        let mut dcols = vec![S::zero(); m * k];
        S::gemm(
            m, n, k, grad_out, n as isize, 1, weight, 1, n as isize, S::zero(), &mut dcols,
            k as isize, 1,
        );
        col2im_add(g, &dcols, gi);
    }
}

/// Geometry of the convolution whose adjoint a transposed convolution is.
///
/// The transposed convolution maps `[b, h, w, cin_t]` to `[b, h*s, w*s, cout_t]`
/// with a weight of shape `[kh, kw, cout_t, cin_t]`; the associated same-padded
/// convolution maps `[b, h*s, w*s, cout_t]` back to `[b, h, w, cin_t]`.
pub(crate) fn transpose_geom(
    input: &[usize],
    weight: &[usize],
    stride: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv2d_transpose";
    if input.len() != 4 {
        return Err(Error::shape(OP, "input rank", 4, input.len()));
    }
    if weight.len() != 4 {
        return Err(Error::shape(OP, "weight rank", 4, weight.len()));
    }
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be at least 1"));
    }
    if weight[3] != input[3] {
        return Err(Error::shape(OP, "input channels", weight[3], input[3]));
    }
    let fwd_in = [input[0], input[1] * stride, input[2] * stride, weight[2]];
    let g = ConvGeom::new(OP, &fwd_in, weight, stride, Padding::Same)?;
    debug_assert_eq!((g.ho, g.wo), (input[1], input[2]));
    Ok(g)
}

/// Forward of the transposed convolution: the input-gradient of the associated
/// convolution applied to `input`, plus `bias` over the output channels.
pub(crate) fn conv_transpose_forward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    bias: &[S],
) -> Vec<S> {
    let mut out = Vec::with_capacity(g.b * g.h * g.w * g.cin);
    for _ in 0..g.b * g.h * g.w {
        out.extend_from_slice(bias);
    }
    let (m, k, n) = (g.rows(), g.patch(), g.cout);
    let mut dcols = vec![S::zero(); m * k];
    S::gemm(
        m, n, k, input, n as isize, 1, weight, 1, n as isize, S::zero(), &mut dcols, k as isize, 1,
    );
    col2im_add(g, &dcols, &mut out);
    out
}

pub(crate) fn conv_transpose_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    grad_input: Option<&mut [S]>,
    grad_weight: Option<&mut [S]>,
    grad_bias: Option<&mut [S]>,
) {
    let (m, k, n) = (g.rows(), g.patch(), g.cout);
    if let Some(gb) = grad_bias {
        for px in grad_out.chunks_exact(g.cin) {
            for (acc, &v) in gb.iter_mut().zip(px) {
                *acc = *acc + v;
            }
        }
    }
    if grad_input.is_none() && grad_weight.is_none() {
        return;
    }
    let cols = im2col(g, grad_out);
    if let Some(gi) = grad_input {
        // gi[m, n] += cols[m, k] * weight[k, n]
        S::gemm(
            m, k, n, &cols, k as isize, 1, weight, n as isize, 1, S::one(), gi, n as isize, 1,
        );
    }
    if let Some(gw) = grad_weight {
        // gw[k, n] += cols^T[k, m] * input[m, n]
        S::gemm(
            k, m, n, &cols, 1, k as isize, input, n as isize, 1, S::one(), gw, n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shape_arithmetic() {
        let g = ConvGeom::new("t", &[1, 4, 4, 1], &[3, 3, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.ho, g.wo), (2, 2));
        assert_eq!((g.pad_top, g.pad_left), (0, 0));
        let g = ConvGeom::new("t", &[1, 5, 7, 1], &[3, 3, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.ho, g.wo), (3, 4));
        let g = ConvGeom::new("t", &[1, 5, 5, 1], &[3, 3, 1, 1], 1, Padding::Valid).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
    }

    #[test]
    fn even_kernel_rejected_for_same_padding() {
        let err = ConvGeom::new("t", &[1, 4, 4, 1], &[2, 2, 1, 1], 1, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("odd"));
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let err = ConvGeom::new("conv2d", &[1, 4, 4, 2], &[3, 3, 3, 1], 1, Padding::Same)
            .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }
}
