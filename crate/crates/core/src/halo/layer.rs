use std::ops::AddAssign;

use serde::Serialize;

use super::scheme::{HaloScheme, Matmul, Placement};
use crate::error::{Error, Result};
use crate::hadamard::{build_spec, is_supported, next_supported, transform_left, transform_right};
use crate::quantize::{qmatmul, quantize, Granularity, NumericFormat, QuantizedTensor};
use crate::tensor::{Accumulate, Element, Tensor};

/// Rotations applied to an operand in its natural orientation: `left`
/// rotates over rows, `right` over columns (left first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct Rotation {
    pub left: bool,
    pub right: bool,
}

impl Rotation {
    pub const fn new(left: bool, right: bool) -> Self {
        Self { left, right }
    }
}

/// `batch_pad` is `None` when the rows are a feature dimension, otherwise
/// whether zero-padding to a supported order is allowed.
fn rotate<T: Element>(a: &Tensor<T>, rot: Rotation, batch_pad: Option<bool>) -> Result<Tensor<T>> {
    let mut out = if rot.left {
        let rows = a.rows();
        let target = if is_supported(rows) {
            rows
        } else {
            match batch_pad {
                Some(true) => next_supported(rows),
                Some(false) => return Err(Error::UnpaddableBatch(rows)),
                None => return Err(Error::UnsupportedDim(rows)),
            }
        };
        let padded = if target == rows { a.clone() } else { a.pad_rows(target) };
        transform_left(&padded, &build_spec(target)?)?
    } else {
        a.clone()
    };
    if rot.right {
        out = transform_right(&out, &build_spec(out.cols())?)?;
    }
    Ok(out)
}

/// Undoes output-side rotations and drops padding rows.
fn unrotate<T: Element>(y: Tensor<T>, left: bool, right: bool, rows: usize) -> Result<Tensor<T>> {
    let mut y = y;
    if left {
        y = transform_left(&y, &build_spec(y.rows())?)?;
    }
    if y.rows() != rows {
        y = y.truncate_rows(rows);
    }
    if right {
        y = transform_right(&y, &build_spec(y.cols())?)?;
    }
    Ok(y)
}

/// Quantized `A · B` under an arbitrary placement. Left rotations pad the
/// rows of `A` when needed; middle and right need supported `k` and `q`.
pub fn apply_placement<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    placement: Placement,
    format_a: NumericFormat,
    format_b: NumericFormat,
    granularity: Granularity,
) -> Result<Tensor<T>> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "apply_placement",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let ra = rotate(a, Rotation::new(placement.left, placement.middle), Some(true))?;
    let rb = rotate(b, Rotation::new(placement.middle, placement.right), None)?;
    let qa = quantize(&ra, format_a, granularity, None)?;
    let qb = quantize(&rb, format_b, granularity, None)?;
    let y = qmatmul(&qa, &qb, false)?;
    unrotate(y, placement.left, placement.right, a.rows())
}

/// Quantizer invocations per operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct QuantCalls {
    pub x: usize,
    pub w: usize,
    pub e: usize,
}

impl AddAssign for QuantCalls {
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.w += o.w;
        self.e += o.e;
    }
}

/// Low-rank adapter `Y += (X Uᵀ) Vᵀ` with `U: r x m`, `V: n x r`.
#[derive(Debug, Clone)]
pub struct Lora<T: Element = f32> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Element> Lora<T> {
    pub fn rank(&self) -> usize {
        self.u.rows()
    }
}

/// What forward leaves behind for backward.
#[derive(Debug, Clone)]
pub struct SavedContext<T: Element = f32> {
    rows: usize,
    scheme: String,
    x_q: Option<(Rotation, QuantizedTensor)>,
    w_q: Option<(Rotation, QuantizedTensor)>,
    x_full: Option<Tensor<T>>,
    calls: QuantCalls,
}

impl<T: Element> SavedContext<T> {
    pub fn batch_rows(&self) -> usize {
        self.rows
    }

    /// Quantized (rotated) input from forward, with its rotation.
    pub fn quantized_input(&self) -> Option<(Rotation, &QuantizedTensor)> {
        self.x_q.as_ref().map(|(r, q)| (*r, q))
    }

    pub fn quantized_weight(&self) -> Option<(Rotation, &QuantizedTensor)> {
        self.w_q.as_ref().map(|(r, q)| (*r, q))
    }

    /// Whether an unquantized copy of the input was kept.
    pub fn keeps_full_input(&self) -> bool {
        self.x_full.is_some()
    }

    pub fn forward_calls(&self) -> QuantCalls {
        self.calls
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    pub e_x: Tensor<T>,
    /// Weight gradient; absent when the weight is frozen under LoRA.
    pub g_w: Option<Tensor<T>>,
    pub g_u: Option<Tensor<T>>,
    pub g_v: Option<Tensor<T>>,
    pub calls: QuantCalls,
}

/// `Y = X Wᵀ` with `W: n x m`, quantized per [`HaloScheme`].
#[derive(Debug, Clone)]
pub struct HaloLinear<T: Element = f32> {
    pub weight: Tensor<T>,
    pub lora: Option<Lora<T>>,
    pub scheme: HaloScheme,
    /// Zero-pad the batch dimension for left rotations instead of failing.
    pub pad_batch: bool,
}

impl<T: Element> HaloLinear<T> {
    pub fn new(weight: Tensor<T>, scheme: HaloScheme) -> Self {
        Self {
            weight,
            lora: None,
            scheme,
            pad_batch: true,
        }
    }

    pub fn with_lora(mut self, u: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        let (n, m) = self.weight.shape();
        if u.cols() != m || v.rows() != n || u.rows() != v.cols() {
            return Err(Error::ShapeMismatch {
                op: "lora",
                left: u.shape(),
                right: v.shape(),
            });
        }
        self.lora = Some(Lora { u, v });
        Ok(self)
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    fn x_rot_forward(&self) -> Rotation {
        Rotation::new(self.scheme.forward.left, self.scheme.forward.middle)
    }

    fn w_rot_forward(&self) -> Rotation {
        Rotation::new(self.scheme.forward.right, self.scheme.forward.middle)
    }

    fn e_rot_error(&self) -> Rotation {
        Rotation::new(self.scheme.error.left, self.scheme.error.middle)
    }

    fn w_rot_error(&self) -> Rotation {
        Rotation::new(self.scheme.error.middle, self.scheme.error.right)
    }

    fn e_rot_grad(&self) -> Rotation {
        Rotation::new(self.scheme.weight_grad.middle, self.scheme.weight_grad.left)
    }

    fn x_rot_grad(&self) -> Rotation {
        Rotation::new(self.scheme.weight_grad.middle, self.scheme.weight_grad.right)
    }

    fn quantize_weight(&self, rot: Rotation) -> Result<QuantizedTensor> {
        let w = rotate(&self.weight, rot, None)?;
        quantize(&w, self.scheme.format_w, self.scheme.granularity, None)
    }

    fn quantize_operand(&self, a: &Tensor<T>, rot: Rotation, format: NumericFormat) -> Result<QuantizedTensor> {
        let r = rotate(a, rot, Some(self.pad_batch))?;
        quantize(&r, format, self.scheme.granularity, None)
    }

    fn check_weight(&self, w: &QuantizedTensor, rot: Rotation, needed: Rotation, what: &str) -> Result<()> {
        if needed != rot {
            return Err(Error::InvalidScheme(format!(
                "{what} needs weight rotation {needed:?}, supplied {rot:?}"
            )));
        }
        if w.shape() != self.weight.shape() || w.format() != self.scheme.format_w {
            return Err(Error::ContextMismatch(format!(
                "supplied weight {:?} {} does not match layer {:?} {}",
                w.shape(),
                w.format(),
                self.weight.shape(),
                self.scheme.format_w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SavedContext<T>)> {
        self.forward_impl(x, None)
    }

    /// Forward with an externally quantized weight, as delivered by a
    /// sharded all-gather, rotated by `rotation`.
    pub fn forward_with_weight(
        &self,
        x: &Tensor<T>,
        weight: &QuantizedTensor,
        rotation: Rotation,
    ) -> Result<(Tensor<T>, SavedContext<T>)> {
        self.forward_impl(x, Some((rotation, weight)))
    }

    /// Weight rotation the forward product needs.
    pub fn forward_weight_rotation(&self) -> Rotation {
        self.w_rot_forward()
    }

    /// Weight rotation the input-gradient product needs.
    pub fn error_weight_rotation(&self) -> Rotation {
        self.w_rot_error()
    }

    fn forward_impl(
        &self,
        x: &Tensor<T>,
        supplied: Option<(Rotation, &QuantizedTensor)>,
    ) -> Result<(Tensor<T>, SavedContext<T>)> {
        let (n, m) = self.weight.shape();
        if x.cols() != m {
            return Err(Error::ShapeMismatch {
                op: "halo forward",
                left: x.shape(),
                right: (n, m),
            });
        }
        let s = &self.scheme;
        let b = x.rows();
        let mut calls = QuantCalls::default();
        let (mut y, x_q, w_q) = if s.quantizes(Matmul::Forward) {
            let xr = self.x_rot_forward();
            let wr = self.w_rot_forward();
            let xq = self.quantize_operand(x, xr, s.format_x)?;
            calls.x += 1;
            let wq = match supplied {
                Some((rot, w)) => {
                    self.check_weight(w, rot, wr, "forward")?;
                    w.clone()
                }
                None => {
                    calls.w += 1;
                    self.quantize_weight(wr)?
                }
            };
            let y = qmatmul(&xq, &wq, true)?;
            let y = unrotate(y, s.forward.left, s.forward.right, b)?;
            (y, Some((xr, xq)), Some((wr, wq)))
        } else {
            let y = x.matmul(&self.weight.transpose(), Accumulate::Single)?;
            (y, None, None)
        };
        if let Some(l) = self.lora.as_ref().filter(|l| l.rank() > 0) {
            let xu = x.matmul(&l.u.transpose(), Accumulate::Single)?;
            y = y.add(&xu.matmul(&l.v.transpose(), Accumulate::Single)?)?;
        }
        let x_reusable = x_q.as_ref().is_some_and(|(r, _)| *r == self.x_rot_grad());
        let need_full = self.lora.is_some() || !s.quantizes(Matmul::WeightGrad) || !x_reusable;
        let ctx = SavedContext {
            rows: b,
            scheme: s.placement_string(),
            x_q,
            w_q,
            x_full: need_full.then(|| x.clone()),
            calls,
        };
        Ok((y, ctx))
    }

    pub fn backward(&self, ctx: &SavedContext<T>, e_y: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_impl(ctx, e_y, None)
    }

    /// Backward with a re-gathered quantized weight replacing the saved one.
    pub fn backward_with_weight(
        &self,
        ctx: &SavedContext<T>,
        e_y: &Tensor<T>,
        weight: &QuantizedTensor,
        rotation: Rotation,
    ) -> Result<Gradients<T>> {
        self.backward_impl(ctx, e_y, Some((rotation, weight)))
    }

    fn backward_impl(
        &self,
        ctx: &SavedContext<T>,
        e_y: &Tensor<T>,
        supplied: Option<(Rotation, &QuantizedTensor)>,
    ) -> Result<Gradients<T>> {
        let s = &self.scheme;
        let (n, _m) = self.weight.shape();
        let b = ctx.rows;
        if e_y.shape() != (b, n) {
            return Err(Error::ShapeMismatch {
                op: "halo backward",
                left: e_y.shape(),
                right: (b, n),
            });
        }
        if ctx.scheme != s.placement_string() {
            return Err(Error::ContextMismatch(format!(
                "context from scheme {} used with {}",
                ctx.scheme,
                s.placement_string()
            )));
        }
        let mut calls = QuantCalls::default();

        // E_X = E_Y W
        let mut e_q_shared: Option<(Rotation, QuantizedTensor)> = None;
        let mut e_x = if s.quantizes(Matmul::Error) {
            let er = self.e_rot_error();
            let wr = self.w_rot_error();
            let eq = self.quantize_operand(e_y, er, s.format_e)?;
            calls.e += 1;
            let wq = match (supplied, &ctx.w_q) {
                (Some((rot, w)), _) => {
                    self.check_weight(w, rot, wr, "error product")?;
                    w.clone()
                }
                (None, Some((r, q))) if *r == wr => q.clone(),
                _ => {
                    calls.w += 1;
                    self.quantize_weight(wr)?
                }
            };
            let y = qmatmul(&eq, &wq, false)?;
            e_q_shared = Some((er, eq));
            unrotate(y, s.error.left, s.error.right, b)?
        } else {
            e_y.matmul(&self.weight, Accumulate::Single)?
        };

        // G = E_Yᵀ X
        let g_w = if self.lora.is_some() {
            None
        } else if s.quantizes(Matmul::WeightGrad) {
            let er = self.e_rot_grad();
            let xr = self.x_rot_grad();
            let shared = e_q_shared
                .as_ref()
                .filter(|(r, _)| *r == er)
                .and_then(|(_, q)| q.transpose());
            let eqt = match shared {
                Some(q) => q,
                None => {
                    calls.e += 1;
                    let rotated = rotate(e_y, er, Some(self.pad_batch))?;
                    match quantize(&rotated, s.format_e, s.granularity, None)?.transpose() {
                        Some(q) => q,
                        // Block layouts that do not survive transposition are
                        // quantized in the product orientation instead.
                        None => quantize(&rotated.transpose(), s.format_e, s.granularity, None)?,
                    }
                }
            };
            let xq = match (&ctx.x_q, &ctx.x_full) {
                (Some((r, q)), _) if *r == xr => q.clone(),
                (_, Some(x)) => {
                    calls.x += 1;
                    self.quantize_operand(x, xr, s.format_x)?
                }
                _ => return Err(Error::ContextMismatch("input was not saved".into())),
            };
            let g = qmatmul(&eqt, &xq, false)?;
            Some(unrotate(g, s.weight_grad.left, s.weight_grad.right, n)?)
        } else {
            let x = ctx
                .x_full
                .as_ref()
                .ok_or_else(|| Error::ContextMismatch("input was not saved".into()))?;
            Some(e_y.transpose().matmul(x, Accumulate::Single)?)
        };

        let (mut g_u, mut g_v) = (None, None);
        if let Some(l) = &self.lora {
            let x = ctx
                .x_full
                .as_ref()
                .ok_or_else(|| Error::ContextMismatch("input was not saved".into()))?;
            if l.rank() > 0 {
                let ev = e_y.matmul(&l.v, Accumulate::Single)?;
                e_x = e_x.add(&ev.matmul(&l.u, Accumulate::Single)?)?;
            }
            let xu = x.matmul(&l.u.transpose(), Accumulate::Single)?;
            g_v = Some(e_y.transpose().matmul(&xu, Accumulate::Single)?);
            g_u = Some(
                l.v.transpose()
                    .matmul(&e_y.transpose(), Accumulate::Single)?
                    .matmul(x, Accumulate::Single)?,
            );
        }
        Ok(Gradients {
            e_x,
            g_w,
            g_u,
            g_v,
            calls,
        })
    }

    /// The quantized rotated weight the forward product uses, for serving
    /// with the rotation folded into the preceding layer.
    pub fn export_inference_weights(&self) -> Result<QuantizedTensor> {
        let rot = self.w_rot_forward();
        if !self.scheme.quantizes(Matmul::Forward) || rot == Rotation::default() {
            return Err(Error::NothingToExport("forward weights are not rotated"));
        }
        self.quantize_weight(rot)
    }
}
