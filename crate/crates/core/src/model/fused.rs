//! Fused CPU kernels with hand-written backward passes.
//!
//! Each op is numerically identical to its composition from primitive tensor
//! ops; fusing avoids the per-op overhead and the intermediate tensors the
//! autograd graph would otherwise keep.

use candle_core::backend::BackendStorage;
use candle_core::{
    CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType,
};
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, LinalgScalar};
use num_traits::{Float, FromPrimitive};

trait Elem: WithDType + LinalgScalar + Float + FromPrimitive {}
impl Elem for f32 {}
impl Elem for f64 {}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused op expects contiguous input"),
    }
}

fn tensor_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn unsupported(dtype: DType) -> candle_core::Error {
    candle_core::Error::Msg(format!("fused op does not support {dtype:?}"))
}

fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Single-layer GRU over a full sequence from a zero initial state.
///
/// Arguments: input projections `(S, T, 3H)` (bias included), recurrent
/// weight `(H, 3H)` and recurrent bias `(3H)`. Gate order is r, z, n.
/// Output `(S, T, H)`.
pub struct GruSequence;

struct GruTrace<T> {
    /// hidden states h_0..h_T, `(T + 1, S, H)`
    h: Array3<T>,
    /// r, z, n and the recurrent n pre-activation at each step, `(T, S, H)`
    r: Array3<T>,
    z: Array3<T>,
    n: Array3<T>,
    hn: Array3<T>,
}

fn gru_run<T: Elem>(xp: ArrayView3<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> GruTrace<T> {
    let (s, t_len, h3) = xp.dim();
    let hd = h3 / 3;
    let mut trace = GruTrace {
        h: Array3::zeros((t_len + 1, s, hd)),
        r: Array3::zeros((t_len, s, hd)),
        z: Array3::zeros((t_len, s, hd)),
        n: Array3::zeros((t_len, s, hd)),
        hn: Array3::zeros((t_len, s, hd)),
    };
    for t in 0..t_len {
        let prev = trace.h.index_axis(Axis(0), t).to_owned();
        let gh = prev.dot(&w) + &b;
        for i in 0..s {
            for j in 0..hd {
                let r = sigmoid(xp[[i, t, j]] + gh[[i, j]]);
                let z = sigmoid(xp[[i, t, hd + j]] + gh[[i, hd + j]]);
                let hn = gh[[i, 2 * hd + j]];
                let n = (xp[[i, t, 2 * hd + j]] + r * hn).tanh();
                let hp = prev[[i, j]];
                trace.r[[t, i, j]] = r;
                trace.z[[t, i, j]] = z;
                trace.n[[t, i, j]] = n;
                trace.hn[[t, i, j]] = hn;
                trace.h[[t + 1, i, j]] = n + z * (hp - n);
            }
        }
    }
    trace
}

impl GruSequence {
    fn fwd_typed<T: Elem>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (s, t_len, h3) = l1.shape().dims3()?;
        let hd = h3 / 3;
        let xp = ArrayView3::from_shape((s, t_len, h3), contiguous::<T>(s1, l1)?)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let w = ArrayView2::from_shape((hd, h3), contiguous::<T>(s2, l2)?)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let b = ArrayView1::from_shape(h3, contiguous::<T>(s3, l3)?)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let trace = gru_run(xp, w, b);
        // (T + 1, S, H) -> (S, T, H) without the initial state
        let out = trace
            .h
            .slice(s![1.., .., ..])
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        Ok((T::to_cpu_storage_owned(out.into_raw_vec_and_offset().0), Shape::from((s, t_len, hd))))
    }

    fn bwd_typed<T: Elem>(
        &self,
        xp_t: &Tensor,
        w_t: &Tensor,
        b_t: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (s, t_len, h3) = xp_t.dims3()?;
        let hd = h3 / 3;
        let m = |e: ndarray::ShapeError| candle_core::Error::Msg(e.to_string());
        let xp = Array3::from_shape_vec((s, t_len, h3), tensor_vec::<T>(xp_t)?).map_err(m)?;
        let w = Array2::from_shape_vec((hd, h3), tensor_vec::<T>(w_t)?).map_err(m)?;
        let b = Array1::from_shape_vec(h3, tensor_vec::<T>(b_t)?).map_err(m)?;
        let g = Array3::from_shape_vec((s, t_len, hd), tensor_vec::<T>(grad)?).map_err(m)?;
        let tr = gru_run(xp.view(), w.view(), b.view());

        let mut d_xp = Array3::<T>::zeros((s, t_len, h3));
        let mut d_w = Array2::<T>::zeros((hd, h3));
        let mut d_b = Array1::<T>::zeros(h3);
        let mut dh_next = Array2::<T>::zeros((s, hd));
        let mut d_gh = Array2::<T>::zeros((s, h3));
        let one = T::one();
        for t in (0..t_len).rev() {
            let mut dh_prev = Array2::<T>::zeros((s, hd));
            for i in 0..s {
                for j in 0..hd {
                    let dh = g[[i, t, j]] + dh_next[[i, j]];
                    let (r, z, n, hn) = (
                        tr.r[[t, i, j]],
                        tr.z[[t, i, j]],
                        tr.n[[t, i, j]],
                        tr.hn[[t, i, j]],
                    );
                    let hp = tr.h[[t, i, j]];
                    let dn = dh * (one - z);
                    let dz = dh * (hp - n);
                    dh_prev[[i, j]] = dh * z;
                    let dan = dn * (one - n * n);
                    let dr = dan * hn;
                    let dar = dr * r * (one - r);
                    let daz = dz * z * (one - z);
                    d_xp[[i, t, j]] = dar;
                    d_xp[[i, t, hd + j]] = daz;
                    d_xp[[i, t, 2 * hd + j]] = dan;
                    d_gh[[i, j]] = dar;
                    d_gh[[i, hd + j]] = daz;
                    d_gh[[i, 2 * hd + j]] = dan * r;
                }
            }
            let prev = tr.h.index_axis(Axis(0), t);
            d_w = d_w + prev.t().dot(&d_gh);
            d_b = d_b + d_gh.sum_axis(Axis(0));
            dh_next = dh_prev + d_gh.dot(&w.t());
        }
        let dev = xp_t.device();
        Ok((
            Tensor::from_vec(d_xp.into_raw_vec_and_offset().0, (s, t_len, h3), dev)?,
            Tensor::from_vec(d_w.into_raw_vec_and_offset().0, (hd, h3), dev)?,
            Tensor::from_vec(d_b.into_raw_vec_and_offset().0, h3, dev)?,
        ))
    }
}

impl CustomOp3 for GruSequence {
    fn name(&self) -> &'static str {
        "gru-sequence"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match s1.dtype() {
            DType::F32 => self.fwd_typed::<f32>(s1, l1, s2, l2, s3, l3),
            DType::F64 => self.fwd_typed::<f64>(s1, l1, s2, l2, s3, l3),
            d => Err(unsupported(d)),
        }
    }

    fn bwd(
        &self,
        xp: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (a, bw, bb) = match xp.dtype() {
            DType::F32 => self.bwd_typed::<f32>(xp, w, b, grad)?,
            DType::F64 => self.bwd_typed::<f64>(xp, w, b, grad)?,
            d => return Err(unsupported(d)),
        };
        Ok((Some(a), Some(bw), Some(bb)))
    }
}

/// Layer normalization over the last dimension with affine `(gamma, beta)`.
pub struct LayerNormOp {
    pub eps: f64,
}

fn row_stats<T: Elem>(row: &[T], eps: f64) -> (T, T) {
    let d = T::from_usize(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / d;
    (mean, T::one() / (var + <T as FromPrimitive>::from_f64(eps).unwrap()).sqrt())
}

impl LayerNormOp {
    fn fwd_typed<T: Elem>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous::<T>(s1, l1)?;
        let gamma = contiguous::<T>(s2, l2)?;
        let beta = contiguous::<T>(s3, l3)?;
        let d = gamma.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let (mean, inv) = row_stats(row, self.eps);
            for j in 0..d {
                out.push((row[j] - mean) * inv * gamma[j] + beta[j]);
            }
        }
        Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
    }

    fn bwd_typed<T: Elem>(
        &self,
        x_t: &Tensor,
        gamma_t: &Tensor,
        grad_t: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let x = tensor_vec::<T>(x_t)?;
        let gamma = tensor_vec::<T>(gamma_t)?;
        let grad = tensor_vec::<T>(grad_t)?;
        let d = gamma.len();
        let df = T::from_usize(d).unwrap();
        let mut dx = Vec::with_capacity(x.len());
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut dxhat = vec![T::zero(); d];
        for (row, g) in x.chunks_exact(d).zip(grad.chunks_exact(d)) {
            let (mean, inv) = row_stats(row, self.eps);
            let (mut sum_dxhat, mut sum_dxhat_xhat) = (T::zero(), T::zero());
            for j in 0..d {
                xhat[j] = (row[j] - mean) * inv;
                dxhat[j] = g[j] * gamma[j];
                dgamma[j] = dgamma[j] + g[j] * xhat[j];
                dbeta[j] = dbeta[j] + g[j];
                sum_dxhat = sum_dxhat + dxhat[j];
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
            }
            for j in 0..d {
                dx.push(inv * (dxhat[j] - sum_dxhat / df - xhat[j] * sum_dxhat_xhat / df));
            }
        }
        let dev = x_t.device();
        Ok((
            Tensor::from_vec(dx, x_t.shape(), dev)?,
            Tensor::from_vec(dgamma, d, dev)?,
            Tensor::from_vec(dbeta, d, dev)?,
        ))
    }
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match s1.dtype() {
            DType::F32 => self.fwd_typed::<f32>(s1, l1, s2, l2, s3, l3),
            DType::F64 => self.fwd_typed::<f64>(s1, l1, s2, l2, s3, l3),
            d => Err(unsupported(d)),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (a, g, b) = match x.dtype() {
            DType::F32 => self.bwd_typed::<f32>(x, gamma, grad)?,
            DType::F64 => self.bwd_typed::<f64>(x, gamma, grad)?,
            d => return Err(unsupported(d)),
        };
        Ok((Some(a), Some(g), Some(b)))
    }
}

/// Softmax over the last dimension.
pub struct SoftmaxLast;

impl SoftmaxLast {
    fn fwd_typed<T: Elem>(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous::<T>(s, l)?;
        let d = *l.shape().dims().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d.max(1)) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| Float::max(a, v));
            let start = out.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / sum;
            }
        }
        Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
    }

    fn bwd_typed<T: Elem>(&self, res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let y = tensor_vec::<T>(res)?;
        let g = tensor_vec::<T>(grad)?;
        let d = *res.dims().last().unwrap_or(&1);
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.chunks_exact(d.max(1)).zip(g.chunks_exact(d.max(1))) {
            let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
            for (&yv, &gv) in yr.iter().zip(gr) {
                dx.push(yv * (gv - dot));
            }
        }
        Tensor::from_vec(dx, res.shape(), res.device())
    }
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s.dtype() {
            DType::F32 => self.fwd_typed::<f32>(s, l),
            DType::F64 => self.fwd_typed::<f64>(s, l),
            d => Err(unsupported(d)),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dx = match res.dtype() {
            DType::F32 => self.bwd_typed::<f32>(res, grad)?,
            DType::F64 => self.bwd_typed::<f64>(res, grad)?,
            d => return Err(unsupported(d)),
        };
        Ok(Some(dx))
    }
}

pub fn gru_sequence(xp: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    xp.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, GruSequence)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLast)
}

/// Scaled exponential linear unit.
pub struct Selu;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

impl Selu {
    fn fwd_typed<T: Elem>(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous::<T>(s, l)?;
        let scale = <T as FromPrimitive>::from_f64(SELU_SCALE).unwrap();
        let sa = <T as FromPrimitive>::from_f64(SELU_SCALE * SELU_ALPHA).unwrap();
        let out: Vec<T> = x
            .iter()
            .map(|&v| if v > T::zero() { scale * v } else { sa * (v.exp() - T::one()) })
            .collect();
        Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
    }

    fn bwd_typed<T: Elem>(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let x = tensor_vec::<T>(arg)?;
        let y = tensor_vec::<T>(res)?;
        let g = tensor_vec::<T>(grad)?;
        let scale = <T as FromPrimitive>::from_f64(SELU_SCALE).unwrap();
        let sa = <T as FromPrimitive>::from_f64(SELU_SCALE * SELU_ALPHA).unwrap();
        let dx: Vec<T> = x
            .iter()
            .zip(&y)
            .zip(&g)
            .map(|((&xv, &yv), &gv)| if xv > T::zero() { gv * scale } else { gv * (yv + sa) })
            .collect();
        Tensor::from_vec(dx, arg.shape(), arg.device())
    }
}

impl CustomOp1 for Selu {
    fn name(&self) -> &'static str {
        "selu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s.dtype() {
            DType::F32 => self.fwd_typed::<f32>(s, l),
            DType::F64 => self.fwd_typed::<f64>(s, l),
            d => Err(unsupported(d)),
        }
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dx = match res.dtype() {
            DType::F32 => self.bwd_typed::<f32>(arg, res, grad)?,
            DType::F64 => self.bwd_typed::<f64>(arg, res, grad)?,
            d => return Err(unsupported(d)),
        };
        Ok(Some(dx))
    }
}

pub fn selu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Selu)
}
