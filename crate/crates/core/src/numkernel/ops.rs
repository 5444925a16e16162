//! Forward and analytic-backward kernels.

use super::{DType, KernelError, Result, Tensor};

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the caller guarantees that the strides address `a` as m×k and
    // `b` as k×n within their slices; `c` is a fresh m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(KernelError::Dimension(format!(
            "matmul: inner dimensions of {:?} and {:?} disagree",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
    );
    Tensor::from_op(vec![m, n], c, a.dtype().join(b.dtype()))
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(KernelError::Dimension(format!(
            "matmul_nt: {:?} and transposed {:?} disagree",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (1, k as isize),
    );
    Tensor::from_op(vec![m, n], c, a.dtype().join(b.dtype()))
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(KernelError::Dimension(format!(
            "matmul_tn: transposed {:?} and {:?} disagree",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm(
        m,
        k,
        n,
        a.data(),
        (1, m as isize),
        b.data(),
        (n as isize, 1),
    );
    Tensor::from_op(vec![m, n], c, a.dtype().join(b.dtype()))
}

/// Column sums of a matrix.
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    Tensor::from_op(vec![c], out, x.dtype())
}

/// Adds a length-n bias vector to every row of an m×n matrix.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if b.shape() != [c] {
        return Err(KernelError::Dimension(format!(
            "bias {:?} does not match {:?}",
            b.shape(),
            x.shape()
        )));
    }
    let mut data = x.data().to_vec();
    for i in 0..r {
        for (v, bb) in data[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Tensor::from_op(vec![r, c], data, x.dtype().join(b.dtype()))
}

/// `y = x·W + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = x.dims2()?;
    let (k2, n) = w.dims2()?;
    if k != k2 || b.shape() != [n] {
        return Err(KernelError::Dimension(format!(
            "affine: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    add_row_bias(&matmul(x, w)?, b)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    Ok(AffineGrads {
        dx: matmul_nt(dy, w)?,
        dw: matmul_tn(x, dy)?,
        db: sum_rows(dy)?,
    })
}

/// Output spatial size of a valid convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(KernelError::Geometry("stride must be at least 1".into()));
    }
    if kernel == 0 || kernel > input {
        return Err(KernelError::Geometry(format!(
            "kernel {kernel} does not fit input extent {input}"
        )));
    }
    Ok((input - kernel) / stride + 1)
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn conv_geometry(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeometry> {
    let (h, w, cin) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => {
            return Err(KernelError::Dimension(format!(
                "conv2d input must be H×W×C, got {s:?}"
            )))
        }
    };
    let (k, cout) = match kernel.shape() {
        [k1, k2, c, o] if k1 == k2 && *c == cin => (*k1, *o),
        s => {
            return Err(KernelError::Dimension(format!(
                "conv2d kernel {s:?} incompatible with input {:?}",
                x.shape()
            )))
        }
    };
    let oh = conv_output_size(h, k, stride)?;
    let ow = conv_output_size(w, k, stride)?;
    Ok(ConvGeometry {
        h,
        w,
        cin,
        k,
        cout,
        oh,
        ow,
        stride,
    })
}

fn im2col(x: &Tensor, g: &ConvGeometry) -> Tensor {
    let cols = g.k * g.k * g.cin;
    let mut out = vec![0.0; g.oh * g.ow * cols];
    let xd = x.data();
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let row = (oi * g.ow + oj) * cols;
            for ki in 0..g.k {
                let src = ((oi * g.stride + ki) * g.w + oj * g.stride) * g.cin;
                let dst = row + ki * g.k * g.cin;
                out[dst..dst + g.k * g.cin].copy_from_slice(&xd[src..src + g.k * g.cin]);
            }
        }
    }
    Tensor::from_op(vec![g.oh * g.ow, cols], out, x.dtype()).expect("finite input")
}

/// Valid (unpadded) cross-correlation of an H×W×Cin input with a
/// k×k×Cin×Cout kernel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, bias: &Tensor) -> Result<Tensor> {
    let g = conv_geometry(x, kernel, stride)?;
    if bias.shape() != [g.cout] {
        return Err(KernelError::Dimension(format!(
            "conv2d bias {:?} does not match {} output channels",
            bias.shape(),
            g.cout
        )));
    }
    let patches = im2col(x, &g);
    let k2 = kernel.reshape(&[g.k * g.k * g.cin, g.cout])?;
    let y = add_row_bias(&matmul(&patches, &k2)?, bias)?;
    y.reshape(&[g.oh, g.ow, g.cout])
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dkernel: Tensor,
    pub dbias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    dy: &Tensor,
) -> Result<ConvGrads> {
    let g = conv_geometry(x, kernel, stride)?;
    if dy.shape() != [g.oh, g.ow, g.cout] {
        return Err(KernelError::Dimension(format!(
            "conv2d upstream gradient {:?} should be {:?}",
            dy.shape(),
            [g.oh, g.ow, g.cout]
        )));
    }
    let patches = im2col(x, &g);
    let cols = g.k * g.k * g.cin;
    let k2 = kernel.reshape(&[cols, g.cout])?;
    let dy2 = dy.reshape(&[g.oh * g.ow, g.cout])?;
    let dkernel = matmul_tn(&patches, &dy2)?.reshape(kernel.shape())?;
    let dbias = sum_rows(&dy2)?;
    let dpatches = matmul_nt(&dy2, &k2)?;
    let mut dx = vec![0.0; g.h * g.w * g.cin];
    let dp = dpatches.data();
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let row = (oi * g.ow + oj) * cols;
            for ki in 0..g.k {
                let dst = ((oi * g.stride + ki) * g.w + oj * g.stride) * g.cin;
                let src = row + ki * g.k * g.cin;
                for t in 0..g.k * g.cin {
                    dx[dst + t] += dp[src + t];
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_op(x.shape().to_vec(), dx, x.dtype().join(dy.dtype()))?,
        dkernel,
        dbias,
    })
}

/// Saved statistics for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = x.dims2()?;
    if d == 0 || gain.shape() != [d] || shift.shape() != [d] {
        return Err(KernelError::Dimension(format!(
            "layer_norm: x {:?}, gain {:?}, shift {:?}",
            x.shape(),
            gain.shape(),
            shift.shape()
        )));
    }
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(KernelError::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut xhat = vec![0.0; n * d];
    let mut y = vec![0.0; n * d];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain.data()[j] + shift.data()[j];
        }
    }
    let dtype = x.dtype().join(gain.dtype());
    Ok((
        Tensor::from_op(vec![n, d], y, dtype)?,
        LayerNormCache {
            xhat: Tensor::from_op(vec![n, d], xhat, DType::F64)?,
            inv_std,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub dx: Tensor,
    pub dgain: Tensor,
    pub dshift: Tensor,
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<LayerNormGrads> {
    let (n, d) = cache.xhat.dims2()?;
    dy.check_same_shape(&cache.xhat, "layer_norm backward")?;
    let mut dx = vec![0.0; n * d];
    let mut dgain = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dshift[j] += g[j];
            dxhat[j] = g[j] * gain.data()[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = cache.inv_std[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    let dtype = dy.dtype().join(gain.dtype());
    Ok(LayerNormGrads {
        dx: Tensor::from_op(vec![n, d], dx, dtype)?,
        dgain: Tensor::from_op(vec![d], dgain, dtype)?,
        dshift: Tensor::from_op(vec![d], dshift, dtype)?,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..m {
            let e = (row[j] - max).exp();
            y[i * m + j] = e;
            z += e;
        }
        for v in &mut y[i * m..(i + 1) * m] {
            *v /= z;
        }
    }
    Tensor::from_op(vec![n, m], y, x.dtype())
}

/// Gradient of `softmax_rows` given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (n, m) = y.dims2()?;
    dy.check_same_shape(y, "softmax backward")?;
    let mut dx = vec![0.0; n * m];
    for i in 0..n {
        let yr = y.row(i);
        let gr = dy.row(i);
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..m {
            dx[i * m + j] = yr[j] * (gr[j] - s);
        }
    }
    Tensor::from_op(vec![n, m], dx, y.dtype().join(dy.dtype()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        .collect();
    Tensor::from_op(x.shape().to_vec(), data, x.dtype())
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.check_same_shape(x, "gelu backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect();
    Tensor::from_op(x.shape().to_vec(), data, x.dtype().join(dy.dtype()))
}

/// `a·b / (‖a‖‖b‖)` for two vectors of equal length.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KernelError::Dimension(format!(
            "cosine_similarity: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(KernelError::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::SeededRng;

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        rng.normal_tensor(shape, 1.0)
    }

    #[test]
    fn affine_identity() {
        let y = affine(&Tensor::eye(3), &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, Tensor::eye(3));
    }

    #[test]
    fn affine_sum_case() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let y = affine(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = affine(
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[4, 5]),
            &Tensor::zeros(&[5]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = SeededRng::new(3);
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let ab = matmul(&a, &b).unwrap();
        let ab_nt = matmul_nt(&a, &b.transpose().unwrap()).unwrap();
        let ab_tn = matmul_tn(&a.transpose().unwrap(), &b).unwrap();
        assert!(ab.max_abs_diff(&ab_nt).unwrap() < 1e-12);
        assert!(ab.max_abs_diff(&ab_tn).unwrap() < 1e-12);
        // naive check of one entry
        let v: f64 = (0..5).map(|t| a.row(2)[t] * b.data()[t * 3 + 1]).sum();
        assert!((ab.row(2)[1] - v).abs() < 1e-12);
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(&[4, 4, 1], 1.0);
        let k = Tensor::full(&[4, 4, 1, 1], 1.0);
        let y = conv2d(&x, &k, 4, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[16.0]);
    }

    #[test]
    fn conv_full_scale_geometry() {
        let x = Tensor::zeros(&[64, 64, 2]);
        let k = Tensor::zeros(&[4, 4, 2, 3]);
        let y = conv2d(&x, &k, 4, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.shape(), &[16, 16, 3]);
    }

    #[test]
    fn conv_kernel_larger_than_input_is_geometry_error() {
        let x = Tensor::zeros(&[3, 8, 1]);
        let k = Tensor::zeros(&[4, 4, 1, 1]);
        let err = conv2d(&x, &k, 1, &Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, KernelError::Geometry(_)));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = SeededRng::new(11);
        let x = rand_tensor(&mut rng, &[7, 6, 2]);
        let k = rand_tensor(&mut rng, &[3, 3, 2, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let y = conv2d(&x, &k, 2, &b).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        for oi in 0..3 {
            for oj in 0..2 {
                for o in 0..2 {
                    let mut s = b.data()[o];
                    for ki in 0..3 {
                        for kj in 0..3 {
                            for c in 0..2 {
                                let xv = x.data()[((oi * 2 + ki) * 6 + oj * 2 + kj) * 2 + c];
                                let kv = k.data()[((ki * 3 + kj) * 2 + c) * 2 + o];
                                s += xv * kv;
                            }
                        }
                    }
                    let got = y.data()[(oi * 2 + oj) * 2 + o];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[1, 5], 3.5);
        let (y, _) = layer_norm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_normalized_row_unchanged() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let (y, _) =
            layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax_rows(&Tensor::full(&[1, 4], 2.0)).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let y = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-300 || y.data()[1] == 0.0);
    }

    #[test]
    fn cosine_cases() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Tensor::vector(vec![1.0, 0.0]);
        let e2 = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let z = Tensor::zeros(&[2]);
        assert!(matches!(
            cosine_similarity(&e1, &z),
            Err(KernelError::Degenerate(_))
        ));
    }

    #[test]
    fn cosine_scale_invariant() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[9]);
            let b = rand_tensor(&mut rng, &[9]);
            let s = cosine_similarity(&a, &b).unwrap();
            let s2 = cosine_similarity(&a.scale(3.7).unwrap(), &b.scale(0.01).unwrap()).unwrap();
            assert!((s - s2).abs() < 1e-12);
        }
    }
}
