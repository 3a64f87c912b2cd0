//! Forward and backward kernels shared by the tape and the tape-free
//! inference path, so both produce identical bits.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math;

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let r = match (ar, br) {
        _ if ar == br => ar,
        (1, n) | (n, 1) => n,
        _ => {
            return Err(Error::Shape {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })
        }
    };
    let c = match (ac, bc) {
        _ if ac == bc => ac,
        (1, n) | (n, 1) => n,
        _ => {
            return Err(Error::Shape {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })
        }
    };
    Ok((r, c))
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let (r, c) = broadcast_dims(op, a, b)?;
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let x = ad[ia * ac + if ac == 1 { 0 } else { j }];
            let y = bd[ib * bc + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::matrix(r, c, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

/// `(n, k) x (k, m) -> (n, m)`, accumulated in a fixed i-k-j order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims();
    let (k2, m) = b.dims();
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let arow = &ad[i * k..(i + 1) * k];
        // Four rows of `b` per pass; each output still accumulates in p order.
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &bd[p * m..(p + 1) * m];
            let b1 = &bd[(p + 1) * m..(p + 2) * m];
            let b2 = &bd[(p + 2) * m..(p + 3) * m];
            let b3 = &bd[(p + 3) * m..(p + 4) * m];
            for j in 0..m {
                let mut v = row[j];
                v += a0 * b0[j];
                v += a1 * b1[j];
                v += a2 * b2[j];
                v += a3 * b3[j];
                row[j] = v;
            }
            p += 4;
        }
        for (q, &aip) in arow.iter().enumerate().skip(p) {
            let brow = &bd[q * m..(q + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a * bᵀ` for `a: (n, m)`, `b: (k, m)`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    matmul(a, &transpose(b)).expect("dims")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = a.dims();
    let d = a.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| d[i * c + j]));
    }
    Tensor::matrix(c, r, out).expect("dims")
}

/// `aᵀ * b` for `a: (n, k)`, `b: (n, m)`, accumulated over `n` in order.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims();
    let (_, m) = b.dims();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * m];
    let mut i = 0;
    while i + 4 <= n {
        let b0 = &bd[i * m..(i + 1) * m];
        let b1 = &bd[(i + 1) * m..(i + 2) * m];
        let b2 = &bd[(i + 2) * m..(i + 3) * m];
        let b3 = &bd[(i + 3) * m..(i + 4) * m];
        for p in 0..k {
            let (a0, a1, a2, a3) = (ad[i * k + p], ad[(i + 1) * k + p], ad[(i + 2) * k + p], ad[(i + 3) * k + p]);
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                let mut v = orow[j];
                v += a0 * b0[j];
                v += a1 * b1[j];
                v += a2 * b2[j];
                v += a3 * b3[j];
                orow[j] = v;
            }
        }
        i += 4;
    }
    for i in i..n {
        let brow = &bd[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(k, m, out).expect("dims")
}

/// Sums `g` down to the shape of `target` (the inverse of broadcasting).
pub fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        return g.clone();
    }
    let (gr, gc) = g.dims();
    let (tr, tc) = target.dims();
    let mut out = vec![0.0; tr * tc];
    for i in 0..gr {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g.data()[i * gc + j];
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("dims")
}

pub fn sum(a: &Tensor) -> f64 {
    a.data().iter().fold(0.0, |acc, &v| acc + v)
}

pub fn sq_norm(a: &Tensor) -> f64 {
    a.data().iter().fold(0.0, |acc, &v| acc + v * v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => math::exp(x),
            Unary::Log => math::ln(x),
            Unary::Tanh => math::tanh(x),
            Unary::Softplus => math::softplus(x),
            Unary::Sigmoid => math::sigmoid(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => math::sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn forward(self, a: &Tensor) -> Tensor {
        a.map(|v| self.apply(v))
    }
}
