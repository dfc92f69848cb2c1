//! Elementwise ops, reductions and layout ops on the tape.

use std::sync::Arc;

use super::tape::{NodeId, Tape};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Result of a min/max reduction: scalar tensors plus the flat indices that
/// received the subgradient (lowest index on ties).
pub struct MinMax<T: Elem> {
    pub min: Tensor<T>,
    pub max: Tensor<T>,
    pub argmin: usize,
    pub argmax: usize,
}

impl<T: Elem> Tape<T> {
    fn unary(
        &mut self,
        x: &Tensor<T>,
        mut fw: impl FnMut(T) -> T,
        dfdx: impl Fn(T, T) -> T + Send + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = x.data().iter().map(|&v| fw(v)).collect();
        let nodes = self.input_nodes(&[x]).expect("unary inputs validated");
        let xs = x.data_arc();
        let ys = Arc::new(out);
        let ys_node = Arc::clone(&ys);
        let node = self.record(
            nodes,
            ys.len(),
            Box::new(move |gout| {
                let g = gout
                    .iter()
                    .zip(xs.iter().zip(ys_node.iter()))
                    .map(|(&g, (&x, &y))| g * dfdx(x, y))
                    .collect();
                vec![g]
            }),
        );
        let data = Arc::try_unwrap(ys).unwrap_or_else(|a| (*a).clone());
        Tensor::from_parts(x.shape().to_vec(), data, node)
    }

    fn binary(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        fw: impl Fn(T, T) -> T,
        bw: impl Fn(&[T], &[T], &[T]) -> (Vec<T>, Vec<T>) + Send + 'static,
        name: &str,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| fw(x, y)).collect();
        let nodes = self.input_nodes(&[a, b])?;
        let (need_a, need_b) = (nodes[0].is_some(), nodes[1].is_some());
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let node = self.record(
            nodes,
            out.len(),
            Box::new(move |gout| {
                let (ga, gb) = bw(gout, &ad, &bd);
                vec![if need_a { ga } else { Vec::new() }, if need_b { gb } else { Vec::new() }]
            }),
        );
        Ok(Tensor::from_parts(a.shape().to_vec(), out, node))
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            a,
            b,
            |x, y| x + y,
            |g, _, _| (g.to_vec(), g.to_vec()),
            "add",
        )
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            a,
            b,
            |x, y| x - y,
            |g, _, _| (g.to_vec(), g.iter().map(|&v| -v).collect()),
            "sub",
        )
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            a,
            b,
            |x, y| x * y,
            |g, ad, bd| {
                let ga = g.iter().zip(bd).map(|(&v, &y)| v * y).collect();
                let gb = g.iter().zip(ad).map(|(&v, &x)| v * x).collect();
                (ga, gb)
            },
            "mul",
        )
    }

    /// `scale * x + shift`, elementwise with scalar constants.
    pub fn affine(&mut self, x: &Tensor<T>, scale: f64, shift: f64) -> Tensor<T> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        self.unary(x, |v| s * v + c, move |_, _| s)
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some(v) = x.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(x, |v| v.ln(), |x, _| T::one() / x))
    }

    /// `x^k` for a constant exponent.
    pub fn pow_const(&mut self, x: &Tensor<T>, k: f64) -> Tensor<T> {
        let ke = T::from_f64(k);
        self.unary(
            x,
            |v| v.powf(ke),
            move |x, _| ke * x.powf(ke - T::one()),
        )
    }

    pub fn abs(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(x, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Clamp to `[lo, hi]`; zero gradient outside the bounds.
    pub fn clamp(&mut self, x: &Tensor<T>, lo: f64, hi: f64) -> Tensor<T> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            x,
            |v| {
                if v < l {
                    l
                } else if v > h {
                    h
                } else {
                    v
                }
            },
            move |x, _| if x < l || x > h { T::zero() } else { T::one() },
        )
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sqrt(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let two = T::from_f64(2.0);
        self.unary(x, |v| v.sqrt(), move |_, y| T::one() / (two * y))
    }

    /// Full sum to a scalar, accumulated in ascending index order.
    pub fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        let nodes = self.input_nodes(&[x]).expect("sum input validated");
        let n = x.len();
        let node = self.record(
            nodes,
            1,
            Box::new(move |gout| vec![vec![gout[0]; n]]),
        );
        Tensor::from_parts(vec![1], vec![acc], node)
    }

    /// Min and max over all elements with one-hot subgradients routed to the
    /// lowest flat index on ties.
    pub fn reduce_min_max(&mut self, x: &Tensor<T>) -> Result<MinMax<T>> {
        if x.is_empty() {
            return Err(Error::Argument("reduce_min_max of empty tensor".into()));
        }
        let data = x.data();
        let (mut argmin, mut argmax) = (0usize, 0usize);
        for (i, &v) in data.iter().enumerate() {
            if v < data[argmin] {
                argmin = i;
            }
            if v > data[argmax] {
                argmax = i;
            }
        }
        let n = x.len();
        let min = {
            let nodes = self.input_nodes(&[x])?;
            let node = self.record(
                nodes,
                1,
                Box::new(move |gout| {
                    let mut g = vec![T::zero(); n];
                    g[argmin] = gout[0];
                    vec![g]
                }),
            );
            Tensor::from_parts(vec![1], vec![data[argmin]], node)
        };
        let max = {
            let nodes = self.input_nodes(&[x])?;
            let node = self.record(
                nodes,
                1,
                Box::new(move |gout| {
                    let mut g = vec![T::zero(); n];
                    g[argmax] = gout[0];
                    vec![g]
                }),
            );
            Tensor::from_parts(vec![1], vec![data[argmax]], node)
        };
        Ok(MinMax { min, max, argmin, argmax })
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::Argument(format!("concat axis {axis} out of rank {rank}")));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::Dimension("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Dimension(format!(
                        "concat dim {d} mismatch: {a} vs {b}"
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }

        let nodes = self.input_nodes(parts)?;
        let need: Vec<bool> = nodes.iter().map(|n| n.is_some()).collect();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let node = self.record(
            nodes,
            numel,
            Box::new(move |gout| {
                let total: usize = blocks.iter().sum();
                let mut grads: Vec<Vec<T>> = blocks
                    .iter()
                    .zip(&need)
                    .map(|(&b, &n)| if n { Vec::with_capacity(b * outer) } else { Vec::new() })
                    .collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (i, &b) in blocks.iter().enumerate() {
                        if need[i] {
                            grads[i].extend_from_slice(&gout[off..off + b]);
                        }
                        off += b;
                    }
                }
                grads
            }),
        );
        Ok(Tensor::from_parts(out_shape, out, node))
    }

    /// Column `j` of a `[n, k]` tensor as a `[n]` tensor.
    pub fn column(&mut self, x: &Tensor<T>, j: usize) -> Result<Tensor<T>> {
        let (n, k) = matrix_dims(x, "column")?;
        if j >= k {
            return Err(Error::Argument(format!("column {j} out of {k}")));
        }
        let out: Vec<T> = (0..n).map(|i| x.data()[i * k + j]).collect();
        let nodes = self.input_nodes(&[x])?;
        let node = self.record(
            nodes,
            n,
            Box::new(move |gout| {
                let mut g = vec![T::zero(); n * k];
                for (i, &v) in gout.iter().enumerate() {
                    g[i * k + j] = v;
                }
                vec![g]
            }),
        );
        Ok(Tensor::from_parts(vec![n], out, node))
    }

    /// Rows `start..start+len` of a `[n, k]` tensor as `[len, k]`.
    pub fn rows(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (n, k) = matrix_dims(x, "rows")?;
        if start + len > n {
            return Err(Error::Argument(format!("rows {start}..{} out of {n}", start + len)));
        }
        let out = x.data()[start * k..(start + len) * k].to_vec();
        let nodes = self.input_nodes(&[x])?;
        let node = self.record(
            nodes,
            len * k,
            Box::new(move |gout| {
                let mut g = vec![T::zero(); n * k];
                g[start * k..start * k + gout.len()].copy_from_slice(gout);
                vec![g]
            }),
        );
        Ok(Tensor::from_parts(vec![len, k], out, node))
    }

    /// Interleave equal-length `[n]` columns into `[n, k]`.
    pub fn stack_columns(&mut self, cols: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let k = cols.len();
        if k == 0 {
            return Err(Error::Argument("stack_columns of zero columns".into()));
        }
        let n = cols[0].len();
        for c in cols {
            if c.shape().len() != 1 || c.len() != n {
                return Err(Error::Dimension("stack_columns expects equal-length vectors".into()));
            }
        }
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            for c in cols {
                out.push(c.data()[i]);
            }
        }
        let nodes = self.input_nodes(cols)?;
        let need: Vec<bool> = nodes.iter().map(|s| s.is_some()).collect();
        let node = self.record(
            nodes,
            n * k,
            Box::new(move |gout| {
                (0..k)
                    .map(|j| {
                        if !need[j] {
                            return Vec::new();
                        }
                        (0..n).map(|i| gout[i * k + j]).collect()
                    })
                    .collect()
            }),
        );
        Ok(Tensor::from_parts(vec![n, k], out, node))
    }

    pub(crate) fn record_checked(
        &mut self,
        nodes: Vec<Option<NodeId>>,
        out_len: usize,
        backward: super::tape::BackwardFn<T>,
    ) -> Option<super::TrackedNode> {
        self.record(nodes, out_len, backward)
    }
}

fn matrix_dims<T: Elem>(x: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [n, k] => Ok((*n, *k)),
        other => Err(Error::Dimension(format!("{op} expects a rank-2 tensor, got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let y = tape.sigmoid(&Tensor::scalar(0.0));
        assert_eq!(y.item().unwrap(), 0.5);
    }

    #[test]
    fn pow_const_value_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.pow_const(&x, 2.0);
        assert_eq!(y.item().unwrap(), 9.0);
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.log(&t(vec![1.0, 0.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn clamp_gradient_dies_outside_bounds() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![-2.0, 0.5, 3.0]));
        let y = tape.clamp(&x, 0.0, 1.0);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
        let s = tape.sum(&y);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_min_max_values_and_tie_rule() {
        let mut tape = Tape::<f64>::new();
        let mm = tape.reduce_min_max(&t(vec![3.0, 1.0, 2.0])).unwrap();
        assert_eq!((mm.min.item().unwrap(), mm.argmin), (1.0, 1));
        assert_eq!((mm.max.item().unwrap(), mm.argmax), (3.0, 0));

        let mm = tape.reduce_min_max(&t(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!((mm.argmin, mm.argmax), (0, 0));
        assert!(tape.reduce_min_max(&Tensor::from_vec(&[0], vec![]).unwrap()).is_err());
    }

    #[test]
    fn max_gradient_is_one_hot_at_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![0.3, 0.9, -0.2, 0.9]));
        let mm = tape.reduce_min_max(&x).unwrap();
        tape.backward(&mm.max).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_axis1_and_gradient_slices() {
        let mut tape = Tape::<f64>::new();
        let a0 = Tensor::from_vec(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b0 = Tensor::from_vec(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap();
        let a = tape.leaf(&a0);
        let b = tape.leaf(&b0);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let s = tape.sum(&c);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&a).unwrap().len(), 4);
        assert_eq!(tape.grad(&b).unwrap().len(), 8);
    }

    #[test]
    fn column_rows_stack_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let m = tape.leaf(&Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let c0 = tape.column(&m, 0).unwrap();
        let c1 = tape.column(&m, 1).unwrap();
        assert_eq!(c0.data(), &[1., 3., 5.]);
        let back = tape.stack_columns(&[&c0, &c1]).unwrap();
        assert_eq!(back.data(), m.data());
        let r = tape.rows(&m, 1, 2).unwrap();
        assert_eq!(r.data(), &[3., 4., 5., 6.]);
    }
}
