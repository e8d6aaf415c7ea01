use std::rc::Rc;

use crate::graph::GradFn;
use crate::{Element, Tensor, Var};

/// A sparse linear map applied independently along one tensor axis.
///
/// Row `j` of the map lists `(source index, weight)` pairs; output element
/// `j` along the axis is the weighted sum of those source elements. Used
/// for separable blurs, interpolation, strided picks and channel merges.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap<T> {
    in_len: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Element> AxisMap<T> {
    pub fn new(in_len: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        for r in &rows {
            for &(i, _) in r {
                assert!(i < in_len, "axis map source {i} out of range {in_len}");
            }
        }
        AxisMap { in_len, rows }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, (0..n).map(|i| vec![(i, T::one())]).collect())
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, T)>] {
        &self.rows
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.in_len];
        for (j, r) in self.rows.iter().enumerate() {
            for &(i, w) in r {
                rows[i].push((j, w));
            }
        }
        AxisMap { in_len: self.rows.len(), rows }
    }

    /// Composition `self ∘ inner` (apply `inner` first).
    pub fn compose(&self, inner: &AxisMap<T>) -> Self {
        assert_eq!(self.in_len, inner.out_len(), "compose length mismatch");
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut acc: Vec<(usize, T)> = Vec::new();
                for &(m, w) in r {
                    for &(i, v) in &inner.rows[m] {
                        match acc.iter_mut().find(|(k, _)| *k == i) {
                            Some(e) => e.1 += w * v,
                            None => acc.push((i, w * v)),
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                acc
            })
            .collect();
        AxisMap { in_len: inner.in_len, rows }
    }

    /// Applies the map along `axis` of a raw tensor.
    pub fn apply(&self, x: &Tensor<T>, axis: usize) -> Tensor<T> {
        let shape = x.shape();
        assert_eq!(shape[axis], self.in_len, "axis map input length");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = self.rows.len();
        let src = x.data();
        let mut y = vec![T::zero(); outer * self.rows.len() * inner];
        for o in 0..outer {
            let xb = &src[o * self.in_len * inner..(o + 1) * self.in_len * inner];
            let yb = &mut y[o * self.rows.len() * inner..(o + 1) * self.rows.len() * inner];
            for (j, r) in self.rows.iter().enumerate() {
                let dst = &mut yb[j * inner..(j + 1) * inner];
                for &(i, w) in r {
                    let s = &xb[i * inner..(i + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += w * v;
                    }
                }
            }
        }
        Tensor::from_vec(&out_shape, y)
    }
}

struct ApplyAxis<T: Element> {
    x: Var<T>,
    axis: usize,
    adjoint: Rc<AxisMap<T>>,
    map: Rc<AxisMap<T>>,
}

impl<T: Element> GradFn<T> for ApplyAxis<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.x]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(apply_pair(g, self.axis, Rc::clone(&self.adjoint), Rc::clone(&self.map)))]
    }
}

fn apply_pair<T: Element>(x: &Var<T>, axis: usize, map: Rc<AxisMap<T>>, adjoint: Rc<AxisMap<T>>) -> Var<T> {
    let v = map.apply(x.value(), axis);
    Var::from_op(v, ApplyAxis { x: x.clone(), axis, adjoint, map })
}

impl<T: Element> Var<T> {
    pub fn apply_axis_map(&self, axis: usize, map: &Rc<AxisMap<T>>) -> Var<T> {
        apply_pair(self, axis, Rc::clone(map), Rc::new(map.transpose()))
    }
}
