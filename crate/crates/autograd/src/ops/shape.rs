use crate::graph::GradFn;
use crate::tensor::strides;
use crate::{Element, Tensor, Var};

struct Reshape<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for Reshape<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.reshape(self.0.shape()))]
    }
}

struct Permute<T: Element>(Var<T>, Vec<usize>);
impl<T: Element> GradFn<T> for Permute<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        let mut inv = vec![0; self.1.len()];
        for (i, &p) in self.1.iter().enumerate() {
            inv[p] = i;
        }
        vec![Some(g.permute(&inv))]
    }
}

struct Broadcast<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for Broadcast<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.sum_to(self.0.shape()))]
    }
}

struct SumTo<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for SumTo<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.broadcast_to(self.0.shape()))]
    }
}

struct Crop<T: Element>(Var<T>, Vec<usize>);
impl<T: Element> GradFn<T> for Crop<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.pad_into(self.0.shape(), &self.1))]
    }
}

struct Pad<T: Element>(Var<T>, Vec<usize>);
impl<T: Element> GradFn<T> for Pad<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.crop(&self.1, self.0.shape()))]
    }
}

/// Calls `f(out_linear, in_linear)` for every element of a box of `extent`
/// located at `in_offset` inside a tensor with `in_shape`, enumerated in
/// row-major order of the box.
fn for_each_in_box(extent: &[usize], in_shape: &[usize], in_offset: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = extent.iter().product();
    if n == 0 {
        return;
    }
    let rank = extent.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let in_strides = strides(in_shape);
    let inner = extent[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut out = 0;
    loop {
        let mut base = in_offset[rank - 1];
        for a in 0..rank - 1 {
            base += (idx[a] + in_offset[a]) * in_strides[a];
        }
        for j in 0..inner {
            f(out + j, base + j);
        }
        out += inner;
        // odometer over the leading axes
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < extent[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

impl<T: Element> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let v = self.value().clone().reshaped(shape);
        Var::from_op(v, Reshape(self.clone()))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Var<T> {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permute rank");
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value().data();
        let mut data = Vec::with_capacity(src.len());
        let rank = perm.len();
        if src.is_empty() {
            return Var::from_op(Tensor::from_vec(&out_shape, data), Permute(self.clone(), perm.to_vec()));
        }
        let mut idx = vec![0usize; rank];
        'outer: loop {
            let off: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            let inner_stride = perm_strides[rank - 1];
            for j in 0..out_shape[rank - 1] {
                data.push(src[off + j * inner_stride]);
            }
            let mut a = rank - 1;
            loop {
                if a == 0 {
                    break 'outer;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < out_shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Var::from_op(Tensor::from_vec(&out_shape, data), Permute(self.clone(), perm.to_vec()))
    }

    /// Numpy-style broadcast of size-1 axes. Ranks must match.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        let in_shape = self.shape();
        assert_eq!(in_shape.len(), shape.len(), "broadcast rank");
        if in_shape == shape {
            return self.clone();
        }
        let st = strides(in_shape);
        let bst: Vec<usize> = in_shape
            .iter()
            .zip(shape)
            .zip(&st)
            .map(|((&i, &o), &s)| {
                assert!(i == o || i == 1, "cannot broadcast {in_shape:?} to {shape:?}");
                if i == 1 { 0 } else { s }
            })
            .collect();
        let src = self.value().data();
        let mut data = Vec::with_capacity(shape.iter().product());
        walk_offsets(shape, &bst, |off| data.push(src[off]));
        Var::from_op(Tensor::from_vec(shape, data), Broadcast(self.clone()))
    }

    /// Sums over the axes where `shape` has size 1. Adjoint of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        let in_shape = self.shape();
        assert_eq!(in_shape.len(), shape.len(), "sum_to rank");
        if in_shape == shape {
            return self.clone();
        }
        let st = strides(shape);
        let bst: Vec<usize> = shape
            .iter()
            .zip(in_shape)
            .zip(&st)
            .map(|((&o, &i), &s)| {
                assert!(i == o || o == 1, "cannot sum {in_shape:?} to {shape:?}");
                if o == 1 { 0 } else { s }
            })
            .collect();
        let mut data = vec![T::zero(); shape.iter().product()];
        let mut src = self.value().data().iter();
        walk_offsets(in_shape, &bst, |off| data[off] += *src.next().unwrap());
        Var::from_op(Tensor::from_vec(shape, data), SumTo(self.clone()))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Var<T> {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().len();
        self.sum_all().scale(T::one() / T::lit(n as f64))
    }

    /// Sub-box starting at `offset` with extent `size`.
    pub fn crop(&self, offset: &[usize], size: &[usize]) -> Var<T> {
        let shape = self.shape();
        assert_eq!(offset.len(), shape.len(), "crop rank");
        for a in 0..shape.len() {
            assert!(offset[a] + size[a] <= shape[a], "crop {offset:?}+{size:?} exceeds {shape:?}");
        }
        let src = self.value().data();
        let mut data = Vec::with_capacity(size.iter().product());
        for_each_in_box(size, shape, offset, |_, i| data.push(src[i]));
        Var::from_op(Tensor::from_vec(size, data), Crop(self.clone(), offset.to_vec()))
    }

    /// Embeds this tensor at `offset` inside zeros of `shape`. Adjoint of `crop`.
    pub fn pad_into(&self, shape: &[usize], offset: &[usize]) -> Var<T> {
        let size = self.shape().to_vec();
        let mut data = vec![T::zero(); shape.iter().product()];
        let src = self.value().data();
        for_each_in_box(&size, shape, offset, |o, i| data[i] = src[o]);
        Var::from_op(Tensor::from_vec(shape, data), Pad(self.clone(), offset.to_vec()))
    }

    /// Channel-axis (axis 1) softmax of `self / temperature`.
    pub fn softmax_channels(&self, temperature: T) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2, "softmax needs a channel axis");
        let (n, c) = (shape[0], shape[1]);
        let sites: usize = shape[2..].iter().product();
        // per-site max over channels, held constant for stability
        let x = self.value().data();
        let mut shift = vec![T::zero(); x.len()];
        for b in 0..n {
            for s in 0..sites {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(x[(b * c + ch) * sites + s]);
                }
                for ch in 0..c {
                    shift[(b * c + ch) * sites + s] = -m / temperature;
                }
            }
        }
        let logits = self.scale(T::one() / temperature).add(&Var::constant(Tensor::from_vec(&shape, shift)));
        let e = logits.exp();
        let mut red = shape.clone();
        red[1] = 1;
        let denom = e.sum_to(&red).broadcast_to(&shape);
        e.div(&denom)
    }
}

/// Visits every index of `shape` in row-major order, passing the offset
/// `Σ i[a] · st[a]`.
fn walk_offsets(shape: &[usize], st: &[usize], mut f: impl FnMut(usize)) {
    if shape.contains(&0) {
        return;
    }
    let r = shape.len();
    if r == 0 {
        f(0);
        return;
    }
    let (inner, ist) = (shape[r - 1], st[r - 1]);
    let mut idx = vec![0usize; r];
    let mut base = 0;
    loop {
        for j in 0..inner {
            f(base + j * ist);
        }
        let mut a = r - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            base += st[a];
            if idx[a] < shape[a] {
                break;
            }
            base -= st[a] * shape[a];
            idx[a] = 0;
        }
    }
}
