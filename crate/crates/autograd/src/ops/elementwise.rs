use std::rc::Rc;

use crate::graph::GradFn;
use crate::{Element, Tensor, Var};

struct Add<T: Element>(Var<T>, Var<T>);
impl<T: Element> GradFn<T> for Add<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct Sub<T: Element>(Var<T>, Var<T>);
impl<T: Element> GradFn<T> for Sub<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), needs[1].then(|| g.scale(-T::one()))]
    }
}

struct Mul<T: Element>(Var<T>, Var<T>);
impl<T: Element> GradFn<T> for Mul<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0, &self.1]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![needs[0].then(|| g.mul(&self.1)), needs[1].then(|| g.mul(&self.0))]
    }
}

struct Scale<T: Element>(Var<T>, T);
impl<T: Element> GradFn<T> for Scale<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.scale(self.1))]
    }
}

struct Shift<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for Shift<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone())]
    }
}

/// Multiplication by a fixed tensor (masks, relu slopes).
struct MulConst<T: Element>(Var<T>, Rc<Tensor<T>>);
impl<T: Element> GradFn<T> for MulConst<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, _: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul_const(Rc::clone(&self.1)))]
    }
}

struct Exp<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for Exp<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, out: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(out))]
    }
}

struct Recip<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for Recip<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, out: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(&out.mul(out)).scale(-T::one()))]
    }
}

struct Sqrt<T: Element>(Var<T>);
impl<T: Element> GradFn<T> for Sqrt<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.0]
    }
    fn backward(&self, out: &Var<T>, g: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(&out.recip()).scale(T::lit(0.5)))]
    }
}

impl<T: Element> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(v, Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(v, Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(v, Mul(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|a| a * c), Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|a| a + c), Shift(self.clone()))
    }

    pub fn mul_const(&self, c: Rc<Tensor<T>>) -> Var<T> {
        let v = self.value().zip_map(&c, |a, b| a * b);
        Var::from_op(v, MulConst(self.clone(), c))
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self)
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().map(|a| a.exp()), Exp(self.clone()))
    }

    pub fn recip(&self) -> Var<T> {
        Var::from_op(self.value().map(|a| a.recip()), Recip(self.clone()))
    }

    pub fn sqrt(&self) -> Var<T> {
        Var::from_op(self.value().map(|a| a.sqrt()), Sqrt(self.clone()))
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        self.mul(&other.recip())
    }

    /// Leaky rectifier; `slope = 0` gives the plain ReLU.
    ///
    /// The derivative mask is frozen at the forward input, so second
    /// derivatives are exact almost everywhere.
    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let mask = Rc::new(self.value().map(|a| if a > T::zero() { T::one() } else { slope }));
        self.mul_const(mask)
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }
}
