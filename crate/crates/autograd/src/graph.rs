use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::{Element, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule of a recorded op.
pub(crate) trait GradFn<T: Element> {
    fn inputs(&self) -> Vec<&Var<T>>;
    /// Returns one gradient per input; entries whose `needs` flag is false
    /// may be `None`.
    fn backward(&self, out: &Var<T>, grad: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>>;
}

struct Inner<T: Element> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<Box<dyn GradFn<T>>>,
}

/// A tensor-valued node of the computation graph.
pub struct Var<T: Element>(Rc<Inner<T>>);

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Var<T> {
    /// A constant: never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Inner { id: next_id(), value, requires_grad: false, grad_fn: None }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Inner { id: next_id(), value, requires_grad: true, grad_fn: None }))
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub(crate) fn from_op(value: Tensor<T>, grad_fn: impl GradFn<T> + 'static) -> Self {
        let record = is_grad_enabled() && grad_fn.inputs().iter().any(|v| v.requires_grad());
        if record {
            Var(Rc::new(Inner {
                id: next_id(),
                value,
                requires_grad: true,
                grad_fn: Some(Box::new(grad_fn)),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }
}

fn topo_order<T: Element>(roots: &[Var<T>]) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // iterative post-order DFS
    let mut stack: Vec<(Var<T>, bool)> = roots.iter().map(|r| (r.clone(), false)).collect();
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(f) = &v.0.grad_fn {
            for p in f.inputs() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of `sum(outputs[i] * seeds[i])` with respect to `inputs`.
///
/// A `None` seed means ones. With `create_graph`, the returned gradients
/// are recorded and can be differentiated again. Inputs that the outputs
/// do not depend on get a zero gradient.
pub fn grad<T: Element>(
    outputs: &[Var<T>],
    seeds: &[Option<Tensor<T>>],
    inputs: &[Var<T>],
    create_graph: bool,
) -> Vec<Var<T>> {
    assert_eq!(outputs.len(), seeds.len(), "one seed per output");
    let order = topo_order(outputs);

    // nodes that lie on a path to a requested input
    let wanted: std::collections::HashSet<usize> = inputs.iter().map(|v| v.id()).collect();
    let mut leads: HashMap<usize, bool> = HashMap::new();
    for v in &order {
        let mut l = wanted.contains(&v.id());
        if let Some(f) = &v.0.grad_fn {
            for p in f.inputs() {
                if leads.get(&p.id()).copied().unwrap_or(false) {
                    l = true;
                }
            }
        }
        leads.insert(v.id(), l);
    }

    with_grad_mode(create_graph, || {
        let mut grads: HashMap<usize, Var<T>> = HashMap::new();
        for (o, s) in outputs.iter().zip(seeds) {
            if !o.requires_grad() {
                continue;
            }
            let seed = match s {
                Some(t) => {
                    assert_eq!(t.shape(), o.shape(), "seed shape");
                    t.clone()
                }
                None => Tensor::ones(o.shape()),
            };
            accumulate(&mut grads, o.id(), Var::constant(seed));
        }
        for v in order.iter().rev() {
            if !leads[&v.id()] {
                continue;
            }
            let Some(f) = &v.0.grad_fn else { continue };
            let Some(g) = grads.get(&v.id()).cloned() else { continue };
            let ins = f.inputs();
            let needs: Vec<bool> = ins
                .iter()
                .map(|p| p.requires_grad() && leads.get(&p.id()).copied().unwrap_or(false))
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let contributions = f.backward(v, &g, &needs);
            for ((p, c), need) in ins.iter().zip(contributions).zip(&needs) {
                if let (Some(c), true) = (c, *need) {
                    debug_assert_eq!(c.shape(), p.shape(), "gradient shape for input");
                    accumulate(&mut grads, p.id(), c);
                }
            }
            if !wanted.contains(&v.id()) {
                grads.remove(&v.id());
            }
        }
        inputs
            .iter()
            .map(|i| grads.get(&i.id()).cloned().unwrap_or_else(|| Var::constant(Tensor::zeros(i.shape()))))
            .collect()
    })
}

fn accumulate<T: Element>(grads: &mut HashMap<usize, Var<T>>, id: usize, g: Var<T>) {
    match grads.remove(&id) {
        Some(prev) => {
            grads.insert(id, prev.add(&g));
        }
        None => {
            grads.insert(id, g);
        }
    }
}
