//! Minimal reverse-mode automatic differentiation over [`Tensor`].
//!
//! Each [`Node`] owns its value, its parents, and a vector-Jacobian
//! product callback. `backward` walks the graph once in reverse
//! topological order (node ids are assigned by a monotone per-thread
//! counter, so id order is a valid topological order) and accumulates
//! gradients additively. Graph construction and backward are confined
//! to one thread; tensors themselves are plain values.
//!
//! The projection layer plugs in through [`custom_node`], which
//! registers an arbitrary backward callback.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

/// VJP callback: receives the gradient w.r.t. this node's value and
/// returns one gradient tensor per parent.
pub type VjpFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn fresh_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct NodeInner {
    id: usize,
    value: Tensor,
    parents: Vec<Node>,
    vjp: Option<VjpFn>,
    grad: RefCell<Option<Tensor>>,
}

#[derive(Clone)]
pub struct Node(Rc<NodeInner>);

impl Node {
    /// Leaf node (parameter or input). Participates in gradient
    /// accumulation but has no parents.
    pub fn leaf(value: Tensor) -> Node {
        Node(Rc::new(NodeInner {
            id: fresh_id(),
            value,
            parents: vec![],
            vjp: None,
            grad: RefCell::new(None),
        }))
    }

    /// Constant: same as a leaf, kept separate in intent only.
    pub fn constant(value: Tensor) -> Node {
        Node::leaf(value)
    }

    pub fn scalar(v: f64) -> Node {
        Node::leaf(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the value of a leaf in place is not supported; build
    /// a new leaf instead. Exposed id is for debugging/tests.
    pub fn id(&self) -> usize {
        self.0.id
    }

    fn accumulate(&self, g: &Tensor) {
        debug_assert!(
            g.same_shape(&self.0.value) || (g.is_scalar() && self.0.value.is_scalar()),
            "grad shape {:?} vs value shape {:?}",
            g.shape(),
            self.0.value.shape()
        );
        let mut slot = self.0.grad.borrow_mut();
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(g).expect("grad shape drift"),
            None => g.clone(),
        });
    }
}

pub fn custom_node(value: Tensor, parents: Vec<Node>, vjp: VjpFn) -> Node {
    Node(Rc::new(NodeInner {
        id: fresh_id(),
        value,
        parents,
        vjp: Some(vjp),
    grad: RefCell::new(None),
    }))
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate: call
/// `zero_grad` on parameters between independent backward passes.
pub fn backward(loss: &Node) -> Result<()> {
    if !loss.value().is_scalar() {
        return Err(CoreError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.value().shape()
        )));
    }
    // Collect the reachable subgraph once; each node visited exactly once.
    let mut order: Vec<Node> = Vec::new();
    let mut seen: HashMap<usize, ()> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(n) = stack.pop() {
        if seen.insert(n.id(), ()).is_some() {
            continue;
        }
        for p in &n.0.parents {
            stack.push(p.clone());
        }
        order.push(n);
    }
    // Ids are monotone in construction order, so descending id order is
    // reverse topological.
    order.sort_by(|a, b| b.id().cmp(&a.id()));

    // Local seed map so repeat backward calls accumulate into node
    // grads rather than double-reading them.
    let mut seed: HashMap<usize, Tensor> = HashMap::new();
    seed.insert(loss.id(), Tensor::scalar(1.0));

    for node in &order {
        let g = match seed.remove(&node.id()) {
            Some(g) => g,
            None => continue, // not on a differentiable path
        };
        node.accumulate(&g);
        if let Some(vjp) = &node.0.vjp {
            let parent_grads = vjp(&g);
            if parent_grads.len() != node.0.parents.len() {
                return Err(CoreError::Contract(format!(
                    "backward_fn returned {} gradients for {} parents",
                    parent_grads.len(),
                    node.0.parents.len()
                )));
            }
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                seed.entry(p.id())
                    .and_modify(|acc| *acc = acc.add(&pg).expect("grad shape drift"))
                    .or_insert(pg);
            }
        }
    }
    Ok(())
}

fn unary(input: &Node, value: Tensor, vjp: impl Fn(&Tensor) -> Tensor + 'static) -> Node {
    custom_node(value, vec![input.clone()], Box::new(move |g| vec![vjp(g)]))
}

pub fn add(a: &Node, b: &Node) -> Result<Node> {
    let value = a.value().add(b.value())?;
    let (sa, sb) = (a.value().shape().to_vec(), b.value().shape().to_vec());
    Ok(custom_node(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = reduce_to_shape(g, &sa);
            let gb = reduce_to_shape(g, &sb);
            vec![ga, gb]
        }),
    ))
}

pub fn sub(a: &Node, b: &Node) -> Result<Node> {
    let value = a.value().sub(b.value())?;
    let (sa, sb) = (a.value().shape().to_vec(), b.value().shape().to_vec());
    Ok(custom_node(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = reduce_to_shape(g, &sa);
            let gb = reduce_to_shape(&g.scale(-1.0), &sb);
            vec![ga, gb]
        }),
    ))
}

/// Sum a gradient down to a scalar when the forward op broadcast a
/// scalar against a tensor; otherwise pass through.
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if shape.is_empty() || shape.iter().product::<usize>() == 1 {
        if g.len() > 1 {
            return Tensor::scalar(g.sum());
        }
        if g.shape() != shape {
            return Tensor::new(shape.to_vec(), g.to_vec()).expect("scalar reshape");
        }
    }
    g.clone()
}

pub fn mul(a: &Node, b: &Node) -> Result<Node> {
    let value = a.value().mul(b.value())?;
    let (av, bv) = (a.value().clone(), b.value().clone());
    Ok(custom_node(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = reduce_to_shape(&g.mul(&bv).expect("mul vjp"), av.shape());
            let gb = reduce_to_shape(&g.mul(&av).expect("mul vjp"), bv.shape());
            vec![ga, gb]
        }),
    ))
}

pub fn scale(a: &Node, s: f64) -> Node {
    let value = a.value().scale(s);
    unary(a, value, move |g| g.scale(s))
}

pub fn matmul(a: &Node, b: &Node) -> Result<Node> {
    let value = a.value().matmul(b.value())?;
    let (av, bv) = (a.value().clone(), b.value().clone());
    Ok(custom_node(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            // dA = g @ B^T, dB = A^T @ g (with rank-1 rhs treated as a column)
            let g2 = as_matrix(g);
            let b2 = as_matrix(&bv);
            let ga_full = g2.matmul(&b2.transpose()).expect("matmul vjp A");
            let ga = Tensor::new(av.shape().to_vec(), ga_full.to_vec()).expect("vjp A shape");
            let a2 = as_matrix(&av);
            let gb_full = a2.transpose().matmul(&g2).expect("matmul vjp B");
            let gb = Tensor::new(bv.shape().to_vec(), gb_full.to_vec()).expect("vjp B shape");
            vec![ga, gb]
        }),
    ))
}

fn as_matrix(t: &Tensor) -> Tensor {
    match t.shape().len() {
        2 => t.clone(),
        1 => Tensor::new(vec![t.len(), 1], t.to_vec()).unwrap(),
        _ => Tensor::new(vec![1, 1], t.to_vec()).unwrap(),
    }
}

/// ReLU with the subgradient at 0 fixed to 0.
pub fn relu(a: &Node) -> Node {
    let value = a.value().map(|v| v.max(0.0));
    let av = a.value().clone();
    unary(a, value, move |g| {
        g.zip(&av, "relu vjp", |gi, vi| if vi > 0.0 { gi } else { 0.0 })
            .expect("relu vjp")
    })
}

pub fn tanh(a: &Node) -> Node {
    let value = a.value().map(f64::tanh);
    let out = value.clone();
    unary(a, value, move |g| {
        g.zip(&out, "tanh vjp", |gi, yi| gi * (1.0 - yi * yi))
            .expect("tanh vjp")
    })
}

pub fn sigmoid(a: &Node) -> Node {
    let value = a.value().map(|v| 1.0 / (1.0 + (-v).exp()));
    let out = value.clone();
    unary(a, value, move |g| {
        g.zip(&out, "sigmoid vjp", |gi, yi| gi * yi * (1.0 - yi))
            .expect("sigmoid vjp")
    })
}

pub fn exp(a: &Node) -> Node {
    let value = a.value().map(f64::exp);
    let out = value.clone();
    unary(a, value, move |g| {
        g.zip(&out, "exp vjp", |gi, yi| gi * yi).expect("exp vjp")
    })
}

pub fn log(a: &Node) -> Node {
    let value = a.value().map(f64::ln);
    let av = a.value().clone();
    unary(a, value, move |g| {
        g.zip(&av, "log vjp", |gi, vi| gi / vi).expect("log vjp")
    })
}

pub fn square(a: &Node) -> Node {
    let value = a.value().map(|v| v * v);
    let av = a.value().clone();
    unary(a, value, move |g| {
        g.zip(&av, "square vjp", |gi, vi| 2.0 * gi * vi)
            .expect("square vjp")
    })
}

/// Clamp with zero subgradient outside [lo, hi].
pub fn clip(a: &Node, lo: f64, hi: f64) -> Node {
    let value = a.value().map(|v| v.clamp(lo, hi));
    let av = a.value().clone();
    unary(a, value, move |g| {
        g.zip(&av, "clip vjp", |gi, vi| {
            if vi >= lo && vi <= hi {
                gi
            } else {
                0.0
            }
        })
        .expect("clip vjp")
    })
}

pub fn sum(a: &Node) -> Node {
    let value = Tensor::scalar(a.value().sum());
    let shape = a.value().shape().to_vec();
    unary(a, value, move |g| Tensor::full(&shape, g.item()))
}

pub fn mean(a: &Node) -> Node {
    let n = a.value().len() as f64;
    let value = Tensor::scalar(a.value().sum() / n);
    let shape = a.value().shape().to_vec();
    unary(a, value, move |g| Tensor::full(&shape, g.item() / n))
}

pub fn concat(parts: &[Node]) -> Result<Node> {
    let values: Vec<&Tensor> = parts.iter().map(|n| n.value()).collect();
    let value = Tensor::concat(&values)?;
    let lens: Vec<usize> = parts.iter().map(|n| n.value().len()).collect();
    Ok(custom_node(
        value,
        parts.to_vec(),
        Box::new(move |g| {
            let mut out = Vec::with_capacity(lens.len());
            let mut off = 0;
            for &l in &lens {
                out.push(g.slice(off, off + l).expect("concat vjp"));
                off += l;
            }
            out
        }),
    ))
}

pub fn slice(a: &Node, start: usize, end: usize) -> Result<Node> {
    let value = a.value().slice(start, end)?;
    let n = a.value().len();
    Ok(unary(a, value, move |g| {
        let mut data = vec![0.0; n];
        data[start..end].copy_from_slice(g.data());
        Tensor::vector(data)
    }))
}

/// Sum of squared entries as a scalar node.
pub fn sum_squares(a: &Node) -> Node {
    sum(&square(a))
}
