use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded node.
///
/// Called with the upstream gradient, the parent values, the node's own
/// forward value and a mask of which parents need a gradient. Returns one
/// entry per parent; `None` means "no contribution".
pub type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Append-only record of a single forward pass.
///
/// A tape is confined to one thread. Build one per forward pass, call
/// [`Tape::backward`] once, then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, false)
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let needs = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].needs_grad)
        };
        let backward = needs.then_some(backward);
        self.insert(Rc::new(value), ids, backward, needs)
    }

    fn insert(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Records a node whose forward value is given and whose backward rule is
    /// `backward_map`, applied verbatim to the upstream gradient.
    ///
    /// The map must return one gradient per parent, each shaped like that
    /// parent; a mismatch surfaces as an error from [`Tape::backward`].
    pub fn custom_grad<'a, F>(&'a self, parents: &[Var<'a>], value: Tensor, backward_map: F) -> Var<'a>
    where
        F: Fn(&Tensor) -> Result<Vec<Tensor>> + 'static,
    {
        let n_parents = parents.len();
        self.push(
            value,
            parents,
            Box::new(move |g, pv, _, _| {
                let grads = backward_map(g)?;
                if grads.len() != n_parents {
                    return Err(Error::Shape(format!(
                        "custom backward returned {} gradients for {} parents",
                        grads.len(),
                        n_parents
                    )));
                }
                for (i, (gr, p)) in grads.iter().zip(pv).enumerate() {
                    if gr.shape() != p.shape() {
                        return Err(Error::Shape(format!(
                            "custom backward gradient {} has shape {:?}, parent is {:?}",
                            i,
                            gr.shape(),
                            p.shape()
                        )));
                    }
                }
                Ok(grads.into_iter().map(Some).collect())
            }),
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let value = output.value();
        if value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar output of shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(output, Tensor::full(value.shape(), 1.0))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[output.id].value.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} differs from output shape {:?}",
                seed.shape(),
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let contributions = backward(&g, &parent_vals, &node.value, &needs)?;
            for ((&p, contrib), &need) in node.parents.iter().zip(contributions).zip(&needs) {
                let Some(c) = contrib else { continue };
                if !need {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&c),
                    None => grads[p] = Some(c),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a reverse sweep: gradient of the seeded output w.r.t. every
/// recorded node that lies on a path to it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `var`, zero-filled when no path reaches it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}
