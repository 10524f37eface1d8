use super::ops::Op;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_id(id: usize) -> Self {
        Var(id)
    }
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, and the
/// backward pass walks them strictly in reverse.
#[derive(Clone, Debug)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    params: Vec<Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// A tape with every parameter bound as a differentiable leaf.
    pub fn with_params(params: &ParamSet<F>) -> Self {
        let mut tape = Self::new();
        tape.params = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        tape
    }

    /// A tape with the parameters bound as constants, for inference.
    pub fn frozen(params: &ParamSet<F>) -> Self {
        let mut tape = Self::new();
        tape.params = params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(None, Vec::new(), value, true)
    }

    /// A detached input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(None, Vec::new(), value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op: Option<Op>,
        inputs: Vec<usize>,
        value: Tensor<F>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on recorded values and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            Some(op),
            inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
        ))
    }

    /// Recomputes every derived value from the leaves, in recording order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let Some(op) = self.nodes[i].op.clone() else {
                continue;
            };
            let value = {
                let values: Vec<&Tensor<F>> = self.nodes[i]
                    .inputs
                    .iter()
                    .map(|&j| &self.nodes[j].value)
                    .collect();
                op.forward(&values)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let values: Vec<&Tensor<F>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = op.backward(&values, &node.value, &g, &needs);
            for ((&j, gj), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(gj) = gj else { continue };
                if !need {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gj.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gj),
                }
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Op::Linear, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Neg, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Square, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanAll, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, xs)
    }

    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Stack { axis }, xs)
    }

    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        self.apply(Op::Select { axis, index }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather { indices }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[x])
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSumExp, &[x])
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::L2Norm, &[x])
    }

    pub fn grl(&mut self, x: Var, beta: f64) -> Result<Var> {
        self.apply(Op::Grl { beta }, &[x])
    }

    pub fn gaussian_log_density(&mut self, z: Var, mean: Var, logvar: Var) -> Result<Var> {
        self.apply(Op::GaussianLogDensity, &[z, mean, logvar])
    }
}

/// Result of [`Tape::backward`]. Detached nodes have no entry.
#[derive(Clone, Debug)]
pub struct Gradients<F = f32> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<Var>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.get(self.params[id.0])
    }

    /// One gradient per parameter, zero-filled where the root did not depend
    /// on the parameter.
    pub fn param_grads(&self, params: &ParamSet<F>) -> Vec<Tensor<F>> {
        params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.param(ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}
