//! Reverse-mode automatic differentiation over an index-addressed node arena.
//!
//! A [`Tape`] records each op's inputs, output value, and the saved state its
//! backward rule needs. [`Var`] is a copyable handle into the arena. Calling
//! [`Tape::backward`] walks the nodes in reverse creation order and returns a
//! fresh [`Gradients`] table, so repeated backward calls over the same graph
//! are replay-identical.

use super::conv::{self, ConvDims, Exec};
use super::ops::{self, RunningStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: ConvDims,
    },
    Relu {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        training: bool,
    },
    Gap {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
}

/// Gradient buffers produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Tape {
        Tape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a graph input, copying its value.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let dims = ConvDims::resolve(
            self.shape(x),
            self.shape(w),
            b.map(|b| self.value(b).len()),
            stride,
            padding,
        )?;
        let out = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &dims,
            self.exec,
        );
        let requires = self.nodes[x.0].requires
            || self.nodes[w.0].requires
            || b.is_some_and(|b| self.nodes[b.0].requires);
        Ok(self.push(
            dims.out_shape(),
            out,
            requires,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                dims,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu_forward(self.value(x));
        let requires = self.nodes[x.0].requires;
        self.push(self.shape(x).to_vec(), out, requires, Op::Relu { x: x.0 })
    }

    /// As [`Tape::relu`], but moves `x`'s buffer into the new node instead of
    /// copying it. `x` must have no other consumers: its recorded value
    /// becomes empty and any later op reading it panics. This keeps large
    /// activation chains at one buffer per layer.
    pub fn relu_consuming(&mut self, x: Var) -> Var {
        let mut data = std::mem::take(&mut self.nodes[x.0].data);
        assert!(
            data.len() == self.nodes[x.0].shape.iter().product::<usize>(),
            "relu_consuming input was already consumed"
        );
        for v in &mut data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let requires = self.nodes[x.0].requires;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, requires, Op::Relu { x: x.0 })
    }

    /// Channel dimension is axis 1; all remaining axes are reduced over.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        training: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::config(format!(
                "batch norm input must have a channel axis, got shape {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::config(format!(
                    "batch norm {name} length {} does not match {c} channels",
                    self.value(v).len()
                )));
            }
        }
        if running.mean.len() != c {
            return Err(Error::config(format!(
                "batch norm running statistics cover {} channels, input has {c}",
                running.mean.len()
            )));
        }
        let (y, mean, invstd) = if training {
            ops::bn_forward_train(
                self.value(x),
                n,
                c,
                s,
                self.value(gamma),
                self.value(beta),
                eps,
                momentum,
                running,
            )?
        } else {
            ops::bn_forward_eval(
                self.value(x),
                n,
                c,
                s,
                self.value(gamma),
                self.value(beta),
                eps,
                running,
            )?
        };
        let requires =
            self.nodes[x.0].requires || self.nodes[gamma.0].requires || self.nodes[beta.0].requires;
        Ok(self.push(
            shape,
            y,
            requires,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                invstd,
                training,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(Error::config(format!(
                "global average pool expects [N,C,D,H,W], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let s = shape[2] * shape[3] * shape[4];
        let out = ops::gap_forward(self.value(x), n, c, s);
        let requires = self.nodes[x.0].requires;
        Ok(self.push(vec![n, c], out, requires, Op::Gap { x: x.0 }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::config(format!(
                "linear expects x [N,F] and w [O,F], got {xs:?} and {ws:?}"
            )));
        }
        let (n, f) = (xs[0], xs[1]);
        let (o, wf) = (ws[0], ws[1]);
        if wf != f {
            return Err(Error::config(format!(
                "linear feature mismatch: x has F={f}, w has F={wf}"
            )));
        }
        if self.value(b).len() != o {
            return Err(Error::config(format!(
                "linear bias length {} does not match O={o}",
                self.value(b).len()
            )));
        }
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b), n, f, o);
        let requires =
            self.nodes[x.0].requires || self.nodes[w.0].requires || self.nodes[b.0].requires;
        Ok(self.push(
            vec![n, o],
            out,
            requires,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::config(format!(
                "mse shapes differ: pred {:?}, target {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let loss = ops::mse_forward(self.value(pred), self.value(target));
        let requires = self.nodes[pred.0].requires || self.nodes[target.0].requires;
        Ok(self.push(
            vec![1],
            vec![loss],
            requires,
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            requires,
            Op::Add { a: a.0, b: b.0 },
        ))
    }

    /// Accumulates gradients of `loss` w.r.t. the leaves, then clears the
    /// tape. Activation and intermediate-gradient buffers are released as the
    /// reverse sweep passes them, so peak memory stays near the forward
    /// graph's footprint. Use [`Tape::backward_retained`] to keep the graph
    /// (and all intermediate gradients) for further passes.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].requires {
                if let Some(g) = grads[i].take() {
                    self.accumulate_into_parents(i, &g, &mut grads);
                    if matches!(self.nodes[i].op, Op::Leaf) {
                        grads[i] = Some(g);
                    }
                }
            } else {
                grads[i] = None;
            }
            // Reverse order means every consumer of this value is done.
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].data = Vec::new();
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    /// As [`Tape::backward`] but leaves the graph intact; repeated calls are
    /// replay-identical because every pass starts from fresh buffers.
    pub fn backward_retained(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_into_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn data_of(&self, idx: usize) -> &[f64] {
        let node = &self.nodes[idx];
        assert!(
            node.data.len() == node.shape.iter().product::<usize>(),
            "backward read a value consumed by relu_consuming"
        );
        &node.data
    }

    fn accumulate_into_parents(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |idx: usize| self.nodes[idx].requires;
        let acc = |idx: usize, contribution: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            match &mut grads[idx] {
                Some(buf) => {
                    for (a, b) in buf.iter_mut().zip(&contribution) {
                        *a += b;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, dims } => {
                if needs(*x) {
                    let gx = conv::grad_input(self.data_of(*w), g, dims, self.exec);
                    acc(*x, gx, grads);
                }
                if needs(*w) {
                    let gw = conv::grad_weight(self.data_of(*x), g, dims, self.exec);
                    acc(*w, gw, grads);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        acc(*b, conv::grad_bias(g, dims), grads);
                    }
                }
            }
            Op::Relu { x } => {
                // The mask comes from this node's own output: y > 0 iff the
                // input was > 0, and the buffer is intact even when the input
                // was consumed by relu_consuming.
                if needs(*x) {
                    acc(*x, ops::relu_backward(self.data_of(i), g), grads);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                training,
            } => {
                let shape = &self.nodes[i].shape;
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let (gx, ggamma, gbeta) = ops::bn_backward(
                    self.data_of(*x),
                    n,
                    c,
                    s,
                    self.data_of(*gamma),
                    mean,
                    invstd,
                    *training,
                    g,
                );
                if needs(*x) {
                    acc(*x, gx, grads);
                }
                if needs(*gamma) {
                    acc(*gamma, ggamma, grads);
                }
                if needs(*beta) {
                    acc(*beta, gbeta, grads);
                }
            }
            Op::Gap { x } => {
                if needs(*x) {
                    let shape = &self.nodes[*x].shape;
                    let (n, c) = (shape[0], shape[1]);
                    let s = shape[2] * shape[3] * shape[4];
                    acc(*x, ops::gap_backward(g, n, c, s), grads);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[*x].shape;
                let (n, f) = (xs[0], xs[1]);
                let o = self.nodes[*w].shape[0];
                let (gx, gw, gb) =
                    ops::linear_backward(self.data_of(*x), self.data_of(*w), g, n, f, o);
                if needs(*x) {
                    acc(*x, gx, grads);
                }
                if needs(*w) {
                    acc(*w, gw, grads);
                }
                if needs(*b) {
                    acc(*b, gb, grads);
                }
            }
            Op::Mse { pred, target } => {
                let (gp, gt) =
                    ops::mse_backward(self.data_of(*pred), self.data_of(*target), g[0]);
                if needs(*pred) {
                    acc(*pred, gp, grads);
                }
                if needs(*target) {
                    acc(*target, gt, grads);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if needs(*b) {
                    acc(*b, g.to_vec(), grads);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_with_grad(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        let t = Tensor::new(shape.to_vec(), data)
            .unwrap()
            .with_requires_grad();
        tape.leaf(&t)
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // y = x + x, loss = mean(y^2) over one element => dloss/dx = 2 * 2x = 8
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, &[1], vec![2.0]);
        let target = tape.leaf(&Tensor::zeros(vec![1]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.mse_loss(y, target).unwrap();
        assert_eq!(tape.value(loss), &[16.0]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[16.0]);
        assert!(grads.get(target).is_none());
        assert!(tape.is_empty(), "backward without retain clears the tape");
    }

    #[test]
    fn backward_is_replay_identical() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, &[2], vec![1.0, -3.0]);
        let r = tape.relu(x);
        let t = tape.leaf(&Tensor::new(vec![2], vec![2.0, 1.0]).unwrap());
        let loss = tape.mse_loss(r, t).unwrap();
        let g1 = tape.backward_retained(loss).unwrap();
        let g2 = tape.backward_retained(loss).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
        // relu kills the gradient of the negative lane
        assert_eq!(g1.get(x).unwrap()[1], 0.0);
    }

    #[test]
    fn relu_consuming_matches_relu_and_empties_its_input() {
        let data = vec![1.5, -0.25, 0.0, 3.0];
        let (mut ta, mut tb) = (Tape::new(), Tape::new());
        let xa = leaf_with_grad(&mut ta, &[4], data.clone());
        let xb = leaf_with_grad(&mut tb, &[4], data.clone());
        let ba = ta.add(xa, xa).unwrap();
        let bb = tb.add(xb, xb).unwrap();
        let ra = ta.relu(ba);
        let rb = tb.relu_consuming(bb);
        assert_eq!(ta.value(ra), tb.value(rb));
        assert!(tb.value(bb).is_empty(), "input buffer moved into the output");

        let t = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (la, lb) = (ta.leaf(&t), tb.leaf(&t));
        let (l1, l2) = (ta.mse_loss(ra, la).unwrap(), tb.mse_loss(rb, lb).unwrap());
        let ga = ta.backward(l1).unwrap();
        let gb = tb.backward(l2).unwrap();
        assert_eq!(ga.get(xa).unwrap(), gb.get(xb).unwrap());
    }

    #[test]
    #[should_panic(expected = "consumed")]
    fn reading_a_consumed_value_in_backward_panics() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, &[1, 2], vec![1.0, 2.0]);
        let w = leaf_with_grad(&mut tape, &[2, 2], vec![1.0; 4]);
        let b = leaf_with_grad(&mut tape, &[2], vec![0.0; 2]);
        let x2 = tape.linear(x, w, b).unwrap();
        // x2 feeds another linear (whose backward re-reads it) and is then
        // consumed: invalid use, caught during the sweep.
        let y = tape.linear(x2, w, b).unwrap();
        let r = tape.relu_consuming(x2);
        let s = tape.add(y, r).unwrap();
        let t = tape.leaf(&Tensor::zeros(vec![1, 2]));
        let loss = tape.mse_loss(s, t).unwrap();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, &[2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn small_conv_chain_end_to_end() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
        let w = leaf_with_grad(&mut tape, &[1, 1, 3, 3, 3], vec![1.0; 27]);
        let b = leaf_with_grad(&mut tape, &[1], vec![0.5]);
        let y = tape.conv3d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &[27.5]);
        let pooled = tape.global_avg_pool(y).unwrap();
        let t = tape.leaf(&Tensor::new(vec![1, 1], vec![25.5]).unwrap());
        let loss = tape.mse_loss(pooled, t).unwrap();
        assert_eq!(tape.value(loss), &[4.0]);
        let grads = tape.backward(loss).unwrap();
        // dloss/dy = 2 * (27.5 - 25.5) = 4, dy/dw_i = x_i = 1, dy/db = 1
        assert_eq!(grads.get(w).unwrap(), &vec![4.0; 27][..]);
        assert_eq!(grads.get(b).unwrap(), &[4.0]);
        assert!(grads.get(x).is_none());
    }
}
