use super::ops::{self, BnCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Dense { input: Var, weights: Var, bias: Var },
    LeakyRelu { input: Var, slope: T },
    Sigmoid { input: Var },
    BatchNorm { input: Var, scale: Var, shift: Var, cache: BnCache<T> },
    Add { a: Var, b: Var },
    Reshape { input: Var },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, which makes the tape a valid
/// topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(Op::Conv2d { input, kernel, bias }, out))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(Op::Dense { input, weights, bias }, out))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(input), slope);
        self.push(Op::LeakyRelu { input, slope }, out)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        self.push(Op::Sigmoid { input }, out)
    }

    /// Training-mode batch normalization. Returns the output and the batch
    /// mean and variance per channel.
    pub fn batch_norm(&mut self, input: Var, scale: Var, shift: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (out, cache) = ops::batch_norm_train(
            self.value(input),
            self.value(scale).data(),
            self.value(shift).data(),
        )?;
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let v = self.push(Op::BatchNorm { input, scale, shift, cache }, out);
        Ok((v, mean, var))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { input }, out))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = ops::mse_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Op::Mse { pred, target }, Tensor::scalar(loss)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff(
                "backward called before the loss was recorded on this tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (gx, gk, gb) = ops::conv2d_backward(self.value(*input), self.value(*kernel), &g)?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *kernel, gk)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::Dense { input, weights, bias } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*input), self.value(*weights), &g)?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *weights, gw)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::LeakyRelu { input, slope } => {
                    let gx = ops::leaky_relu_backward(self.value(*input), *slope, &g);
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Sigmoid { input } => {
                    let gx = ops::sigmoid_backward(&node.value, &g);
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::BatchNorm { input, scale, shift, cache } => {
                    let (gx, gs, gb) = ops::batch_norm_backward(cache, self.value(*scale).data(), &g)?;
                    accumulate(&mut grads, *input, gx)?;
                    let n = gs.len();
                    accumulate(&mut grads, *scale, Tensor::new(vec![n], gs)?)?;
                    accumulate(&mut grads, *shift, Tensor::new(vec![n], gb)?)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, g.reshape(shape)?)?;
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let gs = g.data()[0];
                    accumulate(&mut grads, *pred, ops::mse_loss_backward(p, t, gs))?;
                    accumulate(&mut grads, *target, ops::mse_loss_backward(t, p, gs))?;
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::Autodiff(format!(
                    "gradient shape {:?} does not match {:?}",
                    g.shape(),
                    acc.shape()
                )));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_one_by_one_hand_derivative() {
        let (x, w, t) = (1.5f64, -0.7, 0.4);
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![1, 1], vec![x]).unwrap());
        let wv = tape.leaf(Tensor::new(vec![1, 1], vec![w]).unwrap());
        let bv = tape.leaf(Tensor::zeros(vec![1]));
        let tv = tape.leaf(Tensor::new(vec![1, 1], vec![t]).unwrap());
        let y = tape.dense(xv, wv, bv).unwrap();
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected = 2.0 * x * (x * w - t);
        assert!((g.wrt(wv).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(vec![2, 2], 1.0));
        let unused = tape.leaf(Tensor::full(vec![3], 5.0));
        let s = tape.sigmoid(a);
        let t = tape.leaf(Tensor::zeros(vec![2, 2]));
        let loss = tape.mse(s, t).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(vec![3]));
        assert!(g.wrt(a).data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn backward_without_forward_is_error() {
        let tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Autodiff(_))));

        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(v), Err(Error::Autodiff(_))));
    }
}
