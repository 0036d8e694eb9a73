//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! node indices are already a topological order. [`Graph::backward`] walks the
//! list once in reverse, calling each node's [`Backward`] rule.
//!
//! Gradients are kept only for leaves created with [`Graph::leaf`] and
//! `requires_grad = true`; they accumulate across backward calls until
//! [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one primitive.
///
/// `inputs` are the values of the node's inputs in recording order; the
/// returned vector must have the same length, with `None` for inputs that
/// receive no gradient.
pub trait Backward {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;

    /// Like [`Backward::backward`], told which inputs need a gradient so
    /// expensive rules can skip the others.
    fn backward_masked(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let _ = needed;
        self.backward(inputs, output, grad)
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node { value, requires_grad, inputs: Vec::new(), rule: None, grad: None })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros of the leaf's shape if none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records an operation whose value was computed by the caller.
    ///
    /// The node only keeps its rule when at least one input requires a
    /// gradient; otherwise it is stored as a constant.
    pub fn record(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.push(Node { value, requires_grad, inputs: inputs.to_vec(), rule: Some(rule), grad: None })
        } else {
            self.constant(value)
        }
    }

    /// Same as [`Graph::record`]; the entry point for op implementations
    /// outside this crate.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        self.record(inputs, value, rule)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::Rank(shape));
        }
        self.backward_with_seed(root, Tensor::ones(&shape))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor) -> Result<()> {
        self.value(root).check_same_shape(&seed)?;
        let mut pending: Vec<Option<Tensor>> = Vec::new();
        pending.resize_with(root.0 + 1, || None);
        pending[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(grad) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = node.rule.as_ref() else {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&grad)?,
                    None => node.grad = Some(grad),
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needed: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let grads = rule.backward_masked(&inputs, &node.value, &grad, &needed)?;
            if grads.len() != node.inputs.len() {
                return Err(Error::Dimension(format!(
                    "{}: backward returned {} gradients for {} inputs",
                    rule.name(),
                    grads.len(),
                    node.inputs.len()
                )));
            }
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                self.nodes[input.0].value.check_same_shape(&g).map_err(|e| {
                    Error::Dimension(format!("{}: gradient shape: {}", rule.name(), e))
                })?;
                match pending[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => pending[input.0] = Some(g),
                }
            }
        }
        Ok(())
    }
}

// Elementwise and reduction primitives.

struct AddRule;
impl Backward for AddRule {
    fn name(&self) -> &str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct SubRule;
impl Backward for SubRule {
    fn name(&self) -> &str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])
    }
}

struct MulRule;
impl Backward for MulRule {
    fn name(&self) -> &str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(x[1], |g, b| g * b)?), Some(g.zip_map(x[0], |g, a| g * a)?)])
    }
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn name(&self) -> &str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

struct ShiftRule;
impl Backward for ShiftRule {
    fn name(&self) -> &str {
        "add_scalar"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone())])
    }
}

struct SigmoidRule;
impl Backward for SigmoidRule {
    fn name(&self) -> &str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(y, |g, s| g * s * (1.0 - s))?)])
    }
}

struct ExpRule;
impl Backward for ExpRule {
    fn name(&self) -> &str {
        "exp"
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(y, |g, e| g * e)?)])
    }
}

struct LogRule;
impl Backward for LogRule {
    fn name(&self) -> &str {
        "log"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(x[0], |g, v| g / v)?)])
    }
}

struct SoftplusRule;
impl Backward for SoftplusRule {
    fn name(&self) -> &str {
        "softplus"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(x[0], |g, v| g * sigmoid(v))?)])
    }
}

struct SquareRule;
impl Backward for SquareRule {
    fn name(&self) -> &str {
        "square"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(x[0], |g, v| 2.0 * g * v)?)])
    }
}

struct ClampRule {
    lo: f64,
    hi: f64,
}
impl Backward for ClampRule {
    fn name(&self) -> &str {
        "clamp"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (lo, hi) = (self.lo, self.hi);
        Ok(vec![Some(g.zip_map(x[0], |g, v| if v >= lo && v <= hi { g } else { 0.0 })?)])
    }
}

struct SumRule;
impl Backward for SumRule {
    fn name(&self) -> &str {
        "sum"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(x[0].shape(), g.item()?))])
    }
}

struct MeanRule;
impl Backward for MeanRule {
    fn name(&self) -> &str {
        "mean"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let n = x[0].numel().max(1) as f64;
        Ok(vec![Some(Tensor::full(x[0].shape(), g.item()? / n))])
    }
}

struct ReshapeRule;
impl Backward for ReshapeRule {
    fn name(&self) -> &str {
        "reshape"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.reshape(x[0].shape())?)])
    }
}

struct ConcatRule;
impl Backward for ConcatRule {
    fn name(&self) -> &str {
        "concat"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(x.len());
        for part in x {
            let rows = part.shape()[0];
            out.push(Some(g.slice_batch(start, rows)?));
            start += rows;
        }
        Ok(out)
    }
}

struct SelectRowsRule(Vec<usize>);
impl Backward for SelectRowsRule {
    fn name(&self) -> &str {
        "select_rows"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut dx = Tensor::zeros(x[0].shape());
        let row = if x[0].shape()[0] == 0 { 0 } else { x[0].numel() / x[0].shape()[0] };
        for (k, &r) in self.0.iter().enumerate() {
            let src = &g.data()[k * row..(k + 1) * row];
            dx.data_mut()[r * row..(r + 1) * row].iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        Ok(vec![Some(dx)])
    }
}

/// Picks one entry per row of a `[N, K]` tensor.
struct PickRule(Vec<usize>);
impl Backward for PickRule {
    fn name(&self) -> &str {
        "pick"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (_, k) = x[0].dims2()?;
        let mut dx = Tensor::zeros(x[0].shape());
        for (row, &col) in self.0.iter().enumerate() {
            dx.data_mut()[row * k + col] = g.data()[row];
        }
        Ok(vec![Some(dx)])
    }
}

/// Scales each row of a tensor by a per-row constant.
struct RowScaleRule(Vec<f64>);
impl Backward for RowScaleRule {
    fn name(&self) -> &str {
        "row_scale"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(scale_rows(g, &self.0, x[0].shape()[0]))])
    }
}

fn scale_rows(t: &Tensor, factors: &[f64], rows: usize) -> Tensor {
    let row = if rows == 0 { 0 } else { t.numel() / rows };
    let mut out = t.clone();
    for (r, chunk) in out.data_mut().chunks_mut(row.max(1)).enumerate().take(rows) {
        chunk.iter_mut().for_each(|v| *v *= factors[r]);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(&[a, b], v, Box::new(AddRule)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(&[a, b], v, Box::new(SubRule)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(&[a, b], v, Box::new(MulRule)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.record(&[a], v, Box::new(ScaleRule(k)))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.record(&[a], v, Box::new(ShiftRule))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.record(&[a], v, Box::new(SigmoidRule))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.record(&[a], v, Box::new(ExpRule))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.record(&[a], v, Box::new(LogRule))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.record(&[a], v, Box::new(SoftplusRule))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.record(&[a], v, Box::new(SquareRule))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.record(&[a], v, Box::new(ClampRule { lo, hi }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(&[a], v, Box::new(SumRule))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.record(&[a], v, Box::new(MeanRule))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(&[a], v, Box::new(ReshapeRule)))
    }

    /// Concatenation along the leading (batch) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values)?;
        Ok(self.record(parts, v, Box::new(ConcatRule)))
    }

    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(a, &rows)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a).select_rows(rows)?;
        Ok(self.record(&[a], v, Box::new(SelectRowsRule(rows.to_vec()))))
    }

    /// `out[i] = x[i, cols[i]]` for a `[N, K]` input.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        if cols.len() != n {
            return Err(Error::Dimension(format!("pick: {} indices for {} rows", cols.len(), n)));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::Label(format!("column {} out of range for {} columns", bad, k)));
        }
        let data = self.value(a).data();
        let v = Tensor::new(&[n], cols.iter().enumerate().map(|(i, &c)| data[i * k + c]).collect())?;
        Ok(self.record(&[a], v, Box::new(PickRule(cols.to_vec()))))
    }

    /// Multiplies row `i` (leading axis) by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let rows = *self.value(a).shape().first().unwrap_or(&0);
        if factors.len() != rows {
            return Err(Error::Dimension(format!("scale_rows: {} factors for {} rows", factors.len(), rows)));
        }
        let v = scale_rows(self.value(a), factors, rows);
        Ok(self.record(&[a], v, Box::new(RowScaleRule(factors.to_vec()))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0), true);
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn constant_root_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.scale(c, 2.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad_or_zeros(x), Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Rank(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
        let sq = g.square(x);
        let y = g.sum(sq);
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first.scale(2.0));
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
