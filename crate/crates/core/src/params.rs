//! Named-parameter traversal, shared by the optimizer, checkpointing and
//! gradient checks. Traversal order is fixed by construction order, so a
//! name list is deterministic for a given config.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait VisitParams<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>));
}

/// Flattened (name, tensor) list in traversal order.
pub fn named_tensors<S: Scalar, P: VisitParams<S>>(params: &P) -> Vec<(String, Tensor<S>)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
