use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check(
    f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    finite_diff_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), h, None)
}

/// Multi-input variant. `coords` restricts the check to selected
/// `(input, element)` pairs; `None` checks every element of every input.
pub fn finite_diff_check_many(
    f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    xs: &[Tensor],
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Validation(format!("finite-difference step {h} must be > 0")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(xs)
        .map(|(&id, x)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = xs
                .iter()
                .enumerate()
                .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut inputs = xs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        inputs[i].data_mut()[j] = orig + h;
        let up = eval(&inputs)?;
        inputs[i].data_mut()[j] = orig - h;
        let down = eval(&inputs)?;
        inputs[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
