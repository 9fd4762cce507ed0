//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::ParamStore;
use crate::error::{Error, Result};

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs the scalar loss from parameter nodes bound in store
/// order; it is re-run for every perturbed evaluation, always in `f64`.
/// Returns the max over all parameter coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore<f64>, step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new();
        let bound = bind(&mut g, params);
        let loss = build(&mut g, &bound)?;
        let grads = g.backward(loss)?;
        bound
            .iter()
            .enumerate()
            .map(|(i, &id)| grads.get_or_zeros(id, params.tensor(i).shape()))
            .collect::<Vec<_>>()
    };

    let mut work = params.clone();
    let mut max_err = 0.0f64;
    for pid in 0..params.len() {
        for coord in 0..params.tensor(pid).numel() {
            let orig = work.tensor(pid).data()[coord];
            work.tensor_mut(pid).data_mut()[coord] = orig + step;
            let up = eval(&work, &build)?;
            work.tensor_mut(pid).data_mut()[coord] = orig - step;
            let down = eval(&work, &build)?;
            work.tensor_mut(pid).data_mut()[coord] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pid].data()[coord];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

fn bind(g: &mut Graph<f64>, params: &ParamStore<f64>) -> Vec<NodeId> {
    (0..params.len()).map(|i| g.input(params.tensor(i).clone())).collect()
}

fn eval<F>(params: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let loss = build(&mut g, &bound)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_numerically_exact() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(3.0)).unwrap();
        let err = grad_check(&params, 1e-3, |g, bound| g.mul(bound[0], bound[0])).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn composite_network_passes_at_1e4() {
        // affine -> tanh -> (implicit softmax inside cross-entropy)
        let mut rng = crate::rng::seeded(11);
        use rand::Rng;
        let mut params = ParamStore::new();
        let wv: Vec<f64> = (0..12).map(|_| rng.random_range(-0.8..0.8)).collect();
        let bv: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let xv: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        params.insert("w", Tensor::from_vec(vec![3, 4], wv).unwrap()).unwrap();
        params.insert("b", Tensor::from_vec(vec![4], bv).unwrap()).unwrap();
        params.insert("x", Tensor::from_vec(vec![1, 3], xv).unwrap()).unwrap();
        let err = grad_check(&params, 1e-3, |g, bound| {
            let h = g.affine(bound[2], bound[0], bound[1])?;
            let a = g.tanh(h)?;
            let flat = g.reshape(a, vec![4])?;
            g.cross_entropy(flat, 2)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn lstm_step_passes_at_1e4() {
        let mut rng = crate::rng::seeded(13);
        use rand::Rng;
        let m = 3;
        let input = 2;
        let mut params = ParamStore::new();
        let mut randt = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.7..0.7)).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        params.insert("wx", randt(vec![input, 4 * m])).unwrap();
        params.insert("wh", randt(vec![m, 4 * m])).unwrap();
        params.insert("b", randt(vec![4 * m])).unwrap();
        params.insert("c0", randt(vec![1, m])).unwrap();
        params.insert("h0", randt(vec![1, m])).unwrap();
        params.insert("x", randt(vec![1, input])).unwrap();
        let err = grad_check(&params, 1e-3, |g, bound| {
            let cell = super::super::graph::RecurrentCellNodes {
                wx: bound[0],
                wh: bound[1],
                b: bound[2],
            };
            let (c, h) = super::super::graph::lstm_step(g, cell, bound[3], bound[4], bound[5])?;
            let both = g.concat(&[c, h], 1)?;
            let flat = g.reshape(both, vec![2 * m])?;
            g.cross_entropy(flat, 1)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn conv_softmax_chain_passes_at_1e4() {
        let mut rng = crate::rng::seeded(17);
        use rand::Rng;
        let mut params = ParamStore::new();
        let mut randt = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.6..0.6)).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        params.insert("x", randt(vec![5, 4, 1])).unwrap();
        params.insert("f", randt(vec![2, 3, 3, 1])).unwrap();
        params.insert("fb", randt(vec![2])).unwrap();
        let err = grad_check(&params, 1e-3, |g, bound| {
            let y = g.conv2d(bound[0], bound[1], bound[2], (2, 2))?;
            let flat = g.reshape(y, vec![3 * 2 * 2])?;
            g.cross_entropy(flat, 5)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
