use crate::ad::ParamStore;
use crate::error::Result;
use crate::rng::RngStream;

use super::backend::Backend;

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    weight: usize,
    bias: usize,
}

/// Fully connected network: `layers` linear maps with tanh between them and
/// a linear output. Hidden layers use Glorot-uniform weights and zero biases;
/// the output layer starts with zero weights and a constant bias, so the
/// freshly initialized network is the constant `output_bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    input: usize,
    output: usize,
    layers: Vec<Dense>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        output_bias: f64,
        rng: &mut RngStream,
    ) -> Self {
        assert!(layers >= 1, "an MLP needs at least one layer");
        let mut dense = Vec::with_capacity(layers);
        for k in 0..layers {
            let fan_in = if k == 0 { input } else { hidden };
            let last = k + 1 == layers;
            let fan_out = if last { output } else { hidden };
            let (w, b) = if last {
                (vec![0.0; fan_in * fan_out], vec![output_bias; fan_out])
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect();
                (w, vec![0.0; fan_out])
            };
            let weight = store.push(format!("{name}.{k}.w"), fan_in, fan_out, w);
            let bias = store.push(format!("{name}.{k}.b"), 1, fan_out, b);
            dense.push(Dense { weight, bias });
        }
        Self { input, output, layers: dense }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let mut h = be.linear(x, self.layers[0].weight, self.layers[0].bias)?;
        for layer in &self.layers[1..] {
            let a = be.tanh(&h)?;
            h = be.linear(&a, layer.weight, layer.bias)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backend::EvalBackend;
    use crate::tensor::Tensor;

    #[test]
    fn fresh_network_outputs_its_bias() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "s", 3, 8, 3, 2, 1.0, &mut RngStream::new(0));
        assert_eq!(store.slices().len(), 6);
        assert!(store.layout_is_exact());
        let x = Tensor::from_rows(&[[0.3, -2.0, 5.0], [1.0, 1.0, 1.0]]);
        let out = mlp.forward(&mut EvalBackend::new(&store), &x).unwrap();
        assert_eq!(out, Tensor::ones(2, 2));
    }

    #[test]
    fn single_layer_is_affine() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "t", 2, 4, 1, 1, 0.0, &mut RngStream::new(0));
        store.values_mut().copy_from_slice(&[2.0, -1.0, 0.5]);
        let out = mlp.forward(&mut EvalBackend::new(&store), &Tensor::row_vector(&[3.0, 4.0])).unwrap();
        assert_eq!(out.item(), 2.0 * 3.0 - 4.0 + 0.5);
    }

    #[test]
    fn glorot_bounds() {
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "s", 10, 64, 3, 5, 0.0, &mut RngStream::new(1));
        let limit = (6.0f64 / 74.0).sqrt();
        assert!(store.slice_values(0).iter().all(|w| w.abs() <= limit));
        assert!(store.slice_values(0).iter().any(|w| w.abs() > 0.5 * limit));
    }
}
