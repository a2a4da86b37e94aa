use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arch::{Activation, ArchitectureSpec, LayerLayout, Parameterization};
use crate::blob;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A feed-forward network: an architecture plus one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: ArchitectureSpec,
    theta: Vec<f64>,
}

/// Cached intermediate values of a batched forward pass.
///
/// `inputs[l]` is the input to layer `l` (so `inputs[0]` is the data) and
/// `pre[l]` its pre-activation. The output is `pre[last]`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }

    /// Post-activation of hidden layer `i` (0-based).
    pub fn hidden(&self, i: usize) -> &Array2<f64> {
        &self.inputs[i + 1]
    }
}

impl Network {
    pub fn new(spec: ArchitectureSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_params();
        if theta.len() != n {
            return Err(Error::dims("theta", n, theta.len()));
        }
        Ok(Self { spec, theta })
    }

    pub fn zeros(spec: ArchitectureSpec) -> Result<Self> {
        let n = spec.num_params();
        Self::new(spec, vec![0.0; n])
    }

    /// Random initialization for deterministic training: standard normal
    /// weights under NTK, otherwise He-normal for ReLU-like activations and
    /// Xavier-normal for tanh. Biases start at zero.
    pub fn init(spec: ArchitectureSpec, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for l in net.spec.layouts() {
            let std = match (net.spec.parameterization, net.spec.activation) {
                (Parameterization::Ntk, _) => 1.0,
                (_, Activation::Tanh) => (2.0 / (l.fan_in + l.fan_out) as f64).sqrt(),
                _ => (2.0 / l.fan_in as f64).sqrt(),
            };
            for w in &mut net.theta[l.weight_offset..l.bias_offset] {
                let e: f64 = rng.sample(StandardNormal);
                *w = std * e;
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::dims("theta", self.theta.len(), theta.len()));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.spec.clone(), theta)
    }

    fn layer_views(&self, l: &LayerLayout) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape(
            (l.fan_out, l.fan_in),
            &self.theta[l.weight_offset..l.bias_offset],
        )
        .expect("layout matches theta");
        let b = ArrayView1::from(&self.theta[l.bias_offset..l.end()]);
        (w, b)
    }

    pub fn weights(&self, layer: usize) -> Option<ArrayView2<'_, f64>> {
        let layouts = self.spec.layouts();
        layouts.get(layer).map(|l| self.layer_views(l).0)
    }

    pub fn biases(&self, layer: usize) -> Option<ArrayView1<'_, f64>> {
        let layouts = self.spec.layouts();
        layouts.get(layer).map(|l| self.layer_views(l).1)
    }

    /// Output for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::dims("layer 0 input", self.spec.input_dim, x.len()))?;
        Ok(self.forward_batch(x)?.row(0).to_vec())
    }

    /// Outputs for a batch of inputs `[n x input_dim]`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let layouts = self.spec.layouts();
        let last = layouts.len() - 1;
        let mut h = x.to_owned();
        for (i, l) in layouts.iter().enumerate() {
            let mut z = self.affine(l, h.view());
            if i < last {
                let act = self.spec.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let layouts = self.spec.layouts();
        let mut inputs = Vec::with_capacity(layouts.len());
        let mut pre = Vec::with_capacity(layouts.len());
        inputs.push(x.to_owned());
        for (i, l) in layouts.iter().enumerate() {
            let z = self.affine(l, inputs[i].view());
            if i + 1 < layouts.len() {
                let act = self.spec.activation;
                inputs.push(z.mapv(|v| act.apply(v)));
            }
            pre.push(z);
        }
        Ok(ForwardTrace { inputs, pre })
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::dims("layer 0 input", self.spec.input_dim, x.ncols()));
        }
        Ok(())
    }

    fn affine(&self, l: &LayerLayout, h: ArrayView2<'_, f64>) -> Array2<f64> {
        let (w, b) = self.layer_views(l);
        let scale = self.spec.weight_scale(l.fan_in);
        let mut z = h.dot(&w.t());
        if scale != 1.0 {
            z *= scale;
        }
        z += &b;
        z
    }

    /// Reverse pass. `d_out` is the derivative of a scalar objective with
    /// respect to the network outputs `[n x output_dim]`; the parameter
    /// gradient is accumulated into `grad`. Returns the derivative with
    /// respect to the inputs.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_out: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Result<Array2<f64>> {
        if grad.len() != self.theta.len() {
            return Err(Error::dims("gradient buffer", self.theta.len(), grad.len()));
        }
        let out = trace.output();
        if d_out.dim() != out.dim() {
            return Err(Error::dims(
                "output gradient",
                out.len(),
                d_out.len(),
            ));
        }
        let layouts = self.spec.layouts();
        let act = self.spec.activation;
        let mut dz = d_out.to_owned();
        for (i, l) in layouts.iter().enumerate().rev() {
            let scale = self.spec.weight_scale(l.fan_in);
            let (w, _) = self.layer_views(l);
            let a = &trace.inputs[i];
            let mut dw = dz.t().dot(a);
            if scale != 1.0 {
                dw *= scale;
            }
            let gw = &mut grad[l.weight_offset..l.bias_offset];
            for (g, d) in gw.iter_mut().zip(dw.iter()) {
                *g += d;
            }
            let db = dz.sum_axis(Axis(0));
            for (g, d) in grad[l.bias_offset..l.end()].iter_mut().zip(db.iter()) {
                *g += d;
            }
            let mut da = dz.dot(&w);
            if scale != 1.0 {
                da *= scale;
            }
            if i > 0 {
                let z_prev = &trace.pre[i - 1];
                ndarray::Zip::from(&mut da)
                    .and(z_prev)
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            dz = da;
        }
        Ok(dz)
    }

    /// Jacobian of the outputs at a single input with respect to all
    /// parameters, `[output_dim x num_params]`.
    pub fn jacobian(&self, x: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        let x2 = x.insert_axis(Axis(0));
        let trace = self.forward_trace(x2)?;
        let k = self.spec.output_dim;
        let mut jac = Array2::zeros((k, self.theta.len()));
        let mut seed = Array2::zeros((1, k));
        for o in 0..k {
            seed.fill(0.0);
            seed[[0, o]] = 1.0;
            let mut row = vec![0.0; self.theta.len()];
            self.backward(&trace, seed.view(), &mut row)?;
            jac.row_mut(o).assign(&Array1::from(row));
        }
        Ok(jac)
    }

    /// Sets one hidden-unit bias; used to inject noise draws.
    pub fn set_bias(&mut self, layer: usize, unit: usize, value: f64) -> Result<()> {
        let layouts = self.spec.layouts();
        let l = layouts
            .get(layer)
            .ok_or_else(|| Error::InvalidCoordinate(format!("layer {layer}")))?;
        if unit >= l.fan_out {
            return Err(Error::InvalidCoordinate(format!(
                "unit {unit} >= fan_out {} in layer {layer}",
                l.fan_out
            )));
        }
        self.theta[l.bias_offset + unit] = value;
        Ok(())
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (architecture).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = NetworkMeta {
            spec: self.spec.clone(),
            num_params: self.theta.len(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        blob::write_f64(&stem.with_extension("bin"), &self.theta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta: NetworkMeta =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        let theta = blob::read_f64(&stem.with_extension("bin"))?;
        if theta.len() != meta.num_params {
            return Err(Error::dims("stored theta", meta.num_params, theta.len()));
        }
        Self::new(meta.spec, theta)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    spec: ArchitectureSpec,
    num_params: usize,
}

/// Hidden-layer pre-activations for a single input, handy in tests.
pub fn pre_activations(net: &Network, x: &[f64], layer: usize) -> Result<Vec<f64>> {
    let xv = ArrayView2::from_shape((1, x.len()), x)
        .map_err(|_| Error::dims("layer 0 input", net.spec().input_dim, x.len()))?;
    let trace = net.forward_trace(xv)?;
    trace
        .pre
        .get(layer)
        .map(|p| p.slice(s![0, ..]).to_vec())
        .ok_or_else(|| Error::InvalidCoordinate(format!("layer {layer}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Activation;
    use crate::rng::stream_rng;

    fn unit_relu() -> Network {
        let spec = ArchitectureSpec::mlp(&[1, 1, 1], Activation::Relu).unwrap();
        Network::new(spec, vec![1.0, 0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn identity_composition() {
        assert_eq!(unit_relu().forward(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(unit_relu().forward(&[-2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn input_mismatch_names_layer() {
        let err = unit_relu().forward(&[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn theta_length_checked() {
        let spec = ArchitectureSpec::mlp(&[1, 2, 1], Activation::Relu).unwrap();
        assert!(Network::new(spec, vec![0.0; 6]).is_err());
    }

    #[test]
    fn ntk_scales_weights() {
        let mut spec = ArchitectureSpec::mlp(&[4, 1], Activation::Relu).unwrap();
        spec.parameterization = Parameterization::Ntk;
        let net = Network::new(spec, vec![1.0, 1.0, 1.0, 1.0, 0.5]).unwrap();
        let y = net.forward(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((y[0] - (4.0 / 2.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn jacobian_of_linear_model_is_features() {
        let spec = ArchitectureSpec::mlp(&[2, 1], Activation::Relu).unwrap();
        let net = Network::new(spec, vec![0.3, -0.2, 0.1]).unwrap();
        let j = net.jacobian(ndarray::arr1(&[2.0, -1.0]).view()).unwrap();
        assert_eq!(j.row(0).to_vec(), vec![2.0, -1.0, 1.0]);
    }

    #[test]
    fn save_load_is_bit_exact() {
        let spec = ArchitectureSpec::mlp(&[3, 5, 2], Activation::Tanh).unwrap();
        let net = Network::init(spec, &mut stream_rng(4, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        net.save(&stem).unwrap();
        let back = Network::load(&stem).unwrap();
        assert!(net
            .theta()
            .iter()
            .zip(back.theta())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(net.spec(), back.spec());
    }
}
