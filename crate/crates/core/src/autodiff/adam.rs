use serde::{Deserialize, Serialize};

use super::{Graph, GraphError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied after the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(GraphError::InvalidOptimizer(format!("{self:?}")))
        }
    }
}

/// First/second moment estimates for each parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self, GraphError> {
        config.validate()?;
        Ok(AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// One bias-corrected update over `(name, values, gradient)` triples. The
    /// triples must arrive in the same order on every call. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), GraphError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut [f64], &'a [f64])>,
    {
        let params: Vec<_> = params.into_iter().collect();
        for (name, values, grad) in &params {
            if values.len() != grad.len() {
                return Err(GraphError::InvalidShape(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    grad.len(),
                    values.len()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(GraphError::NonFiniteGradient(name.to_string()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, v, _)| vec![0.0; v.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.1.len()) {
            return Err(GraphError::InvalidShape(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((_, values, grad), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                values[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                values[i] -= c.learning_rate * c.weight_decay * values[i];
            }
        }
        Ok(())
    }

    /// Updates every trainable parameter of `graph` from its stored gradient.
    pub fn step_graph(&mut self, graph: &mut Graph) -> Result<(), GraphError> {
        let mut triples = Vec::new();
        for p in graph.params_mut().iter_mut().filter(|p| p.trainable) {
            let grad = p
                .tensor
                .grad()
                .map(<[f64]>::to_vec)
                .ok_or_else(|| GraphError::NonFiniteGradient(format!("{} (no gradient)", p.name)))?;
            triples.push((p.name.as_str(), grad, p.tensor.data_mut()));
        }
        // values borrow mutably from the tensor, so gradients were copied out first
        let refs: Vec<(&str, &mut [f64], &[f64])> = triples
            .iter_mut()
            .map(|(n, g, v)| (*n, &mut **v, g.as_slice()))
            .collect();
        self.step(refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        let mut x = vec![1.5, -2.0];
        st.step([("x", x.as_mut_slice(), [0.0, 0.0].as_slice())]).unwrap();
        assert_eq!(x, vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        for g in [3.7, -0.02, 1e-3] {
            let mut st = AdamState::new(AdamConfig::with_lr(1e-3)).unwrap();
            let mut x = [0.0];
            st.step([("x", x.as_mut_slice(), [g].as_slice())]).unwrap();
            assert!((x[0] + 1e-3 * f64::signum(g)).abs() < 1e-6, "g={g} x={}", x[0]);
        }
    }

    #[test]
    fn descends_quadratic() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.1)).unwrap();
        let mut x = [0.0];
        for _ in 0..100 {
            let g = [2.0 * (x[0] - 3.0)];
            st.step([("x", x.as_mut_slice(), g.as_slice())]).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 0.1, "x = {}", x[0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        let mut x = [1.0];
        let err = st
            .step([("layer.weight", x.as_mut_slice(), [f64::NAN].as_slice())])
            .unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        assert_eq!(x, [1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        let mut x = [0.5, 0.5, 0.5];
        for k in 0..20 {
            let g = [(k as f64).sin(), -(k as f64), 0.0];
            st.step([("x", x.as_mut_slice(), g.as_slice())]).unwrap();
        }
        assert!(st.v[0].iter().all(|&v| v >= 0.0));
        assert_eq!(st.step, 20);
    }
}
