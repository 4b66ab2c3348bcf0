use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Stochastic gradient descent with classical momentum:
/// `v ← m·v − lr·g`, `p ← p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ModelParams<f32>, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            lr: learning_rate as f32,
            momentum: momentum as f32,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Applies one update. `grads` follows the canonical parameter order;
    /// `None` counts as a zero gradient.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != self.velocity.len() || params.len() != self.velocity.len() {
            return Err(Error::Usage(format!(
                "optimizer holds {} tensors, got {} gradients for {} parameters",
                self.velocity.len(),
                grads.len(),
                params.len()
            )));
        }
        for ((t, vel), g) in params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let p = t.data_mut();
            match g {
                Some(g) => {
                    if g.len() != p.len() {
                        return Err(Error::shape("sgd gradient", &[g.len()], &[p.len()]));
                    }
                    for ((p, v), &g) in p.iter_mut().zip(vel.iter_mut()).zip(g) {
                        *v = self.momentum * *v - self.lr * g;
                        *p += *v;
                    }
                }
                None if self.momentum != 0.0 => {
                    for (p, v) in p.iter_mut().zip(vel.iter_mut()) {
                        *v *= self.momentum;
                        *p += *v;
                    }
                }
                None => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(p: f32) -> ModelParams<f32> {
        ModelParams::from_tensors(vec![("p".into(), Tensor::new([1], vec![p]).unwrap())]).unwrap()
    }

    #[test]
    fn plain_step_is_p_minus_lr_g() {
        let (p0, g, lr) = (0.731_f32, -2.37_f32, 0.001);
        let mut params = single(p0);
        Sgd::new(&params, lr, 0.0).step(&mut params, &[Some(vec![g])]).unwrap();
        assert_eq!(params.get("p").unwrap().data()[0], p0 - lr as f32 * g);
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = single(1.0);
        let mut sgd = Sgd::new(&params, 0.5, 0.5);
        sgd.step(&mut params, &[Some(vec![1.0])]).unwrap();
        assert_eq!(params.get("p").unwrap().data()[0], 0.5);
        sgd.step(&mut params, &[Some(vec![1.0])]).unwrap();
        assert_eq!(params.get("p").unwrap().data()[0], -0.25);
        sgd.step(&mut params, &[None]).unwrap();
        assert_eq!(params.get("p").unwrap().data()[0], -0.625);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut params = single(1.0);
        let mut sgd = Sgd::new(&params, 0.1, 0.0);
        assert!(sgd.step(&mut params, &[]).is_err());
        assert!(sgd.step(&mut params, &[Some(vec![1.0, 2.0])]).is_err());
    }
}
