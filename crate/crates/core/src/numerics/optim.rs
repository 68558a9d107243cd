use super::{Array, Gradients, ParamStore, Scalar};
use crate::error::{Error, Result};

/// Adam with a linearly decaying learning rate:
/// `lr(t) = base_lr * max(0, 1 - t / total_steps)`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub base_lr: T,
    pub total_steps: usize,
    step: usize,
    first: Vec<Array<T>>,
    second: Vec<Array<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, base_lr: T, total_steps: usize) -> Self {
        let zeros: Vec<Array<T>> = params
            .iter()
            .map(|(_, a)| Array::zeros(a.rows(), a.cols()))
            .collect();
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            base_lr,
            total_steps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, t: usize) -> T {
        if self.total_steps == 0 {
            return T::zero();
        }
        let frac = T::count(t) / T::count(self.total_steps);
        self.base_lr * (T::one() - frac).max(T::zero())
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> T {
        self.lr_at(self.step)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Shape {
                op: "adam",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for id in params.ids() {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = params.get_mut(id);
            let g = grads.get_ref(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "adam",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
            for k in 0..p.len() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                let mk = self.beta1 * m.data()[k] + (T::one() - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (T::one() - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                if lr == T::zero() {
                    continue;
                }
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                p.data_mut()[k] = p.data()[k] - update;
            }
        }
        Ok(())
    }
}
