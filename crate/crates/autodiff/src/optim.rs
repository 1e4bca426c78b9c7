use crate::tensor::Tensor;

/// Adam with bias correction. One moment pair per parameter slot; the slot
/// order must stay fixed across calls to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is the gradient for `params[i]`; a
    /// missing gradient leaves that parameter (and its moments) untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new([2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[Some(g)]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new([1], vec![5.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Tensor::new([1], vec![2.0 * (p.data()[0] - 2.0)]).unwrap();
            opt.step(&mut [&mut p], &[Some(g)]);
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-2);
    }
}
